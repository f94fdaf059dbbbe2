#ifndef PATCHSIM_IMAGE_IO_HPP_
#define PATCHSIM_IMAGE_IO_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "patchsim/tensor.hpp"

namespace patchsim {

struct GrayImage8 {
  int width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

struct GrayImage16 {
  int width = 0, height = 0;
  std::vector<std::uint16_t> pixels;
};

// Binary portable graymaps (P5). 16-bit samples are big-endian on disk per
// the format; comments after the magic are tolerated.
GrayImage8 read_pgm8(const std::string& path);
GrayImage16 read_pgm16(const std::string& path);
void write_pgm8(const std::string& path, const GrayImage8& img);
void write_pgm16(const std::string& path, const GrayImage16& img);

// 1xHxW tensor in [0,1] (byte / 255).
Tensor<float> to_unit_tensor(const GrayImage8& img);
// Inverse quantization: round(v*255), clamped to [0,255].
GrayImage8 from_unit_tensor(const Tensor<float>& t);

}  // namespace patchsim

#endif  // PATCHSIM_IMAGE_IO_HPP_
