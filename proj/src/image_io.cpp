#include "patchsim/image_io.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "patchsim/common.hpp"

namespace patchsim {

namespace {

// Reads the next whitespace/comment-delimited token of a PNM header.
std::string next_header_token(std::ifstream& in, const std::string& path) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  if (tok.empty()) throw IoError("unexpected end of header in " + path);
  return tok;
}

long parse_header_int(std::ifstream& in, const std::string& path) {
  const std::string tok = next_header_token(in, path);
  try {
    std::size_t pos = 0;
    const long v = std::stol(tok, &pos);
    if (pos != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw IoError("bad integer '" + tok + "' in header of " + path);
  }
}

struct PgmHeader {
  int width, height;
  long maxval;
};

PgmHeader read_pgm_header(std::ifstream& in, const std::string& path) {
  if (!in) throw IoError("cannot open " + path);
  const std::string magic = next_header_token(in, path);
  if (magic != "P5") throw IoError(path + " is not a binary graymap (magic '" + magic + "')");
  PgmHeader h;
  h.width = static_cast<int>(parse_header_int(in, path));
  h.height = static_cast<int>(parse_header_int(in, path));
  h.maxval = parse_header_int(in, path);
  if (h.width < 1 || h.height < 1) throw IoError("bad dimensions in " + path);
  if (h.maxval < 1 || h.maxval > 65535) throw IoError("bad maxval in " + path);
  // The single whitespace byte separating header from raster was already
  // consumed by the tokenizer's trailing-delimiter read.
  return h;
}

}  // namespace

GrayImage8 read_pgm8(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  const PgmHeader h = read_pgm_header(in, path);
  if (h.maxval > 255) throw IoError(path + " has 16-bit samples, expected 8-bit");
  GrayImage8 img;
  img.width = h.width;
  img.height = h.height;
  img.pixels.resize(static_cast<std::size_t>(h.width) * h.height);
  in.read(reinterpret_cast<char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
    throw IoError("short read in " + path);
  }
  return img;
}

GrayImage16 read_pgm16(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  const PgmHeader h = read_pgm_header(in, path);
  GrayImage16 img;
  img.width = h.width;
  img.height = h.height;
  img.pixels.resize(static_cast<std::size_t>(h.width) * h.height);
  if (h.maxval > 255) {
    std::vector<std::uint8_t> raw(img.pixels.size() * 2);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size())) {
      throw IoError("short read in " + path);
    }
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
      img.pixels[i] = static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]);
    }
  } else {
    std::vector<std::uint8_t> raw(img.pixels.size());
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size())) {
      throw IoError("short read in " + path);
    }
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = raw[i];
  }
  return img;
}

void write_pgm8(const std::string& path, const GrayImage8& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << "P5\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw IoError("write failed for " + path);
}

void write_pgm16(const std::string& path, const GrayImage16& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << "P5\n" << img.width << " " << img.height << "\n65535\n";
  std::vector<std::uint8_t> raw(img.pixels.size() * 2);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    raw[2 * i] = static_cast<std::uint8_t>(img.pixels[i] >> 8);
    raw[2 * i + 1] = static_cast<std::uint8_t>(img.pixels[i] & 0xff);
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw IoError("write failed for " + path);
}

Tensor<float> to_unit_tensor(const GrayImage8& img) {
  Tensor<float> t({1, img.height, img.width});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    t[static_cast<std::int64_t>(i)] = static_cast<float>(img.pixels[i]) / 255.0f;
  }
  return t;
}

GrayImage8 from_unit_tensor(const Tensor<float>& t) {
  if (t.ndim() != 3 || t.dim(0) != 1) {
    throw ShapeError("from_unit_tensor: expected 1xHxW, got " + t.shape_string());
  }
  GrayImage8 img;
  img.height = t.dim(1);
  img.width = t.dim(2);
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const float v = t[static_cast<std::int64_t>(i)] * 255.0f;
    const int q = static_cast<int>(std::lround(v));
    img.pixels[i] = static_cast<std::uint8_t>(q < 0 ? 0 : (q > 255 ? 255 : q));
  }
  return img;
}

}  // namespace patchsim
