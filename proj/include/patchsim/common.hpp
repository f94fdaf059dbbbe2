#ifndef PATCHSIM_COMMON_HPP_
#define PATCHSIM_COMMON_HPP_

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace patchsim {

// Base class for everything this library throws on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad user-supplied configuration (unknown key, out-of-range value, missing
// required option). CLI maps this to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Missing files, short reads, malformed on-disk formats. Exit code 3.
class IoError : public Error {
 public:
  using Error::Error;
};

// Tensor/shape violations: dimension mismatches, kernels larger than the
// input, operations on the wrong rank.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// An architecture chain shrinks a spatial extent below 1. Carries the index
// of the offending layer descriptor (0-based).
class ShapeUnderflowError : public ShapeError {
 public:
  ShapeUnderflowError(const std::string& msg, int descriptor_index)
      : ShapeError(msg), descriptor_index(descriptor_index) {}
  int descriptor_index;
};

// Architecture string does not parse. Carries the 1-based token position.
class ArchParseError : public Error {
 public:
  ArchParseError(const std::string& msg, int token_position)
      : Error(msg), token_position(token_position) {}
  int token_position;
};

// Non-finite values where finite ones are required (gradients, losses).
// Exit code 4.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Input data cannot support the requested computation (e.g. labels are all
// one class). Exit code 5.
class DegenerateDataError : public Error {
 public:
  using Error::Error;
};

// The loaded model kind / matching mode cannot serve the requested
// operation. Exit code 6.
class CapabilityError : public Error {
 public:
  using Error::Error;
};

// Misuse of a stateful API (backward before forward, etc).
class StateError : public Error {
 public:
  using Error::Error;
};

using Rng = std::mt19937_64;

// Deterministic uniform [0,1) double from the top 53 bits. Avoids
// std::uniform_real_distribution so that streams are stable across
// standard library implementations.
inline double uniform_unit(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Uniform in [lo, hi).
inline double uniform_range(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform_unit(rng);
}

// Uniform integer in [0, n). n must be positive. Uses rejection to stay
// unbiased and reproducible.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  const std::uint64_t limit = std::uint64_t(-1) - std::uint64_t(-1) % n;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % n;
}

}  // namespace patchsim

#endif  // PATCHSIM_COMMON_HPP_
