#ifndef PATCHSIM_TENSOR_HPP_
#define PATCHSIM_TENSOR_HPP_

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "patchsim/common.hpp"

namespace patchsim {

// Dense row-major value-semantics tensor. Rank is dynamic but in practice
// everything here is rank 1 (flattened features), rank 3 (c,h,w feature
// maps) or rank 4 (conv weights n,c,k,k).
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<std::size_t>(validate_shape()), T(0));
  }

  Tensor(std::vector<int> shape, std::vector<T> data) : shape_(std::move(shape)) {
    const std::int64_t n = validate_shape();
    if (static_cast<std::int64_t>(data.size()) != n) {
      throw ShapeError("tensor data size " + std::to_string(data.size()) +
                       " does not match shape numel " + std::to_string(n));
    }
    data_ = std::move(data);
  }

  static Tensor full(std::vector<int> shape, T value) {
    Tensor t(std::move(shape));
    t.fill(value);
    return t;
  }

  int ndim() const { return static_cast<int>(shape_.size()); }

  int dim(int i) const {
    if (i < 0 || i >= ndim()) {
      throw ShapeError("tensor dim index " + std::to_string(i) + " out of range for rank " +
                       std::to_string(ndim()));
    }
    return shape_[static_cast<std::size_t>(i)];
  }

  const std::vector<int>& shape() const { return shape_; }

  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // (c,h,w) accessors for rank-3 tensors.
  T& at(int c, int y, int x) { return data_[offset3(c, y, x)]; }
  const T& at(int c, int y, int x) const { return data_[offset3(c, y, x)]; }

  // (n,c,ky,kx) accessors for rank-4 tensors.
  T& at4(int n, int c, int ky, int kx) { return data_[offset4(n, c, ky, kx)]; }
  const T& at4(int n, int c, int ky, int kx) const { return data_[offset4(n, c, ky, kx)]; }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const {
    for (const T& v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return Tensor<U>(shape_, std::move(out));
  }

  std::string shape_string() const {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i) os << ",";
      os << shape_[i];
    }
    os << ")";
    return os.str();
  }

  const std::vector<T>& storage() const { return data_; }
  std::vector<T>& storage() { return data_; }

 private:
  std::int64_t validate_shape() const {
    std::int64_t n = 1;
    for (int d : shape_) {
      if (d < 1) {
        throw ShapeError("tensor shape has non-positive extent " + std::to_string(d));
      }
      n *= d;
    }
    return n;
  }

  std::size_t offset3(int c, int y, int x) const {
    return static_cast<std::size_t>((static_cast<std::int64_t>(c) * shape_[1] + y) * shape_[2] + x);
  }

  std::size_t offset4(int n, int c, int ky, int kx) const {
    return static_cast<std::size_t>(
        ((static_cast<std::int64_t>(n) * shape_[1] + c) * shape_[2] + ky) * shape_[3] + kx);
  }

  std::vector<int> shape_;
  std::vector<T> data_;
};

}  // namespace patchsim

#endif  // PATCHSIM_TENSOR_HPP_
