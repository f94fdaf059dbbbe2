#ifndef PATCHSIM_LAYERS_HPP_
#define PATCHSIM_LAYERS_HPP_

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "patchsim/common.hpp"
#include "patchsim/tensor.hpp"

namespace patchsim {

// Output extent of a valid (unpadded) strided sweep: floor((in - k) / s) + 1.
inline int strided_out_extent(int in, int k, int stride, const char* axis, const char* op) {
  if (in < k) {
    throw ShapeError(std::string(op) + ": " + axis + " extent " + std::to_string(in) +
                     " is smaller than window " + std::to_string(k) +
                     ", output extent would be < 1");
  }
  return (in - k) / stride + 1;
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, no padding).
// in: (c,h,w); weight: (n,c,k,k); bias: (n); out: (n,h',w').

template <typename T>
Tensor<T> conv2d(const Tensor<T>& in, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride) {
  if (in.ndim() != 3) throw ShapeError("conv2d: input must be rank 3, got " + in.shape_string());
  if (weight.ndim() != 4) {
    throw ShapeError("conv2d: weight must be rank 4, got " + weight.shape_string());
  }
  if (weight.dim(2) != weight.dim(3)) {
    throw ShapeError("conv2d: weight window must be square, got " + weight.shape_string());
  }
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  const int c = in.dim(0), h = in.dim(1), w = in.dim(2);
  const int n = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != c) {
    throw ShapeError("conv2d: input channels " + std::to_string(c) +
                     " do not match weight channels " + std::to_string(weight.dim(1)));
  }
  if (bias.ndim() != 1 || bias.dim(0) != n) {
    throw ShapeError("conv2d: bias must have shape (" + std::to_string(n) + ")");
  }
  const int oh = strided_out_extent(h, k, stride, "height", "conv2d");
  const int ow = strided_out_extent(w, k, stride, "width", "conv2d");

  Tensor<T> out({n, oh, ow});
  for (int f = 0; f < n; ++f) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        T acc = bias[f];
        for (int ci = 0; ci < c; ++ci) {
          for (int ky = 0; ky < k; ++ky) {
            const T* irow = &in.at(ci, oy * stride + ky, ox * stride);
            const T* wrow = &weight.at4(f, ci, ky, 0);
            for (int kx = 0; kx < k; ++kx) acc += irow[kx] * wrow[kx];
          }
        }
        out.at(f, oy, ox) = acc;
      }
    }
  }
  return out;
}

template <typename T>
void conv2d_backward(const Tensor<T>& in, const Tensor<T>& weight, int stride,
                     const Tensor<T>& grad_out, Tensor<T>* grad_in, Tensor<T>* grad_weight,
                     Tensor<T>* grad_bias) {
  const int c = in.dim(0);
  const int n = weight.dim(0), k = weight.dim(2);
  const int oh = grad_out.dim(1), ow = grad_out.dim(2);
  *grad_in = Tensor<T>(in.shape());
  *grad_weight = Tensor<T>(weight.shape());
  *grad_bias = Tensor<T>({n});
  for (int f = 0; f < n; ++f) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const T g = grad_out.at(f, oy, ox);
        (*grad_bias)[f] += g;
        for (int ci = 0; ci < c; ++ci) {
          for (int ky = 0; ky < k; ++ky) {
            const T* irow = &in.at(ci, oy * stride + ky, ox * stride);
            T* gin_row = &grad_in->at(ci, oy * stride + ky, ox * stride);
            T* gw_row = &grad_weight->at4(f, ci, ky, 0);
            const T* wrow = &weight.at4(f, ci, ky, 0);
            for (int kx = 0; kx < k; ++kx) {
              gw_row[kx] += g * irow[kx];
              gin_row[kx] += g * wrow[kx];
            }
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Max pooling. Ties resolve to the smallest linear input index; the argmax
// tensor stores that index (into the flattened input) per output element so
// backward can route gradients without re-scanning.

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& in, int k, int stride, Tensor<std::int64_t>* argmax) {
  if (in.ndim() != 3) {
    throw ShapeError("max_pool2d: input must be rank 3, got " + in.shape_string());
  }
  if (k < 1 || stride < 1) throw ShapeError("max_pool2d: window and stride must be >= 1");
  const int c = in.dim(0), h = in.dim(1), w = in.dim(2);
  const int oh = strided_out_extent(h, k, stride, "height", "max_pool2d");
  const int ow = strided_out_extent(w, k, stride, "width", "max_pool2d");

  Tensor<T> out({c, oh, ow});
  Tensor<std::int64_t> arg({c, oh, ow});
  for (int ci = 0; ci < c; ++ci) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        std::int64_t best_idx = -1;
        T best = T(0);
        for (int ky = 0; ky < k; ++ky) {
          const int y = oy * stride + ky;
          for (int kx = 0; kx < k; ++kx) {
            const int x = ox * stride + kx;
            const T v = in.at(ci, y, x);
            if (best_idx < 0 || v > best) {
              best = v;
              best_idx = (static_cast<std::int64_t>(ci) * h + y) * w + x;
            }
          }
        }
        out.at(ci, oy, ox) = best;
        arg.at(ci, oy, ox) = best_idx;
      }
    }
  }
  if (argmax) *argmax = std::move(arg);
  return out;
}

template <typename T>
Tensor<T> max_pool2d_backward(const std::vector<int>& in_shape, const Tensor<std::int64_t>& argmax,
                              const Tensor<T>& grad_out) {
  Tensor<T> grad_in(in_shape);
  if (argmax.shape() != grad_out.shape()) {
    throw ShapeError("max_pool2d_backward: argmax shape " + argmax.shape_string() +
                     " does not match grad shape " + grad_out.shape_string());
  }
  for (std::int64_t i = 0; i < grad_out.numel(); ++i) grad_in[argmax[i]] += grad_out[i];
  return grad_in;
}

// ---------------------------------------------------------------------------
// ReLU.

template <typename T>
Tensor<T> relu(const Tensor<T>& in) {
  Tensor<T> out(in.shape());
  for (std::int64_t i = 0; i < in.numel(); ++i) out[i] = in[i] > T(0) ? in[i] : T(0);
  return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& in, const Tensor<T>& grad_out) {
  if (!in.same_shape(grad_out)) {
    throw ShapeError("relu_backward: shapes differ, " + in.shape_string() + " vs " +
                     grad_out.shape_string());
  }
  Tensor<T> grad_in(in.shape());
  for (std::int64_t i = 0; i < in.numel(); ++i) grad_in[i] = in[i] > T(0) ? grad_out[i] : T(0);
  return grad_in;
}

// ---------------------------------------------------------------------------
// Fully connected layer. The input tensor is read in flattened row-major
// order whatever its rank, so the first FC after a conv stack performs the
// implicit flatten. weight: (n_out, n_in); bias: (n_out); out: (n_out).

template <typename T>
Tensor<T> linear(const Tensor<T>& in, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.ndim() != 2) {
    throw ShapeError("linear: weight must be rank 2, got " + weight.shape_string());
  }
  const int n_out = weight.dim(0), n_in = weight.dim(1);
  if (in.numel() != n_in) {
    throw ShapeError("linear: input numel " + std::to_string(in.numel()) +
                     " does not match weight input size " + std::to_string(n_in));
  }
  if (bias.ndim() != 1 || bias.dim(0) != n_out) {
    throw ShapeError("linear: bias must have shape (" + std::to_string(n_out) + ")");
  }
  Tensor<T> out({n_out});
  for (int o = 0; o < n_out; ++o) {
    T acc = bias[o];
    const T* wrow = &weight[static_cast<std::int64_t>(o) * n_in];
    const T* x = in.data();
    for (int i = 0; i < n_in; ++i) acc += wrow[i] * x[i];
    out[o] = acc;
  }
  return out;
}

template <typename T>
void linear_backward(const Tensor<T>& in, const Tensor<T>& weight, const Tensor<T>& grad_out,
                     Tensor<T>* grad_in, Tensor<T>* grad_weight, Tensor<T>* grad_bias) {
  const int n_out = weight.dim(0), n_in = weight.dim(1);
  if (grad_out.numel() != n_out) {
    throw ShapeError("linear_backward: grad numel " + std::to_string(grad_out.numel()) +
                     " does not match output size " + std::to_string(n_out));
  }
  *grad_in = Tensor<T>(in.shape());
  *grad_weight = Tensor<T>(weight.shape());
  *grad_bias = Tensor<T>({n_out});
  for (int o = 0; o < n_out; ++o) {
    const T g = grad_out[o];
    (*grad_bias)[o] += g;
    const T* wrow = &weight[static_cast<std::int64_t>(o) * n_in];
    T* gw_row = &(*grad_weight)[static_cast<std::int64_t>(o) * n_in];
    const T* x = in.data();
    T* gx = grad_in->data();
    for (int i = 0; i < n_in; ++i) {
      gw_row[i] += g * x[i];
      gx[i] += g * wrow[i];
    }
  }
}

// ---------------------------------------------------------------------------
// Spatial pyramid-style max pooling onto a fixed g x g grid. Cell (i,j)
// covers rows [floor(i*h/g), floor((i+1)*h/g)) and the analogous columns, so
// any input with h,w >= g yields a fixed-length output of c*g*g values in
// (channel, grid-row, grid-col) order. argmax stores flattened input indices
// as in max_pool2d.

template <typename T>
Tensor<T> spp_pool(const Tensor<T>& in, int grid, Tensor<std::int64_t>* argmax) {
  if (in.ndim() != 3) {
    throw ShapeError("spp_pool: input must be rank 3, got " + in.shape_string());
  }
  if (grid < 1) throw ShapeError("spp_pool: grid must be >= 1");
  const int c = in.dim(0), h = in.dim(1), w = in.dim(2);
  if (h < grid || w < grid) {
    throw ShapeError("spp_pool: input " + in.shape_string() + " is smaller than grid " +
                     std::to_string(grid));
  }
  Tensor<T> out({c * grid * grid});
  Tensor<std::int64_t> arg({c * grid * grid});
  std::int64_t o = 0;
  for (int ci = 0; ci < c; ++ci) {
    for (int gy = 0; gy < grid; ++gy) {
      const int y0 = gy * h / grid, y1 = (gy + 1) * h / grid;
      for (int gx = 0; gx < grid; ++gx) {
        const int x0 = gx * w / grid, x1 = (gx + 1) * w / grid;
        std::int64_t best_idx = -1;
        T best = T(0);
        for (int y = y0; y < y1; ++y) {
          for (int x = x0; x < x1; ++x) {
            const T v = in.at(ci, y, x);
            if (best_idx < 0 || v > best) {
              best = v;
              best_idx = (static_cast<std::int64_t>(ci) * h + y) * w + x;
            }
          }
        }
        out[o] = best;
        arg[o] = best_idx;
        ++o;
      }
    }
  }
  if (argmax) *argmax = std::move(arg);
  return out;
}

template <typename T>
Tensor<T> spp_pool_backward(const std::vector<int>& in_shape, const Tensor<std::int64_t>& argmax,
                            const Tensor<T>& grad_out) {
  Tensor<T> grad_in(in_shape);
  if (argmax.numel() != grad_out.numel()) {
    throw ShapeError("spp_pool_backward: argmax numel does not match grad numel");
  }
  for (std::int64_t i = 0; i < grad_out.numel(); ++i) grad_in[argmax[i]] += grad_out[i];
  return grad_in;
}

// ---------------------------------------------------------------------------
// L2 normalization of a flat vector. The squared norm is accumulated in
// double regardless of T.

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& in) {
  double sq = 0.0;
  for (std::int64_t i = 0; i < in.numel(); ++i) {
    sq += static_cast<double>(in[i]) * static_cast<double>(in[i]);
  }
  if (sq <= 0.0) throw NumericError("l2_normalize: zero vector");
  const double inv = 1.0 / std::sqrt(sq);
  Tensor<T> out(in.shape());
  for (std::int64_t i = 0; i < in.numel(); ++i) out[i] = static_cast<T>(in[i] * inv);
  return out;
}

// ---------------------------------------------------------------------------
// Parameter block: one weight or bias tensor together with its gradient
// accumulator. Blocks are shared between layer instances via shared_ptr to
// realize weight tying across branches.

template <typename T>
struct ParamBlock {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool apply_decay = true;

  void zero_grad() { grad.fill(T(0)); }
};

// Caching layer object. forward() records whatever backward() needs;
// infer() is const and leaves no trace. clone_shared() produces an instance
// with its own caches but the same parameter blocks.

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual std::string name() const = 0;
  virtual Tensor<T> forward(const Tensor<T>& in) = 0;
  virtual Tensor<T> infer(const Tensor<T>& in) const = 0;
  virtual Tensor<T> backward(const Tensor<T>& grad_out) = 0;
  virtual void collect_params(std::vector<std::shared_ptr<ParamBlock<T>>>* out) const {}
  virtual std::unique_ptr<Layer<T>> clone_shared() const = 0;
};

template <typename T>
class Conv2dLayer : public Layer<T> {
 public:
  Conv2dLayer(std::shared_ptr<ParamBlock<T>> weight, std::shared_ptr<ParamBlock<T>> bias,
              int stride)
      : weight_(std::move(weight)), bias_(std::move(bias)), stride_(stride) {}

  std::string name() const override { return "conv" + weight_->value.shape_string(); }

  Tensor<T> forward(const Tensor<T>& in) override {
    input_ = in;
    has_input_ = true;
    return conv2d(in, weight_->value, bias_->value, stride_);
  }

  Tensor<T> infer(const Tensor<T>& in) const override {
    return conv2d(in, weight_->value, bias_->value, stride_);
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    if (!has_input_) throw StateError("conv backward called before forward");
    Tensor<T> gin, gw, gb;
    conv2d_backward(input_, weight_->value, stride_, grad_out, &gin, &gw, &gb);
    accumulate(&weight_->grad, gw);
    accumulate(&bias_->grad, gb);
    return gin;
  }

  void collect_params(std::vector<std::shared_ptr<ParamBlock<T>>>* out) const override {
    out->push_back(weight_);
    out->push_back(bias_);
  }

  std::unique_ptr<Layer<T>> clone_shared() const override {
    return std::make_unique<Conv2dLayer>(weight_, bias_, stride_);
  }

  int stride() const { return stride_; }

 private:
  static void accumulate(Tensor<T>* dst, const Tensor<T>& src) {
    for (std::int64_t i = 0; i < src.numel(); ++i) (*dst)[i] += src[i];
  }

  std::shared_ptr<ParamBlock<T>> weight_, bias_;
  int stride_;
  Tensor<T> input_;
  bool has_input_ = false;
};

template <typename T>
class MaxPool2dLayer : public Layer<T> {
 public:
  MaxPool2dLayer(int window, int stride) : window_(window), stride_(stride) {}

  std::string name() const override {
    return "pool(" + std::to_string(window_) + "," + std::to_string(stride_) + ")";
  }

  Tensor<T> forward(const Tensor<T>& in) override {
    in_shape_ = in.shape();
    has_input_ = true;
    return max_pool2d(in, window_, stride_, &argmax_);
  }

  Tensor<T> infer(const Tensor<T>& in) const override {
    return max_pool2d<T>(in, window_, stride_, nullptr);
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    if (!has_input_) throw StateError("pool backward called before forward");
    return max_pool2d_backward(in_shape_, argmax_, grad_out);
  }

  std::unique_ptr<Layer<T>> clone_shared() const override {
    return std::make_unique<MaxPool2dLayer>(window_, stride_);
  }

 private:
  int window_, stride_;
  std::vector<int> in_shape_;
  Tensor<std::int64_t> argmax_;
  bool has_input_ = false;
};

template <typename T>
class ReluLayer : public Layer<T> {
 public:
  std::string name() const override { return "relu"; }

  Tensor<T> forward(const Tensor<T>& in) override {
    input_ = in;
    has_input_ = true;
    return relu(in);
  }

  Tensor<T> infer(const Tensor<T>& in) const override { return relu(in); }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    if (!has_input_) throw StateError("relu backward called before forward");
    return relu_backward(input_, grad_out);
  }

  std::unique_ptr<Layer<T>> clone_shared() const override {
    return std::make_unique<ReluLayer>();
  }

 private:
  Tensor<T> input_;
  bool has_input_ = false;
};

template <typename T>
class LinearLayer : public Layer<T> {
 public:
  LinearLayer(std::shared_ptr<ParamBlock<T>> weight, std::shared_ptr<ParamBlock<T>> bias)
      : weight_(std::move(weight)), bias_(std::move(bias)) {}

  std::string name() const override { return "fc" + weight_->value.shape_string(); }

  Tensor<T> forward(const Tensor<T>& in) override {
    input_ = in;
    has_input_ = true;
    return linear(in, weight_->value, bias_->value);
  }

  Tensor<T> infer(const Tensor<T>& in) const override {
    return linear(in, weight_->value, bias_->value);
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    if (!has_input_) throw StateError("fc backward called before forward");
    Tensor<T> gin, gw, gb;
    linear_backward(input_, weight_->value, grad_out, &gin, &gw, &gb);
    for (std::int64_t i = 0; i < gw.numel(); ++i) weight_->grad[i] += gw[i];
    for (std::int64_t i = 0; i < gb.numel(); ++i) bias_->grad[i] += gb[i];
    return gin;
  }

  void collect_params(std::vector<std::shared_ptr<ParamBlock<T>>>* out) const override {
    out->push_back(weight_);
    out->push_back(bias_);
  }

  std::unique_ptr<Layer<T>> clone_shared() const override {
    return std::make_unique<LinearLayer>(weight_, bias_);
  }

 private:
  std::shared_ptr<ParamBlock<T>> weight_, bias_;
  Tensor<T> input_;
  bool has_input_ = false;
};

template <typename T>
class SppPoolLayer : public Layer<T> {
 public:
  explicit SppPoolLayer(int grid) : grid_(grid) {}

  std::string name() const override { return "spp(" + std::to_string(grid_) + ")"; }

  Tensor<T> forward(const Tensor<T>& in) override {
    in_shape_ = in.shape();
    has_input_ = true;
    return spp_pool(in, grid_, &argmax_);
  }

  Tensor<T> infer(const Tensor<T>& in) const override { return spp_pool<T>(in, grid_, nullptr); }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    if (!has_input_) throw StateError("spp backward called before forward");
    return spp_pool_backward(in_shape_, argmax_, grad_out);
  }

  std::unique_ptr<Layer<T>> clone_shared() const override {
    return std::make_unique<SppPoolLayer>(grid_);
  }

 private:
  int grid_;
  std::vector<int> in_shape_;
  Tensor<std::int64_t> argmax_;
  bool has_input_ = false;
};

}  // namespace patchsim

#endif  // PATCHSIM_LAYERS_HPP_
