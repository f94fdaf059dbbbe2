#ifndef PATCHSIM_NET_HPP_
#define PATCHSIM_NET_HPP_

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "patchsim/arch.hpp"
#include "patchsim/layers.hpp"
#include "patchsim/tensor.hpp"

namespace patchsim {

// A feedforward chain of layers instantiated from an architecture spec for
// a fixed input shape. Parameters are initialized uniformly in
// [-1/sqrt(fan_in), 1/sqrt(fan_in)] drawing from the caller's RNG, weight
// elements in storage order then bias, layer by layer, so a given seed
// reproduces bit-identical weights.
template <typename T>
class Net {
 public:
  Net() = default;

  Net(const ArchSpec& spec, const std::vector<int>& input_shape, Rng& rng,
      const std::string& param_prefix) {
    source_spec_ = spec;
    input_shape_ = input_shape;
    const ArchSpec expanded = expand_stacks(spec);
    const std::vector<std::vector<int>> shapes = infer_shapes(expanded, input_shape);

    std::vector<int> cur = input_shape;
    for (std::size_t i = 0; i < expanded.layers.size(); ++i) {
      const LayerDescriptor& d = expanded.layers[i];
      const std::string base = param_prefix + ".layer" + std::to_string(i);
      switch (d.kind) {
        case LayerDescriptor::Kind::kConv: {
          const int n = d.args[0], k = d.args[1], s = d.args[2];
          const int in_c = cur.size() == 3 ? cur[0] : 0;
          if (cur.size() != 3) throw ShapeError("net: conv after flatten in " + param_prefix);
          auto w = std::make_shared<ParamBlock<T>>();
          w->name = base + ".weight";
          w->value = init_tensor({n, in_c, k, k}, in_c * k * k, rng);
          w->grad = Tensor<T>({n, in_c, k, k});
          auto b = std::make_shared<ParamBlock<T>>();
          b->name = base + ".bias";
          b->value = init_tensor({n}, in_c * k * k, rng);
          b->grad = Tensor<T>({n});
          b->apply_decay = false;
          layers_.push_back(std::make_unique<Conv2dLayer<T>>(w, b, s));
          break;
        }
        case LayerDescriptor::Kind::kPool:
          layers_.push_back(std::make_unique<MaxPool2dLayer<T>>(d.args[0], d.args[1]));
          break;
        case LayerDescriptor::Kind::kRelu:
          layers_.push_back(std::make_unique<ReluLayer<T>>());
          break;
        case LayerDescriptor::Kind::kFc: {
          const int n = d.args[0];
          const std::int64_t in_n = shape_numel(cur);
          auto w = std::make_shared<ParamBlock<T>>();
          w->name = base + ".weight";
          w->value = init_tensor({n, static_cast<int>(in_n)}, static_cast<int>(in_n), rng);
          w->grad = Tensor<T>({n, static_cast<int>(in_n)});
          auto b = std::make_shared<ParamBlock<T>>();
          b->name = base + ".bias";
          b->value = init_tensor({n}, static_cast<int>(in_n), rng);
          b->grad = Tensor<T>({n});
          b->apply_decay = false;
          layers_.push_back(std::make_unique<LinearLayer<T>>(w, b));
          break;
        }
        case LayerDescriptor::Kind::kSpp:
          layers_.push_back(std::make_unique<SppPoolLayer<T>>(d.args[0]));
          break;
        case LayerDescriptor::Kind::kStack:
          throw Error("net: unexpanded Stack");
      }
      cur = shapes[i];
    }
    output_shape_ = cur;
  }

  // Training-path forward: every layer caches what backward needs.
  Tensor<T> forward(const Tensor<T>& in) {
    Tensor<T> x = in;
    for (auto& l : layers_) x = l->forward(x);
    return x;
  }

  // Stateless forward for inference; safe to call on a const net. Input may
  // have different spatial extents than the build shape (the fully
  // convolutional path relies on this); fully connected layers still demand
  // their exact input length.
  Tensor<T> infer(const Tensor<T>& in) const {
    Tensor<T> x = in;
    for (const auto& l : layers_) x = l->infer(x);
    return x;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) {
    Tensor<T> g = grad_out;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    return g;
  }

  // A net whose layers share this net's parameter blocks but keep their own
  // forward caches. Used for tied branches.
  Net clone_shared() const {
    Net out;
    out.source_spec_ = source_spec_;
    out.input_shape_ = input_shape_;
    out.output_shape_ = output_shape_;
    for (const auto& l : layers_) out.layers_.push_back(l->clone_shared());
    return out;
  }

  void collect_params(std::vector<std::shared_ptr<ParamBlock<T>>>* out) const {
    for (const auto& l : layers_) l->collect_params(out);
  }

  const ArchSpec& spec() const { return source_spec_; }
  const std::vector<int>& input_shape() const { return input_shape_; }
  const std::vector<int>& output_shape() const { return output_shape_; }
  std::size_t layer_count() const { return layers_.size(); }
  Layer<T>& layer(std::size_t i) { return *layers_[i]; }
  const Layer<T>& layer(std::size_t i) const { return *layers_[i]; }

  // Runs the leading layers only (everything before the first descriptor of
  // kind SPP or FC), const. Used by the dense descriptor path.
  Tensor<T> infer_prefix(const Tensor<T>& in, std::size_t layer_end) const {
    Tensor<T> x = in;
    for (std::size_t i = 0; i < layer_end && i < layers_.size(); ++i) x = layers_[i]->infer(x);
    return x;
  }

 private:
  static Tensor<T> init_tensor(std::vector<int> shape, int fan_in, Rng& rng) {
    Tensor<T> t(std::move(shape));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      t[i] = static_cast<T>(uniform_range(rng, -bound, bound));
    }
    return t;
  }

  ArchSpec source_spec_;
  std::vector<int> input_shape_;
  std::vector<int> output_shape_;
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

}  // namespace patchsim

#endif  // PATCHSIM_NET_HPP_
