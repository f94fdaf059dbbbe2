#ifndef PATCHSIM_MODEL_HPP_
#define PATCHSIM_MODEL_HPP_

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "patchsim/arch.hpp"
#include "patchsim/net.hpp"

namespace patchsim {

// The seven network configurations. The l2 variants reuse the same
// structures; MatchingMode selects how a trained model scores pairs.
enum class ModelKind {
  kTwoCh,
  kTwoChDeep,
  kTwoCh2Stream,
  kSiam,
  kPseudoSiam,
  kSiam2Stream,
  kSiamSpp,
};

enum class MatchingMode { kDecisionLayer, kL2Distance };

inline const char* kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::kTwoCh: return "2ch";
    case ModelKind::kTwoChDeep: return "2ch_deep";
    case ModelKind::kTwoCh2Stream: return "2ch_2stream";
    case ModelKind::kSiam: return "siam";
    case ModelKind::kPseudoSiam: return "pseudo_siam";
    case ModelKind::kSiam2Stream: return "siam_2stream";
    case ModelKind::kSiamSpp: return "siam_spp";
  }
  return "?";
}

inline ModelKind kind_from_name(const std::string& s) {
  if (s == "2ch") return ModelKind::kTwoCh;
  if (s == "2ch_deep") return ModelKind::kTwoChDeep;
  if (s == "2ch_2stream") return ModelKind::kTwoCh2Stream;
  if (s == "siam") return ModelKind::kSiam;
  if (s == "pseudo_siam") return ModelKind::kPseudoSiam;
  if (s == "siam_2stream") return ModelKind::kSiam2Stream;
  if (s == "siam_spp") return ModelKind::kSiamSpp;
  throw ConfigError("unknown model kind '" + s + "'");
}

inline const char* mode_name(MatchingMode m) {
  return m == MatchingMode::kDecisionLayer ? "decision" : "l2";
}

inline MatchingMode mode_from_name(const std::string& s) {
  if (s == "decision") return MatchingMode::kDecisionLayer;
  if (s == "l2") return MatchingMode::kL2Distance;
  throw ConfigError("unknown matching mode '" + s + "'");
}

inline bool is_two_channel(ModelKind k) {
  return k == ModelKind::kTwoCh || k == ModelKind::kTwoChDeep || k == ModelKind::kTwoCh2Stream;
}

inline bool is_two_stream(ModelKind k) {
  return k == ModelKind::kTwoCh2Stream || k == ModelKind::kSiam2Stream;
}

inline bool produces_descriptors(ModelKind k) { return !is_two_channel(k); }

struct BuildOptions {
  MatchingMode mode = MatchingMode::kDecisionLayer;
  // Scaled-down variant (16x16 patches, tiny filter counts) used by the
  // finite-difference gradient suite and fast fixtures.
  bool reduced = false;
  // The canonical 2ch-2stream table entry gives the first conv 95 filters;
  // overridable in case that is a typo for 96.
  int two_stream_first_filters = 95;
};

template <typename T>
struct Descriptor {
  Tensor<T> values;
  bool normalized = false;
};

// Euclidean distance between two descriptors; lower means more similar.
template <typename T>
double match_descriptors(const Descriptor<T>& a, const Descriptor<T>& b) {
  if (a.values.numel() != b.values.numel()) {
    throw ShapeError("match_descriptors: lengths differ, " + std::to_string(a.values.numel()) +
                     " vs " + std::to_string(b.values.numel()));
  }
  double sq = 0.0;
  for (std::int64_t i = 0; i < a.values.numel(); ++i) {
    const double d = static_cast<double>(a.values[i]) - static_cast<double>(b.values[i]);
    sq += d * d;
  }
  return std::sqrt(sq);
}

// Splits a square patch into the central half-size crop (rows and columns
// [S/4, 3S/4)) and a 2x2 average-pooled half-resolution view of the whole
// patch. S must be divisible by 4.
template <typename T>
void split_streams(const Tensor<T>& patch, Tensor<T>* central, Tensor<T>* surround) {
  if (patch.ndim() != 3 || patch.dim(0) != 1 || patch.dim(1) != patch.dim(2)) {
    throw ShapeError("split_streams: patch must be 1xSxS, got " + patch.shape_string());
  }
  const int s = patch.dim(1);
  if (s % 4 != 0) {
    throw ShapeError("split_streams: size must be divisible by 4, got " + std::to_string(s));
  }
  const int half = s / 2, off = s / 4;
  *central = Tensor<T>({1, half, half});
  for (int y = 0; y < half; ++y) {
    for (int x = 0; x < half; ++x) central->at(0, y, x) = patch.at(0, off + y, off + x);
  }
  *surround = Tensor<T>({1, half, half});
  for (int y = 0; y < half; ++y) {
    for (int x = 0; x < half; ++x) {
      const T sum = patch.at(0, 2 * y, 2 * x) + patch.at(0, 2 * y, 2 * x + 1) +
                    patch.at(0, 2 * y + 1, 2 * x) + patch.at(0, 2 * y + 1, 2 * x + 1);
      surround->at(0, y, x) = sum / T(4);
    }
  }
}

template <typename T>
Tensor<T> stack_pair(const Tensor<T>& p1, const Tensor<T>& p2) {
  if (p1.ndim() != 3 || p1.dim(0) != 1 || p2.ndim() != 3 || p2.dim(0) != 1) {
    throw ShapeError("stack_pair: patches must be 1xHxW");
  }
  if (!p1.same_shape(p2)) {
    throw ShapeError("stack_pair: patch shapes differ, " + p1.shape_string() + " vs " +
                     p2.shape_string());
  }
  Tensor<T> out({2, p1.dim(1), p1.dim(2)});
  for (std::int64_t i = 0; i < p1.numel(); ++i) out[i] = p1[i];
  for (std::int64_t i = 0; i < p2.numel(); ++i) out[p1.numel() + i] = p2[i];
  return out;
}

template <typename T>
Tensor<T> concat_flat(const std::vector<const Tensor<T>*>& parts) {
  std::int64_t total = 0;
  for (const auto* p : parts) total += p->numel();
  Tensor<T> out({static_cast<int>(total)});
  std::int64_t o = 0;
  for (const auto* p : parts) {
    for (std::int64_t i = 0; i < p->numel(); ++i) out[o++] = (*p)[i];
  }
  return out;
}

// Canonical architecture table for one kind: per-instance branch wiring and
// the decision net. owner[i] == i marks a parameter-owning branch; owner[i]
// == j < i marks a branch tied to branch j's parameters.
struct ModelLayout {
  int patch_size = 64;
  std::vector<std::string> branch_archs;       // one per instance
  std::vector<int> branch_owner;               // one per instance
  std::vector<std::vector<int>> branch_inputs; // build-time input shapes
  std::string top_arch;
  int top_inputs = 0;
};

inline ModelLayout model_layout(ModelKind kind, const BuildOptions& opts) {
  ModelLayout l;
  const bool r = opts.reduced;
  l.patch_size = r ? 16 : 64;
  const int p = l.patch_size, half = p / 2;
  switch (kind) {
    case ModelKind::kTwoCh: {
      const std::string bottom =
          r ? "C(4,3,2)-ReLU-P(2,2)-C(6,3,1)-ReLU"
            : "C(96,4,2)-ReLU-P(2,2)-C(192,3,1)-ReLU-C(256,3,1)-ReLU-C(256,3,1)-ReLU";
      l.branch_archs = {bottom};
      l.branch_owner = {0};
      l.branch_inputs = {{2, p, p}};
      l.top_arch = r ? "F(8)-ReLU-F(1)" : "F(1)";
      l.top_inputs = r ? 6 : 20736;
      break;
    }
    case ModelKind::kTwoChDeep: {
      const std::string bottom = r ? "C(4,3,1)-ReLU-Stack(4)-P(2,2)"
                                   : "C(96,4,3)-ReLU-Stack(96)-P(2,2)-Stack(192)";
      l.branch_archs = {bottom};
      l.branch_owner = {0};
      l.branch_inputs = {{2, p, p}};
      l.top_arch = "F(1)";
      l.top_inputs = r ? 64 : 192;
      break;
    }
    case ModelKind::kTwoCh2Stream: {
      const std::string branch =
          r ? "C(3,3,1)-ReLU-P(2,2)-C(4,3,1)-ReLU"
            : "C(" + std::to_string(opts.two_stream_first_filters) +
                  ",5,1)-ReLU-P(2,2)-C(96,3,1)-ReLU-P(2,2)-C(192,3,1)-ReLU-C(192,3,1)-ReLU";
      l.branch_archs = {branch, branch};
      l.branch_owner = {0, 1};
      l.branch_inputs = {{2, half, half}, {2, half, half}};
      l.top_arch = r ? "F(6)-ReLU-F(1)" : "F(768)-ReLU-F(1)";
      l.top_inputs = r ? 8 : 1536;
      break;
    }
    case ModelKind::kSiam:
    case ModelKind::kPseudoSiam: {
      const std::string branch =
          r ? "C(4,3,1)-ReLU-P(2,2)-C(6,3,1)-ReLU-P(2,2)"
            : "C(96,7,3)-ReLU-P(2,2)-C(192,5,1)-ReLU-P(2,2)-C(256,3,1)-ReLU";
      l.branch_archs = {branch, branch};
      l.branch_owner = {0, kind == ModelKind::kSiam ? 0 : 1};
      l.branch_inputs = {{1, p, p}, {1, p, p}};
      l.top_arch = r ? "F(8)-ReLU-F(1)" : "F(256)-ReLU-F(1)";
      l.top_inputs = r ? 48 : 512;
      break;
    }
    case ModelKind::kSiam2Stream: {
      const std::string branch =
          r ? "C(3,3,1)-ReLU-P(2,2)-C(4,3,1)-ReLU"
            : "C(96,4,2)-ReLU-P(2,2)-C(192,3,1)-ReLU-C(256,3,1)-ReLU-C(256,3,1)-ReLU";
      // Instance order: central(p1), central(p2), surround(p1), surround(p2).
      l.branch_archs = {branch, branch, branch, branch};
      l.branch_owner = {0, 0, 2, 2};
      l.branch_inputs = {{1, half, half}, {1, half, half}, {1, half, half}, {1, half, half}};
      l.top_arch = r ? "F(8)-ReLU-F(1)" : "F(512)-ReLU-F(1)";
      l.top_inputs = r ? 16 : 1024;
      break;
    }
    case ModelKind::kSiamSpp: {
      // The usual two-pool branch cannot feed a 4x4 pooling grid at the
      // supported patch sizes, so the SPP variant keeps the conv/ReLU stack
      // at full resolution and lets SPP do all spatial aggregation.
      const std::string branch = r ? "C(4,3,1)-ReLU-C(6,3,1)-ReLU-SPP(2)"
                                   : "C(96,7,3)-ReLU-C(192,5,1)-ReLU-C(256,3,1)-ReLU-SPP(4)";
      l.branch_archs = {branch, branch};
      l.branch_owner = {0, 0};
      l.branch_inputs = {{1, p, p}, {1, p, p}};
      l.top_arch = r ? "F(8)-ReLU-F(1)" : "F(512)-ReLU-F(1)";
      l.top_inputs = r ? 48 : 8192;
      break;
    }
  }
  return l;
}

// A built network pair-scoring model: branch instances (possibly sharing
// parameters), a top decision net, and the patch geometry.
template <typename T>
class Model {
 public:
  Model() = default;

  static Model build(ModelKind kind, std::uint64_t seed, const BuildOptions& opts = {}) {
    const ModelLayout layout = model_layout(kind, opts);
    return build_from_layout(kind, opts.mode, layout, seed);
  }

  static Model build_from_layout(ModelKind kind, MatchingMode mode, const ModelLayout& layout,
                                 std::uint64_t seed) {
    if (mode == MatchingMode::kL2Distance && !produces_descriptors(kind)) {
      throw CapabilityError(std::string("matching mode l2 is unsupported for kind ") +
                            kind_name(kind));
    }
    Model m;
    m.kind_ = kind;
    m.mode_ = mode;
    m.seed_ = seed;
    m.patch_size_ = layout.patch_size;
    m.branch_owner_ = layout.branch_owner;
    Rng rng(seed);
    for (std::size_t i = 0; i < layout.branch_archs.size(); ++i) {
      const int owner = layout.branch_owner[i];
      if (owner == static_cast<int>(i)) {
        m.branches_.push_back(Net<T>(parse_arch(layout.branch_archs[i]), layout.branch_inputs[i],
                                     rng, "branch" + std::to_string(i)));
      } else {
        m.branches_.push_back(m.branches_[owner].clone_shared());
      }
    }
    m.top_ = Net<T>(parse_arch(layout.top_arch), {layout.top_inputs}, rng, "top");
    return m;
  }

  ModelKind kind() const { return kind_; }
  MatchingMode mode() const { return mode_; }
  int patch_size() const { return patch_size_; }
  std::uint64_t seed() const { return seed_; }

  void set_mode(MatchingMode mode) {
    if (mode == MatchingMode::kL2Distance && !produces_descriptors(kind_)) {
      throw CapabilityError(std::string("matching mode l2 is unsupported for kind ") +
                            kind_name(kind_));
    }
    mode_ = mode;
  }

  std::size_t branch_count() const { return branches_.size(); }
  Net<T>& branch(std::size_t i) { return branches_[i]; }
  const Net<T>& branch(std::size_t i) const { return branches_[i]; }
  Net<T>& top() { return top_; }
  const Net<T>& top() const { return top_; }
  const std::vector<int>& branch_owner() const { return branch_owner_; }

  // Parameter blocks in canonical order with shared blocks listed once.
  std::vector<std::shared_ptr<ParamBlock<T>>> param_blocks() const {
    std::vector<std::shared_ptr<ParamBlock<T>>> all;
    for (const auto& b : branches_) b.collect_params(&all);
    top_.collect_params(&all);
    std::vector<std::shared_ptr<ParamBlock<T>>> out;
    std::unordered_set<const ParamBlock<T>*> seen;
    for (auto& p : all) {
      if (seen.insert(p.get()).second) out.push_back(p);
    }
    return out;
  }

  double weight_sq_norm() const {
    double sq = 0.0;
    for (const auto& p : param_blocks()) {
      if (!p->apply_decay) continue;
      for (std::int64_t i = 0; i < p->value.numel(); ++i) {
        sq += static_cast<double>(p->value[i]) * static_cast<double>(p->value[i]);
      }
    }
    return sq;
  }

  // Training-path forward: layers cache activations for backward_pair.
  // Decision-layer mode only.
  T forward_pair(const Tensor<T>& p1, const Tensor<T>& p2) {
    require_decision_mode("forward_pair");
    check_patch(p1);
    check_patch(p2);
    Tensor<T> out;
    switch (kind_) {
      case ModelKind::kTwoCh:
      case ModelKind::kTwoChDeep: {
        out = top_.forward(branches_[0].forward(stack_pair(p1, p2)));
        break;
      }
      case ModelKind::kTwoCh2Stream: {
        Tensor<T> c1, s1, c2, s2;
        split_streams(p1, &c1, &s1);
        split_streams(p2, &c2, &s2);
        const Tensor<T> co = branches_[0].forward(stack_pair(c1, c2));
        const Tensor<T> so = branches_[1].forward(stack_pair(s1, s2));
        top_parts_ = {co.shape(), so.shape()};
        top_order_ = {0, 1};
        out = top_.forward(concat_flat<T>({&co, &so}));
        break;
      }
      case ModelKind::kSiam:
      case ModelKind::kPseudoSiam:
      case ModelKind::kSiamSpp: {
        const Tensor<T> d1 = branches_[0].forward(p1);
        const Tensor<T> d2 = branches_[1].forward(p2);
        top_parts_ = {d1.shape(), d2.shape()};
        top_order_ = {0, 1};
        out = top_.forward(concat_flat<T>({&d1, &d2}));
        break;
      }
      case ModelKind::kSiam2Stream: {
        Tensor<T> c1, s1, c2, s2;
        split_streams(p1, &c1, &s1);
        split_streams(p2, &c2, &s2);
        const Tensor<T> oc1 = branches_[0].forward(c1);
        const Tensor<T> os1 = branches_[2].forward(s1);
        const Tensor<T> oc2 = branches_[1].forward(c2);
        const Tensor<T> os2 = branches_[3].forward(s2);
        top_parts_ = {oc1.shape(), os1.shape(), oc2.shape(), os2.shape()};
        top_order_ = {0, 2, 1, 3};
        out = top_.forward(concat_flat<T>({&oc1, &os1, &oc2, &os2}));
        break;
      }
    }
    pair_cached_ = true;
    return out[0];
  }

  // Backpropagates d(loss)/d(score) through the cached pair, accumulating
  // parameter gradients (shared branches accumulate both uses).
  void backward_pair(T grad_score) {
    if (!pair_cached_) throw StateError("backward_pair called before forward_pair");
    Tensor<T> g({1});
    g[0] = grad_score;
    Tensor<T> gin = top_.backward(g);
    switch (kind_) {
      case ModelKind::kTwoCh:
      case ModelKind::kTwoChDeep:
        branches_[0].backward(gin);
        break;
      default: {
        std::int64_t off = 0;
        for (std::size_t part = 0; part < top_order_.size(); ++part) {
          Tensor<T> slice(top_parts_[part]);
          for (std::int64_t i = 0; i < slice.numel(); ++i) slice[i] = gin[off + i];
          off += slice.numel();
          branches_[top_order_[part]].backward(slice);
        }
        break;
      }
    }
    pair_cached_ = false;
  }

  // Stateless decision-layer score; usable on a const model regardless of
  // the stored matching mode (evaluation code picks the route).
  T decision_score(const Tensor<T>& p1, const Tensor<T>& p2) const {
    check_patch(p1);
    check_patch(p2);
    Tensor<T> out;
    switch (kind_) {
      case ModelKind::kTwoCh:
      case ModelKind::kTwoChDeep:
        out = top_.infer(branches_[0].infer(stack_pair(p1, p2)));
        break;
      case ModelKind::kTwoCh2Stream: {
        Tensor<T> c1, s1, c2, s2;
        split_streams(p1, &c1, &s1);
        split_streams(p2, &c2, &s2);
        const Tensor<T> co = branches_[0].infer(stack_pair(c1, c2));
        const Tensor<T> so = branches_[1].infer(stack_pair(s1, s2));
        out = top_.infer(concat_flat<T>({&co, &so}));
        break;
      }
      case ModelKind::kSiam:
      case ModelKind::kPseudoSiam:
      case ModelKind::kSiamSpp: {
        const Tensor<T> d1 = branches_[0].infer(p1);
        const Tensor<T> d2 = branches_[1].infer(p2);
        out = top_.infer(concat_flat<T>({&d1, &d2}));
        break;
      }
      case ModelKind::kSiam2Stream: {
        Tensor<T> c1, s1, c2, s2;
        split_streams(p1, &c1, &s1);
        split_streams(p2, &c2, &s2);
        const Tensor<T> oc1 = branches_[0].infer(c1);
        const Tensor<T> os1 = branches_[2].infer(s1);
        const Tensor<T> oc2 = branches_[1].infer(c2);
        const Tensor<T> os2 = branches_[3].infer(s2);
        out = top_.infer(concat_flat<T>({&oc1, &os1, &oc2, &os2}));
        break;
      }
    }
    return out[0];
  }

  // Per-patch descriptor (branch output; central+surround concatenation for
  // the two-stream kind). l2-normalized when the matching mode is l2.
  Descriptor<T> extract_descriptor(const Tensor<T>& p) const {
    if (!produces_descriptors(kind_)) {
      throw CapabilityError(std::string("kind ") + kind_name(kind_) +
                            " does not produce per-patch descriptors");
    }
    check_patch(p);
    Descriptor<T> d;
    if (kind_ == ModelKind::kSiam2Stream) {
      Tensor<T> c, s;
      split_streams(p, &c, &s);
      const Tensor<T> oc = branches_[0].infer(c);
      const Tensor<T> os = branches_[2].infer(s);
      d.values = concat_flat<T>({&oc, &os});
    } else {
      Tensor<T> o = branches_[0].infer(p);
      const int len = static_cast<int>(o.numel());
      d.values = Tensor<T>({len}, std::move(o.storage()));
    }
    if (mode_ == MatchingMode::kL2Distance) {
      d.values = l2_normalize(d.values);
      d.normalized = true;
    }
    return d;
  }

  std::int64_t descriptor_length() const {
    if (!produces_descriptors(kind_)) {
      throw CapabilityError(std::string("kind ") + kind_name(kind_) +
                            " does not produce per-patch descriptors");
    }
    if (kind_ == ModelKind::kSiam2Stream) {
      return shape_numel(branches_[0].output_shape()) + shape_numel(branches_[2].output_shape());
    }
    return shape_numel(branches_[0].output_shape());
  }

 private:
  void require_decision_mode(const char* op) const {
    if (mode_ != MatchingMode::kDecisionLayer) {
      throw CapabilityError(std::string(op) + " requires decision-layer matching mode");
    }
  }

  void check_patch(const Tensor<T>& p) const {
    if (p.ndim() != 3 || p.dim(0) != 1) {
      throw ShapeError("patch must be 1xHxW, got " + p.shape_string());
    }
    if (kind_ == ModelKind::kSiamSpp) return;  // any size the conv chain admits
    if (p.dim(1) != patch_size_ || p.dim(2) != patch_size_) {
      throw ShapeError("patch must be " + std::to_string(patch_size_) + "x" +
                       std::to_string(patch_size_) + ", got " + p.shape_string());
    }
  }

  ModelKind kind_ = ModelKind::kTwoCh;
  MatchingMode mode_ = MatchingMode::kDecisionLayer;
  int patch_size_ = 64;
  std::uint64_t seed_ = 0;
  std::vector<Net<T>> branches_;
  std::vector<int> branch_owner_;
  Net<T> top_;

  bool pair_cached_ = false;
  std::vector<std::vector<int>> top_parts_;
  std::vector<std::size_t> top_order_;
};

template <typename T>
Model<T> build_model(ModelKind kind, std::uint64_t seed, const BuildOptions& opts = {}) {
  return Model<T>::build(kind, seed, opts);
}

inline std::vector<ModelKind> all_model_kinds() {
  return {ModelKind::kTwoCh,       ModelKind::kTwoChDeep,   ModelKind::kTwoCh2Stream,
          ModelKind::kSiam,        ModelKind::kPseudoSiam,  ModelKind::kSiam2Stream,
          ModelKind::kSiamSpp};
}

}  // namespace patchsim

#endif  // PATCHSIM_MODEL_HPP_
