#ifndef PATCHSIM_TRAINING_HPP_
#define PATCHSIM_TRAINING_HPP_

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "patchsim/model.hpp"
#include "patchsim/tensor.hpp"

namespace patchsim {

template <typename T>
struct LabeledPair {
  Tensor<T> p1, p2;
  int label = 1;  // -1 or +1
};

// ---------------------------------------------------------------------------
// Dihedral-8 augmentation. A transform id in 0..7 encodes flip*4 + rot,
// applied as: rotate by rot*90 degrees counterclockwise, then horizontal
// flip if the flip bit is set. Applying the same transform to both patches
// of a pair preserves the match label.

inline void check_transform_id(int id) {
  if (id < 0 || id > 7) {
    throw ConfigError("transform id must be in 0..7, got " + std::to_string(id));
  }
}

template <typename T>
Tensor<T> rotate90_ccw(const Tensor<T>& in) {
  if (in.ndim() != 3 || in.dim(1) != in.dim(2)) {
    throw ShapeError("rotate90: input must be c x S x S, got " + in.shape_string());
  }
  const int c = in.dim(0), n = in.dim(1);
  Tensor<T> out(in.shape());
  for (int ci = 0; ci < c; ++ci) {
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) out.at(ci, y, x) = in.at(ci, x, n - 1 - y);
    }
  }
  return out;
}

template <typename T>
Tensor<T> flip_horizontal(const Tensor<T>& in) {
  if (in.ndim() != 3) throw ShapeError("flip: input must be rank 3");
  const int c = in.dim(0), h = in.dim(1), w = in.dim(2);
  Tensor<T> out(in.shape());
  for (int ci = 0; ci < c; ++ci) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) out.at(ci, y, x) = in.at(ci, y, w - 1 - x);
    }
  }
  return out;
}

template <typename T>
Tensor<T> apply_dihedral(const Tensor<T>& in, int transform_id) {
  check_transform_id(transform_id);
  const int rot = transform_id % 4;
  const bool flip = transform_id >= 4;
  Tensor<T> out = in;
  for (int i = 0; i < rot; ++i) out = rotate90_ccw(out);
  if (flip) out = flip_horizontal(out);
  return out;
}

// Id of "apply a, then apply b". Derived from the dihedral relation
// rot^k . flip = flip . rot^-k for this rotation/flip pair.
inline int compose_dihedral(int a, int b) {
  check_transform_id(a);
  check_transform_id(b);
  const int fa = a / 4, ra = a % 4;
  const int fb = b / 4, rb = b % 4;
  const int f = fa ^ fb;
  const int r = ((ra + (fa ? -rb : rb)) % 4 + 4) % 4;
  return f * 4 + r;
}

template <typename T>
LabeledPair<T> augment(const LabeledPair<T>& pair, int transform_id) {
  check_transform_id(transform_id);
  LabeledPair<T> out;
  out.p1 = apply_dihedral(pair.p1, transform_id);
  out.p2 = apply_dihedral(pair.p2, transform_id);
  out.label = pair.label;
  return out;
}

// ---------------------------------------------------------------------------
// Hinge objective: loss = (lambda/2) * ||w||^2 + sum_i max(0, 1 - y_i o_i).
// The regularizer uses the squared norm so its gradient is the standard
// lambda*w decay; bias blocks are excluded (apply_decay == false).
// grad_outputs[i] = -y_i where the margin is violated, else 0.

struct HingeResult {
  double loss = 0.0;
  double data_term = 0.0;
  double regularizer = 0.0;
  std::vector<double> grad_outputs;
};

inline HingeResult hinge_objective_core(const std::vector<double>& outputs,
                                        const std::vector<int>& labels, double weight_sq_norm,
                                        double lambda) {
  if (outputs.size() != labels.size()) {
    throw ShapeError("hinge_objective: " + std::to_string(outputs.size()) + " outputs vs " +
                     std::to_string(labels.size()) + " labels");
  }
  HingeResult r;
  r.grad_outputs.assign(outputs.size(), 0.0);
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    if (labels[i] != 1 && labels[i] != -1) {
      throw DegenerateDataError("hinge_objective: label must be -1 or +1, got " +
                                std::to_string(labels[i]));
    }
    const double margin = 1.0 - labels[i] * outputs[i];
    if (margin > 0.0) {
      r.data_term += margin;
      r.grad_outputs[i] = -static_cast<double>(labels[i]);
    }
  }
  r.regularizer = 0.5 * lambda * weight_sq_norm;
  r.loss = r.data_term + r.regularizer;
  return r;
}

template <typename T>
HingeResult hinge_objective(const std::vector<double>& outputs, const std::vector<int>& labels,
                            const std::vector<std::shared_ptr<ParamBlock<T>>>& params,
                            double lambda) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p->apply_decay) continue;
    for (std::int64_t i = 0; i < p->value.numel(); ++i) {
      sq += static_cast<double>(p->value[i]) * static_cast<double>(p->value[i]);
    }
  }
  return hinge_objective_core(outputs, labels, sq, lambda);
}

// ---------------------------------------------------------------------------
// Momentum SGD.

struct TrainConfig {
  double learning_rate = 1.0;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  int batch_size = 128;
  long long iterations = 0;
  std::uint64_t seed = 0;
  long long averaging_start = -1;  // < 0 disables parameter averaging
  long long telemetry_every = 10;

  void validate() const {
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
    if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must be in [0,1)");
    if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (iterations < 0) throw ConfigError("iterations must be >= 0");
  }
};

template <typename T>
struct OptimizerState {
  std::vector<Tensor<T>> velocity;
  std::vector<Tensor<double>> average;
  long long average_count = 0;

  void ensure(const std::vector<std::shared_ptr<ParamBlock<T>>>& params) {
    if (velocity.size() == params.size()) return;
    velocity.clear();
    for (const auto& p : params) velocity.push_back(Tensor<T>(p->value.shape()));
  }
};

// One minibatch update: forward every pair, backpropagate hinge gradients
// where the margin is violated, apply v <- momentum*v - lr*(g + lambda*w),
// w <- w + v. Returns the batch loss (data term + regularizer). Iteration
// index drives the optional parameter averaging window.
template <typename T>
double sgd_step(Model<T>& model, const std::vector<LabeledPair<T>>& batch, const TrainConfig& cfg,
                OptimizerState<T>* state, long long iteration) {
  if (batch.empty()) throw DegenerateDataError("sgd_step: empty batch");
  cfg.validate();
  auto params = model.param_blocks();
  state->ensure(params);
  for (auto& p : params) p->zero_grad();

  std::vector<double> outputs;
  std::vector<int> labels;
  outputs.reserve(batch.size());
  labels.reserve(batch.size());
  for (const auto& sample : batch) {
    const T o = model.forward_pair(sample.p1, sample.p2);
    outputs.push_back(static_cast<double>(o));
    labels.push_back(sample.label);
    const double margin = 1.0 - sample.label * static_cast<double>(o);
    if (margin > 0.0) model.backward_pair(static_cast<T>(-sample.label));
  }
  const HingeResult h = hinge_objective(outputs, labels, params, cfg.weight_decay);

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    if (!p.grad.all_finite()) {
      throw NumericError("non-finite gradient in parameter block " + p.name);
    }
    Tensor<T>& v = state->velocity[i];
    const T lr = static_cast<T>(cfg.learning_rate);
    const T mom = static_cast<T>(cfg.momentum);
    const T wd = static_cast<T>(cfg.weight_decay);
    for (std::int64_t j = 0; j < p.value.numel(); ++j) {
      T g = p.grad[j];
      if (p.apply_decay) g += wd * p.value[j];
      v[j] = mom * v[j] - lr * g;
      p.value[j] += v[j];
    }
  }

  if (cfg.averaging_start >= 0 && iteration >= cfg.averaging_start) {
    if (state->average.empty()) {
      for (const auto& p : params) state->average.push_back(Tensor<double>(p->value.shape()));
    }
    state->average_count += 1;
    const double inv = 1.0 / static_cast<double>(state->average_count);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<double>& a = state->average[i];
      const auto& w = params[i]->value;
      for (std::int64_t j = 0; j < w.numel(); ++j) {
        a[j] += (static_cast<double>(w[j]) - a[j]) * inv;
      }
    }
  }
  return h.loss;
}

struct TrainStats {
  long long iterations = 0;
  double final_loss = 0.0;
};

template <typename T>
using BatchSampler = std::function<std::vector<LabeledPair<T>>(int batch_size, Rng& rng)>;

using TelemetrySink = std::function<void(long long iteration, double loss, double seconds)>;

// Runs cfg.iterations minibatch steps drawing batches from the sampler with
// a config-seeded stream. When parameter averaging is enabled the averaged
// weights replace the live ones after the final step.
template <typename T>
TrainStats train(Model<T>& model, const BatchSampler<T>& sampler, const TrainConfig& cfg,
                 const TelemetrySink& telemetry = nullptr) {
  cfg.validate();
  Rng rng(cfg.seed);
  OptimizerState<T> state;
  TrainStats stats;
  const auto t0 = std::chrono::steady_clock::now();
  for (long long it = 0; it < cfg.iterations; ++it) {
    const std::vector<LabeledPair<T>> batch = sampler(cfg.batch_size, rng);
    const double loss = sgd_step(model, batch, cfg, &state, it);
    stats.final_loss = loss;
    if (telemetry && (it % cfg.telemetry_every == 0 || it + 1 == cfg.iterations)) {
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      telemetry(it, loss, secs);
    }
  }
  stats.iterations = cfg.iterations;
  if (cfg.averaging_start >= 0 && state.average_count > 0) {
    auto params = model.param_blocks();
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& w = params[i]->value;
      for (std::int64_t j = 0; j < w.numel(); ++j) {
        w[j] = static_cast<T>(state.average[i][j]);
      }
    }
  }
  return stats;
}

}  // namespace patchsim

#endif  // PATCHSIM_TRAINING_HPP_
