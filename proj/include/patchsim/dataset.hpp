#ifndef PATCHSIM_DATASET_HPP_
#define PATCHSIM_DATASET_HPP_

#include <string>
#include <vector>

#include "patchsim/common.hpp"
#include "patchsim/tensor.hpp"
#include "patchsim/training.hpp"

namespace patchsim {

inline constexpr int kPatchSide = 64;
inline constexpr int kContainerSide = 1024;  // 16x16 patches per container

// A loaded benchmark dataset: one grayscale 64x64 patch per entry, each tied
// to the id of the 3D point it was sampled around. Values live in [0,1].
struct PatchStore {
  std::string name;
  std::vector<Tensor<float>> patches;
  std::vector<long long> point_ids;

  std::size_t size() const { return patches.size(); }
};

// Reads the container-grid format: numbered patches*.pgm grids of 64x64
// cells in row-major order plus an info.txt with one "point_id unused" line
// per patch. Cells beyond the info line count are ignored.
PatchStore load_patch_store(const std::string& dir, const std::string& name = "");

// Writes a store in the same container format (1024x1024 grids, zero-padded
// tail cells) so synthetic fixtures round-trip.
void write_patch_store(const std::string& dir, const PatchStore& store);

struct PairEntry {
  int index1 = 0;
  int index2 = 0;
  int label = 0;  // +1 iff the two patches share a point id
};

struct PairList {
  std::vector<PairEntry> entries;
  std::string source;
};

// Match-file lines: patchID1 pointID1 unused patchID2 pointID2 unused.
// Labels derive from point-id equality and are cross-checked against the
// store's ids.
PairList load_pair_list(const std::string& file, const PatchStore& store);
void write_pair_list(const std::string& file, const PatchStore& store,
                     const std::vector<std::pair<int, int>>& index_pairs);

// Global standardization statistics, computed once over a training store
// and carried with its provenance so test-store leakage is detectable.
struct FixedStats {
  double mu = 0.0;
  double sigma = 1.0;  // floored at 1e-6
  std::string source;
};

FixedStats compute_stats(const PatchStore& store);

template <typename T = float>
Tensor<T> preprocess(const Tensor<float>& patch, const FixedStats& stats) {
  if (patch.ndim() != 3 || patch.dim(0) != 1) {
    throw ShapeError("preprocess: expected 1xHxW patch, got " + patch.shape_string());
  }
  Tensor<T> out(patch.shape());
  const double inv = 1.0 / stats.sigma;
  for (std::int64_t i = 0; i < patch.numel(); ++i) {
    out[i] = static_cast<T>((static_cast<double>(patch[i]) - stats.mu) * inv);
  }
  return out;
}

// Uniform sampling with replacement; every sample gets an independent
// uniformly random dihedral transform. Draw order per sample: pair index,
// then transform id.
template <typename T>
std::vector<LabeledPair<T>> sample_batch(const PatchStore& store, const PairList& pairs,
                                         int batch_size, const FixedStats& stats, Rng& rng) {
  if (pairs.entries.empty()) throw DegenerateDataError("sample_batch: empty pair list");
  if (batch_size < 1) throw ConfigError("sample_batch: batch_size must be >= 1");
  std::vector<LabeledPair<T>> batch;
  batch.reserve(static_cast<std::size_t>(batch_size));
  for (int i = 0; i < batch_size; ++i) {
    const auto& e = pairs.entries[uniform_index(rng, pairs.entries.size())];
    const int tid = static_cast<int>(uniform_index(rng, 8));
    LabeledPair<T> sample;
    sample.p1 = preprocess<T>(store.patches[static_cast<std::size_t>(e.index1)], stats);
    sample.p2 = preprocess<T>(store.patches[static_cast<std::size_t>(e.index2)], stats);
    sample.label = e.label;
    batch.push_back(augment(sample, tid));
  }
  return batch;
}

}  // namespace patchsim

#endif  // PATCHSIM_DATASET_HPP_
