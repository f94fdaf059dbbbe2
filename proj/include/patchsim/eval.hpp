#ifndef PATCHSIM_EVAL_HPP_
#define PATCHSIM_EVAL_HPP_

#include <array>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "patchsim/dataset.hpp"
#include "patchsim/model.hpp"
#include "patchsim/tensor.hpp"

namespace patchsim {

// Whether a larger score or a smaller score indicates a matching pair.
enum class Polarity { kHigherIsSimilar, kLowerIsSimilar };

struct ScoredPairs {
  std::vector<double> scores;
  std::vector<int> labels;  // +1 match, -1 non-match
  Polarity polarity = Polarity::kHigherIsSimilar;
};

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
};

// Sweeps every distinct threshold, most selective first, and returns the
// (false-positive-rate, true-positive-rate) sequence including the (0,0)
// and (1,1) endpoints. Both coordinates are nondecreasing along the sweep.
std::vector<RocPoint> roc_curve(const ScoredPairs& sp);

// Smallest false-positive rate over thresholds reaching the requested
// true-positive rate, linearly interpolated between adjacent sweep points
// when no threshold attains it exactly.
double fpr_at_recall(const ScoredPairs& sp, double recall = 0.95);

// Trapezoidal area under a ROC point sequence.
double roc_area(const std::vector<RocPoint>& points);

// ---------------------------------------------------------------------------
// Six-way cross-dataset benchmark.

struct ReportRow {
  std::string train;
  std::string test;
  double fpr95 = 0.0;
};

struct BenchmarkReport {
  std::vector<ReportRow> rows;  // fixed order, see kProtocolSets
  double mean = 0.0;            // average over all six rows
  double mean_1_4 = 0.0;        // average over the first four rows
};

// Canonical set order; report rows enumerate (train, test) pairs with
// train != test in this order, so the first four rows are the ones whose
// training set is yosemite or notredame.
extern const std::array<std::string, 3> kProtocolSets;

// Scores one pair drawn from a store. Implementations range from trained
// models to synthetic oracles, which is why the entry (not just the pixel
// data) is provided.
using PairScorer = std::function<double(const PatchStore&, const PairEntry&)>;

struct ProtocolScorer {
  PairScorer score;
  Polarity polarity = Polarity::kHigherIsSimilar;
};

ScoredPairs score_pairs(const PatchStore& store, const PairList& pairs,
                        const ProtocolScorer& scorer);

BenchmarkReport run_protocol(const std::map<std::string, ProtocolScorer>& scorers,
                             const std::map<std::string, const PatchStore*>& stores,
                             const std::map<std::string, PairList>& pairfiles);

// Builds a scorer from a trained model: decision output (higher = similar)
// in decision mode, descriptor distance (lower = similar) in l2 mode.
ProtocolScorer make_model_scorer(const Model<float>& model, const FixedStats& stats);

void write_report_csv(const std::string& path, const BenchmarkReport& report);
void write_roc_csv(const std::string& path, const std::vector<RocPoint>& points);

// ---------------------------------------------------------------------------
// Homography-based keypoint matching.

struct Keypoint {
  double x = 0.0;
  double y = 0.0;
  double scale = 1.0;
};

using Homography = std::array<double, 9>;  // row-major 3x3

std::vector<Keypoint> read_keypoints(const std::string& path);
Homography read_homography(const std::string& path);

// Projects (x, y) through the homography; throws NumericError when the
// matrix is singular or the projected point falls on the plane at infinity.
std::array<double, 2> apply_homography(const Homography& h, double x, double y);

// Samples a square window of side 3x the keypoint scale, centered on the
// keypoint, bilinearly resampled to out_side x out_side. Coordinates are
// clamped at the image border.
Tensor<float> extract_keypoint_patch(const Tensor<float>& image, const Keypoint& kp,
                                     int out_side = 64);

struct PrPoint {
  double recall = 0.0;
  double precision = 0.0;
  double threshold = 0.0;
};

struct MatchEvalResult {
  std::vector<PrPoint> curve;
  double mean_average_precision = 0.0;
  int n_ground_truth = 0;
};

// Ground truth: keypoints of the first set are projected into the second
// image; (i, j) corresponds iff each is the other's nearest neighbor in the
// projected plane and their distance is at most pixel_tol.
std::vector<std::pair<int, int>> ground_truth_correspondences(
    const std::vector<Keypoint>& kps1, const std::vector<Keypoint>& kps2,
    const Homography& h, double pixel_tol);

// Ranks every cross pair by similarity (ties grouped), sweeps precision and
// recall over the distinct similarity thresholds, and integrates the curve
// by trapezoid over recall.
MatchEvalResult match_pr_from_similarity(const std::vector<std::vector<double>>& similarity,
                                         const std::vector<std::pair<int, int>>& ground_truth);

MatchEvalResult homography_match_eval(const std::vector<Keypoint>& kps1,
                                      const std::vector<Descriptor<float>>& descs1,
                                      const std::vector<Keypoint>& kps2,
                                      const std::vector<Descriptor<float>>& descs2,
                                      const Homography& h, double pixel_tol = 2.5);

void write_pr_csv(const std::string& path, const MatchEvalResult& result);

}  // namespace patchsim

#endif  // PATCHSIM_EVAL_HPP_
