#ifndef PATCHSIM_STEREO_HPP_
#define PATCHSIM_STEREO_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "patchsim/dataset.hpp"
#include "patchsim/model.hpp"
#include "patchsim/tensor.hpp"

namespace patchsim {

// A rectified grayscale pair. Disparity d maps left pixel (y, x) to right
// pixel (y, x - d): the left image is the reference and larger disparity
// means nearer.
struct RectifiedPair {
  Tensor<float> left{{1, 1, 1}};
  Tensor<float> right{{1, 1, 1}};
  int d_max = 1;
};

RectifiedPair make_rectified(Tensor<float> left, Tensor<float> right, int d_max);

// Per-pixel matching costs for disparities 0..d_max; lower is better. A
// pixel is valid when the model's full patch window around it fits inside
// the left image; disparities whose right window leaves the image hold a
// sentinel cost one above the pixel's largest valid cost.
struct CostVolume {
  int height = 0;
  int width = 0;
  int d_max = 0;
  std::vector<double> values;             // (y, x, d), d fastest
  std::vector<std::uint8_t> pixel_valid;  // (y, x)
  std::string provenance;

  double& at(int y, int x, int d) {
    return values[(static_cast<std::size_t>(y) * width + x) * (d_max + 1) + d];
  }
  double at(int y, int x, int d) const {
    return values[(static_cast<std::size_t>(y) * width + x) * (d_max + 1) + d];
  }
  bool valid(int y, int x) const {
    return pixel_valid[static_cast<std::size_t>(y) * width + x] != 0;
  }
};

struct DisparityMap {
  int height = 0;
  int width = 0;
  int d_max = 0;
  std::vector<int> disp;               // (y, x)
  std::vector<std::uint8_t> valid;     // (y, x)

  int at(int y, int x) const { return disp[static_cast<std::size_t>(y) * width + x]; }
  bool is_valid(int y, int x) const {
    return valid[static_cast<std::size_t>(y) * width + x] != 0;
  }
};

struct MRFParams {
  double lambda1 = 0.01;
  double lambda2 = 0.2;
  double sigma = 7.0;
};

// Smoothness weights on the 4-connected grid. Each edge takes its weight
// from the gradient of the left image at the edge's first endpoint (the
// upper or left pixel): w = lambda1 + lambda2 * exp(-|grad| / sigma^2).
// Gradients use central differences (one-sided at borders) on the 0..255
// intensity scale, magnitude = sqrt(gx^2 + gy^2).
struct EdgeWeightField {
  int height = 0;
  int width = 0;
  std::vector<double> horizontal;  // (y, x) -- (y, x+1), index y*(width-1)+x
  std::vector<double> vertical;    // (y, x) -- (y+1, x), index y*width+x

  double h_weight(int y, int x) const {
    return horizontal[static_cast<std::size_t>(y) * (width - 1) + x];
  }
  double v_weight(int y, int x) const {
    return vertical[static_cast<std::size_t>(y) * width + x];
  }
};

EdgeWeightField build_edge_weights(const Tensor<float>& left, const MRFParams& params);

// ---------------------------------------------------------------------------
// Dense descriptors.

// Descriptors of every full patch window of an image, indexed by the
// window's top-left corner; dimensions (H - P + 1) x (W - P + 1) for patch
// side P. Computed convolutionally with shifted passes so that every offset
// is covered, and guaranteed to match per-window extraction.
struct DescriptorField {
  int height = 0;
  int width = 0;
  int length = 0;
  std::vector<float> values;  // (y, x, k), k fastest

  const float* at(int y, int x) const {
    return values.data() + (static_cast<std::size_t>(y) * width + x) * length;
  }
  float* at(int y, int x) {
    return values.data() + (static_cast<std::size_t>(y) * width + x) * length;
  }
};

// Product of all convolution and pooling strides in an architecture.
int stride_product(const ArchSpec& spec);

// image_index selects the descriptor tower for models whose two sides do
// not share weights; it is irrelevant for weight-sharing models.
DescriptorField dense_descriptors(const Model<float>& model, const Tensor<float>& image,
                                  int image_index = 0);

// ---------------------------------------------------------------------------
// Cost volumes.

// Scores every (pixel, disparity) with a two-channel decision model; cost
// is the negated decision score. Images are standardized with the supplied
// statistics before windows are cut.
CostVolume cost_volume_2ch(const Model<float>& model, const FixedStats& stats,
                           const RectifiedPair& pair);

// Builds descriptor fields once per image, then combines them per
// (pixel, disparity): negated top-network score in decision mode, Euclidean
// distance in l2 mode. The requested mode must equal the model's mode.
CostVolume cost_volume_siam(const Model<float>& model, const FixedStats& stats,
                            const RectifiedPair& pair, MatchingMode mode);

// ---------------------------------------------------------------------------
// Disparity optimization.

// Per-pixel cost minimizer; ties go to the smaller disparity.
DisparityMap wta(const CostVolume& cv);

// Exact evaluation of  sum_p C(p, d_p) + sum_{pq} w_pq * |d_p - d_q|
// with each undirected 4-neighbor edge counted once.
double mrf_energy(const DisparityMap& d, const CostVolume& cv, const EdgeWeightField& ew);

// Single-row or single-column volumes are solved exactly by dynamic
// programming over the chain. Grids are solved by semi-global aggregation
// over the 4 scanline directions followed by greedy per-pixel improvement;
// the result never has higher energy than the per-pixel minimizer (enforced
// by a final fallback).
DisparityMap optimize_mrf(const CostVolume& cv, const EdgeWeightField& ew);

// ---------------------------------------------------------------------------
// Evaluation against ground truth.

// Fraction of pixels whose disparity error is at most t, per threshold t.
// Pixels lacking valid ground truth or a valid estimate are never counted.
// fraction_all evaluates every counted pixel; fraction_unoccluded further
// drops pixels flagged by the occlusion mask (pass an empty mask for none).
struct ErrorStats {
  std::vector<double> thresholds;
  std::vector<double> fraction_all;
  std::vector<double> fraction_unoccluded;
};

ErrorStats error_stats(const DisparityMap& d, const DisparityMap& gt,
                       const std::vector<std::uint8_t>& occlusion,
                       const std::vector<double>& thresholds);

// ---------------------------------------------------------------------------
// Disparity I/O.

// 16-bit graymap holding disparity * scale (invalid pixels = 65535), with a
// text sidecar recording the scale and the invalid code.
void write_disparity_pgm16(const std::string& pgm_path, const std::string& sidecar_path,
                           const DisparityMap& map);
DisparityMap read_disparity_pgm16(const std::string& pgm_path, const std::string& sidecar_path);

// Flat binary: three little-endian int32 (height, width, d_max) followed by
// height*width little-endian float32 disparities, -1 where invalid.
void write_disparity_binary(const std::string& path, const DisparityMap& map);
DisparityMap read_disparity_binary(const std::string& path);

void write_error_csv(const std::string& path, const ErrorStats& stats);

}  // namespace patchsim

#endif  // PATCHSIM_STEREO_HPP_
