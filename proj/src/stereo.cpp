#include "patchsim/stereo.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "patchsim/image_io.hpp"

namespace patchsim {

namespace {

void check_image(const Tensor<float>& img, const char* what) {
  if (img.ndim() != 3 || img.dim(0) != 1) {
    throw ShapeError(std::string(what) + " must be 1xHxW, got " + img.shape_string());
  }
}

Tensor<float> crop_from(const Tensor<float>& img, int y0, int x0) {
  const int h = img.dim(1) - y0, w = img.dim(2) - x0;
  Tensor<float> out({1, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) out.at(0, y, x) = img.at(0, y0 + y, x0 + x);
  }
  return out;
}

Tensor<float> window_at(const Tensor<float>& img, int y0, int x0, int side) {
  Tensor<float> out({1, side, side});
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) out.at(0, y, x) = img.at(0, y0 + y, x0 + x);
  }
  return out;
}

// 2x2 average with phase (py, px); arithmetic mirrors the surround stream of
// split_streams so dense surround descriptors are bit-identical.
Tensor<float> downsample2(const Tensor<float>& img, int py, int px) {
  const int h = (img.dim(1) - py) / 2, w = (img.dim(2) - px) / 2;
  if (h < 1 || w < 1) throw ShapeError("image too small to downsample");
  Tensor<float> out({1, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const float sum = img.at(0, py + 2 * y, px + 2 * x) + img.at(0, py + 2 * y, px + 2 * x + 1) +
                        img.at(0, py + 2 * y + 1, px + 2 * x) +
                        img.at(0, py + 2 * y + 1, px + 2 * x + 1);
      out.at(0, y, x) = sum / 4.0f;
    }
  }
  return out;
}

Tensor<float> sub_block(const Tensor<float>& out, int i0, int j0, int nt) {
  const int c = out.dim(0);
  Tensor<float> sub({c, nt, nt});
  for (int ci = 0; ci < c; ++ci) {
    for (int a = 0; a < nt; ++a) {
      for (int b = 0; b < nt; ++b) sub.at(ci, a, b) = out.at(ci, i0 + a, j0 + b);
    }
  }
  return sub;
}

struct Coverage {
  int height = 0, width = 0;
  std::vector<std::uint8_t> bits;
  Coverage(int h, int w) : height(h), width(w), bits(static_cast<std::size_t>(h) * w, 0) {}
  void mark(int y, int x) { bits[static_cast<std::size_t>(y) * width + x] = 1; }
  void require_full(const char* what) const {
    for (std::size_t i = 0; i < bits.size(); ++i) {
      if (!bits[i]) {
        throw Error(std::string("internal: dense ") + what + " left position " +
                    std::to_string(i / width) + "," + std::to_string(i % width) + " uncovered");
      }
    }
  }
};

// Runs a pure conv/pool/relu chain over shifted crops of an image and
// scatters the flattened nt x nt output block of every fitting window into
// the field at channel offset chan_off. Window top-left (y, x) maps to
// field position (y - win_off_y, x - win_off_x).
void scan_branch(const Net<float>& net, const Tensor<float>& image, int win_side, int win_off_y,
                 int win_off_x, int stride, int nt, int chan_off, DescriptorField* field,
                 Coverage* cov) {
  const int h = image.dim(1), w = image.dim(2);
  for (int dy = 0; dy < stride; ++dy) {
    if (win_off_y + dy + win_side > h) break;
    for (int dx = 0; dx < stride; ++dx) {
      if (win_off_x + dx + win_side > w) break;
      const Tensor<float> out = net.infer(crop_from(image, win_off_y + dy, win_off_x + dx));
      const int c = out.dim(0), oh = out.dim(1), ow = out.dim(2);
      for (int i0 = 0; i0 + nt <= oh; ++i0) {
        const int fy = dy + stride * i0;
        if (fy >= field->height) break;
        for (int j0 = 0; j0 + nt <= ow; ++j0) {
          const int fx = dx + stride * j0;
          if (fx >= field->width) break;
          float* dst = field->at(fy, fx) + chan_off;
          std::size_t o = 0;
          for (int ci = 0; ci < c; ++ci) {
            for (int a = 0; a < nt; ++a) {
              for (int b = 0; b < nt; ++b) dst[o++] = out.at(ci, i0 + a, j0 + b);
            }
          }
          cov->mark(fy, fx);
        }
      }
    }
  }
}

}  // namespace

int stride_product(const ArchSpec& spec) {
  int s = 1;
  for (const LayerDescriptor& d : expand_stacks(spec).layers) {
    if (d.kind == LayerDescriptor::Kind::kConv) s *= d.args[2];
    if (d.kind == LayerDescriptor::Kind::kPool) s *= d.args[1];
  }
  return s;
}

RectifiedPair make_rectified(Tensor<float> left, Tensor<float> right, int d_max) {
  check_image(left, "left image");
  check_image(right, "right image");
  if (!left.same_shape(right)) {
    throw ShapeError("rectified pair dimensions differ: " + left.shape_string() + " vs " +
                     right.shape_string());
  }
  if (d_max < 1 || d_max >= left.dim(2)) {
    throw ConfigError("d_max must be in [1, image width), got " + std::to_string(d_max));
  }
  RectifiedPair pair;
  pair.left = std::move(left);
  pair.right = std::move(right);
  pair.d_max = d_max;
  return pair;
}

EdgeWeightField build_edge_weights(const Tensor<float>& left, const MRFParams& params) {
  check_image(left, "left image");
  if (!(params.lambda1 >= 0.0) || !(params.lambda2 >= 0.0) || !(params.sigma > 0.0)) {
    throw ConfigError("smoothness parameters need lambda1, lambda2 >= 0 and sigma > 0");
  }
  const int h = left.dim(1), w = left.dim(2);
  auto px = [&](int y, int x) { return 255.0 * static_cast<double>(left.at(0, y, x)); };
  auto grad_mag = [&](int y, int x) {
    double gx, gy;
    if (w == 1) {
      gx = 0.0;
    } else if (x == 0) {
      gx = px(y, 1) - px(y, 0);
    } else if (x == w - 1) {
      gx = px(y, w - 1) - px(y, w - 2);
    } else {
      gx = 0.5 * (px(y, x + 1) - px(y, x - 1));
    }
    if (h == 1) {
      gy = 0.0;
    } else if (y == 0) {
      gy = px(1, x) - px(0, x);
    } else if (y == h - 1) {
      gy = px(h - 1, x) - px(h - 2, x);
    } else {
      gy = 0.5 * (px(y + 1, x) - px(y - 1, x));
    }
    return std::sqrt(gx * gx + gy * gy);
  };
  auto weight = [&](int y, int x) {
    return params.lambda1 +
           params.lambda2 * std::exp(-grad_mag(y, x) / (params.sigma * params.sigma));
  };

  EdgeWeightField ew;
  ew.height = h;
  ew.width = w;
  ew.horizontal.resize(static_cast<std::size_t>(h) * std::max(0, w - 1));
  ew.vertical.resize(static_cast<std::size_t>(std::max(0, h - 1)) * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x + 1 < w; ++x) {
      ew.horizontal[static_cast<std::size_t>(y) * (w - 1) + x] = weight(y, x);
    }
  }
  for (int y = 0; y + 1 < h; ++y) {
    for (int x = 0; x < w; ++x) {
      ew.vertical[static_cast<std::size_t>(y) * w + x] = weight(y, x);
    }
  }
  return ew;
}

// ---------------------------------------------------------------------------

DescriptorField dense_descriptors(const Model<float>& model, const Tensor<float>& image,
                                  int image_index) {
  if (!produces_descriptors(model.kind())) {
    throw CapabilityError(std::string("kind ") + kind_name(model.kind()) +
                          " has no descriptor tower for dense computation");
  }
  check_image(image, "descriptor input");
  if (image_index < 0 || image_index > 1) {
    throw ConfigError("image index must be 0 or 1, got " + std::to_string(image_index));
  }
  const int p = model.patch_size();
  const int h = image.dim(1), w = image.dim(2);
  if (h < p || w < p) {
    throw ShapeError("image " + image.shape_string() + " is smaller than the " +
                     std::to_string(p) + "-pixel window");
  }

  DescriptorField field;
  field.height = h - p + 1;
  field.width = w - p + 1;
  field.length = static_cast<int>(model.descriptor_length());
  field.values.assign(
      static_cast<std::size_t>(field.height) * field.width * field.length, 0.0f);

  switch (model.kind()) {
    case ModelKind::kSiam:
    case ModelKind::kPseudoSiam: {
      const Net<float>& br =
          model.branch(model.kind() == ModelKind::kPseudoSiam ? image_index : 0);
      const ArchSpec ex = expand_stacks(br.spec());
      const int s = stride_product(ex);
      const int nt = infer_shapes(ex, {1, p, p}).back()[1];
      Coverage cov(field.height, field.width);
      scan_branch(br, image, p, 0, 0, s, nt, 0, &field, &cov);
      cov.require_full("descriptors");
      break;
    }
    case ModelKind::kSiamSpp: {
      const Net<float>& br = model.branch(0);
      const ArchSpec ex = expand_stacks(br.spec());
      std::size_t spp_at = ex.layers.size();
      for (std::size_t i = 0; i < ex.layers.size(); ++i) {
        if (ex.layers[i].kind == LayerDescriptor::Kind::kSpp) {
          spp_at = i;
          break;
        }
      }
      if (spp_at == ex.layers.size()) throw Error("internal: spp kind without SPP layer");
      const int grid = ex.layers[spp_at].args[0];
      ArchSpec prefix;
      prefix.layers.assign(ex.layers.begin(), ex.layers.begin() + spp_at);
      const int s = stride_product(prefix);
      const int nt = infer_shapes(prefix, {1, p, p}).back()[1];
      Coverage cov(field.height, field.width);
      for (int dy = 0; dy < s && dy + p <= h; ++dy) {
        for (int dx = 0; dx < s && dx + p <= w; ++dx) {
          const Tensor<float> fm = br.infer_prefix(crop_from(image, dy, dx), spp_at);
          const int oh = fm.dim(1), ow = fm.dim(2);
          for (int i0 = 0; i0 + nt <= oh; ++i0) {
            const int fy = dy + s * i0;
            if (fy >= field.height) break;
            for (int j0 = 0; j0 + nt <= ow; ++j0) {
              const int fx = dx + s * j0;
              if (fx >= field.width) break;
              const Tensor<float> pooled = spp_pool(sub_block(fm, i0, j0, nt), grid, nullptr);
              float* dst = field.at(fy, fx);
              for (std::int64_t k = 0; k < pooled.numel(); ++k) dst[k] = pooled[k];
              cov.mark(fy, fx);
            }
          }
        }
      }
      cov.require_full("descriptors");
      break;
    }
    case ModelKind::kSiam2Stream: {
      const int half = p / 2, q = p / 4;
      const Net<float>& central = model.branch(0);
      const Net<float>& surround = model.branch(2);
      const int len_c = static_cast<int>(shape_numel(central.output_shape()));

      const ArchSpec exc = expand_stacks(central.spec());
      const int sc = stride_product(exc);
      const int ntc = infer_shapes(exc, {1, half, half}).back()[1];
      Coverage cov_c(field.height, field.width);
      scan_branch(central, image, half, q, q, sc, ntc, 0, &field, &cov_c);
      cov_c.require_full("central descriptors");

      const ArchSpec exs = expand_stacks(surround.spec());
      const int ss = stride_product(exs);
      const int nts = infer_shapes(exs, {1, half, half}).back()[1];
      Coverage cov_s(field.height, field.width);
      for (int py = 0; py < 2; ++py) {
        for (int px = 0; px < 2; ++px) {
          if (py + p > h || px + p > w) continue;
          const Tensor<float> down = downsample2(image, py, px);
          for (int dy = 0; dy < ss; ++dy) {
            if (py + 2 * dy + p > h) break;
            for (int dx = 0; dx < ss; ++dx) {
              if (px + 2 * dx + p > w) break;
              const Tensor<float> out = surround.infer(crop_from(down, dy, dx));
              const int c = out.dim(0), oh = out.dim(1), ow = out.dim(2);
              for (int i0 = 0; i0 + nts <= oh; ++i0) {
                const int fy = py + 2 * (dy + ss * i0);
                if (fy >= field.height) break;
                for (int j0 = 0; j0 + nts <= ow; ++j0) {
                  const int fx = px + 2 * (dx + ss * j0);
                  if (fx >= field.width) break;
                  float* dst = field.at(fy, fx) + len_c;
                  std::size_t o = 0;
                  for (int ci = 0; ci < c; ++ci) {
                    for (int a = 0; a < nts; ++a) {
                      for (int b = 0; b < nts; ++b) dst[o++] = out.at(ci, i0 + a, j0 + b);
                    }
                  }
                  cov_s.mark(fy, fx);
                }
              }
            }
          }
        }
      }
      cov_s.require_full("surround descriptors");
      break;
    }
    default:
      throw CapabilityError("dense descriptors unsupported for this kind");
  }

  if (model.mode() == MatchingMode::kL2Distance) {
    Tensor<float> v({field.length});
    for (int y = 0; y < field.height; ++y) {
      for (int x = 0; x < field.width; ++x) {
        float* d = field.at(y, x);
        for (int k = 0; k < field.length; ++k) v[k] = d[k];
        const Tensor<float> n = l2_normalize(v);
        for (int k = 0; k < field.length; ++k) d[k] = n[k];
      }
    }
  }
  return field;
}

// ---------------------------------------------------------------------------

namespace {

void validate_pair(const RectifiedPair& pair) {
  check_image(pair.left, "left image");
  check_image(pair.right, "right image");
  if (!pair.left.same_shape(pair.right)) {
    throw ShapeError("rectified pair dimensions differ: " + pair.left.shape_string() + " vs " +
                     pair.right.shape_string());
  }
  if (pair.d_max < 1 || pair.d_max >= pair.left.dim(2)) {
    throw ConfigError("d_max must be in [1, image width), got " + std::to_string(pair.d_max));
  }
}

CostVolume empty_volume(int h, int w, int d_max, std::string provenance) {
  CostVolume cv;
  cv.height = h;
  cv.width = w;
  cv.d_max = d_max;
  cv.values.assign(static_cast<std::size_t>(h) * w * (d_max + 1), 0.0);
  cv.pixel_valid.assign(static_cast<std::size_t>(h) * w, 0);
  cv.provenance = std::move(provenance);
  return cv;
}

// Fills entries whose right window leaves the image with one more than the
// pixel's largest valid cost so they never win and stay finite.
void apply_sentinel(CostVolume* cv, int y, int x, int first_invalid_d) {
  double max_valid = 0.0;
  for (int d = 0; d < first_invalid_d; ++d) max_valid = std::max(max_valid, cv->at(y, x, d));
  const double sentinel = max_valid + 1.0;
  for (int d = first_invalid_d; d <= cv->d_max; ++d) cv->at(y, x, d) = sentinel;
}

}  // namespace

CostVolume cost_volume_2ch(const Model<float>& model, const FixedStats& stats,
                           const RectifiedPair& pair) {
  if (!is_two_channel(model.kind())) {
    throw CapabilityError(std::string("cost_volume_2ch needs a two-channel kind, got ") +
                          kind_name(model.kind()));
  }
  if (model.mode() != MatchingMode::kDecisionLayer) {
    throw CapabilityError("cost_volume_2ch needs a decision-layer model");
  }
  validate_pair(pair);
  const int h = pair.left.dim(1), w = pair.left.dim(2);
  const int p = model.patch_size(), off = p / 2;
  const Tensor<float> left = preprocess<float>(pair.left, stats);
  const Tensor<float> right = preprocess<float>(pair.right, stats);

  CostVolume cv = empty_volume(h, w, pair.d_max,
                               std::string(kind_name(model.kind())) + "/decision");
  for (int y = 0; y < h; ++y) {
    const int y0 = y - off;
    if (y0 < 0 || y0 + p > h) continue;
    for (int x = 0; x < w; ++x) {
      const int x0 = x - off;
      if (x0 < 0 || x0 + p > w) continue;
      cv.pixel_valid[static_cast<std::size_t>(y) * w + x] = 1;
      const Tensor<float> wl = window_at(left, y0, x0, p);
      int d = 0;
      for (; d <= pair.d_max; ++d) {
        const int xr0 = x0 - d;
        if (xr0 < 0) break;
        const Tensor<float> wr = window_at(right, y0, xr0, p);
        cv.at(y, x, d) = -static_cast<double>(model.decision_score(wl, wr));
      }
      if (d <= pair.d_max) apply_sentinel(&cv, y, x, d);
    }
  }
  return cv;
}

CostVolume cost_volume_siam(const Model<float>& model, const FixedStats& stats,
                            const RectifiedPair& pair, MatchingMode mode) {
  if (!produces_descriptors(model.kind())) {
    throw CapabilityError(std::string("cost_volume_siam needs a descriptor kind, got ") +
                          kind_name(model.kind()));
  }
  if (mode != model.mode()) {
    throw CapabilityError(std::string("requested ") + mode_name(mode) + " costs from a " +
                          mode_name(model.mode()) + "-mode model");
  }
  validate_pair(pair);
  const int h = pair.left.dim(1), w = pair.left.dim(2);
  const int p = model.patch_size(), off = p / 2;
  if (h < p || w < p) {
    throw ShapeError("images smaller than the " + std::to_string(p) + "-pixel window");
  }
  const Tensor<float> left = preprocess<float>(pair.left, stats);
  const Tensor<float> right = preprocess<float>(pair.right, stats);
  const DescriptorField d1 = dense_descriptors(model, left, 0);
  const DescriptorField d2 = dense_descriptors(model, right, 1);
  const int len = d1.length;

  CostVolume cv = empty_volume(h, w, pair.d_max,
                               std::string(kind_name(model.kind())) + "/" + mode_name(mode));
  Tensor<float> joint({2 * len});
  for (int y = 0; y < h; ++y) {
    const int y0 = y - off;
    if (y0 < 0 || y0 + p > h) continue;
    for (int x = 0; x < w; ++x) {
      const int x0 = x - off;
      if (x0 < 0 || x0 + p > w) continue;
      cv.pixel_valid[static_cast<std::size_t>(y) * w + x] = 1;
      const float* a = d1.at(y0, x0);
      int d = 0;
      for (; d <= pair.d_max; ++d) {
        const int xr0 = x0 - d;
        if (xr0 < 0) break;
        const float* b = d2.at(y0, xr0);
        if (mode == MatchingMode::kL2Distance) {
          double sq = 0.0;
          for (int k = 0; k < len; ++k) {
            const double diff = static_cast<double>(a[k]) - static_cast<double>(b[k]);
            sq += diff * diff;
          }
          cv.at(y, x, d) = std::sqrt(sq);
        } else {
          for (int k = 0; k < len; ++k) joint[k] = a[k];
          for (int k = 0; k < len; ++k) joint[len + k] = b[k];
          cv.at(y, x, d) = -static_cast<double>(model.top().infer(joint)[0]);
        }
      }
      if (d <= pair.d_max) apply_sentinel(&cv, y, x, d);
    }
  }
  return cv;
}

// ---------------------------------------------------------------------------

DisparityMap wta(const CostVolume& cv) {
  DisparityMap map;
  map.height = cv.height;
  map.width = cv.width;
  map.d_max = cv.d_max;
  map.disp.assign(static_cast<std::size_t>(cv.height) * cv.width, 0);
  map.valid = cv.pixel_valid;
  for (int y = 0; y < cv.height; ++y) {
    for (int x = 0; x < cv.width; ++x) {
      int best = 0;
      double best_cost = cv.at(y, x, 0);
      for (int d = 1; d <= cv.d_max; ++d) {
        if (cv.at(y, x, d) < best_cost) {
          best_cost = cv.at(y, x, d);
          best = d;
        }
      }
      map.disp[static_cast<std::size_t>(y) * cv.width + x] = best;
    }
  }
  return map;
}

double mrf_energy(const DisparityMap& d, const CostVolume& cv, const EdgeWeightField& ew) {
  if (d.height != cv.height || d.width != cv.width || ew.height != cv.height ||
      ew.width != cv.width) {
    throw ShapeError("disparity map, cost volume, and edge field sizes disagree");
  }
  const int h = cv.height, w = cv.width;
  double energy = 0.0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) energy += cv.at(y, x, d.at(y, x));
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x + 1 < w; ++x) {
      energy += ew.h_weight(y, x) * std::abs(d.at(y, x) - d.at(y, x + 1));
    }
  }
  for (int y = 0; y + 1 < h; ++y) {
    for (int x = 0; x < w; ++x) {
      energy += ew.v_weight(y, x) * std::abs(d.at(y, x) - d.at(y + 1, x));
    }
  }
  return energy;
}

namespace {

// In-place lower envelope under a linear move penalty:
// a[l] <- min_l' a[l'] + weight * |l - l'|.
void dt_linear(std::vector<double>& a, double weight) {
  for (std::size_t l = 1; l < a.size(); ++l) a[l] = std::min(a[l], a[l - 1] + weight);
  for (std::size_t l = a.size() - 1; l-- > 0;) a[l] = std::min(a[l], a[l + 1] + weight);
}

// Exact chain optimum by forward Viterbi with the linear-penalty envelope
// and a recomputing backtrack; ties resolve to the smallest label.
std::vector<int> chain_exact(const std::vector<std::vector<double>>& cost,
                             const std::vector<double>& weight) {
  const std::size_t n = cost.size();
  const std::size_t labels = cost[0].size();
  std::vector<std::vector<double>> m(n);
  m[0] = cost[0];
  for (std::size_t i = 1; i < n; ++i) {
    std::vector<double> t = m[i - 1];
    dt_linear(t, weight[i - 1]);
    m[i].resize(labels);
    for (std::size_t l = 0; l < labels; ++l) m[i][l] = cost[i][l] + t[l];
  }
  std::vector<int> out(n, 0);
  {
    std::size_t best = 0;
    for (std::size_t l = 1; l < labels; ++l) {
      if (m[n - 1][l] < m[n - 1][best]) best = l;
    }
    out[n - 1] = static_cast<int>(best);
  }
  for (std::size_t i = n - 1; i-- > 0;) {
    const double w = weight[i];
    std::size_t best = 0;
    double best_cost = m[i][0] + w * std::abs(0 - out[i + 1]);
    for (std::size_t l = 1; l < labels; ++l) {
      const double c = m[i][l] + w * std::abs(static_cast<int>(l) - out[i + 1]);
      if (c < best_cost) {
        best_cost = c;
        best = l;
      }
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

DisparityMap chain_optimize(const CostVolume& cv, const EdgeWeightField& ew) {
  const bool row = cv.height == 1;
  const int n = row ? cv.width : cv.height;
  const int labels = cv.d_max + 1;
  std::vector<std::vector<double>> cost(n, std::vector<double>(labels));
  std::vector<double> weight(std::max(0, n - 1));
  for (int i = 0; i < n; ++i) {
    for (int l = 0; l < labels; ++l) cost[i][l] = row ? cv.at(0, i, l) : cv.at(i, 0, l);
  }
  for (int i = 0; i + 1 < n; ++i) weight[i] = row ? ew.h_weight(0, i) : ew.v_weight(i, 0);
  const std::vector<int> labels_out = chain_exact(cost, weight);

  DisparityMap map;
  map.height = cv.height;
  map.width = cv.width;
  map.d_max = cv.d_max;
  map.disp.assign(labels_out.begin(), labels_out.end());
  map.valid = cv.pixel_valid;
  return map;
}

// One scanline family of the semi-global aggregation: accumulates
// L(p, l) = C(p, l) + envelope(L(prev, .), w(prev, p)) into sum.
void sgm_accumulate(const CostVolume& cv, const EdgeWeightField& ew, int dir,
                    std::vector<double>& sum) {
  const int h = cv.height, w = cv.width, labels = cv.d_max + 1;
  auto at_sum = [&](int y, int x) {
    return sum.begin() + (static_cast<std::size_t>(y) * w + x) * labels;
  };
  std::vector<double> prev(labels), cur(labels);
  const bool horizontal = dir == 0 || dir == 1;
  const int lines = horizontal ? h : w;
  const int steps = horizontal ? w : h;
  for (int line = 0; line < lines; ++line) {
    for (int step = 0; step < steps; ++step) {
      int y, x;
      if (dir == 0) {  // left to right
        y = line, x = step;
      } else if (dir == 1) {  // right to left
        y = line, x = w - 1 - step;
      } else if (dir == 2) {  // top to bottom
        y = step, x = line;
      } else {  // bottom to top
        y = h - 1 - step, x = line;
      }
      if (step == 0) {
        for (int l = 0; l < labels; ++l) cur[l] = cv.at(y, x, l);
      } else {
        double edge_w = 0.0;
        if (dir == 0) edge_w = ew.h_weight(y, x - 1);
        if (dir == 1) edge_w = ew.h_weight(y, x);
        if (dir == 2) edge_w = ew.v_weight(y - 1, x);
        if (dir == 3) edge_w = ew.v_weight(y, x);
        std::vector<double> env = prev;
        dt_linear(env, edge_w);
        for (int l = 0; l < labels; ++l) cur[l] = cv.at(y, x, l) + env[l];
      }
      auto dst = at_sum(y, x);
      for (int l = 0; l < labels; ++l) dst[l] += cur[l];
      std::swap(prev, cur);
    }
  }
}

DisparityMap sgm_labeling(const CostVolume& cv, const EdgeWeightField& ew) {
  const int h = cv.height, w = cv.width, labels = cv.d_max + 1;
  std::vector<double> sum(static_cast<std::size_t>(h) * w * labels, 0.0);
  for (int dir = 0; dir < 4; ++dir) sgm_accumulate(cv, ew, dir, sum);

  DisparityMap map;
  map.height = h;
  map.width = w;
  map.d_max = cv.d_max;
  map.disp.assign(static_cast<std::size_t>(h) * w, 0);
  map.valid = cv.pixel_valid;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const auto base = sum.begin() + (static_cast<std::size_t>(y) * w + x) * labels;
      // Each direction re-adds the unary; correct to a single count.
      int best = 0;
      double best_cost = base[0] - 3.0 * cv.at(y, x, 0);
      for (int l = 1; l < labels; ++l) {
        const double c = base[l] - 3.0 * cv.at(y, x, l);
        if (c < best_cost) {
          best_cost = c;
          best = l;
        }
      }
      map.disp[static_cast<std::size_t>(y) * w + x] = best;
    }
  }
  return map;
}

// Greedy per-pixel relabeling; every accepted move strictly lowers the
// global energy, so the sweep loop terminates.
void icm_refine(const CostVolume& cv, const EdgeWeightField& ew, DisparityMap* map) {
  const int h = cv.height, w = cv.width;
  auto d_at = [&](int y, int x) { return map->disp[static_cast<std::size_t>(y) * w + x]; };
  auto local = [&](int y, int x, int l) {
    double c = cv.at(y, x, l);
    if (x > 0) c += ew.h_weight(y, x - 1) * std::abs(l - d_at(y, x - 1));
    if (x + 1 < w) c += ew.h_weight(y, x) * std::abs(l - d_at(y, x + 1));
    if (y > 0) c += ew.v_weight(y - 1, x) * std::abs(l - d_at(y - 1, x));
    if (y + 1 < h) c += ew.v_weight(y, x) * std::abs(l - d_at(y + 1, x));
    return c;
  };
  for (int sweep = 0; sweep < 8; ++sweep) {
    bool changed = false;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const int cur = d_at(y, x);
        int best = cur;
        double best_cost = local(y, x, cur);
        for (int l = 0; l <= cv.d_max; ++l) {
          if (l == cur) continue;
          const double c = local(y, x, l);
          if (c < best_cost) {
            best_cost = c;
            best = l;
          }
        }
        if (best != cur) {
          map->disp[static_cast<std::size_t>(y) * w + x] = best;
          changed = true;
        }
      }
    }
    if (!changed) break;
  }
}

}  // namespace

DisparityMap optimize_mrf(const CostVolume& cv, const EdgeWeightField& ew) {
  if (ew.height != cv.height || ew.width != cv.width) {
    throw ShapeError("cost volume and edge field sizes disagree");
  }
  DisparityMap base = wta(cv);
  const double e_base = mrf_energy(base, cv, ew);

  DisparityMap cand;
  if (cv.height == 1 || cv.width == 1) {
    cand = chain_optimize(cv, ew);
  } else {
    cand = sgm_labeling(cv, ew);
    if (mrf_energy(cand, cv, ew) > e_base) cand = base;
    icm_refine(cv, ew, &cand);
  }
  return mrf_energy(cand, cv, ew) <= e_base ? cand : base;
}

// ---------------------------------------------------------------------------

ErrorStats error_stats(const DisparityMap& d, const DisparityMap& gt,
                       const std::vector<std::uint8_t>& occlusion,
                       const std::vector<double>& thresholds) {
  if (d.height != gt.height || d.width != gt.width) {
    throw ShapeError("estimate and ground truth sizes disagree");
  }
  const std::size_t n = static_cast<std::size_t>(d.height) * d.width;
  if (!occlusion.empty() && occlusion.size() != n) {
    throw ShapeError("occlusion mask size disagrees with the maps");
  }
  ErrorStats stats;
  stats.thresholds = thresholds;
  for (double t : thresholds) {
    std::size_t all = 0, all_ok = 0, unocc = 0, unocc_ok = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!gt.valid[i] || !d.valid[i]) continue;
      const bool ok = std::abs(d.disp[i] - gt.disp[i]) <= t;
      ++all;
      all_ok += ok;
      if (occlusion.empty() || !occlusion[i]) {
        ++unocc;
        unocc_ok += ok;
      }
    }
    if (all == 0) throw DegenerateDataError("no pixels with valid estimate and ground truth");
    if (unocc == 0) throw DegenerateDataError("every evaluated pixel is occluded");
    stats.fraction_all.push_back(static_cast<double>(all_ok) / static_cast<double>(all));
    stats.fraction_unoccluded.push_back(static_cast<double>(unocc_ok) /
                                        static_cast<double>(unocc));
  }
  return stats;
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::uint16_t kInvalidCode16 = 65535;

void put_u32(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff),
                         static_cast<char>((v >> 24) & 0xff)};
  out.write(bytes, 4);
}

std::uint32_t get_u32(std::istream& in, const std::string& path) {
  unsigned char bytes[4];
  if (!in.read(reinterpret_cast<char*>(bytes), 4)) {
    throw IoError("truncated disparity file " + path);
  }
  return static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
         (static_cast<std::uint32_t>(bytes[2]) << 16) |
         (static_cast<std::uint32_t>(bytes[3]) << 24);
}

}  // namespace

void write_disparity_pgm16(const std::string& pgm_path, const std::string& sidecar_path,
                           const DisparityMap& map) {
  const int scale = std::max(1, (kInvalidCode16 - 1) / std::max(1, map.d_max));
  GrayImage16 img;
  img.width = map.width;
  img.height = map.height;
  img.pixels.resize(static_cast<std::size_t>(map.width) * map.height);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    img.pixels[i] = map.valid[i] ? static_cast<std::uint16_t>(map.disp[i] * scale)
                                 : kInvalidCode16;
  }
  write_pgm16(pgm_path, img);

  std::ofstream side(sidecar_path);
  if (!side) throw IoError("cannot write sidecar " + sidecar_path);
  side << "scale " << scale << "\n";
  side << "invalid " << kInvalidCode16 << "\n";
  side << "d_max " << map.d_max << "\n";
}

DisparityMap read_disparity_pgm16(const std::string& pgm_path, const std::string& sidecar_path) {
  std::ifstream side(sidecar_path);
  if (!side) throw IoError("missing sidecar " + sidecar_path);
  int scale = 0, invalid_code = -1, d_max = -1;
  std::string key;
  while (side >> key) {
    if (key == "scale") {
      side >> scale;
    } else if (key == "invalid") {
      side >> invalid_code;
    } else if (key == "d_max") {
      side >> d_max;
    } else {
      throw IoError("unknown sidecar key '" + key + "' in " + sidecar_path);
    }
  }
  if (scale < 1 || d_max < 0) throw IoError("sidecar " + sidecar_path + " is incomplete");

  const GrayImage16 img = read_pgm16(pgm_path);
  DisparityMap map;
  map.height = img.height;
  map.width = img.width;
  map.d_max = d_max;
  map.disp.assign(static_cast<std::size_t>(img.width) * img.height, 0);
  map.valid.assign(map.disp.size(), 0);
  for (std::size_t i = 0; i < map.disp.size(); ++i) {
    if (invalid_code >= 0 && img.pixels[i] == invalid_code) continue;
    map.disp[i] = img.pixels[i] / scale;
    map.valid[i] = 1;
  }
  return map;
}

void write_disparity_binary(const std::string& path, const DisparityMap& map) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write disparity file " + path);
  put_u32(out, static_cast<std::uint32_t>(map.height));
  put_u32(out, static_cast<std::uint32_t>(map.width));
  put_u32(out, static_cast<std::uint32_t>(map.d_max));
  for (std::size_t i = 0; i < map.disp.size(); ++i) {
    const float v = map.valid[i] ? static_cast<float>(map.disp[i]) : -1.0f;
    put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  if (!out) throw IoError("short write to " + path);
}

DisparityMap read_disparity_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("missing disparity file " + path);
  DisparityMap map;
  map.height = static_cast<int>(get_u32(in, path));
  map.width = static_cast<int>(get_u32(in, path));
  map.d_max = static_cast<int>(get_u32(in, path));
  if (map.height < 1 || map.width < 1 || map.d_max < 0) {
    throw IoError("implausible disparity header in " + path);
  }
  const std::size_t n = static_cast<std::size_t>(map.height) * map.width;
  map.disp.assign(n, 0);
  map.valid.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const float v = std::bit_cast<float>(get_u32(in, path));
    if (v >= 0.0f) {
      map.disp[i] = static_cast<int>(std::lround(v));
      map.valid[i] = 1;
    }
  }
  return map;
}

void write_error_csv(const std::string& path, const ErrorStats& stats) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write error stats " + path);
  out << "threshold,fraction_all,fraction_unoccluded\n";
  char buf[96];
  for (std::size_t i = 0; i < stats.thresholds.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g", stats.thresholds[i],
                  stats.fraction_all[i], stats.fraction_unoccluded[i]);
    out << buf << "\n";
  }
}

}  // namespace patchsim
