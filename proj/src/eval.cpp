#include "patchsim/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace patchsim {

const std::array<std::string, 3> kProtocolSets = {"yosemite", "notredame", "liberty"};

namespace {

void validate_scored_pairs(const ScoredPairs& sp) {
  if (sp.scores.size() != sp.labels.size()) {
    throw ShapeError("scored pairs: " + std::to_string(sp.scores.size()) + " scores vs " +
                     std::to_string(sp.labels.size()) + " labels");
  }
  int pos = 0, neg = 0;
  for (int l : sp.labels) {
    if (l == 1) {
      ++pos;
    } else if (l == -1) {
      ++neg;
    } else {
      throw DegenerateDataError("pair label must be +1 or -1, got " + std::to_string(l));
    }
  }
  if (pos == 0 || neg == 0) {
    throw DegenerateDataError("ROC needs both classes: " + std::to_string(pos) +
                              " positives, " + std::to_string(neg) + " negatives");
  }
}

}  // namespace

std::vector<RocPoint> roc_curve(const ScoredPairs& sp) {
  validate_scored_pairs(sp);
  const std::size_t n = sp.scores.size();

  // Normalize so that a larger value always means "more similar".
  std::vector<std::pair<double, int>> ranked(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double s =
        sp.polarity == Polarity::kHigherIsSimilar ? sp.scores[i] : -sp.scores[i];
    ranked[i] = {s, sp.labels[i]};
  }
  std::sort(ranked.begin(), ranked.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });

  std::size_t total_pos = 0, total_neg = 0;
  for (const auto& [s, l] : ranked) (l == 1 ? total_pos : total_neg)++;

  std::vector<RocPoint> points;
  points.push_back({0.0, 0.0});
  std::size_t tp = 0, fp = 0, i = 0;
  while (i < n) {
    const double threshold = ranked[i].first;
    while (i < n && ranked[i].first == threshold) {
      (ranked[i].second == 1 ? tp : fp)++;
      ++i;
    }
    points.push_back({static_cast<double>(fp) / static_cast<double>(total_neg),
                      static_cast<double>(tp) / static_cast<double>(total_pos)});
  }
  return points;
}

double fpr_at_recall(const ScoredPairs& sp, double recall) {
  if (!(recall > 0.0) || recall > 1.0) {
    throw ConfigError("recall must be in (0, 1], got " + std::to_string(recall));
  }
  const std::vector<RocPoint> points = roc_curve(sp);
  for (std::size_t k = 1; k < points.size(); ++k) {
    if (points[k].tpr >= recall) {
      const RocPoint& lo = points[k - 1];
      const RocPoint& hi = points[k];
      if (hi.tpr == recall || hi.tpr == lo.tpr) return hi.fpr;
      const double t = (recall - lo.tpr) / (hi.tpr - lo.tpr);
      return lo.fpr + t * (hi.fpr - lo.fpr);
    }
  }
  return 1.0;  // unreachable: the final sweep point is (1, 1)
}

double roc_area(const std::vector<RocPoint>& points) {
  double area = 0.0;
  for (std::size_t k = 1; k < points.size(); ++k) {
    area += 0.5 * (points[k].tpr + points[k - 1].tpr) * (points[k].fpr - points[k - 1].fpr);
  }
  return area;
}

ScoredPairs score_pairs(const PatchStore& store, const PairList& pairs,
                        const ProtocolScorer& scorer) {
  if (!scorer.score) throw ConfigError("pair scorer is empty");
  ScoredPairs sp;
  sp.polarity = scorer.polarity;
  sp.scores.reserve(pairs.entries.size());
  sp.labels.reserve(pairs.entries.size());
  for (const PairEntry& e : pairs.entries) {
    sp.scores.push_back(scorer.score(store, e));
    sp.labels.push_back(e.label);
  }
  return sp;
}

BenchmarkReport run_protocol(const std::map<std::string, ProtocolScorer>& scorers,
                             const std::map<std::string, const PatchStore*>& stores,
                             const std::map<std::string, PairList>& pairfiles) {
  BenchmarkReport report;
  double sum = 0.0, sum_1_4 = 0.0;
  for (const std::string& train : kProtocolSets) {
    const auto scorer_it = scorers.find(train);
    if (scorer_it == scorers.end()) throw ConfigError("no scorer for training set " + train);
    for (const std::string& test : kProtocolSets) {
      if (test == train) continue;
      const auto store_it = stores.find(test);
      if (store_it == stores.end() || store_it->second == nullptr) {
        throw ConfigError("no patch store for test set " + test);
      }
      const auto pair_it = pairfiles.find(test);
      if (pair_it == pairfiles.end()) throw ConfigError("no pair list for test set " + test);

      ReportRow row;
      row.train = train;
      row.test = test;
      row.fpr95 =
          fpr_at_recall(score_pairs(*store_it->second, pair_it->second, scorer_it->second));
      sum += row.fpr95;
      if (report.rows.size() < 4) sum_1_4 += row.fpr95;
      report.rows.push_back(std::move(row));
    }
  }
  report.mean = sum / 6.0;
  report.mean_1_4 = sum_1_4 / 4.0;
  return report;
}

ProtocolScorer make_model_scorer(const Model<float>& model, const FixedStats& stats) {
  ProtocolScorer scorer;
  if (model.mode() == MatchingMode::kDecisionLayer) {
    scorer.polarity = Polarity::kHigherIsSimilar;
    scorer.score = [&model, stats](const PatchStore& store, const PairEntry& e) {
      const Tensor<float> p1 = preprocess(store.patches[e.index1], stats);
      const Tensor<float> p2 = preprocess(store.patches[e.index2], stats);
      return model.decision_score(p1, p2);
    };
  } else {
    scorer.polarity = Polarity::kLowerIsSimilar;
    scorer.score = [&model, stats](const PatchStore& store, const PairEntry& e) {
      const Tensor<float> p1 = preprocess(store.patches[e.index1], stats);
      const Tensor<float> p2 = preprocess(store.patches[e.index2], stats);
      return match_descriptors(model.extract_descriptor(p1), model.extract_descriptor(p2));
    };
  }
  return scorer;
}

void write_report_csv(const std::string& path, const BenchmarkReport& report) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write report " + path);
  out << "train,test,fpr95\n";
  char buf[64];
  for (const ReportRow& row : report.rows) {
    std::snprintf(buf, sizeof(buf), "%.17g", row.fpr95);
    out << row.train << "," << row.test << "," << buf << "\n";
  }
  std::snprintf(buf, sizeof(buf), "%.17g", report.mean);
  out << "mean,all," << buf << "\n";
  std::snprintf(buf, sizeof(buf), "%.17g", report.mean_1_4);
  out << "mean,first4," << buf << "\n";
}

void write_roc_csv(const std::string& path, const std::vector<RocPoint>& points) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write ROC points " + path);
  out << "fpr,tpr\n";
  char buf[64];
  for (const RocPoint& p : points) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g", p.fpr, p.tpr);
    out << buf << "\n";
  }
}

// ---------------------------------------------------------------------------

std::vector<Keypoint> read_keypoints(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("missing keypoint file " + path);
  std::vector<Keypoint> kps;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    Keypoint kp;
    if (!(ls >> kp.x)) continue;  // blank line
    if (!(ls >> kp.y >> kp.scale)) {
      throw IoError("malformed keypoint line " + std::to_string(line_no) + " in " + path);
    }
    if (!(kp.scale > 0.0)) {
      throw IoError("non-positive keypoint scale on line " + std::to_string(line_no) + " in " +
                    path);
    }
    kps.push_back(kp);
  }
  return kps;
}

Homography read_homography(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("missing homography file " + path);
  Homography h;
  for (double& v : h) {
    if (!(in >> v)) throw IoError("homography file " + path + " needs 9 numbers");
  }
  return h;
}

namespace {

double homography_det(const Homography& h) {
  return h[0] * (h[4] * h[8] - h[5] * h[7]) - h[1] * (h[3] * h[8] - h[5] * h[6]) +
         h[2] * (h[3] * h[7] - h[4] * h[6]);
}

void check_invertible(const Homography& h) {
  double max_abs = 0.0;
  for (double v : h) max_abs = std::max(max_abs, std::abs(v));
  const double det = homography_det(h);
  if (max_abs == 0.0 || std::abs(det) <= 1e-12 * max_abs * max_abs * max_abs) {
    throw NumericError("homography is singular");
  }
}

}  // namespace

std::array<double, 2> apply_homography(const Homography& h, double x, double y) {
  const double w = h[6] * x + h[7] * y + h[8];
  if (w == 0.0 || !std::isfinite(w)) {
    throw NumericError("homography maps point to infinity");
  }
  return {(h[0] * x + h[1] * y + h[2]) / w, (h[3] * x + h[4] * y + h[5]) / w};
}

Tensor<float> extract_keypoint_patch(const Tensor<float>& image, const Keypoint& kp,
                                     int out_side) {
  if (image.ndim() != 3 || image.dim(0) != 1) {
    throw ShapeError("keypoint extraction expects a 1xHxW image, got " + image.shape_string());
  }
  if (out_side < 1) throw ConfigError("output side must be positive");
  const int h = image.dim(1), w = image.dim(2);
  const double side = 3.0 * kp.scale;
  Tensor<float> out({1, out_side, out_side});
  for (int i = 0; i < out_side; ++i) {
    const double sy = kp.y + ((i + 0.5) / out_side - 0.5) * side;
    for (int j = 0; j < out_side; ++j) {
      const double sx = kp.x + ((j + 0.5) / out_side - 0.5) * side;
      const double cx = std::min(std::max(sx, 0.0), static_cast<double>(w - 1));
      const double cy = std::min(std::max(sy, 0.0), static_cast<double>(h - 1));
      const int x0 = static_cast<int>(std::floor(cx));
      const int y0 = static_cast<int>(std::floor(cy));
      const int x1 = std::min(x0 + 1, w - 1);
      const int y1 = std::min(y0 + 1, h - 1);
      const double fx = cx - x0, fy = cy - y0;
      const double v = (1.0 - fy) * ((1.0 - fx) * image.at(0, y0, x0) + fx * image.at(0, y0, x1)) +
                       fy * ((1.0 - fx) * image.at(0, y1, x0) + fx * image.at(0, y1, x1));
      out.at(0, i, j) = static_cast<float>(v);
    }
  }
  return out;
}

std::vector<std::pair<int, int>> ground_truth_correspondences(
    const std::vector<Keypoint>& kps1, const std::vector<Keypoint>& kps2, const Homography& h,
    double pixel_tol) {
  if (kps1.empty() || kps2.empty()) {
    throw DegenerateDataError("keypoint sets must be non-empty");
  }
  check_invertible(h);

  const int n1 = static_cast<int>(kps1.size());
  const int n2 = static_cast<int>(kps2.size());
  std::vector<std::array<double, 2>> projected(n1);
  for (int i = 0; i < n1; ++i) projected[i] = apply_homography(h, kps1[i].x, kps1[i].y);

  auto sq_dist = [&](int i, int j) {
    const double dx = projected[i][0] - kps2[j].x;
    const double dy = projected[i][1] - kps2[j].y;
    return dx * dx + dy * dy;
  };

  std::vector<int> nearest2(n1, 0);   // for each projected point, closest kps2
  std::vector<int> nearest1(n2, 0);   // for each kps2 point, closest projected
  for (int i = 0; i < n1; ++i) {
    double best = sq_dist(i, 0);
    for (int j = 1; j < n2; ++j) {
      const double d = sq_dist(i, j);
      if (d < best) {
        best = d;
        nearest2[i] = j;
      }
    }
  }
  for (int j = 0; j < n2; ++j) {
    double best = sq_dist(0, j);
    for (int i = 1; i < n1; ++i) {
      const double d = sq_dist(i, j);
      if (d < best) {
        best = d;
        nearest1[j] = i;
      }
    }
  }

  std::vector<std::pair<int, int>> gt;
  const double tol_sq = pixel_tol * pixel_tol;
  for (int i = 0; i < n1; ++i) {
    const int j = nearest2[i];
    if (nearest1[j] == i && sq_dist(i, j) <= tol_sq) gt.emplace_back(i, j);
  }
  return gt;
}

MatchEvalResult match_pr_from_similarity(const std::vector<std::vector<double>>& similarity,
                                         const std::vector<std::pair<int, int>>& ground_truth) {
  if (ground_truth.empty()) {
    throw DegenerateDataError("no ground-truth correspondences within tolerance");
  }
  const int n1 = static_cast<int>(similarity.size());
  if (n1 == 0) throw DegenerateDataError("similarity matrix is empty");
  const int n2 = static_cast<int>(similarity[0].size());
  for (const auto& row : similarity) {
    if (static_cast<int>(row.size()) != n2) {
      throw ShapeError("similarity matrix rows have unequal lengths");
    }
  }

  std::set<std::pair<int, int>> gt(ground_truth.begin(), ground_truth.end());
  struct Candidate {
    double sim;
    int i, j;
  };
  std::vector<Candidate> candidates;
  candidates.reserve(static_cast<std::size_t>(n1) * n2);
  for (int i = 0; i < n1; ++i) {
    for (int j = 0; j < n2; ++j) candidates.push_back({similarity[i][j], i, j});
  }
  std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
    if (a.sim != b.sim) return a.sim > b.sim;
    if (a.i != b.i) return a.i < b.i;
    return a.j < b.j;
  });

  MatchEvalResult result;
  result.n_ground_truth = static_cast<int>(gt.size());
  std::size_t tp = 0, taken = 0, k = 0;
  while (k < candidates.size()) {
    const double threshold = candidates[k].sim;
    while (k < candidates.size() && candidates[k].sim == threshold) {
      if (gt.count({candidates[k].i, candidates[k].j})) ++tp;
      ++taken;
      ++k;
    }
    PrPoint p;
    p.threshold = threshold;
    p.recall = static_cast<double>(tp) / static_cast<double>(gt.size());
    p.precision = static_cast<double>(tp) / static_cast<double>(taken);
    result.curve.push_back(p);
  }

  double area = 0.0;
  double prev_recall = 0.0, prev_precision = result.curve.front().precision;
  for (const PrPoint& p : result.curve) {
    area += 0.5 * (p.precision + prev_precision) * (p.recall - prev_recall);
    prev_recall = p.recall;
    prev_precision = p.precision;
  }
  result.mean_average_precision = area;
  return result;
}

MatchEvalResult homography_match_eval(const std::vector<Keypoint>& kps1,
                                      const std::vector<Descriptor<float>>& descs1,
                                      const std::vector<Keypoint>& kps2,
                                      const std::vector<Descriptor<float>>& descs2,
                                      const Homography& h, double pixel_tol) {
  if (kps1.size() != descs1.size() || kps2.size() != descs2.size()) {
    throw ShapeError("keypoint and descriptor counts disagree");
  }
  const auto gt = ground_truth_correspondences(kps1, kps2, h, pixel_tol);
  std::vector<std::vector<double>> similarity(descs1.size(),
                                              std::vector<double>(descs2.size()));
  for (std::size_t i = 0; i < descs1.size(); ++i) {
    for (std::size_t j = 0; j < descs2.size(); ++j) {
      similarity[i][j] = -match_descriptors(descs1[i], descs2[j]);
    }
  }
  return match_pr_from_similarity(similarity, gt);
}

void write_pr_csv(const std::string& path, const MatchEvalResult& result) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write PR points " + path);
  out << "recall,precision,threshold\n";
  char buf[96];
  for (const PrPoint& p : result.curve) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g", p.recall, p.precision, p.threshold);
    out << buf << "\n";
  }
  std::snprintf(buf, sizeof(buf), "%.17g", result.mean_average_precision);
  out << "map,," << buf << "\n";
}

}  // namespace patchsim
