// Command-line front end: train, eval, stereo, describe, match.
//
// Every subcommand reads a flat key=value config file (--config) which can
// be overridden or replaced by trailing key=value arguments. Exit codes:
// 0 success, 2 configuration error, 3 I/O error, 4 numeric failure,
// 5 degenerate data, 6 operation unsupported for the model kind/mode.

#include <algorithm>
#include <bit>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "patchsim/checkpoint.hpp"
#include "patchsim/dataset.hpp"
#include "patchsim/eval.hpp"
#include "patchsim/image_io.hpp"
#include "patchsim/model.hpp"
#include "patchsim/stereo.hpp"
#include "patchsim/training.hpp"

namespace {

using namespace patchsim;

// Key=value settings with query tracking so typos surface as errors.
class Settings {
 public:
  void load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("missing config file " + path);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos) continue;
      const auto last = line.find_last_not_of(" \t\r");
      set_pair(line.substr(first, last - first + 1),
               path + ":" + std::to_string(line_no));
    }
  }

  void apply_overrides(const std::vector<std::string>& overrides) {
    for (const std::string& o : overrides) set_pair(o, "command line");
  }

  std::string require(const std::string& key) {
    const auto it = kv_.find(key);
    if (it == kv_.end()) throw ConfigError("missing required setting '" + key + "'");
    queried_.insert(key);
    return it->second;
  }

  std::string get(const std::string& key, const std::string& fallback) {
    queried_.insert(key);
    const auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
  }

  long long get_ll(const std::string& key, long long fallback) {
    return parse_ll(key, get(key, std::to_string(fallback)));
  }

  int get_int(const std::string& key, int fallback) {
    const long long v = get_ll(key, fallback);
    if (v < INT32_MIN || v > INT32_MAX) throw ConfigError("'" + key + "' out of range");
    return static_cast<int>(v);
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) {
    const std::string s = get(key, std::to_string(fallback));
    try {
      std::size_t pos = 0;
      const std::uint64_t v = std::stoull(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("setting '" + key + "' is not an unsigned integer: '" + s + "'");
    }
  }

  double get_double(const std::string& key, double fallback) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", fallback);
    const std::string s = get(key, buf);
    try {
      std::size_t pos = 0;
      const double v = std::stod(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("setting '" + key + "' is not a number: '" + s + "'");
    }
  }

  bool get_bool(const std::string& key, bool fallback) {
    const std::string s = get(key, fallback ? "1" : "0");
    if (s == "1" || s == "true") return true;
    if (s == "0" || s == "false") return false;
    throw ConfigError("setting '" + key + "' must be 0/1/true/false, got '" + s + "'");
  }

  std::vector<double> get_list(const std::string& key, const std::string& fallback) {
    const std::string s = get(key, fallback);
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item.empty()) continue;
      try {
        out.push_back(std::stod(item));
      } catch (const std::exception&) {
        throw ConfigError("setting '" + key + "' holds a bad number: '" + item + "'");
      }
    }
    if (out.empty()) throw ConfigError("setting '" + key + "' lists no values");
    return out;
  }

  void reject_unknown() const {
    for (const auto& [key, value] : kv_) {
      if (!queried_.count(key)) throw ConfigError("unknown setting '" + key + "'");
    }
  }

 private:
  void set_pair(const std::string& text, const std::string& where) {
    const auto eq = text.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("expected key=value at " + where + ", got '" + text + "'");
    }
    kv_[text.substr(0, eq)] = text.substr(eq + 1);
  }

  long long parse_ll(const std::string& key, const std::string& s) {
    try {
      std::size_t pos = 0;
      const long long v = std::stoll(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("setting '" + key + "' is not an integer: '" + s + "'");
    }
  }

  std::map<std::string, std::string> kv_;
  std::set<std::string> queried_;
};

Tensor<float> load_unit_pgm(const std::string& path) { return to_unit_tensor(read_pgm8(path)); }

void put_u32_le(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff),
                         static_cast<char>((v >> 24) & 0xff)};
  out.write(bytes, 4);
}

// ---------------------------------------------------------------------------

int cmd_train(Settings& s, const std::vector<std::pair<std::string, std::string>>& echo) {
  const std::string dataset_dir = s.require("dataset");
  const std::string dataset_name = s.get("dataset_name", "");
  const std::string pair_file = s.require("pairs");
  const ModelKind kind = kind_from_name(s.require("kind"));
  const MatchingMode mode = mode_from_name(s.get("mode", "decision"));
  const std::string checkpoint_out = s.require("checkpoint_out");
  const std::string telemetry_out = s.get("telemetry_out", "");

  BuildOptions opts;
  opts.reduced = s.get_bool("reduced", false);

  TrainConfig cfg;
  cfg.learning_rate = s.get_double("learning_rate", cfg.learning_rate);
  cfg.momentum = s.get_double("momentum", cfg.momentum);
  cfg.weight_decay = s.get_double("weight_decay", cfg.weight_decay);
  cfg.batch_size = s.get_int("batch_size", cfg.batch_size);
  cfg.iterations = s.get_ll("iterations", 0);
  cfg.seed = s.get_u64("seed", 0);
  cfg.averaging_start = s.get_ll("averaging_start", -1);
  cfg.telemetry_every = s.get_ll("telemetry_every", 10);
  cfg.validate();
  s.reject_unknown();

  const PatchStore store = load_patch_store(dataset_dir, dataset_name);
  const PairList pairs = load_pair_list(pair_file, store);
  const FixedStats stats = compute_stats(store);

  // Training always drives the decision layer; the requested matching mode
  // is stamped on the checkpoint afterwards.
  Model<float> model = build_model<float>(kind, cfg.seed, opts);

  std::ofstream telemetry;
  if (!telemetry_out.empty()) {
    telemetry.open(telemetry_out);
    if (!telemetry) throw IoError("cannot write telemetry " + telemetry_out);
    telemetry << "iteration,loss\n";
  }
  TelemetrySink sink = nullptr;
  if (telemetry.is_open()) {
    sink = [&telemetry](long long it, double loss, double) {
      char buf[48];
      std::snprintf(buf, sizeof(buf), "%lld,%.17g", it, loss);
      telemetry << buf << "\n";
    };
  }

  const BatchSampler<float> sampler = [&store, &pairs, &stats](int batch_size, Rng& rng) {
    return sample_batch<float>(store, pairs, batch_size, stats, rng);
  };
  const TrainStats result = train(model, sampler, cfg, sink);

  model.set_mode(mode);
  std::map<std::string, std::string> metadata;
  metadata["iterations"] = std::to_string(result.iterations);
  std::string echo_str;
  for (const auto& [k, v] : echo) {
    if (!echo_str.empty()) echo_str += " ";
    echo_str += k + "=" + v;
  }
  metadata["config"] = echo_str;
  save_checkpoint(checkpoint_out, model, stats, metadata);
  std::cout << "trained " << kind_name(kind) << " for " << result.iterations
            << " iterations, final batch loss " << result.final_loss << "\n";
  std::cout << "checkpoint written to " << checkpoint_out << "\n";
  return 0;
}

int cmd_eval(Settings& s) {
  std::map<std::string, std::string> ck_paths, ds_paths, pair_paths;
  for (const std::string& name : kProtocolSets) {
    ck_paths[name] = s.require("checkpoint_" + name);
    ds_paths[name] = s.require("dataset_" + name);
    pair_paths[name] = s.require("pairs_" + name);
  }
  const std::string report_out = s.require("report_out");
  const std::string roc_prefix = s.get("roc_out_prefix", "");
  s.reject_unknown();

  std::map<std::string, Checkpoint> checkpoints;
  std::map<std::string, PatchStore> stores;
  std::map<std::string, PairList> pairs;
  for (const std::string& name : kProtocolSets) {
    checkpoints[name] = load_checkpoint(ck_paths[name]);
    stores[name] = load_patch_store(ds_paths[name], name);
    pairs[name] = load_pair_list(pair_paths[name], stores[name]);
  }

  std::map<std::string, ProtocolScorer> scorers;
  std::map<std::string, const PatchStore*> store_ptrs;
  for (const std::string& name : kProtocolSets) {
    scorers[name] = make_model_scorer(checkpoints[name].model, checkpoints[name].stats);
    store_ptrs[name] = &stores[name];
  }

  const BenchmarkReport report = run_protocol(scorers, store_ptrs, pairs);
  write_report_csv(report_out, report);
  std::cout << "train,test,fpr95\n";
  for (const ReportRow& row : report.rows) {
    std::cout << row.train << "," << row.test << "," << row.fpr95 << "\n";
  }
  std::cout << "mean " << report.mean << ", mean over the first four rows " << report.mean_1_4
            << "\n";

  if (!roc_prefix.empty()) {
    for (const std::string& train : kProtocolSets) {
      for (const std::string& test : kProtocolSets) {
        if (train == test) continue;
        const ScoredPairs sp = score_pairs(stores[test], pairs[test], scorers[train]);
        write_roc_csv(roc_prefix + train + "_" + test + ".csv", roc_curve(sp));
      }
    }
  }
  return 0;
}

int cmd_stereo(Settings& s) {
  const std::string ck_path = s.require("checkpoint");
  const std::string left_path = s.require("left");
  const std::string right_path = s.require("right");
  const int d_max = s.get_int("d_max", 0);
  const std::string cost = s.get("cost", "decision");
  const std::string out_prefix = s.require("out_prefix");
  const std::string gt_path = s.get("gt", "");
  const std::string occ_path = s.get("occlusion", "");
  MRFParams params;
  params.lambda1 = s.get_double("lambda1", params.lambda1);
  params.lambda2 = s.get_double("lambda2", params.lambda2);
  params.sigma = s.get_double("sigma", params.sigma);
  const std::vector<double> thresholds = s.get_list("thresholds", "1,3,5");
  s.reject_unknown();

  const Checkpoint ck = load_checkpoint(ck_path);
  const RectifiedPair pair =
      make_rectified(load_unit_pgm(left_path), load_unit_pgm(right_path), d_max);

  CostVolume cv;
  if (cost == "decision" && is_two_channel(ck.model.kind())) {
    cv = cost_volume_2ch(ck.model, ck.stats, pair);
  } else if (cost == "decision" || cost == "l2") {
    cv = cost_volume_siam(ck.model, ck.stats, pair, mode_from_name(cost));
  } else {
    throw ConfigError("cost must be 'decision' or 'l2', got '" + cost + "'");
  }

  const EdgeWeightField ew = build_edge_weights(pair.left, params);
  const DisparityMap wta_map = wta(cv);
  const DisparityMap mrf_map = optimize_mrf(cv, ew);
  std::cout << "cost volume " << cv.provenance << ", per-pixel minimum energy "
            << mrf_energy(wta_map, cv, ew) << ", optimized energy " << mrf_energy(mrf_map, cv, ew)
            << "\n";

  write_disparity_pgm16(out_prefix + "wta.pgm", out_prefix + "wta.scale.txt", wta_map);
  write_disparity_binary(out_prefix + "wta.bin", wta_map);
  write_disparity_pgm16(out_prefix + "mrf.pgm", out_prefix + "mrf.scale.txt", mrf_map);
  write_disparity_binary(out_prefix + "mrf.bin", mrf_map);

  if (!gt_path.empty()) {
    const DisparityMap gt = read_disparity_binary(gt_path);
    std::vector<std::uint8_t> occlusion;
    if (!occ_path.empty()) {
      const GrayImage8 occ = read_pgm8(occ_path);
      if (occ.width != gt.width || occ.height != gt.height) {
        throw ShapeError("occlusion mask size disagrees with ground truth");
      }
      occlusion.assign(occ.pixels.begin(), occ.pixels.end());
    }
    write_error_csv(out_prefix + "wta_errors.csv",
                    error_stats(wta_map, gt, occlusion, thresholds));
    write_error_csv(out_prefix + "mrf_errors.csv",
                    error_stats(mrf_map, gt, occlusion, thresholds));
  }
  return 0;
}

int cmd_describe(Settings& s) {
  const std::string ck_path = s.require("checkpoint");
  const std::string dataset_dir = s.require("dataset");
  const std::string dataset_name = s.get("dataset_name", "");
  const std::string out_path = s.require("out");
  s.reject_unknown();

  const Checkpoint ck = load_checkpoint(ck_path);
  const PatchStore store = load_patch_store(dataset_dir, dataset_name);
  if (store.patches.empty()) throw DegenerateDataError("no patches in " + dataset_dir);

  const std::int64_t length = ck.model.descriptor_length();
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw IoError("cannot write descriptors " + out_path);
  put_u32_le(out, static_cast<std::uint32_t>(store.patches.size()));
  put_u32_le(out, static_cast<std::uint32_t>(length));
  for (const Tensor<float>& patch : store.patches) {
    const Descriptor<float> d =
        ck.model.extract_descriptor(preprocess<float>(patch, ck.stats));
    for (std::int64_t i = 0; i < d.values.numel(); ++i) {
      put_u32_le(out, std::bit_cast<std::uint32_t>(d.values[i]));
    }
  }
  if (!out) throw IoError("short write to " + out_path);
  std::cout << "wrote " << store.patches.size() << " descriptors of length " << length << " to "
            << out_path << "\n";
  return 0;
}

int cmd_match(Settings& s) {
  const std::string ck_path = s.require("checkpoint");
  const std::string image1_path = s.require("image1");
  const std::string image2_path = s.require("image2");
  const std::string kp1_path = s.require("keypoints1");
  const std::string kp2_path = s.require("keypoints2");
  const std::string homography_path = s.get("homography", "");
  const double pixel_tol = s.get_double("pixel_tol", 2.5);
  const std::string scores_out = s.require("scores_out");
  const std::string pr_out = s.get("pr_out", "");
  s.reject_unknown();

  const Checkpoint ck = load_checkpoint(ck_path);
  const Tensor<float> image1 = load_unit_pgm(image1_path);
  const Tensor<float> image2 = load_unit_pgm(image2_path);
  const std::vector<Keypoint> kps1 = read_keypoints(kp1_path);
  const std::vector<Keypoint> kps2 = read_keypoints(kp2_path);
  if (kps1.empty() || kps2.empty()) throw DegenerateDataError("keypoint file lists no points");

  const int side = ck.model.patch_size();
  auto cut = [&](const Tensor<float>& image, const std::vector<Keypoint>& kps) {
    std::vector<Tensor<float>> patches;
    patches.reserve(kps.size());
    for (const Keypoint& kp : kps) {
      patches.push_back(preprocess<float>(extract_keypoint_patch(image, kp, side), ck.stats));
    }
    return patches;
  };
  const std::vector<Tensor<float>> patches1 = cut(image1, kps1);
  const std::vector<Tensor<float>> patches2 = cut(image2, kps2);

  // Descriptor kinds compare extracted descriptors; two-channel kinds score
  // every pair through the decision layer.
  std::vector<std::vector<double>> similarity(kps1.size(),
                                              std::vector<double>(kps2.size()));
  if (produces_descriptors(ck.model.kind())) {
    std::vector<Descriptor<float>> d1, d2;
    for (const auto& p : patches1) d1.push_back(ck.model.extract_descriptor(p));
    for (const auto& p : patches2) d2.push_back(ck.model.extract_descriptor(p));
    for (std::size_t i = 0; i < d1.size(); ++i) {
      for (std::size_t j = 0; j < d2.size(); ++j) {
        similarity[i][j] = -match_descriptors(d1[i], d2[j]);
      }
    }
  } else {
    for (std::size_t i = 0; i < patches1.size(); ++i) {
      for (std::size_t j = 0; j < patches2.size(); ++j) {
        similarity[i][j] = ck.model.decision_score(patches1[i], patches2[j]);
      }
    }
  }

  struct Row {
    double sim;
    int i, j;
  };
  std::vector<Row> rows;
  rows.reserve(kps1.size() * kps2.size());
  for (std::size_t i = 0; i < kps1.size(); ++i) {
    for (std::size_t j = 0; j < kps2.size(); ++j) {
      rows.push_back({similarity[i][j], static_cast<int>(i), static_cast<int>(j)});
    }
  }
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    if (a.sim != b.sim) return a.sim > b.sim;
    if (a.i != b.i) return a.i < b.i;
    return a.j < b.j;
  });
  std::ofstream out(scores_out);
  if (!out) throw IoError("cannot write scores " + scores_out);
  out << "index1,index2,score\n";
  char buf[64];
  for (const Row& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%.17g", r.i, r.j, r.sim);
    out << buf << "\n";
  }

  if (!homography_path.empty()) {
    const Homography h = read_homography(homography_path);
    const auto gt = ground_truth_correspondences(kps1, kps2, h, pixel_tol);
    const MatchEvalResult result = match_pr_from_similarity(similarity, gt);
    std::cout << "ground-truth correspondences: " << result.n_ground_truth << "\n";
    std::cout << "mean average precision: " << result.mean_average_precision << "\n";
    if (!pr_out.empty()) write_pr_csv(pr_out, result);
  }
  std::cout << "wrote " << rows.size() << " ranked pair scores to " << scores_out << "\n";
  return 0;
}

struct SubArgs {
  std::string config_path;
  std::vector<std::string> overrides;
};

int run(const std::function<int(Settings&)>& body, const SubArgs& args) {
  Settings s;
  if (!args.config_path.empty()) s.load_file(args.config_path);
  s.apply_overrides(args.overrides);
  return body(s);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "patch-similarity toolkit: learned patch comparison, benchmark metrics, "
      "and wide-baseline stereo"};
  app.require_subcommand(1);

  std::map<std::string, SubArgs> sub_args;
  auto add_sub = [&](const std::string& name, const std::string& desc) {
    CLI::App* sub = app.add_subcommand(name, desc);
    SubArgs& a = sub_args[name];
    sub->add_option("--config", a.config_path, "flat key=value settings file");
    sub->add_option("overrides", a.overrides, "key=value settings overriding the file");
    return sub;
  };

  add_sub("train",
          "Train a model and write a checkpoint.\n"
          "Settings: dataset, pairs, kind, checkpoint_out; optional mode, reduced,\n"
          "learning_rate, momentum, weight_decay, batch_size, iterations, seed,\n"
          "averaging_start, telemetry_every, telemetry_out, dataset_name.\n"
          "Telemetry CSV columns: iteration,loss");
  add_sub("eval",
          "Six-way cross-dataset benchmark.\n"
          "Settings: checkpoint_<set>, dataset_<set>, pairs_<set> for set in\n"
          "yosemite/notredame/liberty; report_out; optional roc_out_prefix.\n"
          "Report CSV columns: train,test,fpr95 with rows yosemite/notredame,\n"
          "yosemite/liberty, notredame/yosemite, notredame/liberty,\n"
          "liberty/yosemite, liberty/notredame, then mean rows.\n"
          "ROC CSV columns: fpr,tpr");
  add_sub("stereo",
          "Disparity maps for a rectified pair.\n"
          "Settings: checkpoint, left, right, d_max, out_prefix; optional cost\n"
          "(decision|l2), lambda1, lambda2, sigma, gt, occlusion, thresholds.\n"
          "Writes <prefix>{wta,mrf}.pgm/.scale.txt/.bin and, with gt,\n"
          "<prefix>{wta,mrf}_errors.csv with columns\n"
          "threshold,fraction_all,fraction_unoccluded");
  add_sub("describe",
          "Extract descriptors for every patch of a store.\n"
          "Settings: checkpoint, dataset, out; optional dataset_name.\n"
          "Output: little-endian uint32 count, uint32 length, then\n"
          "count*length little-endian float32 values");
  add_sub("match",
          "Score keypoint pairs across two images.\n"
          "Settings: checkpoint, image1, image2, keypoints1, keypoints2,\n"
          "scores_out; optional homography, pixel_tol, pr_out.\n"
          "Scores CSV columns: index1,index2,score (best first).\n"
          "PR CSV columns: recall,precision,threshold");

  CLI11_PARSE(app, argc, argv);

  const std::map<std::string, std::function<int(Settings&)>> bodies = {
      {"train",
       [&](Settings& s) {
         // Echo the effective settings into the checkpoint metadata.
         std::vector<std::pair<std::string, std::string>> echo;
         for (const std::string& o : sub_args["train"].overrides) {
           const auto eq = o.find('=');
           if (eq != std::string::npos && eq > 0) {
             echo.emplace_back(o.substr(0, eq), o.substr(eq + 1));
           }
         }
         std::sort(echo.begin(), echo.end());
         return cmd_train(s, echo);
       }},
      {"eval", cmd_eval},
      {"stereo", cmd_stereo},
      {"describe", cmd_describe},
      {"match", cmd_match},
  };

  try {
    for (const auto& [name, body] : bodies) {
      if (app.got_subcommand(name)) return run(body, sub_args[name]);
    }
    throw ConfigError("no subcommand given");
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ArchParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const DegenerateDataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 5;
  } catch (const CapabilityError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 6;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
}
