#include "patchsim/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "patchsim/image_io.hpp"

namespace patchsim {

namespace fs = std::filesystem;

namespace {

std::vector<long long> read_info_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("missing info file " + path);
  std::vector<long long> ids;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    long long point_id;
    if (!(ls >> point_id)) {
      // Tolerate blank lines; anything else is malformed.
      std::string rest;
      std::istringstream probe(line);
      if (probe >> rest) {
        throw IoError("malformed info line " + std::to_string(line_no) + " in " + path);
      }
      continue;
    }
    ids.push_back(point_id);
  }
  return ids;
}

}  // namespace

PatchStore load_patch_store(const std::string& dir, const std::string& name) {
  PatchStore store;
  store.name = name.empty() ? fs::path(dir).filename().string() : name;

  const std::vector<long long> ids = read_info_file((fs::path(dir) / "info.txt").string());

  std::vector<std::string> containers;
  if (!fs::is_directory(dir)) throw IoError("dataset directory " + dir + " does not exist");
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string fname = entry.path().filename().string();
    if (fname.rfind("patches", 0) == 0 && entry.path().extension() == ".pgm") {
      containers.push_back(entry.path().string());
    }
  }
  std::sort(containers.begin(), containers.end());

  store.point_ids = ids;
  store.patches.reserve(ids.size());
  std::size_t remaining = ids.size();
  for (const std::string& path : containers) {
    if (remaining == 0) break;
    const GrayImage8 img = read_pgm8(path);
    if (img.width % kPatchSide != 0 || img.height % kPatchSide != 0) {
      throw IoError("container " + path + " dimensions " + std::to_string(img.width) + "x" +
                    std::to_string(img.height) + " are not a multiple of " +
                    std::to_string(kPatchSide));
    }
    const int cells_x = img.width / kPatchSide;
    const int cells_y = img.height / kPatchSide;
    for (int cy = 0; cy < cells_y && remaining > 0; ++cy) {
      for (int cx = 0; cx < cells_x && remaining > 0; ++cx) {
        Tensor<float> patch({1, kPatchSide, kPatchSide});
        for (int y = 0; y < kPatchSide; ++y) {
          const std::size_t row =
              static_cast<std::size_t>(cy * kPatchSide + y) * img.width + cx * kPatchSide;
          for (int x = 0; x < kPatchSide; ++x) {
            patch.at(0, y, x) = static_cast<float>(img.pixels[row + x]) / 255.0f;
          }
        }
        store.patches.push_back(std::move(patch));
        --remaining;
      }
    }
  }
  if (remaining > 0) {
    throw IoError("patch count mismatch in " + dir + ": info lists " +
                  std::to_string(ids.size()) + " patches but containers provide only " +
                  std::to_string(ids.size() - remaining));
  }
  return store;
}

void write_patch_store(const std::string& dir, const PatchStore& store) {
  fs::create_directories(dir);
  const int cells = kContainerSide / kPatchSide;           // 16
  const int per_container = cells * cells;                 // 256
  const std::size_t n_containers =
      store.patches.empty() ? 0 : (store.patches.size() + per_container - 1) / per_container;

  for (std::size_t c = 0; c < n_containers; ++c) {
    GrayImage8 img;
    img.width = img.height = kContainerSide;
    img.pixels.assign(static_cast<std::size_t>(kContainerSide) * kContainerSide, 0);
    for (int cell = 0; cell < per_container; ++cell) {
      const std::size_t idx = c * per_container + cell;
      if (idx >= store.patches.size()) break;
      const Tensor<float>& patch = store.patches[idx];
      const int cy = cell / cells, cx = cell % cells;
      for (int y = 0; y < kPatchSide; ++y) {
        const std::size_t row =
            static_cast<std::size_t>(cy * kPatchSide + y) * kContainerSide + cx * kPatchSide;
        for (int x = 0; x < kPatchSide; ++x) {
          const float v = patch.at(0, y, x) * 255.0f;
          const int q = static_cast<int>(std::lround(v));
          img.pixels[row + x] = static_cast<std::uint8_t>(q < 0 ? 0 : (q > 255 ? 255 : q));
        }
      }
    }
    char fname[32];
    std::snprintf(fname, sizeof(fname), "patches%04zu.pgm", c);
    write_pgm8((fs::path(dir) / fname).string(), img);
  }

  std::ofstream info((fs::path(dir) / "info.txt").string());
  if (!info) throw IoError("cannot write info file in " + dir);
  for (long long id : store.point_ids) info << id << " 0\n";
}

PairList load_pair_list(const std::string& file, const PatchStore& store) {
  std::ifstream in(file);
  if (!in) throw IoError("missing pair file " + file);
  PairList list;
  list.source = file;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    long long id1, pid1, u1, id2, pid2, u2;
    if (!(ls >> id1)) continue;  // blank line
    if (!(ls >> pid1 >> u1 >> id2 >> pid2 >> u2)) {
      throw IoError("malformed pair line " + std::to_string(line_no) + " in " + file);
    }
    if (id1 < 0 || id2 < 0 || id1 >= static_cast<long long>(store.size()) ||
        id2 >= static_cast<long long>(store.size())) {
      throw IoError("patch index out of range on line " + std::to_string(line_no) + " in " +
                    file);
    }
    if (store.point_ids[static_cast<std::size_t>(id1)] != pid1 ||
        store.point_ids[static_cast<std::size_t>(id2)] != pid2) {
      throw IoError("point id on line " + std::to_string(line_no) + " of " + file +
                    " disagrees with the store");
    }
    PairEntry e;
    e.index1 = static_cast<int>(id1);
    e.index2 = static_cast<int>(id2);
    e.label = pid1 == pid2 ? 1 : -1;
    list.entries.push_back(e);
  }
  return list;
}

void write_pair_list(const std::string& file, const PatchStore& store,
                     const std::vector<std::pair<int, int>>& index_pairs) {
  std::ofstream out(file);
  if (!out) throw IoError("cannot write pair file " + file);
  for (const auto& [i1, i2] : index_pairs) {
    out << i1 << " " << store.point_ids[static_cast<std::size_t>(i1)] << " 0 " << i2 << " "
        << store.point_ids[static_cast<std::size_t>(i2)] << " 0\n";
  }
}

FixedStats compute_stats(const PatchStore& store) {
  if (store.patches.empty()) throw DegenerateDataError("compute_stats: empty store");
  double sum = 0.0, sum_sq = 0.0;
  std::int64_t n = 0;
  for (const auto& p : store.patches) {
    for (std::int64_t i = 0; i < p.numel(); ++i) {
      const double v = p[i];
      sum += v;
      sum_sq += v * v;
    }
    n += p.numel();
  }
  FixedStats stats;
  stats.mu = sum / static_cast<double>(n);
  const double var = std::max(0.0, sum_sq / static_cast<double>(n) - stats.mu * stats.mu);
  stats.sigma = std::max(std::sqrt(var), 1e-6);
  stats.source = store.name;
  return stats;
}

}  // namespace patchsim
