#include "patchsim/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <vector>

#include "patchsim/arch.hpp"

namespace patchsim {

namespace {

constexpr const char* kMagic = "patchsim-checkpoint";

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void put_u64(std::ostream& out, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(bytes, 8);
}

std::uint64_t get_u64(std::istream& in, const std::string& path) {
  unsigned char bytes[8];
  if (!in.read(reinterpret_cast<char*>(bytes), 8)) {
    throw IoError("truncated checkpoint " + path);
  }
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

void put_f32(std::ostream& out, float v) {
  const std::uint32_t u = std::bit_cast<std::uint32_t>(v);
  const char bytes[4] = {static_cast<char>(u & 0xff), static_cast<char>((u >> 8) & 0xff),
                         static_cast<char>((u >> 16) & 0xff),
                         static_cast<char>((u >> 24) & 0xff)};
  out.write(bytes, 4);
}

float get_f32(std::istream& in, const std::string& path) {
  unsigned char bytes[4];
  if (!in.read(reinterpret_cast<char*>(bytes), 4)) {
    throw IoError("truncated checkpoint " + path);
  }
  const std::uint32_t u = static_cast<std::uint32_t>(bytes[0]) |
                          (static_cast<std::uint32_t>(bytes[1]) << 8) |
                          (static_cast<std::uint32_t>(bytes[2]) << 16) |
                          (static_cast<std::uint32_t>(bytes[3]) << 24);
  return std::bit_cast<float>(u);
}

struct BlobInfo {
  std::string name;
  std::vector<int> dims;
};

}  // namespace

void save_checkpoint(const std::string& path, const Model<float>& model, const FixedStats& stats,
                     const std::map<std::string, std::string>& metadata) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path);

  std::ostringstream h;
  h << kMagic << " " << kCheckpointVersion << "\n";
  h << "kind " << kind_name(model.kind()) << "\n";
  h << "mode " << mode_name(model.mode()) << "\n";
  h << "patch_size " << model.patch_size() << "\n";
  h << "seed " << model.seed() << "\n";
  h << "branches " << model.branch_count() << "\n";
  h << "owners";
  for (int o : model.branch_owner()) h << " " << o;
  h << "\n";
  for (std::size_t i = 0; i < model.branch_count(); ++i) {
    h << "branch_arch " << i << " " << render_arch(model.branch(i).spec()) << "\n";
    h << "branch_input " << i;
    for (int d : model.branch(i).input_shape()) h << " " << d;
    h << "\n";
  }
  h << "top_arch " << render_arch(model.top().spec()) << "\n";
  h << "top_input " << model.top().input_shape()[0] << "\n";
  h << "mu " << fmt_double(stats.mu) << "\n";
  h << "sigma " << fmt_double(stats.sigma) << "\n";
  h << "stats_source " << stats.source << "\n";
  for (const auto& [key, value] : metadata) h << "meta " << key << " " << value << "\n";

  const auto blocks = model.param_blocks();
  for (const auto& b : blocks) {
    h << "blob " << b->name << " " << b->value.ndim();
    for (int i = 0; i < b->value.ndim(); ++i) h << " " << b->value.dim(i);
    h << "\n";
  }
  h << "data\n";
  out << h.str();

  for (const auto& b : blocks) {
    put_u64(out, static_cast<std::uint64_t>(b->value.numel()));
    for (std::int64_t i = 0; i < b->value.numel(); ++i) put_f32(out, b->value[i]);
  }
  if (!out) throw IoError("short write to checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("missing checkpoint " + path);

  std::string line;
  if (!std::getline(in, line)) throw IoError("truncated checkpoint " + path);
  {
    std::istringstream ls(line);
    std::string magic;
    int version = -1;
    ls >> magic >> version;
    if (magic != kMagic) throw IoError(path + " is not a checkpoint file");
    if (version != kCheckpointVersion) {
      throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " + path +
                    " (expected " + std::to_string(kCheckpointVersion) + ")");
    }
  }

  std::string kind_str, mode_str, top_arch, stats_source;
  int patch_size = -1, branches = -1, top_input = -1;
  std::uint64_t seed = 0;
  double mu = 0.0, sigma = 1.0;
  bool have_mu = false, have_sigma = false;
  std::vector<int> owners;
  std::vector<std::string> branch_archs;
  std::vector<std::vector<int>> branch_inputs;
  std::map<std::string, std::string> metadata;
  std::vector<BlobInfo> blobs;

  bool saw_data = false;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    if (key == "data") {
      saw_data = true;
      break;
    }
    if (key == "kind") {
      ls >> kind_str;
    } else if (key == "mode") {
      ls >> mode_str;
    } else if (key == "patch_size") {
      ls >> patch_size;
    } else if (key == "seed") {
      ls >> seed;
    } else if (key == "branches") {
      ls >> branches;
      if (branches < 1 || branches > 16) throw IoError("implausible branch count in " + path);
      branch_archs.resize(branches);
      branch_inputs.resize(branches);
    } else if (key == "owners") {
      int o;
      while (ls >> o) owners.push_back(o);
    } else if (key == "branch_arch") {
      int i = -1;
      std::string arch;
      ls >> i >> arch;
      if (i < 0 || i >= static_cast<int>(branch_archs.size()) || arch.empty()) {
        throw IoError("malformed branch_arch line in " + path);
      }
      branch_archs[i] = arch;
    } else if (key == "branch_input") {
      int i = -1;
      ls >> i;
      if (i < 0 || i >= static_cast<int>(branch_inputs.size())) {
        throw IoError("malformed branch_input line in " + path);
      }
      int d;
      while (ls >> d) branch_inputs[i].push_back(d);
    } else if (key == "top_arch") {
      ls >> top_arch;
    } else if (key == "top_input") {
      ls >> top_input;
    } else if (key == "mu") {
      ls >> mu;
      have_mu = true;
    } else if (key == "sigma") {
      ls >> sigma;
      have_sigma = true;
    } else if (key == "stats_source") {
      std::getline(ls >> std::ws, stats_source);
    } else if (key == "meta") {
      std::string mk, mv;
      ls >> mk;
      std::getline(ls >> std::ws, mv);
      metadata[mk] = mv;
    } else if (key == "blob") {
      BlobInfo b;
      int rank = -1;
      ls >> b.name >> rank;
      if (b.name.empty() || rank < 1 || rank > 8) {
        throw IoError("malformed blob line in " + path);
      }
      b.dims.resize(rank);
      for (int& d : b.dims) {
        if (!(ls >> d) || d < 1) throw IoError("malformed blob dims in " + path);
      }
      blobs.push_back(std::move(b));
    } else {
      throw IoError("unknown checkpoint key '" + key + "' in " + path);
    }
  }
  if (!saw_data) throw IoError("truncated checkpoint " + path + " (no data section)");
  if (kind_str.empty() || mode_str.empty() || patch_size < 1 || branches < 1 ||
      top_arch.empty() || top_input < 1 || !have_mu || !have_sigma) {
    throw IoError("checkpoint header in " + path + " is incomplete");
  }
  if (static_cast<int>(owners.size()) != branches) {
    throw IoError("owner list in " + path + " disagrees with branch count");
  }
  for (int i = 0; i < branches; ++i) {
    if (branch_archs[i].empty() || branch_inputs[i].empty()) {
      throw IoError("branch " + std::to_string(i) + " description missing in " + path);
    }
    if (owners[i] > i || owners[i] < 0 || (owners[i] < i && owners[owners[i]] != owners[i])) {
      throw IoError("invalid owner map in " + path);
    }
  }

  ModelLayout layout;
  layout.patch_size = patch_size;
  layout.branch_archs = branch_archs;
  layout.branch_owner = owners;
  layout.branch_inputs = branch_inputs;
  layout.top_arch = top_arch;
  layout.top_inputs = top_input;

  Checkpoint ck;
  ck.model = Model<float>::build_from_layout(kind_from_name(kind_str), mode_from_name(mode_str),
                                             layout, seed);
  ck.stats.mu = mu;
  ck.stats.sigma = sigma;
  ck.stats.source = stats_source;
  ck.metadata = std::move(metadata);

  const auto blocks = ck.model.param_blocks();
  std::unordered_map<std::string, ParamBlock<float>*> by_name;
  for (const auto& b : blocks) by_name[b->name] = b.get();
  if (blobs.size() != blocks.size()) {
    throw IoError("checkpoint " + path + " holds " + std::to_string(blobs.size()) +
                  " blobs but the model has " + std::to_string(blocks.size()) +
                  " parameter blocks");
  }

  for (const BlobInfo& info : blobs) {
    const auto it = by_name.find(info.name);
    if (it == by_name.end()) {
      throw IoError("checkpoint blob '" + info.name + "' matches no parameter in " + path);
    }
    ParamBlock<float>* block = it->second;
    std::int64_t declared = 1;
    for (int d : info.dims) declared *= d;
    if (static_cast<int>(info.dims.size()) != block->value.ndim()) {
      throw IoError("blob '" + info.name + "' rank mismatch in " + path);
    }
    for (std::size_t i = 0; i < info.dims.size(); ++i) {
      if (info.dims[i] != block->value.dim(static_cast<int>(i))) {
        throw IoError("blob '" + info.name + "' shape mismatch in " + path);
      }
    }
    const std::uint64_t stored = get_u64(in, path);
    if (static_cast<std::int64_t>(stored) != declared ||
        declared != block->value.numel()) {
      throw IoError("blob '" + info.name + "' size mismatch in " + path);
    }
    for (std::int64_t i = 0; i < block->value.numel(); ++i) {
      block->value[i] = get_f32(in, path);
    }
  }
  return ck;
}

}  // namespace patchsim
