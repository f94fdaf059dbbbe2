#ifndef PATCHSIM_CHECKPOINT_HPP_
#define PATCHSIM_CHECKPOINT_HPP_

#include <map>
#include <string>

#include "patchsim/dataset.hpp"
#include "patchsim/model.hpp"

namespace patchsim {

// Serialized model container: a text header (format version, kind, matching
// mode, architecture strings, preprocessing statistics, seed, metadata, blob
// directory) followed by length-prefixed little-endian float32 parameter
// blobs in directory order. Round-trips are bit-exact.
struct Checkpoint {
  Model<float> model;
  FixedStats stats;
  std::map<std::string, std::string> metadata;
};

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const Model<float>& model, const FixedStats& stats,
                     const std::map<std::string, std::string>& metadata = {});

Checkpoint load_checkpoint(const std::string& path);

}  // namespace patchsim

#endif  // PATCHSIM_CHECKPOINT_HPP_
