#include <sys/wait.h>

#include <bit>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "patchsim/checkpoint.hpp"
#include "patchsim/dataset.hpp"
#include "patchsim/image_io.hpp"
#include "patchsim/stereo.hpp"
#include "test_util.hpp"

namespace patchsim {
namespace {

using testutil::TempDir;

struct CliResult {
  int code = -1;
  std::string output;
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::make_unique<TempDir>("cli");
    store_dir_ = dir_->file("store");
    std::filesystem::create_directories(store_dir_);
    PatchStore store;
    store.name = "fixture";
    for (int k = 0; k < 12; ++k) {
      Tensor<float> patch({1, 64, 64});
      for (int y = 0; y < 64; ++y) {
        for (int x = 0; x < 64; ++x) {
          patch.at(0, y, x) =
              static_cast<float>((k * 41 + y * 13 + x * 7 + (x * y) % 29) % 256) / 255.0f;
        }
      }
      store.patches.push_back(std::move(patch));
      store.point_ids.push_back(k / 2);
    }
    write_patch_store(store_dir_, store);
    store_ = load_patch_store(store_dir_);
    pairs_path_ = dir_->file("pairs.txt");
    write_pair_list(pairs_path_, store_,
                    {{0, 1}, {2, 3}, {4, 5}, {0, 2}, {1, 4}, {3, 5}});
  }

  CliResult run_cli(const std::string& args) {
    const std::string log = dir_->file("log_" + std::to_string(++log_counter_) + ".txt");
    const std::string cmd =
        std::string(PATCHSIM_CLI_PATH) + " " + args + " >" + log + " 2>&1";
    const int status = std::system(cmd.c_str());
    CliResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.output = slurp(log);
    return r;
  }

  void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    out << text;
  }

  std::string make_image(const std::string& name, int h, int w, int salt) {
    GrayImage8 img;
    img.height = h;
    img.width = w;
    img.pixels.resize(static_cast<std::size_t>(h) * w);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        img.pixels[static_cast<std::size_t>(y) * w + x] =
            static_cast<std::uint8_t>((salt * 17 + x * 7 + y * 13 + (x * y) % 31 * 5) % 256);
      }
    }
    const std::string path = dir_->file(name);
    write_pgm8(path, img);
    return path;
  }

  FixedStats store_stats() { return compute_stats(store_); }

  std::string save_model(const std::string& name, ModelKind kind, bool reduced,
                         std::uint64_t seed) {
    BuildOptions opts;
    opts.reduced = reduced;
    const Model<float> model = build_model<float>(kind, seed, opts);
    const std::string path = dir_->file(name);
    save_checkpoint(path, model, store_stats());
    return path;
  }

  std::unique_ptr<TempDir> dir_;
  std::string store_dir_, pairs_path_;
  PatchStore store_;
  int log_counter_ = 0;
};

// ---------------------------------------------------------------------------
// train

TEST_F(CliTest, TrainWritesCheckpointAndTelemetry) {
  const std::string ckpt = dir_->file("trained.ckpt");
  const std::string telemetry = dir_->file("telemetry.csv");
  const std::string cfg = dir_->file("train.cfg");
  write_text(cfg, "dataset=" + store_dir_ +
                      "\n"
                      "pairs=" +
                      pairs_path_ +
                      "\n"
                      "kind=2ch\n"
                      "checkpoint_out=" +
                      ckpt +
                      "\n"
                      "iterations=2\n"
                      "batch_size=2\n"
                      "learning_rate=0.001\n"
                      "seed=7\n"
                      "telemetry_every=1  # log every step\n"
                      "telemetry_out=" +
                      telemetry + "\n");
  const CliResult r = run_cli("train --config " + cfg);
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("checkpoint written"), std::string::npos);

  const Checkpoint ck = load_checkpoint(ckpt);
  EXPECT_EQ(ck.model.kind(), ModelKind::kTwoCh);
  EXPECT_EQ(ck.metadata.at("iterations"), "2");

  const std::vector<std::string> rows = lines_of(slurp(telemetry));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], "iteration,loss");
  EXPECT_EQ(rows[1].substr(0, 2), "0,");
  EXPECT_EQ(rows[2].substr(0, 2), "1,");
}

TEST_F(CliTest, TrainSameSeedIsByteIdentical) {
  std::vector<std::string> ckpts;
  for (int run = 0; run < 2; ++run) {
    const std::string ckpt = dir_->file("twin" + std::to_string(run) + ".ckpt");
    const std::string cfg = dir_->file("twin" + std::to_string(run) + ".cfg");
    write_text(cfg, "dataset=" + store_dir_ + "\npairs=" + pairs_path_ +
                        "\nkind=2ch\ncheckpoint_out=" + ckpt +
                        "\niterations=1\nbatch_size=2\nlearning_rate=0.001\nseed=11\n");
    const CliResult r = run_cli("train --config " + cfg);
    ASSERT_EQ(r.code, 0) << r.output;
    ckpts.push_back(ckpt);
  }
  const std::string a = slurp(ckpts[0]);
  const std::string b = slurp(ckpts[1]);
  ASSERT_FALSE(a.empty());
  EXPECT_EQ(a, b);
}

TEST_F(CliTest, TrainZeroIterationsKeepsInitialWeights) {
  const std::string ckpt = dir_->file("init.ckpt");
  const CliResult r =
      run_cli("train dataset=" + store_dir_ + " pairs=" + pairs_path_ +
              " kind=siam checkpoint_out=" + ckpt + " iterations=0 seed=21");
  ASSERT_EQ(r.code, 0) << r.output;

  const Checkpoint ck = load_checkpoint(ckpt);
  const Model<float> fresh = build_model<float>(ModelKind::kSiam, 21);
  const auto got = ck.model.param_blocks();
  const auto want = fresh.param_blocks();
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    ASSERT_EQ(got[i]->name, want[i]->name);
    ASSERT_EQ(got[i]->value.numel(), want[i]->value.numel());
    EXPECT_EQ(std::memcmp(got[i]->value.data(), want[i]->value.data(),
                          sizeof(float) * static_cast<std::size_t>(got[i]->value.numel())),
              0);
  }
  EXPECT_EQ(ck.metadata.at("iterations"), "0");
}

TEST_F(CliTest, TrainOverridesBeatConfigFile) {
  const std::string ckpt = dir_->file("ovr.ckpt");
  const std::string cfg = dir_->file("ovr.cfg");
  write_text(cfg, "dataset=" + store_dir_ + "\npairs=" + pairs_path_ +
                      "\nkind=siam\ncheckpoint_out=" + ckpt + "\niterations=500\nseed=3\n");
  const CliResult r = run_cli("train --config " + cfg + " iterations=0");
  ASSERT_EQ(r.code, 0) << r.output;
  const Checkpoint ck = load_checkpoint(ckpt);
  EXPECT_EQ(ck.metadata.at("iterations"), "0");
  EXPECT_EQ(ck.metadata.at("config"), "iterations=0");
}

TEST_F(CliTest, TrainRejectsL2ForTwoChannelKinds) {
  const CliResult r =
      run_cli("train dataset=" + store_dir_ + " pairs=" + pairs_path_ +
              " kind=2ch mode=l2 checkpoint_out=" + dir_->file("x.ckpt") + " iterations=0");
  EXPECT_EQ(r.code, 6) << r.output;
}

// ---------------------------------------------------------------------------
// failure exit codes

TEST_F(CliTest, MissingConfigFileExitsWithIoCode) {
  const CliResult r = run_cli("train --config " + dir_->file("absent.cfg"));
  EXPECT_EQ(r.code, 3) << r.output;
}

TEST_F(CliTest, UnknownSettingExitsWithConfigCode) {
  const CliResult r =
      run_cli("train dataset=" + store_dir_ + " pairs=" + pairs_path_ +
              " kind=siam checkpoint_out=" + dir_->file("x.ckpt") + " iterations=0 wobble=1");
  EXPECT_EQ(r.code, 2) << r.output;
  EXPECT_NE(r.output.find("unknown setting"), std::string::npos);
}

TEST_F(CliTest, UnknownKindExitsWithConfigCode) {
  const CliResult r =
      run_cli("train dataset=" + store_dir_ + " pairs=" + pairs_path_ +
              " kind=banana checkpoint_out=" + dir_->file("x.ckpt") + " iterations=0");
  EXPECT_EQ(r.code, 2) << r.output;
}

TEST_F(CliTest, MissingDatasetDirExitsWithIoCode) {
  const CliResult r =
      run_cli("train dataset=" + dir_->file("nowhere") + " pairs=" + pairs_path_ +
              " kind=siam checkpoint_out=" + dir_->file("x.ckpt") + " iterations=0");
  EXPECT_EQ(r.code, 3) << r.output;
}

TEST_F(CliTest, MissingRequiredSettingExitsWithConfigCode) {
  const CliResult r = run_cli("train dataset=" + store_dir_ + " pairs=" + pairs_path_ +
                              " kind=siam iterations=0");
  EXPECT_EQ(r.code, 2) << r.output;
  EXPECT_NE(r.output.find("checkpoint_out"), std::string::npos);
}

TEST_F(CliTest, MalformedOverrideExitsWithConfigCode) {
  const CliResult r = run_cli("train noequals");
  EXPECT_EQ(r.code, 2) << r.output;
}

TEST_F(CliTest, NoSubcommandFails) {
  const CliResult r = run_cli("");
  EXPECT_NE(r.code, 0);
}

// ---------------------------------------------------------------------------
// describe

TEST_F(CliTest, DescribeWritesBinaryDescriptors) {
  const std::string ckpt = save_model("desc.ckpt", ModelKind::kSiam, false, 3);
  const std::string out = dir_->file("descriptors.bin");
  const CliResult r =
      run_cli("describe checkpoint=" + ckpt + " dataset=" + store_dir_ + " out=" + out);
  ASSERT_EQ(r.code, 0) << r.output;

  const std::string bytes = slurp(out);
  const Checkpoint ck = load_checkpoint(ckpt);
  const std::size_t length = static_cast<std::size_t>(ck.model.descriptor_length());
  ASSERT_EQ(bytes.size(), 8 + store_.size() * length * 4);

  auto u32_at = [&bytes](std::size_t pos) {
    return static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos])) |
           (static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + 1])) << 8) |
           (static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + 2])) << 16) |
           (static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + 3])) << 24);
  };
  EXPECT_EQ(u32_at(0), store_.size());
  EXPECT_EQ(u32_at(4), length);

  const Descriptor<float> want =
      ck.model.extract_descriptor(preprocess<float>(store_.patches[0], ck.stats));
  for (std::size_t i = 0; i < length; ++i) {
    const float got = std::bit_cast<float>(u32_at(8 + 4 * i));
    ASSERT_EQ(got, want.values[static_cast<std::int64_t>(i)]) << "component " << i;
  }
}

TEST_F(CliTest, DescribeRejectsTwoChannelKinds) {
  const std::string ckpt = save_model("twoch.ckpt", ModelKind::kTwoCh, false, 4);
  const CliResult r = run_cli("describe checkpoint=" + ckpt + " dataset=" + store_dir_ +
                              " out=" + dir_->file("d.bin"));
  EXPECT_EQ(r.code, 6) << r.output;
}

// ---------------------------------------------------------------------------
// stereo

TEST_F(CliTest, StereoEndToEndWithSelfGroundTruth) {
  const std::string ckpt = save_model("st.ckpt", ModelKind::kTwoCh, true, 5);
  const std::string left = make_image("left.pgm", 20, 26, 1);
  const std::string right = make_image("right.pgm", 20, 26, 2);
  const std::string prefix = dir_->file("st_");

  const CliResult r = run_cli("stereo checkpoint=" + ckpt + " left=" + left +
                              " right=" + right + " d_max=2 out_prefix=" + prefix);
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("cost volume 2ch/decision"), std::string::npos);
  for (const char* suffix : {"wta.pgm", "wta.scale.txt", "wta.bin", "mrf.pgm",
                             "mrf.scale.txt", "mrf.bin"}) {
    EXPECT_TRUE(std::filesystem::exists(prefix + suffix)) << suffix;
  }

  const DisparityMap wta_bin = read_disparity_binary(prefix + "wta.bin");
  EXPECT_EQ(wta_bin.height, 20);
  EXPECT_EQ(wta_bin.width, 26);
  EXPECT_EQ(wta_bin.d_max, 2);
  const DisparityMap wta_pgm =
      read_disparity_pgm16(prefix + "wta.pgm", prefix + "wta.scale.txt");
  EXPECT_EQ(wta_pgm.disp, wta_bin.disp);
  EXPECT_EQ(wta_pgm.valid, wta_bin.valid);

  // Feed the result back as ground truth: the rerun reproduces it exactly.
  const std::string prefix2 = dir_->file("st2_");
  const CliResult r2 =
      run_cli("stereo checkpoint=" + ckpt + " left=" + left + " right=" + right +
              " d_max=2 out_prefix=" + prefix2 + " gt=" + prefix + "wta.bin");
  ASSERT_EQ(r2.code, 0) << r2.output;
  const std::vector<std::string> err_rows = lines_of(slurp(prefix2 + "wta_errors.csv"));
  ASSERT_EQ(err_rows.size(), 4u);
  EXPECT_EQ(err_rows[0], "threshold,fraction_all,fraction_unoccluded");
  EXPECT_EQ(err_rows[1], "1,1,1");
  EXPECT_EQ(err_rows[2], "3,1,1");
  EXPECT_EQ(err_rows[3], "5,1,1");
}

TEST_F(CliTest, StereoRejectsMissingDisparityRange) {
  const std::string ckpt = save_model("st0.ckpt", ModelKind::kTwoCh, true, 6);
  const std::string left = make_image("l0.pgm", 20, 26, 3);
  const std::string right = make_image("r0.pgm", 20, 26, 4);
  const CliResult r = run_cli("stereo checkpoint=" + ckpt + " left=" + left +
                              " right=" + right + " out_prefix=" + dir_->file("z_"));
  EXPECT_EQ(r.code, 2) << r.output;
}

TEST_F(CliTest, StereoRejectsL2CostsForTwoChannel) {
  const std::string ckpt = save_model("stl2.ckpt", ModelKind::kTwoCh, true, 7);
  const std::string left = make_image("l1.pgm", 20, 26, 5);
  const std::string right = make_image("r1.pgm", 20, 26, 6);
  const CliResult r =
      run_cli("stereo checkpoint=" + ckpt + " left=" + left + " right=" + right +
              " d_max=2 cost=l2 out_prefix=" + dir_->file("y_"));
  EXPECT_EQ(r.code, 6) << r.output;

  const CliResult bad = run_cli("stereo checkpoint=" + ckpt + " left=" + left +
                                " right=" + right + " d_max=2 cost=banana out_prefix=" +
                                dir_->file("w_"));
  EXPECT_EQ(bad.code, 2) << bad.output;
}

// ---------------------------------------------------------------------------
// match

TEST_F(CliTest, MatchIdentityPairScoresPerfectly) {
  const std::string ckpt = save_model("match.ckpt", ModelKind::kSiam, false, 8);
  const std::string image = make_image("scene.pgm", 96, 96, 7);
  const std::string kps = dir_->file("kps.txt");
  write_text(kps, "24 24 4\n48 48 4\n72 24 4\n");
  const std::string hom = dir_->file("h.txt");
  write_text(hom, "1 0 0 0 1 0 0 0 1\n");
  const std::string scores = dir_->file("scores.csv");
  const std::string pr = dir_->file("pr.csv");

  const CliResult r = run_cli("match checkpoint=" + ckpt + " image1=" + image +
                              " image2=" + image + " keypoints1=" + kps + " keypoints2=" +
                              kps + " homography=" + hom + " scores_out=" + scores +
                              " pr_out=" + pr);
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("ground-truth correspondences: 3"), std::string::npos);
  EXPECT_NE(r.output.find("mean average precision: 1"), std::string::npos);

  const std::vector<std::string> rows = lines_of(slurp(scores));
  ASSERT_EQ(rows.size(), 10u);
  EXPECT_EQ(rows[0], "index1,index2,score");
  // Identical images: each keypoint matches itself perfectly, so the three
  // self-pairs rank first.
  EXPECT_EQ(rows[1].substr(0, 4), "0,0,");
  EXPECT_EQ(rows[2].substr(0, 4), "1,1,");
  EXPECT_EQ(rows[3].substr(0, 4), "2,2,");

  const std::vector<std::string> pr_rows = lines_of(slurp(pr));
  ASSERT_GE(pr_rows.size(), 2u);
  EXPECT_EQ(pr_rows[0], "recall,precision,threshold");
  EXPECT_EQ(pr_rows.back().substr(0, 6), "map,,1");
}

TEST_F(CliTest, MatchMissingKeypointFileExitsWithIoCode) {
  const std::string ckpt = save_model("match2.ckpt", ModelKind::kSiam, false, 9);
  const std::string image = make_image("scene2.pgm", 96, 96, 8);
  const CliResult r = run_cli("match checkpoint=" + ckpt + " image1=" + image +
                              " image2=" + image + " keypoints1=" + dir_->file("absent.txt") +
                              " keypoints2=" + dir_->file("absent.txt") +
                              " scores_out=" + dir_->file("s.csv"));
  EXPECT_EQ(r.code, 3) << r.output;
}

}  // namespace
}  // namespace patchsim
