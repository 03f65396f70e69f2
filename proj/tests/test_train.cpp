#include "looprec/train.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace {

using looprec::Config;
using looprec::Error;

namespace fs = std::filesystem;

Config tiny_config() {
  Config cfg;
  cfg.model.width = 64;
  cfg.model.patch = 8;
  cfg.model.enc_depth = 1;
  cfg.model.registers = 2;
  cfg.model.dec_width = 48;
  cfg.model.dec_depth = 1;
  cfg.model.loop_blocks = 2;
  cfg.schedule.k_min = 1;
  cfg.schedule.k_max = 2;
  cfg.data.shards = "main:2";
  cfg.data.image = 32;
  cfg.data.views = 3;
  cfg.data.views_min = 2;
  cfg.data.views_max = 2;
  cfg.data.gen.spheres_min = 2;
  cfg.data.gen.spheres_max = 3;
  cfg.data.gen.min_valid_frac = 0.15;
  cfg.train.steps = 3;
  cfg.train.batch = 1;
  cfg.train.seed = 9;
  cfg.train.log_every = 1;
  cfg.optim.lr = 1e-4;
  cfg.optim.warmup_steps = 1;
  return cfg;
}

std::string fresh_dir(const std::string& name) {
  std::string dir = ::testing::TempDir() + name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_dataset(const Config& cfg, const std::string& dir) {
  looprec::Dataset ds;
  auto specs = cfg.data.shard_specs();
  for (size_t si = 0; si < specs.size(); ++si) {
    const auto& [name, count] = specs[si];
    fs::create_directories(dir + "/" + name);
    looprec::DatasetShard shard;
    shard.name = name;
    looprec::SceneGenConfig gc = cfg.data.gen;
    gc.image = cfg.data.image;
    gc.views = cfg.data.views;
    for (int64_t i = 0; i < count; ++i) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "scene_%05lld.djvw", (long long)i);
      std::string path = dir + "/" + name + "/" + buf;
      looprec::save_scene(
          looprec::generate_scene(cfg.train.seed * 1000 + si * 100 + (uint64_t)i, gc).record,
          path);
      shard.scene_paths.push_back(path);
    }
    ds.shards.push_back(std::move(shard));
  }
  looprec::save_manifest(ds, dir);
}

std::vector<uint8_t> slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  EXPECT_TRUE(f.good()) << path;
  std::vector<uint8_t> data((size_t)f.tellg());
  f.seekg(0);
  f.read((char*)data.data(), (std::streamsize)data.size());
  return data;
}

int count_lines_starting(const std::string& path, const std::string& prefix) {
  std::ifstream f(path);
  std::string line;
  int n = 0;
  while (std::getline(f, line))
    if (line.rfind(prefix, 0) == 0) ++n;
  return n;
}

TEST(Train, RunsToCompletionAndWritesArtifacts) {
  Config cfg = tiny_config();
  cfg.train.save_every = 2;
  std::string data = fresh_dir("train_data_a");
  std::string out = fresh_dir("train_out_a");
  write_dataset(cfg, data);

  looprec::TrainResult res = looprec::run_training<float>(cfg, data, out);
  EXPECT_EQ(res.steps_done, 3);
  EXPECT_TRUE(std::isfinite(res.final_loss));
  EXPECT_GT(res.final_loss, 0.0);
  EXPECT_TRUE(fs::exists(res.checkpoint_path));
  EXPECT_TRUE(fs::exists(out + "/checkpoint_000002.djvc"));
  EXPECT_EQ(count_lines_starting(out + "/train_log.txt", "step="), 3);

  looprec::CheckpointInfo info = looprec::read_checkpoint_header(res.checkpoint_path);
  EXPECT_EQ(info.step, 3);
  EXPECT_EQ(looprec::config_text(info.config), looprec::config_text(cfg));
}

TEST(Train, IdenticalConfigsTrainToBitwiseIdenticalCheckpoints) {
  Config cfg = tiny_config();
  std::string data = fresh_dir("train_data_b");
  write_dataset(cfg, data);

  std::string out1 = fresh_dir("train_out_b1");
  std::string out2 = fresh_dir("train_out_b2");
  auto r1 = looprec::run_training<float>(cfg, data, out1);
  auto r2 = looprec::run_training<float>(cfg, data, out2);
  EXPECT_EQ(slurp(r1.checkpoint_path), slurp(r2.checkpoint_path));
}

TEST(Train, ResumeReproducesTheUninterruptedRun) {
  Config cfg = tiny_config();
  cfg.train.steps = 4;
  cfg.train.save_every = 2;
  std::string data = fresh_dir("train_data_c");
  write_dataset(cfg, data);

  std::string full = fresh_dir("train_out_c_full");
  auto rf = looprec::run_training<float>(cfg, data, full);

  std::string resumed = fresh_dir("train_out_c_resume");
  auto rr = looprec::run_training<float>(cfg, data, resumed, full + "/checkpoint_000002.djvc");
  EXPECT_EQ(rr.steps_done, 4);
  EXPECT_EQ(count_lines_starting(resumed + "/train_log.txt", "step="), 2);
  EXPECT_EQ(slurp(rf.checkpoint_path), slurp(rr.checkpoint_path));
}

TEST(Train, ResumeRejectsMismatchedOrExhaustedCheckpoints) {
  Config cfg = tiny_config();
  cfg.train.steps = 2;
  cfg.train.save_every = 1;
  std::string data = fresh_dir("train_data_d");
  write_dataset(cfg, data);
  std::string out = fresh_dir("train_out_d");
  auto res = looprec::run_training<float>(cfg, data, out);

  Config other = cfg;
  other.optim.lr = 2e-4;
  try {
    looprec::run_training<float>(other, data, fresh_dir("train_out_d2"),
                                 out + "/checkpoint_000001.djvc");
    FAIL() << "expected config mismatch error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("resume config mismatch"), std::string::npos);
  }

  try {
    looprec::run_training<float>(cfg, data, fresh_dir("train_out_d3"), res.checkpoint_path);
    FAIL() << "expected exhausted checkpoint error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("already at step 2"), std::string::npos);
  }
}

TEST(Train, StageTwoTrainsOnlyTheDepthAndConfidencePath) {
  Config cfg = tiny_config();
  cfg.train.steps = 2;
  std::string data = fresh_dir("train_data_e");
  write_dataset(cfg, data);
  std::string out1 = fresh_dir("train_out_e1");
  auto r1 = looprec::run_training<float>(cfg, data, out1);

  Config cfg2 = cfg;
  cfg2.train.stage = 2;
  std::string out2 = fresh_dir("train_out_e2");
  auto r2 = looprec::run_training<float>(cfg2, data, out2, r1.checkpoint_path);
  EXPECT_EQ(r2.steps_done, 2);

  looprec::Model<float> m1(cfg.model_for_stage(), cfg.train.seed);
  looprec::load_checkpoint<float>(r1.checkpoint_path, m1.params());
  looprec::Model<float> m2(cfg2.model_for_stage(), cfg2.train.seed);
  looprec::load_checkpoint<float>(r2.checkpoint_path, m2.params());

  bool depth_path_moved = false;
  int frozen_checked = 0;
  for (const auto& [name, t1] : m1.params().items()) {
    ASSERT_TRUE(m2.params().has(name)) << name;
    const auto& v1 = t1.values();
    const auto& v2 = m2.params().at(name).values();
    ASSERT_EQ(v1.size(), v2.size()) << name;
    bool same = true;
    for (size_t i = 0; i < v1.size(); ++i)
      if (v1[i] != v2[i]) same = false;
    if (looprec::detail::stage2_trainable(name)) {
      if (!same) depth_path_moved = true;
    } else {
      EXPECT_TRUE(same) << "frozen parameter '" << name << "' changed in stage 2";
      ++frozen_checked;
    }
  }
  EXPECT_TRUE(depth_path_moved);
  EXPECT_GT(frozen_checked, 0);

  bool has_conf_head = false;
  for (const auto& [name, t] : m2.params().items())
    if (name.rfind("head.depth2.", 0) == 0) has_conf_head = true;
  EXPECT_TRUE(has_conf_head);
}

TEST(Train, StageTwoDemandsAStageOneCheckpoint) {
  Config cfg = tiny_config();
  cfg.train.stage = 2;
  std::string data = fresh_dir("train_data_f");
  write_dataset(cfg, data);
  try {
    looprec::run_training<float>(cfg, data, fresh_dir("train_out_f"));
    FAIL() << "expected stage-2 bootstrap error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("stage 2 requires"), std::string::npos);
  }
}

TEST(Train, RuntimeFailuresNameTheStep) {
  Config cfg = tiny_config();
  cfg.train.steps = 6;
  cfg.optim.lr = 1e14;
  cfg.optim.warmup_steps = 0;
  std::string data = fresh_dir("train_data_g");
  write_dataset(cfg, data);
  try {
    looprec::run_training<float>(cfg, data, fresh_dir("train_out_g"));
    FAIL() << "expected a diverging run to fail";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("train: step "), std::string::npos);
  }
}

}  // namespace
