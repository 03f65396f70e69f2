#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "looprec/checkpoint.hpp"
#include "looprec/config.hpp"
#include "looprec/losses.hpp"
#include "looprec/model.hpp"
#include "looprec/optim.hpp"
#include "looprec/schedule.hpp"
#include "looprec/synthdata.hpp"
#include "looprec/viewbatch.hpp"

namespace looprec {

struct TrainResult {
  std::string checkpoint_path;
  int64_t steps_done = 0;
  double final_loss = 0;
};

namespace detail {

inline std::vector<std::vector<SceneRecord>> load_all_scenes(const Dataset& ds) {
  std::vector<std::vector<SceneRecord>> shards;
  for (const auto& shard : ds.shards) {
    std::vector<SceneRecord> recs;
    for (const auto& path : shard.scene_paths) recs.push_back(load_scene(path));
    shards.push_back(std::move(recs));
  }
  return shards;
}

inline std::vector<int> sample_view_subset(int total, int want, std::mt19937_64& rng) {
  std::vector<int> idx((size_t)total);
  for (int i = 0; i < total; ++i) idx[(size_t)i] = i;
  for (int i = 0; i < want; ++i) {
    std::uniform_int_distribution<int> pick(i, total - 1);
    std::swap(idx[(size_t)i], idx[(size_t)pick(rng)]);
  }
  idx.resize((size_t)want);
  return idx;
}

inline bool stage2_trainable(const std::string& name) {
  return name.rfind("dec.depth.", 0) == 0 || name.rfind("head.depth2.", 0) == 0;
}

inline std::string model_section_text(const Config& cfg) {
  std::string text = config_text(cfg);
  std::istringstream is(text);
  std::string line, out;
  bool in_model = false;
  while (std::getline(is, line)) {
    if (!line.empty() && line.front() == '[') in_model = line == "[model]";
    if (in_model) out += line + "\n";
  }
  return out;
}

}  // namespace detail

template <typename T>
TrainResult run_training(Config cfg, const std::string& data_dir, const std::string& out_dir,
                         const std::string& resume_path = "") {
  cfg.validate();
  std::filesystem::create_directories(out_dir);

  Dataset ds = load_manifest(data_dir);
  auto shards = detail::load_all_scenes(ds);
  std::vector<double> probs = mixture_probs(ds.counts(), cfg.data.mixture_alpha);

  Model<T> model(cfg.model_for_stage(), cfg.train.seed);
  if (cfg.train.stage == 2) model.set_trainable(detail::stage2_trainable);
  AdamW<T> opt(model.params(), cfg.resolved_optim());

  int64_t start_step = 0;
  if (!resume_path.empty()) {
    CheckpointInfo hdr = read_checkpoint_header(resume_path);
    if (hdr.config.train.stage == cfg.train.stage) {
      CheckpointInfo info = load_checkpoint<T>(resume_path, model.params(), &opt);
      check(config_text(info.config) == config_text(cfg),
            cat("train: resume config mismatch between '", resume_path,
                "' and the requested configuration"));
      start_step = info.step;
      check(start_step < cfg.train.steps,
            cat("train: checkpoint already at step ", start_step, " of ", cfg.train.steps));
    } else if (cfg.train.stage == 2 && hdr.config.train.stage == 1) {
      check(detail::model_section_text(hdr.config) == detail::model_section_text(cfg),
            cat("train: stage-1 checkpoint '", resume_path,
                "' was built with a different model configuration"));
      load_checkpoint<T>(resume_path, model.params(), nullptr, /*allow_missing=*/true);
    } else {
      fail(cat("train: cannot start a stage-", cfg.train.stage, " run from a stage-",
               hdr.config.train.stage, " checkpoint"));
    }
  } else {
    check(cfg.train.stage == 1, "train: stage 2 requires --resume with a stage-1 checkpoint");
  }

  MixtureSampler shard_sampler(probs, cfg.train.seed ^ 0x9e3779b97f4a7c15ULL);
  std::mt19937_64 data_rng(cfg.train.seed ^ 0xc2b2ae3d27d4eb4fULL);
  StepCountSampler k_sampler(cfg.schedule.alpha, cfg.schedule.beta, cfg.schedule.k_min,
                             cfg.schedule.k_max, cfg.train.seed ^ 0x165667b19e3779f9ULL);
  bool fixed_k = cfg.schedule.sampler == "fixed";

  // Skip ahead so resumed runs continue the sampling streams rather than
  // replaying them from the start.
  for (int64_t s = 0; s < start_step; ++s) {
    if (!fixed_k) k_sampler.sample_k();
    for (int b = 0; b < cfg.train.batch; ++b) {
      size_t si = shard_sampler.sample();
      std::uniform_int_distribution<size_t> pick(0, shards[si].size() - 1);
      pick(data_rng);
      std::uniform_int_distribution<int> vdist(cfg.data.views_min, cfg.data.views_max);
      int v = vdist(data_rng);
      detail::sample_view_subset(cfg.data.views, v, data_rng);
    }
  }

  std::ofstream log(out_dir + "/train_log.txt", std::ios::app);
  check(log.good(), cat("train: cannot open log in ", out_dir));

  TrainResult result;
  result.checkpoint_path = out_dir + "/checkpoint.djvc";

  for (int64_t step = start_step; step < cfg.train.steps; ++step) {
    int k = fixed_k ? cfg.schedule.k_max : k_sampler.sample_k();
    double lr = opt.current_lr();

    for (auto& [name, t] : model.params().mut_items()) t.clear_grad();

    double total = 0, depth = 0, grad = 0, ray = 0, point = 0, cam = 0, conf = 0;
    int vsum = 0;
    try {
      for (int b = 0; b < cfg.train.batch; ++b) {
        size_t si = shard_sampler.sample();
        std::uniform_int_distribution<size_t> pick(0, shards[si].size() - 1);
        const SceneRecord& rec = shards[si][pick(data_rng)];
        std::uniform_int_distribution<int> vdist(cfg.data.views_min, cfg.data.views_max);
        int v = vdist(data_rng);
        std::vector<int> subset = detail::sample_view_subset((int)rec.views.size(), v, data_rng);

        Tape<T> tape;
        TapeScope<T> scope(tape);
        ViewBatch<T> vb = make_view_batch<T>(rec, subset);
        auto fw = model.forward(vb, k);
        LossReport<T> rep = stage_loss(cfg.train.stage, fw.pred, vb, cfg.loss);
        check(std::isfinite(rep.total_value), "non-finite loss");
        Tensor<T> scaled = mul_scalar(rep.total, (T)(1.0 / cfg.train.batch));
        tape.backward(scaled);

        total += rep.total_value / cfg.train.batch;
        depth += rep.depth / cfg.train.batch;
        grad += rep.grad / cfg.train.batch;
        ray += rep.ray / cfg.train.batch;
        point += rep.point / cfg.train.batch;
        cam += rep.cam / cfg.train.batch;
        conf += rep.conf / cfg.train.batch;
        vsum += v;
      }
      opt.step();
    } catch (const Error& e) {
      fail(cat("train: step ", step, ": ", e.what()));
    }

    log << "step=" << step << " total=" << total << " depth=" << depth << " grad=" << grad
        << " ray=" << ray << " point=" << point << " cam=" << cam << " conf=" << conf
        << " k=" << k << " views=" << vsum << " lr=" << lr << "\n";
    log.flush();
    if ((step + 1) % cfg.train.log_every == 0 || step + 1 == cfg.train.steps)
      std::printf("step %6lld/%lld  loss %.5f  k=%d  lr %.3g\n", (long long)(step + 1),
                  (long long)cfg.train.steps, total, k, lr);

    result.final_loss = total;
    result.steps_done = step + 1;
    if (cfg.train.save_every > 0 && (step + 1) % cfg.train.save_every == 0 &&
        step + 1 < cfg.train.steps) {
      char buf[48];
      std::snprintf(buf, sizeof buf, "checkpoint_%06lld.djvc", (long long)(step + 1));
      save_checkpoint(out_dir + "/" + buf, cfg, step + 1, model.params(), &opt);
    }
  }

  save_checkpoint(result.checkpoint_path, cfg, cfg.train.steps, model.params(), &opt);
  return result;
}

}  // namespace looprec
