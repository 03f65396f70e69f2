#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "looprec/checkpoint.hpp"
#include "looprec/config.hpp"
#include "looprec/diagnostics.hpp"
#include "looprec/evalrun.hpp"
#include "looprec/train.hpp"

namespace looprec {

namespace detail {

inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) {
  uint64_t x = a;
  x ^= b + 0x9e3779b97f4a7c15ULL + (x << 6) + (x >> 2);
  x ^= c + 0x9e3779b97f4a7c15ULL + (x << 6) + (x >> 2);
  x ^= x >> 33;
  x *= 0xff51afd7ed558ccdULL;
  x ^= x >> 33;
  return x;
}

struct CliOverrides {
  std::string config_path, data_dir, out_dir = ".", resume, checkpoint;
  std::string block_variant, k_sampler, mode = "trace", cameras = "rays";
  int stage = 0, k_inf = 0, probe_view = 0, probe_patch = -1, probe_step = -1;
  uint64_t seed = 0;
  bool seed_set = false, deterministic = false;
};

inline Config resolve_config(const CliOverrides& o) {
  Config cfg = o.config_path.empty() ? Config{} : load_config(o.config_path);
  apply_env_overrides(cfg);
  if (o.seed_set) cfg.train.seed = o.seed;
  if (o.stage > 0) cfg.train.stage = o.stage;
  if (o.k_inf > 0) cfg.schedule.k_inf = o.k_inf;
  if (o.deterministic) cfg.train.deterministic = true;
  if (!o.block_variant.empty()) cfg.model.variant = parse_block_variant(o.block_variant);
  if (!o.k_sampler.empty()) cfg.schedule.sampler = o.k_sampler;
  cfg.validate();
  return cfg;
}

inline int cmd_gen_data(const CliOverrides& o) {
  Config cfg = resolve_config(o);
  std::filesystem::create_directories(o.out_dir);
  Dataset ds;
  auto specs = cfg.data.shard_specs();
  for (size_t si = 0; si < specs.size(); ++si) {
    const auto& [name, count] = specs[si];
    std::string shard_dir = o.out_dir + "/" + name;
    std::filesystem::create_directories(shard_dir);
    DatasetShard shard;
    shard.name = name;
    SceneGenConfig gc = cfg.data.gen;
    gc.image = cfg.data.image;
    gc.views = cfg.data.views;
    for (int64_t i = 0; i < count; ++i) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "scene_%05lld.djvw", (long long)i);
      std::string path = shard_dir + "/" + buf;
      GeneratedScene gs = generate_scene(mix_seed(cfg.train.seed, si, (uint64_t)i), gc);
      save_scene(gs.record, path);
      shard.scene_paths.push_back(path);
    }
    ds.shards.push_back(std::move(shard));
  }
  save_manifest(ds, o.out_dir);
  std::printf("wrote %lld scenes in %zu shard(s) under %s\n", (long long)ds.total_scenes(),
              ds.shards.size(), o.out_dir.c_str());
  return 0;
}

inline int cmd_train(const CliOverrides& o) {
  check(!o.data_dir.empty(), "train: --data is required");
  Config cfg = resolve_config(o);
  TrainResult res = run_training<float>(cfg, o.data_dir, o.out_dir, o.resume);
  std::printf("trained %lld steps, final loss %.5f, checkpoint %s\n",
              (long long)res.steps_done, res.final_loss, res.checkpoint_path.c_str());
  return 0;
}

template <typename T>
Model<T> model_from_checkpoint(const std::string& path, Config& cfg_out) {
  check(!path.empty(), "a --checkpoint file is required");
  CheckpointInfo hdr = read_checkpoint_header(path);
  cfg_out = hdr.config;
  Model<T> model(cfg_out.model_for_stage(), cfg_out.train.seed);
  load_checkpoint<T>(path, model.params());
  return model;
}

inline int cmd_eval(const CliOverrides& o) {
  check(!o.data_dir.empty(), "eval: --data is required");
  Config cfg;
  Model<float> model = model_from_checkpoint<float>(o.checkpoint, cfg);
  int k_inf = o.k_inf > 0 ? o.k_inf : cfg.schedule.k_inf;
  bool from_head = o.cameras == "head";
  check(o.cameras == "head" || o.cameras == "rays",
        cat("eval: --cameras must be rays or head, got '", o.cameras, "'"));
  Dataset ds = load_manifest(o.data_dir);
  EvalResult res = run_eval(model, ds, k_inf, from_head);
  std::filesystem::create_directories(o.out_dir);
  std::string base = o.out_dir + "/eval_k" + std::to_string(k_inf);
  write_eval_text(res, base + ".txt");
  write_eval_json(res, base + ".json");
  std::printf("k_inf=%d scenes=%zu rel_l2=%.4f ir=%.2f auc3=%.2f auc30=%.2f\n", k_inf,
              res.scenes.size(), res.aggregate.rel_l2, res.aggregate.ir, res.aggregate.auc3,
              res.aggregate.auc30);
  std::printf("reports: %s.txt %s.json\n", base.c_str(), base.c_str());
  return 0;
}

inline int cmd_analyze(const CliOverrides& o) {
  check(!o.data_dir.empty(), "analyze: --data is required");
  check(o.mode == "trace" || o.mode == "probe" || o.mode == "sweep" || o.mode == "earlystop",
        cat("analyze: unknown mode '", o.mode, "' (modes: trace, probe, sweep, earlystop)"));
  Config cfg;
  Model<float> model = model_from_checkpoint<float>(o.checkpoint, cfg);
  int k = o.k_inf > 0 ? o.k_inf : cfg.schedule.k_inf;
  bool from_head = o.cameras == "head";
  Dataset ds = load_manifest(o.data_dir);
  std::vector<SceneRecord> scenes;
  for (const auto& shard : ds.shards)
    for (const auto& path : shard.scene_paths) scenes.push_back(load_scene(path));
  check(!scenes.empty(), "analyze: dataset is empty");
  std::filesystem::create_directories(o.out_dir);

  if (o.mode == "trace") {
    std::vector<RefinementTrace> traces;
    for (const auto& rec : scenes) {
      ViewBatch<float> vb = make_view_batch<float>(rec);
      auto fw = model.forward(vb, k, /*keep_states=*/true);
      traces.push_back(refinement_trace(fw.states));
    }
    write_trace_csv(traces[0], o.out_dir + "/trace.csv");
    RefinementTrace med;
    auto median_of = [&](auto get, size_t idx) {
      std::vector<double> vals;
      for (const auto& tr : traces) vals.push_back(get(tr)[idx]);
      std::sort(vals.begin(), vals.end());
      size_t m = vals.size() / 2;
      return vals.size() % 2 ? vals[m] : 0.5 * (vals[m - 1] + vals[m]);
    };
    for (size_t i = 0; i < traces[0].norm.size(); ++i) {
      med.cos_to_final.push_back(
          median_of([](const RefinementTrace& t) -> const std::vector<double>& {
            return t.cos_to_final;
          }, i));
      med.norm.push_back(median_of(
          [](const RefinementTrace& t) -> const std::vector<double>& { return t.norm; }, i));
      if (i < traces[0].rel_update.size())
        med.rel_update.push_back(median_of(
            [](const RefinementTrace& t) -> const std::vector<double>& { return t.rel_update; },
            i));
    }
    write_trace_csv(med, o.out_dir + "/trace_median.csv");
    std::printf("trace over %d step(s): %s/trace.csv, %s/trace_median.csv\n", k,
                o.out_dir.c_str(), o.out_dir.c_str());
  } else if (o.mode == "probe") {
    TokenLayout lay = model.layout((int)scenes[0].views.size(), scenes[0].views[0].height,
                                   scenes[0].views[0].width);
    int patch = o.probe_patch >= 0 ? o.probe_patch : (lay.hp / 2) * lay.wp + lay.wp / 2;
    int step = o.probe_step >= 0 ? o.probe_step : k - 1;
    ViewBatch<float> vb = make_view_batch<float>(scenes[0]);
    ProbeResult res = attention_probe(model, vb, k, step, o.probe_view, patch);
    write_probe_json(res, o.out_dir + "/probe.json");
    write_probe_csv(res, o.out_dir + "/probe.csv");
    std::printf("probe (view %d, patch %d, step %d): %s/probe.json\n", o.probe_view, patch, step,
                o.out_dir.c_str());
  } else if (o.mode == "sweep") {
    std::vector<int> ks;
    for (int i = 1; i <= k; ++i) ks.push_back(i);
    auto rows = kinf_sweep(model, scenes, ks, from_head);
    write_sweep_csv(rows, o.out_dir + "/sweep.csv");
    std::printf("sweep over k=1..%d: %s/sweep.csv\n", k, o.out_dir.c_str());
  } else {
    auto rows = early_stop_compare(model, scenes, k, from_head);
    write_earlystop_csv(rows, o.out_dir + "/earlystop.csv");
    std::printf("early-stop comparison at k_max=%d: %s/earlystop.csv\n", k, o.out_dir.c_str());
  }
  return 0;
}

}  // namespace detail

inline int run_cli(int argc, char** argv) {
  CLI::App app{"looped-transformer multi-view scene reconstruction"};
  app.require_subcommand(1);
  detail::CliOverrides o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "config file (key = value sections)");
    sub->add_option("--out", o.out_dir, "output directory");
    sub->add_option("--seed", o.seed, "seed override")->each([&](const std::string&) {
      o.seed_set = true;
    });
    sub->add_flag("--deterministic", o.deterministic, "force deterministic mode");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  add_common(gen);

  CLI::App* train = app.add_subcommand("train", "train a model");
  add_common(train);
  train->add_option("--data", o.data_dir, "dataset directory (with manifest.txt)");
  train->add_option("--stage", o.stage, "training stage (1 or 2)");
  train->add_option("--resume", o.resume, "checkpoint to resume or bootstrap from");
  train->add_option("--block-variant", o.block_variant,
                    "decoupled | shared | shared_residual_gates | shared_state_gate");
  train->add_option("--k-sampler", o.k_sampler, "beta | fixed");

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(ev);
  ev->add_option("--data", o.data_dir, "dataset directory");
  ev->add_option("--checkpoint", o.checkpoint, "checkpoint file (DJVC)");
  ev->add_option("--k-inf", o.k_inf, "inference step count");
  ev->add_option("--cameras", o.cameras, "pose source: rays (default) or head");

  CLI::App* an = app.add_subcommand("analyze", "diagnostic instruments");
  add_common(an);
  an->add_option("--data", o.data_dir, "dataset directory");
  an->add_option("--checkpoint", o.checkpoint, "checkpoint file (DJVC)");
  an->add_option("--k-inf", o.k_inf, "step count for the analyzed forward pass");
  an->add_option("--mode", o.mode, "trace | probe | sweep | earlystop");
  an->add_option("--cameras", o.cameras, "pose source: rays (default) or head");
  an->add_option("--probe-view", o.probe_view, "probe query view");
  an->add_option("--probe-patch", o.probe_patch, "probe query patch index (default: center)");
  an->add_option("--probe-step", o.probe_step, "probe loop step (default: last)");

  try {
    app.parse(argc, argv);
    if (gen->parsed()) return detail::cmd_gen_data(o);
    if (train->parsed()) return detail::cmd_train(o);
    if (ev->parsed()) return detail::cmd_eval(o);
    if (an->parsed()) return detail::cmd_analyze(o);
    return 1;
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

}  // namespace looprec
