#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "looprec/common.hpp"
#include "looprec/losses.hpp"
#include "looprec/model.hpp"
#include "looprec/optim.hpp"
#include "looprec/synthdata.hpp"

namespace looprec {

struct ScheduleConfig {
  int k_min = 4;
  int k_max = 8;
  double alpha = 2.0;
  double beta = 1.0;
  int k_inf = 8;
  std::string sampler = "beta";  // beta | fixed (fixed always uses k_max)

  void validate() const {
    check(k_min >= 1 && k_max >= k_min, "schedule: need 1 <= k_min <= k_max");
    check(alpha > 0 && beta > 0, "schedule: beta-distribution shapes must be positive");
    check(k_inf >= 1, "schedule: k_inf must be >= 1");
    check(sampler == "beta" || sampler == "fixed",
          cat("schedule: sampler must be 'beta' or 'fixed', got '", sampler, "'"));
  }
};

struct DataConfig {
  std::string shards = "main:8";  // comma-separated name:count
  int views = 4;                  // views generated per scene
  int views_min = 2;              // views drawn per training sample
  int views_max = 2;
  int image = 64;
  double mixture_alpha = 0.5;
  SceneGenConfig gen;

  std::vector<std::pair<std::string, int64_t>> shard_specs() const {
    std::vector<std::pair<std::string, int64_t>> out;
    std::stringstream ss(shards);
    std::string item;
    while (std::getline(ss, item, ',')) {
      size_t colon = item.find(':');
      check(colon != std::string::npos && colon > 0 && colon + 1 < item.size(),
            cat("data: bad shard spec '", item, "' (want name:count)"));
      std::string name = item.substr(0, colon);
      int64_t count = 0;
      try {
        count = std::stoll(item.substr(colon + 1));
      } catch (const std::exception&) {
        fail(cat("data: bad shard count in '", item, "'"));
      }
      check(count >= 1, cat("data: shard count must be >= 1 in '", item, "'"));
      out.emplace_back(name, count);
    }
    check(!out.empty(), "data: no shards configured");
    return out;
  }

  void validate() const {
    shard_specs();
    check(views >= 1, "data: views >= 1");
    check(views_min >= 1 && views_max >= views_min && views_max <= views,
          "data: need 1 <= views_min <= views_max <= views");
    check(image >= 8, "data: image >= 8");
    check(mixture_alpha > 0, "data: mixture_alpha must be positive");
    SceneGenConfig g = gen;
    g.image = image;
    g.views = views;
    g.validate();
  }
};

struct TrainConfig {
  int stage = 1;
  int64_t steps = 2000;
  int batch = 2;  // scenes per optimizer step
  uint64_t seed = 1;
  bool deterministic = true;
  int64_t log_every = 10;
  int64_t save_every = 0;  // 0 = final checkpoint only

  void validate() const {
    check(stage == 1 || stage == 2, "train: stage must be 1 or 2");
    check(steps >= 1, "train: steps >= 1");
    check(batch >= 1, "train: batch >= 1");
    check(log_every >= 1, "train: log_every >= 1");
    check(save_every >= 0, "train: save_every >= 0");
  }
};

struct Config {
  ModelConfig model;
  ScheduleConfig schedule;
  LossWeights loss;
  OptimConfig optim;  // warmup_steps = -1 resolves proportionally to steps
  DataConfig data;
  TrainConfig train;

  Config() { optim.warmup_steps = -1; }

  OptimConfig resolved_optim() const {
    OptimConfig oc = optim;
    oc.total_steps = train.steps;
    if (oc.warmup_steps < 0)
      oc.warmup_steps = (int64_t)std::llround((double)train.steps * 500.0 / 40000.0);
    oc.validate();
    return oc;
  }

  ModelConfig model_for_stage() const {
    ModelConfig mc = model;
    mc.stage = train.stage;
    return mc;
  }

  void validate() const {
    ModelConfig mc = model_for_stage();
    mc.validate();
    schedule.validate();
    check(loss.depth >= 0 && loss.ray >= 0 && loss.point >= 0 && loss.cam >= 0 &&
              loss.cam_t >= 0 && loss.cam_q >= 0 && loss.cam_fov >= 0,
          "loss: weights must be nonnegative");
    check(loss.conf_reg > 0, "loss: conf_reg must be positive");
    check(loss.grad_scales >= 1, "loss: grad_scales >= 1");
    data.validate();
    train.validate();
    check(optim.warmup_steps >= -1, "optimizer: warmup must be >= -1 (-1 = auto)");
    resolved_optim();
    check(data.image % model.patch == 0,
          cat("config: image size ", data.image, " not divisible by patch ", model.patch));
  }
};

namespace detail {

struct ConfigField {
  std::string key;
  std::function<void(Config&, const std::string&)> set;
  std::function<std::string(const Config&)> get;
};

inline int64_t parse_ll(const std::string& v, const std::string& key) {
  try {
    size_t used = 0;
    int64_t r = std::stoll(v, &used);
    check(used == v.size(), "");
    return r;
  } catch (const std::exception&) {
    fail(cat("config: key '", key, "' expects an integer, got '", v, "'"));
  }
}

inline uint64_t parse_ull(const std::string& v, const std::string& key) {
  try {
    size_t used = 0;
    uint64_t r = std::stoull(v, &used);
    check(used == v.size(), "");
    return r;
  } catch (const std::exception&) {
    fail(cat("config: key '", key, "' expects an unsigned integer, got '", v, "'"));
  }
}

inline double parse_d(const std::string& v, const std::string& key) {
  try {
    size_t used = 0;
    double r = std::stod(v, &used);
    check(used == v.size(), "");
    return r;
  } catch (const std::exception&) {
    fail(cat("config: key '", key, "' expects a number, got '", v, "'"));
  }
}

inline bool parse_b(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail(cat("config: key '", key, "' expects true/false, got '", v, "'"));
}

inline std::string fmt_d(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = [] {
    std::vector<ConfigField> fs;
    auto add_i = [&fs](const char* key, std::function<int&(Config&)> ref) {
      fs.push_back({key,
                    [ref, key](Config& c, const std::string& v) {
                      ref(c) = (int)parse_ll(v, key);
                    },
                    [ref](const Config& c) {
                      return std::to_string(ref(const_cast<Config&>(c)));
                    }});
    };
    auto add_ll = [&fs](const char* key, std::function<int64_t&(Config&)> ref) {
      fs.push_back({key,
                    [ref, key](Config& c, const std::string& v) { ref(c) = parse_ll(v, key); },
                    [ref](const Config& c) {
                      return std::to_string(ref(const_cast<Config&>(c)));
                    }});
    };
    auto add_u64 = [&fs](const char* key, std::function<uint64_t&(Config&)> ref) {
      fs.push_back({key,
                    [ref, key](Config& c, const std::string& v) { ref(c) = parse_ull(v, key); },
                    [ref](const Config& c) {
                      return std::to_string(ref(const_cast<Config&>(c)));
                    }});
    };
    auto add_d = [&fs](const char* key, std::function<double&(Config&)> ref) {
      fs.push_back({key,
                    [ref, key](Config& c, const std::string& v) { ref(c) = parse_d(v, key); },
                    [ref](const Config& c) { return fmt_d(ref(const_cast<Config&>(c))); }});
    };
    auto add_b = [&fs](const char* key, std::function<bool&(Config&)> ref) {
      fs.push_back({key,
                    [ref, key](Config& c, const std::string& v) { ref(c) = parse_b(v, key); },
                    [ref](const Config& c) {
                      return ref(const_cast<Config&>(c)) ? "true" : "false";
                    }});
    };
    auto add_s = [&fs](const char* key, std::function<std::string&(Config&)> ref) {
      fs.push_back({key, [ref](Config& c, const std::string& v) { ref(c) = v; },
                    [ref](const Config& c) { return ref(const_cast<Config&>(c)); }});
    };

    add_i("model.width", [](Config& c) -> int& { return c.model.width; });
    add_i("model.patch", [](Config& c) -> int& { return c.model.patch; });
    add_i("model.encoder_blocks", [](Config& c) -> int& { return c.model.enc_depth; });
    add_i("model.registers", [](Config& c) -> int& { return c.model.registers; });
    add_i("model.decoder_width", [](Config& c) -> int& { return c.model.dec_width; });
    add_i("model.decoder_blocks", [](Config& c) -> int& { return c.model.dec_depth; });
    add_i("model.loop_blocks", [](Config& c) -> int& { return c.model.loop_blocks; });
    add_d("model.rope_base", [](Config& c) -> double& { return c.model.rope_base; });
    fs.push_back({"model.variant",
                  [](Config& c, const std::string& v) { c.model.variant = parse_block_variant(v); },
                  [](const Config& c) { return block_variant_name(c.model.variant); }});

    add_i("schedule.k_min", [](Config& c) -> int& { return c.schedule.k_min; });
    add_i("schedule.k_max", [](Config& c) -> int& { return c.schedule.k_max; });
    add_d("schedule.alpha", [](Config& c) -> double& { return c.schedule.alpha; });
    add_d("schedule.beta", [](Config& c) -> double& { return c.schedule.beta; });
    add_i("schedule.k_inf", [](Config& c) -> int& { return c.schedule.k_inf; });
    add_s("schedule.sampler", [](Config& c) -> std::string& { return c.schedule.sampler; });

    add_d("loss.depth", [](Config& c) -> double& { return c.loss.depth; });
    add_d("loss.ray", [](Config& c) -> double& { return c.loss.ray; });
    add_d("loss.point", [](Config& c) -> double& { return c.loss.point; });
    add_d("loss.cam", [](Config& c) -> double& { return c.loss.cam; });
    add_d("loss.cam_t", [](Config& c) -> double& { return c.loss.cam_t; });
    add_d("loss.cam_q", [](Config& c) -> double& { return c.loss.cam_q; });
    add_d("loss.cam_fov", [](Config& c) -> double& { return c.loss.cam_fov; });
    add_d("loss.conf_reg", [](Config& c) -> double& { return c.loss.conf_reg; });
    add_i("loss.grad_scales", [](Config& c) -> int& { return c.loss.grad_scales; });

    add_d("optim.lr", [](Config& c) -> double& { return c.optim.lr; });
    add_d("optim.beta1", [](Config& c) -> double& { return c.optim.beta1; });
    add_d("optim.beta2", [](Config& c) -> double& { return c.optim.beta2; });
    add_d("optim.eps", [](Config& c) -> double& { return c.optim.eps; });
    add_d("optim.weight_decay", [](Config& c) -> double& { return c.optim.weight_decay; });
    add_ll("optim.warmup_steps", [](Config& c) -> int64_t& { return c.optim.warmup_steps; });
    add_d("optim.encoder_lr_mult", [](Config& c) -> double& { return c.optim.encoder_lr_mult; });

    add_s("data.shards", [](Config& c) -> std::string& { return c.data.shards; });
    add_i("data.views", [](Config& c) -> int& { return c.data.views; });
    add_i("data.views_min", [](Config& c) -> int& { return c.data.views_min; });
    add_i("data.views_max", [](Config& c) -> int& { return c.data.views_max; });
    add_i("data.image", [](Config& c) -> int& { return c.data.image; });
    add_d("data.mixture_alpha", [](Config& c) -> double& { return c.data.mixture_alpha; });
    add_i("data.spheres_min", [](Config& c) -> int& { return c.data.gen.spheres_min; });
    add_i("data.spheres_max", [](Config& c) -> int& { return c.data.gen.spheres_max; });
    add_i("data.planes_min", [](Config& c) -> int& { return c.data.gen.planes_min; });
    add_i("data.planes_max", [](Config& c) -> int& { return c.data.gen.planes_max; });
    add_d("data.fov_min_deg", [](Config& c) -> double& { return c.data.gen.fov_min_deg; });
    add_d("data.fov_max_deg", [](Config& c) -> double& { return c.data.gen.fov_max_deg; });
    add_d("data.orbit_min", [](Config& c) -> double& { return c.data.gen.orbit_min; });
    add_d("data.orbit_max", [](Config& c) -> double& { return c.data.gen.orbit_max; });
    add_d("data.azimuth_spread_deg",
          [](Config& c) -> double& { return c.data.gen.azimuth_spread_deg; });
    add_d("data.min_valid_frac", [](Config& c) -> double& { return c.data.gen.min_valid_frac; });

    add_i("train.stage", [](Config& c) -> int& { return c.train.stage; });
    add_ll("train.steps", [](Config& c) -> int64_t& { return c.train.steps; });
    add_i("train.batch", [](Config& c) -> int& { return c.train.batch; });
    add_u64("train.seed", [](Config& c) -> uint64_t& { return c.train.seed; });
    add_b("train.deterministic", [](Config& c) -> bool& { return c.train.deterministic; });
    add_ll("train.log_every", [](Config& c) -> int64_t& { return c.train.log_every; });
    add_ll("train.save_every", [](Config& c) -> int64_t& { return c.train.save_every; });
    return fs;
  }();
  return fields;
}

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

inline void config_set(Config& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : detail::config_fields())
    if (f.key == key) {
      f.set(cfg, value);
      return;
    }
  fail(cat("config: unknown key '", key, "'"));
}

inline std::string config_get(const Config& cfg, const std::string& key) {
  for (const auto& f : detail::config_fields())
    if (f.key == key) return f.get(cfg);
  fail(cat("config: unknown key '", key, "'"));
}

inline Config parse_config_text(const std::string& text, const std::string& origin = "<text>") {
  Config cfg;
  std::istringstream is(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      check(line.back() == ']', cat(origin, ":", lineno, ": unterminated section header"));
      section = detail::trim(line.substr(1, line.size() - 2));
      check(!section.empty(), cat(origin, ":", lineno, ": empty section name"));
      continue;
    }
    size_t eq = line.find('=');
    check(eq != std::string::npos, cat(origin, ":", lineno, ": expected key = value"));
    std::string key = detail::trim(line.substr(0, eq));
    std::string value = detail::trim(line.substr(eq + 1));
    check(!key.empty(), cat(origin, ":", lineno, ": empty key"));
    std::string full = section.empty() ? key : section + "." + key;
    try {
      config_set(cfg, full, value);
    } catch (const Error& e) {
      fail(cat(origin, ":", lineno, ": ", e.what()));
    }
  }
  return cfg;
}

inline Config load_config(const std::string& path) {
  std::ifstream fs(path, std::ios::binary);
  check(fs.good(), cat("config: cannot open '", path, "'"));
  std::stringstream buf;
  buf << fs.rdbuf();
  return parse_config_text(buf.str(), path);
}

// Environment variables override config keys: LOOPREC_<SECTION>_<KEY>, with
// dots mapped to underscores and upper-cased (e.g. LOOPREC_MODEL_WIDTH).
inline void apply_env_overrides(Config& cfg) {
  for (const auto& f : detail::config_fields()) {
    std::string env = "LOOPREC_";
    for (char ch : f.key) env += ch == '.' ? '_' : (char)std::toupper((unsigned char)ch);
    if (const char* v = std::getenv(env.c_str())) f.set(cfg, v);
  }
}

inline std::string config_text(const Config& cfg) {
  std::ostringstream os;
  std::string section;
  for (const auto& f : detail::config_fields()) {
    std::string sec = f.key.substr(0, f.key.find('.'));
    if (sec != section) {
      if (!section.empty()) os << "\n";
      os << "[" << sec << "]\n";
      section = sec;
    }
    os << f.key.substr(f.key.find('.') + 1) << " = " << f.get(cfg) << "\n";
  }
  return os.str();
}

}  // namespace looprec
