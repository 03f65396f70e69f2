#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "looprec/common.hpp"
#include "looprec/model.hpp"
#include "looprec/tensor.hpp"

namespace looprec {

struct OptimConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
  int64_t warmup_steps = 500;
  int64_t total_steps = 40000;
  double encoder_lr_mult = 0.1;

  void validate() const {
    check(lr > 0, "optimizer: lr must be positive");
    check(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "optimizer: betas in [0,1)");
    check(eps > 0, "optimizer: eps must be positive");
    check(weight_decay >= 0, "optimizer: weight decay must be nonnegative");
    check(warmup_steps >= 0, "optimizer: warmup must be nonnegative");
    check(total_steps >= 1, "optimizer: total steps must be >= 1");
    check(encoder_lr_mult >= 0, "optimizer: encoder lr multiplier must be nonnegative");
  }
};

// Linear warmup followed by cosine decay to zero; `step` is 0-based.
inline double lr_at_step(const OptimConfig& cfg, int64_t step) {
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
    return cfg.lr * (double)(step + 1) / (double)cfg.warmup_steps;
  int64_t span = std::max<int64_t>(1, cfg.total_steps - cfg.warmup_steps);
  double progress = std::min(1.0, (double)(step - cfg.warmup_steps) / (double)span);
  return cfg.lr * 0.5 * (1.0 + std::cos(kPi * progress));
}

// Decoupled weight decay applies to rank >= 2 tensors only; parameters whose
// requires_grad flag is off are skipped entirely (their moments stay frozen).
template <typename T>
class AdamW {
 public:
  struct Slot {
    std::string name;
    Tensor<T> param;
    std::vector<T> m, v;
    double lr_mult = 1.0;
    bool decay = false;
  };

  AdamW(ParamStore<T>& store, OptimConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    for (auto& [name, t] : store.mut_items()) {
      Slot s;
      s.name = name;
      s.param = t;
      s.m.assign((size_t)t.numel(), T(0));
      s.v.assign((size_t)t.numel(), T(0));
      s.lr_mult = name.rfind("enc.", 0) == 0 ? cfg_.encoder_lr_mult : 1.0;
      s.decay = t.shape().size() >= 2;
      slots_.push_back(std::move(s));
    }
  }

  double current_lr() const { return lr_at_step(cfg_, t_); }

  void step() {
    double lr = lr_at_step(cfg_, t_);
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, (double)t_);
    double bc2 = 1.0 - std::pow(cfg_.beta2, (double)t_);
    for (Slot& s : slots_) {
      if (!s.param.requires_grad()) continue;
      const std::vector<T>& g = s.param.grad();
      if (g.empty()) continue;
      std::vector<T>& p = s.param.mut_values();
      double step_lr = lr * s.lr_mult;
      double wd = s.decay ? cfg_.weight_decay : 0.0;
      for (size_t i = 0; i < p.size(); ++i) {
        double gi = (double)g[i];
        check(std::isfinite(gi), cat("optimizer: non-finite gradient in '", s.name, "'"));
        double m = cfg_.beta1 * (double)s.m[i] + (1.0 - cfg_.beta1) * gi;
        double v = cfg_.beta2 * (double)s.v[i] + (1.0 - cfg_.beta2) * gi * gi;
        s.m[i] = (T)m;
        s.v[i] = (T)v;
        double update = (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
        p[i] = (T)((double)p[i] - step_lr * (update + wd * (double)p[i]));
      }
    }
  }

  int64_t steps_taken() const { return t_; }
  void set_steps_taken(int64_t t) {
    check(t >= 0, "optimizer: negative step counter");
    t_ = t;
  }

  std::vector<Slot>& slots() { return slots_; }
  const std::vector<Slot>& slots() const { return slots_; }
  const OptimConfig& config() const { return cfg_; }

 private:
  OptimConfig cfg_;
  int64_t t_ = 0;
  std::vector<Slot> slots_;
};

}  // namespace looprec
