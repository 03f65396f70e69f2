#pragma once

// The looped multi-view reconstruction model.
//
// A shared encoder patchifies each view and runs per-view attention blocks;
// per-view camera and register tokens are then prepended and a single
// weight-tied block (frame attention over each view's tokens, then global
// attention across all views) is applied K times. Each of the two sub-blocks
// is a gated pre-norm residual unit
//
//   z'   = z  + s_attn * LS1(Attn(LN1(z)))
//   z''  = z' + s_mlp  * LS2(MLP(LN2(z')))
//   z+   = s_out * z''
//
// where (s_attn, s_mlp, s_out) = 1 + MLP(embed(t_k, t_{k+1})) is produced by a
// small gate network whose output layer is zero-initialized, so a fresh model
// applies the plain (ungated) recurrence bitwise. Two lightweight decoders
// (ray/camera and depth) read the final state.
//
// View-permutation equivariance holds bitwise: all token-parallel matmuls are
// issued per view slice, and the only cross-view reductions (global-attention
// softmax denominator and value mixing) are segmented, order-invariant folds.

#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "looprec/common.hpp"
#include "looprec/geometry.hpp"
#include "looprec/schedule.hpp"
#include "looprec/tensor.hpp"
#include "looprec/viewbatch.hpp"

namespace looprec {

enum class BlockVariant {
  kDecoupled,           // independent block per step, no time conditioning
  kShared,              // weight-tied, ungated
  kSharedResidualGates, // weight-tied + s_attn, s_mlp
  kSharedStateGate,     // weight-tied + s_attn, s_mlp, s_out
};

inline BlockVariant parse_block_variant(const std::string& s) {
  if (s == "decoupled") return BlockVariant::kDecoupled;
  if (s == "shared") return BlockVariant::kShared;
  if (s == "shared_residual_gates") return BlockVariant::kSharedResidualGates;
  if (s == "shared_state_gate") return BlockVariant::kSharedStateGate;
  fail(cat("unknown block variant '", s,
           "' (expected decoupled|shared|shared_residual_gates|shared_state_gate)"));
}

inline const char* block_variant_name(BlockVariant v) {
  switch (v) {
    case BlockVariant::kDecoupled: return "decoupled";
    case BlockVariant::kShared: return "shared";
    case BlockVariant::kSharedResidualGates: return "shared_residual_gates";
    case BlockVariant::kSharedStateGate: return "shared_state_gate";
  }
  return "?";
}

struct ModelConfig {
  int width = 192;      // token width C of the recurrent stack
  int patch = 8;        // square patch edge in pixels
  int enc_depth = 2;    // encoder blocks
  int registers = 4;    // register tokens per view (tied across views)
  int dec_width = 96;   // decoder token width
  int dec_depth = 2;    // blocks per decoder branch
  int stage = 1;        // 2 adds the convolutional depth/confidence head
  int loop_blocks = 16; // decoupled variant: number of per-step blocks
  double rope_base = 100.0;
  BlockVariant variant = BlockVariant::kSharedStateGate;

  int heads() const { return std::max(1, width / 64); }
  int head_dim() const { return width / heads(); }
  int dec_heads() const { return std::max(1, dec_width / 64); }
  int dec_head_dim() const { return dec_width / dec_heads(); }

  void validate() const {
    check(width >= 8, "model: width too small");
    check(width % heads() == 0, cat("model: width ", width, " not divisible by ", heads(),
                                    " heads"));
    check(head_dim() % 4 == 0, "model: head dim must be divisible by 4 for 2d rotary tables");
    check(dec_width >= 8 && dec_width % dec_heads() == 0 && dec_head_dim() % 4 == 0,
          "model: bad decoder width");
    check(patch >= 1, "model: patch >= 1");
    check(enc_depth >= 1 && dec_depth >= 1, "model: depths >= 1");
    check(registers >= 0, "model: registers >= 0");
    check(stage == 1 || stage == 2, cat("model: stage must be 1 or 2, got ", stage));
    check(loop_blocks >= 1, "model: loop_blocks >= 1");
    check(rope_base > 1.0, "model: rope_base > 1 required");
  }
};

struct TokenLayout {
  int vcount = 0, hp = 0, wp = 0, registers = 0;

  int patches() const { return hp * wp; }
  int per_view() const { return 1 + registers + patches(); }
  int total() const { return vcount * per_view(); }
  std::vector<int64_t> view_rows() const {
    return std::vector<int64_t>((size_t)vcount, per_view());
  }
};

// Sinusoidal embedding of a scalar: kEmbedDim/2 sin values then kEmbedDim/2
// cos values, geometric frequencies from 1 to kEmbedFreqMax.
inline constexpr int kEmbedDim = 64;
inline constexpr double kEmbedFreqMax = 1e4;

template <typename T>
Tensor<T> sinusoid_embed(double t) {
  constexpr int half = kEmbedDim / 2;
  std::vector<T> v((size_t)kEmbedDim);
  for (int j = 0; j < half; ++j) {
    double w = std::pow(kEmbedFreqMax, (double)j / (half - 1));
    v[(size_t)j] = (T)std::sin(w * t);
    v[(size_t)(half + j)] = (T)std::cos(w * t);
  }
  return Tensor<T>::constant({1, kEmbedDim}, std::move(v));
}

// ---------------------------------------------------------------------------
// parameter store
// ---------------------------------------------------------------------------

enum class Init { kNormal02, kZero, kOne, kLayerScale };

template <typename T>
class ParamStore {
 public:
  Tensor<T> make(const std::string& name, Shape shape, std::mt19937_64& rng, Init init) {
    check(index_.find(name) == index_.end(), cat("duplicate parameter '", name, "'"));
    Tensor<T> t;
    switch (init) {
      case Init::kNormal02: t = randn<T>(shape, rng, 0.02); break;
      case Init::kZero: t = Tensor<T>::zeros(shape); break;
      case Init::kOne: t = Tensor<T>::full(shape, T(1)); break;
      case Init::kLayerScale: t = Tensor<T>::full(shape, T(1e-5)); break;
    }
    t.set_requires_grad(true);
    index_[name] = items_.size();
    items_.push_back({name, t});
    return t;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }
  Tensor<T>& at(const std::string& name) {
    auto it = index_.find(name);
    check(it != index_.end(), cat("unknown parameter '", name, "'"));
    return items_[it->second].second;
  }
  const Tensor<T>& at(const std::string& name) const {
    return const_cast<ParamStore*>(this)->at(name);
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& items() const { return items_; }
  std::vector<std::pair<std::string, Tensor<T>>>& mut_items() { return items_; }
  size_t size() const { return items_.size(); }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> items_;
  std::unordered_map<std::string, size_t> index_;
};

// ---------------------------------------------------------------------------
// building blocks
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
struct AttnParams {
  Tensor<T> ln_g, ln_b, wqkv, bqkv, qn_g, qn_b, kn_g, kn_b, wo, bo;
};

template <typename T>
struct BlockParams {
  AttnParams<T> attn;
  Tensor<T> ls1;  // undefined outside the recurrent stack
  Tensor<T> ln2_g, ln2_b, w1, b1, w2, b2;
  Tensor<T> ls2;
};

template <typename T>
struct GateParams {
  Tensor<T> w1, b1, w2, b2;
  int n_scales = 0;
};

template <typename T>
struct Gates {
  Tensor<T> attn, mlp, out;  // each [C] or undefined
};

template <typename T>
BlockParams<T> make_block(ParamStore<T>& ps, const std::string& prefix, int width, int head_dim,
                          bool layer_scale, std::mt19937_64& rng) {
  BlockParams<T> b;
  int64_t c = width, d = head_dim, hidden = 4 * c;
  b.attn.ln_g = ps.make(prefix + ".ln1.g", {c}, rng, Init::kOne);
  b.attn.ln_b = ps.make(prefix + ".ln1.b", {c}, rng, Init::kZero);
  b.attn.wqkv = ps.make(prefix + ".attn.wqkv", {c, 3 * c}, rng, Init::kNormal02);
  b.attn.bqkv = ps.make(prefix + ".attn.bqkv", {3 * c}, rng, Init::kZero);
  b.attn.qn_g = ps.make(prefix + ".attn.qn.g", {d}, rng, Init::kOne);
  b.attn.qn_b = ps.make(prefix + ".attn.qn.b", {d}, rng, Init::kZero);
  b.attn.kn_g = ps.make(prefix + ".attn.kn.g", {d}, rng, Init::kOne);
  b.attn.kn_b = ps.make(prefix + ".attn.kn.b", {d}, rng, Init::kZero);
  b.attn.wo = ps.make(prefix + ".attn.wo", {c, c}, rng, Init::kNormal02);
  b.attn.bo = ps.make(prefix + ".attn.bo", {c}, rng, Init::kZero);
  if (layer_scale) b.ls1 = ps.make(prefix + ".ls1", {c}, rng, Init::kLayerScale);
  b.ln2_g = ps.make(prefix + ".ln2.g", {c}, rng, Init::kOne);
  b.ln2_b = ps.make(prefix + ".ln2.b", {c}, rng, Init::kZero);
  b.w1 = ps.make(prefix + ".mlp.w1", {c, hidden}, rng, Init::kNormal02);
  b.b1 = ps.make(prefix + ".mlp.b1", {hidden}, rng, Init::kZero);
  b.w2 = ps.make(prefix + ".mlp.w2", {hidden, c}, rng, Init::kNormal02);
  b.b2 = ps.make(prefix + ".mlp.b2", {c}, rng, Init::kZero);
  if (layer_scale) b.ls2 = ps.make(prefix + ".ls2", {c}, rng, Init::kLayerScale);
  return b;
}

// Gate output layer starts at zero so every scale is exactly 1 at init.
template <typename T>
GateParams<T> make_gate(ParamStore<T>& ps, const std::string& prefix, int width, int n_scales,
                        std::mt19937_64& rng) {
  GateParams<T> g;
  g.n_scales = n_scales;
  int64_t in = 2 * kEmbedDim, hidden = 4 * kEmbedDim;
  g.w1 = ps.make(prefix + ".fc1.w", {in, hidden}, rng, Init::kNormal02);
  g.b1 = ps.make(prefix + ".fc1.b", {hidden}, rng, Init::kZero);
  g.w2 = ps.make(prefix + ".fc2.w", {hidden, (int64_t)n_scales * width}, rng, Init::kZero);
  g.b2 = ps.make(prefix + ".fc2.b", {(int64_t)n_scales * width}, rng, Init::kZero);
  return g;
}

// 2D rotary tables for one view's token rows. Head dim is split in quarters:
// dims [0,d/4) pair with [d/4,d/2) and rotate by the patch column u; dims
// [d/2,3d/4) pair with [3d/4,d) and rotate by the patch row v. The leading
// `sentinels` rows (camera + registers) get identity rotation.
template <typename T>
struct RopeTable {
  Tensor<T> cos, sin;  // [rows, d]
};

template <typename T>
RopeTable<T> make_rope_table(int hp, int wp, int sentinels, int d, double base) {
  int quarter = d / 4;
  int rows = sentinels + hp * wp;
  std::vector<T> cs((size_t)rows * d, T(1)), sn((size_t)rows * d, T(0));
  for (int pv = 0; pv < hp; ++pv)
    for (int pu = 0; pu < wp; ++pu) {
      int row = sentinels + pv * wp + pu;
      for (int j = 0; j < quarter; ++j) {
        double w = std::pow(base, -(double)j / quarter);
        double au = pu * w, av = pv * w;
        for (int half : {0, 1}) {
          cs[(size_t)(row * d + half * quarter + j)] = (T)std::cos(au);
          sn[(size_t)(row * d + half * quarter + j)] = (T)std::sin(au);
          cs[(size_t)(row * d + 2 * quarter + half * quarter + j)] = (T)std::cos(av);
          sn[(size_t)(row * d + 2 * quarter + half * quarter + j)] = (T)std::sin(av);
        }
      }
    }
  RopeTable<T> t;
  t.cos = Tensor<T>::constant({rows, d}, std::move(cs));
  t.sin = Tensor<T>::constant({rows, d}, std::move(sn));
  return t;
}

template <typename T>
Tensor<T> rope_rotate(const Tensor<T>& x, const RopeTable<T>& table) {
  int64_t d = x.dim(-1);
  auto q = split(x, {d / 4, d / 4, d / 4, d / 4}, -1);
  Tensor<T> rot = concat<T>({neg(q[1]), q[0], neg(q[3]), q[2]}, -1);
  return add(mul(x, table.cos), mul(rot, table.sin));
}

// Captured global-attention q/k (post normalization) for the probe.
template <typename T>
struct ProbeSink {
  int step = -1;  // which loop step to capture
  bool captured = false;
  int heads = 0, head_dim = 0;
  std::vector<T> q, k;  // [H, N, d] values
};

}  // namespace detail

template <typename T>
using AttnProbe = detail::ProbeSink<T>;

// ---------------------------------------------------------------------------
// predictions
// ---------------------------------------------------------------------------

template <typename T>
struct ViewPrediction {
  Tensor<T> rays;    // [H, W, 6]
  Tensor<T> depth;   // [H, W]
  Tensor<T> conf;    // [H, W]; defined in stage 2 only
  Tensor<T> points;  // [H, W, 3] = origin + depth * direction
  Tensor<T> cam_t;   // [3]
  Tensor<T> cam_q;   // [4], unit norm (w,x,y,z)
  Tensor<T> cam_fov; // [2], raw
};

template <typename T>
struct Prediction {
  std::vector<ViewPrediction<T>> views;
};

// Converts a predicted camera tuple to a metric camera (canonical quaternion
// sign, fov clamped into a valid pinhole range).
template <typename T>
Camera prediction_camera(const ViewPrediction<T>& vp, int height, int width) {
  const auto& q = vp.cam_q.values();
  const auto& t = vp.cam_t.values();
  const auto& f = vp.cam_fov.values();
  Camera cam;
  cam.q = Eigen::Quaterniond((double)q[0], (double)q[1], (double)q[2], (double)q[3]);
  cam.t = {(double)t[0], (double)t[1], (double)t[2]};
  cam.fov = {std::clamp((double)f[0], 1e-3, kPi - 1e-3),
             std::clamp((double)f[1], 1e-3, kPi - 1e-3)};
  cam.height = height;
  cam.width = width;
  cam.canonicalize();
  return cam;
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

template <typename T>
class Model {
 public:
  Model(ModelConfig cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    int64_t c = cfg_.width, cd = cfg_.dec_width, p2 = (int64_t)cfg_.patch * cfg_.patch;

    patch_embed_w_ = ps_.make("enc.patch_embed.w", {p2 * 3, c}, rng, Init::kNormal02);
    patch_embed_b_ = ps_.make("enc.patch_embed.b", {c}, rng, Init::kZero);
    for (int i = 0; i < cfg_.enc_depth; ++i)
      enc_blocks_.push_back(detail::make_block(ps_, cat("enc.blk", i), cfg_.width,
                                               cfg_.head_dim(), false, rng));
    camera_tok_ref_ = ps_.make("tok.camera_ref", {1, c}, rng, Init::kNormal02);
    camera_tok_src_ = ps_.make("tok.camera_src", {1, c}, rng, Init::kNormal02);
    if (cfg_.registers > 0)
      register_tok_ = ps_.make("tok.registers", {cfg_.registers, c}, rng, Init::kNormal02);

    if (cfg_.variant == BlockVariant::kDecoupled) {
      for (int k = 0; k < cfg_.loop_blocks; ++k) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "%02d", k);
        loop_frame_.push_back(detail::make_block(ps_, cat("loop.step", buf, ".frame"),
                                                 cfg_.width, cfg_.head_dim(), true, rng));
        loop_global_.push_back(detail::make_block(ps_, cat("loop.step", buf, ".global"),
                                                  cfg_.width, cfg_.head_dim(), true, rng));
      }
    } else {
      loop_frame_.push_back(
          detail::make_block(ps_, "loop.frame", cfg_.width, cfg_.head_dim(), true, rng));
      loop_global_.push_back(
          detail::make_block(ps_, "loop.global", cfg_.width, cfg_.head_dim(), true, rng));
      int n_scales = cfg_.variant == BlockVariant::kSharedStateGate     ? 3
                     : cfg_.variant == BlockVariant::kSharedResidualGates ? 2
                                                                          : 0;
      if (n_scales > 0) {
        gate_frame_ = detail::make_gate(ps_, "loop.gate_frame", cfg_.width, n_scales, rng);
        gate_global_ = detail::make_gate(ps_, "loop.gate_global", cfg_.width, n_scales, rng);
      }
    }

    auto make_decoder = [&](const char* name, std::vector<detail::BlockParams<T>>& blocks,
                            Tensor<T>& pw, Tensor<T>& pb, Tensor<T>& ng, Tensor<T>& nb) {
      pw = ps_.make(cat("dec.", name, ".proj.w"), {c, cd}, rng, Init::kNormal02);
      pb = ps_.make(cat("dec.", name, ".proj.b"), {cd}, rng, Init::kZero);
      for (int i = 0; i < cfg_.dec_depth; ++i)
        blocks.push_back(detail::make_block(ps_, cat("dec.", name, ".blk", i), cfg_.dec_width,
                                            cfg_.dec_head_dim(), false, rng));
      ng = ps_.make(cat("dec.", name, ".norm.g"), {cd}, rng, Init::kOne);
      nb = ps_.make(cat("dec.", name, ".norm.b"), {cd}, rng, Init::kZero);
    };
    make_decoder("ray", dec_ray_blocks_, dec_ray_proj_w_, dec_ray_proj_b_, dec_ray_norm_g_,
                 dec_ray_norm_b_);
    make_decoder("depth", dec_depth_blocks_, dec_depth_proj_w_, dec_depth_proj_b_,
                 dec_depth_norm_g_, dec_depth_norm_b_);

    head_ray_w_ = ps_.make("head.ray.w", {cd, p2 * 6}, rng, Init::kNormal02);
    head_ray_b_ = ps_.make("head.ray.b", {p2 * 6}, rng, Init::kZero);
    head_depth1_w_ = ps_.make("head.depth1.w", {cd, p2}, rng, Init::kNormal02);
    head_depth1_b_ = ps_.make("head.depth1.b", {p2}, rng, Init::kZero);
    head_cam_w1_ = ps_.make("head.cam.fc1.w", {cd, 2 * cd}, rng, Init::kNormal02);
    head_cam_b1_ = ps_.make("head.cam.fc1.b", {2 * cd}, rng, Init::kZero);
    head_cam_w2_ = ps_.make("head.cam.fc2.w", {2 * cd, 9}, rng, Init::kNormal02);
    head_cam_b2_ = ps_.make("head.cam.fc2.b", {9}, rng, Init::kZero);

    if (cfg_.stage == 2) {
      int64_t c1 = cd, c2 = std::max<int64_t>(cd / 2, 8);
      conv_c1_ = c1;
      conv_c2_ = c2;
      d2_up1_lin_w_ = ps_.make("head.depth2.up1.lin.w", {cd, 16 * c1}, rng, Init::kNormal02);
      d2_up1_lin_b_ = ps_.make("head.depth2.up1.lin.b", {16 * c1}, rng, Init::kZero);
      d2_up1_conv_w_ = ps_.make("head.depth2.up1.conv.w", {9 * c1, c1}, rng, Init::kNormal02);
      d2_up1_conv_b_ = ps_.make("head.depth2.up1.conv.b", {c1}, rng, Init::kZero);
      d2_up2_lin_w_ = ps_.make("head.depth2.up2.lin.w", {c1, 4 * c2}, rng, Init::kNormal02);
      d2_up2_lin_b_ = ps_.make("head.depth2.up2.lin.b", {4 * c2}, rng, Init::kZero);
      d2_up2_conv_w_ = ps_.make("head.depth2.up2.conv.w", {9 * c2, c2}, rng, Init::kNormal02);
      d2_up2_conv_b_ = ps_.make("head.depth2.up2.conv.b", {c2}, rng, Init::kZero);
      d2_out_w_ = ps_.make("head.depth2.out.w", {c2, 2}, rng, Init::kNormal02);
      d2_out_b_ = ps_.make("head.depth2.out.b", {2}, rng, Init::kZero);
    }
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return ps_; }
  const ParamStore<T>& params() const { return ps_; }

  TokenLayout layout(int vcount, int height, int width) const {
    check(vcount >= 1, "model: need at least one view");
    check(height % cfg_.patch == 0 && width % cfg_.patch == 0,
          cat("model: image ", height, "x", width, " not divisible by patch ", cfg_.patch));
    TokenLayout lay;
    lay.vcount = vcount;
    lay.hp = height / cfg_.patch;
    lay.wp = width / cfg_.patch;
    lay.registers = cfg_.registers;
    return lay;
  }

  // Parameters of the recurrent stack itself (gate networks excluded).
  int64_t loop_stack_param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : ps_.items())
      if (name.rfind("loop.", 0) == 0 && name.find(".gate_") == std::string::npos)
        n += t.numel();
    return n;
  }

  void set_trainable(const std::function<bool(const std::string&)>& pred) {
    for (auto& [name, t] : ps_.mut_items()) t.set_requires_grad(pred(name));
  }

  // --- forward -------------------------------------------------------------

  struct Forward {
    Prediction<T> pred;
    std::vector<Tensor<T>> states;  // z_0 .. z_K when requested, else just z_K
  };

  Forward forward(const ViewBatch<T>& batch, int k, bool keep_states = false,
                  detail::ProbeSink<T>* probe = nullptr) const {
    check(k >= 1, cat("forward: step count must be >= 1, got ", k));
    if (cfg_.variant == BlockVariant::kDecoupled)
      check(k <= cfg_.loop_blocks, cat("forward: decoupled variant has ", cfg_.loop_blocks,
                                       " blocks but k = ", k));
    TokenLayout lay = layout(batch.vcount(), batch.height, batch.width);
    std::vector<double> t = loop_partition(k);

    Forward fw;
    Tensor<T> z = encode(batch, lay);
    if (keep_states) fw.states.push_back(z);
    for (int step = 0; step < k; ++step) {
      try {
        z = loop_step(z, lay, t[(size_t)step], t[(size_t)step + 1], step, probe);
      } catch (const Error& e) {
        fail(cat("loop step ", step, " of ", k, ": ", e.what()));
      }
      if (keep_states) fw.states.push_back(z);
    }
    if (!keep_states) fw.states.push_back(z);
    fw.pred = decode(z, lay, batch.height, batch.width);
    return fw;
  }

  // z_0: encoder output with camera/register tokens prepended per view.
  Tensor<T> encode(const ViewBatch<T>& batch, const TokenLayout& lay) const {
    int64_t p = cfg_.patch;
    std::vector<Tensor<T>> embedded;
    for (int v = 0; v < lay.vcount; ++v) {
      Tensor<T> img = batch.views[(size_t)v].image;  // [H, W, 3]
      Tensor<T> grid = reshape(img, {lay.hp, p, lay.wp, p, 3});
      Tensor<T> patches = reshape(transpose(grid, {0, 2, 1, 3, 4}),
                                  {(int64_t)lay.patches(), p * p * 3});
      embedded.push_back(add(matmul(patches, patch_embed_w_), patch_embed_b_));
    }
    Tensor<T> x = concat(embedded, 0);  // [V*np, C]

    detail::RopeTable<T> rope =
        detail::make_rope_table<T>(lay.hp, lay.wp, 0, cfg_.head_dim(), cfg_.rope_base);
    std::vector<int64_t> rows((size_t)lay.vcount, lay.patches());
    for (const auto& blk : enc_blocks_)
      x = sub_block(x, blk, cfg_.heads(), rows, /*global=*/false, &rope, {}, nullptr);

    auto per_view = split(x, rows, 0);
    std::vector<Tensor<T>> tokens;
    for (int v = 0; v < lay.vcount; ++v) {
      tokens.push_back(v == 0 ? camera_tok_ref_ : camera_tok_src_);
      if (cfg_.registers > 0) tokens.push_back(register_tok_);
      tokens.push_back(per_view[(size_t)v]);
    }
    return concat(tokens, 0);  // [V*(1+R+np), C]
  }

  Tensor<T> loop_step(const Tensor<T>& z, const TokenLayout& lay, double t0, double t1,
                      int step, detail::ProbeSink<T>* probe = nullptr) const {
    const detail::BlockParams<T>& frame =
        loop_frame_[cfg_.variant == BlockVariant::kDecoupled ? (size_t)step : 0];
    const detail::BlockParams<T>& global =
        loop_global_[cfg_.variant == BlockVariant::kDecoupled ? (size_t)step : 0];

    detail::Gates<T> gf, gg;
    if (gate_frame_.n_scales > 0) {
      gf = eval_gate(gate_frame_, t0, t1);
      gg = eval_gate(gate_global_, t0, t1);
    }

    detail::RopeTable<T> rope = detail::make_rope_table<T>(
        lay.hp, lay.wp, 1 + lay.registers, cfg_.head_dim(), cfg_.rope_base);
    std::vector<int64_t> rows = lay.view_rows();
    detail::ProbeSink<T>* sink = (probe && probe->step == step) ? probe : nullptr;
    Tensor<T> z1 = sub_block(z, frame, cfg_.heads(), rows, /*global=*/false, &rope, gf, nullptr);
    return sub_block(z1, global, cfg_.heads(), rows, /*global=*/true, nullptr, gg, sink);
  }

  Prediction<T> decode(const Tensor<T>& z, const TokenLayout& lay, int height, int width) const {
    Prediction<T> pred;
    pred.views.resize((size_t)lay.vcount);
    std::vector<int64_t> rows = lay.view_rows();
    int64_t p = cfg_.patch;

    auto run_branch = [&](const Tensor<T>& pw, const Tensor<T>& pb,
                          const std::vector<detail::BlockParams<T>>& blocks, const Tensor<T>& ng,
                          const Tensor<T>& nb) {
      Tensor<T> x = per_view_linear(z, rows, pw, pb);
      detail::RopeTable<T> rope = detail::make_rope_table<T>(
          lay.hp, lay.wp, 1 + lay.registers, cfg_.dec_head_dim(), cfg_.rope_base);
      for (const auto& blk : blocks)
        x = sub_block(x, blk, cfg_.dec_heads(), rows, /*global=*/false, &rope, {}, nullptr);
      return layer_norm(x, ng, nb);
    };

    Tensor<T> ray_tokens = run_branch(dec_ray_proj_w_, dec_ray_proj_b_, dec_ray_blocks_,
                                      dec_ray_norm_g_, dec_ray_norm_b_);
    Tensor<T> depth_tokens = run_branch(dec_depth_proj_w_, dec_depth_proj_b_, dec_depth_blocks_,
                                        dec_depth_norm_g_, dec_depth_norm_b_);

    auto ray_views = split(ray_tokens, rows, 0);
    auto depth_views = split(depth_tokens, rows, 0);
    for (int v = 0; v < lay.vcount; ++v) {
      auto parts = split(ray_views[(size_t)v],
                         {1, (int64_t)lay.registers, (int64_t)lay.patches()}, 0);
      Tensor<T> cam_tok = parts[0];      // [1, Cd]
      Tensor<T> ray_patch = parts[2];    // [np, Cd]
      ViewPrediction<T>& vp = pred.views[(size_t)v];

      Tensor<T> ray_flat = add(matmul(ray_patch, head_ray_w_), head_ray_b_);
      vp.rays = pixel_shuffle(reshape(ray_flat, {lay.hp, lay.wp, p * p * 6}), (int)p);

      Tensor<T> cam_h = gelu(add(matmul(cam_tok, head_cam_w1_), head_cam_b1_));
      Tensor<T> cam_o = add(matmul(cam_h, head_cam_w2_), head_cam_b2_);  // [1, 9]
      auto tqf = split(cam_o, {3, 4, 2}, 1);
      vp.cam_t = reshape(tqf[0], {3});
      Tensor<T> q_raw = tqf[1];
      Tensor<T> q_norm = power(sum(square(q_raw), 1, true), -0.5);
      vp.cam_q = reshape(mul(q_raw, q_norm), {4});
      vp.cam_fov = reshape(tqf[2], {2});

      Tensor<T> dpatch =
          split(depth_views[(size_t)v], {1, (int64_t)lay.registers, (int64_t)lay.patches()},
                0)[2];
      if (cfg_.stage == 1) {
        Tensor<T> dflat = add(matmul(dpatch, head_depth1_w_), head_depth1_b_);
        vp.depth = reshape(pixel_shuffle(reshape(dflat, {lay.hp, lay.wp, p * p}), (int)p),
                           {height, width});
      } else {
        auto dc = conv_head(reshape(dpatch, {lay.hp, lay.wp, (int64_t)cfg_.dec_width}));
        vp.depth = reshape(dc.first, {height, width});
        vp.conf = reshape(dc.second, {height, width});
      }

      auto od = split(vp.rays, {3, 3}, 2);
      Tensor<T> d1 = reshape(vp.depth, {height, width, 1});
      Tensor<T> d3 = concat<T>({d1, d1, d1}, 2);
      vp.points = add(od[0], mul(od[1], d3));
    }
    return pred;
  }

 private:
  // [h, w, r*r*c] -> [h*r, w*r, c]
  static Tensor<T> pixel_shuffle(const Tensor<T>& x, int r) {
    int64_t h = x.dim(0), w = x.dim(1), rc = x.dim(2);
    check(rc % ((int64_t)r * r) == 0, "pixel_shuffle: channels not divisible by r^2");
    int64_t c = rc / ((int64_t)r * r);
    Tensor<T> t = reshape(x, {h, w, r, r, c});
    return reshape(transpose(t, {0, 2, 1, 3, 4}), {h * r, w * r, c});
  }

  // 3x3 same-padding convolution on [h, w, ci] grids via gather + matmul.
  // Weight rows are ordered (tap row, tap col, input channel).
  static Tensor<T> conv3x3(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    int64_t h = x.dim(0), wd = x.dim(1), ci = x.dim(2);
    Tensor<T> rows = concat<T>({Tensor<T>::zeros({1, wd, ci}), x, Tensor<T>::zeros({1, wd, ci})},
                               0);
    Tensor<T> padded = concat<T>(
        {Tensor<T>::zeros({h + 2, 1, ci}), rows, Tensor<T>::zeros({h + 2, 1, ci})}, 1);
    Tensor<T> flat = reshape(padded, {(h + 2) * (wd + 2), ci});
    std::vector<int64_t> idx;
    idx.reserve((size_t)(h * wd * 9));
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < wd; ++j)
        for (int64_t di = 0; di < 3; ++di)
          for (int64_t dj = 0; dj < 3; ++dj) idx.push_back((i + di) * (wd + 2) + (j + dj));
    Tensor<T> cols = reshape(gather(flat, 0, idx), {h * wd, 9 * ci});
    return reshape(add(matmul(cols, w), b), {h, wd, w.dim(1)});
  }

  // Two upsampling stages (linear -> pixel shuffle -> 3x3 conv -> gelu), then
  // a 1x1 projection to (depth, confidence), both made positive via softplus.
  std::pair<Tensor<T>, Tensor<T>> conv_head(const Tensor<T>& grid) const {
    int64_t hp = grid.dim(0), wp = grid.dim(1);
    Tensor<T> x = reshape(grid, {hp * wp, (int64_t)cfg_.dec_width});
    x = add(matmul(x, d2_up1_lin_w_), d2_up1_lin_b_);
    x = pixel_shuffle(reshape(x, {hp, wp, 16 * conv_c1_}), 4);
    x = gelu(conv3x3(x, d2_up1_conv_w_, d2_up1_conv_b_));
    int64_t h4 = hp * 4, w4 = wp * 4;
    x = reshape(x, {h4 * w4, conv_c1_});
    x = add(matmul(x, d2_up2_lin_w_), d2_up2_lin_b_);
    x = pixel_shuffle(reshape(x, {h4, w4, 4 * conv_c2_}), 2);
    x = gelu(conv3x3(x, d2_up2_conv_w_, d2_up2_conv_b_));
    int64_t h = h4 * 2, w = w4 * 2;
    x = softplus(add(matmul(reshape(x, {h * w, conv_c2_}), d2_out_w_), d2_out_b_));
    auto dc = split(reshape(x, {h, w, 2}), {1, 1}, 2);
    return {dc[0], dc[1]};
  }

  detail::Gates<T> eval_gate(const detail::GateParams<T>& g, double t0, double t1) const {
    Tensor<T> emb = concat<T>({sinusoid_embed<T>(t0), sinusoid_embed<T>(t1)}, 1);  // [1, 128]
    Tensor<T> h = gelu(add(matmul(emb, g.w1), g.b1));
    Tensor<T> raw = add(matmul(h, g.w2), g.b2);  // [1, n*C]
    Tensor<T> scales = add_scalar(reshape(raw, {(int64_t)g.n_scales * cfg_.width}), T(1));
    auto parts = split(scales, std::vector<int64_t>((size_t)g.n_scales, cfg_.width), 0);
    detail::Gates<T> out;
    out.attn = parts[0];
    out.mlp = parts[1];
    if (g.n_scales == 3) out.out = parts[2];
    return out;
  }

  // One gated pre-norm residual unit (attention + MLP). `rows` gives the token
  // count of each view block; token-parallel matmuls run per view so that view
  // permutation commutes with the computation bitwise.
  Tensor<T> sub_block(const Tensor<T>& z, const detail::BlockParams<T>& blk, int heads,
                      const std::vector<int64_t>& rows, bool global,
                      const detail::RopeTable<T>* rope, const detail::Gates<T>& gates,
                      detail::ProbeSink<T>* probe) const {
    Tensor<T> a = attention(z, blk.attn, heads, rows, global, rope, probe);
    if (blk.ls1.defined()) a = mul(a, blk.ls1);
    if (gates.attn.defined()) a = mul(a, gates.attn);
    Tensor<T> z1 = add(z, a);

    Tensor<T> xn = layer_norm(z1, blk.ln2_g, blk.ln2_b);
    auto mlp_fn = [&](const Tensor<T>& piece) {
      return add(matmul(gelu(add(matmul(piece, blk.w1), blk.b1)), blk.w2), blk.b2);
    };
    Tensor<T> m = per_view_apply(xn, rows, mlp_fn);
    if (blk.ls2.defined()) m = mul(m, blk.ls2);
    if (gates.mlp.defined()) m = mul(m, gates.mlp);
    Tensor<T> z2 = add(z1, m);
    if (gates.out.defined()) z2 = mul(z2, gates.out);
    return z2;
  }

  template <typename Fn>
  static Tensor<T> per_view_apply(const Tensor<T>& x, const std::vector<int64_t>& rows, Fn fn) {
    if (rows.size() == 1) return fn(x);
    auto pieces = split(x, rows, 0);
    std::vector<Tensor<T>> outs;
    outs.reserve(pieces.size());
    for (const auto& piece : pieces) outs.push_back(fn(piece));
    return concat(outs, 0);
  }

  static Tensor<T> per_view_linear(const Tensor<T>& x, const std::vector<int64_t>& rows,
                                   const Tensor<T>& w, const Tensor<T>& b) {
    return per_view_apply(x, rows, [&](const Tensor<T>& piece) {
      return add(matmul(piece, w), b);
    });
  }

  Tensor<T> attention(const Tensor<T>& x, const detail::AttnParams<T>& p, int heads,
                      const std::vector<int64_t>& rows, bool global,
                      const detail::RopeTable<T>* rope, detail::ProbeSink<T>* probe) const {
    int64_t c = x.dim(1), d = c / heads;
    Tensor<T> xn = layer_norm(x, p.ln_g, p.ln_b);

    std::vector<Tensor<T>> qs, ks, vs;
    auto pieces = split(xn, rows, 0);
    for (const auto& piece : pieces) {
      int64_t n = piece.dim(0);
      Tensor<T> qkv = add(matmul(piece, p.wqkv), p.bqkv);  // [n, 3C]
      Tensor<T> sp = transpose(reshape(qkv, {n, 3, (int64_t)heads, d}), {1, 2, 0, 3});
      auto qkv3 = split(sp, {1, 1, 1}, 0);  // each [1, H, n, d]
      Tensor<T> q = layer_norm(reshape(qkv3[0], {(int64_t)heads, n, d}), p.qn_g, p.qn_b);
      Tensor<T> k = layer_norm(reshape(qkv3[1], {(int64_t)heads, n, d}), p.kn_g, p.kn_b);
      Tensor<T> v = reshape(qkv3[2], {(int64_t)heads, n, d});
      if (rope) {
        q = detail::rope_rotate(q, *rope);
        k = detail::rope_rotate(k, *rope);
      }
      qs.push_back(q);
      ks.push_back(k);
      vs.push_back(v);
    }

    T scale = T(1) / std::sqrt((T)d);
    Tensor<T> mixed;  // [H, N, d]
    if (!global) {
      std::vector<Tensor<T>> outs;
      for (size_t i = 0; i < pieces.size(); ++i) {
        Tensor<T> scores = mul_scalar(matmul_nt(qs[i], ks[i]), scale);
        outs.push_back(matmul(softmax(scores), vs[i]));
      }
      mixed = concat(outs, 1);
    } else {
      Tensor<T> q = qs.size() == 1 ? qs[0] : concat(qs, 1);
      Tensor<T> k = ks.size() == 1 ? ks[0] : concat(ks, 1);
      Tensor<T> v = vs.size() == 1 ? vs[0] : concat(vs, 1);
      if (probe && !probe->captured) {
        probe->captured = true;
        probe->heads = heads;
        probe->head_dim = (int)d;
        probe->q = q.values();
        probe->k = k.values();
      }
      Tensor<T> scores = mul_scalar(matmul_nt(q, k), scale);
      mixed = matmul_segmented(softmax_segmented(scores, rows), v, rows);
    }

    int64_t n_total = x.dim(0);
    Tensor<T> merged = reshape(transpose(mixed, {1, 0, 2}), {n_total, c});
    return per_view_linear(merged, rows, p.wo, p.bo);
  }

  ModelConfig cfg_;
  ParamStore<T> ps_;

  Tensor<T> patch_embed_w_, patch_embed_b_;
  std::vector<detail::BlockParams<T>> enc_blocks_;
  Tensor<T> camera_tok_ref_, camera_tok_src_, register_tok_;
  std::vector<detail::BlockParams<T>> loop_frame_, loop_global_;
  detail::GateParams<T> gate_frame_, gate_global_;
  std::vector<detail::BlockParams<T>> dec_ray_blocks_, dec_depth_blocks_;
  Tensor<T> dec_ray_proj_w_, dec_ray_proj_b_, dec_ray_norm_g_, dec_ray_norm_b_;
  Tensor<T> dec_depth_proj_w_, dec_depth_proj_b_, dec_depth_norm_g_, dec_depth_norm_b_;
  Tensor<T> head_ray_w_, head_ray_b_, head_depth1_w_, head_depth1_b_;
  Tensor<T> head_cam_w1_, head_cam_b1_, head_cam_w2_, head_cam_b2_;
  int64_t conv_c1_ = 0, conv_c2_ = 0;
  Tensor<T> d2_up1_lin_w_, d2_up1_lin_b_, d2_up1_conv_w_, d2_up1_conv_b_;
  Tensor<T> d2_up2_lin_w_, d2_up2_lin_b_, d2_up2_conv_w_, d2_up2_conv_b_;
  Tensor<T> d2_out_w_, d2_out_b_;
};

// Public alias for the probe sink (diagnostics fill and read it).
template <typename T>
using AttnProbe = detail::ProbeSink<T>;

}  // namespace looprec
