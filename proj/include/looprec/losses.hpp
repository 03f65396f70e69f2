#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <vector>

#include "looprec/common.hpp"
#include "looprec/model.hpp"
#include "looprec/tensor.hpp"
#include "looprec/viewbatch.hpp"

namespace looprec {

struct LossWeights {
  double depth = 1.0;
  double ray = 1.0;
  double point = 1.0;
  double cam = 1.0;
  double cam_t = 1.0;
  double cam_q = 1.0;
  double cam_fov = 0.5;
  double conf_reg = 0.2;
  int grad_scales = 4;
};

template <typename T>
struct LossReport {
  Tensor<T> total;
  double total_value = 0;
  double depth = 0;
  double grad = 0;
  double ray = 0;
  double point = 0;
  double cam = 0;
  double conf = 0;
  double s_pred = 0;
  double s_gt = 0;
};

namespace detail {

template <typename T>
uint64_t scalar_bits(T v) {
  if constexpr (sizeof(T) == 4) {
    uint32_t b;
    std::memcpy(&b, &v, 4);
    return b;
  } else {
    uint64_t b;
    std::memcpy(&b, &v, 8);
    return b;
  }
}

// Adds per-view scalar tensors in an order that depends only on their values
// (ties broken by bit pattern), so the result is invariant to view order.
template <typename T>
Tensor<T> fold_scalars(std::vector<Tensor<T>> parts) {
  check(!parts.empty(), "loss: empty scalar fold");
  std::stable_sort(parts.begin(), parts.end(), [](const Tensor<T>& a, const Tensor<T>& b) {
    T va = a.values()[0], vb = b.values()[0];
    if (va != vb) return va < vb;
    return scalar_bits(va) < scalar_bits(vb);
  });
  Tensor<T> acc = parts[0];
  for (size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
  return acc;
}

template <typename T>
Tensor<T> one_minus(const Tensor<T>& mask) {
  std::vector<T> v(mask.values().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = T(1) - mask.values()[i];
  return Tensor<T>::constant(mask.shape(), v);
}

// Per-pixel Euclidean norm of a masked [H, W, C] residual; the (1 - mask)
// padding keeps sqrt away from zero at invalid pixels, the outer mask zeroes
// them again.
template <typename T>
Tensor<T> masked_pixel_norm(const Tensor<T>& diff, const Tensor<T>& maskc,
                            const Tensor<T>& mask) {
  Tensor<T> sq = sum(square(mul(diff, maskc)), -1, false);
  Tensor<T> safe = add(sq, one_minus(mask));
  return mul(sqrt(safe), mask);
}

template <typename T>
struct GradScaleLevel {
  Tensor<T> depth;       // on-graph pooled depth
  std::vector<T> mask;   // pooled validity, raw
  int64_t h = 0, w = 0;
};

template <typename T>
Tensor<T> avg_pool2(Tensor<T> x, int64_t h, int64_t w) {
  if (h % 2) {
    x = split(x, {h - 1, 1}, 0)[0];
    h -= 1;
  }
  if (w % 2) {
    x = split(x, {w - 1, 1}, 1)[0];
    w -= 1;
  }
  Tensor<T> r = reshape(x, {h / 2, 2, w / 2, 2});
  r = transpose(r, {0, 2, 1, 3});
  r = reshape(r, {(h / 2) * (w / 2), 4});
  r = mean(r, -1, false);
  return reshape(r, {h / 2, w / 2});
}

template <typename T>
GradScaleLevel<T> pool_level(const GradScaleLevel<T>& in) {
  GradScaleLevel<T> out;
  out.h = in.h / 2;
  out.w = in.w / 2;
  out.depth = avg_pool2(in.depth, in.h, in.w);
  out.mask.assign((size_t)(out.h * out.w), T(0));
  for (int64_t i = 0; i < out.h; ++i)
    for (int64_t j = 0; j < out.w; ++j) {
      T m = in.mask[(size_t)((2 * i) * in.w + 2 * j)] *
            in.mask[(size_t)((2 * i) * in.w + 2 * j + 1)] *
            in.mask[(size_t)((2 * i + 1) * in.w + 2 * j)] *
            in.mask[(size_t)((2 * i + 1) * in.w + 2 * j + 1)];
      out.mask[(size_t)(i * out.w + j)] = m;
    }
  return out;
}

// Sum of |d/dx a - d/dx b| + |d/dy ...| over valid forward differences at one
// scale, plus the valid-difference count.
template <typename T>
std::pair<Tensor<T>, int64_t> grad_level_sum(const GradScaleLevel<T>& a,
                                             const GradScaleLevel<T>& b) {
  int64_t h = a.h, w = a.w;
  auto diff_axis = [&](const Tensor<T>& d, int axis) {
    int64_t n = d.dim(axis);
    auto lo = split(d, {n - 1, 1}, axis)[0];
    auto hi = split(d, {1, n - 1}, axis)[1];
    return sub(hi, lo);
  };
  std::vector<T> mx((size_t)(h * (w - 1))), my((size_t)((h - 1) * w));
  int64_t count = 0;
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j + 1 < w; ++j) {
      T m = a.mask[(size_t)(i * w + j)] * a.mask[(size_t)(i * w + j + 1)];
      mx[(size_t)(i * (w - 1) + j)] = m;
      count += (int64_t)m;
    }
  for (int64_t i = 0; i + 1 < h; ++i)
    for (int64_t j = 0; j < w; ++j) {
      T m = a.mask[(size_t)(i * w + j)] * a.mask[(size_t)((i + 1) * w + j)];
      my[(size_t)(i * w + j)] = m;
      count += (int64_t)m;
    }
  Tensor<T> mask_x = Tensor<T>::constant({h, w - 1}, mx);
  Tensor<T> mask_y = Tensor<T>::constant({h - 1, w}, my);
  Tensor<T> sx = sum_all(mul(absval(sub(diff_axis(a.depth, 1), diff_axis(b.depth, 1))), mask_x));
  Tensor<T> sy = sum_all(mul(absval(sub(diff_axis(a.depth, 0), diff_axis(b.depth, 0))), mask_y));
  return {add(sx, sy), count};
}

}  // namespace detail

// Reciprocal mean Euclidean norm over valid points, pooled over all views.
template <typename T>
Tensor<T> norm_scale(const std::vector<Tensor<T>>& points,
                     const std::vector<Tensor<T>>& mask3,
                     const std::vector<Tensor<T>>& mask) {
  check(!points.empty(), "norm scale: no views");
  check(points.size() == mask3.size() && points.size() == mask.size(),
        "norm scale: view list size mismatch");
  std::vector<Tensor<T>> sums;
  int64_t count = 0;
  for (size_t v = 0; v < points.size(); ++v) {
    sums.push_back(sum_all(detail::masked_pixel_norm(points[v], mask3[v], mask[v])));
    for (T m : mask[v].values()) count += (int64_t)m;
  }
  check(count >= 1, "norm scale: no valid points");
  Tensor<T> mean_norm = div(detail::fold_scalars(std::move(sums)),
                            Tensor<T>::scalar((T)count));
  check(mean_norm.values()[0] > T(0), "norm scale: zero mean point norm");
  return div(Tensor<T>::scalar(T(1)), mean_norm);
}

// Multi-scale l1 loss on forward-difference depth gradients; depths must
// already carry their normalization scales.
template <typename T>
Tensor<T> grad_loss(const Tensor<T>& d_pred, const Tensor<T>& d_gt,
                    const Tensor<T>& valid, int scales = 4) {
  check(d_pred.shape() == d_gt.shape() && d_pred.shape() == valid.shape(),
        "grad loss: shape mismatch");
  detail::GradScaleLevel<T> a{d_pred, valid.values(), d_pred.dim(0), d_pred.dim(1)};
  detail::GradScaleLevel<T> b{d_gt, valid.values(), d_gt.dim(0), d_gt.dim(1)};
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (int s = 0; s < scales; ++s) {
    if (s > 0) {
      if (a.h < 4 || a.w < 4) break;
      a = detail::pool_level(a);
      b.depth = detail::avg_pool2(b.depth, b.h, b.w);
      b.h = a.h;
      b.w = a.w;
      b.mask = a.mask;
    }
    if (a.h < 2 || a.w < 2) break;
    auto [lsum, lcount] = detail::grad_level_sum(a, b);
    if (lcount > 0) total = add(total, div(lsum, Tensor<T>::scalar((T)lcount)));
  }
  return total;
}

// c * |a - b| - lambda_c * log c, averaged over valid pixels.
template <typename T>
Tensor<T> conf_loss(const Tensor<T>& c, const Tensor<T>& a, const Tensor<T>& b,
                    const Tensor<T>& valid, double lambda_c) {
  check(c.shape() == a.shape() && c.shape() == b.shape() && c.shape() == valid.shape(),
        "confidence loss: shape mismatch");
  for (T v : c.values()) check(v > T(0), "confidence loss: non-positive confidence value");
  int64_t count = 0;
  for (T m : valid.values()) count += (int64_t)m;
  check(count >= 1, "confidence loss: no valid pixels");
  Tensor<T> pix = sub(mul(c, absval(sub(a, b))), mul_scalar(log(c), (T)lambda_c));
  return div(sum_all(mul(pix, valid)), Tensor<T>::scalar((T)count));
}

// Weighted l1 camera error, averaged over views. Translation enters scaled by
// the respective normalization; the quaternion sign is resolved toward the
// prediction before the residual is taken.
template <typename T>
Tensor<T> camera_loss(const Prediction<T>& pred, const ViewBatch<T>& gt,
                      const Tensor<T>& s_pred, const Tensor<T>& s_gt,
                      const LossWeights& w) {
  int V = gt.vcount();
  std::vector<Tensor<T>> parts;
  for (int v = 0; v < V; ++v) {
    const auto& pv = pred.views[(size_t)v];
    const auto& gv = gt.views[(size_t)v];
    Tensor<T> lt = mean_all(absval(sub(mul(pv.cam_t, s_pred), mul(gv.cam_t, s_gt))));
    double dpos = 0, dneg = 0;
    for (int i = 0; i < 4; ++i) {
      dpos += std::abs((double)pv.cam_q.values()[(size_t)i] - (double)gv.cam_q.values()[(size_t)i]);
      dneg += std::abs((double)pv.cam_q.values()[(size_t)i] + (double)gv.cam_q.values()[(size_t)i]);
    }
    T sign = dpos <= dneg ? T(1) : T(-1);
    Tensor<T> lq = mean_all(absval(sub(pv.cam_q, mul_scalar(gv.cam_q, sign))));
    Tensor<T> lf = mean_all(absval(sub(pv.cam_fov, gv.cam_fov)));
    Tensor<T> term = add(add(mul_scalar(lt, (T)w.cam_t), mul_scalar(lq, (T)w.cam_q)),
                         mul_scalar(lf, (T)w.cam_fov));
    parts.push_back(term);
  }
  return div(detail::fold_scalars(std::move(parts)), Tensor<T>::scalar((T)V));
}

template <typename T>
LossReport<T> stage_loss(int stage, const Prediction<T>& pred, const ViewBatch<T>& gt,
                         const LossWeights& w = {}) {
  check(stage == 1 || stage == 2, cat("loss: stage must be 1 or 2, got ", stage));
  int V = gt.vcount();
  check((int)pred.views.size() == V, "loss: prediction/batch view count mismatch");
  check(V >= 1, "loss: empty batch");

  std::vector<Tensor<T>> pred_pts, gt_pts, mask3s, masks;
  int64_t valid_total = 0;
  for (int v = 0; v < V; ++v) {
    pred_pts.push_back(pred.views[(size_t)v].points);
    gt_pts.push_back(gt.views[(size_t)v].points);
    mask3s.push_back(gt.views[(size_t)v].mask3);
    masks.push_back(gt.views[(size_t)v].mask);
    valid_total += gt.views[(size_t)v].valid_count;
  }
  Tensor<T> s_pred = norm_scale(pred_pts, mask3s, masks);
  Tensor<T> s_gt = norm_scale(gt_pts, mask3s, masks);

  LossReport<T> rep;
  rep.s_pred = (double)s_pred.values()[0];
  rep.s_gt = (double)s_gt.values()[0];

  std::vector<Tensor<T>> point_parts;
  for (int v = 0; v < V; ++v) {
    Tensor<T> diff = sub(mul(pred_pts[(size_t)v], s_pred), mul(gt_pts[(size_t)v], s_gt));
    point_parts.push_back(sum_all(detail::masked_pixel_norm(diff, mask3s[(size_t)v], masks[(size_t)v])));
  }
  Tensor<T> point_term = div(detail::fold_scalars(std::move(point_parts)),
                             Tensor<T>::scalar((T)valid_total));
  rep.point = (double)point_term.values()[0];

  Tensor<T> total;
  if (stage == 1) {
    std::vector<Tensor<T>> depth_parts, ray_parts;
    int64_t ray_total = 0;
    for (int v = 0; v < V; ++v) {
      const auto& pv = pred.views[(size_t)v];
      const auto& gv = gt.views[(size_t)v];
      Tensor<T> ddiff = absval(sub(mul(pv.depth, s_pred), mul(gv.depth, s_gt)));
      depth_parts.push_back(sum_all(mul(ddiff, gv.mask)));
      Tensor<T> rdiff = absval(sub(mul(pv.rays, s_pred), mul(gv.rays, s_gt)));
      ray_parts.push_back(sum_all(rdiff));
      ray_total += pv.rays.numel();
    }
    Tensor<T> depth_term = div(detail::fold_scalars(std::move(depth_parts)),
                               Tensor<T>::scalar((T)valid_total));
    Tensor<T> ray_term = div(detail::fold_scalars(std::move(ray_parts)),
                             Tensor<T>::scalar((T)ray_total));
    Tensor<T> cam_term = camera_loss(pred, gt, s_pred, s_gt, w);
    rep.depth = (double)depth_term.values()[0];
    rep.ray = (double)ray_term.values()[0];
    rep.cam = (double)cam_term.values()[0];

    total = add(add(mul_scalar(depth_term, (T)w.depth), mul_scalar(ray_term, (T)w.ray)),
                add(mul_scalar(point_term, (T)w.point), mul_scalar(cam_term, (T)w.cam)));

    if (gt.synthetic_dense) {
      Tensor<T> grad_term = Tensor<T>::scalar(T(0));
      for (int s = 0; s < w.grad_scales; ++s) {
        std::vector<Tensor<T>> level_parts;
        int64_t level_count = 0;
        for (int v = 0; v < V; ++v) {
          const auto& pv = pred.views[(size_t)v];
          const auto& gv = gt.views[(size_t)v];
          detail::GradScaleLevel<T> a{mul(pv.depth, s_pred), gv.mask.values(),
                                      pv.depth.dim(0), pv.depth.dim(1)};
          detail::GradScaleLevel<T> b{mul(gv.depth, s_gt), gv.mask.values(),
                                      gv.depth.dim(0), gv.depth.dim(1)};
          for (int l = 0; l < s; ++l) {
            if (a.h < 4 || a.w < 4) break;
            a = detail::pool_level(a);
            b.depth = detail::avg_pool2(b.depth, b.h, b.w);
            b.h = a.h;
            b.w = a.w;
            b.mask = a.mask;
          }
          if (a.h < 2 || a.w < 2) continue;
          auto [lsum, lcount] = detail::grad_level_sum(a, b);
          if (lcount > 0) {
            level_parts.push_back(lsum);
            level_count += lcount;
          }
        }
        if (!level_parts.empty())
          grad_term = add(grad_term, div(detail::fold_scalars(std::move(level_parts)),
                                         Tensor<T>::scalar((T)level_count)));
      }
      rep.grad = (double)grad_term.values()[0];
      total = add(total, grad_term);
    }
  } else {
    std::vector<Tensor<T>> conf_parts;
    for (int v = 0; v < V; ++v) {
      const auto& pv = pred.views[(size_t)v];
      const auto& gv = gt.views[(size_t)v];
      check(pv.conf.defined() && pv.conf.numel() == pv.depth.numel(),
            "loss: stage 2 requires a confidence prediction");
      for (T c : pv.conf.values())
        check(c > T(0), "confidence loss: non-positive confidence value");
      Tensor<T> r = absval(sub(mul(pv.depth, s_pred), mul(gv.depth, s_gt)));
      Tensor<T> pix = sub(mul(pv.conf, r), mul_scalar(log(pv.conf), (T)w.conf_reg));
      conf_parts.push_back(sum_all(mul(pix, gv.mask)));
    }
    Tensor<T> conf_term = div(detail::fold_scalars(std::move(conf_parts)),
                              Tensor<T>::scalar((T)valid_total));
    rep.conf = (double)conf_term.values()[0];
    total = add(conf_term, mul_scalar(point_term, (T)w.point));
  }

  rep.total = total;
  rep.total_value = (double)total.values()[0];
  return rep;
}

template <typename T>
LossReport<T> total_loss(const Prediction<T>& pred, const ViewBatch<T>& gt,
                         const LossWeights& w = {}) {
  return stage_loss(1, pred, gt, w);
}

}  // namespace looprec
