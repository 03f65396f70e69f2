#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "looprec/common.hpp"
#include "looprec/geometry.hpp"

namespace looprec {

struct MetricReport {
  double rel_l2 = 0;
  double ir = 0;
  double auc3 = 0;
  double auc30 = 0;
  double abs_rel = 0;
  int64_t n_points = 0;
  int64_t n_pairs = 0;
  std::vector<double> pose_errors;
};

struct PointmapMetrics {
  double rel_l2 = 0;
  double ir = 0;
  int64_t n = 0;
};

// Mean relative error and inlier rate of an aligned point cloud; ground-truth
// points with near-zero norm are excluded.
inline PointmapMetrics pointmap_metrics(const std::vector<Eigen::Vector3d>& pred,
                                        const std::vector<Eigen::Vector3d>& gt,
                                        const std::vector<uint8_t>& valid) {
  check(pred.size() == gt.size() && pred.size() == valid.size(),
        "pointmap metrics: size mismatch");
  double sum = 0;
  int64_t n = 0, inliers = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    if (!valid[i]) continue;
    double ng = gt[i].norm();
    if (ng < 1e-8) continue;
    double r = (pred[i] - gt[i]).norm() / ng;
    sum += r;
    if (r < 0.03) ++inliers;
    ++n;
  }
  check(n >= 1, "pointmap metrics: no valid points");
  return {sum / (double)n, 100.0 * (double)inliers / (double)n, n};
}

// Per unordered view pair: max of relative-rotation angle and relative
// translation direction angle, in degrees.
inline std::vector<double> pairwise_pose_errors(const std::vector<Camera>& pred,
                                                const std::vector<Camera>& gt) {
  check(pred.size() == gt.size(), "pose errors: camera count mismatch");
  check(pred.size() >= 2, "pose errors: need at least 2 views");
  int V = (int)pred.size();
  std::vector<double> errors;
  for (int i = 0; i < V; ++i)
    for (int j = i + 1; j < V; ++j) {
      Eigen::Matrix3d rp_i = pred[(size_t)i].q.toRotationMatrix();
      Eigen::Matrix3d rp_j = pred[(size_t)j].q.toRotationMatrix();
      Eigen::Matrix3d rg_i = gt[(size_t)i].q.toRotationMatrix();
      Eigen::Matrix3d rg_j = gt[(size_t)j].q.toRotationMatrix();
      double rot = rotation_angle_deg(rp_i.transpose() * rp_j, rg_i.transpose() * rg_j);
      Eigen::Vector3d tp = rp_i.transpose() * (pred[(size_t)j].t - pred[(size_t)i].t);
      Eigen::Vector3d tg = rg_i.transpose() * (gt[(size_t)j].t - gt[(size_t)i].t);
      double err = rot;
      if (tg.norm() >= 1e-8) {
        double trans = tp.norm() < 1e-8 ? 90.0 : translation_angle_deg(tp, tg);
        err = std::max(rot, trans);
      }
      errors.push_back(err);
    }
  return errors;
}

// 100 x mean over pairs of max(0, 1 - e / tau): the exact area under the
// cumulative accuracy curve on [0, tau], normalized.
inline double pose_auc(const std::vector<double>& errors, double tau) {
  check(tau > 0, "pose auc: threshold must be positive");
  check(!errors.empty(), "pose auc: empty error list");
  double sum = 0;
  for (double e : errors) sum += std::max(0.0, 1.0 - e / tau);
  return 100.0 * sum / (double)errors.size();
}

inline double abs_rel_depth(const std::vector<double>& pred, const std::vector<double>& gt,
                            const std::vector<uint8_t>& valid) {
  check(pred.size() == gt.size() && pred.size() == valid.size(), "abs rel: size mismatch");
  double sum = 0;
  int64_t n = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    if (!valid[i] || gt[i] < 1e-8) continue;
    sum += std::abs(pred[i] - gt[i]) / gt[i];
    ++n;
  }
  check(n >= 1, "abs rel: no valid pixels");
  return sum / (double)n;
}

inline MetricReport make_report(const std::vector<Eigen::Vector3d>& pred_points,
                                const std::vector<Eigen::Vector3d>& gt_points,
                                const std::vector<uint8_t>& valid,
                                const std::vector<Camera>& pred_cams,
                                const std::vector<Camera>& gt_cams) {
  MetricReport rep;
  PointmapMetrics pm = pointmap_metrics(pred_points, gt_points, valid);
  rep.rel_l2 = pm.rel_l2;
  rep.ir = pm.ir;
  rep.n_points = pm.n;
  rep.pose_errors = pairwise_pose_errors(pred_cams, gt_cams);
  rep.n_pairs = (int64_t)rep.pose_errors.size();
  rep.auc3 = pose_auc(rep.pose_errors, 3.0);
  rep.auc30 = pose_auc(rep.pose_errors, 30.0);
  return rep;
}

inline MetricReport mean_report(const std::vector<MetricReport>& reports) {
  check(!reports.empty(), "metrics: no reports to aggregate");
  MetricReport agg;
  for (const MetricReport& r : reports) {
    agg.rel_l2 += r.rel_l2;
    agg.ir += r.ir;
    agg.auc3 += r.auc3;
    agg.auc30 += r.auc30;
    agg.abs_rel += r.abs_rel;
    agg.n_points += r.n_points;
    agg.n_pairs += r.n_pairs;
  }
  double n = (double)reports.size();
  agg.rel_l2 /= n;
  agg.ir /= n;
  agg.auc3 /= n;
  agg.auc30 /= n;
  agg.abs_rel /= n;
  return agg;
}

}  // namespace looprec
