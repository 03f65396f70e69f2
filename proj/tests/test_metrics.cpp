#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "looprec/metrics.hpp"

namespace {

using looprec::Camera;
using looprec::Error;
using looprec::MetricReport;

Camera random_camera(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  Camera cam;
  cam.q = Eigen::Quaterniond(n(rng), n(rng), n(rng), n(rng)).normalized();
  cam.t = {u(rng), u(rng), u(rng)};
  cam.fov = {1.0, 1.0};
  cam.height = 16;
  cam.width = 16;
  return cam;
}

double quat_rotation_angle_deg(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b) {
  Eigen::Quaterniond qa(a), qb(b);
  Eigen::Quaterniond rel = qa.conjugate() * qb;
  double v = Eigen::Vector3d(rel.x(), rel.y(), rel.z()).norm();
  return 2.0 * std::atan2(v, std::abs(rel.w())) * 180.0 / looprec::kPi;
}

double vec_angle_deg(const Eigen::Vector3d& a, const Eigen::Vector3d& b) {
  double c = a.dot(b) / (a.norm() * b.norm());
  return std::acos(std::clamp(c, -1.0, 1.0)) * 180.0 / looprec::kPi;
}

TEST(Metrics, PointmapMetricsHandCases) {
  std::vector<Eigen::Vector3d> gt{{0, 0, 1}, {1, 2, 2}, {3, 0, 4}};
  std::vector<uint8_t> valid{1, 1, 1};
  looprec::PointmapMetrics exact = looprec::pointmap_metrics(gt, gt, valid);
  EXPECT_EQ(exact.rel_l2, 0.0);
  EXPECT_EQ(exact.ir, 100.0);
  EXPECT_EQ(exact.n, 3);

  std::vector<Eigen::Vector3d> pred{{0, 0, 1.02}};
  std::vector<Eigen::Vector3d> one{{0, 0, 1.0}};
  looprec::PointmapMetrics m = looprec::pointmap_metrics(pred, one, {1});
  EXPECT_NEAR(m.rel_l2, 0.02, 1e-15);
  EXPECT_EQ(m.ir, 100.0);

  std::vector<Eigen::Vector3d> with_zero{{0, 0, 1.02}, {5, 5, 5}};
  std::vector<Eigen::Vector3d> gt_zero{{0, 0, 1.0}, {0, 0, 1e-12}};
  looprec::PointmapMetrics mz = looprec::pointmap_metrics(with_zero, gt_zero, {1, 1});
  EXPECT_EQ(mz.n, 1);
  EXPECT_NEAR(mz.rel_l2, 0.02, 1e-15);

  looprec::PointmapMetrics mv = looprec::pointmap_metrics(with_zero, gt_zero, {1, 0});
  EXPECT_EQ(mv.n, 1);

  EXPECT_THROW(looprec::pointmap_metrics(one, one, {0}), Error);
  EXPECT_THROW(looprec::pointmap_metrics(one, gt, valid), Error);
}

TEST(Metrics, PointmapMetricsMatchesBruteForce) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-4.0, 4.0);
  std::uniform_int_distribution<int> coin(0, 3);
  std::vector<Eigen::Vector3d> pred, gt;
  std::vector<uint8_t> valid;
  for (int i = 0; i < 500; ++i) {
    Eigen::Vector3d g{u(rng), u(rng), u(rng)};
    if (i % 97 == 0) g = {0, 0, 0};
    gt.push_back(g);
    pred.push_back(g + Eigen::Vector3d{0.02 * u(rng), 0.02 * u(rng), 0.02 * u(rng)});
    valid.push_back(coin(rng) > 0 ? 1 : 0);
  }
  looprec::PointmapMetrics m = looprec::pointmap_metrics(pred, gt, valid);

  double sum = 0;
  int64_t n = 0, inl = 0;
  for (size_t i = 0; i < gt.size(); ++i) {
    if (!valid[i] || gt[i].norm() < 1e-8) continue;
    double r = (pred[i] - gt[i]).norm() / gt[i].norm();
    sum += r;
    inl += r < 0.03 ? 1 : 0;
    ++n;
  }
  EXPECT_EQ(m.n, n);
  EXPECT_NEAR(m.rel_l2, sum / (double)n, 1e-10);
  EXPECT_NEAR(m.ir, 100.0 * (double)inl / (double)n, 1e-10);
}

TEST(Metrics, InlierRateCountsPointsNotTheMean) {
  std::vector<Eigen::Vector3d> gt, pred;
  std::vector<uint8_t> valid;
  for (int i = 0; i < 99; ++i) {
    gt.push_back({1, 0, 0});
    pred.push_back({1.001, 0, 0});
    valid.push_back(1);
  }
  gt.push_back({1, 0, 0});
  pred.push_back({1.5, 0, 0});
  valid.push_back(1);
  looprec::PointmapMetrics m = looprec::pointmap_metrics(pred, gt, valid);
  EXPECT_LT(m.rel_l2, 0.03);
  EXPECT_EQ(m.ir, 99.0);
}

TEST(Metrics, PoseErrorsVanishForIdenticalCameras) {
  std::mt19937_64 rng(5);
  std::vector<Camera> cams;
  for (int i = 0; i < 4; ++i) cams.push_back(random_camera(rng));
  std::vector<double> errors = looprec::pairwise_pose_errors(cams, cams);
  ASSERT_EQ(errors.size(), 6u);
  for (double e : errors) EXPECT_NEAR(e, 0.0, 1e-9);
}

TEST(Metrics, PoseErrorPicksUpPureRotationOffset) {
  Camera a;
  a.q = Eigen::Quaterniond::Identity();
  a.t = {0, 0, 0};
  Camera b = a;
  b.t = {1, 0, 0};
  std::vector<Camera> gt{a, b};

  Camera bp = b;
  bp.q = Eigen::Quaterniond(Eigen::AngleAxisd(10.0 * looprec::kPi / 180.0,
                                              Eigen::Vector3d::UnitY()));
  std::vector<Camera> pred{a, bp};
  std::vector<double> errors = looprec::pairwise_pose_errors(pred, gt);
  ASSERT_EQ(errors.size(), 1u);
  EXPECT_NEAR(errors[0], 10.0, 1e-9);
}

TEST(Metrics, ZeroBaselineConventions) {
  Camera a;
  a.q = Eigen::Quaterniond::Identity();
  a.t = {0, 0, 0};
  Camera b = a;
  b.q = Eigen::Quaterniond(Eigen::AngleAxisd(5.0 * looprec::kPi / 180.0,
                                             Eigen::Vector3d::UnitZ()));
  std::vector<Camera> gt{a, b};

  Camera bp = b;
  bp.t = {0.3, 0.4, 0.0};
  std::vector<double> with_pred_motion = looprec::pairwise_pose_errors({a, bp}, gt);
  EXPECT_NEAR(with_pred_motion[0], 0.0, 1e-9);

  Camera br = bp;
  br.q = Eigen::Quaterniond(Eigen::AngleAxisd(12.0 * looprec::kPi / 180.0,
                                              Eigen::Vector3d::UnitZ()));
  std::vector<double> rotated = looprec::pairwise_pose_errors({a, br}, gt);
  EXPECT_NEAR(rotated[0], 7.0, 1e-9);

  Camera bg = b;
  bg.t = {0, 0, 1};
  Camera bz = b;
  bz.t = {0, 0, 0};
  std::vector<double> pred_zero = looprec::pairwise_pose_errors({a, bz}, {a, bg});
  EXPECT_NEAR(pred_zero[0], 90.0, 1e-9);
}

TEST(Metrics, PoseErrorsMatchQuaternionOracle) {
  std::mt19937_64 rng(7);
  std::vector<Camera> pred, gt;
  for (int i = 0; i < 5; ++i) {
    pred.push_back(random_camera(rng));
    gt.push_back(random_camera(rng));
  }
  std::vector<double> errors = looprec::pairwise_pose_errors(pred, gt);
  ASSERT_EQ(errors.size(), 10u);

  size_t at = 0;
  for (int i = 0; i < 5; ++i)
    for (int j = i + 1; j < 5; ++j) {
      Eigen::Matrix3d rp_i = pred[(size_t)i].q.toRotationMatrix();
      Eigen::Matrix3d rp_j = pred[(size_t)j].q.toRotationMatrix();
      Eigen::Matrix3d rg_i = gt[(size_t)i].q.toRotationMatrix();
      Eigen::Matrix3d rg_j = gt[(size_t)j].q.toRotationMatrix();
      double rot = quat_rotation_angle_deg(rp_i.transpose() * rp_j, rg_i.transpose() * rg_j);
      Eigen::Vector3d tp = rp_i.transpose() * (pred[(size_t)j].t - pred[(size_t)i].t);
      Eigen::Vector3d tg = rg_i.transpose() * (gt[(size_t)j].t - gt[(size_t)i].t);
      double expect = rot;
      if (tg.norm() >= 1e-8)
        expect = std::max(rot, tp.norm() < 1e-8 ? 90.0 : vec_angle_deg(tp, tg));
      EXPECT_NEAR(errors[at], expect, 1e-9) << "pair " << i << "," << j;
      ++at;
    }

  EXPECT_THROW(looprec::pairwise_pose_errors({pred[0]}, {gt[0]}), Error);
  EXPECT_THROW(looprec::pairwise_pose_errors(pred, {gt[0]}), Error);
}

TEST(Metrics, PoseAucAnalyticCases) {
  EXPECT_EQ(looprec::pose_auc({0.0, 0.0, 0.0}, 30.0), 100.0);
  EXPECT_DOUBLE_EQ(looprec::pose_auc({15.0}, 30.0), 50.0);
  EXPECT_EQ(looprec::pose_auc({45.0}, 30.0), 0.0);
  EXPECT_DOUBLE_EQ(looprec::pose_auc({1.5}, 3.0), 50.0);
  EXPECT_THROW(looprec::pose_auc({}, 30.0), Error);
  EXPECT_THROW(looprec::pose_auc({1.0}, 0.0), Error);
}

TEST(Metrics, PoseAucMatchesTrapezoidIntegration) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.0, 60.0);
  std::vector<double> errors;
  for (int i = 0; i < 23; ++i) errors.push_back(u(rng));
  for (double tau : {3.0, 30.0}) {
    double got = looprec::pose_auc(errors, tau);
    auto cdf = [&](double th) {
      int64_t c = 0;
      for (double e : errors)
        if (e <= th) ++c;
      return (double)c / (double)errors.size();
    };
    double step = 0.001, integral = 0;
    for (double th = 0; th + step <= tau + 1e-12; th += step)
      integral += 0.5 * (cdf(th) + cdf(th + step)) * step;
    EXPECT_NEAR(got, 100.0 * integral / tau, 0.01) << "tau=" << tau;
  }
}

TEST(Metrics, PoseAucMonotoneAndPermutationInvariant) {
  std::vector<double> errors{2.0, 11.0, 27.0, 40.0};
  double base = looprec::pose_auc(errors, 30.0);
  std::vector<double> shuffled{40.0, 2.0, 27.0, 11.0};
  EXPECT_EQ(looprec::pose_auc(shuffled, 30.0), base);
  for (size_t i = 0; i < errors.size(); ++i) {
    std::vector<double> worse = errors;
    worse[i] += 5.0;
    EXPECT_LE(looprec::pose_auc(worse, 30.0), base);
  }
}

TEST(Metrics, AbsRelDepthMatchesBruteForce) {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(0.5, 4.0);
  std::vector<double> pred(64), gt(64);
  std::vector<uint8_t> valid(64);
  for (size_t i = 0; i < 64; ++i) {
    gt[i] = u(rng);
    pred[i] = gt[i] + 0.1 * (u(rng) - 2.0);
    valid[i] = i % 5 ? 1 : 0;
  }
  gt[7] = 0.0;
  double got = looprec::abs_rel_depth(pred, gt, valid);
  double sum = 0;
  int64_t n = 0;
  for (size_t i = 0; i < 64; ++i) {
    if (!valid[i] || gt[i] < 1e-8) continue;
    sum += std::abs(pred[i] - gt[i]) / gt[i];
    ++n;
  }
  EXPECT_NEAR(got, sum / (double)n, 1e-12);
  EXPECT_THROW(looprec::abs_rel_depth(pred, gt, std::vector<uint8_t>(64, 0)), Error);
}

TEST(Metrics, AlignedMetricsShrugOffSimilarityDisturbance) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  std::vector<Eigen::Vector3d> gt, pred;
  for (int i = 0; i < 200; ++i) {
    Eigen::Vector3d g{u(rng), u(rng), u(rng) + 3.0};
    gt.push_back(g);
    pred.push_back(g + Eigen::Vector3d{0.01 * u(rng), 0.01 * u(rng), 0.01 * u(rng)});
  }
  std::vector<uint8_t> valid(gt.size(), 1);

  auto aligned_metrics = [&](const std::vector<Eigen::Vector3d>& cloud) {
    looprec::Sim3 a = looprec::sim3_align(cloud, gt, {});
    std::vector<Eigen::Vector3d> mapped;
    for (const auto& p : cloud) mapped.push_back(a.apply(p));
    return looprec::pointmap_metrics(mapped, gt, valid);
  };

  looprec::PointmapMetrics base = aligned_metrics(pred);
  Eigen::Matrix3d rot =
      Eigen::AngleAxisd(0.9, Eigen::Vector3d{1, 2, -1}.normalized()).toRotationMatrix();
  std::vector<Eigen::Vector3d> disturbed;
  for (const auto& p : pred) disturbed.push_back(2.6 * (rot * p) + Eigen::Vector3d{4, -1, 7});
  looprec::PointmapMetrics moved = aligned_metrics(disturbed);
  EXPECT_NEAR(base.rel_l2, moved.rel_l2, 1e-6);
  EXPECT_NEAR(base.ir, moved.ir, 1e-6);
}

TEST(Metrics, ReportComposesAndAggregates) {
  std::mt19937_64 rng(19);
  std::vector<Eigen::Vector3d> gt, pred;
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int i = 0; i < 50; ++i) {
    Eigen::Vector3d g{u(rng), u(rng), u(rng) + 3.0};
    gt.push_back(g);
    pred.push_back(g + Eigen::Vector3d{0.01, 0, 0});
  }
  std::vector<uint8_t> valid(gt.size(), 1);
  std::vector<Camera> cams;
  for (int i = 0; i < 3; ++i) cams.push_back(random_camera(rng));
  MetricReport rep = looprec::make_report(pred, gt, valid, cams, cams);
  EXPECT_EQ(rep.n_points, 50);
  EXPECT_EQ(rep.n_pairs, 3);
  EXPECT_NEAR(rep.auc3, 100.0, 1e-6);
  EXPECT_NEAR(rep.auc30, 100.0, 1e-6);
  EXPECT_EQ(rep.pose_errors.size(), 3u);

  MetricReport a;
  a.rel_l2 = 0.02;
  a.ir = 90.0;
  a.auc3 = 40.0;
  a.auc30 = 80.0;
  a.abs_rel = 0.1;
  a.n_points = 100;
  a.n_pairs = 3;
  MetricReport b;
  b.rel_l2 = 0.04;
  b.ir = 70.0;
  b.auc3 = 20.0;
  b.auc30 = 60.0;
  b.abs_rel = 0.3;
  b.n_points = 50;
  b.n_pairs = 6;
  MetricReport mean = looprec::mean_report({a, b});
  EXPECT_DOUBLE_EQ(mean.rel_l2, 0.03);
  EXPECT_DOUBLE_EQ(mean.ir, 80.0);
  EXPECT_DOUBLE_EQ(mean.auc3, 30.0);
  EXPECT_DOUBLE_EQ(mean.auc30, 70.0);
  EXPECT_DOUBLE_EQ(mean.abs_rel, 0.2);
  EXPECT_EQ(mean.n_points, 150);
  EXPECT_EQ(mean.n_pairs, 9);
  EXPECT_THROW(looprec::mean_report({}), Error);
}

}  // namespace
