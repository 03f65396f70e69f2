#include "looprec/geometry.hpp"

#include <cmath>
#include <random>

#include <gtest/gtest.h>

using namespace looprec;

namespace {

Camera random_camera(std::mt19937_64& rng, int h = 12, int w = 16) {
  std::uniform_real_distribution<double> u(-1, 1);
  Camera cam;
  cam.q = Eigen::Quaterniond(u(rng) + 1.5, u(rng), u(rng), u(rng));
  cam.canonicalize();
  cam.t = {3 * u(rng), 3 * u(rng), 3 * u(rng)};
  cam.fov = {rad(40 + 30 * (u(rng) + 1) / 2), rad(35 + 30 * (u(rng) + 1) / 2)};
  cam.height = h;
  cam.width = w;
  return cam;
}

TEST(Geometry, FocalMatchesPinholeFormula) {
  Camera cam;
  cam.width = 64;
  cam.height = 48;
  cam.fov = {rad(60), rad(45)};
  Eigen::Vector2d f = cam.focal();
  EXPECT_NEAR(f.x(), 32.0 / std::tan(rad(30)), 1e-12);
  EXPECT_NEAR(f.y(), 24.0 / std::tan(rad(22.5)), 1e-12);
  cam.fov = {0, rad(45)};
  EXPECT_THROW(cam.focal(), Error);
}

TEST(Geometry, QuaternionCanonicalSignAndNorm) {
  Camera cam;
  cam.q = Eigen::Quaterniond(-2, 0.4, -0.2, 0.8);
  cam.canonicalize();
  EXPECT_GT(cam.q.w(), 0);
  EXPECT_NEAR(cam.q.norm(), 1.0, 1e-14);
  cam.q = Eigen::Quaterniond(0, -0.6, 0, 0.8);
  cam.canonicalize();
  EXPECT_GT(cam.q.x(), 0);
}

TEST(Geometry, CameraRayRoundTrip) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    Camera cam = random_camera(rng);
    RayMap rm = rays_from_camera(cam);
    Camera rec = camera_from_rays(rm);
    EXPECT_NEAR(rec.t.x(), cam.t.x(), 1e-9);
    EXPECT_NEAR(rec.t.y(), cam.t.y(), 1e-9);
    EXPECT_NEAR(rec.t.z(), cam.t.z(), 1e-9);
    EXPECT_NEAR(rec.fov.x(), cam.fov.x(), 1e-9);
    EXPECT_NEAR(rec.fov.y(), cam.fov.y(), 1e-9);
    EXPECT_LT(rotation_angle_deg(rec.rotation(), cam.rotation()), 1e-7);
  }
}

TEST(Geometry, UnprojectProjectRoundTrip) {
  std::mt19937_64 rng(2);
  Camera cam = random_camera(rng);
  RayMap rm = rays_from_camera(cam);
  DepthMap dm{cam.height, cam.width, {}};
  ValidMask vm{cam.height, cam.width, {}};
  std::uniform_real_distribution<double> ud(0.5, 4.0);
  dm.d.resize((size_t)rm.pixels());
  vm.m.resize((size_t)rm.pixels());
  for (int64_t i = 0; i < rm.pixels(); ++i) {
    dm.d[(size_t)i] = ud(rng);
    vm.m[(size_t)i] = i % 3 != 0;
  }
  PointMap pm = unproject(rm, dm, vm);
  for (int v = 0; v < cam.height; ++v)
    for (int u = 0; u < cam.width; ++u) {
      size_t i = (size_t)(v * cam.width + u);
      if (!vm.m[i]) {
        EXPECT_EQ(pm.p[i], Eigen::Vector3d::Zero());
        continue;
      }
      Eigen::Vector2d px = project(cam, pm.p[i]);
      EXPECT_NEAR(px.x(), u + 0.5, 1e-8);
      EXPECT_NEAR(px.y(), v + 0.5, 1e-8);
    }
}

TEST(Geometry, ProjectBehindCameraThrows) {
  Camera cam;
  cam.width = cam.height = 8;
  cam.fov = {rad(60), rad(60)};
  EXPECT_THROW(project(cam, {0, 0, -1}), Error);
}

TEST(Geometry, Sim3RecoversKnownTransform) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 10; ++trial) {
    Eigen::Quaterniond q(u(rng) + 1.5, u(rng), u(rng), u(rng));
    q.normalize();
    Eigen::Matrix3d r = q.toRotationMatrix();
    double s = 0.3 + 2.0 * (u(rng) + 1) / 2;
    Eigen::Vector3d t(2 * u(rng), 2 * u(rng), 2 * u(rng));
    std::vector<Eigen::Vector3d> src, dst;
    for (int i = 0; i < 40; ++i) {
      Eigen::Vector3d p(u(rng), u(rng), u(rng));
      src.push_back(p);
      dst.push_back(s * (r * p) + t);
    }
    Sim3 a = sim3_align(src, dst);
    EXPECT_NEAR(a.s, s, 1e-10);
    EXPECT_LT((a.r - r).norm(), 1e-10);
    EXPECT_LT((a.t - t).norm(), 1e-9);
    for (size_t i = 0; i < src.size(); ++i)
      EXPECT_LT((a.apply(src[i]) - dst[i]).norm(), 1e-9);
  }
}

TEST(Geometry, Sim3RotationNeverReflects) {
  std::vector<Eigen::Vector3d> src, dst;
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int i = 0; i < 30; ++i) {
    Eigen::Vector3d p(u(rng), u(rng), u(rng));
    src.push_back(p);
    dst.push_back({-p.x(), p.y(), p.z()});
  }
  Sim3 a = sim3_align(src, dst);
  EXPECT_NEAR(a.r.determinant(), 1.0, 1e-10);
}

TEST(Geometry, Sim3ZeroWeightIgnoresOutlier) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<Eigen::Vector3d> src, dst;
  std::vector<double> w;
  for (int i = 0; i < 20; ++i) {
    Eigen::Vector3d p(u(rng), u(rng), u(rng));
    src.push_back(p);
    dst.push_back(1.7 * p + Eigen::Vector3d(1, 2, 3));
    w.push_back(1.0);
  }
  src.push_back({100, -50, 30});
  dst.push_back({-999, 999, 0});
  w.push_back(0.0);
  Sim3 a = sim3_align(src, dst, w);
  EXPECT_NEAR(a.s, 1.7, 1e-10);
  EXPECT_LT((a.t - Eigen::Vector3d(1, 2, 3)).norm(), 1e-9);
}

TEST(Geometry, Sim3DegenerateInputsThrow) {
  std::vector<Eigen::Vector3d> two{{0, 0, 0}, {1, 1, 1}};
  EXPECT_THROW(sim3_align(two, two), Error);
  std::vector<Eigen::Vector3d> point(5, Eigen::Vector3d(1, 2, 3));
  EXPECT_THROW(sim3_align(point, point), Error);
  std::vector<Eigen::Vector3d> line;
  for (int i = 0; i < 5; ++i) line.push_back({(double)i, 2.0 * i, -1.0 * i});
  EXPECT_THROW(sim3_align(line, line), Error);
  std::vector<Eigen::Vector3d> a{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
  std::vector<Eigen::Vector3d> b{{0, 0, 0}, {1, 0, 0}};
  EXPECT_THROW(sim3_align(a, b), Error);
}

TEST(Geometry, RotationAngleOracle) {
  for (double theta : {0.0, 5.0, 45.0, 90.0, 179.0}) {
    Eigen::AngleAxisd aa(rad(theta), Eigen::Vector3d(1, 2, -1).normalized());
    EXPECT_NEAR(rotation_angle_deg(Eigen::Matrix3d::Identity(), aa.toRotationMatrix()), theta,
                1e-9);
  }
  Eigen::AngleAxisd a(rad(30), Eigen::Vector3d::UnitZ());
  Eigen::AngleAxisd b(rad(75), Eigen::Vector3d::UnitZ());
  EXPECT_NEAR(rotation_angle_deg(a.toRotationMatrix(), b.toRotationMatrix()), 45.0, 1e-9);
}

TEST(Geometry, TranslationAngleOracle) {
  EXPECT_NEAR(translation_angle_deg({1, 0, 0}, {0, 2, 0}), 90.0, 1e-12);
  EXPECT_NEAR(translation_angle_deg({1, 1, 0}, {1, 0, 0}), 45.0, 1e-9);
  EXPECT_NEAR(translation_angle_deg({3, 0, 0}, {7, 0, 0}), 0.0, 1e-12);
  EXPECT_THROW(translation_angle_deg({0, 0, 0}, {1, 0, 0}), Error);
}

TEST(Geometry, MakeRelativePreservesPairwiseGeometry) {
  std::mt19937_64 rng(6);
  std::vector<Camera> cams;
  for (int i = 0; i < 4; ++i) cams.push_back(random_camera(rng));
  std::vector<Camera> rel = make_relative(cams);
  EXPECT_TRUE(rel[0].q.isApprox(Eigen::Quaterniond::Identity()));
  EXPECT_EQ(rel[0].t, Eigen::Vector3d::Zero());
  for (size_t i = 0; i < cams.size(); ++i)
    for (size_t j = i + 1; j < cams.size(); ++j) {
      Eigen::Matrix3d rij_abs = cams[i].rotation().transpose() * cams[j].rotation();
      Eigen::Matrix3d rij_rel = rel[i].rotation().transpose() * rel[j].rotation();
      EXPECT_LT(rotation_angle_deg(rij_abs, rij_rel), 1e-9);
      Eigen::Vector3d bij_abs = cams[i].rotation().transpose() * (cams[j].t - cams[i].t);
      Eigen::Vector3d bij_rel = rel[i].rotation().transpose() * (rel[j].t - rel[i].t);
      EXPECT_LT((bij_abs - bij_rel).norm(), 1e-9);
    }
}

TEST(Geometry, CameraFromRaysRejectsDegenerateInput) {
  RayMap tiny;
  tiny.height = 1;
  tiny.width = 1;
  tiny.origin.assign(1, Eigen::Vector3d::Zero());
  tiny.dir.assign(1, Eigen::Vector3d::UnitZ());
  EXPECT_THROW(camera_from_rays(tiny), Error);

  RayMap flat;
  flat.height = 4;
  flat.width = 4;
  flat.origin.assign(16, Eigen::Vector3d::Zero());
  flat.dir.assign(16, Eigen::Vector3d::Zero());
  EXPECT_THROW(camera_from_rays(flat), Error);
}

}  // namespace
