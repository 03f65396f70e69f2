#pragma once

// Pinhole cameras, per-pixel ray maps, unprojection, and the alignment /
// recovery solvers used for evaluation. Everything here is double precision
// and stays off the autodiff graph.
//
// Conventions, used consistently across the library:
//   - camera frame: x right, y down, z forward; pose (q, t) maps camera to
//     world: X_world = R(q) X_cam + t
//   - pixel (u, v) has center (u + 0.5, v + 0.5); principal point at the image
//     center; per-axis focal from per-axis fov
//   - ray direction for pixel (u, v) is R K^-1 (u+0.5, v+0.5, 1)^T, which has
//     unit z in the camera frame, so the ray parameter equals z-depth:
//     X = origin + depth * dir

#include <cmath>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include "looprec/common.hpp"

namespace looprec {

inline constexpr double kPi = 3.14159265358979323846;

inline double deg(double rad) { return rad * (180.0 / kPi); }
inline double rad(double deg) { return deg * (kPi / 180.0); }

struct Camera {
  Eigen::Quaterniond q{1, 0, 0, 0};  // camera-to-world
  Eigen::Vector3d t{0, 0, 0};
  Eigen::Vector2d fov{0, 0};  // (horizontal, vertical), radians
  int height = 0, width = 0;

  Eigen::Matrix3d rotation() const { return q.toRotationMatrix(); }

  Eigen::Vector2d focal() const {
    check(width > 0 && height > 0, "camera: empty image");
    check(fov.x() > 0 && fov.x() < kPi && fov.y() > 0 && fov.y() < kPi,
          cat("camera: fov out of range: ", fov.x(), ", ", fov.y()));
    return {0.5 * width / std::tan(0.5 * fov.x()), 0.5 * height / std::tan(0.5 * fov.y())};
  }

  // Unit norm, non-negative w (ties broken toward positive x, then y, then z).
  void canonicalize() {
    q.normalize();
    double* c = q.coeffs().data();  // x y z w
    double lead = c[3] != 0 ? c[3] : (c[0] != 0 ? c[0] : (c[1] != 0 ? c[1] : c[2]));
    if (lead < 0) q.coeffs() = -q.coeffs();
  }
};

struct RayMap {
  int height = 0, width = 0;
  std::vector<Eigen::Vector3d> origin, dir;  // row-major, height*width each

  int64_t pixels() const { return (int64_t)height * width; }
};

struct DepthMap {
  int height = 0, width = 0;
  std::vector<double> d;
};

struct ValidMask {
  int height = 0, width = 0;
  std::vector<uint8_t> m;

  int64_t count() const {
    int64_t c = 0;
    for (uint8_t b : m) c += b ? 1 : 0;
    return c;
  }
};

struct PointMap {
  int height = 0, width = 0;
  std::vector<Eigen::Vector3d> p;  // invalid pixels hold (0,0,0)
};

inline RayMap rays_from_camera(const Camera& cam) {
  Eigen::Vector2d f = cam.focal();
  Eigen::Matrix3d r = cam.rotation();
  double cx = 0.5 * cam.width, cy = 0.5 * cam.height;
  RayMap rm;
  rm.height = cam.height;
  rm.width = cam.width;
  rm.origin.assign((size_t)rm.pixels(), cam.t);
  rm.dir.resize((size_t)rm.pixels());
  for (int v = 0; v < cam.height; ++v)
    for (int u = 0; u < cam.width; ++u) {
      Eigen::Vector3d dc((u + 0.5 - cx) / f.x(), (v + 0.5 - cy) / f.y(), 1.0);
      rm.dir[(size_t)(v * cam.width + u)] = r * dc;
    }
  return rm;
}

inline PointMap unproject(const RayMap& rays, const DepthMap& depth, const ValidMask& valid) {
  check(rays.height == depth.height && rays.width == depth.width &&
            rays.height == valid.height && rays.width == valid.width,
        "unproject: size mismatch");
  PointMap pm;
  pm.height = rays.height;
  pm.width = rays.width;
  pm.p.assign((size_t)rays.pixels(), Eigen::Vector3d::Zero());
  for (int64_t i = 0; i < rays.pixels(); ++i)
    if (valid.m[(size_t)i])
      pm.p[(size_t)i] = rays.origin[(size_t)i] + depth.d[(size_t)i] * rays.dir[(size_t)i];
  return pm;
}

// Projects a world point to continuous pixel coordinates (pixel (u,v) has
// center (u+0.5, v+0.5)). Points behind the camera are an error.
inline Eigen::Vector2d project(const Camera& cam, const Eigen::Vector3d& x) {
  Eigen::Vector3d xc = cam.rotation().transpose() * (x - cam.t);
  check(xc.z() > 0, "project: point not in front of camera");
  Eigen::Vector2d f = cam.focal();
  return {f.x() * xc.x() / xc.z() + 0.5 * cam.width, f.y() * xc.y() / xc.z() + 0.5 * cam.height};
}

// Recovers a pinhole camera from a dense ray map.
//
// Rotation: orthogonal Procrustes between the canonical unit-focal pixel
// directions c_uv = (u+0.5-cx, v+0.5-cy, 1) and the map's directions. The
// half-pixel grid is symmetric about the principal point, which keeps the
// canonical second-moment matrix diagonal, so per-axis focal scaling is
// absorbed by the diagonal factor of the cross-covariance's SVD and the
// Procrustes optimum is exact for any pinhole-consistent map. Focals then
// come from per-axis least squares on the derotated, z-normalized directions,
// and position is the mean ray origin.
inline Camera camera_from_rays(const RayMap& rays) {
  check(rays.height >= 2 && rays.width >= 2, "camera_from_rays: image too small");
  double cx = 0.5 * rays.width, cy = 0.5 * rays.height;
  Eigen::Matrix3d h = Eigen::Matrix3d::Zero();
  for (int v = 0; v < rays.height; ++v)
    for (int u = 0; u < rays.width; ++u) {
      Eigen::Vector3d c(u + 0.5 - cx, v + 0.5 - cy, 1.0);
      h += c * rays.dir[(size_t)(v * rays.width + u)].transpose();
    }
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  check(svd.singularValues()(2) > 1e-12 * svd.singularValues()(0),
        "camera_from_rays: degenerate direction field");
  Eigen::Matrix3d u = svd.matrixU(), v = svd.matrixV();
  Eigen::Matrix3d s = Eigen::Matrix3d::Identity();
  s(2, 2) = (v * u.transpose()).determinant() < 0 ? -1.0 : 1.0;
  Eigen::Matrix3d r = v * s * u.transpose();

  // e = R^T dir should be ((u+0.5-cx)/fx, (v+0.5-cy)/fy, 1) up to noise.
  double sxx = 0, sxu = 0, syy = 0, syv = 0;
  for (int vv = 0; vv < rays.height; ++vv)
    for (int uu = 0; uu < rays.width; ++uu) {
      Eigen::Vector3d e = r.transpose() * rays.dir[(size_t)(vv * rays.width + uu)];
      check(std::abs(e.z()) > 1e-12, "camera_from_rays: direction parallel to image plane");
      double xu = uu + 0.5 - cx, yv = vv + 0.5 - cy;
      sxu += xu * (e.x() / e.z());
      sxx += xu * xu;
      syv += yv * (e.y() / e.z());
      syy += yv * yv;
    }
  double inv_fx = sxu / sxx, inv_fy = syv / syy;
  check(inv_fx > 0 && inv_fy > 0, "camera_from_rays: non-positive recovered focal");

  Camera cam;
  cam.height = rays.height;
  cam.width = rays.width;
  cam.q = Eigen::Quaterniond(r);
  cam.fov = {2.0 * std::atan(0.5 * rays.width * inv_fx),
             2.0 * std::atan(0.5 * rays.height * inv_fy)};
  Eigen::Vector3d t = Eigen::Vector3d::Zero();
  for (const auto& o : rays.origin) t += o;
  cam.t = t / (double)rays.pixels();
  cam.canonicalize();
  return cam;
}

// Similarity transform x -> s R x + t.
struct Sim3 {
  double s = 1.0;
  Eigen::Matrix3d r = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();

  Eigen::Vector3d apply(const Eigen::Vector3d& x) const { return s * (r * x) + t; }
};

// Weighted least-squares similarity aligning src onto dst (Umeyama with an
// explicit sign fix so the rotation always has det +1, even for reflected
// inputs). Weights default to 1. Degenerate configurations (fewer than 3
// effective points, or src collapsed to a point or a line) are an error.
inline Sim3 sim3_align(const std::vector<Eigen::Vector3d>& src,
                       const std::vector<Eigen::Vector3d>& dst,
                       const std::vector<double>& weights = {}) {
  check(src.size() == dst.size(), "sim3_align: size mismatch");
  check(weights.empty() || weights.size() == src.size(), "sim3_align: weights size mismatch");
  double wsum = 0;
  Eigen::Vector3d mu_s = Eigen::Vector3d::Zero(), mu_d = Eigen::Vector3d::Zero();
  int64_t eff = 0;
  for (size_t i = 0; i < src.size(); ++i) {
    double w = weights.empty() ? 1.0 : weights[i];
    check(w >= 0, "sim3_align: negative weight");
    if (w == 0) continue;
    ++eff;
    wsum += w;
    mu_s += w * src[i];
    mu_d += w * dst[i];
  }
  check(eff >= 3 && wsum > 0, "sim3_align: fewer than 3 effective points");
  mu_s /= wsum;
  mu_d /= wsum;

  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  double var_s = 0;
  for (size_t i = 0; i < src.size(); ++i) {
    double w = weights.empty() ? 1.0 : weights[i];
    if (w == 0) continue;
    Eigen::Vector3d xs = src[i] - mu_s, xd = dst[i] - mu_d;
    cov += w * xd * xs.transpose();
    var_s += w * xs.squaredNorm();
  }
  cov /= wsum;
  var_s /= wsum;
  check(var_s > 1e-18, "sim3_align: source cloud collapsed to a point");

  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d& sv = svd.singularValues();
  check(sv(1) > 1e-12 * std::max(sv(0), 1e-300), "sim3_align: degenerate (collinear) cloud");
  Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0) d(2, 2) = -1;

  Sim3 out;
  out.r = svd.matrixU() * d * svd.matrixV().transpose();
  out.s = (sv(0) * d(0, 0) + sv(1) * d(1, 1) + sv(2) * d(2, 2)) / var_s;
  check(out.s > 0, "sim3_align: non-positive scale");
  out.t = mu_d - out.s * (out.r * mu_s);
  return out;
}

// atan2 of the skew-part magnitude against the trace keeps the angle
// well-conditioned near 0 and pi, where acos(trace) loses half the digits.
inline double rotation_angle_deg(const Eigen::Matrix3d& ra, const Eigen::Matrix3d& rb) {
  Eigen::Matrix3d r = ra.transpose() * rb;
  Eigen::Vector3d skew{r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1)};
  double s = 0.5 * skew.norm();
  double c = 0.5 * (r.trace() - 1.0);
  return deg(std::atan2(s, c));
}

// Angle between direction vectors; callers must guard near-zero norms.
inline double translation_angle_deg(const Eigen::Vector3d& a, const Eigen::Vector3d& b) {
  check(a.norm() > 0 && b.norm() > 0, "translation_angle: zero-length vector");
  return deg(std::atan2(a.cross(b).norm(), a.dot(b)));
}

// Re-expresses cameras relative to the first one (its pose becomes exactly
// identity).
inline std::vector<Camera> make_relative(const std::vector<Camera>& cams) {
  check(!cams.empty(), "make_relative: no cameras");
  Eigen::Matrix3d r0 = cams[0].rotation();
  Eigen::Vector3d t0 = cams[0].t;
  std::vector<Camera> out = cams;
  for (size_t i = 0; i < cams.size(); ++i) {
    out[i].q = Eigen::Quaterniond(Eigen::Matrix3d(r0.transpose() * cams[i].rotation()));
    out[i].t = r0.transpose() * (cams[i].t - t0);
    out[i].canonicalize();
  }
  out[0].q = Eigen::Quaterniond::Identity();
  out[0].t = Eigen::Vector3d::Zero();
  return out;
}

}  // namespace looprec
