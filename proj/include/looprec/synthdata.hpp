#pragma once

// Procedural scene generation with analytic ground truth, the .djvw scene
// container, dataset manifests, and temperature-weighted shard sampling.
//
// Scenes are ray-traced fields of spheres and disc planes with checkerboard
// Lambertian shading. Cameras orbit the scene and every stored pose is
// relative to view 0 (whose pose is exactly identity). Depth is camera-frame
// z-depth, matching the unit-z ray convention in geometry.hpp, and background
// pixels are invalid.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "looprec/binary_io.hpp"
#include "looprec/common.hpp"
#include "looprec/geometry.hpp"

namespace looprec {

// ---------------------------------------------------------------------------
// records and the .djvw container
// ---------------------------------------------------------------------------

struct ViewRecord {
  int height = 0, width = 0;
  std::vector<uint8_t> image;  // h*w*3, RGB
  std::vector<float> depth;    // h*w, z-depth, arbitrary at invalid pixels
  std::vector<uint8_t> mask;   // h*w, 0/1 (bit-packed on disk)
  Camera cam;                  // relative to view 0

  DepthMap depth_map() const {
    DepthMap d;
    d.height = height;
    d.width = width;
    d.d.assign(depth.begin(), depth.end());
    return d;
  }
  ValidMask valid_mask() const {
    ValidMask v;
    v.height = height;
    v.width = width;
    v.m = mask;
    return v;
  }
};

struct SceneRecord {
  uint64_t seed = 0;
  bool synthetic_dense = true;  // dense analytic depth (enables the gradient loss)
  std::string generator = "looprec-synth";
  std::string units = "scene";
  std::vector<ViewRecord> views;
};

namespace detail {

constexpr uint32_t kSceneVersion = 1;

inline void put_section(ByteWriter& w, const char t[4], const ByteWriter& payload) {
  w.tag(t);
  w.u64(payload.size());
  w.bytes(payload.data().data(), payload.size());
}

}  // namespace detail

inline void save_scene(const SceneRecord& rec, const std::string& path) {
  check(!rec.views.empty(), "save_scene: no views");
  ByteWriter w;
  w.tag("DJVW");
  w.u32(detail::kSceneVersion);
  w.u32((uint32_t)rec.views.size());

  ByteWriter info;
  info.u64(rec.seed);
  info.u8(rec.synthetic_dense ? 1 : 0);
  info.str(rec.generator);
  info.str(rec.units);
  detail::put_section(w, "INFO", info);

  for (const ViewRecord& v : rec.views) {
    check((int64_t)v.image.size() == (int64_t)v.height * v.width * 3, "save_scene: image size");
    check((int64_t)v.depth.size() == (int64_t)v.height * v.width, "save_scene: depth size");
    check((int64_t)v.mask.size() == (int64_t)v.height * v.width, "save_scene: mask size");

    ByteWriter img;
    img.u32((uint32_t)v.height);
    img.u32((uint32_t)v.width);
    img.bytes(v.image.data(), v.image.size());
    detail::put_section(w, "IMG8", img);

    ByteWriter dp;
    dp.u32((uint32_t)v.height);
    dp.u32((uint32_t)v.width);
    for (float d : v.depth) dp.f32(d);
    detail::put_section(w, "DPTH", dp);

    ByteWriter mk;  // bit-packed, LSB first
    mk.u32((uint32_t)v.height);
    mk.u32((uint32_t)v.width);
    uint8_t acc = 0;
    for (size_t i = 0; i < v.mask.size(); ++i) {
      if (v.mask[i]) acc |= (uint8_t)(1u << (i % 8));
      if (i % 8 == 7) {
        mk.u8(acc);
        acc = 0;
      }
    }
    if (v.mask.size() % 8 != 0) mk.u8(acc);
    detail::put_section(w, "MASK", mk);

    ByteWriter cm;
    cm.f64(v.cam.q.w());
    cm.f64(v.cam.q.x());
    cm.f64(v.cam.q.y());
    cm.f64(v.cam.q.z());
    cm.f64(v.cam.t.x());
    cm.f64(v.cam.t.y());
    cm.f64(v.cam.t.z());
    cm.f64(v.cam.fov.x());
    cm.f64(v.cam.fov.y());
    detail::put_section(w, "CAM0", cm);
  }
  w.save(path);
}

inline SceneRecord load_scene(const std::string& path) {
  ByteReader r = ByteReader::from_file(path);
  check(r.tag4("magic") == "DJVW", cat(path, ": bad magic, not a scene container"));
  uint32_t version = r.u32("version");
  check(version == detail::kSceneVersion,
        cat(path, ": unsupported scene container version ", version));
  uint32_t nviews = r.u32("view count");
  check(nviews >= 1 && nviews <= 4096, cat(path, ": implausible view count ", nviews));

  SceneRecord rec;
  auto read_section = [&](const char* expect) -> size_t {
    size_t at = r.pos();
    std::string t = r.tag4();
    check(t == expect,
          cat(path, ": expected section ", expect, " at byte offset ", at, ", found '", t, "'"));
    uint64_t len = r.u64("section length");
    check(len <= r.remaining(), cat(path, ": section ", expect, " at byte offset ", at,
                                    " declares ", len, " bytes but only ", r.remaining(),
                                    " remain"));
    return r.pos() + (size_t)len;
  };
  auto end_section = [&](const char* name, size_t end) {
    check(r.pos() == end, cat(path, ": section ", name, " has ", end - r.pos(),
                              " unread trailing bytes at offset ", r.pos()));
  };

  size_t end = read_section("INFO");
  rec.seed = r.u64("seed");
  rec.synthetic_dense = r.u8("dense flag") != 0;
  rec.generator = r.str("generator");
  rec.units = r.str("units");
  end_section("INFO", end);

  for (uint32_t i = 0; i < nviews; ++i) {
    ViewRecord v;
    end = read_section("IMG8");
    v.height = (int)r.u32("image height");
    v.width = (int)r.u32("image width");
    check(v.height >= 1 && v.width >= 1 && (int64_t)v.height * v.width <= (64 << 20),
          cat(path, ": implausible image size ", v.height, "x", v.width));
    v.image.resize((size_t)v.height * v.width * 3);
    r.bytes(v.image.data(), v.image.size(), "image pixels");
    end_section("IMG8", end);

    end = read_section("DPTH");
    check((int)r.u32("depth height") == v.height && (int)r.u32("depth width") == v.width,
          cat(path, ": depth size mismatch in view ", i));
    v.depth.resize((size_t)v.height * v.width);
    for (auto& d : v.depth) d = r.f32("depth value");
    end_section("DPTH", end);

    end = read_section("MASK");
    check((int)r.u32("mask height") == v.height && (int)r.u32("mask width") == v.width,
          cat(path, ": mask size mismatch in view ", i));
    size_t nbits = (size_t)v.height * v.width;
    v.mask.resize(nbits);
    uint8_t acc = 0;
    for (size_t j = 0; j < nbits; ++j) {
      if (j % 8 == 0) acc = r.u8("mask byte");
      v.mask[j] = (acc >> (j % 8)) & 1u;
    }
    end_section("MASK", end);

    end = read_section("CAM0");
    double qw = r.f64(), qx = r.f64(), qy = r.f64(), qz = r.f64();
    v.cam.q = Eigen::Quaterniond(qw, qx, qy, qz);
    v.cam.t = {r.f64(), r.f64(), r.f64()};
    v.cam.fov = {r.f64(), r.f64()};
    v.cam.height = v.height;
    v.cam.width = v.width;
    check(std::abs(v.cam.q.norm() - 1.0) < 1e-6, cat(path, ": non-unit quaternion in view ", i));
    end_section("CAM0", end);

    for (float d : v.depth)
      check(std::isfinite(d), cat(path, ": non-finite depth in view ", i));
    for (size_t j = 0; j < nbits; ++j)
      check(!v.mask[j] || v.depth[j] > 0.0f,
            cat(path, ": non-positive depth at valid pixel in view ", i));
    rec.views.push_back(std::move(v));
  }
  check(r.eof(), cat(path, ": ", r.remaining(), " trailing bytes at offset ", r.pos()));
  return rec;
}

// ---------------------------------------------------------------------------
// scene generation
// ---------------------------------------------------------------------------

struct SpherePrim {
  Eigen::Vector3d center;
  double radius;
};

struct PlanePrim {
  Eigen::Vector3d point, normal;  // disc of given extent around point
  Eigen::Vector3d e1, e2;         // in-plane basis for texturing
  double extent;
};

struct Material {
  Eigen::Vector3d albedo_a, albedo_b;
  double checker_scale;
};

// All primitives expressed in the record frame (view 0).
struct GeneratedScene {
  SceneRecord record;
  std::vector<SpherePrim> spheres;
  std::vector<PlanePrim> planes;
};

struct SceneGenConfig {
  int image = 64;
  int views = 4;
  int spheres_min = 2, spheres_max = 5;
  int planes_min = 1, planes_max = 2;
  double fov_min_deg = 45.0, fov_max_deg = 65.0;
  double orbit_min = 2.4, orbit_max = 3.4;
  double azimuth_spread_deg = 140.0;
  double min_valid_frac = 0.30;

  void validate() const {
    check(image >= 8 && image % 2 == 0, cat("scene gen: image must be even and >= 8, got ", image));
    check(views >= 1, "scene gen: views >= 1 required");
    check(spheres_min >= 0 && spheres_max >= spheres_min, "scene gen: sphere count range");
    check(planes_min >= 0 && planes_max >= planes_min, "scene gen: plane count range");
    check(spheres_max + planes_max >= 1, "scene gen: at least one primitive required");
    check(fov_min_deg > 10 && fov_max_deg < 170 && fov_max_deg >= fov_min_deg,
          "scene gen: fov range");
    check(orbit_min > 0 && orbit_max >= orbit_min, "scene gen: orbit range");
    check(min_valid_frac > 0 && min_valid_frac <= 1, "scene gen: min_valid_frac range");
  }
};

namespace detail {

struct Hit {
  double t = -1;
  Eigen::Vector3d normal{0, 0, 0};
  double u = 0, v = 0;  // texture coords
  int material = -1;
};

inline bool hit_sphere(const SpherePrim& s, const Eigen::Vector3d& o, const Eigen::Vector3d& d,
                       double& t, Eigen::Vector3d& n, double& u, double& v) {
  Eigen::Vector3d oc = o - s.center;
  double a = d.squaredNorm();
  double b = 2.0 * d.dot(oc);
  double c = oc.squaredNorm() - s.radius * s.radius;
  double disc = b * b - 4 * a * c;
  if (disc < 0) return false;
  double sq = std::sqrt(disc);
  double t0 = (-b - sq) / (2 * a), t1 = (-b + sq) / (2 * a);
  t = t0 > 1e-9 ? t0 : t1;
  if (t <= 1e-9) return false;
  Eigen::Vector3d p = o + t * d;
  n = (p - s.center) / s.radius;
  u = std::atan2(n.z(), n.x()) / (2 * kPi) + 0.5;
  v = std::acos(std::clamp(n.y(), -1.0, 1.0)) / kPi;
  return true;
}

inline bool hit_plane(const PlanePrim& pl, const Eigen::Vector3d& o, const Eigen::Vector3d& d,
                      double& t, Eigen::Vector3d& n, double& u, double& v) {
  double denom = d.dot(pl.normal);
  if (std::abs(denom) < 1e-12) return false;
  t = (pl.point - o).dot(pl.normal) / denom;
  if (t <= 1e-9) return false;
  Eigen::Vector3d p = o + t * d;
  Eigen::Vector3d rel = p - pl.point;
  if (rel.norm() > pl.extent) return false;
  n = denom < 0 ? pl.normal : Eigen::Vector3d(-pl.normal);
  u = pl.e1.dot(rel);
  v = pl.e2.dot(rel);
  return true;
}

inline Eigen::Vector3d shade(const Material& m, const Eigen::Vector3d& n, double u, double v,
                             const Eigen::Vector3d& light) {
  int64_t cu = (int64_t)std::floor(u * m.checker_scale);
  int64_t cv = (int64_t)std::floor(v * m.checker_scale);
  const Eigen::Vector3d& alb = ((cu + cv) & 1) ? m.albedo_b : m.albedo_a;
  double lambert = std::max(0.0, n.dot(-light));
  return alb * (0.25 + 0.75 * lambert);
}

inline Eigen::Vector3d unit_dir(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0, 1);
  Eigen::Vector3d v;
  do {
    v = {g(rng), g(rng), g(rng)};
  } while (v.norm() < 1e-6);
  return v.normalized();
}

}  // namespace detail

inline GeneratedScene generate_scene(uint64_t seed, const SceneGenConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  auto unif = [&](double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  };
  auto unif_int = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

  std::vector<SpherePrim> spheres((size_t)unif_int(cfg.spheres_min, cfg.spheres_max));
  std::vector<PlanePrim> planes((size_t)unif_int(cfg.planes_min, cfg.planes_max));
  std::vector<Material> materials;
  for (auto& s : spheres) {
    s.center = detail::unit_dir(rng) * unif(0.0, 0.9);
    s.radius = unif(0.25, 0.6);
  }
  for (auto& p : planes) {
    p.point = detail::unit_dir(rng) * unif(0.3, 1.1);
    p.normal = detail::unit_dir(rng);
    p.extent = unif(1.2, 2.2);
    p.e1 = p.normal.unitOrthogonal();
    p.e2 = p.normal.cross(p.e1);
  }
  for (size_t i = 0; i < spheres.size() + planes.size(); ++i) {
    Material m;
    m.albedo_a = {unif(0.2, 0.95), unif(0.2, 0.95), unif(0.2, 0.95)};
    m.albedo_b = {unif(0.2, 0.95), unif(0.2, 0.95), unif(0.2, 0.95)};
    m.checker_scale = unif(2.0, 6.0);
    materials.push_back(m);
  }
  Eigen::Vector3d light = detail::unit_dir(rng);

  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (const auto& s : spheres) centroid += s.center;
  for (const auto& p : planes) centroid += p.point;
  centroid /= (double)(spheres.size() + planes.size());

  double fov = rad(unif(cfg.fov_min_deg, cfg.fov_max_deg));
  double az0 = unif(0, 2 * kPi);
  double spread = rad(cfg.azimuth_spread_deg);

  auto trace = [&](const Eigen::Vector3d& o, const Eigen::Vector3d& d, detail::Hit& best) {
    best = detail::Hit{};
    double t;
    Eigen::Vector3d n;
    double u, v;
    for (size_t i = 0; i < spheres.size(); ++i)
      if (detail::hit_sphere(spheres[i], o, d, t, n, u, v) && (best.t < 0 || t < best.t))
        best = {t, n, u, v, (int)i};
    for (size_t i = 0; i < planes.size(); ++i)
      if (detail::hit_plane(planes[i], o, d, t, n, u, v) && (best.t < 0 || t < best.t))
        best = {t, n, u, v, (int)(spheres.size() + i)};
    return best.t > 0;
  };

  std::vector<Camera> cams;
  GeneratedScene out;
  for (int view = 0; view < cfg.views; ++view) {
    ViewRecord vr;
    vr.height = vr.width = cfg.image;
    bool placed = false;
    for (int attempt = 0; attempt < 64 && !placed; ++attempt) {
      double frac = cfg.views == 1 ? 0.5 : (double)view / (cfg.views - 1);
      double az = az0 + spread * (frac - 0.5) + unif(-0.08, 0.08);
      double el = rad(unif(-10.0, 35.0));
      double radius = unif(cfg.orbit_min, cfg.orbit_max);
      Eigen::Vector3d target = centroid + Eigen::Vector3d(unif(-0.15, 0.15), unif(-0.15, 0.15),
                                                          unif(-0.15, 0.15));
      Eigen::Vector3d pos =
          target + radius * Eigen::Vector3d(std::cos(el) * std::cos(az), std::sin(el),
                                            std::cos(el) * std::sin(az));
      Eigen::Vector3d fwd = (target - pos).normalized();
      if (std::abs(fwd.y()) > 0.99) continue;
      Eigen::Vector3d up(0, 1, 0);
      Eigen::Vector3d right = up.cross(fwd).normalized();
      Eigen::Vector3d ydir = fwd.cross(right);
      Eigen::Matrix3d r;
      r.col(0) = right;
      r.col(1) = ydir;
      r.col(2) = fwd;

      Camera cam;
      cam.q = Eigen::Quaterniond(r);
      cam.t = pos;
      cam.fov = {fov, fov};
      cam.height = cam.width = cfg.image;
      cam.canonicalize();

      RayMap rays = rays_from_camera(cam);
      vr.image.assign((size_t)cfg.image * cfg.image * 3, 0);
      vr.depth.assign((size_t)cfg.image * cfg.image, 0.0f);
      vr.mask.assign((size_t)cfg.image * cfg.image, 0);
      int64_t valid = 0;
      detail::Hit hit;
      for (int64_t i = 0; i < rays.pixels(); ++i) {
        if (!trace(rays.origin[(size_t)i], rays.dir[(size_t)i], hit)) continue;
        vr.mask[(size_t)i] = 1;
        vr.depth[(size_t)i] = (float)hit.t;  // ray param == z-depth (unit-z directions)
        Eigen::Vector3d c = detail::shade(materials[(size_t)hit.material], hit.normal, hit.u,
                                          hit.v, light);
        for (int ch = 0; ch < 3; ++ch)
          vr.image[(size_t)(i * 3 + ch)] =
              (uint8_t)std::clamp((int)std::lround(255.0 * c[ch]), 0, 255);
        ++valid;
      }
      if ((double)valid >= cfg.min_valid_frac * (double)rays.pixels()) {
        placed = true;
        cams.push_back(cam);
        out.record.views.push_back(std::move(vr));
      }
    }
    check(placed, cat("scene gen: no camera with ", cfg.min_valid_frac,
                      " valid fraction found for view ", view, " (seed ", seed, ")"));
  }

  // Re-express everything relative to view 0.
  Eigen::Matrix3d r0 = cams[0].rotation();
  Eigen::Vector3d t0 = cams[0].t;
  std::vector<Camera> rel = make_relative(cams);
  for (int view = 0; view < cfg.views; ++view) out.record.views[(size_t)view].cam = rel[(size_t)view];
  for (auto& s : spheres) s.center = r0.transpose() * (s.center - t0);
  for (auto& p : planes) {
    p.point = r0.transpose() * (p.point - t0);
    p.normal = r0.transpose() * p.normal;
    p.e1 = r0.transpose() * p.e1;
    p.e2 = r0.transpose() * p.e2;
  }
  out.spheres = std::move(spheres);
  out.planes = std::move(planes);
  out.record.seed = seed;
  return out;
}

// Smallest absolute implicit-surface residual of x against the scene's
// primitives, in scene units.
inline double surface_residual(const GeneratedScene& scene, const Eigen::Vector3d& x) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& s : scene.spheres)
    best = std::min(best, std::abs((x - s.center).norm() - s.radius));
  for (const auto& p : scene.planes)
    if ((x - p.point).norm() <= p.extent + 1e-6)
      best = std::min(best, std::abs(p.normal.dot(x - p.point)));
  return best;
}

// ---------------------------------------------------------------------------
// dataset directory (shards + manifest) and mixture sampling
// ---------------------------------------------------------------------------

// p_i proportional to count_i^alpha.
inline std::vector<double> mixture_probs(const std::vector<int64_t>& counts, double alpha) {
  check(!counts.empty(), "mixture_probs: no shards");
  check(std::isfinite(alpha) && alpha >= 0, cat("mixture_probs: bad alpha ", alpha));
  std::vector<double> p(counts.size());
  double total = 0;
  for (size_t i = 0; i < counts.size(); ++i) {
    check(counts[i] > 0, cat("mixture_probs: non-positive count ", counts[i], " in shard ", i));
    p[i] = std::pow((double)counts[i], alpha);
    total += p[i];
  }
  for (auto& v : p) v /= total;
  return p;
}

class MixtureSampler {
 public:
  MixtureSampler(std::vector<double> probs, uint64_t seed) : p_(std::move(probs)), rng_(seed) {
    double total = 0;
    for (double v : p_) {
      check(v >= 0, "mixture sampler: negative probability");
      total += v;
    }
    check(std::abs(total - 1.0) < 1e-9, cat("mixture sampler: probabilities sum to ", total));
  }

  size_t sample() {
    double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng_);
    double acc = 0;
    for (size_t i = 0; i + 1 < p_.size(); ++i) {
      acc += p_[i];
      if (u < acc) return i;
    }
    return p_.size() - 1;
  }

 private:
  std::vector<double> p_;
  std::mt19937_64 rng_;
};

struct DatasetShard {
  std::string name;
  std::vector<std::string> scene_paths;
};

struct Dataset {
  std::vector<DatasetShard> shards;

  std::vector<int64_t> counts() const {
    std::vector<int64_t> c;
    for (const auto& s : shards) c.push_back((int64_t)s.scene_paths.size());
    return c;
  }
  int64_t total_scenes() const {
    int64_t t = 0;
    for (const auto& s : shards) t += (int64_t)s.scene_paths.size();
    return t;
  }
};

inline void save_manifest(const Dataset& ds, const std::string& dir) {
  std::ofstream f(dir + "/manifest.txt", std::ios::trunc);
  check(f.good(), cat("cannot write manifest in ", dir));
  f << "format=djvw-manifest\nversion=1\n";
  for (const auto& s : ds.shards) {
    f << "shard=" << s.name << ":" << s.scene_paths.size() << "\n";
    check(!s.name.empty() && s.name.find_first_of("/:\\ \t") == std::string::npos,
          cat("manifest: bad shard name '", s.name, "'"));
  }
  check(f.good(), "manifest write failed");
}

// Loads a dataset rooted at `dir` (which must contain manifest.txt written by
// save_manifest; scene files live at dir/<shard>/scene_NNNNN.djvw).
inline Dataset load_manifest(const std::string& dir) {
  std::ifstream f(dir + "/manifest.txt");
  check(f.good(), cat("cannot open manifest: ", dir, "/manifest.txt"));
  std::string line;
  Dataset ds;
  int lineno = 0;
  bool saw_format = false;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    size_t eq = line.find('=');
    check(eq != std::string::npos, cat(dir, "/manifest.txt:", lineno, ": expected key=value"));
    std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "format") {
      check(val == "djvw-manifest", cat("manifest: unknown format '", val, "'"));
      saw_format = true;
    } else if (key == "version") {
      check(val == "1", cat("manifest: unsupported version '", val, "'"));
    } else if (key == "shard") {
      size_t colon = val.rfind(':');
      check(colon != std::string::npos, cat(dir, "/manifest.txt:", lineno, ": shard needs name:count"));
      DatasetShard s;
      s.name = val.substr(0, colon);
      int64_t count = 0;
      try {
        count = std::stoll(val.substr(colon + 1));
      } catch (const std::exception&) {
        fail(cat(dir, "/manifest.txt:", lineno, ": bad shard count"));
      }
      check(count > 0, cat(dir, "/manifest.txt:", lineno, ": shard count must be positive"));
      for (int64_t i = 0; i < count; ++i) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "scene_%05lld.djvw", (long long)i);
        std::string p = dir + "/" + s.name + "/" + buf;
        check(std::filesystem::exists(p), cat("manifest lists missing scene file: ", p));
        s.scene_paths.push_back(p);
      }
      ds.shards.push_back(std::move(s));
    } else {
      fail(cat(dir, "/manifest.txt:", lineno, ": unknown key '", key, "'"));
    }
  }
  check(saw_format, cat(dir, "/manifest.txt: missing format line"));
  check(!ds.shards.empty(), cat(dir, "/manifest.txt: no shards"));
  return ds;
}

}  // namespace looprec
