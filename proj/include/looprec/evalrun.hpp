#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "looprec/config.hpp"
#include "looprec/geometry.hpp"
#include "looprec/metrics.hpp"
#include "looprec/model.hpp"
#include "looprec/synthdata.hpp"
#include "looprec/viewbatch.hpp"

namespace looprec {

// Recovers per-view cameras either from the predicted ray maps (default) or
// from the camera-head tuple, then scores the Sim(3)-aligned global pointmap
// and the pairwise relative poses against ground truth.
template <typename T>
MetricReport evaluate_prediction(const Prediction<T>& pred, const ViewBatch<T>& gt,
                                 bool cameras_from_head = false) {
  int V = gt.vcount();
  check((int)pred.views.size() == V, "evaluate: prediction/batch view count mismatch");
  int H = gt.height, W = gt.width;
  int64_t n = (int64_t)H * W;

  std::vector<Eigen::Vector3d> pred_pts, gt_pts;
  std::vector<double> pd, gd;
  std::vector<uint8_t> dvalid;
  for (int v = 0; v < V; ++v) {
    const auto& pp = pred.views[(size_t)v].points.values();
    const auto& gp = gt.views[(size_t)v].points.values();
    const auto& m = gt.views[(size_t)v].mask.values();
    const auto& pdep = pred.views[(size_t)v].depth.values();
    const auto& gdep = gt.views[(size_t)v].depth.values();
    for (int64_t i = 0; i < n; ++i) {
      if (m[(size_t)i] == T(0)) continue;
      pred_pts.emplace_back((double)pp[(size_t)(3 * i)], (double)pp[(size_t)(3 * i + 1)],
                            (double)pp[(size_t)(3 * i + 2)]);
      gt_pts.emplace_back((double)gp[(size_t)(3 * i)], (double)gp[(size_t)(3 * i + 1)],
                          (double)gp[(size_t)(3 * i + 2)]);
      pd.push_back((double)pdep[(size_t)i]);
      gd.push_back((double)gdep[(size_t)i]);
      dvalid.push_back(1);
    }
  }
  check(!pred_pts.empty(), "evaluate: no valid pixels in ground truth");

  Sim3 a = sim3_align(pred_pts, gt_pts, {});
  for (auto& p : pred_pts) p = a.s * (a.r * p) + a.t;

  std::vector<Camera> pcams, gcams;
  for (int v = 0; v < V; ++v) {
    gcams.push_back(gt.views[(size_t)v].cam);
    if (cameras_from_head) {
      pcams.push_back(prediction_camera(pred.views[(size_t)v], H, W));
    } else {
      RayMap rm;
      rm.height = H;
      rm.width = W;
      rm.origin.resize((size_t)n);
      rm.dir.resize((size_t)n);
      const auto& rv = pred.views[(size_t)v].rays.values();
      for (int64_t i = 0; i < n; ++i) {
        rm.origin[(size_t)i] = {(double)rv[(size_t)(6 * i)], (double)rv[(size_t)(6 * i + 1)],
                                (double)rv[(size_t)(6 * i + 2)]};
        rm.dir[(size_t)i] = {(double)rv[(size_t)(6 * i + 3)], (double)rv[(size_t)(6 * i + 4)],
                             (double)rv[(size_t)(6 * i + 5)]};
      }
      try {
        pcams.push_back(camera_from_rays(rm));
      } catch (const Error&) {
        pcams.push_back(prediction_camera(pred.views[(size_t)v], H, W));
      }
    }
  }

  MetricReport rep = make_report(pred_pts, gt_pts, std::vector<uint8_t>(pred_pts.size(), 1),
                                 pcams, gcams);

  double psum = 0, gsum = 0;
  for (size_t i = 0; i < pd.size(); ++i) {
    psum += pd[i];
    gsum += gd[i];
  }
  if (psum > 0 && gsum > 0) {
    std::vector<double> scaled(pd.size());
    for (size_t i = 0; i < pd.size(); ++i) scaled[i] = pd[i] * (gsum / psum);
    rep.abs_rel = abs_rel_depth(scaled, gd, dvalid);
  }
  return rep;
}

struct SceneEvalResult {
  std::string path;
  MetricReport report;
};

struct EvalResult {
  int k_inf = 0;
  bool cameras_from_head = false;
  std::vector<SceneEvalResult> scenes;
  MetricReport aggregate;
};

template <typename T>
EvalResult run_eval(const Model<T>& model, const Dataset& ds, int k_inf,
                    bool cameras_from_head = false) {
  check(k_inf >= 1, cat("eval: k_inf must be >= 1, got ", k_inf));
  EvalResult out;
  out.k_inf = k_inf;
  out.cameras_from_head = cameras_from_head;
  std::vector<MetricReport> reports;
  for (const auto& shard : ds.shards)
    for (const auto& path : shard.scene_paths) {
      SceneRecord rec = load_scene(path);
      ViewBatch<T> vb = make_view_batch<T>(rec);
      auto fw = model.forward(vb, k_inf);
      SceneEvalResult se;
      se.path = path;
      se.report = evaluate_prediction(fw.pred, vb, cameras_from_head);
      reports.push_back(se.report);
      out.scenes.push_back(std::move(se));
    }
  out.aggregate = mean_report(reports);
  return out;
}

inline void append_report_kv(std::ostream& os, const std::string& prefix,
                             const MetricReport& r) {
  os << prefix << "rel_l2=" << r.rel_l2 << "\n";
  os << prefix << "ir=" << r.ir << "\n";
  os << prefix << "auc3=" << r.auc3 << "\n";
  os << prefix << "auc30=" << r.auc30 << "\n";
  os << prefix << "abs_rel=" << r.abs_rel << "\n";
  os << prefix << "n_points=" << r.n_points << "\n";
  os << prefix << "n_pairs=" << r.n_pairs << "\n";
}

inline void write_eval_text(const EvalResult& res, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  check(f.good(), cat("cannot write report: ", path));
  f << "k_inf=" << res.k_inf << "\n";
  f << "camera_source=" << (res.cameras_from_head ? "head" : "rays") << "\n";
  f << "scenes=" << res.scenes.size() << "\n";
  append_report_kv(f, "mean.", res.aggregate);
  for (size_t i = 0; i < res.scenes.size(); ++i) {
    f << "scene." << i << ".path=" << res.scenes[i].path << "\n";
    append_report_kv(f, cat("scene.", i, "."), res.scenes[i].report);
  }
  check(f.good(), cat("report write failed: ", path));
}

inline nlohmann::json report_json(const MetricReport& r) {
  return {{"rel_l2", r.rel_l2}, {"ir", r.ir},           {"auc3", r.auc3},
          {"auc30", r.auc30},   {"abs_rel", r.abs_rel}, {"n_points", r.n_points},
          {"n_pairs", r.n_pairs}};
}

inline void write_eval_json(const EvalResult& res, const std::string& path) {
  nlohmann::json j;
  j["k_inf"] = res.k_inf;
  j["camera_source"] = res.cameras_from_head ? "head" : "rays";
  j["mean"] = report_json(res.aggregate);
  j["scenes"] = nlohmann::json::array();
  for (const auto& s : res.scenes) {
    nlohmann::json js = report_json(s.report);
    js["path"] = s.path;
    j["scenes"].push_back(js);
  }
  std::ofstream f(path, std::ios::trunc);
  check(f.good(), cat("cannot write report: ", path));
  f << j.dump(2) << "\n";
  check(f.good(), cat("report write failed: ", path));
}

}  // namespace looprec
