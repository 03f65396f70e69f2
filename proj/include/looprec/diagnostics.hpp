#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "looprec/common.hpp"
#include "looprec/evalrun.hpp"
#include "looprec/metrics.hpp"
#include "looprec/model.hpp"
#include "looprec/synthdata.hpp"
#include "looprec/viewbatch.hpp"

namespace looprec {

struct RefinementTrace {
  std::vector<double> cos_to_final;  // k = 0..K
  std::vector<double> rel_update;    // k = 0..K-1, |z_{k+1} - z_k| / |z_k|
  std::vector<double> norm;          // k = 0..K
};

// Flattens every state to one vector and reports its cosine to the final
// state, the relative update magnitude, and the feature norm.
template <typename T>
RefinementTrace refinement_trace(const std::vector<Tensor<T>>& states) {
  check(states.size() >= 2, "refinement trace: need at least 2 states");
  size_t n = states[0].values().size();
  for (const auto& s : states)
    check(s.values().size() == n, "refinement trace: states differ in size");
  const auto& zf = states.back().values();
  RefinementTrace tr;
  for (size_t k = 0; k < states.size(); ++k) {
    const auto& z = states[k].values();
    double dot = 0, nz = 0, nf = 0;
    for (size_t i = 0; i < n; ++i) {
      dot += (double)z[i] * (double)zf[i];
      nz += (double)z[i] * (double)z[i];
      nf += (double)zf[i] * (double)zf[i];
    }
    nz = std::sqrt(nz);
    nf = std::sqrt(nf);
    tr.norm.push_back(nz);
    tr.cos_to_final.push_back(nz > 0 && nf > 0 ? dot / (nz * nf) : 0.0);
    if (k + 1 < states.size()) {
      const auto& znext = states[k + 1].values();
      double du = 0;
      for (size_t i = 0; i < n; ++i) {
        double d = (double)znext[i] - (double)z[i];
        du += d * d;
      }
      tr.rel_update.push_back(nz > 0 ? std::sqrt(du) / nz : 0.0);
    }
  }
  return tr;
}

// One traced forward; the state after every step is decoded and scored.
// Returns K reports for k = 1..K.
template <typename T>
std::vector<MetricReport> decode_at_every_step(const Model<T>& model, const ViewBatch<T>& batch,
                                               int k, bool cameras_from_head = false) {
  auto fw = model.forward(batch, k, /*keep_states=*/true);
  TokenLayout lay = model.layout(batch.vcount(), batch.height, batch.width);
  std::vector<MetricReport> out;
  for (int i = 1; i <= k; ++i) {
    Prediction<T> p = model.decode(fw.states[(size_t)i], lay, batch.height, batch.width);
    out.push_back(evaluate_prediction(p, batch, cameras_from_head));
  }
  return out;
}

struct ProbeResult {
  int query_view = 0, query_patch = 0, step = 0;
  int hp = 0, wp = 0;
  std::vector<double> row;                      // head-averaged attention row
  std::vector<std::vector<double>> view_grids;  // per view, hp*wp patch slices
};

// Captures the post-normalization q/k of the chosen loop step's global
// attention and recomputes the head-averaged softmax row for one query token.
template <typename T>
ProbeResult attention_probe(const Model<T>& model, const ViewBatch<T>& batch, int k, int step,
                            int query_view, int query_patch) {
  check(step >= 0 && step < k, cat("attention probe: step ", step, " out of range for k=", k));
  TokenLayout lay = model.layout(batch.vcount(), batch.height, batch.width);
  check(query_view >= 0 && query_view < lay.vcount,
        cat("attention probe: view ", query_view, " out of range"));
  check(query_patch >= 0 && query_patch < lay.patches(),
        cat("attention probe: patch ", query_patch, " out of range"));

  AttnProbe<T> sink;
  sink.step = step;
  model.forward(batch, k, false, &sink);
  check(sink.captured, "attention probe: capture failed");

  int heads = sink.heads, d = sink.head_dim;
  int64_t ntok = (int64_t)sink.q.size() / (heads * d);
  check(ntok == lay.total(), "attention probe: token count mismatch");
  int64_t qi = (int64_t)query_view * lay.per_view() + 1 + lay.registers + query_patch;

  ProbeResult res;
  res.query_view = query_view;
  res.query_patch = query_patch;
  res.step = step;
  res.hp = lay.hp;
  res.wp = lay.wp;
  res.row.assign((size_t)ntok, 0.0);
  double scale = 1.0 / std::sqrt((double)d);
  std::vector<double> logits((size_t)ntok);
  for (int h = 0; h < heads; ++h) {
    const T* qh = sink.q.data() + ((size_t)h * ntok + (size_t)qi) * (size_t)d;
    double mx = -1e300;
    for (int64_t j = 0; j < ntok; ++j) {
      const T* kh = sink.k.data() + ((size_t)h * ntok + (size_t)j) * (size_t)d;
      double dot = 0;
      for (int e = 0; e < d; ++e) dot += (double)qh[e] * (double)kh[e];
      logits[(size_t)j] = dot * scale;
      mx = std::max(mx, logits[(size_t)j]);
    }
    double denom = 0;
    for (int64_t j = 0; j < ntok; ++j) denom += std::exp(logits[(size_t)j] - mx);
    for (int64_t j = 0; j < ntok; ++j)
      res.row[(size_t)j] += std::exp(logits[(size_t)j] - mx) / (denom * heads);
  }

  for (int v = 0; v < lay.vcount; ++v) {
    std::vector<double> grid((size_t)lay.patches());
    int64_t base = (int64_t)v * lay.per_view() + 1 + lay.registers;
    for (int p = 0; p < lay.patches(); ++p) grid[(size_t)p] = res.row[(size_t)(base + p)];
    res.view_grids.push_back(std::move(grid));
  }
  return res;
}

struct SweepRow {
  int k = 0;
  MetricReport report;
};

template <typename T>
std::vector<SweepRow> kinf_sweep(const Model<T>& model, const std::vector<SceneRecord>& scenes,
                                 const std::vector<int>& ks, bool cameras_from_head = false) {
  check(!scenes.empty(), "sweep: no scenes");
  check(!ks.empty(), "sweep: no step counts requested");
  std::vector<SweepRow> rows;
  for (int k : ks) {
    check(k >= 1, cat("sweep: bad step count ", k));
    std::vector<MetricReport> reports;
    for (const auto& rec : scenes) {
      ViewBatch<T> vb = make_view_batch<T>(rec);
      auto fw = model.forward(vb, k);
      reports.push_back(evaluate_prediction(fw.pred, vb, cameras_from_head));
    }
    rows.push_back({k, mean_report(reports)});
  }
  return rows;
}

struct EarlyStopRow {
  int k = 0;
  MetricReport early;  // decoded from the intermediate state of one K_max pass
  MetricReport full;   // independent forward run with K_inf = k
};

template <typename T>
std::vector<EarlyStopRow> early_stop_compare(const Model<T>& model,
                                             const std::vector<SceneRecord>& scenes, int k_max,
                                             bool cameras_from_head = false) {
  check(!scenes.empty(), "early-stop compare: no scenes");
  check(k_max >= 1, "early-stop compare: k_max must be >= 1");
  std::vector<std::vector<MetricReport>> early((size_t)k_max);
  for (const auto& rec : scenes) {
    ViewBatch<T> vb = make_view_batch<T>(rec);
    auto reports = decode_at_every_step(model, vb, k_max, cameras_from_head);
    for (int k = 1; k <= k_max; ++k) early[(size_t)(k - 1)].push_back(reports[(size_t)(k - 1)]);
  }
  std::vector<int> ks;
  for (int k = 1; k <= k_max; ++k) ks.push_back(k);
  auto sweep = kinf_sweep(model, scenes, ks, cameras_from_head);
  std::vector<EarlyStopRow> rows;
  for (int k = 1; k <= k_max; ++k)
    rows.push_back({k, mean_report(early[(size_t)(k - 1)]), sweep[(size_t)(k - 1)].report});
  return rows;
}

// --- writers ---------------------------------------------------------------

inline void write_trace_csv(const RefinementTrace& tr, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  check(f.good(), cat("cannot write trace: ", path));
  f << "k,cos_to_final,rel_update,norm\n";
  f.precision(12);
  for (size_t k = 0; k < tr.norm.size(); ++k) {
    f << k << "," << tr.cos_to_final[k] << ",";
    if (k < tr.rel_update.size()) f << tr.rel_update[k];
    else f << "nan";
    f << "," << tr.norm[k] << "\n";
  }
  check(f.good(), cat("trace write failed: ", path));
}

inline void write_probe_json(const ProbeResult& res, const std::string& path) {
  nlohmann::json j;
  j["query_view"] = res.query_view;
  j["query_patch"] = res.query_patch;
  j["step"] = res.step;
  j["hp"] = res.hp;
  j["wp"] = res.wp;
  j["row_sum"] = [&] {
    double s = 0;
    for (double v : res.row) s += v;
    return s;
  }();
  j["views"] = res.view_grids;
  std::ofstream f(path, std::ios::trunc);
  check(f.good(), cat("cannot write probe: ", path));
  f << j.dump(2) << "\n";
  check(f.good(), cat("probe write failed: ", path));
}

inline void write_probe_csv(const ProbeResult& res, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  check(f.good(), cat("cannot write probe: ", path));
  f << "view,row,col,weight\n";
  f.precision(12);
  for (size_t v = 0; v < res.view_grids.size(); ++v)
    for (int r = 0; r < res.hp; ++r)
      for (int c = 0; c < res.wp; ++c)
        f << v << "," << r << "," << c << "," << res.view_grids[v][(size_t)(r * res.wp + c)]
          << "\n";
  check(f.good(), cat("probe write failed: ", path));
}

inline void write_sweep_csv(const std::vector<SweepRow>& rows, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  check(f.good(), cat("cannot write sweep: ", path));
  f << "k,rel_l2,ir,auc3,auc30,abs_rel\n";
  f.precision(12);
  for (const auto& r : rows)
    f << r.k << "," << r.report.rel_l2 << "," << r.report.ir << "," << r.report.auc3 << ","
      << r.report.auc30 << "," << r.report.abs_rel << "\n";
  check(f.good(), cat("sweep write failed: ", path));
}

inline void write_earlystop_csv(const std::vector<EarlyStopRow>& rows, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  check(f.good(), cat("cannot write comparison: ", path));
  f << "k,early_rel_l2,early_ir,early_auc30,full_rel_l2,full_ir,full_auc30\n";
  f.precision(12);
  for (const auto& r : rows)
    f << r.k << "," << r.early.rel_l2 << "," << r.early.ir << "," << r.early.auc30 << ","
      << r.full.rel_l2 << "," << r.full.ir << "," << r.full.auc30 << "\n";
  check(f.good(), cat("comparison write failed: ", path));
}

}  // namespace looprec
