#pragma once

// Converts scene records into the tensor bundle consumed by the model and the
// losses. A batch is built from a subset of a scene's views; ground-truth
// poses are re-expressed relative to the first selected view, and rays /
// points are derived in double precision before casting to the compute type.

#include <vector>

#include "looprec/geometry.hpp"
#include "looprec/synthdata.hpp"
#include "looprec/tensor.hpp"

namespace looprec {

template <typename T>
struct ViewTensors {
  Tensor<T> image;    // [H, W, 3], values in [-1, 1]
  Tensor<T> depth;    // [H, W]
  Tensor<T> mask;     // [H, W], 0/1
  Tensor<T> mask3;    // [H, W, 3], mask repeated per channel
  Tensor<T> rays;     // [H, W, 6]: origin xyz, direction xyz (unit-z convention)
  Tensor<T> points;   // [H, W, 3], zero at invalid pixels
  Tensor<T> cam_t;    // [3]
  Tensor<T> cam_q;    // [4], (w,x,y,z), canonical sign
  Tensor<T> cam_fov;  // [2]
  Camera cam;         // double-precision ground truth (relative to view 0)
  int64_t valid_count = 0;
};

template <typename T>
struct ViewBatch {
  int height = 0, width = 0;
  bool synthetic_dense = false;
  std::vector<ViewTensors<T>> views;

  int vcount() const { return (int)views.size(); }
};

template <typename T>
ViewBatch<T> make_view_batch(const SceneRecord& rec, const std::vector<int>& subset) {
  check(!subset.empty(), "view batch: empty view subset");
  std::vector<Camera> cams;
  for (int idx : subset) {
    check(idx >= 0 && idx < (int)rec.views.size(),
          cat("view batch: view index ", idx, " out of range (scene has ", rec.views.size(),
              " views)"));
    cams.push_back(rec.views[(size_t)idx].cam);
  }
  std::vector<Camera> rel = make_relative(cams);

  ViewBatch<T> batch;
  batch.synthetic_dense = rec.synthetic_dense;
  batch.height = rec.views[(size_t)subset[0]].height;
  batch.width = rec.views[(size_t)subset[0]].width;
  for (size_t s = 0; s < subset.size(); ++s) {
    const ViewRecord& vr = rec.views[(size_t)subset[s]];
    check(vr.height == batch.height && vr.width == batch.width,
          "view batch: mixed image sizes in one scene");
    int64_t n = (int64_t)vr.height * vr.width;

    ViewTensors<T> vt;
    vt.cam = rel[s];
    RayMap rays = rays_from_camera(vt.cam);
    PointMap pts = unproject(rays, vr.depth_map(), vr.valid_mask());

    std::vector<T> img((size_t)(n * 3)), dep((size_t)n), msk((size_t)n), m3((size_t)(n * 3));
    std::vector<T> ray6((size_t)(n * 6)), pt3((size_t)(n * 3));
    for (int64_t i = 0; i < n; ++i) {
      for (int c = 0; c < 3; ++c)
        img[(size_t)(i * 3 + c)] = (T)(vr.image[(size_t)(i * 3 + c)] / 127.5 - 1.0);
      dep[(size_t)i] = (T)vr.depth[(size_t)i];
      T mv = vr.mask[(size_t)i] ? T(1) : T(0);
      msk[(size_t)i] = mv;
      for (int c = 0; c < 3; ++c) {
        m3[(size_t)(i * 3 + c)] = mv;
        ray6[(size_t)(i * 6 + c)] = (T)rays.origin[(size_t)i][c];
        ray6[(size_t)(i * 6 + 3 + c)] = (T)rays.dir[(size_t)i][c];
        pt3[(size_t)(i * 3 + c)] = (T)pts.p[(size_t)i][c];
      }
      vt.valid_count += vr.mask[(size_t)i] ? 1 : 0;
    }
    int64_t h = vr.height, w = vr.width;
    vt.image = Tensor<T>::constant({h, w, 3}, std::move(img));
    vt.depth = Tensor<T>::constant({h, w}, std::move(dep));
    vt.mask = Tensor<T>::constant({h, w}, std::move(msk));
    vt.mask3 = Tensor<T>::constant({h, w, 3}, std::move(m3));
    vt.rays = Tensor<T>::constant({h, w, 6}, std::move(ray6));
    vt.points = Tensor<T>::constant({h, w, 3}, std::move(pt3));
    vt.cam_t = Tensor<T>::constant({3}, {(T)vt.cam.t.x(), (T)vt.cam.t.y(), (T)vt.cam.t.z()});
    vt.cam_q = Tensor<T>::constant(
        {4}, {(T)vt.cam.q.w(), (T)vt.cam.q.x(), (T)vt.cam.q.y(), (T)vt.cam.q.z()});
    vt.cam_fov = Tensor<T>::constant({2}, {(T)vt.cam.fov.x(), (T)vt.cam.fov.y()});
    batch.views.push_back(std::move(vt));
  }
  return batch;
}

template <typename T>
ViewBatch<T> make_view_batch(const SceneRecord& rec) {
  std::vector<int> all((size_t)rec.views.size());
  for (size_t i = 0; i < all.size(); ++i) all[i] = (int)i;
  return make_view_batch<T>(rec, all);
}

}  // namespace looprec
