#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "hess/errors.hpp"
#include "hess/geometry.hpp"
#include "hess/parallel.hpp"
#include "hess/sensitivity.hpp"
#include "hess/toy_model.hpp"

namespace hess::toy {

struct AlignOptions {
  double conf_cutoff = 1.0;
  std::size_t icp_iters = 20;
  double icp_tol = 1e-10;
};

// Similarity transform taking predicted points into the ground-truth frame:
// Umeyama on the known per-token correspondences, refined by ICP. Points
// below the confidence cutoff are ignored. A degenerate prediction (typical
// for untrained models) falls back to the identity.
inline geom::SimilarityTransform align(const geom::PointCloud& pred, const SyntheticScene& scene,
                                       const AlignOptions& opt = {}) {
  std::vector<geom::Vec3> src, dst;
  for (std::size_t j = 0; j < pred.size(); ++j) {
    if (!pred.confidence.empty() && pred.confidence[j] < opt.conf_cutoff) continue;
    src.push_back(pred.points[j]);
    dst.push_back(scene.gt_cloud.points[j]);
  }
  geom::SimilarityTransform init;
  if (src.size() < 3) return init;
  try {
    init = geom::umeyama(src, dst);
  } catch (const RankError&) {
    return init;
  }
  return geom::icp_refine(src, scene.gt_cloud.points, init, opt.icp_iters, opt.icp_tol, /*keep_scale=*/true)
      .transform;
}

}  // namespace hess::toy

namespace hess::sens {

enum class ErrorKind { kCam, kPc };

struct CalibrationOptions {
  double lambda = 0.5;
  double eps = 0.05;
  double conf_cutoff = 1.0;
  toy::GradTarget param = toy::GradTarget::kQuery;
  std::uint64_t seed = 0;
};

// grads[layer][head], gradient of one error with respect to the chosen
// projection of every head.
using HeadGrads = std::vector<std::vector<Tensor>>;

namespace detail {

inline const Var& chosen(const toy::HeadT<Var>& h, toy::GradTarget t) {
  switch (t) {
    case toy::GradTarget::kKey: return h.w_k;
    case toy::GradTarget::kValue: return h.w_v;
    case toy::GradTarget::kQuery: return h.w_q;
    default: throw ParameterError("sensitivity parameter must be w_q, w_k or w_v");
  }
}

inline HeadGrads head_grads_with(const toy::ToyModel& model, const toy::SyntheticScene& scene, ErrorKind kind,
                                 const geom::SimilarityTransform& h, const CalibrationOptions& opt) {
  Tape tape;
  auto pv = toy::bind(model.params, tape, opt.param);
  auto f = toy::forward(model.config, pv, scene, tape);
  Var err = kind == ErrorKind::kCam
                ? geom::camera_pose_error(f.camera_translations, scene.gt_cameras, h)
                : geom::point_cloud_error(f.points, f.confidence, scene.gt_cloud, h, opt.eps, opt.conf_cutoff);
  if (!std::isfinite(err.value().item())) throw SampleSkip("non-finite error");
  tape.backward(err);
  HeadGrads out(pv.layers.size());
  for (std::size_t l = 0; l < pv.layers.size(); ++l)
    for (const auto& hv : pv.layers[l].heads) out[l].push_back(chosen(hv, opt.param).grad());
  return out;
}

}  // namespace detail

// Alignment of the dense prediction for one calibration scene.
inline geom::SimilarityTransform dense_alignment(const toy::ToyModel& model, const toy::SyntheticScene& scene,
                                                 double conf_cutoff = 1.0) {
  Tape tape;
  auto pv = toy::bind(model.params, tape, toy::GradTarget::kNone);
  const auto pred = toy::to_prediction(toy::forward(model.config, pv, scene, tape));
  return toy::align(pred.cloud, scene, {conf_cutoff});
}

// Per-sample gradient of e_cam or e_pc with respect to each head's projection
// (W_Q unless opt.param says otherwise), on a fresh tape. Throws SampleSkip
// for an empty inlier set or a non-finite error.
inline HeadGrads per_sample_head_grads(const toy::ToyModel& model, const toy::SyntheticScene& scene, ErrorKind kind,
                                       const CalibrationOptions& opt = {}) {
  return detail::head_grads_with(model, scene, kind, dense_alignment(model, scene, opt.conf_cutoff), opt);
}

struct SampleNorms {
  bool skipped = false;
  LayerScores cam, pc;  // squared Frobenius norms
};

inline SampleNorms sample_norms(const toy::ToyModel& model, const toy::SyntheticScene& scene,
                                const CalibrationOptions& opt) {
  SampleNorms out;
  const auto h = dense_alignment(model, scene, opt.conf_cutoff);
  auto norms = [](const HeadGrads& g) {
    LayerScores s(g.size());
    for (std::size_t l = 0; l < g.size(); ++l)
      for (const Tensor& t : g[l]) s[l].push_back(kernels::sum_squares(t));
    return s;
  };
  try {
    out.cam = norms(detail::head_grads_with(model, scene, ErrorKind::kCam, h, opt));
    out.pc = norms(detail::head_grads_with(model, scene, ErrorKind::kPc, h, opt));
  } catch (const SampleSkip&) {
    out.skipped = true;
  }
  return out;
}

// Dense forward + two backward passes per scene, empirical FIM traces per
// head, per-layer normalization, lambda combination. Throws NumericError if
// every scene was skipped.
inline HessTable calibrate(const toy::ToyModel& model, const std::vector<toy::SyntheticScene>& scenes,
                           const CalibrationOptions& opt = {}) {
  if (scenes.empty()) throw ParameterError("calibrate: empty calibration set");
  if (!(opt.lambda >= 0.0 && opt.lambda <= 1.0)) throw ParameterError("lambda must lie in [0, 1]");
  if (!(opt.eps > 0.0)) throw ParameterError("eps must be > 0");
  std::vector<SampleNorms> per(scenes.size());
  parallel_for(scenes.size(), [&](std::size_t i) { per[i] = sample_norms(model, scenes[i], opt); });

  const std::size_t nl = model.config.n_layers, nh = model.config.n_heads;
  std::vector<std::vector<FimTraceAccumulator>> cam(nl, std::vector<FimTraceAccumulator>(nh)), pc = cam;
  std::size_t used = 0;
  for (std::size_t i = 0; i < per.size(); ++i) {
    if (per[i].skipped) {
      Log::warn("calibration: scene " + std::to_string(i) + " (seed " + std::to_string(scenes[i].seed) +
                ") has no inliers, skipped");
      continue;
    }
    ++used;
    for (std::size_t l = 0; l < nl; ++l) {
      for (std::size_t h = 0; h < nh; ++h) {
        cam[l][h].add(per[i].cam[l][h]);
        pc[l][h].add(per[i].pc[l][h]);
      }
    }
  }
  if (used == 0) throw NumericError("calibration failed: every scene was skipped");
  LayerScores cam_tr(nl), pc_tr(nl);
  for (std::size_t l = 0; l < nl; ++l) {
    for (std::size_t h = 0; h < nh; ++h) {
      cam_tr[l].push_back(cam[l][h].trace());
      pc_tr[l].push_back(pc[l][h].trace());
    }
  }
  return combine(normalize_layer(cam_tr), normalize_layer(pc_tr), opt.lambda,
                 CalibrationMeta{toy::fingerprint(model), opt.seed, used});
}

}  // namespace hess::sens
