#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "hess/autodiff.hpp"
#include "hess/calibration.hpp"
#include "hess/geometry.hpp"
#include "hess/sparse_attention.hpp"
#include "hess/toy_model.hpp"

namespace hess::gradcheck {

struct CheckResult {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t entries = 0;
  bool pass = false;
};

// |a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from
// producing huge ratios out of rounding noise.
inline double rel_err(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Central differences of f with respect to the listed entries of `param`,
// compared against `analytic`. `param` is restored afterwards.
inline double max_fd_error(const std::function<double()>& f, Tensor& param, const Tensor& analytic,
                           const std::vector<std::size_t>& entries, double step = 1e-5) {
  double worst = 0.0;
  for (std::size_t k : entries) {
    const double orig = param[k];
    param[k] = orig + step;
    const double up = f();
    param[k] = orig - step;
    const double down = f();
    param[k] = orig;
    worst = std::max(worst, rel_err(analytic[k], (up - down) / (2.0 * step)));
  }
  return worst;
}

inline std::vector<std::size_t> all_entries(const Tensor& t) {
  std::vector<std::size_t> v(t.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = i;
  return v;
}

inline Tensor random_tensor(std::mt19937_64& rng, std::size_t r, std::size_t c) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor t = Tensor::zeros(r, c);
  for (double& v : t.data()) v = u(rng);
  return t;
}

// Small network touching every differentiable op: projections, dense and
// masked attention, pooling, bias, tanh, softplus, gather/slice/concat.
inline CheckResult check_autodiff(std::uint64_t seed, double tol) {
  std::mt19937_64 rng(seed);
  const std::size_t s = 6, d = 4, dh = 3;
  std::vector<Tensor> params{random_tensor(rng, s, d), random_tensor(rng, d, dh), random_tensor(rng, d, dh),
                             random_tensor(rng, d, dh), random_tensor(rng, 1, dh), random_tensor(rng, 2 * dh, 2)};
  attn::BlockSelection sel = attn::BlockSelection::full(3, 3);
  {
    // Drop one block while keeping every row alive.
    Tensor probs = Tensor::zeros(3, 3);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) probs(i, j) = (i == 0 && j == 2) ? 0.0 : 1.0 / (i == 0 ? 2.0 : 3.0);
    sel = attn::select_top_c(attn::ApproxAttentionMap::from_probs(probs, 2), 8);
  }
  auto build = [&](Tape& t, std::vector<Var>& leaves) {
    leaves.clear();
    for (const Tensor& p : params) leaves.push_back(t.leaf(p));
    auto qkv = attn::project_qkv(leaves[0], attn::HeadVars{leaves[1], leaves[2], leaves[3]});
    Var dense = attn::dense_attention(qkv.q, qkv.k, qkv.v);
    Var masked = attn::masked_attention(qkv.q, qkv.k, qkv.v, sel, 2, {});
    Var h = ad::tanh(ad::add_row_bias(ad::add(dense, ad::scale(masked, 0.5)), leaves[4]));
    Var pooled = ad::avg_pool_rows(h, 4);
    Var both = ad::concat_cols({ad::gather_rows(h, {0, 2, 5}), ad::gather_rows(ad::mul(h, h), {1, 3, 4})});
    Var out = ad::softplus(ad::matmul(both, leaves[5]));
    return ad::add(ad::sum_squares(ad::slice_cols(out, 0, 1)), ad::sum(ad::mul(pooled, pooled)));
  };
  auto value = [&] {
    Tape t;
    std::vector<Var> leaves;
    return build(t, leaves).value().item();
  };
  Tape tape;
  std::vector<Var> leaves;
  Var loss = build(tape, leaves);
  tape.backward(loss);
  CheckResult r{"autodiff: attention network", 0.0, 0, true};
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor g = leaves[i].grad();
    r.max_rel_err = std::max(r.max_rel_err, max_fd_error(value, params[i], g, all_entries(params[i])));
    r.entries += params[i].size();
  }
  r.pass = r.max_rel_err < tol;
  return r;
}

// e_cam and e_pc with respect to the predicted positions; the transform
// leaves must get exactly zero gradient.
inline CheckResult check_geometry(std::uint64_t seed, double tol) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  const std::size_t n = 8;
  geom::CameraSet gt_cams;
  geom::PointCloud gt;
  for (std::size_t i = 0; i < n; ++i) {
    gt_cams.translations.emplace_back(n01(rng), n01(rng), n01(rng));
    gt.points.emplace_back(n01(rng), n01(rng), n01(rng));
  }
  Tensor pred = random_tensor(rng, n, 3);
  geom::SimilarityTransform h;
  h.scale = 1.3;
  h.rotation = Eigen::AngleAxisd(0.4, geom::Vec3(1, 2, 3).normalized()).toRotationMatrix();
  h.translation = geom::Vec3(0.1, -0.2, 0.3);
  const std::vector<double> conf(n, 2.0);
  const double eps = 1e6;

  CheckResult r{"geometry: camera and point errors", 0.0, 0, true};
  for (int kind = 0; kind < 2; ++kind) {
    auto build = [&](Tape& t, Var& p, Var& hv) {
      p = t.leaf(pred);
      hv = t.leaf(h.affine());
      return kind == 0 ? geom::camera_pose_error(p, gt_cams, hv) : geom::point_cloud_error(p, conf, gt, hv, eps);
    };
    auto value = [&] {
      Tape t;
      Var p, hv;
      return build(t, p, hv).value().item();
    };
    Tape tape;
    Var p, hv;
    Var e = build(tape, p, hv);
    tape.backward(e);
    r.max_rel_err = std::max(r.max_rel_err, max_fd_error(value, pred, p.grad(), all_entries(pred)));
    r.entries += pred.size();
    for (double g : hv.grad().data())
      if (g != 0.0) r.pass = false;
  }
  r.pass = r.pass && r.max_rel_err < tol;
  return r;
}

// Per-sample W_Q gradients of both errors on a small toy model against
// central differences on `entries_per_head` random entries of every head.
inline CheckResult check_sensitivity(std::uint64_t seed, double tol, std::size_t entries_per_head = 10) {
  toy::ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.dim = 8;
  cfg.head_dim = 4;
  cfg.ff_dim = 8;
  cfg.n_views = 3;
  cfg.tokens_per_view = 5;
  cfg.block_size = 5;
  toy::ToyModel model = toy::init_model(cfg, seed);
  const auto scene = toy::generate_scene(seed + 1, cfg.n_views, cfg.tokens_per_view, cfg.dim);
  sens::CalibrationOptions opt;
  opt.eps = 1e6;  // every point is an inlier
  const auto h = sens::dense_alignment(model, scene);
  std::mt19937_64 rng(seed + 2);

  CheckResult r{"sensitivity: per-sample W_Q gradients", 0.0, 0, true};
  for (auto kind : {sens::ErrorKind::kCam, sens::ErrorKind::kPc}) {
    const auto grads = sens::detail::head_grads_with(model, scene, kind, h, opt);
    auto value = [&] {
      Tape t;
      auto pv = toy::bind(model.params, t, toy::GradTarget::kNone);
      auto f = toy::forward(cfg, pv, scene, t);
      return (kind == sens::ErrorKind::kCam
                  ? geom::camera_pose_error(f.camera_translations, scene.gt_cameras, h)
                  : geom::point_cloud_error(f.points, f.confidence, scene.gt_cloud, h, opt.eps, opt.conf_cutoff))
          .value()
          .item();
    };
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
        Tensor& wq = model.params.layers[l].heads[hd].w_q;
        std::uniform_int_distribution<std::size_t> pick(0, wq.size() - 1);
        std::vector<std::size_t> idx;
        for (std::size_t k = 0; k < entries_per_head; ++k) idx.push_back(pick(rng));
        r.max_rel_err = std::max(r.max_rel_err, max_fd_error(value, wq, grads[l][hd], idx));
        r.entries += idx.size();
      }
    }
  }
  r.pass = r.max_rel_err < tol;
  return r;
}

inline std::vector<CheckResult> run_all(std::uint64_t seed, double tol) {
  return {check_autodiff(seed, tol), check_geometry(seed, tol), check_sensitivity(seed, tol)};
}

}  // namespace hess::gradcheck
