#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hess/autodiff.hpp"
#include "hess/errors.hpp"
#include "hess/geometry.hpp"
#include "hess/sparse_attention.hpp"
#include "hess/tensor.hpp"

namespace hess::toy {

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t dim = 32;
  std::size_t head_dim = 8;
  std::size_t ff_dim = 64;
  std::size_t n_views = 20;
  std::size_t tokens_per_view = 17;
  // One frame per block by default.
  std::size_t block_size = 17;

  std::size_t seq_len() const { return n_views * tokens_per_view; }
  std::size_t num_blocks() const { return kernels::pooled_rows(seq_len(), block_size); }

  void validate() const {
    if (n_layers == 0 || n_heads == 0 || dim == 0 || head_dim == 0 || ff_dim == 0) {
      throw ParameterError("ModelConfig: dimensions must be positive");
    }
    if (n_views < 2 || tokens_per_view < 2) throw ParameterError("ModelConfig: need >= 2 views and >= 2 tokens per view");
    if (block_size == 0) throw ParameterError("ModelConfig: block size must be >= 1");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// ---------------------------------------------------------------------------
// Synthetic scenes

// Translation-only cameras on a noisy ring looking at a random point set.
// Ground truth lives in the frame of the first camera. Each patch token
// carries a noisy observation of its point relative to its own camera and a
// fixed code for its slot; camera tokens carry no position, so camera offsets
// have to be inferred from the patches of several frames. All tokens of a
// frame share a random frame code, the only way to tell frames apart.
struct SyntheticScene {
  std::uint64_t seed = 0;
  std::size_t n_views = 0;
  std::size_t tokens_per_view = 0;
  Tensor token_features;
  geom::CameraSet gt_cameras;
  // One entry per patch token, in token order, so that predicted and
  // ground-truth points correspond index by index.
  geom::PointCloud gt_cloud;

  std::size_t seq_len() const { return n_views * tokens_per_view; }
  std::size_t patches_per_view() const { return tokens_per_view - 1; }

  std::vector<std::size_t> camera_tokens() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < n_views; ++i) out.push_back(i * tokens_per_view);
    return out;
  }

  std::vector<std::size_t> patch_tokens() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < n_views; ++i)
      for (std::size_t k = 1; k < tokens_per_view; ++k) out.push_back(i * tokens_per_view + k);
    return out;
  }
};

namespace detail {

constexpr std::size_t kCodeDim = 8;
constexpr std::size_t kFrameCodeDim = 8;
// cam flag, ref flag, observation, patch code, frame code, bias
constexpr std::size_t kRawFeatures = 2 + 3 + kCodeDim + kFrameCodeDim + 1;
constexpr std::size_t kFrameCodeAt = 5 + kCodeDim;
constexpr std::uint64_t kEmbeddingSeed = 0x5eedf00dULL;
constexpr double kRingRadius = 2.0;
constexpr double kObservationNoise = 0.02;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Fixed raw-feature-to-token projection shared by every scene.
inline Tensor embedding(std::size_t dim) {
  std::mt19937_64 rng(kEmbeddingSeed);
  std::normal_distribution<double> n01(0.0, 1.0);
  Tensor e = Tensor::zeros(kRawFeatures, dim);
  for (double& v : e.data()) v = n01(rng) / std::sqrt(static_cast<double>(kRawFeatures));
  return e;
}

// Fixed code per patch slot, shared by every scene.
inline std::vector<std::array<double, kCodeDim>> patch_codes(std::size_t count) {
  std::mt19937_64 rng(kEmbeddingSeed ^ 0xc0deULL);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<std::array<double, kCodeDim>> codes(count);
  for (auto& c : codes)
    for (double& v : c) v = n01(rng);
  return codes;
}

}  // namespace detail

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index) {
  return detail::splitmix64(detail::splitmix64(base ^ (stream * 0x632be59bd9b4e019ULL)) + index);
}

inline SyntheticScene generate_scene(std::uint64_t seed, std::size_t n_views, std::size_t tokens_per_view,
                                     std::size_t dim = 32) {
  if (n_views < 2 || tokens_per_view < 2) throw ParameterError("generate_scene: need >= 2 views and >= 2 tokens per view");
  if (dim == 0) throw ParameterError("generate_scene: feature dimension must be positive");
  const std::size_t n_points = tokens_per_view - 1;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::normal_distribution<double> n01(0.0, 1.0);

  std::vector<geom::Vec3> points(n_points);
  // Resample until the structure is usable for similarity estimation.
  for (;;) {
    for (auto& p : points) p = geom::Vec3(unit(rng), unit(rng), 0.5 * unit(rng));
    if (n_points >= 3 && geom::covariance_rank(points) >= 2) break;
    if (n_points < 3) break;
  }
  const geom::Vec3 offset(unit(rng), unit(rng), unit(rng));
  const double phase = 3.14159265358979323846 * unit(rng);
  std::vector<geom::Vec3> cams(n_views);
  for (std::size_t i = 0; i < n_views; ++i) {
    const double a = phase + 2.0 * 3.14159265358979323846 * static_cast<double>(i) / static_cast<double>(n_views) +
                     0.1 * n01(rng);
    const double r = detail::kRingRadius * (1.0 + 0.1 * n01(rng));
    cams[i] = offset + geom::Vec3(r * std::cos(a), r * std::sin(a), 0.2 * n01(rng));
  }

  SyntheticScene s;
  s.seed = seed;
  s.n_views = n_views;
  s.tokens_per_view = tokens_per_view;
  for (std::size_t i = 0; i < n_views; ++i) s.gt_cameras.translations.push_back(cams[i] - cams[0]);
  for (std::size_t i = 0; i < n_views; ++i)
    for (std::size_t j = 0; j < n_points; ++j) s.gt_cloud.points.push_back(offset + points[j] - cams[0]);

  const auto codes = detail::patch_codes(n_points);
  constexpr std::size_t bias_at = detail::kRawFeatures - 1;
  Tensor raw = Tensor::zeros(n_views * tokens_per_view, detail::kRawFeatures);
  for (std::size_t i = 0; i < n_views; ++i) {
    std::array<double, detail::kFrameCodeDim> frame_code;
    for (double& v : frame_code) v = n01(rng);
    const std::size_t cam_tok = i * tokens_per_view;
    for (std::size_t k = 0; k < tokens_per_view; ++k) {
      const std::size_t tok = cam_tok + k;
      raw(tok, 1) = i == 0 ? 1.0 : 0.0;
      for (std::size_t c = 0; c < detail::kFrameCodeDim; ++c) raw(tok, detail::kFrameCodeAt + c) = frame_code[c];
      raw(tok, bias_at) = 1.0;
    }
    raw(cam_tok, 0) = 1.0;
    for (std::size_t j = 0; j < n_points; ++j) {
      const std::size_t tok = cam_tok + 1 + j;
      const geom::Vec3 obs = offset + points[j] - cams[i];
      for (int c = 0; c < 3; ++c) raw(tok, 2 + c) = obs(c) + detail::kObservationNoise * n01(rng);
      for (std::size_t c = 0; c < detail::kCodeDim; ++c) raw(tok, 5 + c) = codes[j][c];
    }
  }
  s.token_features = kernels::matmul(raw, detail::embedding(dim));
  return s;
}

// Scenes `index` = 0..count-1 of a seed stream.
inline std::vector<SyntheticScene> generate_scenes(std::uint64_t base_seed, std::uint64_t stream, std::size_t count,
                                                   const ModelConfig& cfg) {
  std::vector<SyntheticScene> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    out.push_back(generate_scene(derive_seed(base_seed, stream, k), cfg.n_views, cfg.tokens_per_view, cfg.dim));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameters

template <class T>
struct HeadT {
  T w_q, w_k, w_v;
};

template <class T>
struct LayerT {
  std::vector<HeadT<T>> heads;
  T w_o, ff_w1, ff_b1, ff_w2, ff_b2;
};

// Parameter tree, instantiated with Tensor (values) or Var (bound to a tape).
template <class T>
struct ParamsT {
  std::vector<LayerT<T>> layers;
  T cam_w, cam_b, pt_w, pt_b;

  // Visits every parameter in a fixed order with a stable name.
  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& layer = self.layers[l];
      const std::string lp = "layer" + std::to_string(l) + ".";
      for (std::size_t h = 0; h < layer.heads.size(); ++h) {
        const std::string hp = lp + "head" + std::to_string(h) + ".";
        f(hp + "w_q", layer.heads[h].w_q);
        f(hp + "w_k", layer.heads[h].w_k);
        f(hp + "w_v", layer.heads[h].w_v);
      }
      f(lp + "w_o", layer.w_o);
      f(lp + "ff_w1", layer.ff_w1);
      f(lp + "ff_b1", layer.ff_b1);
      f(lp + "ff_w2", layer.ff_w2);
      f(lp + "ff_b2", layer.ff_b2);
    }
    f(std::string("cam_w"), self.cam_w);
    f(std::string("cam_b"), self.cam_b);
    f(std::string("pt_w"), self.pt_w);
    f(std::string("pt_b"), self.pt_b);
  }
};

using Params = ParamsT<Tensor>;
using ParamVars = ParamsT<Var>;

// Offset of the confidence pre-activation; softplus(2) ~ 2.13 keeps fresh
// models above the confidence cutoff of 1.
constexpr double kConfidenceBias = 2.0;

struct ToyModel {
  ModelConfig config;
  Params params;
  // Training losses recorded by train_toy (empty if never trained).
  std::vector<double> loss_history;

  attn::HeadParams head(std::size_t layer, std::size_t h) const {
    const auto& p = params.layers.at(layer).heads.at(h);
    return {p.w_q, p.w_k, p.w_v};
  }
};

inline ToyModel init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  auto gaussian = [&](std::size_t r, std::size_t c, double stddev) {
    Tensor t = Tensor::zeros(r, c);
    for (double& v : t.data()) v = stddev * n01(rng);
    return t;
  };
  const double d = static_cast<double>(cfg.dim);
  ToyModel m;
  m.config = cfg;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    LayerT<Tensor> layer;
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      layer.heads.push_back({gaussian(cfg.dim, cfg.head_dim, 1.0 / std::sqrt(d)),
                             gaussian(cfg.dim, cfg.head_dim, 1.0 / std::sqrt(d)),
                             gaussian(cfg.dim, cfg.head_dim, 1.0 / std::sqrt(d))});
    }
    const double hd = static_cast<double>(cfg.n_heads * cfg.head_dim);
    layer.w_o = gaussian(cfg.n_heads * cfg.head_dim, cfg.dim, 0.5 / std::sqrt(hd));
    layer.ff_w1 = gaussian(cfg.dim, cfg.ff_dim, 1.0 / std::sqrt(d));
    layer.ff_b1 = Tensor::zeros(1, cfg.ff_dim);
    layer.ff_w2 = gaussian(cfg.ff_dim, cfg.dim, 0.5 / std::sqrt(static_cast<double>(cfg.ff_dim)));
    layer.ff_b2 = Tensor::zeros(1, cfg.dim);
    m.params.layers.push_back(std::move(layer));
  }
  m.params.cam_w = gaussian(cfg.dim, 3, 0.1 / std::sqrt(d));
  m.params.cam_b = Tensor::zeros(1, 3);
  m.params.pt_w = gaussian(cfg.dim, 4, 0.1 / std::sqrt(d));
  m.params.pt_b = Tensor::zeros(1, 4);
  m.params.pt_b[3] = kConfidenceBias;
  return m;
}

// Which parameters are recorded as differentiable leaves.
enum class GradTarget { kNone, kAll, kQuery, kKey, kValue };

inline ParamVars bind(const Params& p, Tape& tape, GradTarget target) {
  ParamVars out;
  out.layers.resize(p.layers.size());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& src = p.layers[l];
    auto& dst = out.layers[l];
    const bool all = target == GradTarget::kAll;
    for (const auto& h : src.heads) {
      dst.heads.push_back({tape.leaf(h.w_q, all || target == GradTarget::kQuery),
                           tape.leaf(h.w_k, all || target == GradTarget::kKey),
                           tape.leaf(h.w_v, all || target == GradTarget::kValue)});
    }
    dst.w_o = tape.leaf(src.w_o, all);
    dst.ff_w1 = tape.leaf(src.ff_w1, all);
    dst.ff_b1 = tape.leaf(src.ff_b1, all);
    dst.ff_w2 = tape.leaf(src.ff_w2, all);
    dst.ff_b2 = tape.leaf(src.ff_b2, all);
  }
  const bool all = target == GradTarget::kAll;
  out.cam_w = tape.leaf(p.cam_w, all);
  out.cam_b = tape.leaf(p.cam_b, all);
  out.pt_w = tape.leaf(p.pt_w, all);
  out.pt_b = tape.leaf(p.pt_b, all);
  return out;
}

// FNV-1a over the configuration and the little-endian bytes of every
// parameter, as 16 hex digits.
inline std::string fingerprint(const ToyModel& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix_u64 = [&](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xffU;
      h *= 0x100000001b3ULL;
    }
  };
  const auto& c = m.config;
  for (std::size_t v : {c.n_layers, c.n_heads, c.dim, c.head_dim, c.ff_dim, c.n_views, c.tokens_per_view, c.block_size})
    mix_u64(v);
  m.params.visit([&](const std::string&, const Tensor& t) {
    for (double v : t.data()) mix_u64(std::bit_cast<std::uint64_t>(v));
  });
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// ---------------------------------------------------------------------------
// Forward pass

// Chooses the active blocks of every head of one layer from the current
// queries and keys. An empty function means dense attention.
using BlockPlanner = std::function<std::vector<attn::BlockSelection>(
    std::size_t layer, const std::vector<const Tensor*>& queries, const std::vector<const Tensor*>& keys)>;

struct ForwardOutput {
  Var camera_translations;  // N x 3
  Var points;               // J x 3
  std::vector<double> confidence;
  // selections[layer][head]; empty for dense layers.
  std::vector<std::vector<attn::BlockSelection>> selections;
};

inline ForwardOutput forward(const ModelConfig& cfg, const ParamVars& pv, const SyntheticScene& scene, Tape& tape,
                             const BlockPlanner& planner = {}) {
  // The view count is free: attention does not depend on sequence length.
  if (scene.token_features.cols() != cfg.dim || scene.tokens_per_view != cfg.tokens_per_view) {
    throw ShapeError("forward: scene layout does not match the model configuration");
  }
  const auto protected_tokens = scene.camera_tokens();
  Var x = tape.constant(scene.token_features);
  ForwardOutput out;
  out.selections.resize(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& layer = pv.layers[l];
    std::vector<attn::Projections> proj;
    proj.reserve(layer.heads.size());
    for (const auto& h : layer.heads) proj.push_back(attn::project_qkv(x, attn::HeadVars{h.w_q, h.w_k, h.w_v}));

    std::vector<attn::BlockSelection> sel;
    if (planner) {
      std::vector<const Tensor*> qs, ks;
      for (const auto& p : proj) {
        qs.push_back(&p.q.value());
        ks.push_back(&p.k.value());
      }
      sel = planner(l, qs, ks);
      if (sel.size() != proj.size()) throw ParameterError("forward: planner returned wrong number of selections");
    }
    std::vector<Var> heads;
    for (std::size_t h = 0; h < proj.size(); ++h) {
      heads.push_back(planner ? attn::masked_attention(proj[h].q, proj[h].k, proj[h].v, sel[h], cfg.block_size,
                                                       protected_tokens)
                              : attn::dense_attention(proj[h].q, proj[h].k, proj[h].v));
    }
    out.selections[l] = std::move(sel);
    x = ad::add(x, ad::matmul(ad::concat_cols(heads), layer.w_o));
    Var hidden = ad::tanh(ad::add_row_bias(ad::matmul(x, layer.ff_w1), layer.ff_b1));
    x = ad::add(x, ad::add_row_bias(ad::matmul(hidden, layer.ff_w2), layer.ff_b2));
  }
  out.camera_translations = ad::add_row_bias(ad::matmul(ad::gather_rows(x, protected_tokens), pv.cam_w), pv.cam_b);
  Var head = ad::add_row_bias(ad::matmul(ad::gather_rows(x, scene.patch_tokens()), pv.pt_w), pv.pt_b);
  out.points = ad::slice_cols(head, 0, 3);
  const Tensor conf = ad::softplus(ad::slice_cols(head, 3, 4)).value();
  out.confidence.assign(conf.data().begin(), conf.data().end());
  return out;
}

// Predictions as plain values.
struct Prediction {
  geom::CameraSet cameras;
  geom::PointCloud cloud;
};

inline Prediction to_prediction(const ForwardOutput& f) {
  Prediction p;
  p.cameras.translations = geom::to_points(f.camera_translations.value());
  p.cloud.points = geom::to_points(f.points.value());
  p.cloud.confidence = f.confidence;
  return p;
}

// ---------------------------------------------------------------------------
// Training

// Unaligned training objective: e_cam + e_pc with H = I and every point
// counted (no inlier threshold, no confidence cutoff).
inline Var training_loss(const ForwardOutput& f, const SyntheticScene& scene, Tape& tape) {
  Var e_cam = geom::camera_pose_error(f.camera_translations, scene.gt_cameras, geom::SimilarityTransform{});
  const double n_pts = static_cast<double>(scene.gt_cloud.size());
  Var e_pc = ad::scale(ad::sum_squares(ad::sub(f.points, tape.constant(geom::to_tensor(scene.gt_cloud.points)))),
                       0.5 / n_pts);
  return ad::add(e_cam, e_pc);
}

struct TrainOptions {
  std::size_t steps = 500;
  double lr = 0.002;
  // Streamed training: scenes per step, views per scene, seed of the stream.
  std::size_t batch = 8;
  std::size_t views = 8;
  std::uint64_t seed = 0;
  std::function<void(std::size_t step, double loss)> on_step;
};

struct TrainResult {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::size_t accepted_steps = 0;
  std::size_t rejected_steps = 0;
};

namespace detail {
inline std::vector<Tensor*> param_list(Params& p) {
  std::vector<Tensor*> out;
  p.visit([&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

// Mean training loss and its gradient over `scenes`, parameters in visit order.
inline double loss_and_grad(const ToyModel& m, const std::vector<SyntheticScene>& scenes, std::vector<Tensor>* grads) {
  double total = 0.0;
  if (grads) {
    grads->clear();
    m.params.visit([&](const std::string&, const Tensor& t) { grads->emplace_back(t.shape()); });
  }
  const double inv = 1.0 / static_cast<double>(scenes.size());
  for (const auto& s : scenes) {
    Tape tape;
    ParamVars pv = bind(m.params, tape, grads ? GradTarget::kAll : GradTarget::kNone);
    auto f = forward(m.config, pv, s, tape);
    Var loss = training_loss(f, s, tape);
    total += loss.value().item();
    if (grads) {
      tape.backward(loss);
      std::size_t i = 0;
      pv.visit([&](const std::string&, const Var& v) {
        const Tensor& g = v.grad();
        Tensor& acc = (*grads)[i++];
        for (std::size_t k = 0; k < g.size(); ++k) acc[k] += inv * g[k];
      });
    }
  }
  return total * inv;
}
}  // namespace detail

inline double training_loss_value(const ToyModel& m, const std::vector<SyntheticScene>& scenes) {
  return detail::loss_and_grad(m, scenes, nullptr);
}

// Full-batch gradient descent on a fixed scene set. A step that raises the
// loss is undone and the learning rate halved, so the loss never increases.
// Throws NumericError if the loss becomes non-finite.
inline TrainResult train_toy(ToyModel& model, const std::vector<SyntheticScene>& scenes, const TrainOptions& opt) {
  TrainResult res;
  if (scenes.empty()) return res;
  auto params = detail::param_list(model.params);
  std::vector<Tensor> grads, prev_grads, prev_values;
  double lr = opt.lr;
  double prev_loss = std::numeric_limits<double>::infinity();
  for (std::size_t step = 0; step <= opt.steps; ++step) {
    double loss = detail::loss_and_grad(model, scenes, step < opt.steps ? &grads : nullptr);
    if (!std::isfinite(loss)) {
      throw NumericError("train_toy: loss diverged at step " + std::to_string(step) + " (seed " +
                         std::to_string(opt.seed) + ")");
    }
    if (step == 0) res.initial_loss = loss;
    if (loss > prev_loss) {
      for (std::size_t i = 0; i < params.size(); ++i) *params[i] = prev_values[i];
      grads = prev_grads;
      loss = prev_loss;
      lr *= 0.5;
      ++res.rejected_steps;
    } else if (step > 0) {
      ++res.accepted_steps;
    }
    if (step > 0) model.loss_history.push_back(loss);
    if (opt.on_step) opt.on_step(step, loss);
    if (step == opt.steps) {
      res.final_loss = loss;
      break;
    }
    prev_loss = loss;
    prev_values.clear();
    for (Tensor* p : params) prev_values.push_back(*p);
    prev_grads = grads;
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i];
      for (std::size_t k = 0; k < p.size(); ++k) p[k] -= lr * grads[i][k];
    }
  }
  return res;
}

// Training on a stream of freshly generated scenes (opt.batch scenes of
// opt.views views per step) with Adam updates. The learning rate drops to
// 30% for the last 40% of the steps. The losses reported are those of the
// first and last batch. Throws NumericError if the loss becomes non-finite.
inline TrainResult train_toy_stream(ToyModel& model, const TrainOptions& opt) {
  constexpr double beta1 = 0.9, beta2 = 0.999;
  TrainResult res;
  auto params = detail::param_list(model.params);
  std::vector<Tensor> m1, m2, grads;
  for (Tensor* p : params) {
    m1.emplace_back(p->shape());
    m2.emplace_back(p->shape());
  }
  for (std::size_t step = 0; step < opt.steps; ++step) {
    std::vector<SyntheticScene> batch;
    for (std::size_t b = 0; b < opt.batch; ++b) {
      batch.push_back(generate_scene(derive_seed(opt.seed, /*stream=*/1, step * opt.batch + b), opt.views,
                                     model.config.tokens_per_view, model.config.dim));
    }
    const double loss = detail::loss_and_grad(model, batch, &grads);
    if (!std::isfinite(loss)) {
      throw NumericError("train_toy: loss diverged at step " + std::to_string(step) + " (seed " +
                         std::to_string(opt.seed) + ")");
    }
    if (step == 0) res.initial_loss = loss;
    res.final_loss = loss;
    ++res.accepted_steps;
    model.loss_history.push_back(loss);
    if (opt.on_step) opt.on_step(step, loss);
    const double t = static_cast<double>(step + 1);
    const double lr = 10 * step < 6 * opt.steps ? opt.lr : 0.3 * opt.lr;
    const double bc1 = 1.0 - std::pow(beta1, t);
    const double bc2 = 1.0 - std::pow(beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i];
      const Tensor& g = grads[i];
      for (std::size_t k = 0; k < p.size(); ++k) {
        m1[i][k] = beta1 * m1[i][k] + (1.0 - beta1) * g[k];
        m2[i][k] = beta2 * m2[i][k] + (1.0 - beta2) * g[k] * g[k];
        p[k] -= lr * (m1[i][k] / bc1) / (std::sqrt(m2[i][k] / bc2) + 1e-8);
      }
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Persistence: 8-byte magic, u64 little-endian header length, JSON header
// (configuration, tensor names and shapes, fingerprint), then all parameters
// as little-endian doubles in visit order.

inline constexpr char kModelMagic[8] = {'H', 'E', 'S', 'S', 'M', 'D', 'L', '1'};

namespace detail {
inline void put_u64(std::ostream& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xffU));
}
inline std::uint64_t get_u64(std::istream& in) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    const int c = in.get();
    if (c == EOF) throw ValidationError("model file truncated");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}
}  // namespace detail

inline nlohmann::ordered_json config_to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["dim"] = c.dim;
  j["head_dim"] = c.head_dim;
  j["ff_dim"] = c.ff_dim;
  j["n_views"] = c.n_views;
  j["tokens_per_view"] = c.tokens_per_view;
  j["block_size"] = c.block_size;
  return j;
}

inline ModelConfig config_from_json(const nlohmann::ordered_json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.dim = j.at("dim").get<std::size_t>();
  c.head_dim = j.at("head_dim").get<std::size_t>();
  c.ff_dim = j.at("ff_dim").get<std::size_t>();
  c.n_views = j.at("n_views").get<std::size_t>();
  c.tokens_per_view = j.at("tokens_per_view").get<std::size_t>();
  c.block_size = j.at("block_size").get<std::size_t>();
  c.validate();
  return c;
}

inline void save_model(const ToyModel& m, std::ostream& out) {
  nlohmann::ordered_json header;
  header["format"] = "hess-toy-model";
  header["fingerprint"] = fingerprint(m);
  header["config"] = config_to_json(m.config);
  nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
  m.params.visit([&](const std::string& name, const Tensor& t) {
    nlohmann::ordered_json e;
    e["name"] = name;
    e["shape"] = t.shape();
    tensors.push_back(std::move(e));
  });
  header["tensors"] = std::move(tensors);
  header["loss_history"] = m.loss_history;
  const std::string hs = header.dump();
  out.write(kModelMagic, sizeof(kModelMagic));
  detail::put_u64(out, hs.size());
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  m.params.visit([&](const std::string&, const Tensor& t) {
    for (double v : t.data()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  });
  if (!out) throw Error("failed writing model");
}

inline ToyModel load_model(std::istream& in) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kModelMagic, 8) != 0) throw ValidationError("not a toy model file");
  const std::uint64_t len = detail::get_u64(in);
  if (len > (1u << 26)) throw ValidationError("model header too large");
  std::string hs(len, '\0');
  if (!in.read(hs.data(), static_cast<std::streamsize>(len))) throw ValidationError("model file truncated");
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(hs);
  } catch (const nlohmann::ordered_json::exception& e) {
    throw ValidationError(std::string("model header: ") + e.what());
  }
  try {
    ToyModel m = init_model(config_from_json(header.at("config")), 0);
    const auto& tensors = header.at("tensors");
    std::size_t i = 0;
    m.params.visit([&](const std::string& name, Tensor& t) {
      if (i >= tensors.size()) throw ValidationError("model header lists too few tensors");
      const auto& e = tensors[i++];
      if (e.at("name").get<std::string>() != name ||
          e.at("shape").get<std::vector<std::size_t>>() != t.shape()) {
        throw ValidationError("model tensor " + name + " does not match the configuration");
      }
      for (double& v : t.data()) v = std::bit_cast<double>(detail::get_u64(in));
    });
    if (i != tensors.size()) throw ValidationError("model header lists too many tensors");
    if (header.contains("loss_history")) m.loss_history = header["loss_history"].get<std::vector<double>>();
    if (fingerprint(m) != header.at("fingerprint").get<std::string>()) {
      throw ValidationError("model content does not match its fingerprint");
    }
    return m;
  } catch (const nlohmann::ordered_json::exception& e) {
    throw ValidationError(std::string("model header: ") + e.what());
  }
}

inline void save_model(const ToyModel& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  save_model(m, out);
}

inline ToyModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path);
  return load_model(in);
}

}  // namespace hess::toy
