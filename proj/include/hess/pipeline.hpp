#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "hess/budget.hpp"
#include "hess/calibration.hpp"
#include "hess/errors.hpp"
#include "hess/parallel.hpp"
#include "hess/sensitivity.hpp"
#include "hess/sparse_attention.hpp"
#include "hess/toy_model.hpp"

namespace hess::pipeline {

enum class Mode { kUniform, kHess, kReverse };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::kUniform: return "uniform";
    case Mode::kHess: return "hess";
    case Mode::kReverse: return "reverse";
  }
  return "?";
}

inline Mode mode_from_string(const std::string& s) {
  if (s == "uniform") return Mode::kUniform;
  if (s == "hess") return Mode::kHess;
  if (s == "reverse") return Mode::kReverse;
  throw ParameterError("unknown mode '" + s + "'");
}

inline const std::vector<Mode>& all_modes() {
  static const std::vector<Mode> m{Mode::kUniform, Mode::kHess, Mode::kReverse};
  return m;
}

struct SparseConfig {
  double tau = 1.0;
  double rho = 0.0;
  friend bool operator==(const SparseConfig&, const SparseConfig&) = default;
};

struct RunOptions {
  double eps = 0.05;
  double conf_cutoff = 1.0;
  // Every head gets round(mean baseline) instead of its own (tau, rho) budget.
  bool equal_baselines = false;
  // Divide pooled logits by sqrt(d_h) before the softmax.
  bool scale_logits = false;
  // Accept a score table calibrated on a different model.
  bool force = false;
};

struct RunResult {
  toy::Prediction prediction;
  geom::SimilarityTransform alignment;
  double e_cam = 0.0;
  // NaN when no predicted point is an inlier.
  double e_pc = 0.0;
  double sparsity = 0.0;
  // One allocation per layer; empty for dense runs.
  std::vector<budget::BudgetAllocation> allocations;
  std::vector<std::vector<attn::BlockSelection>> selections;
};

inline void evaluate(RunResult& r, const toy::SyntheticScene& scene, const RunOptions& opt) {
  r.alignment = toy::align(r.prediction.cloud, scene, {opt.conf_cutoff});
  r.e_cam = geom::camera_pose_error_value(r.prediction.cameras, scene.gt_cameras, r.alignment);
  try {
    r.e_pc = geom::point_cloud_error_value(r.prediction.cloud, scene.gt_cloud, r.alignment, opt.eps, opt.conf_cutoff);
  } catch (const SampleSkip&) {
    r.e_pc = std::numeric_limits<double>::quiet_NaN();
  }
}

inline RunResult run_dense(const toy::ToyModel& model, const toy::SyntheticScene& scene, const RunOptions& opt = {}) {
  Tape tape;
  auto pv = toy::bind(model.params, tape, toy::GradTarget::kNone);
  RunResult r;
  r.prediction = toy::to_prediction(toy::forward(model.config, pv, scene, tape));
  evaluate(r, scene, opt);
  return r;
}

// Sparse inference. Per layer and head: pooled approximate map, baseline
// budget from (tau, rho), then either the baselines unchanged (no table) or
// budgets reallocated by the table's scores, and top-c block selection.
// Camera tokens are never masked.
inline RunResult run_sparse(const toy::ToyModel& model, const toy::SyntheticScene& scene,
                            const sens::HessTable* table, SparseConfig cfg, const RunOptions& opt = {}) {
  attn::check_fraction(cfg.tau, "tau");
  attn::check_fraction(cfg.rho, "rho");
  const auto& mc = model.config;
  if (table) {
    if (table->num_layers() != mc.n_layers) throw ValidationError("score table does not cover the model's layers");
    for (std::size_t l = 0; l < mc.n_layers; ++l)
      if (table->num_heads(l) != mc.n_heads) throw ValidationError("score table does not cover the model's heads");
    const auto& fp = table->meta().model_fingerprint;
    if (!fp.empty() && fp != toy::fingerprint(model)) {
      if (!opt.force) throw FingerprintMismatch("score table was calibrated on model " + fp);
      Log::warn("score table fingerprint " + fp + " does not match the model; continuing (forced)");
    }
  }
  RunResult r;
  r.allocations.resize(mc.n_layers);
  toy::BlockPlanner planner = [&](std::size_t layer, const std::vector<const Tensor*>& qs,
                                  const std::vector<const Tensor*>& ks) {
    std::vector<attn::ApproxAttentionMap> maps;
    std::vector<std::size_t> baselines;
    for (std::size_t h = 0; h < qs.size(); ++h) {
      maps.push_back(attn::approx_map(*qs[h], *ks[h], static_cast<long long>(mc.block_size), {}, opt.scale_logits));
      baselines.push_back(attn::baseline_budget(maps.back(), cfg.tau, cfg.rho));
    }
    const std::size_t c_max = maps.front().num_blocks();
    if (opt.equal_baselines) {
      const double mean = static_cast<double>(budget::total_budget(baselines)) / static_cast<double>(baselines.size());
      std::fill(baselines.begin(), baselines.end(), std::min(c_max, static_cast<std::size_t>(std::llround(mean))));
    }
    budget::BudgetAllocation alloc;
    if (table) {
      alloc = budget::allocate_layer(table->hess(layer), baselines, c_max);
    } else {
      alloc.baseline = baselines;
      alloc.final = baselines;
      alloc.c_total = budget::total_budget(baselines, c_max);
      alloc.c_max = c_max;
      alloc.weights.assign(baselines.size(), 1.0 / static_cast<double>(baselines.size()));
      for (std::size_t c : baselines) alloc.ideal.push_back(static_cast<double>(c));
      alloc.capped_real = alloc.ideal;
      alloc.capped.assign(baselines.size(), 0);
    }
    alloc.validate();
    std::vector<attn::BlockSelection> sel;
    for (std::size_t h = 0; h < maps.size(); ++h) sel.push_back(attn::select_top_c(maps[h], alloc.final[h]));
    r.allocations[layer] = std::move(alloc);
    return sel;
  };
  Tape tape;
  auto pv = toy::bind(model.params, tape, toy::GradTarget::kNone);
  auto f = toy::forward(mc, pv, scene, tape, planner);
  r.prediction = toy::to_prediction(f);
  r.selections = std::move(f.selections);
  std::vector<attn::BlockSelection> flat;
  for (const auto& layer : r.selections) flat.insert(flat.end(), layer.begin(), layer.end());
  r.sparsity = attn::achieved_sparsity(flat);
  evaluate(r, scene, opt);
  return r;
}

// Table driving a mode: none for uniform, the table itself, or its reversed
// ranking.
inline std::optional<sens::HessTable> table_for(Mode m, const sens::HessTable& table) {
  switch (m) {
    case Mode::kUniform: return std::nullopt;
    case Mode::kHess: return table;
    case Mode::kReverse: return sens::reversed_ranking(table);
  }
  return std::nullopt;
}

struct Aggregate {
  double sparsity = 0.0;
  double e_cam = 0.0;
  double e_pc = 0.0;
  std::size_t pc_scenes = 0;  // scenes with a finite e_pc
};

// Mean over scenes; e_pc averages the scenes where it is defined.
inline Aggregate run_scenes(const toy::ToyModel& model, const std::vector<toy::SyntheticScene>& scenes,
                            const sens::HessTable* table, SparseConfig cfg, const RunOptions& opt) {
  if (scenes.empty()) throw ParameterError("no evaluation scenes");
  std::vector<RunResult> res(scenes.size());
  parallel_for(scenes.size(), [&](std::size_t i) { res[i] = run_sparse(model, scenes[i], table, cfg, opt); });
  Aggregate a;
  double pc_sum = 0.0;
  for (const auto& r : res) {
    a.sparsity += r.sparsity;
    a.e_cam += r.e_cam;
    if (std::isfinite(r.e_pc)) {
      pc_sum += r.e_pc;
      ++a.pc_scenes;
    }
  }
  const double n = static_cast<double>(res.size());
  a.sparsity /= n;
  a.e_cam /= n;
  a.e_pc = a.pc_scenes ? pc_sum / static_cast<double>(a.pc_scenes) : std::numeric_limits<double>::quiet_NaN();
  return a;
}

struct ReportRow {
  std::string mode;
  double tau = 0.0;
  double rho = 0.0;
  double sparsity = 0.0;
  double e_cam = 0.0;
  double e_pc = 0.0;
  std::uint64_t seed = 0;
};

// One row per (config, mode), averaged over the scenes. `seed` labels the
// scene set.
inline std::vector<ReportRow> sweep(const toy::ToyModel& model, const std::vector<toy::SyntheticScene>& scenes,
                                    const sens::HessTable& table, const std::vector<SparseConfig>& configs,
                                    const std::vector<Mode>& modes, std::uint64_t seed, const RunOptions& opt = {}) {
  if (configs.empty()) throw ParameterError("sweep: empty configuration grid");
  std::vector<ReportRow> rows;
  for (const auto& cfg : configs) {
    for (Mode m : modes) {
      const auto t = table_for(m, table);
      const auto a = run_scenes(model, scenes, t ? &*t : nullptr, cfg, opt);
      rows.push_back({to_string(m), cfg.tau, cfg.rho, a.sparsity, a.e_cam, a.e_pc, seed});
    }
  }
  return rows;
}

struct LambdaRow {
  double lambda = 0.0;
  double tau = 0.0;
  double rho = 0.0;
  double sparsity = 0.0;
  double e_cam = 0.0;
  double e_pc = 0.0;
};

// Re-weights the stored normalized components for each lambda; no
// recalibration.
inline std::vector<LambdaRow> ablate_lambda(const toy::ToyModel& model, const std::vector<toy::SyntheticScene>& scenes,
                                            const sens::HessTable& table, const std::vector<double>& lambdas,
                                            SparseConfig cfg, const RunOptions& opt = {}) {
  std::vector<LambdaRow> rows;
  for (double lambda : lambdas) {
    const auto t = sens::with_lambda(table, lambda);
    const auto a = run_scenes(model, scenes, &t, cfg, opt);
    rows.push_back({lambda, cfg.tau, cfg.rho, a.sparsity, a.e_cam, a.e_pc});
  }
  return rows;
}

// The grid entry with the largest sparse ratio (ties: smallest tau).
inline SparseConfig highest_sparsity(const std::vector<SparseConfig>& grid) {
  if (grid.empty()) throw ParameterError("empty configuration grid");
  return *std::max_element(grid.begin(), grid.end(), [](const SparseConfig& a, const SparseConfig& b) {
    return a.rho != b.rho ? a.rho < b.rho : a.tau > b.tau;
  });
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw ParameterError("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Scenes for evaluation seed `seed`.
inline std::vector<toy::SyntheticScene> eval_scenes(const toy::ModelConfig& cfg, std::uint64_t seed,
                                                    std::size_t count) {
  return toy::generate_scenes(seed, /*stream=*/3, count, cfg);
}

struct SeedResult {
  std::uint64_t seed = 0;
  Aggregate agg;
};

// Per-seed aggregates for one mode and configuration.
inline std::vector<SeedResult> per_seed(const toy::ToyModel& model, const sens::HessTable& table, Mode mode,
                                        SparseConfig cfg, const std::vector<std::uint64_t>& seeds,
                                        std::size_t scenes_per_seed, const RunOptions& opt = {}) {
  const auto t = table_for(mode, table);
  std::vector<SeedResult> out;
  for (std::uint64_t s : seeds) {
    out.push_back({s, run_scenes(model, eval_scenes(model.config, s, scenes_per_seed), t ? &*t : nullptr, cfg, opt)});
  }
  return out;
}

enum class Verdict { kPass, kFail, kInconclusive };

inline std::string to_string(Verdict v) {
  switch (v) {
    case Verdict::kPass: return "PASS";
    case Verdict::kFail: return "FAIL";
    case Verdict::kInconclusive: return "INCONCLUSIVE";
  }
  return "?";
}

struct SanityReport {
  SparseConfig config;
  std::vector<SeedResult> hess, reverse;
  double median_hess = 0.0;
  double median_reverse = 0.0;
  double sparsity = 0.0;
  Verdict verdict = Verdict::kInconclusive;
};

// hess vs reversed ranking over several seeds. PASS iff the median e_cam of
// hess is strictly below that of reverse; INCONCLUSIVE when nothing is
// masked (both modes coincide).
inline SanityReport sanity(const toy::ToyModel& model, const sens::HessTable& table, SparseConfig cfg,
                           const std::vector<std::uint64_t>& seeds, std::size_t scenes_per_seed,
                           const RunOptions& opt = {}) {
  SanityReport rep;
  rep.config = cfg;
  rep.hess = per_seed(model, table, Mode::kHess, cfg, seeds, scenes_per_seed, opt);
  rep.reverse = per_seed(model, table, Mode::kReverse, cfg, seeds, scenes_per_seed, opt);
  std::vector<double> a, b;
  for (const auto& r : rep.hess) {
    a.push_back(r.agg.e_cam);
    rep.sparsity += r.agg.sparsity / static_cast<double>(rep.hess.size());
  }
  for (const auto& r : rep.reverse) b.push_back(r.agg.e_cam);
  rep.median_hess = median(a);
  rep.median_reverse = median(b);
  if (rep.sparsity == 0.0) {
    rep.verdict = Verdict::kInconclusive;
  } else {
    rep.verdict = rep.median_hess < rep.median_reverse ? Verdict::kPass : Verdict::kFail;
  }
  return rep;
}

}  // namespace hess::pipeline
