#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "hess/errors.hpp"
#include "hess/tensor.hpp"

namespace hess::sens {

struct HeadId {
  std::size_t layer = 0;
  std::size_t head = 0;
  auto operator<=>(const HeadId&) const = default;
};

// Per-layer, per-head values: scores[layer][head].
using LayerScores = std::vector<std::vector<double>>;

// tr(mean_x g(x) g(x)^T) = mean_x |g(x)|_F^2; the outer products are never formed.
inline double fim_trace(std::span<const Tensor> grads) {
  if (grads.empty()) throw ParameterError("fim_trace: no gradients");
  double acc = 0.0;
  for (const Tensor& g : grads) {
    if (!g.same_shape(grads.front())) throw ShapeError("fim_trace: inconsistent gradient shapes");
    acc += kernels::sum_squares(g);
  }
  return acc / static_cast<double>(grads.size());
}

// Correctly rounded floating-point sum (Shewchuk partials, as in Python's
// math.fsum). The result does not depend on the order of the terms.
class ExactSum {
 public:
  void add(double x) {
    std::size_t i = 0;
    for (double y : partials_) {
      if (std::abs(x) < std::abs(y)) std::swap(x, y);
      const double hi = x + y;
      const double lo = y - (hi - x);
      if (lo != 0.0) partials_[i++] = lo;
      x = hi;
    }
    partials_.resize(i);
    partials_.push_back(x);
  }

  double value() const {
    if (partials_.empty()) return 0.0;
    std::size_t n = partials_.size();
    double hi = partials_[--n];
    double lo = 0.0;
    while (n > 0) {
      const double x = hi;
      const double y = partials_[--n];
      hi = x + y;
      lo = y - (hi - x);
      if (lo != 0.0) break;
    }
    // Round-half-even correction across the remaining partials.
    if (n > 0 && ((lo < 0.0 && partials_[n - 1] < 0.0) || (lo > 0.0 && partials_[n - 1] > 0.0))) {
      const double y = lo * 2.0;
      const double x = hi + y;
      if (y == x - hi) hi = x;
    }
    return hi;
  }

 private:
  std::vector<double> partials_;
};

// Accumulates squared gradient norms one sample at a time. The running sum
// is exact, so the trace is independent of sample order and unchanged when
// the sample set is duplicated.
class FimTraceAccumulator {
 public:
  void add(double squared_norm) {
    sum_.add(squared_norm);
    ++count_;
  }
  void add(const Tensor& grad) { add(kernels::sum_squares(grad)); }
  std::size_t count() const noexcept { return count_; }
  double trace() const {
    if (count_ == 0) throw ParameterError("fim_trace: no gradients");
    return sum_.value() / static_cast<double>(count_);
  }

 private:
  ExactSum sum_;
  std::size_t count_ = 0;
};

// Divides every head's trace by its layer total. A layer whose total is zero
// falls back to uniform scores and logs a warning.
inline LayerScores normalize_layer(const LayerScores& traces) {
  LayerScores out(traces.size());
  for (std::size_t l = 0; l < traces.size(); ++l) {
    const auto& row = traces[l];
    if (row.empty()) throw ParameterError("normalize_layer: layer without heads");
    double total = 0.0;
    for (double v : row) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw ParameterError("normalize_layer: traces must be finite and >= 0");
      total += v;
    }
    out[l].resize(row.size());
    if (total == 0.0) {
      Log::warn("layer " + std::to_string(l) + ": all sensitivity traces are zero, using uniform scores");
      std::fill(out[l].begin(), out[l].end(), 1.0 / static_cast<double>(row.size()));
      continue;
    }
    for (std::size_t h = 0; h < row.size(); ++h) out[l][h] = row[h] / total;
  }
  return out;
}

struct HeadScore {
  double hess_cam = 0.0;
  double hess_pc = 0.0;
  double hess = 0.0;
};

struct CalibrationMeta {
  std::string model_fingerprint;
  std::uint64_t seed = 0;
  std::size_t num_samples = 0;
};

// Calibrated head sensitivity scores. Per layer the cam, pc and combined
// columns each sum to one, and hess = lambda * cam + (1 - lambda) * pc.
class HessTable {
 public:
  static constexpr double kSimplexTol = 1e-9;

  HessTable() = default;
  HessTable(double lambda, std::vector<std::vector<HeadScore>> layers, CalibrationMeta meta = {})
      : lambda_(lambda), layers_(std::move(layers)), meta_(std::move(meta)) {
    validate();
  }

  double lambda() const noexcept { return lambda_; }
  const CalibrationMeta& meta() const noexcept { return meta_; }
  std::size_t num_layers() const noexcept { return layers_.size(); }
  std::size_t num_heads(std::size_t layer) const { return layers_.at(layer).size(); }
  const HeadScore& at(HeadId id) const { return layers_.at(id.layer).at(id.head); }
  const std::vector<HeadScore>& layer(std::size_t l) const { return layers_.at(l); }

  std::vector<double> hess(std::size_t l) const { return column(l, &HeadScore::hess); }
  std::vector<double> hess_cam(std::size_t l) const { return column(l, &HeadScore::hess_cam); }
  std::vector<double> hess_pc(std::size_t l) const { return column(l, &HeadScore::hess_pc); }

  LayerScores cam_scores() const { return columns(&HeadScore::hess_cam); }
  LayerScores pc_scores() const { return columns(&HeadScore::hess_pc); }
  LayerScores combined_scores() const { return columns(&HeadScore::hess); }

  void validate() const {
    if (!(lambda_ >= 0.0 && lambda_ <= 1.0)) throw ValidationError("HessTable: lambda outside [0, 1]");
    if (layers_.empty()) throw ValidationError("HessTable: no layers");
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& row = layers_[l];
      if (row.empty()) throw ValidationError("HessTable: layer " + std::to_string(l) + " has no heads");
      double sc = 0.0, sp = 0.0, sh = 0.0;
      for (const auto& s : row) {
        for (double v : {s.hess_cam, s.hess_pc, s.hess}) {
          if (!(v >= 0.0 && v <= 1.0 + kSimplexTol)) {
            throw ValidationError("HessTable: score outside [0, 1] in layer " + std::to_string(l));
          }
        }
        if (std::abs(s.hess - (lambda_ * s.hess_cam + (1.0 - lambda_) * s.hess_pc)) > kSimplexTol) {
          throw ValidationError("HessTable: combined score inconsistent with lambda in layer " + std::to_string(l));
        }
        sc += s.hess_cam;
        sp += s.hess_pc;
        sh += s.hess;
      }
      for (double s : {sc, sp, sh}) {
        if (std::abs(s - 1.0) > kSimplexTol) {
          throw ValidationError("HessTable: layer " + std::to_string(l) + " scores sum to " + std::to_string(s));
        }
      }
    }
  }

  friend bool operator==(const HessTable& a, const HessTable& b) {
    if (a.lambda_ != b.lambda_ || a.layers_.size() != b.layers_.size()) return false;
    if (a.meta_.model_fingerprint != b.meta_.model_fingerprint || a.meta_.seed != b.meta_.seed ||
        a.meta_.num_samples != b.meta_.num_samples)
      return false;
    for (std::size_t l = 0; l < a.layers_.size(); ++l) {
      if (a.layers_[l].size() != b.layers_[l].size()) return false;
      for (std::size_t h = 0; h < a.layers_[l].size(); ++h) {
        const auto& x = a.layers_[l][h];
        const auto& y = b.layers_[l][h];
        if (x.hess_cam != y.hess_cam || x.hess_pc != y.hess_pc || x.hess != y.hess) return false;
      }
    }
    return true;
  }

 private:
  std::vector<double> column(std::size_t l, double HeadScore::*field) const {
    std::vector<double> out;
    for (const auto& s : layers_.at(l)) out.push_back(s.*field);
    return out;
  }
  LayerScores columns(double HeadScore::*field) const {
    LayerScores out;
    for (std::size_t l = 0; l < layers_.size(); ++l) out.push_back(column(l, field));
    return out;
  }

  double lambda_ = 0.5;
  std::vector<std::vector<HeadScore>> layers_;
  CalibrationMeta meta_;
};

// hess = lambda * cam + (1 - lambda) * pc, head by head.
inline HessTable combine(const LayerScores& cam, const LayerScores& pc, double lambda, CalibrationMeta meta = {}) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ParameterError("combine: lambda must lie in [0, 1]");
  if (cam.size() != pc.size()) throw ParameterError("combine: layer counts differ");
  std::vector<std::vector<HeadScore>> layers(cam.size());
  for (std::size_t l = 0; l < cam.size(); ++l) {
    if (cam[l].size() != pc[l].size()) throw ParameterError("combine: head sets differ in layer " + std::to_string(l));
    for (std::size_t h = 0; h < cam[l].size(); ++h) {
      layers[l].push_back({cam[l][h], pc[l][h], lambda * cam[l][h] + (1.0 - lambda) * pc[l][h]});
    }
  }
  return HessTable(lambda, std::move(layers), std::move(meta));
}

// Same components, different lambda.
inline HessTable with_lambda(const HessTable& table, double lambda) {
  return combine(table.cam_scores(), table.pc_scores(), lambda, table.meta());
}

// Table whose rows are permuted so that the head ranked i-th by combined
// score receives the scores of the head ranked (H-1-i)-th. Ties rank by head
// index.
inline HessTable reversed_ranking(const HessTable& table) {
  std::vector<std::vector<HeadScore>> layers(table.num_layers());
  for (std::size_t l = 0; l < table.num_layers(); ++l) {
    const auto& row = table.layer(l);
    std::vector<std::size_t> order(row.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return row[a].hess > row[b].hess; });
    layers[l].resize(row.size());
    const std::size_t n = row.size();
    for (std::size_t i = 0; i < n; ++i) layers[l][order[i]] = row[order[n - 1 - i]];
  }
  return HessTable(table.lambda(), std::move(layers), table.meta());
}

// Equal scores everywhere; reallocation with it reproduces proportional
// splitting of the total budget.
inline HessTable uniform_table(std::size_t num_layers, std::size_t num_heads, double lambda = 0.5) {
  LayerScores u(num_layers, std::vector<double>(num_heads, 1.0 / static_cast<double>(num_heads)));
  return combine(u, u, lambda);
}

using json = nlohmann::ordered_json;

inline json to_json(const HessTable& table) {
  json j;
  j["lambda"] = table.lambda();
  j["model_fingerprint"] = table.meta().model_fingerprint;
  j["seed"] = table.meta().seed;
  j["num_samples"] = table.meta().num_samples;
  json layers = json::array();
  for (std::size_t l = 0; l < table.num_layers(); ++l) {
    json heads = json::array();
    for (std::size_t h = 0; h < table.num_heads(l); ++h) {
      const auto& s = table.at({l, h});
      json e;
      e["head"] = h;
      e["hess_cam"] = s.hess_cam;
      e["hess_pc"] = s.hess_pc;
      e["hess"] = s.hess;
      heads.push_back(std::move(e));
    }
    json le;
    le["layer"] = l;
    le["heads"] = std::move(heads);
    layers.push_back(std::move(le));
  }
  j["layers"] = std::move(layers);
  return j;
}

// Parses and validates a table. A fingerprint differing from `expected`
// throws FingerprintMismatch unless `force` is set, in which case it only
// warns.
inline HessTable from_json(const json& j, const std::optional<std::string>& expected_fingerprint = std::nullopt,
                           bool force = false) {
  try {
    CalibrationMeta meta;
    meta.model_fingerprint = j.at("model_fingerprint").get<std::string>();
    meta.seed = j.at("seed").get<std::uint64_t>();
    meta.num_samples = j.at("num_samples").get<std::size_t>();
    const double lambda = j.at("lambda").get<double>();
    const auto& layers_json = j.at("layers");
    std::vector<std::vector<HeadScore>> layers(layers_json.size());
    for (const auto& le : layers_json) {
      const auto l = le.at("layer").get<std::size_t>();
      if (l >= layers.size() || !layers[l].empty()) throw ValidationError("HessTable: bad or duplicate layer index");
      const auto& heads = le.at("heads");
      layers[l].resize(heads.size());
      std::vector<char> seen(heads.size(), 0);
      for (const auto& he : heads) {
        const auto h = he.at("head").get<std::size_t>();
        if (h >= heads.size() || seen[h]) throw ValidationError("HessTable: bad or duplicate head index");
        seen[h] = 1;
        layers[l][h] = {he.at("hess_cam").get<double>(), he.at("hess_pc").get<double>(), he.at("hess").get<double>()};
      }
    }
    if (expected_fingerprint && *expected_fingerprint != meta.model_fingerprint) {
      const std::string msg = "HessTable fingerprint " + meta.model_fingerprint + " does not match model " +
                              *expected_fingerprint;
      if (!force) throw FingerprintMismatch(msg);
      Log::warn(msg + " (accepted because of --force)");
    }
    return HessTable(lambda, std::move(layers), std::move(meta));
  } catch (const json::exception& e) {
    throw ValidationError(std::string("HessTable: malformed document: ") + e.what());
  }
}

inline void save(const HessTable& table, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << to_json(table).dump(2) << '\n';
}

inline HessTable load(const std::string& path, const std::optional<std::string>& expected_fingerprint = std::nullopt,
                      bool force = false) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError("HessTable: " + path + ": " + e.what());
  }
  return from_json(j, expected_fingerprint, force);
}

}  // namespace hess::sens
