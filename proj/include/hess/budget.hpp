#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "hess/errors.hpp"

namespace hess::budget {

// Per-head block budgets of one layer after reallocation.
struct BudgetAllocation {
  std::vector<std::size_t> baseline;
  std::vector<double> weights;
  // c_total * w_h, before capping.
  std::vector<double> ideal;
  // Real-valued water-filling fixed point.
  std::vector<double> capped_real;
  std::vector<char> capped;
  std::vector<std::size_t> final;
  std::size_t c_total = 0;
  std::size_t c_max = 0;
  std::size_t rounds = 0;

  std::size_t num_heads() const noexcept { return final.size(); }

  void validate() const {
    const std::size_t sum = std::accumulate(final.begin(), final.end(), std::size_t{0});
    if (sum != c_total) {
      throw Error("BudgetAllocation: final budgets sum to " + std::to_string(sum) + ", expected " +
                  std::to_string(c_total));
    }
    for (std::size_t c : final)
      if (c > c_max) throw Error("BudgetAllocation: budget above per-head capacity");
  }
};

inline std::size_t total_budget(std::span<const std::size_t> baselines) {
  return std::accumulate(baselines.begin(), baselines.end(), std::size_t{0});
}

inline std::size_t total_budget(std::span<const std::size_t> baselines, std::size_t c_max) {
  for (std::size_t c : baselines)
    if (c > c_max) throw ParameterError("total_budget: baseline exceeds per-head capacity");
  return total_budget(baselines);
}

// w_h = score_h / sum(score); all-zero scores fall back to uniform weights.
inline std::vector<double> realloc_weights(std::span<const double> scores) {
  if (scores.empty()) throw ParameterError("realloc_weights: no heads");
  double total = 0.0;
  for (double s : scores) {
    if (!(s >= 0.0) || !std::isfinite(s)) throw ParameterError("realloc_weights: scores must be finite and >= 0");
    total += s;
  }
  std::vector<double> w(scores.size());
  if (total == 0.0) {
    Log::warn("realloc_weights: all scores are zero, using uniform weights");
    std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(scores.size()));
    return w;
  }
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = scores[i] / total;
  return w;
}

// Real-valued capping loop. Each round caps every head above c_max and
// spreads the surplus over the still-uncapped heads in proportion to their
// original weights. A head, once capped, stays capped, so there are at most
// H rounds.
inline std::vector<double> waterfill_real(double c_total, std::span<const double> weights, double c_max,
                                          std::vector<char>& capped, std::size_t& rounds) {
  const std::size_t n = weights.size();
  std::vector<double> alloc(n);
  for (std::size_t h = 0; h < n; ++h) alloc[h] = c_total * weights[h];
  capped.assign(n, 0);
  rounds = 0;
  for (;;) {
    double surplus = 0.0;
    bool any = false;
    for (std::size_t h = 0; h < n; ++h) {
      if (!capped[h] && alloc[h] > c_max) {
        surplus += alloc[h] - c_max;
        alloc[h] = c_max;
        capped[h] = 1;
        any = true;
      }
    }
    if (!any) break;
    ++rounds;
    double w_free = 0.0;
    std::size_t n_free = 0;
    for (std::size_t h = 0; h < n; ++h) {
      if (!capped[h]) {
        w_free += weights[h];
        ++n_free;
      }
    }
    if (n_free == 0) break;
    for (std::size_t h = 0; h < n; ++h) {
      if (capped[h]) continue;
      // Uncapped heads with zero total weight share the surplus evenly.
      alloc[h] += w_free > 0.0 ? surplus * weights[h] / w_free : surplus / static_cast<double>(n_free);
    }
  }
  return alloc;
}

// Integer budgets summing exactly to c_total, each at most c_max.
inline BudgetAllocation waterfill(std::size_t c_total, std::span<const double> weights, std::size_t c_max) {
  const std::size_t n = weights.size();
  if (n == 0) throw ParameterError("waterfill: no heads");
  double wsum = 0.0;
  for (double w : weights) {
    if (std::isnan(w)) throw ParameterError("waterfill: NaN weight");
    if (w < 0.0 || !std::isfinite(w)) throw ParameterError("waterfill: weights must be finite and >= 0");
    wsum += w;
  }
  if (std::abs(wsum - 1.0) > 1e-9) throw ParameterError("waterfill: weights must sum to 1");
  if (c_total > n * c_max) {
    throw InfeasibleError("waterfill: total budget " + std::to_string(c_total) + " exceeds " + std::to_string(n) +
                          " x " + std::to_string(c_max));
  }

  BudgetAllocation a;
  a.c_total = c_total;
  a.c_max = c_max;
  a.weights.assign(weights.begin(), weights.end());
  a.ideal.resize(n);
  for (std::size_t h = 0; h < n; ++h) a.ideal[h] = static_cast<double>(c_total) * weights[h];
  a.capped_real = waterfill_real(static_cast<double>(c_total), weights, static_cast<double>(c_max), a.capped, a.rounds);

  // Largest-remainder rounding over the uncapped heads; ties go to the lower
  // head index.
  a.final.assign(n, 0);
  long long remaining = static_cast<long long>(c_total);
  std::vector<std::pair<double, std::size_t>> fractions;
  for (std::size_t h = 0; h < n; ++h) {
    if (a.capped[h]) {
      a.final[h] = c_max;
    } else {
      const double v = std::clamp(a.capped_real[h], 0.0, static_cast<double>(c_max));
      a.final[h] = static_cast<std::size_t>(std::floor(v));
      fractions.emplace_back(v - std::floor(v), h);
    }
    remaining -= static_cast<long long>(a.final[h]);
  }
  std::stable_sort(fractions.begin(), fractions.end(),
                   [](const auto& x, const auto& y) { return x.first > y.first; });
  for (const auto& [frac, h] : fractions) {
    if (remaining <= 0) break;
    if (a.final[h] < c_max) {
      ++a.final[h];
      --remaining;
    }
  }
  // Floating error in the fixed point can leave a unit unassigned.
  for (std::size_t h = 0; remaining > 0 && h < n; ++h) {
    while (remaining > 0 && a.final[h] < c_max) {
      ++a.final[h];
      --remaining;
    }
  }
  a.validate();
  return a;
}

// total_budget -> realloc_weights -> waterfill.
inline BudgetAllocation allocate_layer(std::span<const double> scores, std::span<const std::size_t> baselines,
                                       std::size_t c_max) {
  if (scores.size() != baselines.size()) throw ParameterError("allocate_layer: score and baseline counts differ");
  const std::size_t c_total = total_budget(baselines, c_max);
  const auto w = realloc_weights(scores);
  BudgetAllocation a = waterfill(c_total, w, c_max);
  a.baseline.assign(baselines.begin(), baselines.end());
  return a;
}

}  // namespace hess::budget
