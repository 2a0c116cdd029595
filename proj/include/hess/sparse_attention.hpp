#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "hess/autodiff.hpp"
#include "hess/errors.hpp"
#include "hess/tensor.hpp"

namespace hess::attn {

// Per-head projection weights, each d x d_h.
struct HeadParams {
  Tensor w_q;
  Tensor w_k;
  Tensor w_v;

  std::size_t model_dim() const { return w_q.rows(); }
  std::size_t head_dim() const { return w_q.cols(); }

  void validate() const {
    if (!w_q.same_shape(w_k) || !w_q.same_shape(w_v) || w_q.rank() != 2) {
      throw ShapeError("HeadParams: W_Q, W_K, W_V must share shape d x d_h");
    }
    if (!w_q.all_finite() || !w_k.all_finite() || !w_v.all_finite()) {
      throw NumericError("HeadParams: non-finite projection weight");
    }
  }
};

struct HeadVars {
  Var w_q;
  Var w_k;
  Var w_v;
};

struct Projections {
  Var q;
  Var k;
  Var v;
};

inline Projections project_qkv(Var x, const HeadVars& w) {
  const std::size_t d = x.value().cols();
  for (Var p : {w.w_q, w.w_k, w.w_v}) {
    if (p.value().rows() != d) {
      throw ShapeError("project_qkv: input has " + std::to_string(d) + " columns, projection expects " +
                       std::to_string(p.value().rows()));
    }
  }
  return {ad::matmul(x, w.w_q), ad::matmul(x, w.w_k), ad::matmul(x, w.w_v)};
}

// Records the weights as constants; use HeadVars directly to differentiate
// with respect to them.
inline Projections project_qkv(Var x, const HeadParams& params) {
  params.validate();
  Tape& t = *x.tape();
  return project_qkv(x, HeadVars{t.constant(params.w_q), t.constant(params.w_k), t.constant(params.w_v)});
}

namespace detail {
inline void check_qkv(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (!q.same_shape(k) || q.rows() != v.rows()) {
    throw ShapeError("attention: Q " + q.shape_str() + ", K " + k.shape_str() + ", V " + v.shape_str() +
                     " are inconsistent");
  }
}
}  // namespace detail

// softmax(Q K^T / sqrt(d_h)) V
inline Var dense_attention(Var q, Var k, Var v) {
  detail::check_qkv(q.value(), k.value(), v.value());
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.value().cols()));
  Var logits = ad::scale(ad::matmul_bt(q, k), inv_sqrt);
  return ad::matmul(ad::softmax_rows(logits), v);
}

// Row-softmaxed pooled logits. B_q = B_k = ceil(S / b).
class ApproxAttentionMap {
 public:
  ApproxAttentionMap() = default;

  // Validates that each row is a probability distribution.
  static ApproxAttentionMap from_probs(Tensor probs, std::size_t block_size, std::vector<char> protected_blocks = {}) {
    if (block_size == 0) throw ParameterError("ApproxAttentionMap: block size must be >= 1");
    for (std::size_t r = 0; r < probs.rows(); ++r) {
      double s = 0.0;
      for (double p : probs.row(r)) {
        if (!(p >= 0.0) || !std::isfinite(p)) throw NumericError("ApproxAttentionMap: invalid probability");
        s += p;
      }
      if (std::abs(s - 1.0) > 1e-9) {
        throw NumericError("ApproxAttentionMap: row " + std::to_string(r) + " sums to " + std::to_string(s));
      }
    }
    if (protected_blocks.empty()) protected_blocks.assign(probs.size(), 0);
    if (protected_blocks.size() != probs.size()) throw ShapeError("ApproxAttentionMap: protected mask size mismatch");
    ApproxAttentionMap m;
    m.probs_ = std::move(probs);
    m.block_size_ = block_size;
    m.protected_ = std::move(protected_blocks);
    return m;
  }

  const Tensor& probs() const noexcept { return probs_; }
  std::size_t block_size() const noexcept { return block_size_; }
  std::size_t block_rows() const { return probs_.rows(); }
  std::size_t block_cols() const { return probs_.cols(); }
  std::size_t num_blocks() const { return probs_.size(); }
  bool is_protected(std::size_t flat) const { return protected_[flat] != 0; }
  const std::vector<char>& protected_mask() const noexcept { return protected_; }

 private:
  Tensor probs_;
  std::size_t block_size_ = 1;
  std::vector<char> protected_;
};

// P = softmax(pool_b(Q) pool_b(K)^T). The pooled logits are not scaled by
// 1/sqrt(d_h) unless `scale_logits` is set. Blocks holding a protected token
// in either role are flagged.
inline ApproxAttentionMap approx_map(const Tensor& q, const Tensor& k, long long block,
                                     std::span<const std::size_t> protected_tokens = {}, bool scale_logits = false) {
  if (block <= 0) throw ParameterError("approx_map: block size must be >= 1");
  if (!q.same_shape(k)) throw ShapeError("approx_map: Q and K shapes differ");
  Tensor logits = kernels::matmul_bt(kernels::avg_pool_rows(q, block), kernels::avg_pool_rows(k, block));
  if (scale_logits) {
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    for (double& v : logits.data()) v *= inv_sqrt;
  }
  Tensor probs = kernels::softmax_rows(logits);
  const auto b = static_cast<std::size_t>(block);
  const std::size_t nb = probs.rows();
  std::vector<char> prot(nb * nb, 0);
  for (std::size_t tok : protected_tokens) {
    if (tok >= q.rows()) throw ShapeError("approx_map: protected token index out of range");
    const std::size_t g = tok / b;
    for (std::size_t j = 0; j < nb; ++j) {
      prot[g * nb + j] = 1;
      prot[j * nb + g] = 1;
    }
  }
  return ApproxAttentionMap::from_probs(std::move(probs), b, std::move(prot));
}

// Active block set over a B_q x B_k grid. `budget_used` counts only blocks
// chosen by score; protected blocks are added on top of it.
class BlockSelection {
 public:
  BlockSelection() = default;
  BlockSelection(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), active_(rows * cols, 0) {}

  static BlockSelection full(std::size_t rows, std::size_t cols) {
    BlockSelection s(rows, cols);
    std::fill(s.active_.begin(), s.active_.end(), 1);
    s.budget_used_ = rows * cols;
    return s;
  }

  std::size_t block_rows() const noexcept { return rows_; }
  std::size_t block_cols() const noexcept { return cols_; }
  std::size_t num_blocks() const noexcept { return active_.size(); }
  std::size_t budget_used() const noexcept { return budget_used_; }
  bool is_active(std::size_t r, std::size_t c) const { return active_[r * cols_ + c] != 0; }
  bool is_active(std::size_t flat) const { return active_[flat] != 0; }
  const std::vector<char>& mask() const noexcept { return active_; }

  std::size_t active_count() const {
    return static_cast<std::size_t>(std::count(active_.begin(), active_.end(), char{1}));
  }

 private:
  friend BlockSelection select_prefix(const ApproxAttentionMap&, std::size_t);

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<char> active_;
  std::size_t budget_used_ = 0;
};

// Flat block indices by probability, descending; equal probabilities keep
// ascending (row, col) order.
inline std::vector<std::size_t> rank_blocks(const ApproxAttentionMap& map) {
  std::vector<std::size_t> order(map.num_blocks());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto& p = map.probs();
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
  return order;
}

// Top `count` ranked blocks plus every protected block.
inline BlockSelection select_prefix(const ApproxAttentionMap& map, std::size_t count) {
  if (count > map.num_blocks()) {
    throw ParameterError("select: budget " + std::to_string(count) + " exceeds block count " +
                         std::to_string(map.num_blocks()));
  }
  BlockSelection sel(map.block_rows(), map.block_cols());
  const auto order = rank_blocks(map);
  for (std::size_t i = 0; i < count; ++i) sel.active_[order[i]] = 1;
  for (std::size_t i = 0; i < map.num_blocks(); ++i)
    if (map.is_protected(i)) sel.active_[i] = 1;
  sel.budget_used_ = count;
  return sel;
}

inline void check_fraction(double v, const char* name) {
  if (!(v >= 0.0 && v <= 1.0)) throw ParameterError(std::string(name) + " must lie in [0, 1]");
}

// Number of top blocks kept by the CDF-threshold / sparse-ratio rule:
// max(smallest m with cumulative mass >= tau * total, floor(B * (1 - rho))).
inline std::size_t baseline_budget(const ApproxAttentionMap& map, double tau, double rho) {
  check_fraction(tau, "tau");
  check_fraction(rho, "rho");
  const std::size_t nb = map.num_blocks();
  const auto order = rank_blocks(map);
  const auto& p = map.probs();
  // Total mass summed in ranked order so that tau = 1 reaches it exactly.
  double total = 0.0;
  for (std::size_t idx : order) total += p[idx];
  const double target = tau * total;
  std::size_t m_cdf = 0;
  double cum = 0.0;
  while (m_cdf < nb && cum < target) cum += p[order[m_cdf++]];
  // The small offset keeps e.g. 10 * (1 - 0.9) from flooring to 0.
  const auto k_min = static_cast<std::size_t>(std::floor(static_cast<double>(nb) * (1.0 - rho) + 1e-9));
  return std::min(nb, std::max(m_cdf, k_min));
}

inline BlockSelection select_blocks(const ApproxAttentionMap& map, double tau, double rho) {
  return select_prefix(map, baseline_budget(map, tau, rho));
}

inline BlockSelection select_top_c(const ApproxAttentionMap& map, std::size_t c) { return select_prefix(map, c); }

// Token-level keep mask (S x S, row-major) for a block selection. Pairs with a
// protected token in either role are always kept.
inline std::vector<char> token_keep_mask(std::size_t seq_len, const BlockSelection& sel, std::size_t block,
                                         std::span<const std::size_t> protected_tokens = {}) {
  if (block == 0) throw ParameterError("masked_attention: block size must be >= 1");
  const std::size_t nb = kernels::pooled_rows(seq_len, block);
  if (sel.block_rows() != nb || sel.block_cols() != nb) {
    throw ShapeError("masked_attention: selection grid " + std::to_string(sel.block_rows()) + "x" +
                     std::to_string(sel.block_cols()) + " does not match ceil(S/b) = " + std::to_string(nb));
  }
  std::vector<char> prot(seq_len, 0);
  for (std::size_t t : protected_tokens) {
    if (t >= seq_len) throw ShapeError("masked_attention: protected token index out of range");
    prot[t] = 1;
  }
  std::vector<char> keep(seq_len * seq_len, 0);
  for (std::size_t q = 0; q < seq_len; ++q) {
    bool any = false;
    for (std::size_t k = 0; k < seq_len; ++k) {
      const bool on = prot[q] || prot[k] || sel.is_active(q / block, k / block);
      keep[q * seq_len + k] = on ? 1 : 0;
      any = any || on;
    }
    if (!any) throw NumericError("masked_attention: query row " + std::to_string(q) + " has no active key");
  }
  return keep;
}

// Dense attention with the logits of all inactive token pairs set to -inf.
inline Var masked_attention(Var q, Var k, Var v, const BlockSelection& sel, std::size_t block,
                            std::span<const std::size_t> protected_tokens = {}) {
  detail::check_qkv(q.value(), k.value(), v.value());
  auto keep = token_keep_mask(q.value().rows(), sel, block, protected_tokens);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.value().cols()));
  Var logits = ad::scale(ad::matmul_bt(q, k), inv_sqrt);
  return ad::matmul(ad::softmax_rows(ad::masked_fill(logits, std::move(keep))), v);
}

// 1 - active / total over every selection passed in.
inline double achieved_sparsity(std::span<const BlockSelection> selections) {
  std::size_t active = 0;
  std::size_t total = 0;
  for (const auto& s : selections) {
    active += s.active_count();
    total += s.num_blocks();
  }
  if (total == 0) return 0.0;
  return 1.0 - static_cast<double>(active) / static_cast<double>(total);
}

}  // namespace hess::attn
