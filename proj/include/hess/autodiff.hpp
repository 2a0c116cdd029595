#pragma once

#include <atomic>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "hess/errors.hpp"
#include "hess/tensor.hpp"

namespace hess {

class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; only valid while the
// owning tape is alive.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  // d(loss)/d(this) after Tape::backward; zeros before, or when the node is
  // not connected to the loss.
  const Tensor& grad() const;
  bool requires_grad() const;

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* t, std::size_t id) : tape_(t), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Fault hooks used by the gradient-check mutation test.
namespace fault {
inline std::atomic<bool>& flip_matmul_backward_sign() {
  static std::atomic<bool> flag{false};
  return flag;
}
}  // namespace fault

// Records operations in creation order, which is a topological order since a
// node can only reference nodes that already exist. Build once, run backward
// once.
class Tape {
 public:
  using Backprop = std::function<void(Tape&, const Tensor& out_grad, const Tensor& out_value)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, {}});
    return Var(this, nodes_.size() - 1);
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Records an op output. The backprop closure is kept only if some parent
  // requires a gradient.
  Var record(Tensor value, std::initializer_list<Var> parents, Backprop backprop) {
    bool needs = false;
    for (const Var& p : parents) {
      check_owned(p);
      needs = needs || node(p).requires_grad;
    }
    return push(std::move(value), needs, std::move(backprop));
  }

  Var record(Tensor value, const std::vector<Var>& parents, Backprop backprop) {
    bool needs = false;
    for (const Var& p : parents) {
      check_owned(p);
      needs = needs || node(p).requires_grad;
    }
    return push(std::move(value), needs, std::move(backprop));
  }

  void backward(Var loss) {
    check_owned(loss);
    if (consumed_) throw TapeError("backward: tape already consumed");
    const Node& l = node(loss);
    if (!l.value.is_scalar()) throw TapeError("backward: loss must be a scalar, got " + l.value.shape_str());
    consumed_ = true;
    if (!l.requires_grad) return;
    grad_mut(loss)[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backprop || n.grad.empty()) continue;
      n.backprop(*this, n.grad, n.value);
    }
  }

  bool consumed() const noexcept { return consumed_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  const Tensor& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  const Tensor& grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  // Gradient accumulator for a parent, allocated on first use.
  Tensor& grad_mut(Var v) {
    Node& n = nodes_.at(v.id());
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

 private:
  struct Node {
    Tensor value;
    mutable Tensor grad;
    bool requires_grad = false;
    Backprop backprop;
  };

  Var push(Tensor value, bool needs, Backprop backprop) {
    nodes_.push_back(Node{std::move(value), Tensor{}, needs, needs ? std::move(backprop) : Backprop{}});
    return Var(this, nodes_.size() - 1);
  }

  void check_owned(Var v) const {
    if (v.tape_ != this || v.id_ >= nodes_.size()) throw TapeError("variable does not belong to this tape");
  }

  const Node& node(Var v) const {
    check_owned(v);
    return nodes_[v.id()];
  }

  std::deque<Node> nodes_;
  bool consumed_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }
inline const Tensor& Var::grad() const { return tape_->grad(*this); }
inline bool Var::requires_grad() const { return tape_->requires_grad(*this); }

namespace ad {

namespace detail {
inline Tape& tape_of(Var a, Var b) {
  if (!a.valid() || a.tape() != b.tape()) throw TapeError("operands recorded on different tapes");
  return *a.tape();
}

inline void accumulate(Tape& t, Var target, const Tensor& g, double factor = 1.0) {
  if (!t.requires_grad(target)) return;
  Tensor& acc = t.grad_mut(target);
  for (std::size_t i = 0; i < g.size(); ++i) acc[i] += factor * g[i];
}
}  // namespace detail

inline Var matmul(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  Tensor out = kernels::matmul(a.value(), b.value());
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    const bool flip = fault::flip_matmul_backward_sign().load();
    if (t.requires_grad(a)) {
      Tensor ga = Tensor::zeros(m, k);
      kernels::matmul_bt_acc(g.data(), bv.data(), ga.data(), m, n, k);
      detail::accumulate(t, a, ga, flip ? -1.0 : 1.0);
    }
    if (t.requires_grad(b)) {
      Tensor gb = Tensor::zeros(k, n);
      kernels::matmul_at_acc(av.data(), g.data(), gb.data(), m, k, n);
      detail::accumulate(t, b, gb);
    }
  });
}

// a * b^T
inline Var matmul_bt(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  Tensor out = kernels::matmul_bt(a.value(), b.value());
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
    if (t.requires_grad(a)) {
      Tensor ga = Tensor::zeros(m, k);
      kernels::matmul_acc(g.data(), bv.data(), ga.data(), m, n, k);
      detail::accumulate(t, a, ga);
    }
    if (t.requires_grad(b)) {
      Tensor gb = Tensor::zeros(n, k);
      kernels::matmul_at_acc(g.data(), av.data(), gb.data(), m, n, k);
      detail::accumulate(t, b, gb);
    }
  });
}

inline Var transpose(Var a) {
  Tape& t = *a.tape();
  return t.record(kernels::transpose(a.value()), {a},
                  [a](Tape& t, const Tensor& g, const Tensor&) { detail::accumulate(t, a, kernels::transpose(g)); });
}

inline Var add(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  kernels::require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    detail::accumulate(t, a, g);
    detail::accumulate(t, b, g);
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  kernels::require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    detail::accumulate(t, a, g);
    detail::accumulate(t, b, g, -1.0);
  });
}

// Elementwise product.
inline Var mul(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  kernels::require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.value()[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_mut(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.value()[i];
    }
  });
}

inline Var scale(Var a, double k) {
  Tape& t = *a.tape();
  Tensor out = a.value();
  for (double& v : out.data()) v *= k;
  return t.record(std::move(out), {a}, [a, k](Tape& t, const Tensor& g, const Tensor&) { detail::accumulate(t, a, g, k); });
}

// m[r x n] + bias[1 x n] added to every row.
inline Var add_row_bias(Var m, Var bias) {
  Tape& t = detail::tape_of(m, bias);
  const Tensor& mv = m.value();
  const Tensor& bv = bias.value();
  if (bv.rows() != 1 || bv.cols() != mv.cols()) {
    throw ShapeError("add_row_bias: bias " + bv.shape_str() + " incompatible with " + mv.shape_str());
  }
  Tensor out = mv;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += bv[j];
  }
  return t.record(std::move(out), {m, bias}, [m, bias](Tape& t, const Tensor& g, const Tensor&) {
    detail::accumulate(t, m, g);
    if (t.requires_grad(bias)) {
      Tensor& gb = t.grad_mut(bias);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto row = g.row(r);
        for (std::size_t j = 0; j < row.size(); ++j) gb[j] += row[j];
      }
    }
  });
}

inline Var tanh(Var a) {
  Tape& t = *a.tape();
  Tensor out = a.value();
  for (double& v : out.data()) v = std::tanh(v);
  return t.record(std::move(out), {a}, [a](Tape& t, const Tensor& g, const Tensor& y) {
    Tensor& ga = t.grad_mut(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

// log(1 + e^x), evaluated without overflow.
inline Var softplus(Var a) {
  Tape& t = *a.tape();
  Tensor out = a.value();
  for (double& v : out.data()) v = v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
  return t.record(std::move(out), {a}, [a](Tape& t, const Tensor& g, const Tensor&) {
    Tensor& ga = t.grad_mut(a);
    const Tensor& x = a.value();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / (1.0 + std::exp(-x[i]));
  });
}

inline Var softmax_rows(Var a) {
  Tape& t = *a.tape();
  return t.record(kernels::softmax_rows(a.value()), {a}, [a](Tape& t, const Tensor& g, const Tensor& y) {
    Tensor& ga = t.grad_mut(a);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      auto yr = y.row(r);
      auto gr = g.row(r);
      double dot = 0.0;
      for (std::size_t j = 0; j < yr.size(); ++j) dot += yr[j] * gr[j];
      auto out = ga.row(r);
      for (std::size_t j = 0; j < yr.size(); ++j) out[j] += yr[j] * (gr[j] - dot);
    }
  });
}

// Replaces every entry whose keep flag is false by -inf. No gradient flows to
// the replaced entries.
inline Var masked_fill(Var a, std::vector<char> keep) {
  Tape& t = *a.tape();
  if (keep.size() != a.value().size()) throw ShapeError("masked_fill: mask size does not match tensor");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i)
    if (!keep[i]) out[i] = -std::numeric_limits<double>::infinity();
  auto mask = std::make_shared<std::vector<char>>(std::move(keep));
  return t.record(std::move(out), {a}, [a, mask](Tape& t, const Tensor& g, const Tensor&) {
    Tensor& ga = t.grad_mut(a);
    for (std::size_t i = 0; i < g.size(); ++i)
      if ((*mask)[i]) ga[i] += g[i];
  });
}

inline Var avg_pool_rows(Var a, long long block) {
  Tape& t = *a.tape();
  Tensor out = kernels::avg_pool_rows(a.value(), block);
  return t.record(std::move(out), {a}, [a, block](Tape& t, const Tensor& g, const Tensor&) {
    const auto b = static_cast<std::size_t>(block);
    const std::size_t rows = a.value().rows();
    Tensor& ga = t.grad_mut(a);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t grp = r / b;
      const std::size_t len = std::min(rows, (grp + 1) * b) - grp * b;
      auto src = g.row(grp);
      auto dst = ga.row(r);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j] / static_cast<double>(len);
    }
  });
}

inline Var gather_rows(Var a, std::vector<std::size_t> rows) {
  Tape& t = *a.tape();
  const Tensor& av = a.value();
  if (rows.empty()) throw ShapeError("gather_rows: empty index list");
  Tensor out = Tensor::zeros(rows.size(), av.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= av.rows()) throw ShapeError("gather_rows: row index out of range");
    std::copy(av.row(rows[i]).begin(), av.row(rows[i]).end(), out.row(i).begin());
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(rows));
  return t.record(std::move(out), {a}, [a, idx](Tape& t, const Tensor& g, const Tensor&) {
    Tensor& ga = t.grad_mut(a);
    for (std::size_t i = 0; i < idx->size(); ++i) {
      auto src = g.row(i);
      auto dst = ga.row((*idx)[i]);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  });
}

// Columns [begin, end).
inline Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  Tape& t = *a.tape();
  const Tensor& av = a.value();
  if (begin >= end || end > av.cols()) throw ShapeError("slice_cols: bad column range");
  const std::size_t w = end - begin;
  Tensor out = Tensor::zeros(av.rows(), w);
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t j = 0; j < w; ++j) out(r, j) = av(r, begin + j);
  return t.record(std::move(out), {a}, [a, begin, w](Tape& t, const Tensor& g, const Tensor&) {
    Tensor& ga = t.grad_mut(a);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t j = 0; j < w; ++j) ga(r, begin + j) += g(r, j);
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: nothing to concatenate");
  Tape& t = *parts.front().tape();
  const std::size_t rows = parts.front().value().rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    if (p.tape() != &t) throw TapeError("concat_cols: operands on different tapes");
    if (p.value().rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.value().cols();
  }
  Tensor out = Tensor::zeros(rows, cols);
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < v.cols(); ++j) out(r, off + j) = v(r, j);
    off += v.cols();
  }
  return t.record(std::move(out), parts, [parts](Tape& t, const Tensor& g, const Tensor&) {
    std::size_t off = 0;
    for (const Var& p : parts) {
      const std::size_t w = p.value().cols();
      if (t.requires_grad(p)) {
        Tensor& gp = t.grad_mut(p);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t j = 0; j < w; ++j) gp(r, j) += g(r, off + j);
      }
      off += w;
    }
  });
}

inline Var sum(Var a) {
  Tape& t = *a.tape();
  return t.record(Tensor::scalar(kernels::sum(a.value())), {a}, [a](Tape& t, const Tensor& g, const Tensor&) {
    Tensor& ga = t.grad_mut(a);
    for (double& v : ga.data()) v += g[0];
  });
}

inline Var sum_squares(Var a) {
  Tape& t = *a.tape();
  return t.record(Tensor::scalar(kernels::sum_squares(a.value())), {a}, [a](Tape& t, const Tensor& g, const Tensor&) {
    Tensor& ga = t.grad_mut(a);
    const Tensor& x = a.value();
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += 2.0 * g[0] * x[i];
  });
}

// Identity in the forward pass, blocks the gradient in the backward pass.
inline Var stop_gradient(Var a) { return a.tape()->constant(a.value()); }

}  // namespace ad
}  // namespace hess
