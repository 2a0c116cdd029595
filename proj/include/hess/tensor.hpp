#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "hess/errors.hpp"

namespace hess {

// Dense row-major array of doubles. Almost everything in this library is
// rank 2; a scalar is a 1x1 tensor.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
      : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(count(shape_), fill);
  }

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != count(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor zeros(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }

  static Tensor scalar(double v) { return Tensor({1, 1}, std::vector<double>{v}); }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  // Builds a matrix from nested rows; all rows must have equal length.
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged initializer rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  bool is_scalar() const noexcept { return data_.size() == 1; }

  std::size_t rows() const {
    require_matrix();
    return shape_[0];
  }
  std::size_t cols() const {
    require_matrix();
    return shape_[1];
  }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  double item() const {
    if (!is_scalar()) throw ShapeError("item() on non-scalar tensor " + shape_string(shape_));
    return data_[0];
  }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  std::string shape_str() const { return shape_string(shape_); }

  static std::string shape_string(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static std::size_t count(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

  static void check_shape(const std::vector<std::size_t>& s) {
    if (s.empty()) throw ShapeError("tensor shape must have at least one dimension");
    for (auto d : s) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(s));
    }
  }

  void require_matrix() const {
    if (shape_.size() != 2) throw ShapeError("expected a matrix, got " + shape_string(shape_));
  }

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

// Plain (non-recording) kernels shared by the tape ops and by code that only
// needs values, such as the pooled approximate attention map.
namespace kernels {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  }
}

namespace detail {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;
}  // namespace detail

// out[m x n] += a[m x k] * b[k x n]
inline void matmul_acc(std::span<const double> a, std::span<const double> b, std::span<double> out,
                       std::size_t m, std::size_t k, std::size_t n) {
  using namespace detail;
  MMap(out.data(), m, n).noalias() += CMap(a.data(), m, k) * CMap(b.data(), k, n);
}

// out[m x n] += a[m x k] * b[n x k]^T
inline void matmul_bt_acc(std::span<const double> a, std::span<const double> b, std::span<double> out,
                          std::size_t m, std::size_t k, std::size_t n) {
  using namespace detail;
  MMap(out.data(), m, n).noalias() += CMap(a.data(), m, k) * CMap(b.data(), n, k).transpose();
}

// out[k x n] += a[m x k]^T * b[m x n]
inline void matmul_at_acc(std::span<const double> a, std::span<const double> b, std::span<double> out,
                          std::size_t m, std::size_t k, std::size_t n) {
  using namespace detail;
  MMap(out.data(), k, n).noalias() += CMap(a.data(), m, k).transpose() * CMap(b.data(), m, n);
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + a.shape_str() + " * " + b.shape_str());
  }
  Tensor out = Tensor::zeros(a.rows(), b.cols());
  matmul_acc(a.data(), b.data(), out.data(), a.rows(), a.cols(), b.cols());
  return out;
}

// a * b^T without materializing the transpose.
inline Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_bt: inner dimensions differ " + a.shape_str() + " * " + b.shape_str() + "^T");
  }
  Tensor out = Tensor::zeros(a.rows(), b.rows());
  matmul_bt_acc(a.data(), b.data(), out.data(), a.rows(), a.cols(), b.rows());
  return out;
}

inline Tensor transpose(const Tensor& a) {
  Tensor out = Tensor::zeros(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

// Row-wise softmax stabilized by the row maximum. Entries equal to -inf are
// allowed (they come out as exact zeros); NaN and +inf are rejected, as is a
// row with no finite entry.
inline Tensor softmax_rows(const Tensor& a) {
  Tensor out = Tensor::zeros(a.rows(), a.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto in = a.row(r);
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : in) {
      if (std::isnan(v) || v == std::numeric_limits<double>::infinity()) {
        throw NumericError("softmax_rows: non-finite logit in row " + std::to_string(r));
      }
      mx = std::max(mx, v);
    }
    if (!std::isfinite(mx)) throw NumericError("softmax_rows: row " + std::to_string(r) + " has no finite entry");
    auto o = out.row(r);
    double sum = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (double& v : o) v /= sum;
  }
  return out;
}

inline std::size_t pooled_rows(std::size_t rows, std::size_t block) { return (rows + block - 1) / block; }

// Mean over consecutive groups of `block` rows; the final group may be short
// and is averaged over its actual length.
inline Tensor avg_pool_rows(const Tensor& a, long long block) {
  if (block <= 0) throw ParameterError("avg_pool_rows: block size must be >= 1");
  const auto b = static_cast<std::size_t>(block);
  const std::size_t out_rows = pooled_rows(a.rows(), b);
  Tensor out = Tensor::zeros(out_rows, a.cols());
  for (std::size_t g = 0; g < out_rows; ++g) {
    const std::size_t begin = g * b;
    const std::size_t end = std::min(a.rows(), begin + b);
    auto o = out.row(g);
    for (std::size_t r = begin; r < end; ++r) {
      auto in = a.row(r);
      for (std::size_t j = 0; j < o.size(); ++j) o[j] += in[j];
    }
    const double inv = 1.0 / static_cast<double>(end - begin);
    for (double& v : o) v *= inv;
  }
  return out;
}

inline double sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return s;
}

inline double sum_squares(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return s;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace kernels
}  // namespace hess
