#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hess/autodiff.hpp"
#include "hess/errors.hpp"
#include "hess/tensor.hpp"

namespace hess::geom {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

struct PointCloud {
  std::vector<Vec3> points;
  // Per-point, non-negative; empty when the cloud carries no confidence.
  std::vector<double> confidence;

  std::size_t size() const noexcept { return points.size(); }
  bool empty() const noexcept { return points.empty(); }
  bool has_confidence() const noexcept { return !confidence.empty(); }

  void validate() const {
    for (const auto& p : points)
      if (!p.allFinite()) throw NumericError("PointCloud: non-finite coordinate");
    if (has_confidence()) {
      if (confidence.size() != points.size()) throw ShapeError("PointCloud: confidence length mismatch");
      for (double c : confidence)
        if (!(c >= 0.0) || !std::isfinite(c)) throw NumericError("PointCloud: invalid confidence");
    }
  }
};

struct CameraSet {
  std::vector<Vec3> translations;
  std::size_t size() const noexcept { return translations.size(); }
};

// x -> s R x + t
struct SimilarityTransform {
  double scale = 1.0;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return scale * (rotation * p) + translation; }

  // [sR | t] as a 3 x 4 tensor.
  Tensor affine() const {
    Tensor out = Tensor::zeros(3, 4);
    const Mat3 a = scale * rotation;
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) out(i, j) = a(i, j);
      out(i, 3) = translation(i);
    }
    return out;
  }

  void validate(double tol = 1e-9) const {
    if (!(scale > 0.0) || !std::isfinite(scale)) throw ParameterError("SimilarityTransform: scale must be positive");
    if ((rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() > tol ||
        std::abs(rotation.determinant() - 1.0) > tol) {
      throw ParameterError("SimilarityTransform: rotation is not proper orthonormal");
    }
  }
};

inline Tensor to_tensor(const std::vector<Vec3>& pts) {
  if (pts.empty()) throw ShapeError("to_tensor: empty point list");
  Tensor t = Tensor::zeros(pts.size(), 3);
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (int j = 0; j < 3; ++j) t(i, j) = pts[i](j);
  return t;
}

inline std::vector<Vec3> to_points(const Tensor& t) {
  if (t.cols() != 3) throw ShapeError("to_points: expected N x 3, got " + t.shape_str());
  std::vector<Vec3> out(t.rows());
  for (std::size_t i = 0; i < t.rows(); ++i) out[i] = Vec3(t(i, 0), t(i, 1), t(i, 2));
  return out;
}

// Rank of the centered covariance, with singular values below rel_tol times
// the largest treated as zero.
inline int covariance_rank(const std::vector<Vec3>& pts, double rel_tol = 1e-10) {
  if (pts.empty()) return 0;
  Vec3 mean = Vec3::Zero();
  for (const auto& p : pts) mean += p;
  mean /= static_cast<double>(pts.size());
  Mat3 cov = Mat3::Zero();
  for (const auto& p : pts) cov += (p - mean) * (p - mean).transpose();
  const Vec3 sv = Eigen::JacobiSVD<Mat3>(cov).singularValues();
  if (sv(0) <= std::numeric_limits<double>::min()) return 0;
  int r = 0;
  for (int i = 0; i < 3; ++i)
    if (sv(i) > rel_tol * sv(0)) ++r;
  return r;
}

// Least-squares similarity transform taking src_i onto dst_i.
inline SimilarityTransform umeyama(const std::vector<Vec3>& src, const std::vector<Vec3>& dst) {
  if (src.size() != dst.size()) throw ShapeError("umeyama: point counts differ");
  if (src.size() < 3) throw RankError("umeyama: at least three correspondences are required");
  if (covariance_rank(src) < 2) throw RankError("umeyama: source points are collinear or coincident");

  const double n = static_cast<double>(src.size());
  Vec3 mu_s = Vec3::Zero(), mu_d = Vec3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    mu_s += src[i];
    mu_d += dst[i];
  }
  mu_s /= n;
  mu_d /= n;

  Mat3 cov = Mat3::Zero();
  double var_s = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const Vec3 a = src[i] - mu_s;
    cov += (dst[i] - mu_d) * a.transpose();
    var_s += a.squaredNorm();
  }
  cov /= n;
  var_s /= n;

  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Mat3& u = svd.matrixU();
  const Mat3& v = svd.matrixV();
  Vec3 signs = Vec3::Ones();
  if (u.determinant() * v.determinant() < 0.0) signs(2) = -1.0;

  SimilarityTransform h;
  h.rotation = u * signs.asDiagonal() * v.transpose();
  h.scale = svd.singularValues().dot(signs) / var_s;
  if (!(h.scale > 0.0)) throw RankError("umeyama: destination points are degenerate");
  h.translation = mu_d - h.scale * (h.rotation * mu_s);
  return h;
}

inline SimilarityTransform umeyama(const PointCloud& src, const PointCloud& dst) {
  return umeyama(src.points, dst.points);
}

inline std::size_t nearest_index(const Vec3& p, const std::vector<Vec3>& cloud) {
  if (cloud.empty()) throw ParameterError("nearest neighbour query on an empty cloud");
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const double d = (cloud[i] - p).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

inline double nearest_sq_dist(const Vec3& p, const std::vector<Vec3>& cloud) {
  return (cloud[nearest_index(p, cloud)] - p).squaredNorm();
}

inline double nearest_sq_dist(const Vec3& p, const PointCloud& cloud) { return nearest_sq_dist(p, cloud.points); }

struct IcpResult {
  SimilarityTransform transform;
  std::size_t iterations = 0;
  // Mean squared correspondence distance, starting with the value at `init`;
  // one entry per accepted iteration after that.
  std::vector<double> objective;
};

inline double mean_nearest_sq_dist(const std::vector<Vec3>& src, const std::vector<Vec3>& dst,
                                   const SimilarityTransform& h) {
  double s = 0.0;
  for (const auto& p : src) s += nearest_sq_dist(h.apply(p), dst);
  return s / static_cast<double>(src.size());
}

// Point-to-point ICP with similarity re-fits. An iteration is accepted only if
// it does not increase the objective; the loop stops once the improvement
// falls below `tol`. With `keep_scale` the re-fits are rigid at init.scale,
// which stops a poor start from shrinking the source onto a few target points.
inline IcpResult icp_refine(const std::vector<Vec3>& src, const std::vector<Vec3>& dst,
                            const SimilarityTransform& init, std::size_t max_iters, double tol,
                            bool keep_scale = false) {
  if (src.empty() || dst.empty()) throw ParameterError("icp_refine: empty correspondence set");
  IcpResult res;
  res.transform = init;
  double obj = mean_nearest_sq_dist(src, dst, init);
  res.objective.push_back(obj);
  std::vector<Vec3> matched(src.size());
  for (std::size_t it = 0; it < max_iters; ++it) {
    for (std::size_t i = 0; i < src.size(); ++i) matched[i] = dst[nearest_index(res.transform.apply(src[i]), dst)];
    SimilarityTransform next;
    try {
      next = umeyama(src, matched);
    } catch (const RankError&) {
      break;
    }
    if (keep_scale) {
      Vec3 mu_s = Vec3::Zero(), mu_d = Vec3::Zero();
      for (std::size_t i = 0; i < src.size(); ++i) {
        mu_s += src[i];
        mu_d += matched[i];
      }
      const double n = static_cast<double>(src.size());
      next.scale = init.scale;
      next.translation = mu_d / n - next.scale * (next.rotation * (mu_s / n));
    }
    const double next_obj = mean_nearest_sq_dist(src, dst, next);
    if (!(next_obj <= obj)) break;
    const double improvement = obj - next_obj;
    res.transform = next;
    res.objective.push_back(next_obj);
    res.iterations = it + 1;
    obj = next_obj;
    if (improvement < tol) break;
  }
  return res;
}

inline IcpResult icp_refine(const PointCloud& src, const PointCloud& dst, const SimilarityTransform& init,
                            std::size_t max_iters, double tol, bool keep_scale = false) {
  return icp_refine(src.points, dst.points, init, max_iters, tol, keep_scale);
}

// Indices j with confidence >= conf_cutoff (when confidences exist) and
// min_p |H pred_j - p|^2 < eps.
inline std::vector<std::size_t> inlier_set(const PointCloud& pred, const PointCloud& gt, const SimilarityTransform& h,
                                           double eps, double conf_cutoff = 1.0) {
  if (!(eps > 0.0)) throw ParameterError("inlier_set: eps must be positive");
  if (gt.empty()) throw ParameterError("inlier_set: empty ground-truth cloud");
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < pred.size(); ++j) {
    if (pred.has_confidence() && pred.confidence[j] < conf_cutoff) continue;
    if (nearest_sq_dist(h.apply(pred.points[j]), gt.points) < eps) out.push_back(j);
  }
  return out;
}

namespace detail {
// Applies sg(H) to the rows of an N x 3 variable.
inline Var apply_stopped(Var points, Var h_affine) {
  if (h_affine.value().rows() != 3 || h_affine.value().cols() != 4) {
    throw ShapeError("alignment transform must be 3 x 4");
  }
  if (points.value().cols() != 3) throw ShapeError("expected N x 3 points, got " + points.value().shape_str());
  Var h = ad::stop_gradient(h_affine);
  Var linear = ad::slice_cols(h, 0, 3);
  Var shift = ad::transpose(ad::slice_cols(h, 3, 4));
  return ad::add_row_bias(ad::matmul_bt(points, linear), shift);
}
}  // namespace detail

// e_cam = 1/(2N) sum_i |sg(H) t_hat_i - t_i|^2. `h_affine` is a 3 x 4 [sR | t]
// node; no gradient reaches it.
inline Var camera_pose_error(Var pred_translations, const CameraSet& gt, Var h_affine) {
  const std::size_t n = pred_translations.value().rows();
  if (n == 0 || n != gt.size()) throw ShapeError("camera_pose_error: camera counts differ");
  Tape& t = *pred_translations.tape();
  Var residual = ad::sub(detail::apply_stopped(pred_translations, h_affine), t.constant(to_tensor(gt.translations)));
  return ad::scale(ad::sum_squares(residual), 0.5 / static_cast<double>(n));
}

inline Var camera_pose_error(Var pred_translations, const CameraSet& gt, const SimilarityTransform& h) {
  return camera_pose_error(pred_translations, gt, pred_translations.tape()->constant(h.affine()));
}

// e_pc = 1/(2|I|) sum_{j in I} min_p |sg(H) p_hat_j - p|^2. The inlier set and
// the nearest ground-truth point of each inlier are fixed from the current
// values; the gradient flows through the selected correspondences only.
// Throws SampleSkip when the inlier set is empty.
inline Var point_cloud_error(Var pred_points, std::span<const double> confidence, const PointCloud& gt, Var h_affine,
                             double eps, double conf_cutoff = 1.0) {
  SimilarityTransform h;
  {
    const Tensor& a = h_affine.value();
    Mat3 sr;
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) sr(i, j) = a(i, j);
      h.translation(i) = a(i, 3);
    }
    // Only apply() is used below, so keep sR in the rotation slot.
    h.rotation = sr;
  }
  PointCloud pred{to_points(pred_points.value()), std::vector<double>(confidence.begin(), confidence.end())};
  const auto inliers = inlier_set(pred, gt, h, eps, conf_cutoff);
  if (inliers.empty()) throw SampleSkip("point_cloud_error: empty inlier set");

  std::vector<Vec3> targets;
  targets.reserve(inliers.size());
  for (std::size_t j : inliers) targets.push_back(gt.points[nearest_index(h.apply(pred.points[j]), gt.points)]);

  Tape& t = *pred_points.tape();
  Var aligned = detail::apply_stopped(ad::gather_rows(pred_points, inliers), h_affine);
  Var residual = ad::sub(aligned, t.constant(to_tensor(targets)));
  return ad::scale(ad::sum_squares(residual), 0.5 / static_cast<double>(inliers.size()));
}

inline Var point_cloud_error(Var pred_points, std::span<const double> confidence, const PointCloud& gt,
                             const SimilarityTransform& h, double eps, double conf_cutoff = 1.0) {
  return point_cloud_error(pred_points, confidence, gt, pred_points.tape()->constant(h.affine()), eps, conf_cutoff);
}

// Value-only evaluations.
inline double camera_pose_error_value(const CameraSet& pred, const CameraSet& gt, const SimilarityTransform& h) {
  Tape t;
  return camera_pose_error(t.constant(to_tensor(pred.translations)), gt, h).value().item();
}

inline double point_cloud_error_value(const PointCloud& pred, const PointCloud& gt, const SimilarityTransform& h,
                                      double eps, double conf_cutoff = 1.0) {
  Tape t;
  return point_cloud_error(t.constant(to_tensor(pred.points)), pred.confidence, gt, h, eps, conf_cutoff)
      .value()
      .item();
}

// Text format: one point per line, "x y z [confidence]"; '#' starts a
// comment. Confidence must be given for all points or for none.
inline PointCloud read_point_cloud(std::istream& in) {
  PointCloud cloud;
  std::string line;
  std::size_t lineno = 0;
  int with_conf = -1;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::vector<double> vals;
    double v;
    while (ls >> v) vals.push_back(v);
    if (!ls.eof()) throw ValidationError("point cloud line " + std::to_string(lineno) + ": malformed number");
    if (vals.empty()) continue;
    if (vals.size() != 3 && vals.size() != 4) {
      throw ValidationError("point cloud line " + std::to_string(lineno) + ": expected 3 or 4 values");
    }
    const int has = vals.size() == 4 ? 1 : 0;
    if (with_conf >= 0 && with_conf != has) {
      throw ValidationError("point cloud line " + std::to_string(lineno) + ": confidence given inconsistently");
    }
    with_conf = has;
    cloud.points.emplace_back(vals[0], vals[1], vals[2]);
    if (has) cloud.confidence.push_back(vals[3]);
  }
  cloud.validate();
  return cloud;
}

inline void write_point_cloud(std::ostream& out, const PointCloud& cloud) {
  cloud.validate();
  out << "# x y z" << (cloud.has_confidence() ? " confidence" : "") << '\n';
  out << std::setprecision(17);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.points[i];
    out << p(0) << ' ' << p(1) << ' ' << p(2);
    if (cloud.has_confidence()) out << ' ' << cloud.confidence[i];
    out << '\n';
  }
}

}  // namespace hess::geom
