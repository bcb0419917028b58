#pragma once

#include <Eigen/Core>
#include <Eigen/SVD>

#include <array>

#include <cmath>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "psfm/error.hpp"
#include "psfm/geom.hpp"
#include "psfm/ransac_pnp.hpp"
#include "psfm/rng.hpp"

namespace psfm {

struct TriangulationView {
  Pose pose;
  CameraIntrinsics intrinsics;
  Point2 pixel;
};

// Linear triangulation: smallest right singular vector of the stacked
// two-rows-per-view system, built in normalized image coordinates.
inline Point3 TriangulateDlt(std::span<const TriangulationView> views) {
  if (views.size() < 2) Throw(ErrorCode::kInvalidArgument, "DLT needs at least two views");
  const Eigen::Vector3d c0 = views[0].pose.Center();
  double baseline = 0.0;
  double extent = c0.norm();
  for (const TriangulationView& v : views) {
    const Eigen::Vector3d c = v.pose.Center();
    baseline = std::max(baseline, (c - c0).norm());
    extent = std::max(extent, c.norm());
  }
  if (!(baseline > 1e-12 * (1.0 + extent))) {
    Throw(ErrorCode::kDegenerateGeometry, "all camera centers coincide");
  }

  Eigen::MatrixXd A(2 * views.size(), 4);
  for (std::size_t i = 0; i < views.size(); ++i) {
    const Eigen::Vector3d ray = NormalizedRay(views[i].intrinsics, views[i].pixel);
    const Eigen::Matrix<double, 3, 4> P = views[i].pose.Matrix3x4();
    A.row(2 * i) = ray.x() * P.row(2) - P.row(0);
    A.row(2 * i + 1) = ray.y() * P.row(2) - P.row(1);
    A.row(2 * i).normalize();
    A.row(2 * i + 1).normalize();
  }
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
  const Eigen::Vector4d s = svd.singularValues().head<4>();
  if (!(s(2) > 1e-12 * s(0))) {
    Throw(ErrorCode::kDegenerateGeometry, "triangulation system is rank deficient");
  }
  const Eigen::Vector4d X = svd.matrixV().col(3);
  if (!(std::abs(X(3)) > 1e-14 * X.head<3>().norm())) {
    Throw(ErrorCode::kDegenerateGeometry, "triangulated point is at infinity");
  }
  const Point3 P = X.head<3>() / X(3);
  for (const TriangulationView& v : views) {
    if (v.pose.Transform(P).z() > 0.0) return P;
  }
  Throw(ErrorCode::kBehindAllCameras, "triangulated point lies behind every camera");
}

struct TriangulationEstimate {
  Point3 point;
  std::vector<std::size_t> inliers;
};

namespace detail {

inline std::vector<std::size_t> TriangulationInliers(std::span<const TriangulationView> views, const Point3& P,
                                                     double threshold_px, double* residual = nullptr) {
  std::vector<std::size_t> inliers;
  const double t2 = threshold_px * threshold_px;
  double sum = 0.0;
  for (std::size_t i = 0; i < views.size(); ++i) {
    const double e = SquaredReprojectionError(views[i].pose, views[i].intrinsics, P, views[i].pixel);
    if (e <= t2) {
      inliers.push_back(i);
      sum += e;
    }
  }
  if (residual) *residual = sum;
  return inliers;
}

}  // namespace detail

// Hypotheses are two-view DLT solutions over view pairs (every pair when
// there are at most 20 views, random pairs otherwise); the best consensus
// is re-triangulated from all of its inliers.
inline TriangulationEstimate RansacTriangulate(std::span<const TriangulationView> views, const RansacConfig& cfg) {
  cfg.Validate();
  const std::size_t n = views.size();
  if (n < 2) Throw(ErrorCode::kInvalidArgument, "triangulation needs at least two views");

  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  if (n <= 20) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) pairs.emplace_back(i, j);
  } else {
    CounterRng rng(cfg.rng_seed, 0x545249);
    const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(cfg.max_iterations), n * (n - 1) / 2);
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t i = rng.Index(n);
      std::size_t j = rng.Index(n);
      while (j == i) j = rng.Index(n);
      pairs.emplace_back(std::min(i, j), std::max(i, j));
    }
  }

  bool have = false;
  bool saw_behind = false;
  Point3 best = Point3::Zero();
  std::size_t best_count = 0;
  double best_residual = std::numeric_limits<double>::infinity();
  for (const auto& [i, j] : pairs) {
    const std::array<TriangulationView, 2> sample = {views[i], views[j]};
    Point3 P;
    try {
      P = TriangulateDlt(sample);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::kBehindAllCameras) saw_behind = true;
      if (e.code() == ErrorCode::kDegenerateGeometry || e.code() == ErrorCode::kBehindAllCameras) continue;
      throw;
    }
    if (!(views[i].pose.Transform(P).z() > 0.0 && views[j].pose.Transform(P).z() > 0.0)) {
      saw_behind = true;
      continue;
    }
    double residual = 0.0;
    const auto inl = detail::TriangulationInliers(views, P, cfg.inlier_threshold_px, &residual);
    if (!have || inl.size() > best_count || (inl.size() == best_count && residual < best_residual)) {
      have = true;
      best = P;
      best_count = inl.size();
      best_residual = residual;
    }
  }
  if (!have) {
    if (saw_behind) Throw(ErrorCode::kBehindAllCameras, "no hypothesis in front of its cameras");
    Throw(ErrorCode::kDegenerateGeometry, "every view pair is degenerate");
  }

  TriangulationEstimate est;
  est.point = best;
  est.inliers = detail::TriangulationInliers(views, best, cfg.inlier_threshold_px);
  if (est.inliers.size() >= 2) {
    std::vector<TriangulationView> subset;
    for (std::size_t k : est.inliers) subset.push_back(views[k]);
    try {
      const Point3 refined = TriangulateDlt(subset);
      auto refined_inliers = detail::TriangulationInliers(views, refined, cfg.inlier_threshold_px);
      if (refined_inliers.size() >= est.inliers.size()) {
        est.point = refined;
        est.inliers = std::move(refined_inliers);
      }
    } catch (const Error&) {
      // keep the two-view hypothesis
    }
  }
  if (est.inliers.size() < 2) {
    Throw(ErrorCode::kNotEnoughInliers, "fewer than two views agree on the triangulated point");
  }
  return est;
}

}  // namespace psfm
