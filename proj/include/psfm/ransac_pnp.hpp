#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <set>
#include <span>
#include <vector>

#include "psfm/dataset.hpp"
#include "psfm/error.hpp"
#include "psfm/geom.hpp"
#include "psfm/lm.hpp"
#include "psfm/p3p.hpp"
#include "psfm/rng.hpp"

namespace psfm {

struct RansacConfig {
  int max_iterations = 10000;
  double inlier_threshold_px = 4.0;
  double confidence = 0.9999;
  int min_inliers = 15;
  std::uint64_t rng_seed = 0;

  void Validate() const {
    if (max_iterations < 1 || !(inlier_threshold_px > 0.0) || !(confidence > 0.0 && confidence < 1.0) ||
        min_inliers < 0) {
      Throw(ErrorCode::kInvalidArgument, "invalid RANSAC configuration");
    }
  }
};

struct Correspondence2D3D {
  Point3 point;
  Point2 pixel;
  TrackId track_id = 0;
};

struct PoseEstimate {
  Pose pose;
  std::set<TrackId> inlier_ids;
  std::vector<std::size_t> inlier_indices;
  int num_iterations_used = 0;
};

// Standard bound on the number of samples needed to draw one all-inlier
// sample of size `sample_size` with probability `confidence`.
inline int AdaptiveIterationBound(double inlier_ratio, int sample_size, double confidence, int cap) {
  if (inlier_ratio <= 0.0) return cap;
  const double p_good = std::pow(inlier_ratio, sample_size);
  if (p_good >= 1.0) return 1;
  const double n = std::log(1.0 - confidence) / std::log(1.0 - p_good);
  if (!std::isfinite(n) || n >= cap) return cap;
  return std::max(1, static_cast<int>(std::ceil(n)));
}

// Squared pixel error, or +inf when the point is not in front of the camera.
inline double SquaredReprojectionError(const Pose& pose, const CameraIntrinsics& K, const Point3& P,
                                       const Point2& p) {
  const Eigen::Vector3d X = pose.Transform(P);
  if (!(X.z() > kDefaultCheiralityEps)) return std::numeric_limits<double>::infinity();
  const Point2 proj(K.fx * X.x() / X.z() + K.cx, K.fy * X.y() / X.z() + K.cy);
  return (proj - p).squaredNorm();
}

namespace detail {

struct PoseOnlyProblem {
  std::span<const Correspondence2D3D> corr;
  const std::vector<std::size_t>* indices;
  const CameraIntrinsics* K;

  double Linearize(const Pose& pose, Eigen::Matrix<double, 6, 6>& H, Vector6d& g) const {
    H.setZero();
    g.setZero();
    double cost = 0.0;
    for (std::size_t idx : *indices) {
      const Correspondence2D3D& c = corr[idx];
      const Eigen::Vector3d RP = pose.quaternion() * c.point;
      const Eigen::Vector3d X = RP + pose.translation();
      if (!(X.z() > kDefaultCheiralityEps)) continue;
      const double iz = 1.0 / X.z();
      const Eigen::Vector2d r(K->fx * X.x() * iz + K->cx - c.pixel.x(), K->fy * X.y() * iz + K->cy - c.pixel.y());
      Eigen::Matrix<double, 2, 3> dproj;
      dproj << K->fx * iz, 0.0, -K->fx * X.x() * iz * iz, 0.0, K->fy * iz, -K->fy * X.y() * iz * iz;
      Eigen::Matrix<double, 2, 6> J;
      J.leftCols<3>() = dproj * (-Skew(RP));
      J.rightCols<3>() = dproj;
      H.noalias() += J.transpose() * J;
      g.noalias() += J.transpose() * r;
      cost += 0.5 * r.squaredNorm();
    }
    return cost;
  }

  double Cost(const Pose& pose) const {
    double cost = 0.0;
    for (std::size_t idx : *indices) {
      const double e = SquaredReprojectionError(pose, *K, corr[idx].point, corr[idx].pixel);
      if (std::isfinite(e)) cost += 0.5 * e;
    }
    return cost;
  }

  Pose Retract(const Pose& pose, const Vector6d& delta) const { return pose.Retract(delta); }
};

inline std::vector<std::size_t> CollectInliers(std::span<const Correspondence2D3D> corr, const Pose& pose,
                                               const CameraIntrinsics& K, double threshold_px) {
  std::vector<std::size_t> inliers;
  const double t2 = threshold_px * threshold_px;
  for (std::size_t i = 0; i < corr.size(); ++i) {
    if (SquaredReprojectionError(pose, K, corr[i].point, corr[i].pixel) <= t2) inliers.push_back(i);
  }
  return inliers;
}

}  // namespace detail

// Least-squares reprojection refinement of a pose over the given subset.
inline Pose RefinePoseReprojection(std::span<const Correspondence2D3D> corr,
                                   const std::vector<std::size_t>& indices, const CameraIntrinsics& K,
                                   Pose pose, int max_iterations = 30) {
  detail::PoseOnlyProblem problem{corr, &indices, &K};
  LmOptions opts;
  opts.max_iterations = max_iterations;
  MinimizeLm<6>(problem, pose, opts);
  return pose;
}

// RANSAC over P3P samples with a local least-squares refit of the best
// model. The returned inlier set is exactly the correspondences within the
// threshold under the returned pose.
inline PoseEstimate RansacPnP(std::span<const Correspondence2D3D> corr, const CameraIntrinsics& K,
                              const RansacConfig& cfg) {
  cfg.Validate();
  if (corr.size() < 4) {
    Throw(ErrorCode::kInvalidArgument, "RANSAC PnP needs at least 4 correspondences, got " +
                                           std::to_string(corr.size()));
  }
  CounterRng rng(cfg.rng_seed, 0x504E50);
  const std::size_t n = corr.size();

  Pose best_pose;
  std::size_t best_count = 0;
  double best_residual = std::numeric_limits<double>::infinity();
  bool any_model = false;
  int bound = cfg.max_iterations;
  int it = 0;
  const double t2 = cfg.inlier_threshold_px * cfg.inlier_threshold_px;
  for (; it < cfg.max_iterations && it < bound; ++it) {
    std::array<std::size_t, 3> sample;
    sample[0] = rng.Index(n);
    do sample[1] = rng.Index(n); while (sample[1] == sample[0]);
    do sample[2] = rng.Index(n); while (sample[2] == sample[0] || sample[2] == sample[1]);
    const std::array<Point3, 3> p3 = {corr[sample[0]].point, corr[sample[1]].point, corr[sample[2]].point};
    const std::array<Point2, 3> p2 = {corr[sample[0]].pixel, corr[sample[1]].pixel, corr[sample[2]].pixel};
    std::vector<Pose> candidates;
    try {
      candidates = SolveP3P(std::span<const Point3, 3>(p3), std::span<const Point2, 3>(p2), K);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kDegenerateSample) throw;
      continue;
    }
    for (const Pose& cand : candidates) {
      any_model = true;
      std::size_t count = 0;
      double residual = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double e = SquaredReprojectionError(cand, K, corr[i].point, corr[i].pixel);
        if (e <= t2) {
          ++count;
          residual += e;
        }
      }
      // Ties keep the earliest hypothesis unless the residual strictly improves.
      if (count > best_count || (count == best_count && residual < best_residual)) {
        best_count = count;
        best_residual = residual;
        best_pose = cand;
        bound = AdaptiveIterationBound(static_cast<double>(best_count) / n, 3, cfg.confidence,
                                       cfg.max_iterations);
      }
    }
  }
  if (!any_model) {
    Throw(ErrorCode::kAllSamplesDegenerate, "every RANSAC sample was degenerate");
  }

  // Local optimization: refit on inliers while the consensus grows.
  std::vector<std::size_t> inliers = detail::CollectInliers(corr, best_pose, K, cfg.inlier_threshold_px);
  for (int round = 0; round < 4 && inliers.size() >= 4; ++round) {
    const Pose refined = RefinePoseReprojection(corr, inliers, K, best_pose);
    std::vector<std::size_t> refined_inliers = detail::CollectInliers(corr, refined, K, cfg.inlier_threshold_px);
    if (refined_inliers.size() < inliers.size()) break;
    const bool grew = refined_inliers.size() > inliers.size();
    best_pose = refined;
    inliers = std::move(refined_inliers);
    if (!grew) break;
  }

  if (static_cast<int>(inliers.size()) < std::max(cfg.min_inliers, 3)) {
    Throw(ErrorCode::kNotEnoughInliers, "PnP found " + std::to_string(inliers.size()) +
                                            " inliers, need " + std::to_string(cfg.min_inliers));
  }
  PoseEstimate est;
  est.pose = best_pose;
  est.inlier_indices = inliers;
  for (std::size_t i : inliers) est.inlier_ids.insert(corr[i].track_id);
  est.num_iterations_used = it;
  return est;
}

}  // namespace psfm
