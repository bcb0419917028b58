#pragma once

#include <Eigen/Core>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "psfm/dataset.hpp"
#include "psfm/depth_map.hpp"
#include "psfm/error.hpp"
#include "psfm/geom.hpp"
#include "psfm/reconstruction.hpp"

namespace psfm {

struct EvalConfig {
  // Ground-truth scene units per centimetre are 1/units_to_cm; the default
  // assumes metres.
  double units_to_cm = 100.0;
  std::vector<double> ate_anchors_cm = {0.2, 2.0};
  std::vector<double> trpe_anchors_cm = {0.1, 0.5};
  std::vector<double> rrpe_anchors_deg = {0.02, 0.1};
  std::vector<double> delta_anchors = {1.25, 1.25 * 1.25, 1.25 * 1.25 * 1.25};
  std::vector<double> theta_anchors_cm = {5.0, 10.0, 25.0};
  int grid_points = 512;
};

struct RecallCurve {
  std::vector<double> thresholds;  // uniform grid over [0, largest anchor]
  std::vector<double> recall;
  std::map<double, double> auc_at;  // anchor -> normalized area over [0, anchor]
  std::vector<double> errors;       // per-sample errors the curve was built from
};

// Errors at or below this (in reporting units) are alignment round-off and
// count as zero, so an exact estimate has recall 1 even at threshold 0.
inline constexpr double kRecallErrorFloor = 1e-9;

inline double RecallAt(std::span<const double> sorted_errors, double threshold) {
  if (sorted_errors.empty()) return 0.0;
  const auto it = std::upper_bound(sorted_errors.begin(), sorted_errors.end(), std::max(threshold, kRecallErrorFloor));
  return static_cast<double>(it - sorted_errors.begin()) / static_cast<double>(sorted_errors.size());
}

// Recall (fraction of errors <= threshold) on a uniform grid per anchor,
// integrated by the trapezoid rule and normalized by the anchor.
inline RecallCurve BuildRecallCurve(std::vector<double> errors, const std::vector<double>& anchors, int grid_points = 512) {
  if (grid_points < 2) Throw(ErrorCode::kInvalidArgument, "recall grid needs at least two points");
  RecallCurve curve;
  curve.errors = errors;
  std::sort(errors.begin(), errors.end());
  const auto grid = [&](double anchor, std::vector<double>& t, std::vector<double>& r) {
    t.resize(static_cast<std::size_t>(grid_points));
    r.resize(t.size());
    for (int k = 0; k < grid_points; ++k) {
      t[static_cast<std::size_t>(k)] = anchor * k / (grid_points - 1);
      r[static_cast<std::size_t>(k)] = RecallAt(errors, t[static_cast<std::size_t>(k)]);
    }
  };
  double largest = 0.0;
  for (double a : anchors) {
    if (!(a > 0.0)) Throw(ErrorCode::kInvalidArgument, "recall anchors must be positive");
    std::vector<double> t, r;
    grid(a, t, r);
    double area = 0.0;
    for (std::size_t k = 1; k < t.size(); ++k) area += 0.5 * (r[k] + r[k - 1]) * (t[k] - t[k - 1]);
    curve.auc_at[a] = std::clamp(area / a, 0.0, 1.0);
    largest = std::max(largest, a);
  }
  if (largest > 0.0) grid(largest, curve.thresholds, curve.recall);
  return curve;
}

inline double Median(std::vector<double> v) {
  if (v.empty()) Throw(ErrorCode::kInvalidArgument, "median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Least-squares similarity mapping `source` onto `target` (Umeyama).
inline Similarity UmeyamaAlignment(std::span<const Eigen::Vector3d> source, std::span<const Eigen::Vector3d> target) {
  if (source.size() != target.size()) Throw(ErrorCode::kLengthMismatch, "alignment sets differ in size");
  const std::size_t n = source.size();
  if (n < 3) Throw(ErrorCode::kDegenerateTrajectory, "similarity alignment needs at least 3 positions");
  Eigen::Vector3d ms = Eigen::Vector3d::Zero(), mt = Eigen::Vector3d::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    ms += source[i];
    mt += target[i];
  }
  ms /= static_cast<double>(n);
  mt /= static_cast<double>(n);
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  Eigen::Matrix3d cs = Eigen::Matrix3d::Zero();
  double var_s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Vector3d ds = source[i] - ms;
    cov += (target[i] - mt) * ds.transpose();
    cs += ds * ds.transpose();
    var_s += ds.squaredNorm();
  }
  cov /= static_cast<double>(n);
  cs /= static_cast<double>(n);
  var_s /= static_cast<double>(n);
  const Eigen::JacobiSVD<Eigen::Matrix3d> spread(cs);
  const Eigen::Vector3d ss = spread.singularValues();
  if (!(std::sqrt(var_s) > 1e-12 * (1.0 + ms.norm())) || !(ss(1) > 1e-12 * ss(0))) {
    Throw(ErrorCode::kDegenerateTrajectory, "camera centers are collinear or coincident");
  }
  const Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d S = Eigen::Matrix3d::Identity();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) S(2, 2) = -1.0;
  Similarity sim;
  sim.rotation = svd.matrixU() * S * svd.matrixV().transpose();
  sim.scale = (svd.singularValues().asDiagonal() * S).trace() / var_s;
  sim.translation = mt - sim.scale * sim.rotation * ms;
  if (!(sim.scale > 0.0)) Throw(ErrorCode::kDegenerateTrajectory, "alignment scale is not positive");
  return sim;
}

// Similarity taking estimated camera centers onto ground-truth centers.
inline Similarity AlignSim3(std::span<const Pose> est, std::span<const Pose> gt) {
  if (est.size() != gt.size()) Throw(ErrorCode::kLengthMismatch, "trajectories differ in length");
  std::vector<Eigen::Vector3d> a, b;
  for (const Pose& p : est) a.push_back(p.Center());
  for (const Pose& p : gt) b.push_back(p.Center());
  return UmeyamaAlignment(a, b);
}

// Per-frame center distance after alignment, in centimetres.
inline std::vector<double> AteErrors(std::span<const Pose> est, std::span<const Pose> gt, const Similarity& sim,
                                     double units_to_cm) {
  if (est.size() != gt.size()) Throw(ErrorCode::kLengthMismatch, "trajectories differ in length");
  std::vector<double> out;
  for (std::size_t i = 0; i < est.size(); ++i) out.push_back((sim.Apply(est[i].Center()) - gt[i].Center()).norm() * units_to_cm);
  return out;
}

inline RecallCurve Ate(std::span<const Pose> est, std::span<const Pose> gt, const EvalConfig& cfg = {}) {
  const Similarity sim = AlignSim3(est, gt);
  return BuildRecallCurve(AteErrors(est, gt, sim, cfg.units_to_cm), cfg.ate_anchors_cm, cfg.grid_points);
}

struct RpeErrors {
  std::vector<double> translation_cm;
  std::vector<double> rotation_deg;
};

// Consecutive-pair relative pose errors on camera-to-world motions; the
// estimated relative translation is multiplied by `scale`.
inline RpeErrors RelativePoseErrors(std::span<const Pose> est, std::span<const Pose> gt, double scale, double units_to_cm) {
  if (est.size() != gt.size()) Throw(ErrorCode::kLengthMismatch, "trajectories differ in length");
  RpeErrors out;
  for (std::size_t i = 0; i + 1 < est.size(); ++i) {
    // world-to-camera inverses are camera-to-world poses
    const Pose gt_rel = Compose(gt[i], Inverse(gt[i + 1]));
    const Pose est_rel_raw = Compose(est[i], Inverse(est[i + 1]));
    const Pose est_rel(est_rel_raw.quaternion(), scale * est_rel_raw.translation());
    const Pose delta = Compose(Inverse(gt_rel), est_rel);
    out.translation_cm.push_back(delta.translation().norm() * units_to_cm);
    out.rotation_deg.push_back(RotationAngle(delta.quaternion(), Eigen::Quaterniond::Identity()) * 180.0 /
                               std::numbers::pi);
  }
  return out;
}

struct RpeCurves {
  RecallCurve translation;
  RecallCurve rotation;
};

inline RpeCurves Rpe(std::span<const Pose> est, std::span<const Pose> gt, double scale, const EvalConfig& cfg = {}) {
  const RpeErrors e = RelativePoseErrors(est, gt, scale, cfg.units_to_cm);
  return {BuildRecallCurve(e.translation_cm, cfg.trpe_anchors_cm, cfg.grid_points),
          BuildRecallCurve(e.rotation_deg, cfg.rrpe_anchors_deg, cfg.grid_points)};
}

struct DepthSample {
  double estimate = 0.0;  // aligned camera-frame depth y
  double truth = 0.0;     // ground-truth depth y*
};

struct DepthAccuracy {
  std::map<double, double> delta_at;
  std::map<double, double> theta_at;
  std::size_t samples = 0;
  std::size_t skipped = 0;
};

inline DepthAccuracy DepthAccuracyFromSamples(std::span<const DepthSample> samples, const EvalConfig& cfg = {}) {
  if (samples.empty()) Throw(ErrorCode::kEmptyReconstruction, "no depth samples to evaluate");
  DepthAccuracy acc;
  acc.samples = samples.size();
  for (double t : cfg.delta_anchors) acc.delta_at[t] = 0.0;
  for (double t : cfg.theta_anchors_cm) acc.theta_at[t] = 0.0;
  for (const DepthSample& s : samples) {
    const double delta = std::max(s.truth / s.estimate, s.estimate / s.truth);
    const double theta = std::abs(s.estimate - s.truth) * cfg.units_to_cm;
    for (auto& [t, f] : acc.delta_at) f += delta < t;
    for (auto& [t, f] : acc.theta_at) f += theta < t;
  }
  const double n = static_cast<double>(samples.size());
  for (auto& [t, f] : acc.delta_at) f /= n;
  for (auto& [t, f] : acc.theta_at) f /= n;
  return acc;
}

// Projects every (point, registered view) with the estimated pose and
// compares the scale-aligned depth against the ground-truth map at the
// projected pixel. Views without a map or with no valid lookup are skipped.
inline std::vector<DepthSample> CollectDepthSamples(const Reconstruction& recon, const std::map<ImageId, DepthMap>& gt_depth,
                                                    double scale, std::size_t* skipped = nullptr) {
  std::vector<DepthSample> out;
  std::size_t skip = 0;
  for (const auto& [tid, point] : recon.points) {
    for (ImageId v : point.views) {
      const RegisteredImage& img = recon.images.at(v);
      const auto map = gt_depth.find(v);
      const Eigen::Vector3d X = img.pose.Transform(point.position);
      if (map == gt_depth.end() || !(X.z() > 0.0)) {
        ++skip;
        continue;
      }
      const Point2 px(img.intrinsics.fx * X.x() / X.z() + img.intrinsics.cx,
                      img.intrinsics.fy * X.y() / X.z() + img.intrinsics.cy);
      if (!(px.x() >= 0.0 && px.y() >= 0.0 && px.x() <= map->second.width() - 1 && px.y() <= map->second.height() - 1)) {
        ++skip;
        continue;
      }
      const std::optional<double> truth = DepthLookup(map->second, px);
      if (!truth) {
        ++skip;
        continue;
      }
      out.push_back({scale * X.z(), *truth});
    }
  }
  if (skipped) *skipped = skip;
  return out;
}

inline DepthAccuracy EvaluateDepth(const Reconstruction& recon, const std::map<ImageId, DepthMap>& gt_depth, double scale,
                                   const EvalConfig& cfg = {}) {
  if (recon.points.empty()) Throw(ErrorCode::kEmptyReconstruction, "reconstruction has no points");
  std::size_t skipped = 0;
  const std::vector<DepthSample> samples = CollectDepthSamples(recon, gt_depth, scale, &skipped);
  DepthAccuracy acc = DepthAccuracyFromSamples(samples, cfg);
  acc.skipped = skipped;
  return acc;
}

// Largest pairwise camera-center distance over the median point-to-camera
// distance.
inline double Parallax(std::span<const Pose> poses, std::span<const Point3> points) {
  if (poses.size() < 2 || points.empty()) Throw(ErrorCode::kInvalidArgument, "parallax needs two poses and a point");
  std::vector<Eigen::Vector3d> centers;
  for (const Pose& p : poses) centers.push_back(p.Center());
  double extent = 0.0;
  for (std::size_t i = 0; i < centers.size(); ++i)
    for (std::size_t j = i + 1; j < centers.size(); ++j) extent = std::max(extent, (centers[i] - centers[j]).norm());
  std::vector<double> dist;
  dist.reserve(points.size() * centers.size());
  for (const Point3& P : points)
    for (const Eigen::Vector3d& c : centers) dist.push_back((P - c).norm());
  const double med = Median(std::move(dist));
  if (!(med > 0.0)) Throw(ErrorCode::kInvalidArgument, "median point distance is zero");
  return extent / med;
}

}  // namespace psfm
