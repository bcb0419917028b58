#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "psfm/dataset.hpp"
#include "psfm/depth_map.hpp"
#include "psfm/error.hpp"
#include "psfm/evalkit.hpp"
#include "psfm/geom.hpp"
#include "psfm/rng.hpp"

namespace psfm {

enum class TrajectoryKind { kLinear, kArc, kPureRotation };
enum class PriorKind { kExact, kAffine, kNoisy };

inline std::string TrajectoryName(TrajectoryKind k) {
  switch (k) {
    case TrajectoryKind::kLinear: return "linear";
    case TrajectoryKind::kArc: return "arc";
    case TrajectoryKind::kPureRotation: return "pure-rotation";
  }
  return "linear";
}

inline TrajectoryKind ParseTrajectoryKind(const std::string& s) {
  if (s == "linear") return TrajectoryKind::kLinear;
  if (s == "arc") return TrajectoryKind::kArc;
  if (s == "pure-rotation") return TrajectoryKind::kPureRotation;
  Throw(ErrorCode::kInvalidArgument, "unknown trajectory kind '" + s + "'");
}

inline std::string PriorName(PriorKind k) {
  switch (k) {
    case PriorKind::kExact: return "exact";
    case PriorKind::kAffine: return "affine";
    case PriorKind::kNoisy: return "noisy";
  }
  return "exact";
}

inline PriorKind ParsePriorKind(const std::string& s) {
  if (s == "exact") return PriorKind::kExact;
  if (s == "affine") return PriorKind::kAffine;
  if (s == "noisy") return PriorKind::kNoisy;
  Throw(ErrorCode::kInvalidArgument, "unknown prior kind '" + s + "'");
}

struct SceneSpec {
  int num_frames = 20;
  int num_points = 300;
  // Largest camera-center distance over the median point-to-camera distance.
  double parallax_ratio = 0.01;
  TrajectoryKind trajectory = TrajectoryKind::kLinear;
  double pixel_noise_std = 0.0;
  // Standard deviation of the multiplicative prior noise (1 + N(0, alpha)).
  double depth_noise_alpha = 0.0;
  double outlier_fraction = 0.0;
  PriorKind prior = PriorKind::kExact;
  // The prior is (depth - beta*) / gamma*, so gamma* d + beta* is metric.
  double gamma_star = 1.0;
  double beta_star = 0.0;
  std::uint64_t rng_seed = 0;

  CameraIntrinsics intrinsics{500.0, 500.0, 319.5, 239.5, 640, 480};
  double min_depth = 4.0;
  double max_depth = 8.0;
  // Total camera rotation over the sequence, degrees.
  double rotation_sweep_deg = 2.0;
  // Keypoints closer than this to the border are not observed.
  double border_px = 2.0;

  void Validate() const {
    if (num_frames < 1 || num_points < 0) Throw(ErrorCode::kInvalidArgument, "frame and point counts must be non-negative");
    if (!(parallax_ratio >= 0.0) || !std::isfinite(parallax_ratio)) {
      Throw(ErrorCode::kInvalidArgument, "parallax ratio must be non-negative");
    }
    if (!(outlier_fraction >= 0.0 && outlier_fraction <= 1.0)) {
      Throw(ErrorCode::kInvalidArgument, "outlier fraction must lie in [0, 1]");
    }
    if (!(pixel_noise_std >= 0.0) || !(depth_noise_alpha >= 0.0)) {
      Throw(ErrorCode::kInvalidArgument, "noise levels must be non-negative");
    }
    if (!(gamma_star > 0.0) || !std::isfinite(beta_star)) Throw(ErrorCode::kInvalidArgument, "gamma* must be positive");
    if (!(min_depth > 0.0 && max_depth >= min_depth)) Throw(ErrorCode::kInvalidArgument, "invalid depth range");
    intrinsics.Validate();
    if (trajectory == TrajectoryKind::kPureRotation && parallax_ratio > 0.0) {
      Throw(ErrorCode::kSpecInfeasible, "a pure-rotation trajectory has zero parallax");
    }
    if (trajectory != TrajectoryKind::kPureRotation && parallax_ratio > 0.0 && num_frames < 2) {
      Throw(ErrorCode::kSpecInfeasible, "parallax needs at least two frames");
    }
  }

  // Effective prior noise: exact and affine priors carry none.
  double PriorNoise() const { return prior == PriorKind::kNoisy ? depth_noise_alpha : 0.0; }
  double Gamma() const { return prior == PriorKind::kExact ? 1.0 : gamma_star; }
  double Beta() const { return prior == PriorKind::kExact ? 0.0 : beta_star; }
};

struct GroundTruth {
  std::vector<Pose> poses;      // world-to-camera, frame i has image id i
  std::vector<Point3> points;   // point j belongs to track id j
  std::map<ImageId, DepthMap> depth;  // GT camera-frame depth, 0 where unknown
  double gamma = 1.0;
  double beta = 0.0;
  // Intended (double precision) prior and GT depth of every emitted observation.
  std::map<std::pair<TrackId, ImageId>, double> priors;
  std::map<std::pair<TrackId, ImageId>, double> depths;
  std::map<std::pair<TrackId, ImageId>, bool> outliers;
  double parallax = 0.0;
};

struct SyntheticScene {
  SceneSpec spec;
  Dataset dataset;
  TracksFile file;  // depth paths filled in by WriteFixture
  GroundTruth gt;
};

namespace detail {

inline Eigen::Quaterniond SweepRotation(const SceneSpec& spec, double u) {
  // Camera-to-world rotation: yaw with a slight pitch.
  const double sweep = spec.rotation_sweep_deg * std::numbers::pi / 180.0;
  const Eigen::Vector3d axis = Eigen::Vector3d(0.1, 1.0, 0.0).normalized();
  return Eigen::Quaterniond(Eigen::AngleAxisd(sweep * u, axis));
}

inline std::vector<Pose> BuildTrajectory(const SceneSpec& spec, double scale, const Eigen::Vector3d& scene_center) {
  std::vector<Pose> poses;
  for (int i = 0; i < spec.num_frames; ++i) {
    const double u = spec.num_frames > 1 ? static_cast<double>(i) / (spec.num_frames - 1) : 0.0;
    Eigen::Vector3d center = Eigen::Vector3d::Zero();
    Eigen::Quaterniond cam_to_world = SweepRotation(spec, u);
    switch (spec.trajectory) {
      case TrajectoryKind::kLinear:
        // A slight lateral bow keeps the centers non-collinear so that
        // similarity alignment is well posed.
        center = scale * (u * Eigen::Vector3d(1.0, 0.2, 0.1).normalized() +
                          0.15 * std::sin(std::numbers::pi * u) * Eigen::Vector3d(0.0, 1.0, -0.2).normalized());
        break;
      case TrajectoryKind::kArc: {
        // Arc around the scene center in the x-z plane; chord length == scale.
        const double radius = scene_center.z();
        const double half = std::asin(std::clamp(0.5 * scale / radius, 0.0, 1.0));
        const double phi = 2.0 * half * u;
        center = Eigen::Vector3d(radius * std::sin(phi), 0.0, radius * (1.0 - std::cos(phi)));
        cam_to_world = Eigen::Quaterniond(Eigen::AngleAxisd(-phi, Eigen::Vector3d::UnitY())) * cam_to_world;
        break;
      }
      case TrajectoryKind::kPureRotation:
        break;
    }
    const Eigen::Quaterniond R = cam_to_world.conjugate();
    poses.emplace_back(R, -(R * center));
  }
  // Frame 0 defines the world frame exactly.
  poses[0] = Pose::Identity();
  return poses;
}

inline void Splat(DepthMap& map, std::vector<int>& owner, const Point2& p, float value, int who, bool& conflict) {
  const int x0 = static_cast<int>(std::floor(p.x()));
  const int y0 = static_cast<int>(std::floor(p.y()));
  const int x1 = std::min(x0 + 1, map.width() - 1);
  const int y1 = std::min(y0 + 1, map.height() - 1);
  const int xs[4] = {x0, x1, x0, x1};
  const int ys[4] = {y0, y0, y1, y1};
  conflict = false;
  for (int k = 0; k < 4; ++k) {
    const int o = owner[static_cast<std::size_t>(ys[k]) * map.width() + xs[k]];
    if (o >= 0 && o != who && map.at(xs[k], ys[k]) != value) conflict = true;
  }
  if (conflict) return;
  for (int k = 0; k < 4; ++k) {
    owner[static_cast<std::size_t>(ys[k]) * map.width() + xs[k]] = who;
    map.at(xs[k], ys[k]) = value;
  }
}

}  // namespace detail

// Deterministic synthetic scene: points in front of frame 0, a trajectory
// scaled to the requested parallax, noisy/outlier observations and priors
// rasterized so that bilinear lookup at each keypoint returns its prior.
inline SyntheticScene Generate(const SceneSpec& spec) {
  spec.Validate();
  SyntheticScene scene;
  scene.spec = spec;
  GroundTruth& gt = scene.gt;
  gt.gamma = spec.Gamma();
  gt.beta = spec.Beta();
  const CameraIntrinsics& K = spec.intrinsics;

  CounterRng point_rng(spec.rng_seed, 1);
  CounterRng pixel_rng(spec.rng_seed, 2);
  CounterRng outlier_rng(spec.rng_seed, 3);
  CounterRng prior_rng(spec.rng_seed, 4);

  // Points: uniform pixel in frame 0 and a depth representable in single
  // precision, so exact frame-0 priors survive float storage unchanged.
  const double margin = 0.1 * std::min(K.width, K.height);
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (int j = 0; j < spec.num_points; ++j) {
    const Point2 px(point_rng.Uniform(margin, K.width - 1 - margin), point_rng.Uniform(margin, K.height - 1 - margin));
    double z = point_rng.Uniform(spec.min_depth, spec.max_depth);
    z = static_cast<double>(static_cast<float>(z));
    gt.points.push_back(Backproject(K, px, z));
    centroid += gt.points.back();
  }
  if (spec.num_points > 0) centroid /= spec.num_points;
  else centroid = Eigen::Vector3d(0.0, 0.0, 0.5 * (spec.min_depth + spec.max_depth));

  // Trajectory scale solving parallax(scale) == target by bisection.
  double scale = 0.0;
  if (spec.parallax_ratio > 0.0 && spec.num_points > 0) {
    const auto measure = [&](double s) {
      const std::vector<Pose> poses = detail::BuildTrajectory(spec, s, centroid);
      return Parallax(poses, gt.points);
    };
    double lo = 0.0, hi = spec.parallax_ratio * centroid.norm() + 1e-6;
    while (measure(hi) < spec.parallax_ratio) {
      hi *= 2.0;
      if (hi > 1e6 * (1.0 + centroid.norm())) Throw(ErrorCode::kSpecInfeasible, "parallax ratio is not attainable");
    }
    for (int it = 0; it < 200 && hi - lo > 1e-15 * hi; ++it) {
      const double mid = 0.5 * (lo + hi);
      (measure(mid) < spec.parallax_ratio ? lo : hi) = mid;
    }
    scale = 0.5 * (lo + hi);
  }
  gt.poses = detail::BuildTrajectory(spec, scale, centroid);
  if (spec.num_frames >= 2 && spec.num_points > 0) gt.parallax = Parallax(gt.poses, gt.points);

  // Observations, frame by frame; nearer points claim depth support first.
  std::vector<std::vector<Observation>> per_track(static_cast<std::size_t>(spec.num_points));
  std::vector<ImageRecord> images;
  for (int i = 0; i < spec.num_frames; ++i) {
    const ImageId id = static_cast<ImageId>(i);
    const Pose& pose = gt.poses[static_cast<std::size_t>(i)];
    struct Candidate {
      int point;
      double depth;
      Point2 pixel;
      Point2 clean;
      bool outlier;
    };
    std::vector<Candidate> cands;
    for (int j = 0; j < spec.num_points; ++j) {
      const Eigen::Vector3d X = pose.Transform(gt.points[static_cast<std::size_t>(j)]);
      if (!(X.z() > 1e-3)) continue;
      const Point2 clean(K.fx * X.x() / X.z() + K.cx, K.fy * X.y() / X.z() + K.cy);
      if (clean.x() < spec.border_px || clean.y() < spec.border_px || clean.x() > K.width - 1 - spec.border_px ||
          clean.y() > K.height - 1 - spec.border_px) {
        continue;
      }
      Candidate c{j, X.z(), clean, clean, false};
      if (spec.pixel_noise_std > 0.0) {
        c.pixel += Point2(pixel_rng.Gaussian(), pixel_rng.Gaussian()) * spec.pixel_noise_std;
        c.pixel.x() = std::clamp(c.pixel.x(), 0.0, K.width - 1.0);
        c.pixel.y() = std::clamp(c.pixel.y(), 0.0, K.height - 1.0);
      }
      if (spec.outlier_fraction > 0.0 && outlier_rng.Uniform() < spec.outlier_fraction) {
        c.pixel = Point2(outlier_rng.Uniform(0.0, K.width - 1.0), outlier_rng.Uniform(0.0, K.height - 1.0));
        c.outlier = true;
      }
      cands.push_back(c);
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) { return a.depth < b.depth; });

    DepthMap prior_map(K.width, K.height, 0.0f);
    DepthMap gt_map(K.width, K.height, 0.0f);
    std::vector<int> owner(static_cast<std::size_t>(K.width) * K.height, -1);
    std::vector<int> gt_owner(owner.size(), -1);
    std::vector<double> splatted;
    for (const Candidate& c : cands) {
      const TrackId tid = static_cast<TrackId>(c.point);
      double prior = (c.depth - gt.beta) / gt.gamma;
      const double alpha = spec.PriorNoise();
      if (alpha > 0.0) {
        double f = 1.0 + alpha * prior_rng.Gaussian();
        for (int tries = 0; f <= 0.05 && tries < 64; ++tries) f = 1.0 + alpha * prior_rng.Gaussian();
        if (f <= 0.05) f = 0.05;
        prior *= f;
      }
      if (!(prior > 0.0)) continue;
      const float stored = static_cast<float>(prior);
      bool conflict = false;
      detail::Splat(prior_map, owner, c.pixel, stored, c.point, conflict);
      if (conflict) continue;
      bool gt_conflict = false;
      detail::Splat(gt_map, gt_owner, c.clean, static_cast<float>(c.depth), c.point, gt_conflict);
      splatted.push_back(prior);
      Observation obs;
      obs.image_id = id;
      obs.pixel = c.pixel;
      per_track[static_cast<std::size_t>(c.point)].push_back(obs);
      gt.priors[{tid, id}] = prior;
      gt.depths[{tid, id}] = c.depth;
      gt.outliers[{tid, id}] = c.outlier;
    }
    // Background keeps the map dense and valid away from keypoints.
    const float fill = splatted.empty() ? static_cast<float>(0.5 * (spec.min_depth + spec.max_depth) / gt.gamma)
                                        : static_cast<float>(Median(splatted));
    for (int y = 0; y < K.height; ++y)
      for (int x = 0; x < K.width; ++x)
        if (owner[static_cast<std::size_t>(y) * K.width + x] < 0) prior_map.at(x, y) = fill;

    ImageRecord rec;
    rec.id = id;
    rec.intrinsics = K;
    rec.depth = std::move(prior_map);
    images.push_back(std::move(rec));
    gt.depth.emplace(id, std::move(gt_map));
  }

  std::vector<Track> tracks;
  for (int j = 0; j < spec.num_points; ++j) {
    auto& obs = per_track[static_cast<std::size_t>(j)];
    if (obs.size() < 2) {
      for (const Observation& o : obs) {
        gt.priors.erase({static_cast<TrackId>(j), o.image_id});
        gt.depths.erase({static_cast<TrackId>(j), o.image_id});
        gt.outliers.erase({static_cast<TrackId>(j), o.image_id});
      }
      continue;
    }
    tracks.push_back({static_cast<TrackId>(j), obs});
  }

  for (const ImageRecord& rec : images) scene.file.images.push_back({rec.id, rec.intrinsics, "", ""});
  scene.file.tracks = tracks;
  // Images that no track references are kept in the file but dropped on load.
  scene.dataset = Dataset::Build(std::move(images), std::move(tracks));
  return scene;
}

}  // namespace psfm
