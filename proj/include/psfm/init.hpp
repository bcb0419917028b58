#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <vector>

#include "psfm/dataset.hpp"
#include "psfm/error.hpp"
#include "psfm/geom.hpp"
#include "psfm/ransac_pnp.hpp"
#include "psfm/reconstruction.hpp"
#include "psfm/regopt.hpp"

namespace psfm {

struct InitPairScore {
  ImageId image_a = 0;
  ImageId image_b = 0;
  int num_valid_matches = 0;
};

struct InitConfig {
  int min_init_matches = 30;
  RansacConfig ransac;
  SolverConfig solver;
  // When false the pose refinement after PnP drops the depth terms.
  bool depth_regularization = true;
};

struct SeedReconstruction {
  InitPairScore pair;
  Pose pose_a;  // identity
  Pose pose_b;
  AlignmentParams alignment_b;
  std::map<TrackId, Point3> points;
  int lifted = 0;
  int lift_skipped = 0;
  int pnp_inliers = 0;
  RegistrationResult refinement;
};

// Number of shared tracks whose observations in both images carry a prior.
inline int CountValidMatches(const Dataset& dataset, ImageId a, ImageId b) {
  int n = 0;
  for (const Track& track : dataset.tracks()) {
    const Observation* oa = track.Find(a);
    const Observation* ob = track.Find(b);
    if (oa && ob && oa->prior_depth && ob->prior_depth) ++n;
  }
  return n;
}

// Pair with the most valid-depth matches; ties go to the lowest ids.
inline InitPairScore SelectInitPair(const Dataset& dataset, int min_init_matches = 30) {
  std::map<std::pair<ImageId, ImageId>, int> counts;
  for (const Track& track : dataset.tracks()) {
    const auto& obs = track.observations;
    for (std::size_t i = 0; i < obs.size(); ++i) {
      if (!obs[i].prior_depth) continue;
      for (std::size_t j = i + 1; j < obs.size(); ++j) {
        if (obs[j].prior_depth) ++counts[{obs[i].image_id, obs[j].image_id}];
      }
    }
  }
  std::optional<InitPairScore> best;
  for (const auto& [pair, n] : counts) {
    if (!best || n > best->num_valid_matches) best = InitPairScore{pair.first, pair.second, n};
  }
  if (!best || best->num_valid_matches < min_init_matches) {
    Throw(ErrorCode::kNoViablePair, "no image pair shares " + std::to_string(min_init_matches) +
                                        " matches with valid depth (best: " +
                                        std::to_string(best ? best->num_valid_matches : 0) + ")");
  }
  return *best;
}

struct LiftedPoints {
  std::map<TrackId, Point3> points;
  int skipped = 0;
};

// Back-projects the keypoints of `image` at their prior depth; the camera
// frame of `image` is the world frame.
inline LiftedPoints LiftKeypoints(const Dataset& dataset, ImageId image) {
  LiftedPoints out;
  const CameraIntrinsics& K = dataset.image(image).intrinsics;
  for (const Track& track : dataset.tracks()) {
    const Observation* obs = track.Find(image);
    if (!obs) continue;
    if (!obs->prior_depth) {
      ++out.skipped;
      continue;
    }
    out.points.emplace(track.id, Backproject(K, obs->pixel, *obs->prior_depth));
  }
  return out;
}

// Depth-lifted two-view initialization: keypoints of image a are lifted
// with their priors and image b is registered to them by PnP, followed by a
// pose/alignment refinement with the lifted points held fixed.
inline SeedReconstruction Initialize(const Dataset& dataset, const InitConfig& cfg) {
  SeedReconstruction seed;
  seed.pair = SelectInitPair(dataset, cfg.min_init_matches);
  const ImageId a = seed.pair.image_a;
  const ImageId b = seed.pair.image_b;
  const CameraIntrinsics& Kb = dataset.image(b).intrinsics;

  const LiftedPoints lifted = LiftKeypoints(dataset, a);
  seed.lift_skipped = lifted.skipped;
  std::vector<Correspondence2D3D> corr;
  std::vector<std::optional<double>> priors_b;
  for (const auto& [tid, P] : lifted.points) {
    const Observation* ob = dataset.track(tid).Find(b);
    if (!ob) continue;
    corr.push_back({P, ob->pixel, tid});
    priors_b.push_back(ob->prior_depth);
  }
  seed.lifted = static_cast<int>(corr.size());
  if (corr.size() < 4) {
    Throw(ErrorCode::kInitializationFailed, "only " + std::to_string(corr.size()) + " lifted points are seen by image " +
                                                std::to_string(b));
  }

  PoseEstimate est;
  try {
    est = RansacPnP(corr, Kb, cfg.ransac);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kNotEnoughInliers || e.code() == ErrorCode::kAllSamplesDegenerate) {
      Throw(ErrorCode::kInitializationFailed, std::string("initial PnP failed: ") + e.what());
    }
    throw;
  }
  seed.pnp_inliers = static_cast<int>(est.inlier_indices.size());

  std::vector<RegistrationTerm> terms;
  for (std::size_t i : est.inlier_indices) terms.push_back({corr[i].point, corr[i].pixel, priors_b[i]});
  SolverConfig solver = cfg.solver;
  if (!cfg.depth_regularization) solver.lambda = 0.0;
  seed.refinement = RefineRegistration(est.pose, terms, Kb, solver);
  seed.pose_b = seed.refinement.pose;
  seed.alignment_b = seed.refinement.alignment;

  const double t2 = cfg.ransac.inlier_threshold_px * cfg.ransac.inlier_threshold_px;
  for (std::size_t i : est.inlier_indices) {
    if (SquaredReprojectionError(seed.pose_b, Kb, corr[i].point, corr[i].pixel) <= t2) {
      seed.points.emplace(corr[i].track_id, corr[i].point);
    }
  }
  if (static_cast<int>(seed.points.size()) < cfg.ransac.min_inliers) {
    Throw(ErrorCode::kInitializationFailed, "refined initial pose keeps only " + std::to_string(seed.points.size()) +
                                                " inliers");
  }
  return seed;
}

inline Reconstruction SeedToReconstruction(const SeedReconstruction& seed, const Dataset& dataset) {
  Reconstruction recon;
  const ImageId a = seed.pair.image_a;
  const ImageId b = seed.pair.image_b;
  recon.seed_image = a;
  recon.images[a] = {a, seed.pose_a, AlignmentParams{1.0, 0.0}, dataset.image(a).intrinsics};
  recon.images[b] = {b, seed.pose_b, seed.alignment_b, dataset.image(b).intrinsics};
  recon.registration_order = {a, b};
  for (const auto& [tid, P] : seed.points) recon.points[tid] = ScenePoint{tid, P, {a, b}};
  // The seed point nearest the median depth pins the scale in bundle adjustment.
  if (!seed.points.empty()) {
    std::vector<std::pair<double, TrackId>> depths;
    for (const auto& [tid, P] : seed.points) depths.emplace_back(P.z(), tid);
    std::nth_element(depths.begin(), depths.begin() + static_cast<long>(depths.size() / 2), depths.end());
    recon.scale_anchor = depths[depths.size() / 2].second;
  }
  return recon;
}

}  // namespace psfm
