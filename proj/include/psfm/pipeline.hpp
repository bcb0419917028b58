#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "psfm/bundle.hpp"
#include "psfm/dataset.hpp"
#include "psfm/error.hpp"
#include "psfm/init.hpp"
#include "psfm/parallel.hpp"
#include "psfm/ransac_pnp.hpp"
#include "psfm/reconstruction.hpp"
#include "psfm/regopt.hpp"
#include "psfm/triangulation.hpp"

namespace psfm {

struct PipelineConfig {
  RansacConfig ransac;
  SolverConfig solver;
  BundleConfig bundle;
  FilterConfig filter;
  int min_init_matches = 30;
  // Ablation switches; all four combinations are accepted by the config,
  // but reconstruction without depth-lifted initialization is not supported.
  bool depth_init = true;
  bool depth_regularization = true;
  // Seed a point from the depth prior when two-view DLT has no usable
  // baseline (depth regularization only).
  bool depth_lift_fallback = true;
  // Called after every bundle adjustment and filter pass; debugging aid.
  std::function<void(const Reconstruction&)> observer;

  InitConfig Init() const {
    InitConfig c;
    c.min_init_matches = min_init_matches;
    c.ransac = ransac;
    c.solver = solver;
    c.depth_regularization = depth_regularization;
    return c;
  }

  void Validate() const {
    ransac.Validate();
    solver.Validate();
    if (bundle.local_window < 1 || bundle.global_every < 1 || bundle.max_iterations < 0) {
      Throw(ErrorCode::kInvalidArgument, "invalid bundle adjustment schedule");
    }
    if (!(filter.filter_px > 0.0) || !(filter.depth_gate >= 0.0) || !(filter.min_tri_angle_deg >= 0.0)) {
      Throw(ErrorCode::kInvalidArgument, "invalid filter configuration");
    }
    if (min_init_matches < 1) Throw(ErrorCode::kInvalidArgument, "min_init_matches must be positive");
  }
};

// Number of observations in `image` of tracks that already have a point.
inline int CountVisiblePoints(const Reconstruction& recon, const Dataset& dataset, ImageId image) {
  int n = 0;
  for (const auto& [tid, point] : recon.points) {
    if (dataset.track(tid).Find(image)) ++n;
  }
  return n;
}

// Unregistered image observing the most reconstructed points, ties to the
// lower id. `exclude` lists images that must not be proposed.
inline ImageId NextImage(const Reconstruction& recon, const Dataset& dataset, int min_correspondences,
                         const std::set<ImageId>& exclude = {}) {
  std::map<ImageId, int> counts;
  for (const auto& [tid, point] : recon.points) {
    for (const Observation& obs : dataset.track(tid).observations) {
      if (!recon.IsRegistered(obs.image_id) && !exclude.count(obs.image_id)) ++counts[obs.image_id];
    }
  }
  std::optional<std::pair<ImageId, int>> best;
  for (const auto& [id, n] : counts) {
    if (!best || n > best->second) best = std::make_pair(id, n);
  }
  if (!best || best->second < std::max(min_correspondences, 4)) {
    Throw(ErrorCode::kNoRegistrableImage, "no unregistered image sees enough reconstructed points");
  }
  return best->first;
}

struct RegistrationReport {
  ImageId image_id = 0;
  int correspondences = 0;
  int inliers = 0;
  int depth_terms = 0;
  int ransac_iterations = 0;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  bool refinement_diverged = false;
  // The depth-regularized pose lost its consensus set; the reprojection-only
  // refinement was kept instead.
  bool depth_fallback = false;
};

// PnP-RANSAC followed by pose refinement over the inliers: the joint
// pose/alignment objective with depth regularization on, reprojection-only
// otherwise (alignment then comes from the closed-form fit).
inline RegistrationReport RegisterImage(ImageId image, Reconstruction& recon, const Dataset& dataset,
                                        const PipelineConfig& cfg) {
  if (recon.IsRegistered(image)) Throw(ErrorCode::kInvalidArgument, "image already registered");
  const ImageRecord& rec = dataset.image(image);
  std::vector<Correspondence2D3D> corr;
  std::vector<std::optional<double>> priors;
  for (const auto& [tid, point] : recon.points) {
    const Observation* obs = dataset.track(tid).Find(image);
    if (!obs) continue;
    corr.push_back({point.position, obs->pixel, tid});
    priors.push_back(obs->prior_depth);
  }
  RegistrationReport report;
  report.image_id = image;
  report.correspondences = static_cast<int>(corr.size());
  if (corr.size() < 4) {
    Throw(ErrorCode::kRegistrationFailed, "image " + std::to_string(image) + " has " + std::to_string(corr.size()) +
                                              " 2D-3D correspondences");
  }
  RansacConfig rc = cfg.ransac;
  rc.rng_seed = cfg.ransac.rng_seed ^ (0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(image) + 1));
  PoseEstimate est;
  try {
    est = RansacPnP(corr, rec.intrinsics, rc);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kNotEnoughInliers || e.code() == ErrorCode::kAllSamplesDegenerate) {
      Throw(ErrorCode::kRegistrationFailed, "image " + std::to_string(image) + ": " + e.what());
    }
    throw;
  }
  report.ransac_iterations = est.num_iterations_used;

  std::vector<RegistrationTerm> terms;
  for (std::size_t i : est.inlier_indices) terms.push_back({corr[i].point, corr[i].pixel, priors[i]});
  SolverConfig solver = cfg.solver;
  if (!cfg.depth_regularization) solver.lambda = 0.0;
  RegistrationResult res = RefineRegistration(est.pose, terms, rec.intrinsics, solver);

  const double t2 = cfg.ransac.inlier_threshold_px * cfg.ransac.inlier_threshold_px;
  const auto count_inliers = [&](const Pose& pose) {
    int n = 0;
    for (const Correspondence2D3D& c : corr) n += SquaredReprojectionError(pose, rec.intrinsics, c.point, c.pixel) <= t2;
    return n;
  };
  int inliers = count_inliers(res.pose);
  // Depth terms that disagree with the current structure can outweigh the
  // robust reprojection terms and drag the pose off its consensus set; keep
  // the reprojection-only refinement in that case.
  if (solver.lambda > 0.0 && 2 * inliers < static_cast<int>(est.inlier_indices.size())) {
    SolverConfig plain = solver;
    plain.lambda = 0.0;
    RegistrationResult fallback = RefineRegistration(est.pose, terms, rec.intrinsics, plain);
    const int fallback_inliers = count_inliers(fallback.pose);
    recon.Log("depth_refinement_rejected",
              {{"image", image}, {"inliers", inliers}, {"fallback_inliers", fallback_inliers}});
    if (fallback_inliers > inliers) {
      res = fallback;
      res.depth_terms = 0;
      inliers = fallback_inliers;
      report.depth_fallback = true;
    }
  }
  if (inliers < cfg.ransac.min_inliers) {
    Throw(ErrorCode::kRegistrationFailed, "image " + std::to_string(image) + " keeps " + std::to_string(inliers) +
                                              " inliers after refinement");
  }
  report.inliers = inliers;
  report.depth_terms = cfg.depth_regularization ? res.depth_terms : 0;
  report.initial_cost = res.initial_cost;
  report.final_cost = res.final_cost;
  report.refinement_diverged = res.diverged;

  recon.images[image] = {image, res.pose, res.alignment, rec.intrinsics};
  recon.registration_order.push_back(image);
  recon.Log("register", {{"image", image},
                         {"correspondences", report.correspondences},
                         {"inliers", inliers},
                         {"depth_terms", report.depth_terms},
                         {"ransac_iterations", report.ransac_iterations},
                         {"gamma", res.alignment.gamma},
                         {"beta", res.alignment.beta},
                         {"refinement_diverged", res.diverged}});
  return report;
}

enum class TrackDisposition { kUnprocessed, kCreated, kSkipped };

struct TriangulationReport {
  int attached = 0;
  int created = 0;
  int skipped = 0;
  std::vector<TrackId> created_ids;
  std::vector<TrackId> skipped_ids;
};

namespace detail {

inline void InsertView(ScenePoint& point, ImageId id) {
  point.views.insert(std::lower_bound(point.views.begin(), point.views.end(), id), id);
}

struct TriangulationOutcome {
  bool ok = false;
  Point3 point = Point3::Zero();
  std::vector<ImageId> views;
  std::string reason;
};

inline TriangulationOutcome TriangulateTrack(const Track& track, const Reconstruction& recon,
                                             const PipelineConfig& cfg) {
  TriangulationOutcome out;
  std::vector<TriangulationView> views;
  std::vector<const Observation*> obs;
  for (const Observation& o : track.observations) {
    const auto it = recon.images.find(o.image_id);
    if (it == recon.images.end()) continue;
    views.push_back({it->second.pose, it->second.intrinsics, o.pixel});
    obs.push_back(&o);
  }
  if (views.size() < 2) {
    out.reason = "fewer than two registered views";
    return out;
  }

  RansacConfig rc = cfg.ransac;
  rc.rng_seed = cfg.ransac.rng_seed ^ (0xD1B54A32D192ED03ULL * (static_cast<std::uint64_t>(track.id) + 1));
  std::vector<std::size_t> inliers;
  Point3 P;
  try {
    const TriangulationEstimate est = RansacTriangulate(views, rc);
    P = est.point;
    inliers = est.inliers;
  } catch (const Error& e) {
    const bool geometric = e.code() == ErrorCode::kDegenerateGeometry || e.code() == ErrorCode::kBehindAllCameras ||
                           e.code() == ErrorCode::kNotEnoughInliers;
    if (!geometric) throw;
    out.reason = e.what();
  }

  // Without usable baseline, a prior-carrying view can still seed the point.
  if (inliers.empty() && cfg.depth_regularization && cfg.depth_lift_fallback) {
    const double t2 = cfg.ransac.inlier_threshold_px * cfg.ransac.inlier_threshold_px;
    for (std::size_t k = 0; k < views.size() && inliers.empty(); ++k) {
      if (!obs[k]->prior_depth) continue;
      const AlignmentParams& al = recon.images.at(obs[k]->image_id).alignment;
      const double z = al.gamma * *obs[k]->prior_depth + al.beta;
      if (!(z > 0.0)) continue;
      const Point3 cam = Backproject(views[k].intrinsics, views[k].pixel, z);
      const Point3 world = Inverse(views[k].pose).Transform(cam);
      std::vector<std::size_t> agree;
      for (std::size_t j = 0; j < views.size(); ++j) {
        if (SquaredReprojectionError(views[j].pose, views[j].intrinsics, world, views[j].pixel) <= t2) agree.push_back(j);
      }
      if (agree.size() >= 2) {
        P = world;
        inliers = std::move(agree);
      }
    }
  }
  if (inliers.size() < 2) {
    if (out.reason.empty()) out.reason = "fewer than two consistent views";
    return out;
  }

  if (cfg.depth_regularization) {
    std::vector<TriangulationTerm> terms;
    for (std::size_t k : inliers) {
      const RegisteredImage& img = recon.images.at(obs[k]->image_id);
      terms.push_back({views[k].pose, views[k].intrinsics, views[k].pixel, obs[k]->prior_depth, img.alignment});
    }
    P = RefineTriangulation(P, terms, cfg.solver).point;
  }

  const double gate2 = cfg.filter.filter_px * cfg.filter.filter_px;
  for (std::size_t k : inliers) {
    if (SquaredReprojectionError(views[k].pose, views[k].intrinsics, P, views[k].pixel) <= gate2) {
      out.views.push_back(obs[k]->image_id);
    }
  }
  if (out.views.size() < 2) {
    out.reason = "refined point fails the reprojection gate";
    out.views.clear();
    return out;
  }
  out.ok = true;
  out.point = P;
  return out;
}

}  // namespace detail

// Attaches the new image's observations to existing points that reproject
// within the filter gate and triangulates tracks that gain their second
// registered view.
inline TriangulationReport TriangulateNew(ImageId image, Reconstruction& recon, const Dataset& dataset,
                                          const PipelineConfig& cfg,
                                          std::map<TrackId, TrackDisposition>* dispositions = nullptr) {
  if (!recon.IsRegistered(image)) Throw(ErrorCode::kInvalidArgument, "image is not registered");
  TriangulationReport report;
  const RegisteredImage& img = recon.images.at(image);
  const double gate2 = cfg.filter.filter_px * cfg.filter.filter_px;
  std::vector<const Track*> pending;
  for (const Track& track : dataset.tracks()) {
    const Observation* obs = track.Find(image);
    if (!obs) continue;
    const auto it = recon.points.find(track.id);
    if (it != recon.points.end()) {
      if (it->second.HasView(image)) continue;
      if (SquaredReprojectionError(img.pose, img.intrinsics, it->second.position, obs->pixel) <= gate2) {
        detail::InsertView(it->second, image);
        ++report.attached;
      }
      continue;
    }
    int registered = 0;
    for (const Observation& o : track.observations) registered += recon.IsRegistered(o.image_id);
    if (registered >= 2) pending.push_back(&track);
  }

  std::vector<detail::TriangulationOutcome> outcomes(pending.size());
  ParallelFor(pending.size(), [&](std::size_t i) { outcomes[i] = detail::TriangulateTrack(*pending[i], recon, cfg); });

  for (std::size_t i = 0; i < pending.size(); ++i) {
    const TrackId tid = pending[i]->id;
    if (outcomes[i].ok) {
      recon.points[tid] = ScenePoint{tid, outcomes[i].point, outcomes[i].views};
      ++report.created;
      report.created_ids.push_back(tid);
      if (dispositions) (*dispositions)[tid] = TrackDisposition::kCreated;
    } else {
      ++report.skipped;
      report.skipped_ids.push_back(tid);
      if (dispositions && (*dispositions)[tid] != TrackDisposition::kCreated) (*dispositions)[tid] = TrackDisposition::kSkipped;
      recon.Log("triangulation_skipped", {{"image", image}, {"track", tid}, {"reason", outcomes[i].reason}});
    }
  }
  recon.Log("triangulate", {{"image", image},
                            {"attached", report.attached},
                            {"created", report.created},
                            {"skipped", report.skipped}});
  return report;
}

// Checks the structural invariants; returns one message per violation.
inline std::vector<std::string> ValidateReconstruction(const Reconstruction& recon, const Dataset& dataset) {
  std::vector<std::string> problems;
  const auto seed = recon.images.find(recon.seed_image);
  if (seed == recon.images.end()) {
    problems.push_back("seed image is not registered");
  } else if (seed->second.alignment.gamma != 1.0 || seed->second.alignment.beta != 0.0) {
    problems.push_back("seed image alignment is not (1, 0)");
  }
  for (const auto& [id, img] : recon.images) {
    if (!(img.alignment.gamma > 0.0) || !std::isfinite(img.alignment.gamma)) {
      problems.push_back("image " + std::to_string(id) + " has non-positive gamma");
    }
  }
  for (const auto& [tid, point] : recon.points) {
    if (point.views.size() < 2) problems.push_back("point " + std::to_string(tid) + " has fewer than two views");
    for (const ViewResidual& r : recon.Residuals(point, dataset)) {
      if (!r.cheirality_ok) {
        problems.push_back("point " + std::to_string(tid) + " is behind image " + std::to_string(r.image_id));
      }
    }
    for (ImageId v : point.views) {
      if (!recon.IsRegistered(v)) problems.push_back("point " + std::to_string(tid) + " references an unregistered image");
    }
  }
  return problems;
}

struct ReconstructionSummary {
  int tracks_in = 0;
  int points_created = 0;
  int points_skipped = 0;
  int tracks_unprocessed = 0;
  int points_final = 0;
  int images_registered = 0;
  int images_failed = 0;
  int global_bundles = 0;
  int local_bundles = 0;

  nlohmann::json Json() const {
    return {{"tracks_in", tracks_in},           {"points_created", points_created},
            {"points_skipped", points_skipped}, {"tracks_unprocessed", tracks_unprocessed},
            {"points_final", points_final},     {"images_registered", images_registered},
            {"images_failed", images_failed},   {"global_bundles", global_bundles},
            {"local_bundles", local_bundles}};
  }
};

struct ReconstructionResult {
  Reconstruction recon;
  ReconstructionSummary summary;
  std::vector<ImageId> unregistered;
};

namespace detail {

inline void RunBundle(Reconstruction& recon, const Dataset& dataset, const PipelineConfig& cfg, bool global,
                      ReconstructionSummary& summary) {
  std::optional<std::set<ImageId>> window;
  if (!global) {
    window.emplace();
    const auto& order = recon.registration_order;
    const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(cfg.bundle.local_window), order.size());
    window->insert(order.end() - static_cast<long>(k), order.end());
  }
  const BundleSummary bs = BundleAdjust(recon, dataset, cfg.bundle, window);
  const FilterStats fs = FilterPoints(recon, dataset, cfg.filter);
  (global ? summary.global_bundles : summary.local_bundles)++;
  if (cfg.observer) cfg.observer(recon);
  recon.Log(global ? "global_bundle" : "local_bundle", {{"iterations", bs.iterations},
                                                        {"initial_cost", bs.initial_cost},
                                                        {"final_cost", bs.final_cost},
                                                        {"variable_poses", bs.variable_poses},
                                                        {"variable_points", bs.variable_points},
                                                        {"diverged", bs.diverged},
                                                        {"filtered_reprojection", fs.removed_reprojection},
                                                        {"filtered_cheirality", fs.removed_cheirality},
                                                        {"filtered_angle", fs.removed_angle}});
}

}  // namespace detail

// Incremental reconstruction: depth-lifted initialization, then repeated
// next-view registration, triangulation, scheduled bundle adjustment and
// filtering, closed by a final global bundle adjustment.
inline ReconstructionResult Reconstruct(const Dataset& dataset, const PipelineConfig& cfg) {
  cfg.Validate();
  if (!cfg.depth_init) {
    Throw(ErrorCode::kNotSupported,
          "initialization without depth priors is not available; enable depth initialization");
  }
  ReconstructionResult result;
  ReconstructionSummary& summary = result.summary;
  std::map<TrackId, TrackDisposition> disposition;
  for (const Track& t : dataset.tracks()) disposition[t.id] = TrackDisposition::kUnprocessed;

  const SeedReconstruction seed = Initialize(dataset, cfg.Init());
  Reconstruction recon = SeedToReconstruction(seed, dataset);
  for (const auto& [tid, p] : recon.points) disposition[tid] = TrackDisposition::kCreated;
  recon.Log("init", {{"image_a", seed.pair.image_a},
                     {"image_b", seed.pair.image_b},
                     {"valid_matches", seed.pair.num_valid_matches},
                     {"lifted", seed.lifted},
                     {"pnp_inliers", seed.pnp_inliers},
                     {"points", seed.points.size()},
                     {"gamma_b", seed.alignment_b.gamma},
                     {"beta_b", seed.alignment_b.beta}});
  TriangulateNew(seed.pair.image_b, recon, dataset, cfg, &disposition);
  // No bundle adjustment on the bare seed pair: at small baselines a two-view
  // reprojection-only solve is ill-posed along the rays and discards the
  // depth-lifted structure. Local BA starts with the first registration.

  std::set<ImageId> waiting;  // failed once, retried after the next global BA
  std::set<ImageId> failed;   // failed twice
  std::set<ImageId> retried;
  int since_global = 0;
  const auto release = [&] {
    for (ImageId id : waiting) {
      retried.insert(id);
      recon.Log("retry", {{"image", id}});
    }
    waiting.clear();
  };

  while (recon.images.size() < dataset.images().size()) {
    std::set<ImageId> exclude = failed;
    exclude.insert(waiting.begin(), waiting.end());
    ImageId next = 0;
    try {
      next = NextImage(recon, dataset, cfg.ransac.min_inliers, exclude);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kNoRegistrableImage) throw;
      if (waiting.empty()) break;
      detail::RunBundle(recon, dataset, cfg, true, summary);
      since_global = 0;
      release();
      continue;
    }
    try {
      RegisterImage(next, recon, dataset, cfg);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kRegistrationFailed) throw;
      recon.Log("register_failed", {{"image", next}, {"reason", e.what()}, {"retry", !retried.count(next)}});
      (retried.count(next) ? failed : waiting).insert(next);
      continue;
    }
    TriangulateNew(next, recon, dataset, cfg, &disposition);
    detail::RunBundle(recon, dataset, cfg, false, summary);
    if (++since_global >= cfg.bundle.global_every) {
      detail::RunBundle(recon, dataset, cfg, true, summary);
      since_global = 0;
      release();
    }
  }
  detail::RunBundle(recon, dataset, cfg, true, summary);

  summary.tracks_in = static_cast<int>(dataset.tracks().size());
  for (const auto& [tid, d] : disposition) {
    if (d == TrackDisposition::kCreated) ++summary.points_created;
    else if (d == TrackDisposition::kSkipped) ++summary.points_skipped;
    else ++summary.tracks_unprocessed;
  }
  summary.points_final = static_cast<int>(recon.points.size());
  summary.images_registered = static_cast<int>(recon.images.size());
  for (const ImageRecord& img : dataset.images()) {
    if (!recon.IsRegistered(img.id)) result.unregistered.push_back(img.id);
  }
  summary.images_failed = static_cast<int>(result.unregistered.size());
  recon.Log("summary", summary.Json());
  result.recon = std::move(recon);
  return result;
}

}  // namespace psfm
