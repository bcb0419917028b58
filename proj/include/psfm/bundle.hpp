#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <vector>

#include "psfm/dataset.hpp"
#include "psfm/lm.hpp"
#include "psfm/reconstruction.hpp"
#include "psfm/regopt.hpp"

namespace psfm {

struct BundleConfig {
  int max_iterations = 100;
  double function_tolerance = 1e-10;
  double parameter_tolerance = 1e-12;
  double gradient_tolerance = 1e-16;
  double robust_loss_scale_px = 4.0;
  bool robust = true;
  // Local BA over the most recently registered images after every
  // registration, global BA every `global_every` registrations and once at the end.
  int local_window = 5;
  int global_every = 5;

  RobustLoss Loss() const { return RobustLoss{robust ? robust_loss_scale_px : 0.0}; }
};

struct FilterConfig {
  double filter_px = 4.0;
  // Relative depth-consistency residual below which a point is exempt from
  // the triangulation-angle filter.
  double depth_gate = 0.05;
  // Well below the usual 1.5 degrees: at small parallax, reprojection-only
  // bundle adjustment leaves most points outside the depth gate, and a larger
  // threshold strips the structure that later registrations need.
  double min_tri_angle_deg = 0.2;
};

struct BundleSummary {
  int iterations = 0;
  int accepted_steps = 0;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  int variable_poses = 0;
  int variable_points = 0;
  int observations = 0;
  bool diverged = false;
  LmStatus status = LmStatus::kConverged;
};

// Reprojection-only bundle adjustment problem with 6-dof pose blocks and
// 3-dof point blocks; point blocks are eliminated by the Schur complement.
class BundleProblem {
 public:
  struct Residual {
    int pose_block;  // -1 when the pose is held constant
    int point_block;
    ImageId image_id;
    Point2 pixel;
  };

  struct NormalEquations {
    std::vector<Eigen::Matrix<double, 6, 6>> Hcc;
    std::vector<Vector6d> gc;
    std::vector<Eigen::Matrix3d> Hpp;
    std::vector<Eigen::Vector3d> gp;
    std::vector<Eigen::Matrix<double, 6, 3>> Hcp;  // one per residual
    double cost = 0.0;
  };

  BundleProblem(Reconstruction& recon, const Dataset& dataset, const BundleConfig& cfg,
                const std::optional<std::set<ImageId>>& variable_images = std::nullopt)
      : recon_(recon), loss_(cfg.Loss()) {
    for (const auto& [id, img] : recon.images) {
      if (id == recon.seed_image) continue;
      if (variable_images && !variable_images->count(id)) continue;
      pose_index_[id] = static_cast<int>(pose_ids_.size());
      pose_ids_.push_back(id);
    }
    for (auto& [tid, point] : recon.points) {
      bool touches = !variable_images.has_value();
      if (!touches) {
        for (ImageId v : point.views)
          if (pose_index_.count(v)) touches = true;
      }
      if (!touches) continue;
      const int pb = static_cast<int>(point_ids_.size());
      point_ids_.push_back(tid);
      const Track& track = dataset.track(tid);
      for (ImageId v : point.views) {
        const Observation* obs = track.Find(v);
        if (!obs) continue;
        const auto it = pose_index_.find(v);
        const int cb = it == pose_index_.end() ? -1 : it->second;
        if (cb < 0) constant_poses_.insert(v);
        residuals_.push_back({cb, pb, v, obs->pixel});
      }
    }
    constant_poses_.insert(recon.seed_image);

    // Scale gauge: with at most one constant camera, freeze the world z of
    // one point.
    if (constant_poses_.size() <= 1 && !point_ids_.empty()) {
      std::optional<int> anchor;
      if (recon.scale_anchor) {
        for (std::size_t j = 0; j < point_ids_.size(); ++j)
          if (point_ids_[j] == *recon.scale_anchor) anchor = static_cast<int>(j);
      }
      if (!anchor) {
        std::size_t best = 0;
        for (std::size_t j = 0; j < point_ids_.size(); ++j) {
          if (recon.points.at(point_ids_[j]).views.size() > recon.points.at(point_ids_[best]).views.size()) best = j;
        }
        anchor = static_cast<int>(best);
      }
      frozen_point_ = *anchor;
    }
  }

  int num_pose_blocks() const { return static_cast<int>(pose_ids_.size()); }
  int num_point_blocks() const { return static_cast<int>(point_ids_.size()); }
  int num_residuals() const { return static_cast<int>(residuals_.size()); }
  int num_parameters() const { return 6 * num_pose_blocks() + 3 * num_point_blocks(); }
  std::optional<int> frozen_point() const { return frozen_point_; }
  const std::set<ImageId>& constant_poses() const { return constant_poses_; }

  struct Parameters {
    std::vector<Pose> poses;
    std::vector<Point3> points;
  };

  Parameters Current() const {
    Parameters p;
    for (ImageId id : pose_ids_) p.poses.push_back(recon_.images.at(id).pose);
    for (TrackId id : point_ids_) p.points.push_back(recon_.points.at(id).position);
    return p;
  }

  void Store(const Parameters& p) const {
    for (std::size_t i = 0; i < pose_ids_.size(); ++i) recon_.images.at(pose_ids_[i]).pose = p.poses[i];
    for (std::size_t j = 0; j < point_ids_.size(); ++j) recon_.points.at(point_ids_[j]).position = p.points[j];
  }

  const Pose& PoseOf(const Parameters& p, const Residual& r) const {
    return r.pose_block >= 0 ? p.poses[static_cast<std::size_t>(r.pose_block)] : recon_.images.at(r.image_id).pose;
  }

  double Cost(const Parameters& p) const {
    double cost = 0.0;
    for (const Residual& r : residuals_) {
      const Pose& pose = PoseOf(p, r);
      const CameraIntrinsics& K = recon_.images.at(r.image_id).intrinsics;
      const Eigen::Vector3d X = pose.Transform(p.points[static_cast<std::size_t>(r.point_block)]);
      if (X.z() > kDefaultCheiralityEps) {
        const Eigen::Vector2d e(K.fx * X.x() / X.z() + K.cx - r.pixel.x(), K.fy * X.y() / X.z() + K.cy - r.pixel.y());
        cost += 0.5 * loss_.Value(e.squaredNorm());
      } else {
        cost += detail::CheiralityPenalty(loss_);
      }
    }
    return cost;
  }

  NormalEquations Linearize(const Parameters& p) const {
    NormalEquations ne;
    ne.Hcc.assign(pose_ids_.size(), Eigen::Matrix<double, 6, 6>::Zero());
    ne.gc.assign(pose_ids_.size(), Vector6d::Zero());
    ne.Hpp.assign(point_ids_.size(), Eigen::Matrix3d::Zero());
    ne.gp.assign(point_ids_.size(), Eigen::Vector3d::Zero());
    ne.Hcp.assign(residuals_.size(), Eigen::Matrix<double, 6, 3>::Zero());
    for (std::size_t k = 0; k < residuals_.size(); ++k) {
      const Residual& r = residuals_[k];
      const std::size_t j = static_cast<std::size_t>(r.point_block);
      const auto lin = LinearizeReprojection(PoseOf(p, r), recon_.images.at(r.image_id).intrinsics, p.points[j], r.pixel);
      if (!lin) {
        ne.cost += detail::CheiralityPenalty(loss_);
        continue;
      }
      const double sq = lin->residual.squaredNorm();
      const double w = loss_.Weight(sq);
      ne.cost += 0.5 * loss_.Value(sq);
      Eigen::Matrix<double, 2, 3> Jp = lin->d_point;
      if (frozen_point_ && *frozen_point_ == r.point_block) Jp.col(2).setZero();
      ne.Hpp[j].noalias() += w * Jp.transpose() * Jp;
      ne.gp[j].noalias() += w * Jp.transpose() * lin->residual;
      if (r.pose_block >= 0) {
        const std::size_t i = static_cast<std::size_t>(r.pose_block);
        ne.Hcc[i].noalias() += w * lin->d_pose.transpose() * lin->d_pose;
        ne.gc[i].noalias() += w * lin->d_pose.transpose() * lin->residual;
        ne.Hcp[k].noalias() = w * lin->d_pose.transpose() * Jp;
      }
    }
    return ne;
  }

  double MaxGradient(const NormalEquations& ne) const {
    double m = 0.0;
    for (const auto& g : ne.gc) m = std::max(m, g.lpNorm<Eigen::Infinity>());
    for (const auto& g : ne.gp) m = std::max(m, g.lpNorm<Eigen::Infinity>());
    return m;
  }

  // Damped point block, with the frozen coordinate pinned.
  Eigen::Matrix3d DampedPointBlock(const NormalEquations& ne, std::size_t j, double mu) const {
    Eigen::Matrix3d V = ne.Hpp[j];
    for (int d = 0; d < 3; ++d) V(d, d) += mu * std::clamp(V(d, d), 1e-6, 1e32);
    if (frozen_point_ && static_cast<std::size_t>(*frozen_point_) == j) {
      V.row(2).setZero();
      V.col(2).setZero();
      V(2, 2) = 1.0;
    }
    return V;
  }

  Eigen::Matrix<double, 6, 6> DampedPoseBlock(const NormalEquations& ne, std::size_t i, double mu) const {
    Eigen::Matrix<double, 6, 6> A = ne.Hcc[i];
    for (int d = 0; d < 6; ++d) A(d, d) += mu * std::clamp(A(d, d), 1e-6, 1e32);
    return A;
  }

  // Step [pose blocks..., point blocks...] by Schur elimination of points.
  Eigen::VectorXd SolveSchur(const NormalEquations& ne, double mu) const {
    const std::size_t nc = pose_ids_.size();
    const std::size_t np = point_ids_.size();
    std::vector<Eigen::Matrix3d> Vinv(np);
    for (std::size_t j = 0; j < np; ++j) Vinv[j] = DampedPointBlock(ne, j, mu).inverse();

    std::vector<std::vector<std::size_t>> by_point(np);
    for (std::size_t k = 0; k < residuals_.size(); ++k) {
      if (residuals_[k].pose_block >= 0) by_point[static_cast<std::size_t>(residuals_[k].point_block)].push_back(k);
    }

    Eigen::MatrixXd S = Eigen::MatrixXd::Zero(6 * static_cast<Eigen::Index>(nc), 6 * static_cast<Eigen::Index>(nc));
    Eigen::VectorXd rhs(6 * static_cast<Eigen::Index>(nc));
    for (std::size_t i = 0; i < nc; ++i) {
      S.block<6, 6>(6 * static_cast<Eigen::Index>(i), 6 * static_cast<Eigen::Index>(i)) = DampedPoseBlock(ne, i, mu);
      rhs.segment<6>(6 * static_cast<Eigen::Index>(i)) = -ne.gc[i];
    }
    for (std::size_t j = 0; j < np; ++j) {
      const Eigen::Vector3d Vg = Vinv[j] * ne.gp[j];
      for (std::size_t a : by_point[j]) {
        const auto ia = static_cast<Eigen::Index>(residuals_[a].pose_block);
        const Eigen::Matrix<double, 6, 3> WV = ne.Hcp[a] * Vinv[j];
        rhs.segment<6>(6 * ia).noalias() += ne.Hcp[a] * Vg;
        for (std::size_t b : by_point[j]) {
          const auto ib = static_cast<Eigen::Index>(residuals_[b].pose_block);
          S.block<6, 6>(6 * ia, 6 * ib).noalias() -= WV * ne.Hcp[b].transpose();
        }
      }
    }
    Eigen::VectorXd delta(num_parameters());
    Eigen::VectorXd dc = nc > 0 ? Eigen::VectorXd(S.ldlt().solve(rhs)) : Eigen::VectorXd();
    delta.head(6 * static_cast<Eigen::Index>(nc)) = dc;
    for (std::size_t j = 0; j < np; ++j) {
      Eigen::Vector3d b = -ne.gp[j];
      for (std::size_t a : by_point[j]) {
        const auto ia = static_cast<Eigen::Index>(residuals_[a].pose_block);
        b.noalias() -= ne.Hcp[a].transpose() * dc.segment<6>(6 * ia);
      }
      Eigen::Vector3d dp = Vinv[j] * b;
      if (frozen_point_ && static_cast<std::size_t>(*frozen_point_) == j) dp(2) = 0.0;
      delta.segment<3>(6 * static_cast<Eigen::Index>(nc) + 3 * static_cast<Eigen::Index>(j)) = dp;
    }
    return delta;
  }

  // Same step from the assembled dense normal equations (reference path).
  Eigen::VectorXd SolveDense(const NormalEquations& ne, double mu) const {
    const Eigen::Index n = num_parameters();
    const Eigen::Index off = 6 * num_pose_blocks();
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(n, n);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(n);
    for (std::size_t i = 0; i < pose_ids_.size(); ++i) {
      const auto r = 6 * static_cast<Eigen::Index>(i);
      H.block<6, 6>(r, r) = DampedPoseBlock(ne, i, mu);
      g.segment<6>(r) = ne.gc[i];
    }
    for (std::size_t j = 0; j < point_ids_.size(); ++j) {
      const auto r = off + 3 * static_cast<Eigen::Index>(j);
      H.block<3, 3>(r, r) = DampedPointBlock(ne, j, mu);
      g.segment<3>(r) = ne.gp[j];
      if (frozen_point_ && static_cast<std::size_t>(*frozen_point_) == j) g(r + 2) = 0.0;
    }
    for (std::size_t k = 0; k < residuals_.size(); ++k) {
      if (residuals_[k].pose_block < 0) continue;
      const auto r = 6 * static_cast<Eigen::Index>(residuals_[k].pose_block);
      const auto c = off + 3 * static_cast<Eigen::Index>(residuals_[k].point_block);
      H.block<6, 3>(r, c) += ne.Hcp[k];
      H.block<3, 6>(c, r) += ne.Hcp[k].transpose();
    }
    return H.ldlt().solve(-g);
  }

  Parameters Apply(const Parameters& p, const Eigen::VectorXd& delta) const {
    Parameters out = p;
    for (std::size_t i = 0; i < out.poses.size(); ++i)
      out.poses[i] = out.poses[i].Retract(delta.segment<6>(6 * static_cast<Eigen::Index>(i)));
    const Eigen::Index off = 6 * num_pose_blocks();
    for (std::size_t j = 0; j < out.points.size(); ++j)
      out.points[j] += delta.segment<3>(off + 3 * static_cast<Eigen::Index>(j));
    return out;
  }

  // Dense Jacobian of the (unweighted) residual vector w.r.t. all free
  // parameters, frozen coordinates removed.
  Eigen::MatrixXd DenseJacobian(const Parameters& p) const {
    const Eigen::Index off = 6 * num_pose_blocks();
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(2 * num_residuals(), num_parameters());
    for (std::size_t k = 0; k < residuals_.size(); ++k) {
      const Residual& r = residuals_[k];
      const auto lin = LinearizeReprojection(PoseOf(p, r), recon_.images.at(r.image_id).intrinsics,
                                             p.points[static_cast<std::size_t>(r.point_block)], r.pixel);
      if (!lin) continue;
      const auto row = 2 * static_cast<Eigen::Index>(k);
      if (r.pose_block >= 0) J.block<2, 6>(row, 6 * r.pose_block) = lin->d_pose;
      J.block<2, 3>(row, off + 3 * r.point_block) = lin->d_point;
    }
    if (frozen_point_) {
      const Eigen::Index drop = off + 3 * *frozen_point_ + 2;
      Eigen::MatrixXd reduced(J.rows(), J.cols() - 1);
      reduced << J.leftCols(drop), J.rightCols(J.cols() - drop - 1);
      return reduced;
    }
    return J;
  }

 private:
  Reconstruction& recon_;
  RobustLoss loss_;
  std::vector<ImageId> pose_ids_;
  std::map<ImageId, int> pose_index_;
  std::vector<TrackId> point_ids_;
  std::vector<Residual> residuals_;
  std::set<ImageId> constant_poses_;
  std::optional<int> frozen_point_;
};

// Levenberg-Marquardt on the bundle problem; intrinsics never change.
// `variable_images` restricts optimization to a local window.
inline BundleSummary BundleAdjust(Reconstruction& recon, const Dataset& dataset, const BundleConfig& cfg,
                                  const std::optional<std::set<ImageId>>& variable_images = std::nullopt) {
  BundleProblem problem(recon, dataset, cfg, variable_images);
  BundleSummary summary;
  summary.variable_poses = problem.num_pose_blocks();
  summary.variable_points = problem.num_point_blocks();
  summary.observations = problem.num_residuals();
  if (problem.num_residuals() == 0) return summary;

  BundleProblem::Parameters params = problem.Current();
  BundleProblem::NormalEquations ne = problem.Linearize(params);
  double cost = ne.cost;
  summary.initial_cost = summary.final_cost = cost;
  if (!std::isfinite(cost)) {
    summary.diverged = true;
    summary.status = LmStatus::kDiverged;
    return summary;
  }
  double mu = 1e-4;
  bool done = false;
  for (int it = 0; it < cfg.max_iterations && !done; ++it) {
    summary.iterations = it + 1;
    if (problem.MaxGradient(ne) <= cfg.gradient_tolerance || cost == 0.0) {
      summary.iterations = it;
      summary.status = LmStatus::kConverged;
      done = true;
      break;
    }
    bool accepted = false;
    while (!accepted) {
      const Eigen::VectorXd delta = problem.SolveSchur(ne, mu);
      if (!delta.allFinite()) {
        mu *= 10.0;
        if (mu > 1e16) break;
        continue;
      }
      if (delta.norm() <= cfg.parameter_tolerance) {
        summary.status = LmStatus::kConverged;
        done = true;
        break;
      }
      BundleProblem::Parameters candidate = problem.Apply(params, delta);
      const double new_cost = problem.Cost(candidate);
      if (std::isfinite(new_cost) && new_cost < cost) {
        const double reduction = cost - new_cost;
        params = std::move(candidate);
        ++summary.accepted_steps;
        summary.final_cost = new_cost;
        accepted = true;
        mu = std::max(mu / 10.0, 1e-10);
        if (reduction <= cfg.function_tolerance * cost) {
          summary.status = LmStatus::kConverged;
          done = true;
        }
        cost = new_cost;
        if (!done) ne = problem.Linearize(params);
      } else {
        mu *= 10.0;
        if (mu > 1e16) break;
      }
    }
    if (!accepted && !done) {
      summary.status = cost <= 1e-24 * std::max(1.0, summary.initial_cost) ? LmStatus::kConverged : LmStatus::kStalled;
      done = true;
    }
  }
  if (!done) summary.status = LmStatus::kMaxIterations;
  if (summary.status == LmStatus::kStalled && summary.accepted_steps == 0) summary.diverged = true;
  problem.Store(params);
  return summary;
}

struct FilterStats {
  int removed_reprojection = 0;
  int removed_cheirality = 0;
  int removed_angle = 0;

  int total() const { return removed_reprojection + removed_cheirality + removed_angle; }
};

// Relative depth-consistency residual of a point: the smallest
// |z - (gamma d + beta)| / (gamma d + beta) over views that carry a prior.
inline std::optional<double> RelativeDepthResidual(const Reconstruction& recon, const ScenePoint& point,
                                                   const Dataset& dataset) {
  std::optional<double> best;
  const Track& track = dataset.track(point.track_id);
  for (ImageId v : point.views) {
    const Observation* obs = track.Find(v);
    if (!obs || !obs->prior_depth) continue;
    const RegisteredImage& img = recon.images.at(v);
    const double aligned = img.alignment.gamma * *obs->prior_depth + img.alignment.beta;
    if (!(aligned > 0.0)) continue;
    const double rel = std::abs(img.pose.Transform(point.position).z() - aligned) / aligned;
    if (!best || rel < *best) best = rel;
  }
  return best;
}

// Removes points that fail cheirality or exceed the reprojection gate in
// any view. Small triangulation angle removes a point only when it is not
// depth-consistent.
inline FilterStats FilterPoints(Reconstruction& recon, const Dataset& dataset, const FilterConfig& cfg) {
  FilterStats stats;
  const double min_angle = cfg.min_tri_angle_deg * std::numbers::pi / 180.0;
  for (auto it = recon.points.begin(); it != recon.points.end();) {
    const ScenePoint& point = it->second;
    bool remove = false;
    for (const ViewResidual& r : recon.Residuals(point, dataset)) {
      if (!r.cheirality_ok) {
        ++stats.removed_cheirality;
        remove = true;
        break;
      }
      if (r.reprojection_px > cfg.filter_px) {
        ++stats.removed_reprojection;
        remove = true;
        break;
      }
    }
    if (!remove) {
      const std::optional<double> rel = RelativeDepthResidual(recon, point, dataset);
      const bool depth_consistent = rel && *rel <= cfg.depth_gate;
      if (!depth_consistent && TriangulationAngle(recon, point) < min_angle) {
        ++stats.removed_angle;
        remove = true;
      }
    }
    it = remove ? recon.points.erase(it) : std::next(it);
  }
  if (recon.scale_anchor && !recon.points.count(*recon.scale_anchor)) recon.scale_anchor.reset();
  return stats;
}

}  // namespace psfm
