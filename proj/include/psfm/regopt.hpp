#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "psfm/error.hpp"
#include "psfm/geom.hpp"
#include "psfm/lm.hpp"

namespace psfm {

// Affine alignment of a depth prior to camera-frame depth: z ~ gamma * d + beta.
struct AlignmentParams {
  double gamma = 1.0;
  double beta = 0.0;

  bool IsValid() const { return std::isfinite(gamma) && gamma > 0.0 && std::isfinite(beta); }
  bool operator==(const AlignmentParams&) const = default;
};

struct SolverConfig {
  double lambda = 6.0;
  int max_iterations = 100;
  double function_tolerance = 1e-10;
  double parameter_tolerance = 1e-10;
  double robust_loss_scale_px = 4.0;
  // Cauchy kernel on reprojection terms; false selects the plain quadratic.
  bool robust_reprojection = true;

  void Validate() const {
    if (!(lambda >= 0.0) || !(function_tolerance > 0.0) || !(parameter_tolerance > 0.0) || max_iterations < 0 ||
        !(robust_loss_scale_px > 0.0)) {
      Throw(ErrorCode::kInvalidArgument, "invalid solver configuration");
    }
  }

  RobustLoss ReprojectionLoss() const { return RobustLoss{robust_reprojection ? robust_loss_scale_px : 0.0}; }

  LmOptions Lm() const {
    LmOptions o;
    o.max_iterations = max_iterations;
    o.function_tolerance = function_tolerance;
    o.parameter_tolerance = parameter_tolerance;
    return o;
  }
};

// ---------------------------------------------------------------------------
// Residuals. Pose derivatives are taken w.r.t. the tangent (omega, dt) of
// Pose::Retract.
// ---------------------------------------------------------------------------

struct ReprojectionLinearization {
  Eigen::Vector2d residual;
  Eigen::Matrix<double, 2, 6> d_pose;
  Eigen::Matrix<double, 2, 3> d_point;
};

inline Eigen::Vector2d ReprojectionResidual(const Pose& pose, const CameraIntrinsics& K, const Point3& P,
                                            const Point2& p) {
  return Project(pose, K, P) - p;
}

// Returns nullopt on a cheirality violation.
inline std::optional<ReprojectionLinearization> LinearizeReprojection(const Pose& pose, const CameraIntrinsics& K,
                                                                      const Point3& P, const Point2& p) {
  const Eigen::Vector3d RP = pose.quaternion() * P;
  const Eigen::Vector3d X = RP + pose.translation();
  if (!(X.z() > kDefaultCheiralityEps)) return std::nullopt;
  const double iz = 1.0 / X.z();
  ReprojectionLinearization lin;
  lin.residual = {K.fx * X.x() * iz + K.cx - p.x(), K.fy * X.y() * iz + K.cy - p.y()};
  Eigen::Matrix<double, 2, 3> dproj;
  dproj << K.fx * iz, 0.0, -K.fx * X.x() * iz * iz, 0.0, K.fy * iz, -K.fy * X.y() * iz * iz;
  lin.d_pose.leftCols<3>() = dproj * (-Skew(RP));
  lin.d_pose.rightCols<3>() = dproj;
  lin.d_point = dproj * pose.rotation();
  return lin;
}

// Signed depth-consistency residual [R P + t]_z - gamma * prior - beta.
inline double DepthConsistencyResidual(const Pose& pose, const Point3& P, double prior_depth,
                                       const AlignmentParams& params) {
  return pose.Transform(P).z() - params.gamma * prior_depth - params.beta;
}

struct DepthLinearization {
  double residual = 0.0;
  Eigen::Matrix<double, 1, 6> d_pose;
  Eigen::Matrix<double, 1, 3> d_point;
  double d_gamma = 0.0;
  double d_beta = 0.0;
};

inline DepthLinearization LinearizeDepthConsistency(const Pose& pose, const Point3& P, double prior_depth,
                                                    const AlignmentParams& params) {
  const Eigen::Vector3d RP = pose.quaternion() * P;
  DepthLinearization lin;
  lin.residual = RP.z() + pose.translation().z() - params.gamma * prior_depth - params.beta;
  const Eigen::Matrix3d S = -Skew(RP);
  lin.d_pose.leftCols<3>() = S.row(2);
  lin.d_pose.rightCols<3>() << 0.0, 0.0, 1.0;
  lin.d_point = pose.rotation().row(2);
  lin.d_gamma = -prior_depth;
  lin.d_beta = -1.0;
  return lin;
}

// ---------------------------------------------------------------------------
// Scale/shift initialization
// ---------------------------------------------------------------------------

struct GammaBetaFit {
  AlignmentParams params;
  bool degenerate = false;  // priors carry no spread; gamma fixed to 1
  bool fallback = false;    // LS slope was non-positive; median ratio used
};

// Closed-form least squares of projected ~ gamma * prior + beta over
// (projected_depth, prior_depth) pairs.
inline GammaBetaFit FitGammaBeta(std::span<const std::pair<double, double>> pairs) {
  GammaBetaFit fit;
  if (pairs.empty()) {
    fit.degenerate = true;
    return fit;
  }
  const double n = static_cast<double>(pairs.size());
  double mean_z = 0.0, mean_d = 0.0;
  for (const auto& [z, d] : pairs) {
    mean_z += z;
    mean_d += d;
  }
  mean_z /= n;
  mean_d /= n;
  double sdd = 0.0, sdz = 0.0;
  for (const auto& [z, d] : pairs) {
    sdd += (d - mean_d) * (d - mean_d);
    sdz += (d - mean_d) * (z - mean_z);
  }
  if (pairs.size() < 2 || !(sdd > 1e-24 * std::max(1.0, mean_d * mean_d) * n)) {
    fit.degenerate = true;
    fit.params = {1.0, mean_z - mean_d};
    return fit;
  }
  const double gamma = sdz / sdd;
  if (gamma > 0.0 && std::isfinite(gamma)) {
    fit.params = {gamma, mean_z - gamma * mean_d};
    return fit;
  }
  std::vector<double> zs, ds;
  for (const auto& [z, d] : pairs) {
    zs.push_back(z);
    ds.push_back(d);
  }
  const auto median = [](std::vector<double>& v) {
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    double m = v[mid];
    if (v.size() % 2 == 0) {
      m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
    }
    return m;
  };
  const double mz = median(zs);
  const double md = median(ds);
  fit.fallback = true;
  fit.params = {(mz > 0.0 && md > 0.0) ? mz / md : 1.0, 0.0};
  return fit;
}

// ---------------------------------------------------------------------------
// Registration refinement: pose and (gamma, beta) with points fixed.
// ---------------------------------------------------------------------------

struct RegistrationTerm {
  Point3 point;
  Point2 pixel;
  std::optional<double> prior_depth;
};

struct RegistrationResult {
  Pose pose;
  AlignmentParams alignment;
  GammaBetaFit initial_fit;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  LmSummary summary;
  bool diverged = false;
  int depth_terms = 0;
};

namespace detail {

// Cost charged for a reprojection term whose point falls behind the camera.
inline double CheiralityPenalty(const RobustLoss& loss) { return 0.5 * loss.Value(1e6); }

struct RegistrationState {
  Pose pose;
  double log_gamma = 0.0;
  double beta = 0.0;
};

struct RegistrationProblem {
  std::span<const RegistrationTerm> terms;
  const CameraIntrinsics* K;
  double lambda;
  RobustLoss loss;

  double Linearize(const RegistrationState& s, Eigen::Matrix<double, 8, 8>& H,
                   Eigen::Matrix<double, 8, 1>& g) const {
    H.setZero();
    g.setZero();
    double cost = 0.0;
    const AlignmentParams a{std::exp(s.log_gamma), s.beta};
    for (const RegistrationTerm& term : terms) {
      if (auto lin = LinearizeReprojection(s.pose, *K, term.point, term.pixel)) {
        const double sq = lin->residual.squaredNorm();
        const double w = loss.Weight(sq);
        H.topLeftCorner<6, 6>().noalias() += w * lin->d_pose.transpose() * lin->d_pose;
        g.head<6>().noalias() += w * lin->d_pose.transpose() * lin->residual;
        cost += 0.5 * loss.Value(sq);
      } else {
        cost += CheiralityPenalty(loss);
      }
      if (lambda > 0.0 && term.prior_depth) {
        const DepthLinearization d = LinearizeDepthConsistency(s.pose, term.point, *term.prior_depth, a);
        Eigen::Matrix<double, 1, 8> J;
        J.head<6>() = d.d_pose;
        J(6) = d.d_gamma * a.gamma;  // chain rule through log(gamma)
        J(7) = d.d_beta;
        H.noalias() += lambda * J.transpose() * J;
        g.noalias() += lambda * J.transpose() * d.residual;
        cost += 0.5 * lambda * d.residual * d.residual;
      }
    }
    return cost;
  }

  double Cost(const RegistrationState& s) const {
    double cost = 0.0;
    const AlignmentParams a{std::exp(s.log_gamma), s.beta};
    for (const RegistrationTerm& term : terms) {
      const Eigen::Vector3d X = s.pose.Transform(term.point);
      if (X.z() > kDefaultCheiralityEps) {
        const Eigen::Vector2d r(K->fx * X.x() / X.z() + K->cx - term.pixel.x(),
                                K->fy * X.y() / X.z() + K->cy - term.pixel.y());
        cost += 0.5 * loss.Value(r.squaredNorm());
      } else {
        cost += CheiralityPenalty(loss);
      }
      if (lambda > 0.0 && term.prior_depth) {
        const double r = X.z() - a.gamma * *term.prior_depth - a.beta;
        cost += 0.5 * lambda * r * r;
      }
    }
    return cost;
  }

  RegistrationState Retract(const RegistrationState& s, const Eigen::Matrix<double, 8, 1>& d) const {
    return {s.pose.Retract(d.head<6>()), s.log_gamma + d(6), s.beta + d(7)};
  }
};

}  // namespace detail

// Initial (gamma, beta) from the projected depths of prior-carrying terms.
inline GammaBetaFit InitialAlignment(const Pose& pose, std::span<const RegistrationTerm> terms) {
  std::vector<std::pair<double, double>> pairs;
  for (const RegistrationTerm& t : terms) {
    if (t.prior_depth) pairs.emplace_back(pose.Transform(t.point).z(), *t.prior_depth);
  }
  return FitGammaBeta(pairs);
}

// Minimizes sum over inliers of rho(|E_PR|^2) + lambda * E_DC^2 over the
// pose tangent, log(gamma) and beta, with every 3-D point held fixed.
inline RegistrationResult RefineRegistration(const Pose& pose0, std::span<const RegistrationTerm> terms,
                                             const CameraIntrinsics& K, const SolverConfig& cfg,
                                             std::optional<AlignmentParams> initial = std::nullopt) {
  cfg.Validate();
  RegistrationResult result;
  result.initial_fit = InitialAlignment(pose0, terms);
  AlignmentParams a0 = initial ? *initial : result.initial_fit.params;
  if (!a0.IsValid()) a0 = {1.0, 0.0};
  for (const RegistrationTerm& t : terms) result.depth_terms += t.prior_depth ? 1 : 0;

  detail::RegistrationProblem problem{terms, &K, cfg.lambda, cfg.ReprojectionLoss()};
  detail::RegistrationState state{pose0, std::log(a0.gamma), a0.beta};
  result.summary = MinimizeLm<8>(problem, state, cfg.Lm());
  result.initial_cost = result.summary.initial_cost;
  if (result.summary.diverged() && result.summary.initial_cost > 0.0) {
    result.diverged = true;
    result.pose = pose0;
    result.alignment = a0;
    result.final_cost = result.summary.initial_cost;
    return result;
  }
  result.pose = state.pose;
  result.alignment = {std::exp(state.log_gamma), state.beta};
  result.final_cost = result.summary.final_cost;
  return result;
}

// Total registration objective at a given state (for diagnostics and tests).
inline double RegistrationCost(const Pose& pose, const AlignmentParams& a, std::span<const RegistrationTerm> terms,
                               const CameraIntrinsics& K, const SolverConfig& cfg) {
  detail::RegistrationProblem problem{terms, &K, cfg.lambda, cfg.ReprojectionLoss()};
  return problem.Cost({pose, std::log(a.gamma), a.beta});
}

// ---------------------------------------------------------------------------
// Triangulation refinement: point only, per-image alignment held fixed.
// ---------------------------------------------------------------------------

struct TriangulationTerm {
  Pose pose;
  CameraIntrinsics intrinsics;
  Point2 pixel;
  std::optional<double> prior_depth;
  AlignmentParams alignment;
};

struct PointRefinement {
  Point3 point;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  LmSummary summary;
  bool diverged = false;
};

namespace detail {

struct PointProblem {
  std::span<const TriangulationTerm> terms;
  double lambda;
  RobustLoss loss;

  double Linearize(const Point3& P, Eigen::Matrix3d& H, Eigen::Vector3d& g) const {
    H.setZero();
    g.setZero();
    double cost = 0.0;
    for (const TriangulationTerm& t : terms) {
      if (auto lin = LinearizeReprojection(t.pose, t.intrinsics, P, t.pixel)) {
        const double sq = lin->residual.squaredNorm();
        const double w = loss.Weight(sq);
        H.noalias() += w * lin->d_point.transpose() * lin->d_point;
        g.noalias() += w * lin->d_point.transpose() * lin->residual;
        cost += 0.5 * loss.Value(sq);
      } else {
        cost += CheiralityPenalty(loss);
      }
      if (lambda > 0.0 && t.prior_depth) {
        const double r = DepthConsistencyResidual(t.pose, P, *t.prior_depth, t.alignment);
        const Eigen::RowVector3d J = t.pose.rotation().row(2);
        H.noalias() += lambda * J.transpose() * J;
        g.noalias() += lambda * J.transpose() * r;
        cost += 0.5 * lambda * r * r;
      }
    }
    return cost;
  }

  double Cost(const Point3& P) const {
    double cost = 0.0;
    for (const TriangulationTerm& t : terms) {
      const Eigen::Vector3d X = t.pose.Transform(P);
      if (X.z() > kDefaultCheiralityEps) {
        const Eigen::Vector2d r(t.intrinsics.fx * X.x() / X.z() + t.intrinsics.cx - t.pixel.x(),
                                t.intrinsics.fy * X.y() / X.z() + t.intrinsics.cy - t.pixel.y());
        cost += 0.5 * loss.Value(r.squaredNorm());
      } else {
        cost += CheiralityPenalty(loss);
      }
      if (lambda > 0.0 && t.prior_depth) {
        const double r = X.z() - t.alignment.gamma * *t.prior_depth - t.alignment.beta;
        cost += 0.5 * lambda * r * r;
      }
    }
    return cost;
  }

  Point3 Retract(const Point3& P, const Eigen::Vector3d& d) const { return P + d; }
};

}  // namespace detail

inline PointRefinement RefineTriangulation(const Point3& P0, std::span<const TriangulationTerm> terms,
                                           const SolverConfig& cfg) {
  cfg.Validate();
  detail::PointProblem problem{terms, cfg.lambda, cfg.ReprojectionLoss()};
  PointRefinement result;
  Point3 P = P0;
  result.summary = MinimizeLm<3>(problem, P, cfg.Lm());
  result.initial_cost = result.summary.initial_cost;
  if (result.summary.diverged() && result.summary.initial_cost > 0.0) {
    result.diverged = true;
    result.point = P0;
    result.final_cost = result.initial_cost;
    return result;
  }
  result.point = P;
  result.final_cost = result.summary.final_cost;
  return result;
}

inline double TriangulationCost(const Point3& P, std::span<const TriangulationTerm> terms, const SolverConfig& cfg) {
  detail::PointProblem problem{terms, cfg.lambda, cfg.ReprojectionLoss()};
  return problem.Cost(P);
}

}  // namespace psfm
