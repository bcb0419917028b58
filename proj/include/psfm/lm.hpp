#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

namespace psfm {

struct LmOptions {
  int max_iterations = 100;
  double function_tolerance = 1e-10;
  double parameter_tolerance = 1e-10;
  double gradient_tolerance = 1e-16;
  double initial_mu = 1e-4;
  double max_mu = 1e16;
};

enum class LmStatus { kConverged, kMaxIterations, kStalled, kDiverged };

struct LmSummary {
  int iterations = 0;
  int accepted_steps = 0;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  LmStatus status = LmStatus::kConverged;

  // No step could reduce the cost although the start was not stationary.
  bool diverged() const {
    return status == LmStatus::kDiverged || (status == LmStatus::kStalled && accepted_steps == 0);
  }
};

// Robust loss on a squared residual: value, first derivative.
struct RobustLoss {
  // Scale of the Cauchy kernel; <= 0 selects the plain quadratic.
  double scale = 0.0;

  double Value(double s) const {
    if (scale <= 0.0) return s;
    const double c2 = scale * scale;
    return c2 * std::log1p(s / c2);
  }
  double Weight(double s) const {
    if (scale <= 0.0) return 1.0;
    return 1.0 / (1.0 + s / (scale * scale));
  }
};

// Dense Levenberg-Marquardt over an N-dimensional tangent space.
//
// Problem must provide
//   double Linearize(const State&, Matrix<N,N>& H, Vector<N>& g)  // cost = 0.5*sum(rho)
//   double Cost(const State&)
//   State Retract(const State&, const Vector<N>& delta)
// where H and g are the (robustly weighted) Gauss-Newton Hessian and gradient.
template <int N, typename Problem, typename State>
LmSummary MinimizeLm(Problem& problem, State& state, const LmOptions& opts) {
  using Mat = Eigen::Matrix<double, N, N>;
  using Vec = Eigen::Matrix<double, N, 1>;
  LmSummary summary;
  Mat H;
  Vec g;
  double cost = problem.Linearize(state, H, g);
  summary.initial_cost = cost;
  summary.final_cost = cost;
  if (!std::isfinite(cost)) {
    summary.status = LmStatus::kDiverged;
    return summary;
  }
  double mu = opts.initial_mu;
  bool relinearize = false;
  for (int it = 0; it < opts.max_iterations; ++it) {
    if (relinearize) {
      cost = problem.Linearize(state, H, g);
      relinearize = false;
    }
    summary.iterations = it + 1;
    if (g.template lpNorm<Eigen::Infinity>() <= opts.gradient_tolerance || cost == 0.0) {
      summary.status = LmStatus::kConverged;
      summary.iterations = it;
      return summary;
    }
    bool accepted = false;
    while (!accepted) {
      Mat A = H;
      for (int i = 0; i < N; ++i) A(i, i) += mu * std::clamp(H(i, i), 1e-6, 1e32);
      const Vec delta = A.ldlt().solve(-g);
      if (!delta.allFinite()) {
        mu *= 10.0;
        if (mu > opts.max_mu) break;
        continue;
      }
      if (delta.norm() <= opts.parameter_tolerance) {
        summary.status = LmStatus::kConverged;
        return summary;
      }
      State candidate = problem.Retract(state, delta);
      const double new_cost = problem.Cost(candidate);
      if (std::isfinite(new_cost) && new_cost < cost) {
        const double reduction = cost - new_cost;
        state = std::move(candidate);
        summary.final_cost = new_cost;
        ++summary.accepted_steps;
        accepted = true;
        relinearize = true;
        mu = std::max(mu / 10.0, 1e-12);
        if (reduction <= opts.function_tolerance * cost) {
          summary.status = LmStatus::kConverged;
          return summary;
        }
        cost = new_cost;
      } else {
        mu *= 10.0;
        if (mu > opts.max_mu) break;
      }
    }
    if (!accepted) {
      summary.status = cost <= 1e-24 * std::max(1.0, summary.initial_cost) ? LmStatus::kConverged
                                                                           : LmStatus::kStalled;
      return summary;
    }
  }
  summary.status = LmStatus::kMaxIterations;
  return summary;
}

}  // namespace psfm
