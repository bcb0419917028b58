#pragma once

#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <Eigen/LU>

#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "psfm/error.hpp"
#include "psfm/geom.hpp"

namespace psfm {

namespace detail {

// Real roots of a4 x^4 + a3 x^3 + a2 x^2 + a1 x + a0 via the companion
// matrix, each polished by Newton steps. Nearly-real conjugate pairs are
// kept; the caller verifies every candidate.
inline std::vector<double> QuarticRealRoots(const std::array<double, 5>& a) {
  std::vector<double> roots;
  const double scale = std::max({std::abs(a[0]), std::abs(a[1]), std::abs(a[2]), std::abs(a[3]),
                                 std::abs(a[4])});
  if (!(scale > 0.0) || !std::isfinite(scale)) return roots;
  if (std::abs(a[0]) <= 1e-14 * scale) return roots;
  Eigen::Matrix4d companion = Eigen::Matrix4d::Zero();
  for (int i = 0; i < 4; ++i) companion(0, i) = -a[i + 1] / a[0];
  companion(1, 0) = companion(2, 1) = companion(3, 2) = 1.0;
  const Eigen::EigenSolver<Eigen::Matrix4d> solver(companion, false);
  const auto eig = solver.eigenvalues();
  for (int i = 0; i < 4; ++i) {
    if (std::abs(eig[i].imag()) > 1e-3 * (1.0 + std::abs(eig[i].real()))) continue;
    double x = eig[i].real();
    for (int k = 0; k < 8; ++k) {
      const double f = (((a[0] * x + a[1]) * x + a[2]) * x + a[3]) * x + a[4];
      const double df = ((4.0 * a[0] * x + 3.0 * a[1]) * x + 2.0 * a[2]) * x + a[3];
      if (df == 0.0) break;
      const double step = f / df;
      x -= step;
      if (std::abs(step) <= 1e-16 * (1.0 + std::abs(x))) break;
    }
    roots.push_back(x);
  }
  return roots;
}

// Newton iterations on the 6x6 system of normalized reprojection residuals
// of three correspondences.
inline bool PolishP3P(std::span<const Point3, 3> points, std::span<const Eigen::Vector2d, 3> normalized,
                      Pose& pose) {
  for (int it = 0; it < 12; ++it) {
    Eigen::Matrix<double, 6, 6> J;
    Eigen::Matrix<double, 6, 1> r;
    for (int i = 0; i < 3; ++i) {
      const Eigen::Vector3d RP = pose.quaternion() * points[i];
      const Eigen::Vector3d X = RP + pose.translation();
      if (!(X.z() > 0.0)) return false;
      const double iz = 1.0 / X.z();
      r.segment<2>(2 * i) = Eigen::Vector2d(X.x() * iz, X.y() * iz) - normalized[i];
      Eigen::Matrix<double, 2, 3> dproj;
      dproj << iz, 0.0, -X.x() * iz * iz, 0.0, iz, -X.y() * iz * iz;
      J.block<2, 3>(2 * i, 0) = dproj * (-Skew(RP));
      J.block<2, 3>(2 * i, 3) = dproj;
    }
    if (r.lpNorm<Eigen::Infinity>() < 1e-15) return true;
    const Eigen::FullPivLU<Eigen::Matrix<double, 6, 6>> lu(J);
    if (!lu.isInvertible()) return r.lpNorm<Eigen::Infinity>() < 1e-12;
    const Vector6d delta = lu.solve(-r);
    if (!delta.allFinite()) return false;
    pose = pose.Retract(delta);
    if (delta.norm() < 1e-15) return true;
  }
  return true;
}

}  // namespace detail

// Minimal absolute pose from three 2D-3D correspondences (Kneip's
// parameterization of the P3P quartic). Returns up to four world-to-camera
// poses whose reprojection of the three points is within 1e-6 px.
inline std::vector<Pose> SolveP3P(std::span<const Point3, 3> points3, std::span<const Point2, 3> points2,
                                  const CameraIntrinsics& K, double max_error_px = 1e-6) {
  const Eigen::Vector3d d21 = points3[1] - points3[0];
  const Eigen::Vector3d d31 = points3[2] - points3[0];
  const double area = d21.cross(d31).norm();
  if (!(area > 1e-9 * d21.norm() * d31.norm()) || d21.norm() == 0.0 || d31.norm() == 0.0) {
    Throw(ErrorCode::kDegenerateSample, "P3P sample points are collinear or coincident");
  }

  std::array<Eigen::Vector2d, 3> normalized;
  std::array<Eigen::Vector3d, 3> bearings;
  for (int i = 0; i < 3; ++i) {
    const Eigen::Vector3d ray = NormalizedRay(K, points2[i]);
    normalized[i] = ray.head<2>();
    bearings[i] = ray.normalized();
  }

  const auto camera_frame = [](const Eigen::Vector3d& f1, const Eigen::Vector3d& f2, Eigen::Matrix3d& T) {
    Eigen::Vector3d e3 = f1.cross(f2);
    const double n = e3.norm();
    if (!(n > 1e-12)) return false;
    e3 /= n;
    T.row(0) = f1.transpose();
    T.row(1) = e3.cross(f1).transpose();
    T.row(2) = e3.transpose();
    return true;
  };

  Eigen::Vector3d f1 = bearings[0], f2 = bearings[1];
  Eigen::Vector3d P1 = points3[0], P2 = points3[1], P3 = points3[2];
  Eigen::Matrix3d T;
  if (!camera_frame(f1, f2, T)) {
    Throw(ErrorCode::kDegenerateSample, "P3P sample has coincident bearing vectors");
  }
  Eigen::Vector3d f3 = T * bearings[2];
  if (f3.z() > 0.0) {
    std::swap(f1, f2);
    std::swap(P1, P2);
    camera_frame(f1, f2, T);
    f3 = T * bearings[2];
  }

  Eigen::Vector3d n1 = P2 - P1;
  const double d12 = n1.norm();
  n1 /= d12;
  Eigen::Vector3d n3 = n1.cross(P3 - P1).normalized();
  const Eigen::Vector3d n2 = n3.cross(n1);
  Eigen::Matrix3d N;
  N.row(0) = n1.transpose();
  N.row(1) = n2.transpose();
  N.row(2) = n3.transpose();
  const Eigen::Vector3d P3n = N * (P3 - P1);

  const double phi1 = f3.x() / f3.z();
  const double phi2 = f3.y() / f3.z();
  const double p1 = P3n.x();
  const double p2 = P3n.y();
  const double cos_beta = f1.dot(f2);
  double b = std::sqrt(1.0 / (1.0 - cos_beta * cos_beta) - 1.0);
  if (cos_beta < 0.0) b = -b;

  const double phi1_2 = phi1 * phi1, phi2_2 = phi2 * phi2;
  const double p1_2 = p1 * p1, p1_3 = p1_2 * p1, p1_4 = p1_3 * p1;
  const double p2_2 = p2 * p2, p2_3 = p2_2 * p2, p2_4 = p2_3 * p2;
  const double d12_2 = d12 * d12, b_2 = b * b;

  std::array<double, 5> factors;
  factors[0] = -phi2_2 * p2_4 - p2_4 * phi1_2 - p2_4;
  factors[1] = 2.0 * p2_3 * d12 * b + 2.0 * phi2_2 * p2_3 * d12 * b - 2.0 * phi2 * p2_3 * phi1 * d12;
  factors[2] = -phi2_2 * p2_2 * p1_2 - phi2_2 * p2_2 * d12_2 * b_2 - phi2_2 * p2_2 * d12_2 +
               phi2_2 * p2_4 + p2_4 * phi1_2 + 2.0 * p1 * p2_2 * d12 +
               2.0 * phi1 * phi2 * p1 * p2_2 * d12 * b - p2_2 * p1_2 * phi1_2 +
               2.0 * p1 * p2_2 * phi2_2 * d12 - p2_2 * d12_2 * b_2 - 2.0 * p1_2 * p2_2;
  factors[3] = 2.0 * p1_2 * p2 * d12 * b + 2.0 * phi2 * p2_3 * phi1 * d12 -
               2.0 * phi2_2 * p2_3 * d12 * b - 2.0 * p1 * p2 * d12_2 * b;
  factors[4] = -2.0 * phi2 * p2_2 * phi1 * p1 * d12 * b + phi2_2 * p2_2 * d12_2 + 2.0 * p1_3 * d12 -
               p1_2 * d12_2 + phi2_2 * p2_2 * p1_2 - p1_4 - 2.0 * phi2_2 * p2_2 * p1 * d12 +
               p2_2 * phi1_2 * p1_2 + phi2_2 * p2_2 * d12_2 * b_2;

  std::vector<Pose> solutions;
  for (double cos_theta : detail::QuarticRealRoots(factors)) {
    cos_theta = std::clamp(cos_theta, -1.0, 1.0);
    const double cot_alpha = (-phi1 * p1 / phi2 - cos_theta * p2 + d12 * b) /
                             (-phi1 * cos_theta * p2 / phi2 + p1 - d12);
    if (!std::isfinite(cot_alpha)) continue;
    const double sin_theta = std::sqrt(1.0 - cos_theta * cos_theta);
    const double sin_alpha = std::sqrt(1.0 / (cot_alpha * cot_alpha + 1.0));
    double cos_alpha = std::sqrt(1.0 - sin_alpha * sin_alpha);
    if (cot_alpha < 0.0) cos_alpha = -cos_alpha;

    const double k = sin_alpha * b + cos_alpha;
    const Eigen::Vector3d C(d12 * cos_alpha * k, cos_theta * d12 * sin_alpha * k,
                            sin_theta * d12 * sin_alpha * k);
    Eigen::Matrix3d Q;
    Q << -cos_alpha, -sin_alpha * cos_theta, -sin_alpha * sin_theta, sin_alpha, -cos_alpha * cos_theta,
        -cos_alpha * sin_theta, 0.0, -sin_theta, cos_theta;
    const Eigen::Matrix3d R = T.transpose() * Q * N;
    const Eigen::Vector3d center = P1 + N.transpose() * C;
    Pose pose = Pose::FromMatrix(R, -R * center);
    if (!pose.translation().allFinite() || !pose.quaternion().coeffs().allFinite()) continue;
    if (!detail::PolishP3P(points3, normalized, pose)) continue;

    bool ok = true;
    for (int i = 0; i < 3 && ok; ++i) {
      const Eigen::Vector3d X = pose.Transform(points3[i]);
      if (!(X.z() > 0.0)) {
        ok = false;
        break;
      }
      const Point2 proj(K.fx * X.x() / X.z() + K.cx, K.fy * X.y() / X.z() + K.cy);
      ok = (proj - points2[i]).norm() <= max_error_px;
    }
    if (!ok) continue;
    bool duplicate = false;
    for (const Pose& s : solutions) {
      if (RotationAngle(s, pose) < 1e-9 &&
          (s.translation() - pose.translation()).norm() <= 1e-9 * (1.0 + pose.translation().norm())) {
        duplicate = true;
      }
    }
    if (!duplicate) solutions.push_back(pose);
  }
  return solutions;
}

}  // namespace psfm
