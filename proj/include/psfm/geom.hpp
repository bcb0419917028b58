#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>
#include <string>

#include "psfm/error.hpp"

namespace psfm {

using Point2 = Eigen::Vector2d;
using Point3 = Eigen::Vector3d;
using Vector6d = Eigen::Matrix<double, 6, 1>;

// Pinhole camera without distortion.
struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 0;
  int height = 0;

  Eigen::Matrix3d K() const {
    Eigen::Matrix3d k = Eigen::Matrix3d::Identity();
    k(0, 0) = fx;
    k(1, 1) = fy;
    k(0, 2) = cx;
    k(1, 2) = cy;
    return k;
  }

  bool IsValid() const {
    return std::isfinite(fx) && std::isfinite(fy) && fx > 0.0 && fy > 0.0 &&
           width > 0 && height > 0 && cx > 0.0 && cx < width && cy > 0.0 &&
           cy < height;
  }

  void Validate() const {
    if (!IsValid()) {
      Throw(ErrorCode::kInvalidArgument,
            "camera intrinsics require fx, fy > 0 and a principal point inside "
            "the image");
    }
  }

  bool operator==(const CameraIntrinsics&) const = default;
};

// Rigid world-to-camera transform: X_cam = R * X_world + t.
class Pose {
 public:
  Pose() : q_(Eigen::Quaterniond::Identity()), t_(Eigen::Vector3d::Zero()) {}

  Pose(const Eigen::Quaterniond& q, const Eigen::Vector3d& t) : q_(q.normalized()), t_(t) {
    Canonicalize();
  }

  static Pose FromMatrix(const Eigen::Matrix3d& R, const Eigen::Vector3d& t) {
    return Pose(Eigen::Quaterniond(R), t);
  }

  static Pose Identity() { return Pose(); }

  Eigen::Matrix3d rotation() const { return q_.toRotationMatrix(); }
  const Eigen::Quaterniond& quaternion() const { return q_; }
  const Eigen::Vector3d& translation() const { return t_; }

  Eigen::Vector3d Transform(const Point3& x) const { return q_ * x + t_; }

  // Camera center in world coordinates.
  Eigen::Vector3d Center() const { return -(q_.conjugate() * t_); }

  Eigen::Matrix<double, 3, 4> Matrix3x4() const {
    Eigen::Matrix<double, 3, 4> m;
    m.leftCols<3>() = rotation();
    m.col(3) = t_;
    return m;
  }

  Eigen::Matrix4d Matrix4() const {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m.topRows<3>() = Matrix3x4();
    return m;
  }

  // Tangent update used by every optimizer: R <- Exp(omega) R, t <- t + dt,
  // with delta = (omega, dt).
  Pose Retract(const Vector6d& delta) const {
    return Pose(ExpQuat(delta.head<3>()) * q_, t_ + delta.tail<3>());
  }

  static Eigen::Quaterniond ExpQuat(const Eigen::Vector3d& omega) {
    const double angle = omega.norm();
    if (angle < 1e-12) {
      Eigen::Quaterniond q(1.0, 0.5 * omega.x(), 0.5 * omega.y(), 0.5 * omega.z());
      return q.normalized();
    }
    return Eigen::Quaterniond(Eigen::AngleAxisd(angle, omega / angle));
  }

 private:
  void Canonicalize() {
    if (q_.w() < 0.0) q_.coeffs() *= -1.0;
  }

  Eigen::Quaterniond q_;
  Eigen::Vector3d t_;
};

// compose(a, b) applies b first, then a.
inline Pose Compose(const Pose& a, const Pose& b) {
  return Pose(a.quaternion() * b.quaternion(), a.quaternion() * b.translation() + a.translation());
}

inline Pose Inverse(const Pose& a) {
  const Eigen::Quaterniond qi = a.quaternion().conjugate();
  return Pose(qi, -(qi * a.translation()));
}

// Geodesic angle between two rotations in radians.
inline double RotationAngle(const Eigen::Quaterniond& a, const Eigen::Quaterniond& b) {
  const Eigen::Quaterniond d = a.conjugate() * b;
  const double v = d.vec().norm();
  return 2.0 * std::atan2(v, std::abs(d.w()));
}

inline double RotationAngle(const Pose& a, const Pose& b) {
  return RotationAngle(a.quaternion(), b.quaternion());
}

// Sim(3) x -> scale * R * x + t.
struct Similarity {
  double scale = 1.0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  Eigen::Vector3d Apply(const Eigen::Vector3d& x) const {
    return scale * (rotation * x) + translation;
  }

  // World-to-camera pose expressed in the transformed world frame.
  Pose ApplyTo(const Pose& pose) const {
    const Eigen::Matrix3d R = pose.rotation() * rotation.transpose();
    const Eigen::Vector3d c = Apply(pose.Center());
    return Pose::FromMatrix(R, -R * c);
  }
};

inline constexpr double kDefaultCheiralityEps = 1e-9;

inline Point2 Project(const Pose& pose, const CameraIntrinsics& K, const Point3& P,
                      double cheirality_eps = kDefaultCheiralityEps) {
  const Eigen::Vector3d X = pose.Transform(P);
  if (!(X.z() > cheirality_eps)) {
    Throw(ErrorCode::kCheiralityViolation,
          "point has camera-frame depth " + std::to_string(X.z()));
  }
  return {K.fx * X.x() / X.z() + K.cx, K.fy * X.y() / X.z() + K.cy};
}

inline Point3 Backproject(const CameraIntrinsics& K, const Point2& p, double depth) {
  if (!std::isfinite(depth) || !(depth > 0.0)) {
    Throw(ErrorCode::kInvalidDepth, "depth must be finite and positive");
  }
  return {depth * (p.x() - K.cx) / K.fx, depth * (p.y() - K.cy) / K.fy, depth};
}

// Unit-depth ray (x, y, 1) in the camera frame.
inline Eigen::Vector3d NormalizedRay(const CameraIntrinsics& K, const Point2& p) {
  return {(p.x() - K.cx) / K.fx, (p.y() - K.cy) / K.fy, 1.0};
}

inline Eigen::Matrix3d Skew(const Eigen::Vector3d& v) {
  Eigen::Matrix3d m;
  m << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return m;
}

}  // namespace psfm
