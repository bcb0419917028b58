#include <random>

#include <gtest/gtest.h>

#include "psfm/geom.hpp"
#include "test_util.hpp"

namespace psfm {
namespace {

using testing::RandomIntrinsics;
using testing::RandomPose;

TEST(Project, PrincipalRay) {
  const CameraIntrinsics K{1.0, 1.0, 0.0, 0.0, 1, 1};
  const Point2 p = Project(Pose::Identity(), K, {0.0, 0.0, 1.0});
  EXPECT_EQ(p, Point2(0.0, 0.0));
}

TEST(Project, ScaledOffset) {
  const CameraIntrinsics K{100.0, 100.0, 50.0, 50.0, 100, 100};
  const Point2 p = Project(Pose::Identity(), K, {0.5, 0.0, 1.0});
  EXPECT_DOUBLE_EQ(p.x(), 100.0);
  EXPECT_DOUBLE_EQ(p.y(), 50.0);
}

TEST(Project, BehindCameraThrows) {
  const CameraIntrinsics K = testing::DefaultIntrinsics();
  try {
    Project(Pose::Identity(), K, {0.0, 0.0, -1.0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kCheiralityViolation);
  }
  EXPECT_THROW(Project(Pose::Identity(), K, {0.0, 0.0, 0.0}), Error);
}

TEST(Project, MatchesMatrixOracle) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 1000; ++i) {
    const Pose pose = RandomPose(rng);
    const CameraIntrinsics K = RandomIntrinsics(rng);
    const Point3 P = testing::RandomVisiblePoint(rng, pose, K);
    // Homogeneous oracle: K [R | t] (P, 1), dehomogenized.
    Eigen::Matrix<double, 3, 4> Rt;
    Rt.leftCols<3>() = pose.quaternion().toRotationMatrix();
    Rt.col(3) = pose.translation();
    const Eigen::Vector3d h = K.K() * Rt * P.homogeneous();
    const Point2 expected(h.x() / h.z(), h.y() / h.z());
    EXPECT_LT((Project(pose, K, P) - expected).norm(), 1e-12 * (1.0 + expected.norm()));
  }
}

TEST(Backproject, PrincipalPoint) {
  const CameraIntrinsics K = testing::DefaultIntrinsics();
  EXPECT_LT((Backproject(K, {K.cx, K.cy}, 3.5) - Point3(0, 0, 3.5)).norm(), 1e-15);
}

TEST(Backproject, SimpleIntrinsics) {
  const CameraIntrinsics K{2.0, 2.0, 0.0, 0.0, 4, 4};
  EXPECT_LT((Backproject(K, {2.0, 0.0}, 1.0) - Point3(1.0, 0.0, 1.0)).norm(), 1e-15);
}

TEST(Backproject, InvalidDepth) {
  const CameraIntrinsics K = testing::DefaultIntrinsics();
  for (double d : {0.0, -1.0, std::numeric_limits<double>::infinity(), std::numeric_limits<double>::quiet_NaN()}) {
    try {
      Backproject(K, {10.0, 10.0}, d);
      FAIL() << d;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kInvalidDepth);
    }
  }
}

TEST(Backproject, RoundTrip) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> ux(0.0, 639.0), uy(0.0, 479.0), ud(0.01, 100.0);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const CameraIntrinsics K = RandomIntrinsics(rng);
    const Point2 p(ux(rng), uy(rng));
    const double d = ud(rng);
    worst = std::max(worst, (Project(Pose::Identity(), K, Backproject(K, p, d)) - p).norm());
  }
  EXPECT_LT(worst, 1e-9);
}

TEST(Backproject, ProjectThenBackprojectRecoversPoint) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 1000; ++i) {
    const Pose pose = RandomPose(rng);
    const CameraIntrinsics K = RandomIntrinsics(rng);
    const Point3 P = testing::RandomVisiblePoint(rng, pose, K);
    const Point2 p = Project(pose, K, P);
    const double z = pose.Transform(P).z();
    const Point3 back = Inverse(pose).Transform(Backproject(K, p, z));
    EXPECT_LT((back - P).norm(), 1e-9 * P.norm());
  }
}

TEST(Pose, IdentityComposition) {
  const Pose id = Compose(Pose::Identity(), Pose::Identity());
  EXPECT_EQ(id.quaternion().coeffs(), Eigen::Quaterniond::Identity().coeffs());
  EXPECT_EQ(id.translation(), Eigen::Vector3d::Zero());
}

TEST(Pose, GroupLaws) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 200; ++i) {
    const Pose a = RandomPose(rng), b = RandomPose(rng), c = RandomPose(rng);
    const Pose e = Compose(a, Inverse(a));
    EXPECT_LT(RotationAngle(e, Pose::Identity()), 1e-12);
    EXPECT_LT(e.translation().norm(), 1e-12);
    const Pose ii = Inverse(Inverse(a));
    EXPECT_LT((ii.Matrix4() - a.Matrix4()).norm(), 1e-12);
    const Pose l = Compose(Compose(a, b), c), r = Compose(a, Compose(b, c));
    EXPECT_LT((l.Matrix4() - r.Matrix4()).norm(), 1e-12);
  }
}

TEST(Pose, ComposeMatchesHomogeneousMatrices) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 200; ++i) {
    const Pose a = RandomPose(rng), b = RandomPose(rng);
    EXPECT_LT((Compose(a, b).Matrix4() - a.Matrix4() * b.Matrix4()).norm(), 1e-12);
    EXPECT_LT((Inverse(a).Matrix4() - a.Matrix4().inverse()).norm(), 1e-12);
  }
}

TEST(Pose, UnitNormAfterManyCompositions) {
  std::mt19937_64 rng(6);
  std::vector<Pose> pool;
  for (int i = 0; i < 64; ++i) pool.push_back(RandomPose(rng, 3.14159, 0.01));
  Pose acc;
  for (int i = 0; i < 1000000; ++i) acc = Compose(pool[static_cast<std::size_t>(i) & 63], acc);
  EXPECT_NEAR(acc.quaternion().norm(), 1.0, 1e-12);
  EXPECT_GE(acc.quaternion().w(), 0.0);
}

TEST(Pose, RetractIsLeftPerturbation) {
  std::mt19937_64 rng(7);
  const Pose p = RandomPose(rng);
  Vector6d d;
  d << 0.01, -0.02, 0.03, 0.1, 0.2, -0.3;
  const Pose r = p.Retract(d);
  const Eigen::Matrix3d expected = Eigen::AngleAxisd(d.head<3>().norm(), d.head<3>().normalized()).toRotationMatrix() *
                                   p.rotation();
  EXPECT_LT((r.rotation() - expected).norm(), 1e-14);
  EXPECT_LT((r.translation() - p.translation() - d.tail<3>()).norm(), 1e-15);
}

TEST(Pose, CenterAndTransform) {
  std::mt19937_64 rng(8);
  const Pose p = RandomPose(rng);
  EXPECT_LT(p.Transform(p.Center()).norm(), 1e-12);
}

TEST(Similarity, ApplyToPreservesProjection) {
  std::mt19937_64 rng(9);
  const Pose pose = RandomPose(rng);
  const CameraIntrinsics K = testing::DefaultIntrinsics();
  const Point3 P = testing::RandomVisiblePoint(rng, pose, K);
  Similarity s;
  s.scale = 2.5;
  s.rotation = testing::RandomRotation(rng).toRotationMatrix();
  s.translation = {1.0, -2.0, 0.5};
  EXPECT_LT((Project(s.ApplyTo(pose), K, s.Apply(P)) - Project(pose, K, P)).norm(), 1e-9);
}

}  // namespace
}  // namespace psfm
