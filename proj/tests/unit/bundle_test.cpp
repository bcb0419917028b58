#include <random>

#include <gtest/gtest.h>

#include "psfm/bundle.hpp"
#include "psfm/synthgen.hpp"
#include "scene_util.hpp"
#include "test_util.hpp"

namespace psfm {
namespace {

using testing::GroundTruthReconstruction;

constexpr double kPi = 3.14159265358979323846;

SceneSpec SmallSpec(std::uint64_t seed, int frames = 6, int points = 40) {
  SceneSpec spec;
  spec.num_frames = frames;
  spec.num_points = points;
  spec.parallax_ratio = 0.05;
  spec.trajectory = TrajectoryKind::kArc;
  spec.rng_seed = seed;
  return spec;
}

void Perturb(Reconstruction& recon, std::mt19937_64& rng, double rel) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& [id, img] : recon.images) {
    if (id == recon.seed_image) continue;
    Vector6d d;
    for (int k = 0; k < 3; ++k) d(k) = rel * n(rng);
    for (int k = 3; k < 6; ++k) d(k) = rel * std::max(0.1, img.pose.translation().norm()) * n(rng);
    img.pose = img.pose.Retract(d);
  }
  for (auto& [tid, p] : recon.points) {
    if (recon.scale_anchor && tid == *recon.scale_anchor) continue;
    p.position += rel * p.position.norm() * Point3(n(rng), n(rng), n(rng));
  }
}

double MaxDeviation(const Reconstruction& a, const Reconstruction& b) {
  double m = 0.0;
  for (const auto& [id, img] : a.images) {
    m = std::max(m, RotationAngle(img.pose, b.images.at(id).pose));
    m = std::max(m, (img.pose.translation() - b.images.at(id).pose.translation()).norm());
  }
  for (const auto& [tid, p] : a.points) m = std::max(m, (p.position - b.points.at(tid).position).norm());
  return m;
}

TEST(BundleProblem, SchurStepEqualsDenseStep) {
  std::mt19937_64 rng(61);
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    SceneSpec spec = SmallSpec(seed, 5, 50);
    spec.pixel_noise_std = 0.5;
    const SyntheticScene scene = Generate(spec);
    Reconstruction recon = GroundTruthReconstruction(scene);
    Perturb(recon, rng, 1e-3);
    for (bool robust : {true, false}) {
      BundleConfig cfg;
      cfg.robust = robust;
      const BundleProblem problem(recon, scene.dataset, cfg);
      ASSERT_LE(problem.num_point_blocks(), 50);
      const auto ne = problem.Linearize(problem.Current());
      for (double mu : {1e-8, 1e-4, 1.0}) {
        const Eigen::VectorXd a = problem.SolveSchur(ne, mu);
        const Eigen::VectorXd b = problem.SolveDense(ne, mu);
        EXPECT_LT((a - b).norm(), 1e-8 * std::max(1.0, b.norm())) << seed << " " << mu;
      }
    }
  }
}

TEST(BundleAdjust, RestoresPerturbedScene) {
  std::mt19937_64 rng(62);
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const SyntheticScene scene = Generate(SmallSpec(seed, 8, 60));
    const Reconstruction truth = GroundTruthReconstruction(scene);
    Reconstruction recon = truth;
    Perturb(recon, rng, 1e-3);
    BundleConfig cfg;
    cfg.function_tolerance = 1e-16;
    const BundleSummary s = BundleAdjust(recon, scene.dataset, cfg);
    EXPECT_FALSE(s.diverged);
    EXPECT_LE(s.final_cost, s.initial_cost);
    EXPECT_LT(MaxDeviation(recon, truth), 1e-6) << seed;
    for (const auto& [id, img] : recon.images) EXPECT_EQ(img.intrinsics, truth.images.at(id).intrinsics);
    EXPECT_EQ(recon.images.at(0).pose.Matrix4(), Pose::Identity().Matrix4());
  }
}

TEST(BundleAdjust, OptimalInputIsAFixedPoint) {
  SceneSpec spec = SmallSpec(3, 6, 60);
  spec.pixel_noise_std = 0.5;
  const SyntheticScene scene = Generate(spec);
  Reconstruction recon = GroundTruthReconstruction(scene);
  BundleConfig cfg;
  BundleAdjust(recon, scene.dataset, cfg);
  const Reconstruction before = recon;
  const BundleSummary s = BundleAdjust(recon, scene.dataset, cfg);
  EXPECT_LE(s.iterations, 1);
  EXPECT_LE(s.initial_cost - s.final_cost, cfg.function_tolerance * s.initial_cost + 1e-15);
  EXPECT_LT(MaxDeviation(recon, before), 1e-6);

  const SyntheticScene clean = Generate(SmallSpec(3, 6, 60));
  Reconstruction exact = GroundTruthReconstruction(clean);
  const BundleSummary se = BundleAdjust(exact, clean.dataset, cfg);
  EXPECT_LE(se.iterations, 1);
  EXPECT_LT(se.initial_cost, 1e-18);
}

// Residuals in the problem's ordering (points in id order, views in order)
// computed directly from the projection model.
Eigen::VectorXd StackedResiduals(const Reconstruction& recon, const Dataset& ds) {
  std::vector<double> r;
  for (const auto& [tid, p] : recon.points) {
    for (ImageId v : p.views) {
      const Point2 e = Project(recon.images.at(v).pose, recon.images.at(v).intrinsics, p.position) - ds.track(tid).Find(v)->pixel;
      r.push_back(e.x());
      r.push_back(e.y());
    }
  }
  return Eigen::Map<Eigen::VectorXd>(r.data(), static_cast<Eigen::Index>(r.size()));
}

TEST(BundleAdjust, TwoViewGaugeIsFixed) {
  SceneSpec spec = SmallSpec(4, 2, 30);
  spec.pixel_noise_std = 0.3;
  const SyntheticScene scene = Generate(spec);
  const Reconstruction recon = GroundTruthReconstruction(scene);
  Reconstruction work = recon;
  const BundleProblem problem(work, scene.dataset, {});
  ASSERT_EQ(problem.num_pose_blocks(), 1);
  ASSERT_TRUE(problem.frozen_point().has_value());

  // Finite-difference Jacobian over every parameter, no gauge removed.
  const Eigen::VectorXd r0 = StackedResiduals(recon, scene.dataset);
  const Eigen::Index n = 6 + 3 * static_cast<Eigen::Index>(recon.points.size());
  Eigen::MatrixXd Jfd(r0.size(), n);
  const double h = 1e-6;
  for (Eigen::Index c = 0; c < n; ++c) {
    Reconstruction plus = recon, minus = recon;
    if (c < 6) {
      Vector6d d = Vector6d::Zero();
      d(c) = h;
      plus.images.at(1).pose = recon.images.at(1).pose.Retract(d);
      minus.images.at(1).pose = recon.images.at(1).pose.Retract(-d);
    } else {
      auto it_p = std::next(plus.points.begin(), (c - 6) / 3);
      auto it_m = std::next(minus.points.begin(), (c - 6) / 3);
      it_p->second.position((c - 6) % 3) += h;
      it_m->second.position((c - 6) % 3) -= h;
    }
    Jfd.col(c) = (StackedResiduals(plus, scene.dataset) - StackedResiduals(minus, scene.dataset)) / (2 * h);
  }
  const auto null_dims = [](const Eigen::MatrixXd& J) {
    const Eigen::VectorXd sv = Eigen::JacobiSVD<Eigen::MatrixXd>(J).singularValues();
    int k = 0;
    for (Eigen::Index i = 0; i < sv.size(); ++i) k += sv(i) < 1e-7 * sv(0);
    return k + static_cast<int>(J.cols() - sv.size());
  };
  // Seed pose fixed, scale free: exactly one gauge direction remains.
  EXPECT_EQ(null_dims(Jfd), 1);

  const Eigen::Index drop = 6 + 3 * *problem.frozen_point() + 2;
  Eigen::MatrixXd reduced(Jfd.rows(), n - 1);
  reduced << Jfd.leftCols(drop), Jfd.rightCols(n - drop - 1);
  EXPECT_EQ(null_dims(reduced), 0);

  const Eigen::MatrixXd J = problem.DenseJacobian(problem.Current());
  EXPECT_EQ(null_dims(J), 0);
  EXPECT_LT((J - reduced).norm(), 1e-5 * J.norm());
}

TEST(BundleAdjust, LocalWindowLeavesOtherPosesConstant) {
  std::mt19937_64 rng(63);
  const SyntheticScene scene = Generate(SmallSpec(5, 8, 60));
  Reconstruction recon = GroundTruthReconstruction(scene);
  Perturb(recon, rng, 1e-3);
  const Reconstruction before = recon;
  const BundleSummary s = BundleAdjust(recon, scene.dataset, {}, std::set<ImageId>{5, 6, 7});
  EXPECT_EQ(s.variable_poses, 3);
  EXPECT_LE(s.final_cost, s.initial_cost);
  for (ImageId id = 0; id < 5; ++id) EXPECT_EQ(recon.images.at(id).pose.Matrix4(), before.images.at(id).pose.Matrix4());
}

TEST(BundleAdjust, Deterministic) {
  std::mt19937_64 rng(64);
  SceneSpec spec = SmallSpec(6, 6, 50);
  spec.pixel_noise_std = 1.0;
  const SyntheticScene scene = Generate(spec);
  Reconstruction a = GroundTruthReconstruction(scene);
  Perturb(a, rng, 1e-3);
  Reconstruction b = a;
  const BundleSummary sa = BundleAdjust(a, scene.dataset, {});
  const BundleSummary sb = BundleAdjust(b, scene.dataset, {});
  EXPECT_EQ(sa.iterations, sb.iterations);
  EXPECT_EQ(sa.final_cost, sb.final_cost);
  EXPECT_EQ(MaxDeviation(a, b), 0.0);
}

// Two cameras subtending `angle_deg` at a point at depth 5 with exact priors.
struct FilterScene {
  Dataset dataset;
  Reconstruction recon;
};

FilterScene TwoViewPoint(double angle_deg, double prior_scale, double pixel_offset) {
  const CameraIntrinsics K = testing::DefaultIntrinsics();
  const double depth = 5.0;
  const double b = 2.0 * depth * std::tan(0.5 * angle_deg * kPi / 180.0);
  const Pose pa(Eigen::Quaterniond::Identity(), Eigen::Vector3d(0.5 * b, 0, 0));
  const Pose pb(Eigen::Quaterniond::Identity(), Eigen::Vector3d(-0.5 * b, 0, 0));
  const Point3 P(0.0, 0.0, depth);
  const Point2 xa = Project(pa, K, P), xb = Project(pb, K, P) + Point2(pixel_offset, 0.0);
  // Bilinear support in the depth map is constant so the lookup returns the prior exactly.
  const float prior = static_cast<float>(depth * prior_scale);
  FilterScene fs;
  fs.dataset = Dataset::Build({{0, K, DepthMap(K.width, K.height, prior), std::nullopt},
                               {1, K, DepthMap(K.width, K.height, prior), std::nullopt}},
                              {Track{0, {{0, xa}, {1, xb}}}});
  fs.recon.images[0] = {0, pa, {1.0, 0.0}, K};
  fs.recon.images[1] = {1, pb, {1.0, 0.0}, K};
  fs.recon.points[0] = {0, P, {0, 1}};
  return fs;
}

TEST(FilterPoints, LargeReprojectionErrorRemoves) {
  FilterScene fs = TwoViewPoint(5.0, 1.0, 10.0);
  const FilterStats s = FilterPoints(fs.recon, fs.dataset, {});
  EXPECT_EQ(s.removed_reprojection, 1);
  EXPECT_TRUE(fs.recon.points.empty());
}

TEST(FilterPoints, DepthConsistentSmallAngleIsRetained) {
  FilterScene fs = TwoViewPoint(0.1, 1.01, 0.0);
  EXPECT_EQ(FilterPoints(fs.recon, fs.dataset, {}).total(), 0);
  EXPECT_EQ(fs.recon.points.size(), 1u);
}

TEST(FilterPoints, DepthInconsistentSmallAngleRemoves) {
  FilterScene fs = TwoViewPoint(0.1, 1.10, 0.0);
  EXPECT_EQ(FilterPoints(fs.recon, fs.dataset, {}).removed_angle, 1);
  FilterScene wide = TwoViewPoint(3.0, 1.10, 0.0);
  EXPECT_EQ(FilterPoints(wide.recon, wide.dataset, {}).total(), 0);
}

TEST(FilterPoints, CheiralityRemoves) {
  FilterScene fs = TwoViewPoint(5.0, 1.0, 0.0);
  fs.recon.points.at(0).position.z() = -5.0;
  EXPECT_EQ(FilterPoints(fs.recon, fs.dataset, {}).removed_cheirality, 1);
}

// Brute-force re-evaluation of the filter rules.
std::set<TrackId> OracleKeep(const Reconstruction& recon, const Dataset& ds, const FilterConfig& cfg) {
  std::set<TrackId> keep;
  for (const auto& [tid, p] : recon.points) {
    bool ok = true;
    double min_rel = std::numeric_limits<double>::infinity();
    std::vector<Eigen::Vector3d> centers;
    for (ImageId v : p.views) {
      const RegisteredImage& img = recon.images.at(v);
      const Observation& o = *ds.track(tid).Find(v);
      const Eigen::Vector3d X = img.pose.rotation() * p.position + img.pose.translation();
      if (X.z() <= 1e-9) {
        ok = false;
        break;
      }
      const CameraIntrinsics& K = img.intrinsics;
      const double ex = K.fx * X.x() / X.z() + K.cx - o.pixel.x(), ey = K.fy * X.y() / X.z() + K.cy - o.pixel.y();
      if (std::hypot(ex, ey) > cfg.filter_px) ok = false;
      if (o.prior_depth) {
        const double a = img.alignment.gamma * *o.prior_depth + img.alignment.beta;
        if (a > 0) min_rel = std::min(min_rel, std::abs(X.z() - a) / a);
      }
      centers.push_back(-(img.pose.rotation().transpose() * img.pose.translation()));
    }
    if (!ok) continue;
    double max_angle = 0.0;
    for (std::size_t i = 0; i < centers.size(); ++i)
      for (std::size_t j = i + 1; j < centers.size(); ++j) {
        const Eigen::Vector3d u = (p.position - centers[i]).normalized(), w = (p.position - centers[j]).normalized();
        max_angle = std::max(max_angle, std::acos(std::clamp(u.dot(w), -1.0, 1.0)));
      }
    if (min_rel > cfg.depth_gate && max_angle * 180.0 / kPi < cfg.min_tri_angle_deg) continue;
    keep.insert(tid);
  }
  return keep;
}

TEST(FilterPoints, MatchesBruteForceOracle) {
  std::mt19937_64 rng(65);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    SceneSpec spec = SmallSpec(seed, 6, 80);
    spec.parallax_ratio = 0.02 + 0.01 * (seed % 4);
    spec.prior = PriorKind::kNoisy;
    spec.depth_noise_alpha = 0.08;
    spec.pixel_noise_std = 1.0;
    const SyntheticScene scene = Generate(spec);
    Reconstruction recon = GroundTruthReconstruction(scene);
    for (auto& [tid, p] : recon.points) {
      const double roll = u(rng);
      if (roll < 0.1) p.position *= 1.0 + 0.2 * n(rng);
      else if (roll < 0.15) p.position.z() = -p.position.z();
      else p.position += 0.01 * Point3(n(rng), n(rng), n(rng));
    }
    const FilterConfig cfg;
    const std::set<TrackId> expected = OracleKeep(recon, scene.dataset, cfg);
    const std::size_t before = recon.points.size();
    const FilterStats stats = FilterPoints(recon, scene.dataset, cfg);
    std::set<TrackId> kept;
    for (const auto& [tid, p] : recon.points) kept.insert(tid);
    EXPECT_EQ(kept, expected) << seed;
    EXPECT_EQ(before - kept.size(), static_cast<std::size_t>(stats.total()));
  }
}

}  // namespace
}  // namespace psfm
