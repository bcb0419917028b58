#include <fstream>
#include <iterator>

#include <gtest/gtest.h>

#include "psfm/evalkit.hpp"
#include "psfm/io.hpp"
#include "psfm/regopt.hpp"
#include "psfm/synthgen.hpp"
#include "test_util.hpp"

namespace psfm {
namespace {

using testing::CodeOf;

std::string Slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::map<std::string, std::string> DirContents(const std::filesystem::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) out[e.path().filename().string()] = Slurp(e.path());
  return out;
}

SceneSpec NoisySpec(std::uint64_t seed) {
  SceneSpec spec;
  spec.num_frames = 8;
  spec.num_points = 150;
  spec.parallax_ratio = 0.02;
  spec.pixel_noise_std = 0.5;
  spec.prior = PriorKind::kNoisy;
  spec.depth_noise_alpha = 0.2;
  spec.outlier_fraction = 0.05;
  spec.rng_seed = seed;
  return spec;
}

TEST(Generate, SameSeedSameFixtureBytes) {
  const auto a = testing::ScratchDir("a"), b = testing::ScratchDir("b"), c = testing::ScratchDir("c");
  WriteFixture(Generate(NoisySpec(3)), a);
  WriteFixture(Generate(NoisySpec(3)), b);
  WriteFixture(Generate(NoisySpec(4)), c);
  const auto ca = DirContents(a);
  EXPECT_GE(ca.size(), 8u + 8u + 5u);
  EXPECT_EQ(ca, DirContents(b));
  EXPECT_NE(ca.at("tracks.txt"), DirContents(c).at("tracks.txt"));
}

TEST(Generate, ParallaxMatchesTarget) {
  for (TrajectoryKind kind : {TrajectoryKind::kLinear, TrajectoryKind::kArc}) {
    for (double target : {0.001, 0.01, 0.3}) {
      SceneSpec spec;
      spec.trajectory = kind;
      spec.parallax_ratio = target;
      spec.rng_seed = 9;
      const SyntheticScene scene = Generate(spec);
      EXPECT_NEAR(Parallax(scene.gt.poses, scene.gt.points), target, 1e-6) << TrajectoryName(kind);
      EXPECT_NEAR(scene.gt.parallax, target, 1e-6);
    }
  }
}

TEST(Generate, PureRotationHasNoParallax) {
  SceneSpec spec;
  spec.trajectory = TrajectoryKind::kPureRotation;
  spec.parallax_ratio = 0.0;
  const SyntheticScene scene = Generate(spec);
  for (const Pose& p : scene.gt.poses) EXPECT_LT(p.Center().norm(), 1e-12);
  EXPECT_LT(Parallax(scene.gt.poses, scene.gt.points), 1e-12);
}

TEST(Generate, InfeasibleSpecs) {
  SceneSpec spec;
  spec.trajectory = TrajectoryKind::kPureRotation;
  spec.parallax_ratio = 0.01;
  EXPECT_EQ(CodeOf([&] { Generate(spec); }), ErrorCode::kSpecInfeasible);
  spec = {};
  spec.num_frames = 1;
  EXPECT_EQ(CodeOf([&] { Generate(spec); }), ErrorCode::kSpecInfeasible);
  spec = {};
  spec.outlier_fraction = 1.5;
  EXPECT_EQ(CodeOf([&] { Generate(spec); }), ErrorCode::kInvalidArgument);
}

TEST(Generate, LookupReturnsIntendedPrior) {
  const SyntheticScene scene = Generate(NoisySpec(5));
  int checked = 0;
  for (const Track& t : scene.dataset.tracks()) {
    for (const Observation& o : t.observations) {
      ASSERT_TRUE(o.prior_depth.has_value());
      const double intended = scene.gt.priors.at({t.id, o.image_id});
      EXPECT_NEAR(*o.prior_depth, intended, 1e-6);
      ++checked;
    }
  }
  EXPECT_GT(checked, 500);
}

TEST(Generate, ObservationsSatisfyCheirality) {
  const SyntheticScene scene = Generate(NoisySpec(6));
  for (const Track& t : scene.dataset.tracks()) {
    for (const Observation& o : t.observations) {
      EXPECT_GT(scene.gt.poses[o.image_id].Transform(scene.gt.points[t.id]).z(), 0.0);
      EXPECT_DOUBLE_EQ(scene.gt.depths.at({t.id, o.image_id}), scene.gt.poses[o.image_id].Transform(scene.gt.points[t.id]).z());
    }
  }
}

TEST(Generate, MultiplicativeNoiseHasRequestedStd) {
  SceneSpec spec = NoisySpec(7);
  spec.num_frames = 20;
  spec.num_points = 800;
  spec.outlier_fraction = 0.0;
  const SyntheticScene scene = Generate(spec);
  std::vector<double> ratios;
  for (const auto& [key, prior] : scene.gt.priors) ratios.push_back(prior / scene.gt.depths.at(key) - 1.0);
  ASSERT_GE(ratios.size(), 10000u);
  double mean = 0.0;
  for (double r : ratios) mean += r;
  mean /= ratios.size();
  double var = 0.0;
  for (double r : ratios) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / (ratios.size() - 1));
  EXPECT_NEAR(sd, 0.2, 0.05 * 0.2);
  EXPECT_NEAR(mean, 0.0, 0.01);
}

TEST(Generate, AffinePriorsRecoverWarp) {
  SceneSpec spec;
  spec.prior = PriorKind::kAffine;
  spec.gamma_star = 1.7;
  spec.beta_star = -0.6;
  spec.num_frames = 4;
  spec.rng_seed = 8;
  const SyntheticScene scene = Generate(spec);
  for (ImageId id = 0; id < 4; ++id) {
    std::vector<std::pair<double, double>> intended, stored;
    for (const Track& t : scene.dataset.tracks()) {
      const Observation* o = t.Find(id);
      if (!o) continue;
      intended.emplace_back(scene.gt.depths.at({t.id, id}), scene.gt.priors.at({t.id, id}));
      stored.emplace_back(scene.gt.depths.at({t.id, id}), *o->prior_depth);
    }
    const GammaBetaFit fit = FitGammaBeta(intended);
    EXPECT_NEAR(fit.params.gamma, 1.7, 1e-9);
    EXPECT_NEAR(fit.params.beta, -0.6, 1e-9);
    const GammaBetaFit fs = FitGammaBeta(stored);
    EXPECT_NEAR(fs.params.gamma, 1.7, 1e-5);
  }
}

TEST(Generate, OutlierFractionIsHonored) {
  SceneSpec spec = NoisySpec(9);
  spec.num_frames = 10;
  spec.num_points = 400;
  spec.outlier_fraction = 0.2;
  const SyntheticScene scene = Generate(spec);
  int out = 0;
  for (const auto& [k, o] : scene.gt.outliers) out += o;
  const double frac = static_cast<double>(out) / scene.gt.outliers.size();
  // Outliers may lose the depth splat to nearer points, so slightly fewer survive.
  EXPECT_GT(frac, 0.12);
  EXPECT_LT(frac, 0.22);
}

TEST(WriteFixture, RoundTripsThroughLoader) {
  const SyntheticScene scene = Generate(NoisySpec(10));
  const auto dir = testing::ScratchDir("fixture");
  WriteFixture(scene, dir);
  const Dataset loaded = LoadDataset(dir / "tracks.txt");
  EXPECT_TRUE(loaded == scene.dataset);
  for (const ImageRecord& rec : scene.dataset.images())
    EXPECT_TRUE(ReadDepthMap(dir / DepthFileName(rec.id)) == *rec.depth);
  const std::vector<StampedPose> traj = ReadTum(dir / "gt_traj.txt");
  ASSERT_EQ(traj.size(), scene.gt.poses.size());
  for (std::size_t i = 0; i < traj.size(); ++i) EXPECT_LT(RotationAngle(traj[i].pose, scene.gt.poses[i]), 1e-12);
  EXPECT_EQ(ReadGtDepth(dir).size(), scene.gt.poses.size());
}

TEST(WriteFixture, EmptySceneIsHeaderOnly) {
  SceneSpec spec;
  spec.num_points = 0;
  spec.num_frames = 2;
  const SyntheticScene scene = Generate(spec);
  const auto dir = testing::ScratchDir("empty");
  WriteFixture(scene, dir);
  const TracksFile f = ReadTracksFile(dir / "tracks.txt");
  EXPECT_TRUE(f.tracks.empty());
  EXPECT_EQ(Slurp(dir / "tracks.txt").rfind("TRACKS v1\n", 0), 0u);
  EXPECT_TRUE(LoadDataset(dir / "tracks.txt").tracks().empty());
  EXPECT_TRUE(ReadPly(dir / "gt_points.ply").empty());
}

}  // namespace
}  // namespace psfm
