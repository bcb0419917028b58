#pragma once

#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include <gtest/gtest.h>

#include "psfm/error.hpp"
#include "psfm/geom.hpp"

namespace psfm::testing {

inline ErrorCode CodeOf(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::kInvalidArgument;
}

inline Eigen::Quaterniond RandomRotation(std::mt19937_64& rng, double max_angle = 3.14159) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Eigen::Vector3d axis(u(rng), u(rng), u(rng));
  if (axis.norm() < 1e-6) axis = Eigen::Vector3d::UnitZ();
  return Eigen::Quaterniond(Eigen::AngleAxisd(max_angle * (0.5 * (u(rng) + 1.0)), axis.normalized()));
}

inline Pose RandomPose(std::mt19937_64& rng, double max_angle = 3.14159, double max_t = 2.0) {
  std::uniform_real_distribution<double> u(-max_t, max_t);
  return Pose(RandomRotation(rng, max_angle), Eigen::Vector3d(u(rng), u(rng), u(rng)));
}

inline CameraIntrinsics RandomIntrinsics(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> f(200.0, 900.0), c(0.4, 0.6);
  CameraIntrinsics K;
  K.width = 640;
  K.height = 480;
  K.fx = f(rng);
  K.fy = K.fx * (0.9 + 0.2 * c(rng));
  K.cx = K.width * c(rng);
  K.cy = K.height * c(rng);
  return K;
}

inline CameraIntrinsics DefaultIntrinsics() { return {500.0, 500.0, 319.5, 239.5, 640, 480}; }

// Point in front of `pose` at depth in [zmin, zmax], inside the image.
inline Point3 RandomVisiblePoint(std::mt19937_64& rng, const Pose& pose, const CameraIntrinsics& K,
                                 double zmin = 2.0, double zmax = 10.0) {
  std::uniform_real_distribution<double> ux(20.0, K.width - 21.0), uy(20.0, K.height - 21.0), uz(zmin, zmax);
  const double z = uz(rng);
  const Eigen::Vector3d Xc((ux(rng) - K.cx) / K.fx * z, (uy(rng) - K.cy) / K.fy * z, z);
  return Inverse(pose).Transform(Xc);
}

// Fresh, empty scratch directory under the test's working directory.
inline std::filesystem::path ScratchDir(const std::string& name) {
  const auto info = ::testing::UnitTest::GetInstance()->current_test_info();
  const auto dir = std::filesystem::temp_directory_path() / "psfm_tests" /
                   (std::string(info->test_suite_name()) + "." + info->name() + "." + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace psfm::testing
