#pragma once

#include <filesystem>
#include <random>
#include <string>

#include <Eigen/Geometry>
#include <gtest/gtest.h>

#include "radepth/geometry.hpp"

namespace radepth::testing {

inline Eigen::Matrix3d random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  return q.toRotationMatrix();
}

inline CameraIntrinsics random_intrinsics(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> wd(32, 1280), hd(24, 960);
  std::uniform_real_distribution<double> f(50.0, 1500.0), c(0.3, 0.7);
  CameraIntrinsics k;
  k.width = wd(rng);
  k.height = hd(rng);
  k.fx = f(rng);
  k.fy = k.fx * std::uniform_real_distribution<double>(0.9, 1.1)(rng);
  k.cx = c(rng) * k.width;
  k.cy = c(rng) * k.height;
  return k;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  std::string stem = name;
  if (info != nullptr) stem += std::string("_") + info->test_suite_name() + "_" + info->name();
  const auto dir = std::filesystem::temp_directory_path() / ("radepth_" + stem);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace radepth::testing
