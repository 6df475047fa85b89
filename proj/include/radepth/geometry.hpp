#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace radepth {

// Pinhole intrinsics for an undistorted image. Pixel (u, v) = (0, 0) is the
// center of the top-left pixel.
struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.5;
  double cy = 0.5;
  int width = 1;
  int height = 1;

  bool is_valid() const {
    return fx > 0.0 && fy > 0.0 && width > 0 && height > 0 && cx > 0.0 &&
           cx < width && cy > 0.0 && cy < height;
  }

  // Throws std::invalid_argument if the invariants do not hold.
  void validate() const;

  // Camera-frame ray (z = 1) through continuous pixel coordinates.
  Eigen::Vector3d ray(double u, double v) const {
    return {(u - cx) / fx, (v - cy) / fy, 1.0};
  }
};

// Maps points from a source frame into a target frame: p_t = R p_s + t.
struct RigidTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static constexpr double kTolerance = 1e-9;

  bool is_valid() const {
    return (rotation.transpose() * rotation - Eigen::Matrix3d::Identity())
                   .cwiseAbs()
                   .maxCoeff() <= kTolerance &&
           std::abs(rotation.determinant() - 1.0) <= kTolerance &&
           translation.allFinite();
  }

  void validate() const;

  Eigen::Vector3d operator*(const Eigen::Vector3d& p) const {
    return rotation * p + translation;
  }

  RigidTransform inverse() const {
    RigidTransform inv;
    inv.rotation = rotation.transpose();
    inv.translation = -(inv.rotation * translation);
    return inv;
  }
};

}  // namespace radepth
