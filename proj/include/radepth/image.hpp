#pragma once

#include <array>
#include <cstddef>

#include <Eigen/Core>

namespace radepth {

// Row index is the image row (v), column index is the image column (u).
using DepthMap =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Mask =
    Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Plane =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Planar RGB image with values in [0, 1].
struct RgbImage {
  std::array<Plane, 3> channels;

  RgbImage() = default;
  RgbImage(int height, int width) {
    for (auto& c : channels) c = Plane::Zero(height, width);
  }

  int height() const { return static_cast<int>(channels[0].rows()); }
  int width() const { return static_cast<int>(channels[0].cols()); }
  bool empty() const { return channels[0].size() == 0; }

  // Mean of the three channels.
  Plane grayscale() const {
    return (channels[0] + channels[1] + channels[2]) / 3.0f;
  }
};

// Pixels with finite, strictly positive ground truth.
inline Mask valid_depth_mask(const DepthMap& gt) {
  return gt.array().isFinite() && (gt.array() > 0.0);
}

}  // namespace radepth
