#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "radepth/calib_radar.hpp"
#include "radepth/geometry.hpp"
#include "radepth/image.hpp"

namespace radepth {

// Heightfield terrain over the square [0, extent] x [0, extent] (world x east,
// y north, z up). Grid node (row i, col j) sits at (j * cell, i * cell).
struct TerrainScene {
  Eigen::MatrixXd heightfield;  // meters
  RgbImage albedo;              // same grid as heightfield, values in [0, 1]
  double extent = 1.0;          // meters
  Eigen::Vector3d sun_direction = Eigen::Vector3d(0.3, 0.2, 1.0).normalized();
  // Procedural albedo detail below the grid resolution: `detail_octaves`
  // octaves of value noise, the coarsest with a wavelength of one grid cell.
  int detail_octaves = 0;
  double detail_strength = 0.45;
  uint64_t detail_seed = 0;

  int grid_size() const { return static_cast<int>(heightfield.rows()); }
  double cell_size() const { return extent / (grid_size() - 1); }
  bool contains(double x, double y) const {
    return x >= 0.0 && x <= extent && y >= 0.0 && y <= extent;
  }
  // Bilinear elevation; coordinates are clamped to the extent.
  double height_at(double x, double y) const;
  Eigen::Vector3d normal_at(double x, double y) const;
  Eigen::Vector3d albedo_at(double x, double y) const;
  double min_height() const { return heightfield.minCoeff(); }
  double max_height() const { return heightfield.maxCoeff(); }

  void validate() const;
};

struct SceneParams {
  int grid_size = 257;
  double base_extent = 1600.0;  // meters at scale 1
  double relief = 0.04;         // peak-to-peak elevation / extent
  int octaves = 7;
  int detail_octaves = 10;  // albedo octaves below the grid resolution
  double persistence = 0.55;
  // Global scene scale, log-uniform in [scale_min, scale_max]. Every length
  // in the scene scales with it, so appearance carries no absolute scale.
  double scale_min = 0.25;
  double scale_max = 4.0;
};

// Procedural terrain: fractal value-noise heights, patchy albedo, random sun.
TerrainScene generate_scene(const SceneParams& params, uint64_t seed);

// Flat scene at constant elevation with a noisy texture.
TerrainScene make_flat_scene(double extent, double elevation, int grid_size = 65,
                             uint64_t texture_seed = 1);

// Two plateaus split at x = extent / 2: `low` for x < split, `high` beyond.
TerrainScene make_step_scene(double extent, double low, double high,
                             int grid_size = 65);

// World -> camera rotation of a camera looking straight down: camera x = world
// x, camera y = -world y, camera z = -world z.
Eigen::Matrix3d nadir_camera_to_world();

struct CameraPose {
  Eigen::Vector3d position = Eigen::Vector3d::Zero();          // world, meters
  Eigen::Matrix3d world_to_camera = Eigen::Matrix3d::Identity();
  // Sampled parameters (for diagnostics and statistics).
  double altitude = 0.0;  // above the surface below the camera, meters
  double tilt_x = 0.0;    // radians
  double tilt_y = 0.0;
  double roll = 0.0;

  Eigen::Matrix3d camera_to_world() const { return world_to_camera.transpose(); }
  // Camera-frame point of a world point.
  Eigen::Vector3d to_camera(const Eigen::Vector3d& p_world) const {
    return world_to_camera * (p_world - position);
  }
};

// Camera-to-world rotation for the given tilts and roll, composed as
// nadir * Rx(tilt_x) * Ry(tilt_y) * Rz(roll).
Eigen::Matrix3d compose_orientation(double tilt_x, double tilt_y, double roll);

struct PoseSamplingParams {
  double altitude_min = 1.0;   // meters above the surface
  double altitude_max = 51.0;
  double max_tilt_deg = 22.5;  // per axis, about camera x and y
  double max_roll_deg = 180.0;
  int max_attempts = 1000;
};

// True when every pixel ray hits the terrain inside the scene extent. The
// check is exact-sufficient: the camera is above the surface, all four corner
// rays point downward and meet the plane z = min_height inside the extent.
bool full_coverage(const TerrainScene& scene, const CameraPose& pose,
                   const CameraIntrinsics& intrinsics);

// Rejection-samples a pose until full_coverage holds. Throws
// std::runtime_error after params.max_attempts failures.
CameraPose sample_pose(const TerrainScene& scene,
                       const CameraIntrinsics& intrinsics, uint64_t seed,
                       const PoseSamplingParams& params = {});

// Shading = albedo * (ambient + sun * max(0, n.sun) + lamp * max(0, n.l) * (d_ref / d)^2),
// where the lamp sits at the camera, d is the distance to the lamp and d_ref is
// the median distance over the image (auto exposure).
struct LightingParams {
  double ambient = 0.15;
  double sun = 0.25;
  double lamp = 0.6;
};

struct RenderResult {
  RgbImage rgb;
  DepthMap depth;  // camera-frame z, meters
};

// Ray-casts the heightfield at every pixel center. Throws std::runtime_error
// if any ray misses.
RenderResult render_depth_rgb(const TerrainScene& scene, const CameraPose& pose,
                              const CameraIntrinsics& intrinsics,
                              const LightingParams& lighting = {});

struct CornerFeature {
  double u = 0.0;
  double v = 0.0;
  double score = 0.0;
};

struct CornerParams {
  int window = 5;              // box window of the structure tensor
  double nms_radius = 7.0;     // pixels
  double min_relative_score = 1e-6;
  int refine_radius = 2;       // subpixel refinement window, 0 disables
};

inline constexpr int kDefaultCornerCount = 50;

// Shi-Tomasi corners (minimum eigenvalue of the structure tensor), strongest
// first, at least nms_radius apart. Peak positions are refined to subpixel
// accuracy by gradient orthogonality.
std::vector<CornerFeature> detect_corners(const RgbImage& rgb,
                                          int max_count = kDefaultCornerCount,
                                          const CornerParams& params = {});

// Minimum-eigenvalue response map, exposed for tests.
DepthMap min_eigenvalue_response(const Plane& gray, int window = 5);

// Samples k ~ U[k_min, k_max] corners without replacement and reads their
// ground-truth depth. Throws std::invalid_argument on an empty corner list.
std::vector<PixelObservation> synthesize_radar(
    std::span<const CornerFeature> corners, const DepthMap& depth,
    uint64_t seed, int k_min = 1, int k_max = 5);

// One rendered training tuple.
struct SceneSample {
  CameraPose pose;
  RgbImage rgb;
  DepthMap depth;
  std::vector<CornerFeature> corners;
  uint64_t pose_seed = 0;  // seed of the accepted pose
};

// Samples poses from `seed` onward until the render has at least one corner.
SceneSample generate_sample(const TerrainScene& scene,
                            const CameraIntrinsics& intrinsics, uint64_t seed,
                            const PoseSamplingParams& pose_params = {},
                            int max_corners = kDefaultCornerCount);

}  // namespace radepth
