#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "radepth/geometry.hpp"
#include "radepth/image.hpp"

namespace radepth {

// One point of the radar point cloud, in the radar frame.
struct RadarReturn {
  Eigen::Vector3d position = Eigen::Vector3d::Zero();  // meters
  double snr_db = 0.0;
  double timestamp = 0.0;  // seconds
};

// A radar return projected into the image, with camera-frame z-depth.
struct PixelObservation {
  double u = 0.0;
  double v = 0.0;
  double depth = 0.0;  // meters
};

// SNR cutoff and accumulation window of the sensor pipeline.
inline constexpr double kDefaultSnrCutoffDb = 15.0;
inline constexpr int kDefaultAccumulationFrames = 3;
inline constexpr int kDefaultDiskRadius = 5;

// Keeps returns with snr_db >= cutoff_db, order preserved.
std::vector<RadarReturn> filter_by_snr(std::span<const RadarReturn> returns,
                                       double cutoff_db = kDefaultSnrCutoffDb);

// Concatenates the last min(window, size) frames, oldest first.
std::vector<RadarReturn> accumulate_frames(
    std::span<const std::vector<RadarReturn>> frames,
    int window = kDefaultAccumulationFrames);

// Pinhole projection: p_c = R p_r + t, u = fx x/z + cx, v = fy y/z + cy.
// Points with z <= 0 or outside [0, width) x [0, height) are dropped.
std::vector<PixelObservation> project_to_image(
    std::span<const RadarReturn> returns, const CameraIntrinsics& intrinsics,
    const RigidTransform& radar_to_camera);

// Paints a disk of the given radius around round(u, v) for every
// observation. Overlapping disks keep the smaller depth; 0 = no observation.
DepthMap rasterize(std::span<const PixelObservation> observations, int height,
                   int width, int radius = kDefaultDiskRadius);

// Mean observation depth, or nullopt when there are no observations.
std::optional<double> radar_mean_depth(
    std::span<const PixelObservation> observations);

// Filter, accumulate, project and rasterize in one go.
struct RadarFrameEncoding {
  std::vector<PixelObservation> observations;
  DepthMap sparse_depth;
};
RadarFrameEncoding encode_radar_frames(
    std::span<const std::vector<RadarReturn>> frames,
    const CameraIntrinsics& intrinsics, const RigidTransform& radar_to_camera,
    double cutoff_db = kDefaultSnrCutoffDb,
    int window = kDefaultAccumulationFrames,
    int radius = kDefaultDiskRadius);

// ---------------------------------------------------------------------------
// File formats.

// Radar log: CSV with header "timestamp_s,x_m,y_m,z_m,snr_db".
std::vector<RadarReturn> read_radar_log(const std::filesystem::path& path);
void write_radar_log(const std::filesystem::path& path,
                     std::span<const RadarReturn> returns);

// Groups returns into frames by identical timestamp, in timestamp order.
std::vector<std::vector<RadarReturn>> split_frames_by_timestamp(
    std::span<const RadarReturn> returns);

// Observation list: CSV with header "u,v,depth".
std::vector<PixelObservation> read_observations(
    const std::filesystem::path& path);
void write_observations(const std::filesystem::path& path,
                        std::span<const PixelObservation> observations);

// Calibration: JSON with an "intrinsics" block (fx, fy, cx, cy, width,
// height) and an "extrinsics" block (row-major 3x3 "rotation", "translation",
// radar -> camera).
struct Calibration {
  CameraIntrinsics intrinsics;
  RigidTransform radar_to_camera;
};
Calibration read_calibration(const std::filesystem::path& path);
void write_calibration(const std::filesystem::path& path,
                       const Calibration& calibration);

}  // namespace radepth
