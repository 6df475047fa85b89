#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "radepth/calib_radar.hpp"
#include "radepth/synth_scene.hpp"
#include "radepth/train_loop.hpp"

namespace radepth {

struct SynthConfig {
  int num_scenes = 10;
  int samples_per_scene = 1000;
  int width = 640;
  int height = 480;
  double horizontal_fov_deg = 60.0;
  uint64_t seed = 0;
  SceneParams scene;
  PoseSamplingParams pose;
  // Radar returns per frame: k ~ U[k_min, k_max] corner returns plus
  // `clutter_returns` sub-threshold returns, spread over `radar_frames`
  // timestamps.
  int radar_k_min = 1;
  int radar_k_max = 5;
  int clutter_returns = 4;
  int radar_frames = kDefaultAccumulationFrames;
  double frame_period_s = 0.05;

  void validate() const;
};

// Key names are the field names; scene and pose fields use their own names
// (grid_size, relief, altitude_min, max_tilt_deg, ...).
void apply_synth_override(SynthConfig& config, const std::string& key, const std::string& value);
SynthConfig read_synth_config(const std::filesystem::path& path, SynthConfig defaults = {});

// Centered pinhole camera with square pixels.
CameraIntrinsics make_intrinsics(int width, int height, double horizontal_fov_deg);

// Radar mounted next to the camera, slightly rotated.
RigidTransform default_radar_to_camera();

struct DatasetSample {
  std::string id;
  uint64_t scene_seed = 0;
  uint64_t pose_seed = 0;
  uint64_t radar_seed = 0;
  RgbImage rgb;    // 8-bit quantized
  DepthMap depth;  // float32 precision, meters
  std::vector<CornerFeature> corners;
  std::vector<RadarReturn> radar_log;  // radar frame, all frames
  std::vector<PixelObservation> observations;  // encoded from radar_log
};

struct Dataset {
  std::string name;
  Calibration calibration;
  SynthConfig config;
  std::vector<DatasetSample> samples;
};

// Renders the whole dataset in memory. Deterministic given config.seed.
Dataset synthesize_dataset(const SynthConfig& config, const std::string& name = "synthetic");

// Radar log of one sample: the given observations lifted into the radar
// frame, plus clutter below the SNR cutoff, over several timestamps.
std::vector<RadarReturn> make_radar_log(std::span<const PixelObservation> observations,
                                        const Calibration& calibration, uint64_t seed,
                                        int clutter_returns, int frames, double period_s);

// Directory layout:
//   manifest.json, calib.json,
//   samples/<id>/{rgb.png, depth.tiff, corners.csv, radar_log.csv, observations.csv}
void write_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& dir);

// Re-encodes a sample's radar log with the dataset calibration.
RadarFrameEncoding encode_sample_radar(const DatasetSample& sample,
                                       const Calibration& calibration,
                                       int disk_radius = kDefaultDiskRadius);

std::vector<TrainingFrame> training_frames(const Dataset& dataset);
std::vector<ValidationFrame> validation_frames(const Dataset& dataset,
                                               int disk_radius = kDefaultDiskRadius);

// Image I/O.
void write_rgb_png(const std::filesystem::path& path, const RgbImage& rgb);
RgbImage read_rgb_png(const std::filesystem::path& path);
void write_float_raster(const std::filesystem::path& path, const DepthMap& map);
DepthMap read_float_raster(const std::filesystem::path& path);

void write_corners(const std::filesystem::path& path, std::span<const CornerFeature> corners);
std::vector<CornerFeature> read_corners(const std::filesystem::path& path);

}  // namespace radepth
