#include "radepth/calib_radar.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "radepth/csv.hpp"

namespace radepth {

void CameraIntrinsics::validate() const {
  if (!is_valid()) {
    throw std::invalid_argument(
        "invalid intrinsics: need fx, fy > 0, 0 < cx < width, 0 < cy < height");
  }
}

void RigidTransform::validate() const {
  if (!is_valid()) {
    throw std::invalid_argument(
        "invalid rigid transform: rotation must be orthonormal with det +1");
  }
}

std::vector<RadarReturn> filter_by_snr(std::span<const RadarReturn> returns,
                                       double cutoff_db) {
  if (!std::isfinite(cutoff_db)) {
    throw std::invalid_argument("filter_by_snr: cutoff must be finite");
  }
  std::vector<RadarReturn> kept;
  kept.reserve(returns.size());
  std::copy_if(returns.begin(), returns.end(), std::back_inserter(kept),
               [cutoff_db](const RadarReturn& r) { return r.snr_db >= cutoff_db; });
  return kept;
}

std::vector<RadarReturn> accumulate_frames(
    std::span<const std::vector<RadarReturn>> frames, int window) {
  if (window < 1) {
    throw std::invalid_argument("accumulate_frames: window must be >= 1");
  }
  const size_t take = std::min(frames.size(), static_cast<size_t>(window));
  std::vector<RadarReturn> out;
  for (size_t i = frames.size() - take; i < frames.size(); ++i) {
    out.insert(out.end(), frames[i].begin(), frames[i].end());
  }
  return out;
}

std::vector<PixelObservation> project_to_image(
    std::span<const RadarReturn> returns, const CameraIntrinsics& intrinsics,
    const RigidTransform& radar_to_camera) {
  intrinsics.validate();
  radar_to_camera.validate();

  const int n = static_cast<int>(returns.size());
  Eigen::Matrix3Xd points(3, n);
  for (int i = 0; i < n; ++i) points.col(i) = returns[i].position;

  // K [R | t] P, batched.
  Eigen::Matrix3d k = Eigen::Matrix3d::Identity();
  k(0, 0) = intrinsics.fx;
  k(1, 1) = intrinsics.fy;
  k(0, 2) = intrinsics.cx;
  k(1, 2) = intrinsics.cy;
  const Eigen::Matrix3Xd camera =
      (radar_to_camera.rotation * points).colwise() +
      radar_to_camera.translation;
  const Eigen::Matrix3Xd homogeneous = k * camera;

  std::vector<PixelObservation> out;
  out.reserve(returns.size());
  for (int i = 0; i < n; ++i) {
    const double z = camera(2, i);
    if (!(z > 0.0)) continue;
    const double u = homogeneous(0, i) / z;
    const double v = homogeneous(1, i) / z;
    if (!(u >= 0.0 && u < intrinsics.width && v >= 0.0 &&
          v < intrinsics.height)) {
      continue;
    }
    out.push_back({u, v, z});
  }
  return out;
}

DepthMap rasterize(std::span<const PixelObservation> observations, int height,
                   int width, int radius) {
  if (radius < 0) throw std::invalid_argument("rasterize: radius must be >= 0");
  if (height <= 0 || width <= 0) {
    throw std::invalid_argument("rasterize: image shape must be positive");
  }
  DepthMap grid = DepthMap::Zero(height, width);
  const int r2 = radius * radius;
  for (const auto& obs : observations) {
    const long cu = std::lround(obs.u);
    const long cv = std::lround(obs.v);
    for (long y = std::max(0L, cv - radius);
         y <= std::min<long>(height - 1, cv + radius); ++y) {
      for (long x = std::max(0L, cu - radius);
           x <= std::min<long>(width - 1, cu + radius); ++x) {
        const long dx = x - cu;
        const long dy = y - cv;
        if (dx * dx + dy * dy > r2) continue;
        double& px = grid(y, x);
        if (px == 0.0 || obs.depth < px) px = obs.depth;
      }
    }
  }
  return grid;
}

std::optional<double> radar_mean_depth(
    std::span<const PixelObservation> observations) {
  if (observations.empty()) return std::nullopt;
  double sum = 0.0;
  for (const auto& obs : observations) sum += obs.depth;
  return sum / static_cast<double>(observations.size());
}

RadarFrameEncoding encode_radar_frames(
    std::span<const std::vector<RadarReturn>> frames,
    const CameraIntrinsics& intrinsics, const RigidTransform& radar_to_camera,
    double cutoff_db, int window, int radius) {
  std::vector<std::vector<RadarReturn>> filtered;
  filtered.reserve(frames.size());
  for (const auto& frame : frames) filtered.push_back(filter_by_snr(frame, cutoff_db));
  const auto accumulated = accumulate_frames(filtered, window);
  RadarFrameEncoding enc;
  enc.observations = project_to_image(accumulated, intrinsics, radar_to_camera);
  enc.sparse_depth =
      rasterize(enc.observations, intrinsics.height, intrinsics.width, radius);
  return enc;
}

// ---------------------------------------------------------------------------

std::vector<RadarReturn> read_radar_log(const std::filesystem::path& path) {
  const CsvTable table =
      read_csv(path, {"timestamp_s", "x_m", "y_m", "z_m", "snr_db"});
  std::vector<RadarReturn> out;
  out.reserve(table.rows.size());
  for (const auto& row : table.rows) {
    RadarReturn r;
    r.timestamp = row[0];
    r.position = {row[1], row[2], row[3]};
    r.snr_db = row[4];
    if (!r.position.allFinite() || !std::isfinite(r.snr_db)) {
      throw std::runtime_error("radar log " + path.string() +
                               ": non-finite position or SNR");
    }
    out.push_back(r);
  }
  return out;
}

void write_radar_log(const std::filesystem::path& path,
                     std::span<const RadarReturn> returns) {
  CsvTable table;
  table.header = {"timestamp_s", "x_m", "y_m", "z_m", "snr_db"};
  for (const auto& r : returns) {
    table.rows.push_back({r.timestamp, r.position.x(), r.position.y(),
                          r.position.z(), r.snr_db});
  }
  write_csv(path, table);
}

std::vector<std::vector<RadarReturn>> split_frames_by_timestamp(
    std::span<const RadarReturn> returns) {
  std::map<double, std::vector<RadarReturn>> by_time;
  for (const auto& r : returns) by_time[r.timestamp].push_back(r);
  std::vector<std::vector<RadarReturn>> frames;
  frames.reserve(by_time.size());
  for (auto& [t, frame] : by_time) frames.push_back(std::move(frame));
  return frames;
}

std::vector<PixelObservation> read_observations(
    const std::filesystem::path& path) {
  const CsvTable table = read_csv(path, {"u", "v", "depth"});
  std::vector<PixelObservation> out;
  out.reserve(table.rows.size());
  for (const auto& row : table.rows) out.push_back({row[0], row[1], row[2]});
  return out;
}

void write_observations(const std::filesystem::path& path,
                        std::span<const PixelObservation> observations) {
  CsvTable table;
  table.header = {"u", "v", "depth"};
  for (const auto& o : observations) table.rows.push_back({o.u, o.v, o.depth});
  write_csv(path, table);
}

Calibration read_calibration(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open calibration " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("calibration " + path.string() + ": " + e.what());
  }
  Calibration calib;
  try {
    const auto& in_j = j.at("intrinsics");
    calib.intrinsics.fx = in_j.at("fx");
    calib.intrinsics.fy = in_j.at("fy");
    calib.intrinsics.cx = in_j.at("cx");
    calib.intrinsics.cy = in_j.at("cy");
    calib.intrinsics.width = in_j.at("width");
    calib.intrinsics.height = in_j.at("height");
    const auto& ex = j.at("extrinsics");
    const std::vector<double> rot = ex.at("rotation");
    const std::vector<double> trans = ex.at("translation");
    if (rot.size() != 9 || trans.size() != 3) {
      throw std::runtime_error("extrinsics need 9 rotation and 3 translation values");
    }
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) calib.radar_to_camera.rotation(r, c) = rot[3 * r + c];
      calib.radar_to_camera.translation(r) = trans[r];
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("calibration " + path.string() + ": " + e.what());
  }
  calib.intrinsics.validate();
  calib.radar_to_camera.validate();
  return calib;
}

void write_calibration(const std::filesystem::path& path,
                       const Calibration& calibration) {
  const auto& k = calibration.intrinsics;
  const auto& e = calibration.radar_to_camera;
  nlohmann::json j;
  j["intrinsics"] = {{"fx", k.fx}, {"fy", k.fy},        {"cx", k.cx},
                     {"cy", k.cy}, {"width", k.width}, {"height", k.height}};
  std::vector<double> rot;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) rot.push_back(e.rotation(r, c));
  j["extrinsics"] = {{"rotation", rot},
                     {"translation",
                      {e.translation.x(), e.translation.y(), e.translation.z()}}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write calibration " + path.string());
  out << j.dump(2) << "\n";
}

}  // namespace radepth
