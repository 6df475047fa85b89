#include "radepth/dataset.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "radepth/csv.hpp"
#include "radepth/kv_config.hpp"
#include "radepth/random.hpp"

namespace radepth {

namespace fs = std::filesystem;
using nlohmann::json;

void SynthConfig::validate() const {
  auto fail = [](const std::string& what) {
    throw std::invalid_argument("invalid synth config: " + what);
  };
  if (num_scenes < 1 || samples_per_scene < 1) fail("scene and sample counts must be >= 1");
  if (width < 2 || height < 2) fail("image size must be at least 2x2");
  if (!(horizontal_fov_deg > 0.0 && horizontal_fov_deg < 180.0)) fail("fov must be in (0, 180)");
  if (radar_k_min < 1 || radar_k_max < radar_k_min) fail("need 1 <= radar_k_min <= radar_k_max");
  if (clutter_returns < 0) fail("clutter_returns must be >= 0");
  if (radar_frames < 1) fail("radar_frames must be >= 1");
  if (!(frame_period_s > 0.0)) fail("frame_period_s must be > 0");
  if (!(scene.scale_min > 0.0 && scene.scale_max >= scene.scale_min)) fail("bad scene scale range");
  if (!(pose.altitude_min > 0.0 && pose.altitude_max >= pose.altitude_min)) fail("bad altitude range");
  if (scene.grid_size < 3) fail("grid_size must be >= 3");
  if (scene.octaves < 1 || scene.detail_octaves < 0) fail("bad octave counts");
  if (!(scene.base_extent > 0.0) || !(scene.relief >= 0.0)) fail("bad terrain extent or relief");
  if (!(pose.max_tilt_deg >= 0.0 && pose.max_tilt_deg < 90.0)) fail("max_tilt_deg must be in [0, 90)");
  if (!(pose.max_roll_deg >= 0.0 && pose.max_roll_deg <= 180.0)) fail("max_roll_deg must be in [0, 180]");
  if (pose.max_attempts < 1) fail("max_attempts must be >= 1");
}

namespace {

template <typename F>
void for_each_field(SynthConfig& c, F&& f) {
  f("num_scenes", c.num_scenes);
  f("samples_per_scene", c.samples_per_scene);
  f("width", c.width);
  f("height", c.height);
  f("horizontal_fov_deg", c.horizontal_fov_deg);
  f("seed", c.seed);
  f("grid_size", c.scene.grid_size);
  f("base_extent", c.scene.base_extent);
  f("relief", c.scene.relief);
  f("octaves", c.scene.octaves);
  f("detail_octaves", c.scene.detail_octaves);
  f("persistence", c.scene.persistence);
  f("scale_min", c.scene.scale_min);
  f("scale_max", c.scene.scale_max);
  f("altitude_min", c.pose.altitude_min);
  f("altitude_max", c.pose.altitude_max);
  f("max_tilt_deg", c.pose.max_tilt_deg);
  f("max_roll_deg", c.pose.max_roll_deg);
  f("max_attempts", c.pose.max_attempts);
  f("radar_k_min", c.radar_k_min);
  f("radar_k_max", c.radar_k_max);
  f("clutter_returns", c.clutter_returns);
  f("radar_frames", c.radar_frames);
  f("frame_period_s", c.frame_period_s);
}

}  // namespace

void apply_synth_override(SynthConfig& config, const std::string& key,
                          const std::string& value) {
  bool found = false;
  for_each_field(config, [&](const char* name, auto& field) {
    if (key != name) return;
    using V = std::decay_t<decltype(field)>;
    std::istringstream in(value);
    V v{};
    in >> v;
    if (in.fail() || !(in >> std::ws).eof()) {
      throw std::invalid_argument("synth config: bad value '" + value + "' for " + key);
    }
    field = v;
    found = true;
  });
  if (!found) throw std::invalid_argument("synth config: unknown key '" + key + "'");
}

SynthConfig read_synth_config(const fs::path& path, SynthConfig defaults) {
  for (const auto& [key, value] : read_key_values(path)) {
    apply_synth_override(defaults, key, value);
  }
  defaults.validate();
  return defaults;
}

CameraIntrinsics make_intrinsics(int width, int height, double horizontal_fov_deg) {
  const double f =
      0.5 * width / std::tan(0.5 * horizontal_fov_deg * std::numbers::pi / 180.0);
  CameraIntrinsics k{f, f, 0.5 * (width - 1), 0.5 * (height - 1), width, height};
  k.validate();
  return k;
}

RigidTransform default_radar_to_camera() {
  RigidTransform t;
  t.rotation = (Eigen::AngleAxisd(0.02, Eigen::Vector3d::UnitX()) *
                Eigen::AngleAxisd(-0.015, Eigen::Vector3d::UnitY()) *
                Eigen::AngleAxisd(0.01, Eigen::Vector3d::UnitZ()))
                   .toRotationMatrix();
  t.translation = Eigen::Vector3d(0.06, -0.03, 0.01);
  return t;
}

namespace {

RgbImage quantize(const RgbImage& rgb) {
  RgbImage out = rgb;
  for (auto& c : out.channels) {
    c = (c.array().max(0.0f).min(1.0f) * 255.0f).round() / 255.0f;
  }
  return out;
}

DepthMap to_float_precision(const DepthMap& d) { return d.cast<float>().cast<double>(); }

std::string sample_id(int scene, int sample) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "s%03d_%05d", scene, sample);
  return buf;
}

}  // namespace

std::vector<RadarReturn> make_radar_log(std::span<const PixelObservation> observations,
                                        const Calibration& calibration, uint64_t seed,
                                        int clutter_returns, int frames, double period_s) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick_frame(0, frames - 1);
  std::uniform_real_distribution<double> strong(kDefaultSnrCutoffDb, 35.0);
  std::uniform_real_distribution<double> weak(0.0, kDefaultSnrCutoffDb - 0.5);
  const RigidTransform camera_to_radar = calibration.radar_to_camera.inverse();
  const CameraIntrinsics& k = calibration.intrinsics;

  std::vector<std::vector<RadarReturn>> per_frame(frames);
  for (const auto& o : observations) {
    const Eigen::Vector3d p_c = k.ray(o.u, o.v) * o.depth;
    const int f = pick_frame(rng);
    per_frame[f].push_back({camera_to_radar * p_c, strong(rng), f * period_s});
  }
  double mean_depth = 10.0;
  if (auto m = radar_mean_depth(observations)) mean_depth = *m;
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> range(0.3, 2.0);
  for (int i = 0; i < clutter_returns; ++i) {
    const Eigen::Vector3d p_c(unit(rng) * mean_depth, unit(rng) * mean_depth,
                              range(rng) * mean_depth);
    const int f = pick_frame(rng);
    per_frame[f].push_back({camera_to_radar * p_c, weak(rng), f * period_s});
  }
  std::vector<RadarReturn> log;
  for (const auto& f : per_frame) log.insert(log.end(), f.begin(), f.end());
  return log;
}

RadarFrameEncoding encode_sample_radar(const DatasetSample& sample,
                                       const Calibration& calibration, int disk_radius) {
  const auto frames = split_frames_by_timestamp(sample.radar_log);
  return encode_radar_frames(frames, calibration.intrinsics, calibration.radar_to_camera,
                             kDefaultSnrCutoffDb, kDefaultAccumulationFrames, disk_radius);
}

Dataset synthesize_dataset(const SynthConfig& config, const std::string& name) {
  config.validate();
  Dataset ds;
  ds.name = name;
  ds.config = config;
  ds.calibration.intrinsics =
      make_intrinsics(config.width, config.height, config.horizontal_fov_deg);
  ds.calibration.radar_to_camera = default_radar_to_camera();

  for (int s = 0; s < config.num_scenes; ++s) {
    const uint64_t scene_seed = derive_seed(config.seed, {0x5CE1Eu, uint64_t(s)});
    const TerrainScene scene = generate_scene(config.scene, scene_seed);
    for (int i = 0; i < config.samples_per_scene; ++i) {
      DatasetSample out;
      out.id = sample_id(s, i);
      out.scene_seed = scene_seed;
      out.radar_seed = derive_seed(config.seed, {0x4ADA4u, uint64_t(s), uint64_t(i)});
      const uint64_t pose_seed = derive_seed(config.seed, {0x9053u, uint64_t(s), uint64_t(i)});
      for (uint64_t attempt = 0; out.corners.empty(); ++attempt) {
        if (attempt == 100) {
          throw std::runtime_error("sample " + out.id + ": no textured view found");
        }
        const SceneSample smp = generate_sample(scene, ds.calibration.intrinsics,
                                                derive_seed(pose_seed, {attempt}), config.pose);
        out.pose_seed = smp.pose_seed;
        out.rgb = quantize(smp.rgb);
        out.depth = to_float_precision(smp.depth);
        // Corners are re-detected on the stored 8-bit image.
        out.corners = detect_corners(out.rgb);
      }
      const auto obs = synthesize_radar(out.corners, out.depth, out.radar_seed,
                                        config.radar_k_min, config.radar_k_max);
      out.radar_log = make_radar_log(obs, ds.calibration, derive_seed(out.radar_seed, {1}),
                                     config.clutter_returns, config.radar_frames,
                                     config.frame_period_s);
      out.observations = encode_sample_radar(out, ds.calibration).observations;
      ds.samples.push_back(std::move(out));
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------

void write_rgb_png(const fs::path& path, const RgbImage& rgb) {
  cv::Mat img(rgb.height(), rgb.width(), CV_8UC3);
  for (int y = 0; y < rgb.height(); ++y) {
    for (int x = 0; x < rgb.width(); ++x) {
      auto& px = img.at<cv::Vec3b>(y, x);
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(rgb.channels[c](y, x), 0.0f, 1.0f);
        px[2 - c] = static_cast<uint8_t>(std::lround(v * 255.0f));
      }
    }
  }
  if (!cv::imwrite(path.string(), img)) throw std::runtime_error("cannot write " + path.string());
}

RgbImage read_rgb_png(const fs::path& path) {
  const cv::Mat img = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (img.empty()) throw std::runtime_error("cannot read image " + path.string());
  RgbImage rgb(img.rows, img.cols);
  for (int y = 0; y < img.rows; ++y) {
    for (int x = 0; x < img.cols; ++x) {
      const auto& px = img.at<cv::Vec3b>(y, x);
      for (int c = 0; c < 3; ++c) rgb.channels[c](y, x) = px[2 - c] / 255.0f;
    }
  }
  return rgb;
}

void write_float_raster(const fs::path& path, const DepthMap& map) {
  cv::Mat img(static_cast<int>(map.rows()), static_cast<int>(map.cols()), CV_32F);
  for (int y = 0; y < img.rows; ++y) {
    for (int x = 0; x < img.cols; ++x) img.at<float>(y, x) = static_cast<float>(map(y, x));
  }
  if (!cv::imwrite(path.string(), img)) throw std::runtime_error("cannot write " + path.string());
}

DepthMap read_float_raster(const fs::path& path) {
  const cv::Mat img = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (img.empty() || img.type() != CV_32F) {
    throw std::runtime_error("cannot read float raster " + path.string());
  }
  DepthMap map(img.rows, img.cols);
  for (int y = 0; y < img.rows; ++y) {
    for (int x = 0; x < img.cols; ++x) map(y, x) = img.at<float>(y, x);
  }
  return map;
}

void write_corners(const fs::path& path, std::span<const CornerFeature> corners) {
  CsvTable t{{"u", "v", "score"}, {}};
  for (const auto& c : corners) t.rows.push_back({c.u, c.v, c.score});
  write_csv(path, t);
}

std::vector<CornerFeature> read_corners(const fs::path& path) {
  const CsvTable t = read_csv(path, {"u", "v", "score"});
  std::vector<CornerFeature> out;
  for (const auto& r : t.rows) out.push_back({r[0], r[1], r[2]});
  return out;
}

namespace {

json synth_config_json(const SynthConfig& c) {
  return {{"num_scenes", c.num_scenes},
          {"samples_per_scene", c.samples_per_scene},
          {"width", c.width},
          {"height", c.height},
          {"horizontal_fov_deg", c.horizontal_fov_deg},
          {"seed", c.seed},
          {"scene",
           {{"grid_size", c.scene.grid_size},
            {"base_extent", c.scene.base_extent},
            {"relief", c.scene.relief},
            {"octaves", c.scene.octaves},
            {"detail_octaves", c.scene.detail_octaves},
            {"persistence", c.scene.persistence},
            {"scale_min", c.scene.scale_min},
            {"scale_max", c.scene.scale_max}}},
          {"pose",
           {{"altitude_min", c.pose.altitude_min},
            {"altitude_max", c.pose.altitude_max},
            {"max_tilt_deg", c.pose.max_tilt_deg},
            {"max_roll_deg", c.pose.max_roll_deg},
            {"max_attempts", c.pose.max_attempts}}},
          {"radar_k_min", c.radar_k_min},
          {"radar_k_max", c.radar_k_max},
          {"clutter_returns", c.clutter_returns},
          {"radar_frames", c.radar_frames},
          {"frame_period_s", c.frame_period_s}};
}

SynthConfig synth_config_from_json(const json& j) {
  SynthConfig c;
  c.num_scenes = j.at("num_scenes");
  c.samples_per_scene = j.at("samples_per_scene");
  c.width = j.at("width");
  c.height = j.at("height");
  c.horizontal_fov_deg = j.at("horizontal_fov_deg");
  c.seed = j.at("seed");
  const auto& s = j.at("scene");
  c.scene.grid_size = s.at("grid_size");
  c.scene.base_extent = s.at("base_extent");
  c.scene.relief = s.at("relief");
  c.scene.octaves = s.at("octaves");
  c.scene.detail_octaves = s.at("detail_octaves");
  c.scene.persistence = s.at("persistence");
  c.scene.scale_min = s.at("scale_min");
  c.scene.scale_max = s.at("scale_max");
  const auto& p = j.at("pose");
  c.pose.altitude_min = p.at("altitude_min");
  c.pose.altitude_max = p.at("altitude_max");
  c.pose.max_tilt_deg = p.at("max_tilt_deg");
  c.pose.max_roll_deg = p.at("max_roll_deg");
  c.pose.max_attempts = p.at("max_attempts");
  c.radar_k_min = j.at("radar_k_min");
  c.radar_k_max = j.at("radar_k_max");
  c.clutter_returns = j.at("clutter_returns");
  c.radar_frames = j.at("radar_frames");
  c.frame_period_s = j.at("frame_period_s");
  return c;
}

}  // namespace

void write_dataset(const fs::path& dir, const Dataset& dataset) {
  fs::create_directories(dir / "samples");
  write_calibration(dir / "calib.json", dataset.calibration);
  json samples = json::array();
  for (const auto& s : dataset.samples) {
    const fs::path rel = fs::path("samples") / s.id;
    fs::create_directories(dir / rel);
    write_rgb_png(dir / rel / "rgb.png", s.rgb);
    write_float_raster(dir / rel / "depth.tiff", s.depth);
    write_corners(dir / rel / "corners.csv", s.corners);
    write_radar_log(dir / rel / "radar_log.csv", s.radar_log);
    write_observations(dir / rel / "observations.csv", s.observations);
    samples.push_back({{"id", s.id},
                       {"scene_seed", s.scene_seed},
                       {"pose_seed", s.pose_seed},
                       {"radar_seed", s.radar_seed},
                       {"rgb", (rel / "rgb.png").generic_string()},
                       {"depth", (rel / "depth.tiff").generic_string()},
                       {"corners", (rel / "corners.csv").generic_string()},
                       {"radar_log", (rel / "radar_log.csv").generic_string()},
                       {"observations", (rel / "observations.csv").generic_string()}});
  }
  const json manifest = {{"name", dataset.name},
                         {"calibration", "calib.json"},
                         {"config", synth_config_json(dataset.config)},
                         {"samples", samples}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << "\n";
  if (!out) throw std::runtime_error("write failed: " + (dir / "manifest.json").string());
}

Dataset read_dataset(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot open dataset manifest " + manifest_path.string());
  Dataset ds;
  try {
    const json m = json::parse(in);
    ds.name = m.at("name");
    ds.config = synth_config_from_json(m.at("config"));
    ds.calibration = read_calibration(dir / m.at("calibration").get<std::string>());
    for (const auto& j : m.at("samples")) {
      DatasetSample s;
      s.id = j.at("id");
      s.scene_seed = j.at("scene_seed");
      s.pose_seed = j.at("pose_seed");
      s.radar_seed = j.at("radar_seed");
      s.rgb = read_rgb_png(dir / j.at("rgb").get<std::string>());
      s.depth = read_float_raster(dir / j.at("depth").get<std::string>());
      s.corners = read_corners(dir / j.at("corners").get<std::string>());
      s.radar_log = read_radar_log(dir / j.at("radar_log").get<std::string>());
      s.observations = read_observations(dir / j.at("observations").get<std::string>());
      ds.samples.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw std::runtime_error("dataset manifest " + manifest_path.string() + ": " + e.what());
  }
  return ds;
}

std::vector<TrainingFrame> training_frames(const Dataset& dataset) {
  std::vector<TrainingFrame> out;
  out.reserve(dataset.samples.size());
  for (const auto& s : dataset.samples) out.push_back({s.rgb, s.depth, s.corners});
  return out;
}

std::vector<ValidationFrame> validation_frames(const Dataset& dataset, int disk_radius) {
  std::vector<ValidationFrame> out;
  out.reserve(dataset.samples.size());
  for (const auto& s : dataset.samples) {
    auto enc = encode_sample_radar(s, dataset.calibration, disk_radius);
    out.push_back({s.id, s.rgb, s.depth, std::move(enc.observations),
                   std::move(enc.sparse_depth)});
  }
  return out;
}

}  // namespace radepth
