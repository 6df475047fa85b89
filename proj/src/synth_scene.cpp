#include "radepth/synth_scene.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>

#include "radepth/random.hpp"

namespace radepth {
namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;

double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

// Fractal value noise sampled on an n x n grid, normalized to [0, 1].
Eigen::MatrixXd fractal_noise(int n, int octaves, double persistence,
                              int base_cells, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, n);
  double amplitude = 1.0;
  for (int o = 0; o < octaves; ++o) {
    const int cells = base_cells << o;
    Eigen::MatrixXd lattice(cells + 1, cells + 1);
    for (int i = 0; i < lattice.size(); ++i) lattice.data()[i] = uni(rng);
    for (int i = 0; i < n; ++i) {
      const double fy = static_cast<double>(i) / (n - 1) * cells;
      const int y0 = std::min(static_cast<int>(fy), cells - 1);
      const double ty = smoothstep(fy - y0);
      for (int j = 0; j < n; ++j) {
        const double fx = static_cast<double>(j) / (n - 1) * cells;
        const int x0 = std::min(static_cast<int>(fx), cells - 1);
        const double tx = smoothstep(fx - x0);
        const double top = lattice(y0, x0) * (1 - tx) + lattice(y0, x0 + 1) * tx;
        const double bot =
            lattice(y0 + 1, x0) * (1 - tx) + lattice(y0 + 1, x0 + 1) * tx;
        out(i, j) += amplitude * (top * (1 - ty) + bot * ty);
      }
    }
    amplitude *= persistence;
  }
  const double lo = out.minCoeff();
  const double hi = out.maxCoeff();
  if (hi > lo) out = (out.array() - lo) / (hi - lo);
  return out;
}

RgbImage patchy_albedo(int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  // Three random earthy base colors mixed by low-frequency noise.
  Eigen::Matrix3d palette;
  for (int k = 0; k < 3; ++k) {
    const double base = 0.25 + 0.6 * uni(rng);
    palette.col(k) << base * (0.8 + 0.4 * uni(rng)), base * (0.8 + 0.4 * uni(rng)),
        base * (0.6 + 0.4 * uni(rng));
  }
  const Eigen::MatrixXd mix_a = fractal_noise(n, 4, 0.5, 3, rng);
  const Eigen::MatrixXd mix_b = fractal_noise(n, 4, 0.5, 5, rng);
  const Eigen::MatrixXd detail = fractal_noise(n, 6, 0.7, 8, rng);
  RgbImage albedo(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const double a = smoothstep(std::clamp(2.0 * mix_a(i, j) - 0.5, 0.0, 1.0));
      const double b = smoothstep(std::clamp(2.0 * mix_b(i, j) - 0.5, 0.0, 1.0));
      const Eigen::Vector3d c =
          (palette.col(0) * (1 - a) + palette.col(1) * a) * (1 - b) +
          palette.col(2) * b;
      const double d = 0.6 + 0.8 * detail(i, j);
      for (int ch = 0; ch < 3; ++ch) {
        albedo.channels[ch](i, j) = static_cast<float>(std::clamp(c(ch) * d, 0.0, 1.0));
      }
    }
  }
  return albedo;
}

// Lattice value in [-1, 1] for value noise.
double lattice_value(uint64_t seed, int octave, int64_t ix, int64_t iy) {
  const uint64_t h = derive_seed(seed, {uint64_t(octave), uint64_t(ix), uint64_t(iy)});
  return static_cast<double>(h >> 11) * 0x1.0p-52 - 1.0;
}

double value_noise(uint64_t seed, int octave, double x, double y) {
  const double fx = std::floor(x), fy = std::floor(y);
  const auto ix = static_cast<int64_t>(fx), iy = static_cast<int64_t>(fy);
  const double tx = smoothstep(x - fx), ty = smoothstep(y - fy);
  const double top = lattice_value(seed, octave, ix, iy) * (1 - tx) +
                     lattice_value(seed, octave, ix + 1, iy) * tx;
  const double bot = lattice_value(seed, octave, ix, iy + 1) * (1 - tx) +
                     lattice_value(seed, octave, ix + 1, iy + 1) * tx;
  return top * (1 - ty) + bot * ty;
}

Eigen::Matrix3d rot_x(double a) {
  return Eigen::AngleAxisd(a, Eigen::Vector3d::UnitX()).toRotationMatrix();
}
Eigen::Matrix3d rot_y(double a) {
  return Eigen::AngleAxisd(a, Eigen::Vector3d::UnitY()).toRotationMatrix();
}
Eigen::Matrix3d rot_z(double a) {
  return Eigen::AngleAxisd(a, Eigen::Vector3d::UnitZ()).toRotationMatrix();
}

}  // namespace

double TerrainScene::height_at(double x, double y) const {
  const int n = grid_size();
  const double fx = std::clamp(x / cell_size(), 0.0, static_cast<double>(n - 1));
  const double fy = std::clamp(y / cell_size(), 0.0, static_cast<double>(n - 1));
  const int x0 = std::min(static_cast<int>(fx), n - 2);
  const int y0 = std::min(static_cast<int>(fy), n - 2);
  const double tx = fx - x0;
  const double ty = fy - y0;
  const auto& h = heightfield;
  return (h(y0, x0) * (1 - tx) + h(y0, x0 + 1) * tx) * (1 - ty) +
         (h(y0 + 1, x0) * (1 - tx) + h(y0 + 1, x0 + 1) * tx) * ty;
}

Eigen::Vector3d TerrainScene::normal_at(double x, double y) const {
  const double e = 0.5 * cell_size();
  const double dhdx = (height_at(x + e, y) - height_at(x - e, y)) / (2 * e);
  const double dhdy = (height_at(x, y + e) - height_at(x, y - e)) / (2 * e);
  return Eigen::Vector3d(-dhdx, -dhdy, 1.0).normalized();
}

Eigen::Vector3d TerrainScene::albedo_at(double x, double y) const {
  const int n = grid_size();
  const double fx = std::clamp(x / cell_size(), 0.0, static_cast<double>(n - 1));
  const double fy = std::clamp(y / cell_size(), 0.0, static_cast<double>(n - 1));
  const int x0 = std::min(static_cast<int>(fx), n - 2);
  const int y0 = std::min(static_cast<int>(fy), n - 2);
  const double tx = fx - x0;
  const double ty = fy - y0;
  Eigen::Vector3d c;
  for (int ch = 0; ch < 3; ++ch) {
    const auto& a = albedo.channels[ch];
    c(ch) = (a(y0, x0) * (1 - tx) + a(y0, x0 + 1) * tx) * (1 - ty) +
            (a(y0 + 1, x0) * (1 - tx) + a(y0 + 1, x0 + 1) * tx) * ty;
  }
  if (detail_octaves > 0) {
    double sum = 0.0, norm = 0.0, amplitude = 1.0, freq = 1.0 / cell_size();
    for (int o = 0; o < detail_octaves; ++o) {
      sum += amplitude * value_noise(detail_seed, o, x * freq, y * freq);
      norm += amplitude;
      amplitude *= 0.8;
      freq *= 2.0;
    }
    c *= 1.0 + detail_strength * sum / norm * 2.0;
  }
  return c.cwiseMax(0.0).cwiseMin(1.0);
}

void TerrainScene::validate() const {
  if (!(extent > 0.0)) throw std::invalid_argument("scene extent must be > 0");
  if (heightfield.rows() < 2 || heightfield.rows() != heightfield.cols()) {
    throw std::invalid_argument("heightfield must be square with >= 2 nodes");
  }
  if (!heightfield.allFinite()) {
    throw std::invalid_argument("heightfield elevations must be finite");
  }
  if (albedo.height() != heightfield.rows() || albedo.width() != heightfield.cols()) {
    throw std::invalid_argument("albedo grid must match the heightfield");
  }
}

TerrainScene generate_scene(const SceneParams& params, uint64_t seed) {
  if (params.grid_size < 2 || !(params.base_extent > 0.0) ||
      !(params.scale_min > 0.0) || params.scale_max < params.scale_min) {
    throw std::invalid_argument("generate_scene: invalid parameters");
  }
  std::mt19937_64 rng(derive_seed(seed, {0x5CE7E}));
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const double scale = std::exp(std::log(params.scale_min) +
                                uni(rng) * (std::log(params.scale_max) -
                                            std::log(params.scale_min)));
  TerrainScene scene;
  scene.extent = params.base_extent * scale;
  const Eigen::MatrixXd noise = fractal_noise(
      params.grid_size, params.octaves, params.persistence, 2, rng);
  scene.heightfield = noise * (params.relief * scene.extent);
  scene.albedo = patchy_albedo(params.grid_size, rng);
  scene.detail_octaves = params.detail_octaves;
  scene.detail_seed = rng();
  const double sun_elev = (35.0 + 45.0 * uni(rng)) * kDegToRad;
  const double sun_az = 2.0 * std::numbers::pi * uni(rng);
  scene.sun_direction = {std::cos(sun_elev) * std::cos(sun_az),
                         std::cos(sun_elev) * std::sin(sun_az), std::sin(sun_elev)};
  return scene;
}

TerrainScene make_flat_scene(double extent, double elevation, int grid_size,
                             uint64_t texture_seed) {
  TerrainScene scene;
  scene.extent = extent;
  scene.heightfield = Eigen::MatrixXd::Constant(grid_size, grid_size, elevation);
  std::mt19937_64 rng(texture_seed);
  scene.albedo = patchy_albedo(grid_size, rng);
  scene.sun_direction = Eigen::Vector3d::UnitZ();
  return scene;
}

TerrainScene make_step_scene(double extent, double low, double high,
                             int grid_size) {
  TerrainScene scene = make_flat_scene(extent, low, grid_size);
  for (int j = 0; j < grid_size; ++j) {
    if (j * scene.cell_size() >= 0.5 * extent) scene.heightfield.col(j).setConstant(high);
  }
  return scene;
}

Eigen::Matrix3d nadir_camera_to_world() {
  Eigen::Matrix3d c;
  c.col(0) = Eigen::Vector3d::UnitX();
  c.col(1) = -Eigen::Vector3d::UnitY();
  c.col(2) = -Eigen::Vector3d::UnitZ();
  return c;
}

Eigen::Matrix3d compose_orientation(double tilt_x, double tilt_y, double roll) {
  return nadir_camera_to_world() * rot_x(tilt_x) * rot_y(tilt_y) * rot_z(roll);
}

bool full_coverage(const TerrainScene& scene, const CameraPose& pose,
                   const CameraIntrinsics& intrinsics) {
  const Eigen::Vector3d& p = pose.position;
  if (!scene.contains(p.x(), p.y())) return false;
  if (!(p.z() > scene.height_at(p.x(), p.y()))) return false;
  const double floor_z = scene.min_height();
  const Eigen::Matrix3d c2w = pose.camera_to_world();
  const double us[2] = {0.0, intrinsics.width - 1.0};
  const double vs[2] = {0.0, intrinsics.height - 1.0};
  for (double u : us) {
    for (double v : vs) {
      const Eigen::Vector3d d = c2w * intrinsics.ray(u, v);
      if (!(d.z() < 0.0)) return false;
      const double t = (floor_z - p.z()) / d.z();
      const Eigen::Vector3d hit = p + t * d;
      if (!scene.contains(hit.x(), hit.y())) return false;
    }
  }
  return true;
}

CameraPose sample_pose(const TerrainScene& scene,
                       const CameraIntrinsics& intrinsics, uint64_t seed,
                       const PoseSamplingParams& params) {
  scene.validate();
  intrinsics.validate();
  std::mt19937_64 rng(derive_seed(seed, {0x9053}));
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const double max_tilt = params.max_tilt_deg * kDegToRad;
  const double max_roll = params.max_roll_deg * kDegToRad;
  for (int attempt = 0; attempt < params.max_attempts; ++attempt) {
    CameraPose pose;
    const double x = scene.extent * uni(rng);
    const double y = scene.extent * uni(rng);
    pose.altitude = params.altitude_min +
                    (params.altitude_max - params.altitude_min) * uni(rng);
    pose.position = {x, y, scene.height_at(x, y) + pose.altitude};
    pose.tilt_x = max_tilt * (2.0 * uni(rng) - 1.0);
    pose.tilt_y = max_tilt * (2.0 * uni(rng) - 1.0);
    pose.roll = max_roll * (2.0 * uni(rng) - 1.0);
    pose.world_to_camera =
        compose_orientation(pose.tilt_x, pose.tilt_y, pose.roll).transpose();
    if (full_coverage(scene, pose, intrinsics)) return pose;
  }
  throw std::runtime_error("sample_pose: no fully covered pose after " +
                           std::to_string(params.max_attempts) + " attempts");
}

RenderResult render_depth_rgb(const TerrainScene& scene, const CameraPose& pose,
                              const CameraIntrinsics& intrinsics,
                              const LightingParams& lighting) {
  scene.validate();
  intrinsics.validate();
  const int h = intrinsics.height;
  const int w = intrinsics.width;
  RenderResult out{RgbImage(h, w), DepthMap::Zero(h, w)};
  std::vector<Eigen::Vector3d> hits(static_cast<size_t>(h) * w);
  const Eigen::Matrix3d c2w = pose.camera_to_world();
  const Eigen::Vector3d& p = pose.position;
  const double floor_z = scene.min_height();
  const double ceil_z = scene.max_height();
  const double half_cell = 0.5 * scene.cell_size();

  auto gap = [&](const Eigen::Vector3d& d, double t) {
    const Eigen::Vector3d q = p + t * d;
    return q.z() - scene.height_at(q.x(), q.y());
  };

  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      // With a z = 1 camera ray, the ray parameter equals camera z-depth.
      const Eigen::Vector3d d = c2w * intrinsics.ray(u, v);
      if (!(d.z() < 0.0)) {
        throw std::runtime_error("render: ray does not descend towards the terrain");
      }
      const double t_end = (floor_z - p.z()) / d.z();
      const Eigen::Vector3d end = p + t_end * d;
      if (!scene.contains(end.x(), end.y()) || !(gap(d, 0.0) > 0.0)) {
        throw std::runtime_error("render: ray misses the terrain");
      }
      double t0 = std::max(0.0, (ceil_z - p.z()) / d.z());
      const double horizontal = std::hypot(d.x(), d.y());
      double step = t_end - t0;
      if (horizontal > 0.0) step = std::min(step, half_cell / horizontal);
      step = std::max(step, 1e-12);
      double t1 = t0;
      while (true) {
        t1 = std::min(t0 + step, t_end);
        if (gap(d, t1) <= 0.0) break;
        if (t1 >= t_end) break;
        t0 = t1;
      }
      for (int it = 0; it < 64; ++it) {
        const double mid = 0.5 * (t0 + t1);
        if (gap(d, mid) > 0.0) {
          t0 = mid;
        } else {
          t1 = mid;
        }
      }
      const double t = 0.5 * (t0 + t1);
      hits[static_cast<size_t>(v) * w + u] = p + t * d;
      out.depth(v, u) = t;
    }
  }

  std::vector<double> dist(hits.size());
  for (size_t i = 0; i < hits.size(); ++i) dist[i] = (p - hits[i]).norm();
  std::vector<double> sorted = dist;
  std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
  const double d_ref = sorted[sorted.size() / 2];
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      const size_t i = static_cast<size_t>(v) * w + u;
      const Eigen::Vector3d& hit = hits[i];
      const Eigen::Vector3d n = scene.normal_at(hit.x(), hit.y());
      const Eigen::Vector3d to_lamp = (p - hit) / dist[i];
      const double falloff = (d_ref / dist[i]) * (d_ref / dist[i]);
      const double shade = lighting.ambient +
                           lighting.sun * std::max(0.0, n.dot(scene.sun_direction)) +
                           lighting.lamp * std::max(0.0, n.dot(to_lamp)) * falloff;
      const Eigen::Vector3d c = scene.albedo_at(hit.x(), hit.y()) * shade;
      for (int ch = 0; ch < 3; ++ch) {
        out.rgb.channels[ch](v, u) = static_cast<float>(std::clamp(c(ch), 0.0, 1.0));
      }
    }
  }
  return out;
}

DepthMap min_eigenvalue_response(const Plane& gray, int window) {
  const int h = static_cast<int>(gray.rows());
  const int w = static_cast<int>(gray.cols());
  DepthMap ixx = DepthMap::Zero(h, w);
  DepthMap iyy = DepthMap::Zero(h, w);
  DepthMap ixy = DepthMap::Zero(h, w);
  for (int y = 1; y + 1 < h; ++y) {
    for (int x = 1; x + 1 < w; ++x) {
      const double gx = 0.5 * (double(gray(y, x + 1)) - double(gray(y, x - 1)));
      const double gy = 0.5 * (double(gray(y + 1, x)) - double(gray(y - 1, x)));
      ixx(y, x) = gx * gx;
      iyy(y, x) = gy * gy;
      ixy(y, x) = gx * gy;
    }
  }
  const int r = window / 2;
  DepthMap response = DepthMap::Zero(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double a = 0.0, b = 0.0, c = 0.0;
      for (int yy = std::max(0, y - r); yy <= std::min(h - 1, y + r); ++yy) {
        for (int xx = std::max(0, x - r); xx <= std::min(w - 1, x + r); ++xx) {
          a += ixx(yy, xx);
          b += ixy(yy, xx);
          c += iyy(yy, xx);
        }
      }
      const double half_trace = 0.5 * (a + c);
      const double disc = std::sqrt(0.25 * (a - c) * (a - c) + b * b);
      response(y, x) = std::max(0.0, half_trace - disc);
    }
  }
  return response;
}

namespace {

// Moves the corner to the point q minimizing sum (g . (q - p))^2 over the
// window, where g is the image gradient at pixel p.
void refine_corner(const Plane& gray, CornerFeature& corner, int radius) {
  const int h = static_cast<int>(gray.rows());
  const int w = static_cast<int>(gray.cols());
  const int cx = static_cast<int>(corner.u), cy = static_cast<int>(corner.v);
  Eigen::Matrix2d a = Eigen::Matrix2d::Zero();
  Eigen::Vector2d b = Eigen::Vector2d::Zero();
  for (int y = std::max(1, cy - radius); y <= std::min(h - 2, cy + radius); ++y) {
    for (int x = std::max(1, cx - radius); x <= std::min(w - 2, cx + radius); ++x) {
      const Eigen::Vector2d g(0.5 * (double(gray(y, x + 1)) - double(gray(y, x - 1))),
                              0.5 * (double(gray(y + 1, x)) - double(gray(y - 1, x))));
      const Eigen::Matrix2d gg = g * g.transpose();
      a += gg;
      b += gg * Eigen::Vector2d(x, y);
    }
  }
  const double det = a.determinant();
  if (!(det > 1e-12 * a.trace() * a.trace())) return;
  const Eigen::Vector2d q = a.inverse() * b;
  if (std::abs(q.x() - cx) > radius || std::abs(q.y() - cy) > radius) return;
  corner.u = std::clamp(q.x(), 0.0, double(w - 1));
  corner.v = std::clamp(q.y(), 0.0, double(h - 1));
}

}  // namespace

std::vector<CornerFeature> detect_corners(const RgbImage& rgb, int max_count,
                                          const CornerParams& params) {
  if (rgb.empty()) throw std::invalid_argument("detect_corners: empty image");
  if (max_count <= 0) return {};
  const Plane gray = rgb.grayscale();
  const DepthMap response = min_eigenvalue_response(gray, params.window);
  const int h = static_cast<int>(response.rows());
  const int w = static_cast<int>(response.cols());
  const double max_score = response.maxCoeff();
  if (!(max_score > 0.0)) return {};
  const double threshold = params.min_relative_score * max_score;

  // Local maxima over the 3x3 neighborhood.
  std::vector<CornerFeature> candidates;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double s = response(y, x);
      if (!(s > threshold)) continue;
      bool is_max = true;
      for (int dy = -1; dy <= 1 && is_max; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if ((dy == 0 && dx == 0) || yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          if (response(yy, xx) > s) {
            is_max = false;
            break;
          }
        }
      }
      if (is_max) candidates.push_back({double(x), double(y), s});
    }
  }
  if (params.refine_radius > 0) {
    for (auto& c : candidates) refine_corner(gray, c, params.refine_radius);
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const CornerFeature& a, const CornerFeature& b) {
                     return a.score > b.score;
                   });

  const double r2 = params.nms_radius * params.nms_radius;
  std::vector<CornerFeature> corners;
  for (const auto& cand : candidates) {
    if (static_cast<int>(corners.size()) >= max_count) break;
    const bool suppressed =
        std::any_of(corners.begin(), corners.end(), [&](const CornerFeature& c) {
          const double du = c.u - cand.u, dv = c.v - cand.v;
          return du * du + dv * dv <= r2;
        });
    if (!suppressed) corners.push_back(cand);
  }
  return corners;
}

std::vector<PixelObservation> synthesize_radar(
    std::span<const CornerFeature> corners, const DepthMap& depth,
    uint64_t seed, int k_min, int k_max) {
  if (corners.empty()) throw std::invalid_argument("synthesize_radar: no corners");
  if (k_min < 1 || k_max < k_min) {
    throw std::invalid_argument("synthesize_radar: need 1 <= k_min <= k_max");
  }
  std::mt19937_64 rng(derive_seed(seed, {0x7AD4}));
  const int k = std::min<int>(std::uniform_int_distribution<int>(k_min, k_max)(rng),
                              static_cast<int>(corners.size()));
  std::vector<size_t> idx(corners.size());
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::vector<PixelObservation> out;
  out.reserve(k);
  for (int i = 0; i < k; ++i) {
    const size_t j =
        std::uniform_int_distribution<size_t>(static_cast<size_t>(i), idx.size() - 1)(rng);
    std::swap(idx[i], idx[j]);
    const auto& c = corners[idx[i]];
    const long row = std::lround(c.v);
    const long col = std::lround(c.u);
    if (row < 0 || row >= depth.rows() || col < 0 || col >= depth.cols()) {
      throw std::invalid_argument("synthesize_radar: corner outside the depth image");
    }
    out.push_back({c.u, c.v, depth(row, col)});
  }
  return out;
}

SceneSample generate_sample(const TerrainScene& scene,
                            const CameraIntrinsics& intrinsics, uint64_t seed,
                            const PoseSamplingParams& pose_params,
                            int max_corners) {
  for (uint64_t attempt = 0; attempt < 1000; ++attempt) {
    SceneSample sample;
    sample.pose_seed = derive_seed(seed, {attempt});
    sample.pose = sample_pose(scene, intrinsics, sample.pose_seed, pose_params);
    auto render = render_depth_rgb(scene, sample.pose, intrinsics);
    sample.corners = detect_corners(render.rgb, max_corners);
    if (sample.corners.empty()) continue;
    sample.rgb = std::move(render.rgb);
    sample.depth = std::move(render.depth);
    return sample;
  }
  throw std::runtime_error("generate_sample: no render with corners");
}

}  // namespace radepth
