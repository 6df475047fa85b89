#include "radepth/eval_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "radepth/csv.hpp"

namespace radepth {
namespace {

void check_shapes(const DepthMap& pred, const DepthMap& gt, const Mask& mask) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols() || mask.rows() != gt.rows() ||
      mask.cols() != gt.cols()) {
    throw std::invalid_argument("metrics: pred, gt and mask must have the same shape");
  }
}

}  // namespace

void MetricAccumulator::add(const DepthMap& pred, const DepthMap& gt, const Mask& mask,
                            double threshold) {
  check_shapes(pred, gt, mask);
  for (Eigen::Index i = 0; i < gt.size(); ++i) {
    if (!mask.data()[i]) continue;
    const double g = gt.data()[i];
    const double p = pred.data()[i];
    if (!(g > 0.0) || !std::isfinite(g)) {
      throw std::invalid_argument("metrics: ground truth must be finite and > 0 on the mask");
    }
    const double err = p - g;
    sum_abs_rel_ += std::abs(err) / g;
    sum_sq_ += err * err;
    if (p > 0.0 && std::max(g / p, p / g) < threshold) ++within_;
    ++count_;
  }
}

void MetricAccumulator::merge(const MetricAccumulator& other) {
  sum_abs_rel_ += other.sum_abs_rel_;
  sum_sq_ += other.sum_sq_;
  within_ += other.within_;
  count_ += other.count_;
}

double MetricAccumulator::abs_rel() const {
  if (count_ == 0) throw std::invalid_argument("metrics: empty mask");
  return sum_abs_rel_ / static_cast<double>(count_);
}

double MetricAccumulator::delta1() const {
  if (count_ == 0) throw std::invalid_argument("metrics: empty mask");
  return static_cast<double>(within_) / static_cast<double>(count_);
}

double MetricAccumulator::rmse() const {
  if (count_ == 0) throw std::invalid_argument("metrics: empty mask");
  return std::sqrt(sum_sq_ / static_cast<double>(count_));
}

double abs_rel(const DepthMap& pred, const DepthMap& gt, const Mask& mask) {
  MetricAccumulator acc;
  acc.add(pred, gt, mask);
  return acc.abs_rel();
}

double delta1(const DepthMap& pred, const DepthMap& gt, const Mask& mask, double threshold) {
  check_shapes(pred, gt, mask);
  for (Eigen::Index i = 0; i < gt.size(); ++i) {
    if (mask.data()[i] && !(pred.data()[i] > 0.0)) {
      throw std::invalid_argument("delta1: prediction must be > 0 on the mask");
    }
  }
  MetricAccumulator acc;
  acc.add(pred, gt, mask, threshold);
  return acc.delta1();
}

double rmse(const DepthMap& pred, const DepthMap& gt, const Mask& mask) {
  check_shapes(pred, gt, mask);
  size_t n = 0;
  double sum = 0.0;
  for (Eigen::Index i = 0; i < gt.size(); ++i) {
    if (!mask.data()[i]) continue;
    const double e = pred.data()[i] - gt.data()[i];
    sum += e * e;
    ++n;
  }
  if (n == 0) throw std::invalid_argument("rmse: empty mask");
  return std::sqrt(sum / static_cast<double>(n));
}

MetricsReport evaluate(std::span<const EvalFrame> frames) {
  MetricAccumulator pooled;
  MetricsReport report;
  for (const auto& f : frames) {
    MetricAccumulator frame;
    frame.add(f.pred, f.gt, f.mask);
    double gt_sum = 0.0;
    for (Eigen::Index i = 0; i < f.gt.size(); ++i) {
      if (f.mask.data()[i]) gt_sum += f.gt.data()[i];
    }
    report.per_frame.push_back(
        {f.frame_id, gt_sum / static_cast<double>(frame.count()), frame.abs_rel()});
    pooled.merge(frame);
  }
  report.abs_rel = pooled.abs_rel();
  report.delta1 = pooled.delta1();
  report.rmse = pooled.rmse();
  report.n_frames = frames.size();
  return report;
}

DatasetSummary dataset_summary(std::span<const SummaryFrame> frames) {
  if (frames.empty()) throw std::invalid_argument("dataset_summary: no frames");
  double count_sum = 0.0;
  double coverage_sum = 0.0;
  for (const auto& f : frames) {
    if (f.gt_mask.size() == 0) throw std::invalid_argument("dataset_summary: empty mask");
    count_sum += static_cast<double>(f.observation_count);
    coverage_sum += 100.0 * static_cast<double>(f.gt_mask.count()) /
                    static_cast<double>(f.gt_mask.size());
  }
  const double n = static_cast<double>(frames.size());
  return {count_sum / n, coverage_sum / n, frames.size()};
}

std::vector<std::pair<double, double>> error_vs_depth(std::span<const EvalFrame> frames,
                                                      int subsample) {
  if (subsample < 1) throw std::invalid_argument("error_vs_depth: subsample must be >= 1");
  std::vector<std::pair<double, double>> out;
  for (size_t i = 0; i < frames.size(); i += static_cast<size_t>(subsample)) {
    const auto& f = frames[i];
    MetricAccumulator acc;
    acc.add(f.pred, f.gt, f.mask);
    double gt_sum = 0.0;
    for (Eigen::Index k = 0; k < f.gt.size(); ++k) {
      if (f.mask.data()[k]) gt_sum += f.gt.data()[k];
    }
    out.emplace_back(gt_sum / static_cast<double>(acc.count()), acc.abs_rel());
  }
  return out;
}

// ---------------------------------------------------------------------------

void write_report_json(const std::filesystem::path& path, const MetricsReport& report,
                       const std::string& model, const std::string& dataset) {
  nlohmann::json j;
  j["model"] = model;
  j["dataset"] = dataset;
  j["absrel"] = report.abs_rel;
  j["delta1"] = report.delta1;
  j["rmse"] = report.rmse;
  j["n_frames"] = report.n_frames;
  nlohmann::json frames = nlohmann::json::array();
  for (const auto& f : report.per_frame) {
    frames.push_back({{"frame_id", f.frame_id},
                      {"mean_scene_depth", f.mean_scene_depth},
                      {"absrel", f.abs_rel}});
  }
  j["per_frame"] = frames;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

ReportRow read_report_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
    ReportRow row{j.at("model"), j.at("dataset"), {}};
    MetricsReport& r = row.report;
    r.abs_rel = j.at("absrel");
    r.delta1 = j.at("delta1");
    r.rmse = j.at("rmse");
    r.n_frames = j.at("n_frames");
    for (const auto& f : j.at("per_frame")) {
      r.per_frame.push_back({f.at("frame_id"), f.at("mean_scene_depth"), f.at("absrel")});
    }
    return row;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

std::string format_results_table(std::span<const ReportRow> rows,
                                 const std::string& reference_model) {
  std::map<std::string, double> reference;
  for (const auto& r : rows) {
    if (r.model == reference_model) reference[r.dataset] = r.report.abs_rel;
  }
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-20s %-20s %9s %9s %9s %11s\n", "Dataset", "Model",
                "AbsRel", "delta1", "RMSE", "dAbsRel[%]");
  out << line;
  for (const auto& r : rows) {
    std::string rel = "-";
    const auto it = reference.find(r.dataset);
    if (it != reference.end() && r.model != reference_model && it->second > 0.0) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%+.1f", 100.0 * (r.report.abs_rel - it->second) / it->second);
      rel = buf;
    }
    std::snprintf(line, sizeof(line), "%-20s %-20s %9.3f %9.3f %9.3f %11s\n", r.dataset.c_str(),
                  r.model.c_str(), r.report.abs_rel, r.report.delta1, r.report.rmse, rel.c_str());
    out << line;
  }
  return out.str();
}

std::string format_summary_table(
    std::span<const std::pair<std::string, DatasetSummary>> rows) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-20s %14s %20s %9s\n", "Dataset", "# Sparse Depth",
                "% Depth GT Coverage", "# Frames");
  out << line;
  for (const auto& [name, s] : rows) {
    std::snprintf(line, sizeof(line), "%-20s %14.2f %20.2f %9zu\n", name.c_str(),
                  s.avg_sparse_depth_count, s.gt_coverage_percent, s.n_frames);
    out << line;
  }
  return out.str();
}

void write_error_series(const std::filesystem::path& path,
                        std::span<const std::pair<double, double>> series) {
  CsvTable t;
  t.header = {"mean_scene_depth", "abs_rel"};
  for (const auto& [x, y] : series) t.rows.push_back({x, y});
  write_csv(path, t);
}

std::vector<std::pair<double, double>> read_error_series(const std::filesystem::path& path) {
  const CsvTable t = read_csv(path, {"mean_scene_depth", "abs_rel"});
  std::vector<std::pair<double, double>> out;
  for (const auto& r : t.rows) out.emplace_back(r[0], r[1]);
  return out;
}

void render_error_plot(const std::filesystem::path& path, std::span<const PlotSeries> series,
                       int width, int height) {
  double x_max = 1e-9, y_max = 1e-9;
  for (const auto& s : series) {
    for (const auto& [x, y] : s.points) {
      x_max = std::max(x_max, x);
      y_max = std::max(y_max, y);
    }
  }
  x_max *= 1.05;
  y_max *= 1.05;
  cv::Mat img(height, width, CV_8UC3, cv::Scalar(255, 255, 255));
  const int left = 60, right = 20, top = 20, bottom = 45;
  const cv::Point origin(left, height - bottom);
  cv::line(img, origin, {width - right, height - bottom}, cv::Scalar(0, 0, 0), 1);
  cv::line(img, origin, {left, top}, cv::Scalar(0, 0, 0), 1);
  cv::putText(img, "mean scene depth [m]", {width / 2 - 80, height - 10},
              cv::FONT_HERSHEY_SIMPLEX, 0.45, cv::Scalar(0, 0, 0), 1);
  cv::putText(img, "AbsRel", {5, top + 10}, cv::FONT_HERSHEY_SIMPLEX, 0.45,
              cv::Scalar(0, 0, 0), 1);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f", x_max);
  cv::putText(img, buf, {width - right - 40, height - bottom + 15}, cv::FONT_HERSHEY_SIMPLEX,
              0.4, cv::Scalar(0, 0, 0), 1);
  std::snprintf(buf, sizeof(buf), "%.2f", y_max);
  cv::putText(img, buf, {5, top + 30}, cv::FONT_HERSHEY_SIMPLEX, 0.4, cv::Scalar(0, 0, 0), 1);
  const cv::Scalar palette[] = {{200, 60, 30}, {30, 30, 200}, {40, 160, 40}, {150, 40, 150}};
  for (size_t k = 0; k < series.size(); ++k) {
    const cv::Scalar color = palette[k % 4];
    for (const auto& [x, y] : series[k].points) {
      const int px = left + static_cast<int>((width - left - right) * x / x_max);
      const int py = height - bottom - static_cast<int>((height - top - bottom) * y / y_max);
      cv::circle(img, {px, py}, 3, color, cv::FILLED);
    }
    cv::putText(img, series[k].label, {width - right - 160, top + 15 + 18 * static_cast<int>(k)},
                cv::FONT_HERSHEY_SIMPLEX, 0.45, color, 1);
  }
  if (!cv::imwrite(path.string(), img)) {
    throw std::runtime_error("cannot write plot " + path.string());
  }
}

}  // namespace radepth
