#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "radepth/image.hpp"

namespace radepth {

inline constexpr double kDeltaThreshold = 1.25;

// Mean of |pred - gt| / gt over the mask.
double abs_rel(const DepthMap& pred, const DepthMap& gt, const Mask& mask);
// Fraction of masked pixels with max(gt / pred, pred / gt) < threshold.
double delta1(const DepthMap& pred, const DepthMap& gt, const Mask& mask,
              double threshold = kDeltaThreshold);
// sqrt(mean((pred - gt)^2)) over the mask, meters.
double rmse(const DepthMap& pred, const DepthMap& gt, const Mask& mask);

// Associative reduction of the three metrics over any number of pixels.
class MetricAccumulator {
 public:
  void add(const DepthMap& pred, const DepthMap& gt, const Mask& mask,
           double threshold = kDeltaThreshold);
  void merge(const MetricAccumulator& other);

  size_t count() const { return count_; }
  double abs_rel() const;
  double delta1() const;
  double rmse() const;

 private:
  double sum_abs_rel_ = 0.0;
  double sum_sq_ = 0.0;
  size_t within_ = 0;
  size_t count_ = 0;
};

struct FrameRecord {
  std::string frame_id;
  double mean_scene_depth = 0.0;  // mean gt over the mask, meters
  double abs_rel = 0.0;
};

struct MetricsReport {
  double abs_rel = 0.0;
  double delta1 = 0.0;
  double rmse = 0.0;
  size_t n_frames = 0;
  std::vector<FrameRecord> per_frame;
};

struct EvalFrame {
  std::string frame_id;
  DepthMap pred;
  DepthMap gt;
  Mask mask;
};

// Metrics pooled over all masked pixels of all frames, plus per-frame records.
MetricsReport evaluate(std::span<const EvalFrame> frames);

struct DatasetSummary {
  double avg_sparse_depth_count = 0.0;
  double gt_coverage_percent = 0.0;
  size_t n_frames = 0;
};

struct SummaryFrame {
  size_t observation_count = 0;
  Mask gt_mask;
};

DatasetSummary dataset_summary(std::span<const SummaryFrame> frames);

// Every subsample-th frame (starting at frame 0) yields (mean gt, AbsRel).
std::vector<std::pair<double, double>> error_vs_depth(std::span<const EvalFrame> frames,
                                                      int subsample = 10);

// ---------------------------------------------------------------------------
// Report output.

struct ReportRow {
  std::string model;
  std::string dataset;
  MetricsReport report;
};

void write_report_json(const std::filesystem::path& path, const MetricsReport& report,
                       const std::string& model, const std::string& dataset);
ReportRow read_report_json(const std::filesystem::path& path);

// Plain-text table with AbsRel, delta1 and RMSE per dataset and model, plus
// the AbsRel change relative to `reference_model` when it is present.
std::string format_results_table(std::span<const ReportRow> rows,
                                 const std::string& reference_model = "");

std::string format_summary_table(
    std::span<const std::pair<std::string, DatasetSummary>> rows);

// CSV series "mean_scene_depth,abs_rel".
void write_error_series(const std::filesystem::path& path,
                        std::span<const std::pair<double, double>> series);
std::vector<std::pair<double, double>> read_error_series(const std::filesystem::path& path);

struct PlotSeries {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

// Scatter plot of AbsRel over mean scene depth, written as an image file.
void render_error_plot(const std::filesystem::path& path, std::span<const PlotSeries> series,
                       int width = 640, int height = 400);

}  // namespace radepth
