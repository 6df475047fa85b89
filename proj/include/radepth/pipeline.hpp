#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "radepth/dataset.hpp"
#include "radepth/eval_metrics.hpp"
#include "radepth/fusion_net.hpp"
#include "radepth/train_loop.hpp"

namespace radepth {

// Relative output paths are resolved against this directory when set.
inline constexpr const char* kOutputRootEnv = "RADEPTH_OUTPUT_ROOT";
std::filesystem::path resolve_output(const std::filesystem::path& path);

enum class Variant {
  kPretrain,        // RGB-only model, the starting point of the other two
  kOurs,            // radar channel + fused output
  kMetricBaseline,  // same architecture, radar channel zeroed, d0 only
  kNaive,           // vision-only depth rescaled by the radar ratio (eval only)
};

Variant parse_variant(std::string_view name);
std::string variant_name(Variant variant);

struct PipelineConfig {
  std::vector<std::filesystem::path> datasets;  // training set, or evaluation sets
  std::optional<std::filesystem::path> validation;
  std::optional<std::filesystem::path> calibration;  // overrides each dataset's calib.json
  std::optional<std::filesystem::path> init_checkpoint;
  std::optional<std::filesystem::path> checkpoint;  // model to evaluate
  std::string preset = "toy-S";
  Variant variant = Variant::kOurs;
  TrainConfig train = desk_train_config();
  std::filesystem::path output_dir = "runs";
  uint64_t seed = 0;
  int subsample = 10;
  bool dump_predictions = false;

  // Throws std::invalid_argument on bad values or missing inputs.
  void validate_for_train() const;
  void validate_for_eval() const;
};

// Builds the dataset and writes it under `output_dir`. Returns the dataset.
Dataset cmd_synth(const SynthConfig& config, const std::filesystem::path& output_dir,
                  const std::string& name);

struct TrainSummary {
  ValidationHistory history;
  EpochRecord best;
  std::filesystem::path best_checkpoint;  // stem of the copied best weights
};

// Writes <out>/epoch_<n>.{params,json}, <out>/metrics.csv, <out>/train_config.txt,
// <out>/best.{params,json} and the record <out>/best_checkpoint.json.
TrainSummary cmd_train(const PipelineConfig& config,
                       const std::function<void(const EpochRecord&)>& progress = {});

// Builds the starting model of a training run.
DepthModel<float> initial_model(const PipelineConfig& config, const ModelConfig& image_size);

struct EvalOutput {
  std::string dataset;
  MetricsReport report;
  std::filesystem::path report_path;
  std::filesystem::path series_path;
};

// Predictions of one variant for a set of frames.
std::vector<EvalFrame> predict_frames(const DepthModel<float>& model,
                                      std::span<const ValidationFrame> frames,
                                      Variant variant);

// Per dataset: <out>/report_<variant>_<dataset>.json and the error series
// <out>/series_<variant>_<dataset>.csv; with dump_predictions also
// <out>/predictions_<variant>_<dataset>/<frame>_{d0,w,fused}.tiff.
std::vector<EvalOutput> cmd_eval(const PipelineConfig& config);

// Results table of several report files plus an optional dataset summary table.
std::string cmd_compare(const std::vector<std::filesystem::path>& reports,
                        const std::string& reference_model,
                        const std::vector<std::filesystem::path>& datasets);

void cmd_plot(const std::vector<std::pair<std::string, std::filesystem::path>>& series,
              const std::filesystem::path& output);

DatasetSummary summarize_dataset(const Dataset& dataset);

}  // namespace radepth
