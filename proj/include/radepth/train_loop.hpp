#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "radepth/calib_radar.hpp"
#include "radepth/eval_metrics.hpp"
#include "radepth/fusion_net.hpp"
#include "radepth/synth_scene.hpp"

namespace radepth {

struct TrainConfig {
  int epochs = 25;
  int steps_per_epoch = 50000;
  int batch_size = 8;
  double base_lr = 5e-6;               // pretrained parameters
  double new_param_lr_multiplier = 10.0;
  double poly_power = 0.9;
  double silog_lambda = 0.85;
  double silog_alpha = 10.0;
  uint64_t seed = 0;
  // Optimizer details.
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip_norm = 1.0;  // global norm; <= 0 disables clipping
  // Synthetic radar drawn per training step.
  int radar_k_min = 1;
  int radar_k_max = 5;
  int disk_radius = kDefaultDiskRadius;

  void validate() const;
};

// Desk-scale training preset: 200 steps per epoch and learning rates suited
// to the toy backbone.
TrainConfig desk_train_config();

// Stage that produces the pretrained RGB-only model: a fresh 3-channel,
// single-output model trained vision-only. Every parameter of a fresh model
// is in the added group, so the multiplier is 1.
TrainConfig pretrain_train_config();

// Flat "key = value" text; keys are TrainConfig field names. Unknown keys
// are an error.
TrainConfig read_train_config(const std::filesystem::path& path,
                              TrainConfig defaults = {});
void apply_train_override(TrainConfig& config, const std::string& key,
                          const std::string& value);
void write_train_config(const std::filesystem::path& path, const TrainConfig& config);

// ---------------------------------------------------------------------------
// Loss and schedule.

// alpha * sqrt(mean(g^2) - lambda * mean(g)^2), g = log(pred) - log(gt) on
// the mask. If `grad` is non-null it receives d loss / d pred (zero off the
// mask).
double silog_loss(const DepthMap& pred, const DepthMap& gt, const Mask& mask,
                  double lambda = 0.85, double alpha = 10.0, DepthMap* grad = nullptr);

// base * (1 - step / total)^power.
double lr_at_step(long step, long total_steps, double base, double power = 0.9);

// ---------------------------------------------------------------------------
// Data.

struct TrainingFrame {
  RgbImage rgb;
  DepthMap depth;
  std::vector<CornerFeature> corners;
};

struct ValidationFrame {
  std::string frame_id;
  RgbImage rgb;
  DepthMap depth;
  std::vector<PixelObservation> observations;
  DepthMap sparse_depth;
};

// How the network output is turned into the supervised depth.
enum class FusionMode {
  kFused,       // radar channel filled, output fused with the radar mean
  kVisionOnly,  // radar channel zeroed, network depth used directly
};

// Final depth for one frame under the given mode.
DepthMap predict_depth(const DepthModel<float>& model, const RgbImage& rgb,
                       const DepthMap& sparse_depth,
                       std::span<const PixelObservation> observations, FusionMode mode);

// ---------------------------------------------------------------------------
// Training.

struct EpochRecord {
  int epoch = 0;
  double train_loss_mean = 0.0;
  double val_abs_rel = 0.0;
  double val_delta1 = 0.0;
  double val_rmse = 0.0;
  double lr_pretrained = 0.0;
  double lr_new = 0.0;
  std::string checkpoint;  // checkpoint stem, or "epoch-<n>" when kept in memory
};

struct ValidationHistory {
  std::vector<EpochRecord> epochs;
};

struct TrainOptions {
  FusionMode mode = FusionMode::kFused;
  // When set, every epoch writes "<dir>/epoch_<n>.{params,json}" and the
  // metrics log "<dir>/metrics.csv".
  std::optional<std::filesystem::path> checkpoint_dir;
  // Progress callback, called after every epoch.
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  ValidationHistory history;
  DepthModel<float> best_model;  // weights of select_best_checkpoint(history)
  size_t optimizer_steps = 0;
};

// Adam with per-group learning rates, polynomial decay, SILog on the
// supervised depth and per-epoch validation. Deterministic given the seed.
TrainResult train(const DepthModel<float>& initial, std::span<const TrainingFrame> train_set,
                  std::span<const ValidationFrame> validation, const TrainConfig& config,
                  const TrainOptions& options = {});

// Lowest validation AbsRel; ties resolve to the earliest epoch.
const EpochRecord& select_best_checkpoint(const ValidationHistory& history);

// Pooled validation metrics of a model.
MetricsReport validate_model(const DepthModel<float>& model,
                             std::span<const ValidationFrame> validation, FusionMode mode);

// Metrics log: "epoch,train_loss_mean,val_absrel,val_delta1,val_rmse,lr_pretrained,lr_new".
void append_metrics_log(const std::filesystem::path& path, const EpochRecord& record);
ValidationHistory read_metrics_log(const std::filesystem::path& path);

// One Adam step on the model gradients with per-element learning rates.
class AdamOptimizer {
 public:
  AdamOptimizer(const DepthModel<float>& model, double beta1, double beta2, double eps);

  // Clips the global gradient norm (if max_norm > 0), then updates. Returns
  // the gradient norm before clipping.
  double step(DepthModel<float>& model, double lr_pretrained, double lr_new, double max_norm);

 private:
  std::vector<std::vector<float>> m_, v_;
  std::vector<std::vector<uint8_t>> is_new_;
  double beta1_, beta2_, eps_;
  long t_ = 0;
};

}  // namespace radepth
