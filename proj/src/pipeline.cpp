#include "radepth/pipeline.hpp"

#include <cctype>
#include <cstdlib>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "radepth/random.hpp"

namespace radepth {

namespace fs = std::filesystem;

fs::path resolve_output(const fs::path& path) {
  const char* root = std::getenv(kOutputRootEnv);
  if (root == nullptr || *root == '\0' || path.is_absolute()) return path;
  return fs::path(root) / path;
}

Variant parse_variant(std::string_view name) {
  if (name == "pretrain") return Variant::kPretrain;
  if (name == "ours") return Variant::kOurs;
  if (name == "metric-baseline") return Variant::kMetricBaseline;
  if (name == "naive") return Variant::kNaive;
  throw std::invalid_argument("unknown variant '" + std::string(name) +
                              "' (pretrain, ours, metric-baseline, naive)");
}

std::string variant_name(Variant variant) {
  switch (variant) {
    case Variant::kPretrain: return "pretrain";
    case Variant::kOurs: return "ours";
    case Variant::kMetricBaseline: return "metric-baseline";
    case Variant::kNaive: return "naive";
  }
  return "unknown";
}

namespace {

void require_dataset(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) {
    throw std::invalid_argument("no dataset manifest in " + dir.string());
  }
}

void require_checkpoint(const fs::path& stem) {
  for (const char* ext : {".params", ".json"}) {
    fs::path p = stem;
    p += ext;
    if (!fs::exists(p)) throw std::invalid_argument("missing checkpoint file " + p.string());
  }
}

Dataset load_dataset(const fs::path& dir, const std::optional<fs::path>& calibration) {
  Dataset ds = read_dataset(dir);
  if (calibration) ds.calibration = read_calibration(*calibration);
  return ds;
}

std::string file_token(const std::string& name) {
  std::string out;
  for (char c : name) {
    out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
  }
  return out.empty() ? "dataset" : out;
}

}  // namespace

void PipelineConfig::validate_for_train() const {
  if (variant == Variant::kNaive) {
    throw std::invalid_argument("the naive variant has no training stage");
  }
  if (datasets.size() != 1) throw std::invalid_argument("train needs exactly one --dataset");
  require_dataset(datasets.front());
  if (!validation) throw std::invalid_argument("train needs a validation set (--val)");
  require_dataset(*validation);
  if (calibration && !fs::exists(*calibration)) {
    throw std::invalid_argument("calibration file not found: " + calibration->string());
  }
  if (init_checkpoint) require_checkpoint(*init_checkpoint);
  model_preset(preset);
  train.validate();
}

void PipelineConfig::validate_for_eval() const {
  if (variant == Variant::kPretrain) {
    throw std::invalid_argument("evaluate the pretrained model as metric-baseline");
  }
  if (datasets.empty()) throw std::invalid_argument("eval needs at least one --dataset");
  for (const auto& d : datasets) require_dataset(d);
  if (!checkpoint) throw std::invalid_argument("eval needs --checkpoint");
  require_checkpoint(*checkpoint);
  if (calibration && !fs::exists(*calibration)) {
    throw std::invalid_argument("calibration file not found: " + calibration->string());
  }
  if (subsample < 1) throw std::invalid_argument("subsample must be >= 1");
}

Dataset cmd_synth(const SynthConfig& config, const fs::path& output_dir,
                  const std::string& name) {
  config.validate();
  Dataset ds = synthesize_dataset(config, name);
  write_dataset(resolve_output(output_dir), ds);
  return ds;
}

DepthModel<float> initial_model(const PipelineConfig& config, const ModelConfig& image_size) {
  ModelConfig mc = model_preset(config.preset);
  mc.image_height = image_size.image_height;
  mc.image_width = image_size.image_width;
  if (config.variant == Variant::kPretrain) {
    mc.input_channels = 3;
    mc.output_channels = 1;
    mc.validate();
    return DepthModel<float>(mc, derive_seed(config.seed, {0x1417}));
  }
  if (!config.init_checkpoint) {
    mc.validate();
    return DepthModel<float>(mc, derive_seed(config.seed, {0x1417}));
  }
  DepthModel<float> init = load_checkpoint(*config.init_checkpoint);
  const ModelConfig& ic = init.config();
  if (ic.image_height != mc.image_height || ic.image_width != mc.image_width) {
    throw std::invalid_argument("initial checkpoint image size does not match the dataset");
  }
  if (ic.input_channels == 3 && ic.output_channels == 1) {
    return extend_model(init, derive_seed(config.seed, {0xE87}));
  }
  if (ic.input_channels == 4 && ic.output_channels == 2) return init;
  throw std::invalid_argument("initial checkpoint must be a 3-in/1-out or 4-in/2-out model");
}

TrainSummary cmd_train(const PipelineConfig& config,
                       const std::function<void(const EpochRecord&)>& progress) {
  config.validate_for_train();
  const fs::path out = resolve_output(config.output_dir);
  if (fs::exists(out / "metrics.csv")) {
    throw std::runtime_error(out.string() + " already holds a training run");
  }
  const Dataset train_set = load_dataset(config.datasets.front(), config.calibration);
  const Dataset val_set = load_dataset(*config.validation, config.calibration);
  if (train_set.config.width != val_set.config.width ||
      train_set.config.height != val_set.config.height) {
    throw std::invalid_argument("training and validation image sizes differ");
  }
  ModelConfig size;
  size.image_height = train_set.config.height;
  size.image_width = train_set.config.width;
  const DepthModel<float> model = initial_model(config, size);

  TrainConfig tc = config.train;
  tc.seed = config.seed;
  fs::create_directories(out);
  write_train_config(out / "train_config.txt", tc);

  const auto frames = training_frames(train_set);
  const auto val = validation_frames(val_set, tc.disk_radius);
  TrainOptions opts;
  opts.mode = config.variant == Variant::kOurs ? FusionMode::kFused : FusionMode::kVisionOnly;
  opts.checkpoint_dir = out;
  opts.on_epoch = progress;
  const TrainResult result = train(model, frames, val, tc, opts);

  TrainSummary summary;
  summary.history = result.history;
  summary.best = select_best_checkpoint(result.history);
  summary.best_checkpoint = out / "best";
  save_checkpoint(summary.best_checkpoint, result.best_model);
  const nlohmann::json record = {{"epoch", summary.best.epoch},
                                 {"checkpoint", summary.best.checkpoint},
                                 {"val_absrel", summary.best.val_abs_rel},
                                 {"variant", variant_name(config.variant)}};
  std::ofstream rec(out / "best_checkpoint.json");
  if (!rec) throw std::runtime_error("cannot write " + (out / "best_checkpoint.json").string());
  rec << record.dump(2) << "\n";
  return summary;
}

std::vector<EvalFrame> predict_frames(const DepthModel<float>& model,
                                      std::span<const ValidationFrame> frames,
                                      Variant variant) {
  std::vector<EvalFrame> out;
  out.reserve(frames.size());
  for (const auto& f : frames) {
    DepthMap pred;
    switch (variant) {
      case Variant::kOurs:
        pred = predict_depth(model, f.rgb, f.sparse_depth, f.observations, FusionMode::kFused);
        break;
      case Variant::kPretrain:
      case Variant::kMetricBaseline:
        pred = predict_depth(model, f.rgb, f.sparse_depth, f.observations,
                             FusionMode::kVisionOnly);
        break;
      case Variant::kNaive: {
        pred = predict_depth(model, f.rgb, f.sparse_depth, f.observations,
                             FusionMode::kVisionOnly);
        if (!f.observations.empty()) pred = naive_scale(pred, f.observations);
        break;
      }
    }
    out.push_back({f.frame_id, std::move(pred), f.depth, valid_depth_mask(f.depth)});
  }
  return out;
}

std::vector<EvalOutput> cmd_eval(const PipelineConfig& config) {
  config.validate_for_eval();
  const DepthModel<float> model = load_checkpoint(*config.checkpoint);
  if (config.variant == Variant::kOurs &&
      (model.config().input_channels != 4 || model.config().output_channels != 2)) {
    throw std::invalid_argument("variant ours needs a 4-in/2-out checkpoint");
  }
  const fs::path out = resolve_output(config.output_dir);
  fs::create_directories(out);
  const std::string variant = variant_name(config.variant);

  std::vector<EvalOutput> results;
  for (const auto& dir : config.datasets) {
    const Dataset ds = load_dataset(dir, config.calibration);
    if (ds.config.width != model.config().image_width ||
        ds.config.height != model.config().image_height) {
      throw std::invalid_argument("dataset " + ds.name + " image size does not match the model");
    }
    const auto frames = validation_frames(ds, config.train.disk_radius);
    const auto preds = predict_frames(model, frames, config.variant);
    EvalOutput r;
    r.dataset = ds.name;
    r.report = evaluate(preds);
    const std::string token = variant + "_" + file_token(ds.name);
    r.report_path = out / ("report_" + token + ".json");
    r.series_path = out / ("series_" + token + ".csv");
    write_report_json(r.report_path, r.report, variant, ds.name);
    const auto series = error_vs_depth(preds, config.subsample);
    write_error_series(r.series_path, series);
    if (config.dump_predictions) {
      const fs::path dump = out / ("predictions_" + token);
      fs::create_directories(dump);
      for (size_t i = 0; i < frames.size(); ++i) {
        const auto& f = frames[i];
        if (config.variant == Variant::kOurs) {
          const FusionOutput fo = predict_fused(model, f.rgb, f.sparse_depth, f.observations);
          write_float_raster(dump / (f.frame_id + "_d0.tiff"), fo.d0);
          write_float_raster(dump / (f.frame_id + "_w.tiff"), fo.w);
        }
        write_float_raster(dump / (f.frame_id + "_fused.tiff"), preds[i].pred);
      }
    }
    results.push_back(std::move(r));
  }
  return results;
}

DatasetSummary summarize_dataset(const Dataset& dataset) {
  std::vector<SummaryFrame> frames;
  frames.reserve(dataset.samples.size());
  for (const auto& s : dataset.samples) {
    frames.push_back({s.observations.size(), valid_depth_mask(s.depth)});
  }
  return dataset_summary(frames);
}

std::string cmd_compare(const std::vector<fs::path>& reports, const std::string& reference_model,
                        const std::vector<fs::path>& datasets) {
  if (reports.empty() && datasets.empty()) {
    throw std::invalid_argument("compare needs report files or datasets");
  }
  std::string text;
  if (!reports.empty()) {
    std::vector<ReportRow> rows;
    for (const auto& p : reports) {
      if (!fs::exists(p)) throw std::invalid_argument("report not found: " + p.string());
      rows.push_back(read_report_json(p));
    }
    text += format_results_table(rows, reference_model);
  }
  if (!datasets.empty()) {
    std::vector<std::pair<std::string, DatasetSummary>> rows;
    for (const auto& d : datasets) {
      require_dataset(d);
      const Dataset ds = read_dataset(d);
      rows.emplace_back(ds.name, summarize_dataset(ds));
    }
    if (!text.empty()) text += "\n";
    text += format_summary_table(rows);
  }
  return text;
}

void cmd_plot(const std::vector<std::pair<std::string, fs::path>>& series,
              const fs::path& output) {
  if (series.empty()) throw std::invalid_argument("plot needs at least one series");
  std::vector<PlotSeries> data;
  for (const auto& [label, path] : series) {
    if (!fs::exists(path)) throw std::invalid_argument("series not found: " + path.string());
    data.push_back({label, read_error_series(path)});
  }
  const fs::path out = resolve_output(output);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  render_error_plot(out, data);
}

}  // namespace radepth
