#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "radepth/kv_config.hpp"
#include "radepth/pipeline.hpp"

namespace fs = std::filesystem;
using namespace radepth;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct SynthArgs {
  fs::path output;
  std::string name;
  std::optional<fs::path> config;
  std::optional<uint64_t> seed;
  std::optional<int> scenes, samples, width, height;
  std::vector<std::string> sets;
};

struct TrainArgs {
  fs::path dataset, val, output;
  std::string variant = "ours";
  std::string preset = "toy-S";
  std::optional<fs::path> init, config, calib;
  uint64_t seed = 0;
  std::vector<std::string> sets;
};

struct EvalArgs {
  std::vector<fs::path> datasets;
  fs::path checkpoint, output;
  std::string variant = "ours";
  std::optional<fs::path> calib;
  int subsample = 10;
  int disk_radius = kDefaultDiskRadius;
  bool dump = false;
};

struct CompareArgs {
  std::vector<fs::path> reports, datasets;
  std::string reference = "metric-baseline";
  std::optional<fs::path> output;
};

struct PlotArgs {
  std::vector<std::string> series;
  fs::path output;
};

int run_synth(const SynthArgs& a) {
  SynthConfig sc;
  if (a.config) sc = read_synth_config(*a.config, sc);
  for (const auto& s : a.sets) {
    const auto [k, v] = split_assignment(s);
    apply_synth_override(sc, k, v);
  }
  if (a.seed) sc.seed = *a.seed;
  if (a.scenes) sc.num_scenes = *a.scenes;
  if (a.samples) sc.samples_per_scene = *a.samples;
  if (a.width) sc.width = *a.width;
  if (a.height) sc.height = *a.height;
  sc.validate();
  const std::string name = a.name.empty() ? a.output.filename().string() : a.name;
  const Dataset ds = cmd_synth(sc, a.output, name);
  const std::pair<std::string, DatasetSummary> row{ds.name, summarize_dataset(ds)};
  std::cout << format_summary_table(std::span(&row, 1));
  return 0;
}

int run_train(const TrainArgs& a) {
  PipelineConfig pc;
  pc.variant = parse_variant(a.variant);
  pc.train = pc.variant == Variant::kPretrain ? pretrain_train_config() : desk_train_config();
  if (a.config) pc.train = read_train_config(*a.config, pc.train);
  for (const auto& s : a.sets) {
    const auto [k, v] = split_assignment(s);
    apply_train_override(pc.train, k, v);
  }
  pc.datasets = {a.dataset};
  pc.validation = a.val;
  pc.calibration = a.calib;
  pc.init_checkpoint = a.init;
  pc.preset = a.preset;
  pc.output_dir = a.output;
  pc.seed = a.seed;
  const TrainSummary s = cmd_train(pc, [](const EpochRecord& r) {
    std::fprintf(stderr, "epoch %d  loss %.4f  val AbsRel %.4f  d1 %.4f  RMSE %.3f\n",
                 r.epoch, r.train_loss_mean, r.val_abs_rel, r.val_delta1, r.val_rmse);
  });
  std::printf("best epoch %d (val AbsRel %.4f) -> %s\n", s.best.epoch, s.best.val_abs_rel,
              s.best_checkpoint.string().c_str());
  return 0;
}

int run_eval(const EvalArgs& a) {
  PipelineConfig pc;
  pc.variant = parse_variant(a.variant);
  pc.datasets = a.datasets;
  pc.checkpoint = a.checkpoint;
  pc.calibration = a.calib;
  pc.output_dir = a.output;
  pc.subsample = a.subsample;
  pc.train.disk_radius = a.disk_radius;
  pc.dump_predictions = a.dump;
  for (const auto& r : cmd_eval(pc)) {
    std::printf("%-16s %-20s AbsRel %.4f  d1 %.4f  RMSE %.3f  (%zu frames) -> %s\n",
                a.variant.c_str(), r.dataset.c_str(), r.report.abs_rel, r.report.delta1,
                r.report.rmse, r.report.n_frames, r.report_path.string().c_str());
  }
  return 0;
}

int run_compare(const CompareArgs& a) {
  const std::string text = cmd_compare(a.reports, a.reference, a.datasets);
  std::cout << text;
  if (a.output) {
    const fs::path out = resolve_output(*a.output);
    std::ofstream f(out);
    if (!f) throw std::runtime_error("cannot write " + out.string());
    f << text;
  }
  return 0;
}

int run_plot(const PlotArgs& a) {
  std::vector<std::pair<std::string, fs::path>> series;
  for (const auto& s : a.series) {
    const auto [label, path] = split_assignment(s);
    series.emplace_back(label, path);
  }
  cmd_plot(series, a.output);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Radar-camera fusion for metric depth on procedural scenes"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Render a synthetic dataset");
  synth->add_option("-o,--output", sa.output, "Dataset directory")->required();
  synth->add_option("--name", sa.name, "Dataset name (default: directory name)");
  synth->add_option("--config", sa.config, "key = value file with generator settings");
  synth->add_option("--seed", sa.seed, "Base seed");
  synth->add_option("--scenes", sa.scenes, "Number of terrains");
  synth->add_option("--samples-per-scene", sa.samples, "Views per terrain");
  synth->add_option("--width", sa.width, "Image width (default 640)");
  synth->add_option("--height", sa.height, "Image height (default 480)");
  synth->add_option("--set", sa.sets, "Override a generator setting, key=value");

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  train_cmd->add_option("--dataset", ta.dataset, "Training dataset directory")->required();
  train_cmd->add_option("--val", ta.val, "Validation dataset directory")->required();
  train_cmd->add_option("--variant", ta.variant, "pretrain, ours or metric-baseline");
  train_cmd->add_option("--preset", ta.preset, "Model preset: toy-S or toy-B");
  train_cmd->add_option("--init", ta.init, "Checkpoint stem to start from");
  train_cmd->add_option("--calib", ta.calib, "Calibration file overriding the datasets'");
  train_cmd->add_option("-o,--output", ta.output, "Run directory")->required();
  train_cmd->add_option("--seed", ta.seed, "Training seed");
  train_cmd->add_option("--config", ta.config, "key = value training config");
  train_cmd->add_option("--set", ta.sets, "Override a training setting, key=value");

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", ea.checkpoint, "Checkpoint stem")->required();
  eval_cmd->add_option("--dataset", ea.datasets, "Evaluation dataset directories")->required();
  eval_cmd->add_option("--variant", ea.variant, "ours, metric-baseline or naive");
  eval_cmd->add_option("--calib", ea.calib, "Calibration file overriding the datasets'");
  eval_cmd->add_option("-o,--output", ea.output, "Report directory")->required();
  eval_cmd->add_option("--subsample", ea.subsample, "Frame stride of the error series");
  eval_cmd->add_option("--disk-radius", ea.disk_radius, "Radar disk radius in pixels");
  eval_cmd->add_flag("--dump-predictions", ea.dump, "Write per-frame float rasters");

  CompareArgs ca;
  auto* compare = app.add_subcommand("compare", "Tabulate reports and dataset statistics");
  compare->add_option("--report", ca.reports, "Report JSON files");
  compare->add_option("--dataset", ca.datasets, "Dataset directories to summarize");
  compare->add_option("--reference", ca.reference, "Model the AbsRel change is relative to");
  compare->add_option("-o,--output", ca.output, "Also write the tables to this file");

  PlotArgs pa;
  auto* plot = app.add_subcommand("plot", "Plot AbsRel over mean scene depth");
  plot->add_option("--series", pa.series, "label=series.csv")->required();
  plot->add_option("-o,--output", pa.output, "Image file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*synth) return run_synth(sa);
    if (*train_cmd) return run_train(ta);
    if (*eval_cmd) return run_eval(ea);
    if (*compare) return run_compare(ca);
    if (*plot) return run_plot(pa);
  } catch (const std::invalid_argument& e) {
    std::cerr << "radepth: config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "radepth: error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitConfig;
}
