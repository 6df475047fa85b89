#include "radepth/train_loop.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>

#include "radepth/csv.hpp"
#include "radepth/kv_config.hpp"
#include "radepth/random.hpp"

namespace radepth {

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) {
    throw std::invalid_argument("invalid training config: " + what);
  };
  if (epochs < 1 || steps_per_epoch < 1 || batch_size < 1) fail("counts must be >= 1");
  if (!(base_lr > 0.0)) fail("base_lr must be > 0");
  if (!(new_param_lr_multiplier > 0.0)) fail("new_param_lr_multiplier must be > 0");
  if (!(poly_power >= 0.0)) fail("poly_power must be >= 0");
  if (!(silog_lambda > 0.0 && silog_lambda <= 1.0)) fail("silog_lambda must be in (0, 1]");
  if (!(silog_alpha > 0.0)) fail("silog_alpha must be > 0");
  if (radar_k_min < 1 || radar_k_max < radar_k_min) fail("need 1 <= radar_k_min <= radar_k_max");
  if (disk_radius < 0) fail("disk_radius must be >= 0");
}

TrainConfig desk_train_config() {
  TrainConfig c;
  c.epochs = 10;
  c.steps_per_epoch = 200;
  c.batch_size = 4;
  c.base_lr = 1e-4;
  return c;
}

TrainConfig pretrain_train_config() {
  TrainConfig c;
  c.epochs = 5;
  c.steps_per_epoch = 200;
  c.batch_size = 4;
  c.base_lr = 3e-4;
  c.new_param_lr_multiplier = 1.0;
  return c;
}

namespace {

template <typename F>
void for_each_field(TrainConfig& c, F&& f) {
  f("epochs", c.epochs);
  f("steps_per_epoch", c.steps_per_epoch);
  f("batch_size", c.batch_size);
  f("base_lr", c.base_lr);
  f("new_param_lr_multiplier", c.new_param_lr_multiplier);
  f("poly_power", c.poly_power);
  f("silog_lambda", c.silog_lambda);
  f("silog_alpha", c.silog_alpha);
  f("seed", c.seed);
  f("adam_beta1", c.adam_beta1);
  f("adam_beta2", c.adam_beta2);
  f("adam_eps", c.adam_eps);
  f("grad_clip_norm", c.grad_clip_norm);
  f("radar_k_min", c.radar_k_min);
  f("radar_k_max", c.radar_k_max);
  f("disk_radius", c.disk_radius);
}

template <typename V>
void parse_value(const std::string& key, const std::string& text, V& out) {
  std::istringstream in(text);
  V v{};
  in >> v;
  if (in.fail() || !(in >> std::ws).eof()) {
    throw std::invalid_argument("training config: bad value '" + text + "' for " + key);
  }
  out = v;
}

}  // namespace

void apply_train_override(TrainConfig& config, const std::string& key,
                          const std::string& value) {
  bool found = false;
  for_each_field(config, [&](const char* name, auto& field) {
    if (key == name) {
      parse_value(key, value, field);
      found = true;
    }
  });
  if (!found) throw std::invalid_argument("training config: unknown key '" + key + "'");
}

TrainConfig read_train_config(const std::filesystem::path& path, TrainConfig defaults) {
  for (const auto& [key, value] : read_key_values(path)) {
    apply_train_override(defaults, key, value);
  }
  defaults.validate();
  return defaults;
}

void write_train_config(const std::filesystem::path& path, const TrainConfig& config) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  TrainConfig copy = config;
  for_each_field(copy, [&](const char* name, auto& field) {
    using V = std::decay_t<decltype(field)>;
    if constexpr (std::is_floating_point_v<V>) {
      out << name << " = " << format_double(field) << "\n";
    } else {
      out << name << " = " << field << "\n";
    }
  });
}

// ---------------------------------------------------------------------------

double silog_loss(const DepthMap& pred, const DepthMap& gt, const Mask& mask, double lambda,
                  double alpha, DepthMap* grad) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols() || mask.rows() != gt.rows() ||
      mask.cols() != gt.cols()) {
    throw std::invalid_argument("silog_loss: shape mismatch");
  }
  size_t n = 0;
  double sum_g = 0.0, sum_g2 = 0.0;
  for (Eigen::Index i = 0; i < gt.size(); ++i) {
    if (!mask.data()[i]) continue;
    const double p = pred.data()[i], g = gt.data()[i];
    if (!(p > 0.0) || !(g > 0.0)) {
      throw std::invalid_argument("silog_loss: pred and gt must be > 0 on the mask");
    }
    const double d = std::log(p) - std::log(g);
    sum_g += d;
    sum_g2 += d * d;
    ++n;
  }
  if (n == 0) throw std::invalid_argument("silog_loss: empty mask");
  const double mean_g = sum_g / static_cast<double>(n);
  const double variance = std::max(0.0, sum_g2 / static_cast<double>(n) - lambda * mean_g * mean_g);
  const double root = std::sqrt(variance);
  if (grad) {
    *grad = DepthMap::Zero(gt.rows(), gt.cols());
    if (root > 0.0) {
      const double scale = alpha / (static_cast<double>(n) * root);
      for (Eigen::Index i = 0; i < gt.size(); ++i) {
        if (!mask.data()[i]) continue;
        const double p = pred.data()[i];
        const double d = std::log(p) - std::log(gt.data()[i]);
        grad->data()[i] = scale * (d - lambda * mean_g) / p;
      }
    }
  }
  return alpha * root;
}

double lr_at_step(long step, long total_steps, double base, double power) {
  if (total_steps < 1 || step < 0 || step > total_steps) {
    throw std::invalid_argument("lr_at_step: need 0 <= step <= total_steps");
  }
  if (step == total_steps) return 0.0;
  return base * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(total_steps),
                         power);
}

// ---------------------------------------------------------------------------

DepthMap predict_depth(const DepthModel<float>& model, const RgbImage& rgb,
                       const DepthMap& sparse_depth,
                       std::span<const PixelObservation> observations, FusionMode mode) {
  const auto& cfg = model.config();
  if (mode == FusionMode::kFused) {
    if (cfg.input_channels != 4 || cfg.output_channels != 2) {
      throw std::invalid_argument("fused prediction needs a 4-input, 2-output model");
    }
    return predict_fused(model, rgb, sparse_depth, observations).fused;
  }
  const DepthMap zeros = DepthMap::Zero(cfg.image_height, cfg.image_width);
  const auto input = make_network_input<float>(rgb, zeros, cfg);
  const auto out = model.predict(std::span<const Mat<float>>(&input, 1));
  return out[0].d0.cast<double>();
}

MetricsReport validate_model(const DepthModel<float>& model,
                             std::span<const ValidationFrame> validation, FusionMode mode) {
  std::vector<EvalFrame> frames;
  frames.reserve(validation.size());
  for (const auto& v : validation) {
    frames.push_back({v.frame_id,
                      predict_depth(model, v.rgb, v.sparse_depth, v.observations, mode),
                      v.depth, valid_depth_mask(v.depth)});
  }
  return evaluate(frames);
}

AdamOptimizer::AdamOptimizer(const DepthModel<float>& model, double beta1, double beta2,
                             double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
  const auto& params = model.parameters();
  const ParamGroups groups = param_groups(model);
  for (const auto& p : params) {
    m_.emplace_back(p.size(), 0.0f);
    v_.emplace_back(p.size(), 0.0f);
    is_new_.emplace_back(p.size(), uint8_t{0});
  }
  for (const auto& s : groups.added) {
    for (size_t i = 0; i < params.size(); ++i) {
      if (params[i].name != s.name) continue;
      std::fill_n(is_new_[i].begin() + static_cast<ptrdiff_t>(s.offset), s.count, uint8_t{1});
    }
  }
}

double AdamOptimizer::step(DepthModel<float>& model, double lr_pretrained, double lr_new,
                           double max_norm) {
  auto& params = model.parameters();
  double sq = 0.0;
  for (const auto& p : params) {
    for (float g : p.grad) sq += double(g) * double(g);
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw std::runtime_error("non-finite gradient norm");
  const double clip = (max_norm > 0.0 && norm > max_norm) ? max_norm / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const float b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& m = m_[i];
    auto& v = v_[i];
    const auto& is_new = is_new_[i];
    for (size_t k = 0; k < p.size(); ++k) {
      const float g = static_cast<float>(p.grad[k] * clip);
      m[k] = b1 * m[k] + (1.0f - b1) * g;
      v[k] = b2 * v[k] + (1.0f - b2) * g * g;
      const double lr = is_new[k] ? lr_new : lr_pretrained;
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      p.value[k] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps_));
    }
  }
  return norm;
}

const EpochRecord& select_best_checkpoint(const ValidationHistory& history) {
  if (history.epochs.empty()) throw std::invalid_argument("select_best_checkpoint: empty history");
  const EpochRecord* best = &history.epochs.front();
  for (const auto& r : history.epochs) {
    if (r.val_abs_rel < best->val_abs_rel) best = &r;
  }
  return *best;
}

void append_metrics_log(const std::filesystem::path& path, const EpochRecord& r) {
  const bool exists = std::filesystem::exists(path);
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  if (!exists) out << "epoch,train_loss_mean,val_absrel,val_delta1,val_rmse,lr_pretrained,lr_new\n";
  out << r.epoch << "," << format_double(r.train_loss_mean) << ","
      << format_double(r.val_abs_rel) << "," << format_double(r.val_delta1) << ","
      << format_double(r.val_rmse) << "," << format_double(r.lr_pretrained) << ","
      << format_double(r.lr_new) << "\n";
}

ValidationHistory read_metrics_log(const std::filesystem::path& path) {
  const CsvTable t = read_csv(path, {"epoch", "train_loss_mean", "val_absrel", "val_delta1",
                                     "val_rmse", "lr_pretrained", "lr_new"});
  ValidationHistory h;
  for (const auto& r : t.rows) {
    EpochRecord e;
    e.epoch = static_cast<int>(r[0]);
    e.train_loss_mean = r[1];
    e.val_abs_rel = r[2];
    e.val_delta1 = r[3];
    e.val_rmse = r[4];
    e.lr_pretrained = r[5];
    e.lr_new = r[6];
    h.epochs.push_back(e);
  }
  return h;
}

TrainResult train(const DepthModel<float>& initial, std::span<const TrainingFrame> train_set,
                  std::span<const ValidationFrame> validation, const TrainConfig& config,
                  const TrainOptions& options) {
  config.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  if (validation.empty()) throw std::invalid_argument("train: empty validation set");
  const ModelConfig& mc = initial.config();
  const bool fused = options.mode == FusionMode::kFused;
  if (fused && (mc.input_channels != 4 || mc.output_channels != 2)) {
    throw std::invalid_argument("train: fused mode needs a 4-input, 2-output model");
  }
  for (const auto& f : train_set) {
    if (f.corners.empty() && mc.input_channels == 4) {
      throw std::invalid_argument("train: every training frame needs corner features");
    }
  }
  if (options.checkpoint_dir) std::filesystem::create_directories(*options.checkpoint_dir);

  DepthModel<float> model = initial;
  AdamOptimizer adam(model, config.adam_beta1, config.adam_beta2, config.adam_eps);
  TrainResult result{{}, initial, 0};
  double best_abs_rel = std::numeric_limits<double>::infinity();
  const long total_steps = static_cast<long>(config.epochs) * config.steps_per_epoch;
  const int h = mc.image_height, w = mc.image_width;
  const DepthMap no_radar = DepthMap::Zero(h, w);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double loss_sum = 0.0;
    double lr_pre = 0.0, lr_new = 0.0;
    for (int k = 0; k < config.steps_per_epoch; ++k) {
      const long step = static_cast<long>(epoch) * config.steps_per_epoch + k;
      std::mt19937_64 rng(derive_seed(config.seed, {uint64_t(epoch), uint64_t(k)}));
      std::uniform_int_distribution<size_t> pick(0, train_set.size() - 1);

      std::vector<Mat<float>> inputs;
      std::vector<const TrainingFrame*> frames;
      std::vector<double> radar_means;
      for (int b = 0; b < config.batch_size; ++b) {
        const TrainingFrame& f = train_set[pick(rng)];
        frames.push_back(&f);
        if (mc.input_channels == 4 && fused) {
          const auto obs = synthesize_radar(
              f.corners, f.depth,
              derive_seed(config.seed, {uint64_t(epoch), uint64_t(k), uint64_t(b), 1}),
              config.radar_k_min, config.radar_k_max);
          radar_means.push_back(*radar_mean_depth(obs));
          inputs.push_back(make_network_input<float>(
              f.rgb, rasterize(obs, h, w, config.disk_radius), mc));
        } else {
          inputs.push_back(make_network_input<float>(f.rgb, no_radar, mc));
        }
      }

      auto diverged = [&](const std::string& what) {
        return std::runtime_error(what + " at epoch " + std::to_string(epoch) +
                                  ", step " + std::to_string(k));
      };
      model.zero_grad();
      const auto outputs = model.forward(inputs);
      for (const auto& o : outputs) {
        if (!o.d0.allFinite() || !o.w.allFinite() || !(o.d0.array() > 0.0f).all()) {
          throw diverged("non-finite or zero network depth");
        }
      }
      std::vector<Mat<float>> grad_d0, grad_w;
      double batch_loss = 0.0;
      const double inv_batch = 1.0 / config.batch_size;
      for (int b = 0; b < config.batch_size; ++b) {
        const DepthMap d0 = outputs[b].d0.cast<double>();
        const Mask mask = valid_depth_mask(frames[b]->depth);
        DepthMap grad;
        if (fused) {
          const DepthMap wmap = outputs[b].w.cast<double>();
          const double mean = radar_means[b];
          const DepthMap pred = (d0.array() * wmap.array() + (1.0 - wmap.array()) * mean).matrix();
          batch_loss += silog_loss(pred, frames[b]->depth, mask, config.silog_lambda,
                                   config.silog_alpha, &grad);
          grad *= inv_batch;
          grad_d0.push_back(grad.cwiseProduct(wmap).cast<float>());
          grad_w.push_back(grad.cwiseProduct((d0.array() - mean).matrix()).cast<float>());
        } else {
          batch_loss += silog_loss(d0, frames[b]->depth, mask, config.silog_lambda,
                                   config.silog_alpha, &grad);
          grad_d0.push_back((grad * inv_batch).cast<float>());
        }
      }
      batch_loss *= inv_batch;
      if (!std::isfinite(batch_loss)) {
        throw diverged("non-finite training loss");
      }
      model.backward(grad_d0, grad_w);
      lr_pre = lr_at_step(step, total_steps, config.base_lr, config.poly_power);
      lr_new = lr_pre * config.new_param_lr_multiplier;
      adam.step(model, lr_pre, lr_new, config.grad_clip_norm);
      ++result.optimizer_steps;
      loss_sum += batch_loss;
    }

    const MetricsReport val = validate_model(model, validation, options.mode);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss_mean = loss_sum / config.steps_per_epoch;
    rec.val_abs_rel = val.abs_rel;
    rec.val_delta1 = val.delta1;
    rec.val_rmse = val.rmse;
    rec.lr_pretrained = lr_pre;
    rec.lr_new = lr_new;
    if (options.checkpoint_dir) {
      const auto stem = *options.checkpoint_dir / ("epoch_" + std::to_string(epoch));
      save_checkpoint(stem, model);
      rec.checkpoint = stem.string();
      append_metrics_log(*options.checkpoint_dir / "metrics.csv", rec);
    } else {
      rec.checkpoint = "epoch-" + std::to_string(epoch);
    }
    if (val.abs_rel < best_abs_rel) {
      best_abs_rel = val.abs_rel;
      result.best_model = model;
    }
    result.history.epochs.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);
  }
  return result;
}

}  // namespace radepth
