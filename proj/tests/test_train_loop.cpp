#include <cmath>
#include <fstream>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "radepth/dataset.hpp"
#include "radepth/train_loop.hpp"
#include "test_util.hpp"

namespace radepth {
namespace {

TEST(SilogLoss, ZeroAtPerfectPrediction) {
  const DepthMap gt = (DepthMap::Random(6, 6).array() + 2.0).matrix();
  const Mask mask = valid_depth_mask(gt);
  DepthMap grad;
  EXPECT_EQ(silog_loss(gt, gt, mask, 0.85, 10.0, &grad), 0.0);
  EXPECT_EQ(grad.cwiseAbs().maxCoeff(), 0.0);
}

TEST(SilogLoss, FullyScaleInvariantAtLambdaOne) {
  const DepthMap gt = (DepthMap::Random(6, 6).array() + 2.0).matrix();
  EXPECT_NEAR(silog_loss(3.5 * gt, gt, valid_depth_mask(gt), 1.0, 10.0), 0.0, 1e-6);
}

TEST(SilogLoss, HandCase) {
  DepthMap pred(1, 2), gt(1, 2);
  pred << std::exp(1.0), 1.0;
  gt << 1.0, 1.0;
  // g = {1, 0}: mean(g^2) = 0.5, mean(g)^2 = 0.25.
  const double expected = 10.0 * std::sqrt(0.5 - 0.85 * 0.25);
  EXPECT_NEAR(silog_loss(pred, gt, valid_depth_mask(gt), 0.85, 10.0), expected, 1e-12);
  EXPECT_NEAR(expected, 10.0 * std::sqrt(0.2875), 1e-12);
}

TEST(SilogLoss, IgnoresMaskedOutPixels) {
  DepthMap pred(1, 3), gt(1, 3);
  pred << std::exp(1.0), 1.0, 50.0;
  gt << 1.0, 1.0, 0.0;
  EXPECT_NEAR(silog_loss(pred, gt, valid_depth_mask(gt)), 10.0 * std::sqrt(0.2875), 1e-12);
}

TEST(SilogLoss, Errors) {
  const DepthMap gt = DepthMap::Ones(2, 2);
  EXPECT_THROW(silog_loss(gt, gt, Mask::Constant(2, 2, false)), std::invalid_argument);
  DepthMap bad = gt;
  bad(0, 0) = -1.0;
  EXPECT_THROW(silog_loss(bad, gt, valid_depth_mask(gt)), std::invalid_argument);
  EXPECT_THROW(silog_loss(DepthMap::Ones(2, 3), gt, valid_depth_mask(gt)),
               std::invalid_argument);
}

TEST(SilogLoss, InvariantToCommonRescaling) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> d(0.5, 60.0), s(0.01, 100.0);
  for (int trial = 0; trial < 100; ++trial) {
    DepthMap pred(5, 5), gt(5, 5);
    for (int i = 0; i < 25; ++i) {
      pred.data()[i] = d(rng);
      gt.data()[i] = d(rng);
    }
    const double k = s(rng);
    const Mask m = valid_depth_mask(gt);
    EXPECT_NEAR(silog_loss(k * pred, k * gt, m), silog_loss(pred, gt, m), 1e-9);
  }
}

TEST(SilogLoss, DecreasesInLambdaForScaledPrediction) {
  const DepthMap gt = (DepthMap::Random(6, 6).array() + 2.0).matrix();
  const Mask m = valid_depth_mask(gt);
  for (double c : {0.5, 1.7}) {
    double prev = std::numeric_limits<double>::infinity();
    for (int i = 0; i <= 20; ++i) {
      const double lambda = 0.05 * i;
      if (lambda == 0.0) continue;
      const double l = silog_loss(c * gt, gt, m, lambda);
      EXPECT_LT(l, prev);
      prev = l;
    }
    EXPECT_NEAR(prev, 0.0, 1e-6);
  }
}

TEST(SilogLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> d(0.5, 60.0);
  DepthMap pred(8, 8), gt(8, 8);
  for (int i = 0; i < 64; ++i) {
    pred.data()[i] = d(rng);
    gt.data()[i] = (i % 7 == 0) ? 0.0 : d(rng);
  }
  const Mask m = valid_depth_mask(gt);
  DepthMap grad;
  silog_loss(pred, gt, m, 0.85, 10.0, &grad);
  for (int i = 0; i < 64; ++i) {
    const double h = 1e-6 * pred.data()[i];
    DepthMap a = pred, b = pred;
    a.data()[i] += h;
    b.data()[i] -= h;
    const double fd = (silog_loss(a, gt, m) - silog_loss(b, gt, m)) / (2 * h);
    const double an = grad.data()[i];
    if (!m.data()[i]) {
      EXPECT_EQ(an, 0.0);
      continue;
    }
    EXPECT_LE(std::abs(an - fd), 1e-4 * std::max(std::abs(an), std::abs(fd))) << i;
  }
}

TEST(LrSchedule, EndpointsAndMidpoint) {
  const double base = 5e-6;
  EXPECT_EQ(lr_at_step(0, 1000, base), base);
  EXPECT_EQ(lr_at_step(1000, 1000, base), 0.0);
  EXPECT_NEAR(lr_at_step(500, 1000, base, 0.9), std::pow(0.5, 0.9) * base, 1e-12 * base);
  EXPECT_NEAR(std::pow(0.5, 0.9), 0.53589, 1e-5);
  EXPECT_THROW(lr_at_step(-1, 1000, base), std::invalid_argument);
  EXPECT_THROW(lr_at_step(1001, 1000, base), std::invalid_argument);
}

TEST(LrSchedule, MonotoneAndContinuous) {
  const long total = 10000;
  double prev = lr_at_step(0, total, 1.0);
  for (long s = 1; s <= total; ++s) {
    const double lr = lr_at_step(s, total, 1.0);
    EXPECT_LE(lr, prev);
    // Largest step is at the end, where (1/total)^0.9 ~ 2.5e-4.
    EXPECT_LE(prev - lr, 3e-4);
    prev = lr;
  }
}

TEST(SelectBestCheckpoint, Examples) {
  auto history = [](std::vector<double> v) {
    ValidationHistory h;
    for (size_t i = 0; i < v.size(); ++i) {
      EpochRecord r;
      r.epoch = static_cast<int>(i);
      r.val_abs_rel = v[i];
      h.epochs.push_back(r);
    }
    return h;
  };
  EXPECT_EQ(select_best_checkpoint(history({0.3, 0.2, 0.25})).epoch, 1);
  EXPECT_EQ(select_best_checkpoint(history({0.4})).epoch, 0);
  EXPECT_EQ(select_best_checkpoint(history({0.2, 0.2})).epoch, 0);
  EXPECT_THROW(select_best_checkpoint(ValidationHistory{}), std::invalid_argument);
}

TEST(TrainConfig, ValidationRejectsBadValues) {
  EXPECT_NO_THROW(TrainConfig{}.validate());
  EXPECT_NO_THROW(desk_train_config().validate());
  auto bad = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    EXPECT_THROW(c.validate(), std::invalid_argument);
  };
  bad([](TrainConfig& c) { c.epochs = 0; });
  bad([](TrainConfig& c) { c.steps_per_epoch = 0; });
  bad([](TrainConfig& c) { c.batch_size = 0; });
  bad([](TrainConfig& c) { c.silog_lambda = 0.0; });
  bad([](TrainConfig& c) { c.silog_lambda = 1.5; });
  bad([](TrainConfig& c) { c.base_lr = 0.0; });
  bad([](TrainConfig& c) { c.radar_k_min = 0; });
  bad([](TrainConfig& c) { c.radar_k_max = 0; });
}

TEST(TrainConfig, FileRoundTripAndOverrides) {
  const auto dir = testing::temp_dir("traincfg");
  TrainConfig c = desk_train_config();
  c.seed = 17;
  c.silog_lambda = 0.5;
  c.base_lr = 3.25e-5;
  write_train_config(dir / "c.txt", c);
  const TrainConfig back = read_train_config(dir / "c.txt");
  EXPECT_EQ(back.seed, 17u);
  EXPECT_EQ(back.silog_lambda, 0.5);
  EXPECT_EQ(back.base_lr, 3.25e-5);
  EXPECT_EQ(back.epochs, c.epochs);
  EXPECT_EQ(back.steps_per_epoch, c.steps_per_epoch);

  std::ofstream(dir / "partial.txt") << "# comment\nepochs = 3\n\nbatch_size=2\n";
  const TrainConfig p = read_train_config(dir / "partial.txt", desk_train_config());
  EXPECT_EQ(p.epochs, 3);
  EXPECT_EQ(p.batch_size, 2);
  EXPECT_EQ(p.base_lr, desk_train_config().base_lr);

  std::ofstream(dir / "unknown.txt") << "epochz = 3\n";
  EXPECT_THROW(read_train_config(dir / "unknown.txt"), std::invalid_argument);
  std::ofstream(dir / "garbage.txt") << "epochs = three\n";
  EXPECT_THROW(read_train_config(dir / "garbage.txt"), std::invalid_argument);

  TrainConfig o;
  apply_train_override(o, "steps_per_epoch", "12");
  EXPECT_EQ(o.steps_per_epoch, 12);
  EXPECT_THROW(apply_train_override(o, "nope", "1"), std::invalid_argument);
}

TEST(MetricsLog, RoundTrip) {
  const auto dir = testing::temp_dir("metricslog");
  EpochRecord a;
  a.epoch = 0;
  a.train_loss_mean = 1.25;
  a.val_abs_rel = 0.123456789;
  a.val_delta1 = 0.5;
  a.val_rmse = 3.0;
  a.lr_pretrained = 1e-4;
  a.lr_new = 1e-3;
  EpochRecord b = a;
  b.epoch = 1;
  b.val_abs_rel = 0.1;
  append_metrics_log(dir / "m.csv", a);
  append_metrics_log(dir / "m.csv", b);
  std::ifstream f(dir / "m.csv");
  std::string header;
  std::getline(f, header);
  EXPECT_EQ(header, "epoch,train_loss_mean,val_absrel,val_delta1,val_rmse,lr_pretrained,lr_new");
  const ValidationHistory h = read_metrics_log(dir / "m.csv");
  ASSERT_EQ(h.epochs.size(), 2u);
  EXPECT_EQ(h.epochs[0].val_abs_rel, a.val_abs_rel);
  EXPECT_EQ(h.epochs[1].epoch, 1);
  EXPECT_EQ(h.epochs[1].lr_new, 1e-3);
}

class TrainFixture : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    SynthConfig sc;
    sc.width = 64;
    sc.height = 48;
    sc.num_scenes = 2;
    sc.samples_per_scene = 3;
    sc.scene.grid_size = 65;
    sc.seed = 5;
    data_ = new Dataset(synthesize_dataset(sc, "train"));
    sc.seed = 6;
    sc.num_scenes = 1;
    val_ = new Dataset(synthesize_dataset(sc, "val"));
  }
  static void TearDownTestSuite() {
    delete data_;
    delete val_;
  }

  static DepthModel<float> fused_model(uint64_t seed) {
    ModelConfig mc = model_preset("toy-S");
    mc.input_channels = 3;
    mc.output_channels = 1;
    return extend_model(DepthModel<float>(mc, seed), seed + 1);
  }

  static TrainConfig tiny_config() {
    TrainConfig c = desk_train_config();
    c.epochs = 2;
    c.steps_per_epoch = 3;
    c.batch_size = 2;
    c.seed = 3;
    return c;
  }

  static Dataset* data_;
  static Dataset* val_;
};
Dataset* TrainFixture::data_ = nullptr;
Dataset* TrainFixture::val_ = nullptr;

TEST_F(TrainFixture, MinimalRun) {
  TrainConfig c = tiny_config();
  c.epochs = 1;
  c.steps_per_epoch = 1;
  const auto frames = training_frames(*data_);
  const auto val = validation_frames(*val_);
  const TrainResult r = train(fused_model(1), frames, val, c);
  EXPECT_EQ(r.optimizer_steps, 1u);
  EXPECT_EQ(r.history.epochs.size(), 1u);
}

TEST_F(TrainFixture, DeterministicPerSeed) {
  const auto frames = training_frames(*data_);
  const auto val = validation_frames(*val_);
  const TrainResult a = train(fused_model(1), frames, val, tiny_config());
  const TrainResult b = train(fused_model(1), frames, val, tiny_config());
  ASSERT_EQ(a.history.epochs.size(), 2u);
  for (size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(a.history.epochs[i].val_abs_rel, b.history.epochs[i].val_abs_rel);
    EXPECT_EQ(a.history.epochs[i].train_loss_mean, b.history.epochs[i].train_loss_mean);
  }
  TrainConfig other = tiny_config();
  other.seed = 4;
  const TrainResult c = train(fused_model(1), frames, val, other);
  EXPECT_NE(a.history.epochs[0].train_loss_mean, c.history.epochs[0].train_loss_mean);
}

TEST_F(TrainFixture, BestModelMatchesSelection) {
  const auto frames = training_frames(*data_);
  const auto val = validation_frames(*val_);
  TrainConfig c = tiny_config();
  c.epochs = 3;
  const TrainResult r = train(fused_model(2), frames, val, c);
  const EpochRecord& best = select_best_checkpoint(r.history);
  const MetricsReport rep = validate_model(r.best_model, val, FusionMode::kFused);
  EXPECT_NEAR(rep.abs_rel, best.val_abs_rel, 1e-12);
}

TEST_F(TrainFixture, CheckpointDirectoryLayout) {
  const auto dir = testing::temp_dir("traindir");
  TrainOptions opts;
  opts.checkpoint_dir = dir;
  int calls = 0;
  opts.on_epoch = [&](const EpochRecord&) { ++calls; };
  const TrainResult r = train(fused_model(1), training_frames(*data_), validation_frames(*val_),
                              tiny_config(), opts);
  EXPECT_EQ(calls, 2);
  for (int e = 0; e < 2; ++e) {
    EXPECT_TRUE(std::filesystem::exists(dir / ("epoch_" + std::to_string(e) + ".params")));
  }
  const ValidationHistory logged = read_metrics_log(dir / "metrics.csv");
  ASSERT_EQ(logged.epochs.size(), 2u);
  EXPECT_EQ(logged.epochs[1].val_abs_rel, r.history.epochs[1].val_abs_rel);
  // Learning rate at the last step of the last epoch.
  EXPECT_NEAR(logged.epochs[1].lr_pretrained, lr_at_step(5, 6, tiny_config().base_lr), 1e-18);
  EXPECT_NEAR(logged.epochs[1].lr_new, 10.0 * logged.epochs[1].lr_pretrained, 1e-18);
}

TEST_F(TrainFixture, FusedLossReachesTheWeightHead) {
  DepthModel<float> model = fused_model(3);
  const auto frames = training_frames(*data_);
  const TrainingFrame& f = frames[0];
  const auto obs = synthesize_radar(f.corners, f.depth, 1);
  const std::vector<Mat<float>> in = {
      make_network_input<float>(f.rgb, rasterize(obs, 48, 64), model.config())};
  model.zero_grad();
  const auto out = model.forward(in);
  const DepthMap d0 = out[0].d0.cast<double>();
  const DepthMap w = out[0].w.cast<double>();
  const double mean = *radar_mean_depth(obs);
  const DepthMap pred = fuse(d0, w, obs);
  DepthMap grad;
  silog_loss(pred, f.depth, valid_depth_mask(f.depth), 0.85, 10.0, &grad);
  const std::vector<Mat<float>> gd0 = {grad.cwiseProduct(w).cast<float>()};
  const std::vector<Mat<float>> gw = {
      grad.cwiseProduct((d0.array() - mean).matrix()).cast<float>()};
  model.backward(gd0, gw);

  // The second output channel is the added slice of the head.
  const auto& head = model.parameter("head.out.weight");
  const size_t per_channel = head.size() / 2;
  double norm = 0.0;
  for (size_t i = per_channel; i < head.size(); ++i) norm += double(head.grad[i]) * head.grad[i];
  EXPECT_GT(norm, 0.0);
  EXPECT_NE(model.parameter("head.out.bias").grad[1], 0.0f);

  // One optimizer step through train() moves those parameters.
  TrainConfig c = tiny_config();
  c.epochs = 1;
  c.steps_per_epoch = 1;
  const DepthModel<float> start = fused_model(3);
  const TrainResult r = train(start, frames, validation_frames(*val_), c);
  const auto& before = start.parameter("head.out.weight").value;
  const auto& after = r.best_model.parameter("head.out.weight").value;
  bool moved = false;
  for (size_t i = per_channel; i < before.size(); ++i) moved |= before[i] != after[i];
  EXPECT_TRUE(moved);
}

TEST_F(TrainFixture, DivergedModelAborts) {
  DepthModel<float> model = fused_model(1);
  for (auto& v : model.parameter("head.out.bias").value) v = std::nanf("");
  TrainConfig c = tiny_config();
  try {
    train(model, training_frames(*data_), validation_frames(*val_), c);
    FAIL() << "expected an abort";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 0, step 0"), std::string::npos) << e.what();
  }
}

TEST_F(TrainFixture, RejectsMismatchedModel) {
  ModelConfig mc = model_preset("toy-S");
  mc.input_channels = 3;
  mc.output_channels = 1;
  const DepthModel<float> rgb_only(mc, 1);
  EXPECT_THROW(train(rgb_only, training_frames(*data_), validation_frames(*val_), tiny_config()),
               std::invalid_argument);
  TrainOptions vision;
  vision.mode = FusionMode::kVisionOnly;
  EXPECT_NO_THROW(train(rgb_only, training_frames(*data_), validation_frames(*val_),
                        tiny_config(), vision));
}

TEST_F(TrainFixture, VisionOnlyPredictionIgnoresRadar) {
  ModelConfig mc = model_preset("toy-S");
  mc.input_channels = 3;
  mc.output_channels = 1;
  const DepthModel<float> model = extend_model(DepthModel<float>(mc, 4), 9, 1.0);
  const auto val = validation_frames(*val_);
  const auto& f = val[0];
  const DepthMap a = predict_depth(model, f.rgb, f.sparse_depth, f.observations,
                                   FusionMode::kVisionOnly);
  const DepthMap b = predict_depth(model, f.rgb, DepthMap::Zero(48, 64), {},
                                   FusionMode::kVisionOnly);
  EXPECT_EQ(a, b);
}

}  // namespace
}  // namespace radepth
