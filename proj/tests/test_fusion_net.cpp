#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "radepth/fusion_net.hpp"
#include "test_util.hpp"

namespace radepth {
namespace {

ModelConfig tiny_config(int channels = 4, int outputs = 2) {
  ModelConfig mc;
  mc.image_height = 16;
  mc.image_width = 16;
  mc.patch_size = 4;
  mc.embed_dim = 8;
  mc.num_heads = 2;
  mc.num_blocks = 2;
  mc.mlp_ratio = 2;
  mc.head_features = 4;
  mc.head_hidden = 4;
  mc.input_channels = channels;
  mc.output_channels = outputs;
  return mc;
}

RgbImage random_rgb(int h, int w, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  RgbImage img(h, w);
  for (auto& c : img.channels) {
    for (int i = 0; i < c.size(); ++i) c.data()[i] = u(rng);
  }
  return img;
}

DepthMap random_sparse(int h, int w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0), d(1.0, 60.0);
  std::vector<PixelObservation> obs;
  for (int i = 0; i < 4; ++i) obs.push_back({u(rng) * (w - 1), u(rng) * (h - 1), d(rng)});
  return rasterize(obs, h, w, 3);
}

TEST(ModelConfig, PresetsAndValidation) {
  const ModelConfig s = model_preset("toy-S");
  EXPECT_EQ(s.embed_dim, 64);
  EXPECT_EQ(s.num_blocks, 4);
  EXPECT_EQ(s.num_heads, 4);
  const ModelConfig b = model_preset("toy-B");
  EXPECT_EQ(b.embed_dim, 128);
  EXPECT_EQ(b.num_blocks, 6);
  EXPECT_EQ(b.num_heads, 8);
  EXPECT_THROW(model_preset("toy-L"), std::invalid_argument);

  ModelConfig bad = s;
  bad.num_heads = 3;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = s;
  bad.image_width = 65;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = s;
  bad.input_channels = 5;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(DepthModel, FullResolutionOutputShapes) {
  ModelConfig mc = model_preset("toy-S");
  mc.image_height = 480;
  mc.image_width = 640;
  const DepthModel<float> model(mc, 1);
  std::mt19937_64 rng(1);
  const RgbImage rgb = random_rgb(480, 640, rng);
  const std::vector<Mat<float>> in = {
      make_network_input<float>(rgb, DepthMap::Zero(480, 640), mc)};
  ASSERT_EQ(in[0].rows(), 4);
  const auto out = model.predict(in);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].d0.rows(), 480);
  EXPECT_EQ(out[0].d0.cols(), 640);
  EXPECT_EQ(out[0].w.rows(), 480);
  EXPECT_EQ(out[0].w.cols(), 640);
  EXPECT_GT(out[0].d0.minCoeff(), 0.0f);
  EXPECT_GT(out[0].w.minCoeff(), 0.0f);
  EXPECT_LT(out[0].w.maxCoeff(), 1.0f);
}

TEST(DepthModel, ShapeMismatchRejected) {
  const DepthModel<double> model(tiny_config(), 1);
  const std::vector<Mat<double>> wrong = {Mat<double>::Zero(3, 256)};
  EXPECT_THROW(model.predict(wrong), std::invalid_argument);
  const std::vector<Mat<double>> wrong_size = {Mat<double>::Zero(4, 255)};
  EXPECT_THROW(model.predict(wrong_size), std::invalid_argument);
}

TEST(DepthModel, OnlyFinalBiasGivesConstantMaps) {
  DepthModel<double> model(tiny_config(), 2);
  for (auto& p : model.parameters()) {
    if (p.name != "head.out.bias") std::fill(p.value.begin(), p.value.end(), 0.0);
  }
  auto& bias = model.parameter("head.out.bias");
  bias.value = {0.3, -1.2};
  std::mt19937_64 rng(3);
  const std::vector<Mat<double>> in = {
      make_network_input<double>(random_rgb(16, 16, rng), random_sparse(16, 16, rng),
                                 model.config())};
  const auto out = model.predict(in);
  const double d0 = 100.0 / (1.0 + std::exp(-0.3));
  const double w = 1.0 / (1.0 + std::exp(1.2));
  EXPECT_NEAR(out[0].d0.maxCoeff(), d0, 1e-12);
  EXPECT_NEAR(out[0].d0.minCoeff(), d0, 1e-12);
  EXPECT_NEAR(out[0].w.maxCoeff(), w, 1e-12);
  EXPECT_NEAR(out[0].w.minCoeff(), w, 1e-12);
}

TEST(ExtendModel, ParameterGroupsPartitionTheModel) {
  const DepthModel<double> stub(tiny_config(3, 1), 4);
  const DepthModel<double> model = extend_model(stub, 5);
  const ParamGroups g = param_groups(model);

  size_t pretrained = 0, added = 0;
  for (const auto& s : g.pretrained) pretrained += s.count;
  for (const auto& s : g.added) added += s.count;
  EXPECT_EQ(pretrained + added, model.parameter_count());
  EXPECT_EQ(pretrained, stub.parameter_count());

  // Every element is covered exactly once.
  for (const auto& p : model.parameters()) {
    std::vector<int> hits(p.size(), 0);
    for (const auto* list : {&g.pretrained, &g.added}) {
      for (const auto& s : *list) {
        if (s.name != p.name) continue;
        for (size_t i = s.offset; i < s.offset + s.count; ++i) ++hits[i];
      }
    }
    for (int h : hits) EXPECT_EQ(h, 1) << p.name;
  }

  // The radar slice of every patch-embedding filter is in the added group.
  const int k2 = model.config().patch_size * model.config().patch_size;
  for (int o = 0; o < model.config().embed_dim; ++o) {
    const size_t offset = static_cast<size_t>(o) * 4 * k2 + 3 * k2;
    bool found = false;
    for (const auto& s : g.added) {
      found |= s.name == "patch_embed.weight" && s.offset <= offset &&
               offset + k2 <= s.offset + s.count;
    }
    EXPECT_TRUE(found) << "filter " << o;
  }
}

TEST(ExtendModel, FreshModelIsAllAdded) {
  const DepthModel<double> model(tiny_config(), 1);
  const ParamGroups g = param_groups(model);
  EXPECT_TRUE(g.pretrained.empty());
}

TEST(ExtendPatchEmbedding, CopiesRgbAndScalesNewSlice) {
  ConvKernel k;
  k.out_channels = 6;
  k.in_channels = 3;
  k.kernel = 4;
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 0.3);
  for (int i = 0; i < 6 * 3 * 16; ++i) k.weights.push_back(n(rng));
  for (int i = 0; i < 6; ++i) k.bias.push_back(n(rng));
  const ConvKernel e = extend_patch_embedding(k, 3);
  ASSERT_EQ(e.in_channels, 4);
  for (int o = 0; o < 6; ++o) {
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < 4; ++y) {
        for (int x = 0; x < 4; ++x) EXPECT_EQ(e.at(o, c, y, x), k.at(o, c, y, x));
      }
    }
  }
  EXPECT_EQ(e.bias, k.bias);
  double rms = 0.0;
  for (double v : k.weights) rms += v * v;
  rms = std::sqrt(rms / k.weights.size());
  for (int o = 0; o < 6; ++o) {
    for (int y = 0; y < 4; ++y) {
      for (int x = 0; x < 4; ++x) EXPECT_LE(std::abs(e.at(o, 3, y, x)), 6.0 * 0.01 * rms);
    }
  }
  const ConvKernel z = extend_patch_embedding(k, 3, 0.0);
  for (int o = 0; o < 6; ++o) EXPECT_EQ(z.at(o, 3, 1, 1), 0.0);
}

// Mechanism isolation: with the radar slice zeroed, the depth output of the
// extended model matches the 3-channel model on arbitrary radar content.
TEST(ExtendModel, ZeroedRadarSliceIsolatesTheRadarChannel) {
  ModelConfig mc = model_preset("toy-S");
  mc.input_channels = 3;
  mc.output_channels = 1;
  const DepthModel<float> stub(mc, 7);
  const DepthModel<float> model = extend_model(stub, 8, 0.0);
  std::mt19937_64 rng(10);
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const RgbImage rgb = random_rgb(48, 64, rng);
    const std::vector<Mat<float>> rgb_in = {
        make_network_input<float>(rgb, DepthMap(), stub.config())};
    const std::vector<Mat<float>> full_in = {
        make_network_input<float>(rgb, random_sparse(48, 64, rng), model.config())};
    const auto a = stub.predict(rgb_in);
    const auto b = model.predict(full_in);
    worst = std::max(worst, double((a[0].d0 - b[0].d0).cwiseAbs().maxCoeff()));
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(ExtendModel, NonzeroRadarSliceSeesTheRadar) {
  const DepthModel<double> stub(tiny_config(3, 1), 4);
  const DepthModel<double> model = extend_model(stub, 5, 1.0);
  std::mt19937_64 rng(2);
  const RgbImage rgb = random_rgb(16, 16, rng);
  const std::vector<Mat<double>> a = {
      make_network_input<double>(rgb, DepthMap::Zero(16, 16), model.config())};
  const std::vector<Mat<double>> b = {
      make_network_input<double>(rgb, random_sparse(16, 16, rng), model.config())};
  EXPECT_GT((model.predict(a)[0].d0 - model.predict(b)[0].d0).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Fuse, Examples) {
  const DepthMap d0 = DepthMap::Constant(3, 4, 10.0);
  const DepthMap w = DepthMap::Constant(3, 4, 0.25);
  const std::vector<PixelObservation> obs = {{0, 0, 2.0}};
  const DepthMap f = fuse(d0, w, obs);
  EXPECT_NEAR(f.maxCoeff(), 10.0 * 0.25 + 0.75 * 2.0, 1e-12);
  EXPECT_NEAR(f.minCoeff(), 4.0, 1e-12);

  const std::vector<PixelObservation> two = {{0, 0, 4.0}, {1, 1, 6.0}};
  const DepthMap zero = fuse(d0, DepthMap::Zero(3, 4), two);
  EXPECT_EQ(zero, DepthMap::Constant(3, 4, 5.0));
}

TEST(Fuse, LimitsAreExact) {
  std::mt19937_64 rng(1);
  const DepthMap d0 = (DepthMap::Random(8, 8).array() + 2.0) * 10.0;
  const std::vector<PixelObservation> obs = {{0, 0, 3.3}, {1, 1, 7.9}, {2, 2, 12.1}};
  const double mean = (3.3 + 7.9 + 12.1) / 3.0;
  EXPECT_EQ(fuse(d0, DepthMap::Ones(8, 8), obs), d0);
  const DepthMap m = fuse(d0, DepthMap::Zero(8, 8), obs);
  EXPECT_LE((m.array() - mean).abs().maxCoeff(), 1e-12);
}

TEST(Fuse, NoObservationsReturnsNetworkDepth) {
  const DepthMap d0 = DepthMap::Constant(2, 2, 9.0);
  EXPECT_EQ(fuse(d0, DepthMap::Constant(2, 2, 0.1), {}), d0);
}

TEST(Fuse, RejectsBadInputs) {
  const std::vector<PixelObservation> obs = {{0, 0, 1.0}};
  EXPECT_THROW(fuse(DepthMap::Ones(2, 2), DepthMap::Ones(2, 3), obs), std::invalid_argument);
  EXPECT_THROW(fuse(DepthMap::Ones(2, 2), DepthMap::Constant(2, 2, 1.5), obs),
               std::invalid_argument);
}

TEST(Fuse, BoundedAndLinearInD0) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> d(0.5, 80.0), u(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    DepthMap d0(6, 7), d1(6, 7), w(6, 7);
    for (int i = 0; i < d0.size(); ++i) {
      d0.data()[i] = d(rng);
      d1.data()[i] = d(rng);
      w.data()[i] = std::clamp(u(rng), 1e-6, 1.0 - 1e-6);
    }
    std::vector<PixelObservation> obs;
    for (int i = 0; i < 1 + trial % 5; ++i) obs.push_back({0, 0, d(rng)});
    const double mean = *radar_mean_depth(obs);
    const DepthMap f = fuse(d0, w, obs);
    for (int i = 0; i < f.size(); ++i) {
      const double lo = std::min(d0.data()[i], mean), hi = std::max(d0.data()[i], mean);
      EXPECT_GE(f.data()[i], lo - 1e-12);
      EXPECT_LE(f.data()[i], hi + 1e-12);
    }
    // fuse(a d0 + b d1) = a fuse(d0) + b fuse(d1) when a + b = 1.
    const double a = u(rng), b = 1.0 - a;
    const DepthMap lhs = fuse(a * d0 + b * d1, w, obs);
    const DepthMap rhs = a * fuse(d0, w, obs) + b * fuse(d1, w, obs);
    EXPECT_LE((lhs - rhs).cwiseAbs().maxCoeff(), 1e-9);
    // Differences are linear with slope w.
    const DepthMap diff = fuse(d0 + d1, w, obs) - fuse(d0, w, obs);
    EXPECT_LE((diff - d1.cwiseProduct(w)).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(NaiveScale, Examples) {
  DepthMap rel = DepthMap::Constant(4, 4, 0.5);
  std::vector<PixelObservation> obs = {{1, 2, 10.0}};
  EXPECT_DOUBLE_EQ(naive_scale_factor(rel, obs), 20.0);
  EXPECT_EQ(naive_scale(rel, obs), DepthMap::Constant(4, 4, 10.0));

  DepthMap r2 = DepthMap::Ones(4, 4);
  r2(0, 0) = 2.0;
  r2(3, 3) = 3.0;
  const std::vector<PixelObservation> two = {{0, 0, 8.0}, {3, 3, 12.0}};
  EXPECT_DOUBLE_EQ(naive_scale_factor(r2, two), (8.0 / 2.0 + 12.0 / 3.0) / 2.0);
}

TEST(NaiveScale, IdentityScale) {
  const DepthMap rel = (DepthMap::Random(5, 5).array() + 2.0).matrix();
  const std::vector<PixelObservation> obs = {{2.2, 3.1, rel(3, 2)}};
  EXPECT_LE((naive_scale(rel, obs) - rel).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(NaiveScale, Errors) {
  const DepthMap rel = DepthMap::Ones(3, 3);
  EXPECT_THROW(naive_scale(rel, {}), std::invalid_argument);
  DepthMap z = rel;
  z(1, 1) = 0.0;
  const std::vector<PixelObservation> obs = {{1, 1, 2.0}};
  EXPECT_THROW(naive_scale(z, obs), std::invalid_argument);
}

TEST(NaiveScale, ScaleEquivariance) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> d(0.1, 10.0), s(0.1, 10.0), uv(0.0, 9.0);
  for (int trial = 0; trial < 100; ++trial) {
    DepthMap rel(10, 10);
    for (int i = 0; i < rel.size(); ++i) rel.data()[i] = d(rng);
    std::vector<PixelObservation> obs;
    for (int i = 0; i < 1 + trial % 5; ++i) obs.push_back({uv(rng), uv(rng), d(rng) * 5.0});
    const DepthMap base = naive_scale(rel, obs);
    const double k = s(rng);
    auto scaled = obs;
    for (auto& o : scaled) o.depth *= k;
    const DepthMap a = naive_scale(rel, scaled);
    EXPECT_LE((a - k * base).cwiseAbs().maxCoeff(), 1e-9 * (k * base).cwiseAbs().maxCoeff());
    const double c = s(rng);
    const DepthMap b = naive_scale(rel * c, obs);
    EXPECT_LE((b - base).cwiseAbs().maxCoeff(), 1e-9 * base.cwiseAbs().maxCoeff());
  }
}

// Relative error with a floor for entries whose true gradient is zero.
void expect_gradient_close(double analytic, double numeric, const std::string& what) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  EXPECT_LE(std::abs(analytic - numeric), 1e-4 * scale + 1e-8) << what;
}

TEST(DepthModel, ForwardFuseGradientMatchesFiniteDifferences) {
  DepthModel<double> model(tiny_config(), 3);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& p : model.parameters()) {
    for (auto& v : p.value) v += 0.05 * n(rng);
  }
  std::vector<Mat<double>> in = {
      make_network_input<double>(random_rgb(16, 16, rng), random_sparse(16, 16, rng),
                                 model.config()),
      make_network_input<double>(random_rgb(16, 16, rng), random_sparse(16, 16, rng),
                                 model.config())};
  const std::vector<std::vector<PixelObservation>> obs = {{{3, 4, 12.0}, {9, 9, 20.0}},
                                                          {{1, 14, 35.0}}};
  std::vector<Mat<double>> coeff(2, Mat<double>(16, 16));
  for (auto& c : coeff) {
    for (int i = 0; i < c.size(); ++i) c.data()[i] = n(rng);
  }
  // L = sum_b sum_px coeff * fused.
  auto loss = [&]() {
    const auto out = model.predict(in);
    double total = 0.0;
    for (int b = 0; b < 2; ++b) {
      const DepthMap fused = fuse(out[b].d0, out[b].w, obs[b]);
      total += fused.cwiseProduct(coeff[b]).sum();
    }
    return total;
  };

  model.zero_grad();
  const auto out = model.forward(in);
  std::vector<Mat<double>> gd0, gw;
  for (int b = 0; b < 2; ++b) {
    const double mean = *radar_mean_depth(obs[b]);
    gd0.push_back(coeff[b].cwiseProduct(out[b].w));
    gw.push_back(coeff[b].cwiseProduct((out[b].d0.array() - mean).matrix()));
  }
  std::vector<Mat<double>> input_grads;
  model.backward(gd0, gw, &input_grads);

  const double h = 1e-6;
  for (auto& p : model.parameters()) {
    const size_t stride = std::max<size_t>(1, p.size() / 5);
    for (size_t k = 0; k < p.size(); k += stride) {
      const double v = p.value[k];
      p.value[k] = v + h;
      const double up = loss();
      p.value[k] = v - h;
      const double down = loss();
      p.value[k] = v;
      expect_gradient_close(p.grad[k], (up - down) / (2 * h), p.name);
    }
  }
  for (int b = 0; b < 2; ++b) {
    for (int k = 0; k < in[b].size(); k += 29) {
      const double v = in[b].data()[k];
      in[b].data()[k] = v + h;
      const double up = loss();
      in[b].data()[k] = v - h;
      const double down = loss();
      in[b].data()[k] = v;
      expect_gradient_close(input_grads[b].data()[k], (up - down) / (2 * h), "input");
    }
  }
}

TEST(Fuse, GradientWithRespectToOutputs) {
  std::mt19937_64 rng(3);
  const DepthMap d0 = (DepthMap::Random(4, 4).array() + 2.0) * 5.0;
  DepthMap w = (DepthMap::Random(4, 4).array() * 0.4 + 0.5).matrix();
  const DepthMap c = DepthMap::Random(4, 4);
  const std::vector<PixelObservation> obs = {{0, 0, 7.0}, {1, 1, 11.0}};
  const double mean = 9.0;
  const double h = 1e-6;
  for (int i = 0; i < 16; ++i) {
    DepthMap a = d0, b = d0;
    a.data()[i] += h;
    b.data()[i] -= h;
    const double fd = (fuse(a, w, obs).cwiseProduct(c).sum() -
                       fuse(b, w, obs).cwiseProduct(c).sum()) / (2 * h);
    expect_gradient_close(c.data()[i] * w.data()[i], fd, "d0");
    DepthMap wa = w, wb = w;
    wa.data()[i] += h;
    wb.data()[i] -= h;
    const double fw = (fuse(d0, wa, obs).cwiseProduct(c).sum() -
                       fuse(d0, wb, obs).cwiseProduct(c).sum()) / (2 * h);
    expect_gradient_close(c.data()[i] * (d0.data()[i] - mean), fw, "w");
  }
}

TEST(Checkpoint, RoundTrip) {
  const auto dir = testing::temp_dir("ckpt");
  ModelConfig mc = tiny_config(3, 1);
  const DepthModel<float> stub(mc, 4);
  const DepthModel<float> model = extend_model(stub, 5);
  save_checkpoint(dir / "m", model);
  const DepthModel<float> back = load_checkpoint(dir / "m");
  EXPECT_EQ(back.config(), model.config());
  ASSERT_EQ(back.parameters().size(), model.parameters().size());
  for (size_t i = 0; i < model.parameters().size(); ++i) {
    EXPECT_EQ(back.parameters()[i].name, model.parameters()[i].name);
    EXPECT_EQ(back.parameters()[i].value, model.parameters()[i].value);
  }
  EXPECT_EQ(back.added_slices(), model.added_slices());
  EXPECT_THROW(load_checkpoint(dir / "missing"), std::exception);
}

}  // namespace
}  // namespace radepth
