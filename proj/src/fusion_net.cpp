#include "radepth/fusion_net.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "radepth/json_io.hpp"
#include "radepth/random.hpp"

namespace radepth {

using namespace nn;

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) {
    throw std::invalid_argument("invalid model config: " + what);
  };
  if (patch_size < 1 || embed_dim < 1 || num_heads < 1 || num_blocks < 0 ||
      mlp_ratio < 1 || head_features < 1 || head_hidden < 1) {
    fail("sizes must be positive");
  }
  if (embed_dim % num_heads != 0) fail("embed_dim must be divisible by num_heads");
  if (image_height < patch_size || image_width < patch_size ||
      image_height % patch_size != 0 || image_width % patch_size != 0) {
    fail("image dims must be divisible by patch_size");
  }
  if (input_channels != 3 && input_channels != 4) fail("input_channels must be 3 or 4");
  if (output_channels != 1 && output_channels != 2) fail("output_channels must be 1 or 2");
  if (!(max_depth > 0.0)) fail("max_depth must be > 0");
}

ModelConfig model_preset(std::string_view name) {
  ModelConfig c;
  if (name == "toy-S") {
    c.embed_dim = 64;
    c.num_blocks = 4;
    c.num_heads = 4;
  } else if (name == "toy-B") {
    c.embed_dim = 128;
    c.num_blocks = 6;
    c.num_heads = 8;
  } else {
    throw std::invalid_argument("unknown model preset '" + std::string(name) +
                                "' (expected toy-S or toy-B)");
  }
  return c;
}

ConvKernel extend_patch_embedding(const ConvKernel& rgb, uint64_t init_seed,
                                  double init_scale) {
  const size_t k2 = static_cast<size_t>(rgb.kernel) * rgb.kernel;
  if (rgb.in_channels != 3 || rgb.kernel < 1 || rgb.out_channels < 1 ||
      rgb.weights.size() != rgb.out_channels * 3 * k2 ||
      rgb.bias.size() != static_cast<size_t>(rgb.out_channels)) {
    throw std::invalid_argument(
        "extend_patch_embedding: expected a [out][3][k][k] kernel with out biases");
  }
  double sq = 0.0;
  for (double v : rgb.weights) sq += v * v;
  const double rms = std::sqrt(sq / static_cast<double>(rgb.weights.size()));
  std::mt19937_64 rng(derive_seed(init_seed, {0xE47E}));
  std::normal_distribution<double> normal(0.0, 1.0);
  const double stddev = init_scale * rms;

  ConvKernel out;
  out.out_channels = rgb.out_channels;
  out.in_channels = 4;
  out.kernel = rgb.kernel;
  out.bias = rgb.bias;
  out.weights.resize(static_cast<size_t>(rgb.out_channels) * 4 * k2);
  for (int o = 0; o < rgb.out_channels; ++o) {
    std::copy_n(rgb.weights.begin() + static_cast<ptrdiff_t>(o * 3 * k2), 3 * k2,
                out.weights.begin() + static_cast<ptrdiff_t>(o * 4 * k2));
    for (size_t j = 0; j < k2; ++j) {
      out.weights[o * 4 * k2 + 3 * k2 + j] = stddev == 0.0 ? 0.0 : stddev * normal(rng);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameter layout.

template <typename T>
struct DepthModel<T>::Layout {
  struct Block {
    int norm1_w, norm1_b, qkv_w, qkv_b, proj_w, proj_b;
    int norm2_w, norm2_b, fc1_w, fc1_b, fc2_w, fc2_b;
  };
  int embed_w, embed_b, pos;
  std::vector<Block> blocks;
  int norm_w, norm_b, head_proj_w, head_proj_b, conv1_w, conv1_b, out_w, out_b;
  Mat<T> up_rows;  // image_height x grid_height
  Mat<T> up_cols;  // image_width x grid_width
};

template <typename T>
struct DepthModel<T>::Cache {
  struct BlockCache {
    Mat<T> x_in;
    LayerNormCache<T> ln1;
    Mat<T> ln1_out, qkv;
    AttentionCache<T> attn;
    Mat<T> attn_out, x_mid;
    LayerNormCache<T> ln2;
    Mat<T> ln2_out, fc1_out, act;
  };
  struct ImageCache {
    Mat<T> cols1, z1, cols2;
    Mat<T> sig_depth, sig_weight;
  };
  int batch = 0;
  std::vector<Mat<T>> inputs;
  Mat<T> patches;
  std::vector<BlockCache> blocks;
  LayerNormCache<T> ln_final;
  Mat<T> tokens_out;
  Mat<T> head_tokens;
  std::vector<ImageCache> images;
};

namespace {

template <typename T>
Parameter<T> make_param(std::string name, std::vector<int> shape) {
  size_t n = 1;
  for (int d : shape) n *= static_cast<size_t>(d);
  Parameter<T> p;
  p.name = std::move(name);
  p.shape = std::move(shape);
  p.value.assign(n, T(0));
  p.grad.assign(n, T(0));
  return p;
}

template <typename T>
ConstMatMap<T> as_matrix(const Parameter<T>& p) {
  const Eigen::Index rows = p.shape.at(0);
  return ConstMatMap<T>(p.value.data(), rows, static_cast<Eigen::Index>(p.size()) / rows);
}
template <typename T>
MatMap<T> grad_matrix(Parameter<T>& p) {
  const Eigen::Index rows = p.shape.at(0);
  return MatMap<T>(p.grad.data(), rows, static_cast<Eigen::Index>(p.size()) / rows);
}
template <typename T>
ConstRowVecMap<T> as_row(const Parameter<T>& p) {
  return ConstRowVecMap<T>(p.value.data(), static_cast<Eigen::Index>(p.size()));
}
template <typename T>
RowVecMap<T> grad_row(Parameter<T>& p) {
  return RowVecMap<T>(p.grad.data(), static_cast<Eigen::Index>(p.size()));
}

}  // namespace

template <typename T>
DepthModel<T>::DepthModel(const ModelConfig& config, uint64_t init_seed)
    : config_(config) {
  config_.validate();
  const int d = config.embed_dim;
  const int p = config.patch_size;
  const int hidden = config.mlp_ratio * d;
  auto add = [&](std::string name, std::vector<int> shape) {
    params_.push_back(make_param<T>(std::move(name), std::move(shape)));
  };
  add("patch_embed.weight", {d, config.input_channels, p, p});
  add("patch_embed.bias", {d});
  add("pos_embed", {config.num_tokens(), d});
  for (int l = 0; l < config.num_blocks; ++l) {
    const std::string b = "blocks." + std::to_string(l) + ".";
    add(b + "norm1.weight", {d});
    add(b + "norm1.bias", {d});
    add(b + "attn.qkv.weight", {3 * d, d});
    add(b + "attn.qkv.bias", {3 * d});
    add(b + "attn.proj.weight", {d, d});
    add(b + "attn.proj.bias", {d});
    add(b + "norm2.weight", {d});
    add(b + "norm2.bias", {d});
    add(b + "mlp.fc1.weight", {hidden, d});
    add(b + "mlp.fc1.bias", {hidden});
    add(b + "mlp.fc2.weight", {d, hidden});
    add(b + "mlp.fc2.bias", {d});
  }
  add("norm.weight", {d});
  add("norm.bias", {d});
  add("head.proj.weight", {config.head_features, d});
  add("head.proj.bias", {config.head_features});
  add("head.conv1.weight", {config.head_hidden, config.head_features + 3, 3, 3});
  add("head.conv1.bias", {config.head_hidden});
  add("head.out.weight", {config.output_channels, config.head_hidden, 3, 3});
  add("head.out.bias", {config.output_channels});

  std::mt19937_64 rng(derive_seed(init_seed, {0x1417}));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& prm : params_) {
    const std::string& n = prm.name;
    const bool is_bias = n.ends_with(".bias");
    const bool is_norm = n.find("norm") != std::string::npos;
    double stddev = 0.0;
    if (is_norm && !is_bias) {
      std::fill(prm.value.begin(), prm.value.end(), T(1));
      continue;
    }
    if (is_bias) {
      if (n == "head.out.bias") prm.value[0] = T(std::log(0.3 / 0.7));  // d0 ~ 0.3 max_depth
      continue;
    }
    const size_t fan_in = prm.size() / static_cast<size_t>(prm.shape[0]);
    if (n == "pos_embed") {
      stddev = 0.02;
    } else if (n.starts_with("head.conv1")) {
      stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    } else if (n.starts_with("head.out")) {
      stddev = 0.1 / std::sqrt(static_cast<double>(fan_in));
    } else {
      stddev = 1.0 / std::sqrt(static_cast<double>(fan_in));
    }
    for (auto& v : prm.value) v = T(stddev * normal(rng));
  }
  for (const auto& prm : params_) added_.push_back({prm.name, 0, prm.size()});
  build_layout();
}

template <typename T>
void DepthModel<T>::build_layout() {
  auto layout = std::make_shared<Layout>();
  auto idx = [&](const std::string& name) {
    for (size_t i = 0; i < params_.size(); ++i) {
      if (params_[i].name == name) return static_cast<int>(i);
    }
    throw std::invalid_argument("model is missing parameter " + name);
  };
  layout->embed_w = idx("patch_embed.weight");
  layout->embed_b = idx("patch_embed.bias");
  layout->pos = idx("pos_embed");
  for (int l = 0; l < config_.num_blocks; ++l) {
    const std::string b = "blocks." + std::to_string(l) + ".";
    layout->blocks.push_back({idx(b + "norm1.weight"), idx(b + "norm1.bias"),
                              idx(b + "attn.qkv.weight"), idx(b + "attn.qkv.bias"),
                              idx(b + "attn.proj.weight"), idx(b + "attn.proj.bias"),
                              idx(b + "norm2.weight"), idx(b + "norm2.bias"),
                              idx(b + "mlp.fc1.weight"), idx(b + "mlp.fc1.bias"),
                              idx(b + "mlp.fc2.weight"), idx(b + "mlp.fc2.bias")});
  }
  layout->norm_w = idx("norm.weight");
  layout->norm_b = idx("norm.bias");
  layout->head_proj_w = idx("head.proj.weight");
  layout->head_proj_b = idx("head.proj.bias");
  layout->conv1_w = idx("head.conv1.weight");
  layout->conv1_b = idx("head.conv1.bias");
  layout->out_w = idx("head.out.weight");
  layout->out_b = idx("head.out.bias");
  layout->up_rows = bilinear_matrix<T>(config_.grid_height(), config_.patch_size);
  layout->up_cols = bilinear_matrix<T>(config_.grid_width(), config_.patch_size);
  layout_ = std::move(layout);
}

template <typename T>
Parameter<T>& DepthModel<T>::parameter(std::string_view name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw std::out_of_range("no parameter named " + std::string(name));
}

template <typename T>
const Parameter<T>& DepthModel<T>::parameter(std::string_view name) const {
  return const_cast<DepthModel*>(this)->parameter(name);
}

template <typename T>
size_t DepthModel<T>::parameter_count() const {
  size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

template <typename T>
void DepthModel<T>::zero_grad() {
  for (auto& p : params_) std::fill(p.grad.begin(), p.grad.end(), T(0));
}

template <typename T>
std::vector<HeadOutput<T>> DepthModel<T>::predict(std::span<const Mat<T>> inputs) const {
  return run(inputs, nullptr);
}

template <typename T>
std::vector<HeadOutput<T>> DepthModel<T>::forward(std::span<const Mat<T>> inputs) {
  cache_ = std::make_shared<Cache>();
  return run(inputs, cache_.get());
}

template <typename T>
std::vector<HeadOutput<T>> DepthModel<T>::run(std::span<const Mat<T>> inputs,
                                              Cache* cache) const {
  const auto& L = *layout_;
  const auto& cfg = config_;
  const int batch = static_cast<int>(inputs.size());
  const int n_tok = cfg.num_tokens();
  const int p = cfg.patch_size;
  const int c_in = cfg.input_channels;
  const int h = cfg.image_height;
  const int w = cfg.image_width;
  const int gw = cfg.grid_width();
  const int hw = h * w;
  for (const auto& x : inputs) {
    if (x.rows() != c_in || x.cols() != hw) {
      throw std::invalid_argument("model input must be " + std::to_string(c_in) + " x " +
                                  std::to_string(h) + "*" + std::to_string(w));
    }
  }

  // Patch embedding as a matrix product over flattened patches.
  Mat<T> patches(static_cast<Eigen::Index>(batch) * n_tok, c_in * p * p);
  for (int b = 0; b < batch; ++b) {
    for (int t = 0; t < n_tok; ++t) {
      const int gy = t / gw, gx = t % gw;
      for (int c = 0; c < c_in; ++c) {
        for (int ky = 0; ky < p; ++ky) {
          for (int kx = 0; kx < p; ++kx) {
            patches(b * n_tok + t, (c * p + ky) * p + kx) =
                inputs[b](c, (gy * p + ky) * w + gx * p + kx);
          }
        }
      }
    }
  }
  Mat<T> x = linear_forward<T>(patches, as_matrix(params_[L.embed_w]),
                               as_row(params_[L.embed_b]));
  const auto pos = as_matrix(params_[L.pos]);
  for (int b = 0; b < batch; ++b) x.middleRows(b * n_tok, n_tok) += pos;
  if (cache) {
    cache->batch = batch;
    cache->inputs.assign(inputs.begin(), inputs.end());
    cache->patches = std::move(patches);
    cache->blocks.resize(L.blocks.size());
  }

  for (size_t l = 0; l < L.blocks.size(); ++l) {
    const auto& B = L.blocks[l];
    typename Cache::BlockCache local;
    auto& bc = cache ? cache->blocks[l] : local;
    LayerNormCache<T>* ln1c = cache ? &bc.ln1 : nullptr;
    LayerNormCache<T>* ln2c = cache ? &bc.ln2 : nullptr;
    AttentionCache<T>* atc = cache ? &bc.attn : nullptr;

    Mat<T> ln1 = layer_norm_forward<T>(x, as_row(params_[B.norm1_w]),
                                       as_row(params_[B.norm1_b]), ln1c);
    Mat<T> qkv = linear_forward<T>(ln1, as_matrix(params_[B.qkv_w]), as_row(params_[B.qkv_b]));
    Mat<T> attn = attention_forward<T>(qkv, batch, n_tok, cfg.num_heads, atc);
    Mat<T> x_mid = x + linear_forward<T>(attn, as_matrix(params_[B.proj_w]),
                                         as_row(params_[B.proj_b]));
    Mat<T> ln2 = layer_norm_forward<T>(x_mid, as_row(params_[B.norm2_w]),
                                       as_row(params_[B.norm2_b]), ln2c);
    Mat<T> fc1 = linear_forward<T>(ln2, as_matrix(params_[B.fc1_w]), as_row(params_[B.fc1_b]));
    Mat<T> act = gelu_forward<T>(fc1);
    Mat<T> x_out = x_mid + linear_forward<T>(act, as_matrix(params_[B.fc2_w]),
                                             as_row(params_[B.fc2_b]));
    if (cache) {
      bc.x_in = std::move(x);
      bc.ln1_out = std::move(ln1);
      bc.qkv = std::move(qkv);
      bc.attn_out = std::move(attn);
      bc.x_mid = std::move(x_mid);
      bc.ln2_out = std::move(ln2);
      bc.fc1_out = std::move(fc1);
      bc.act = std::move(act);
    }
    x = std::move(x_out);
  }

  Mat<T> tokens = layer_norm_forward<T>(x, as_row(params_[L.norm_w]), as_row(params_[L.norm_b]),
                                        cache ? &cache->ln_final : nullptr);
  Mat<T> head_tokens = linear_forward<T>(tokens, as_matrix(params_[L.head_proj_w]),
                                         as_row(params_[L.head_proj_b]));

  const int feat = cfg.head_features;
  const auto w1 = as_matrix(params_[L.conv1_w]);
  const auto b1 = as_row(params_[L.conv1_b]);
  const auto w2 = as_matrix(params_[L.out_w]);
  const auto b2 = as_row(params_[L.out_b]);
  std::vector<HeadOutput<T>> outputs(batch);
  if (cache) cache->images.resize(batch);
  for (int b = 0; b < batch; ++b) {
    Mat<T> x1(feat + 3, hw);
    for (int c = 0; c < feat; ++c) {
      using Strided = Eigen::Map<const Mat<T>, 0, Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>>;
      const Strided grid(head_tokens.data() + static_cast<Eigen::Index>(b) * n_tok * feat + c,
                         cfg.grid_height(), gw,
                         Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>(gw * feat, feat));
      Mat<T> up = L.up_rows * grid * L.up_cols.transpose();
      x1.row(c) = RowVecMap<T>(up.data(), hw);
    }
    x1.bottomRows(3) = inputs[b].topRows(3);
    Mat<T> cols1 = im2col3x3<T>(x1, h, w);
    Mat<T> z1 = w1 * cols1;
    z1.colwise() += b1.transpose();
    const Mat<T> a1 = z1.cwiseMax(T(0));
    Mat<T> cols2 = im2col3x3<T>(a1, h, w);
    Mat<T> z2 = w2 * cols2;
    z2.colwise() += b2.transpose();

    Mat<T> sig_depth = z2.row(0).unaryExpr([](T v) { return sigmoid(v); });
    outputs[b].d0 = MatMap<T>(sig_depth.data(), h, w) * T(cfg.max_depth);
    Mat<T> sig_weight;
    if (cfg.output_channels == 2) {
      sig_weight = z2.row(1).unaryExpr([](T v) { return sigmoid(v); });
      outputs[b].w = MatMap<T>(sig_weight.data(), h, w);
    }
    if (cache) {
      auto& ic = cache->images[b];
      ic.cols1 = std::move(cols1);
      ic.z1 = std::move(z1);
      ic.cols2 = std::move(cols2);
      ic.sig_depth = std::move(sig_depth);
      ic.sig_weight = std::move(sig_weight);
    }
  }
  if (cache) {
    cache->tokens_out = std::move(tokens);
    cache->head_tokens = std::move(head_tokens);
  }
  return outputs;
}

template <typename T>
void DepthModel<T>::backward(std::span<const Mat<T>> grad_d0,
                             std::span<const Mat<T>> grad_w,
                             std::vector<Mat<T>>* input_grads) {
  if (!cache_) throw std::logic_error("backward() without a preceding forward()");
  auto& C = *cache_;
  const auto& L = *layout_;
  const auto& cfg = config_;
  const int batch = C.batch;
  if (static_cast<int>(grad_d0.size()) != batch ||
      (!grad_w.empty() && static_cast<int>(grad_w.size()) != batch)) {
    throw std::invalid_argument("backward: gradient batch size mismatch");
  }
  const int n_tok = cfg.num_tokens();
  const int p = cfg.patch_size;
  const int c_in = cfg.input_channels;
  const int h = cfg.image_height;
  const int w = cfg.image_width;
  const int gh = cfg.grid_height();
  const int gw = cfg.grid_width();
  const int hw = h * w;
  const int feat = cfg.head_features;
  const int n_out = cfg.output_channels;

  if (input_grads) {
    input_grads->assign(batch, Mat<T>::Zero(c_in, hw));
  }
  Mat<T> d_head_tokens = Mat<T>::Zero(static_cast<Eigen::Index>(batch) * n_tok, feat);
  const auto w1 = as_matrix(params_[L.conv1_w]);
  const auto w2 = as_matrix(params_[L.out_w]);
  auto dw1 = grad_matrix(params_[L.conv1_w]);
  auto db1 = grad_row(params_[L.conv1_b]);
  auto dw2 = grad_matrix(params_[L.out_w]);
  auto db2 = grad_row(params_[L.out_b]);

  for (int b = 0; b < batch; ++b) {
    auto& ic = C.images[b];
    Mat<T> dz2(n_out, hw);
    {
      const ConstRowVecMap<T> g(grad_d0[b].data(), hw);
      dz2.row(0) = (g.array() * ic.sig_depth.array() * (T(1) - ic.sig_depth.array()) *
                    T(cfg.max_depth))
                       .matrix();
    }
    if (n_out == 2) {
      if (grad_w.empty()) {
        dz2.row(1).setZero();
      } else {
        const ConstRowVecMap<T> g(grad_w[b].data(), hw);
        dz2.row(1) =
            (g.array() * ic.sig_weight.array() * (T(1) - ic.sig_weight.array())).matrix();
      }
    }
    dw2.noalias() += dz2 * ic.cols2.transpose();
    db2 += dz2.rowwise().sum().transpose();
    Mat<T> da1 = col2im3x3<T>(w2.transpose() * dz2, cfg.head_hidden, h, w);
    Mat<T> dz1 = da1.cwiseProduct(
        ic.z1.unaryExpr([](T v) { return v > T(0) ? T(1) : T(0); }));
    dw1.noalias() += dz1 * ic.cols1.transpose();
    db1 += dz1.rowwise().sum().transpose();
    Mat<T> dx1 = col2im3x3<T>(w1.transpose() * dz1, feat + 3, h, w);
    if (input_grads) (*input_grads)[b].topRows(3) += dx1.bottomRows(3);
    for (int c = 0; c < feat; ++c) {
      const ConstMatMap<T> dup(dx1.row(c).data(), h, w);
      const Mat<T> dgrid = L.up_rows.transpose() * dup * L.up_cols;
      for (int t = 0; t < n_tok; ++t) {
        d_head_tokens(b * n_tok + t, c) += dgrid(t / gw, t % gw);
      }
    }
  }
  (void)gh;

  Mat<T> dx = linear_backward<T>(C.tokens_out, d_head_tokens,
                                 as_matrix(params_[L.head_proj_w]),
                                 grad_matrix(params_[L.head_proj_w]),
                                 grad_row(params_[L.head_proj_b]));
  dx = layer_norm_backward<T>(dx, C.ln_final, as_row(params_[L.norm_w]),
                              grad_row(params_[L.norm_w]), grad_row(params_[L.norm_b]));

  for (int l = static_cast<int>(L.blocks.size()) - 1; l >= 0; --l) {
    const auto& B = L.blocks[l];
    auto& bc = C.blocks[l];
    // x_out = x_mid + fc2(gelu(fc1(ln2(x_mid))))
    Mat<T> d_act = linear_backward<T>(bc.act, dx, as_matrix(params_[B.fc2_w]),
                                      grad_matrix(params_[B.fc2_w]), grad_row(params_[B.fc2_b]));
    Mat<T> d_fc1 = gelu_backward<T>(bc.fc1_out, d_act);
    Mat<T> d_ln2 = linear_backward<T>(bc.ln2_out, d_fc1, as_matrix(params_[B.fc1_w]),
                                      grad_matrix(params_[B.fc1_w]), grad_row(params_[B.fc1_b]));
    Mat<T> d_mid = dx + layer_norm_backward<T>(d_ln2, bc.ln2, as_row(params_[B.norm2_w]),
                                               grad_row(params_[B.norm2_w]),
                                               grad_row(params_[B.norm2_b]));
    // x_mid = x_in + proj(attn(qkv(ln1(x_in))))
    Mat<T> d_attn = linear_backward<T>(bc.attn_out, d_mid, as_matrix(params_[B.proj_w]),
                                       grad_matrix(params_[B.proj_w]),
                                       grad_row(params_[B.proj_b]));
    Mat<T> d_qkv = attention_backward<T>(bc.qkv, d_attn, batch, n_tok, cfg.num_heads, bc.attn);
    Mat<T> d_ln1 = linear_backward<T>(bc.ln1_out, d_qkv, as_matrix(params_[B.qkv_w]),
                                      grad_matrix(params_[B.qkv_w]), grad_row(params_[B.qkv_b]));
    dx = d_mid + layer_norm_backward<T>(d_ln1, bc.ln1, as_row(params_[B.norm1_w]),
                                        grad_row(params_[B.norm1_w]),
                                        grad_row(params_[B.norm1_b]));
  }

  auto dpos = grad_matrix(params_[L.pos]);
  for (int b = 0; b < batch; ++b) dpos += dx.middleRows(b * n_tok, n_tok);
  Mat<T> d_patches = linear_backward<T>(C.patches, dx, as_matrix(params_[L.embed_w]),
                                        grad_matrix(params_[L.embed_w]),
                                        grad_row(params_[L.embed_b]));
  if (input_grads) {
    for (int b = 0; b < batch; ++b) {
      auto& g = (*input_grads)[b];
      for (int t = 0; t < n_tok; ++t) {
        const int gy = t / gw, gx = t % gw;
        for (int c = 0; c < c_in; ++c) {
          for (int ky = 0; ky < p; ++ky) {
            for (int kx = 0; kx < p; ++kx) {
              g(c, (gy * p + ky) * w + gx * p + kx) +=
                  d_patches(b * n_tok + t, (c * p + ky) * p + kx);
            }
          }
        }
      }
    }
  }
}

template <typename T>
template <typename U>
DepthModel<U> DepthModel<T>::cast() const {
  std::vector<Parameter<U>> params;
  params.reserve(params_.size());
  for (const auto& p : params_) {
    Parameter<U> q;
    q.name = p.name;
    q.shape = p.shape;
    q.value.assign(p.value.begin(), p.value.end());
    q.grad.assign(p.size(), U(0));
    params.push_back(std::move(q));
  }
  return DepthModel<U>::from_parameters(config_, std::move(params), added_);
}

template <typename T>
DepthModel<T> DepthModel<T>::from_parameters(const ModelConfig& config,
                                             std::vector<Parameter<T>> params,
                                             std::vector<ParamSlice> added) {
  // Reference architecture, used to check names and shapes.
  const DepthModel<T> reference(config, 0);
  if (params.size() != reference.params_.size()) {
    throw std::invalid_argument("parameter count does not match the architecture");
  }
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& ref = reference.params_[i];
    if (params[i].name != ref.name || params[i].shape != ref.shape ||
        params[i].value.size() != ref.value.size()) {
      throw std::invalid_argument("parameter '" + params[i].name +
                                  "' does not match the architecture (expected '" +
                                  ref.name + "')");
    }
    params[i].grad.assign(params[i].value.size(), T(0));
  }
  for (const auto& s : added) {
    const auto it = std::find_if(params.begin(), params.end(),
                                 [&](const Parameter<T>& p) { return p.name == s.name; });
    if (it == params.end() || s.offset + s.count > it->size()) {
      throw std::invalid_argument("added slice '" + s.name + "' is out of range");
    }
  }
  DepthModel<T> m;
  m.config_ = config;
  m.params_ = std::move(params);
  m.added_ = std::move(added);
  m.build_layout();
  return m;
}

template class DepthModel<float>;
template class DepthModel<double>;
template DepthModel<double> DepthModel<float>::cast<double>() const;
template DepthModel<float> DepthModel<double>::cast<float>() const;
template DepthModel<float> DepthModel<float>::cast<float>() const;
template DepthModel<double> DepthModel<double>::cast<double>() const;

// ---------------------------------------------------------------------------

template <typename T>
ParamGroups param_groups(const DepthModel<T>& model) {
  ParamGroups groups;
  for (const auto& p : model.parameters()) {
    // Collect the added ranges of this parameter, sorted by offset.
    std::vector<ParamSlice> mine;
    for (const auto& s : model.added_slices()) {
      if (s.name == p.name && s.count > 0) mine.push_back(s);
    }
    std::sort(mine.begin(), mine.end(),
              [](const ParamSlice& a, const ParamSlice& b) { return a.offset < b.offset; });
    size_t cursor = 0;
    for (const auto& s : mine) {
      if (s.offset < cursor) throw std::logic_error("overlapping added slices in " + p.name);
      if (s.offset > cursor) groups.pretrained.push_back({p.name, cursor, s.offset - cursor});
      groups.added.push_back(s);
      cursor = s.offset + s.count;
    }
    if (cursor < p.size()) groups.pretrained.push_back({p.name, cursor, p.size() - cursor});
  }
  return groups;
}

template <typename T>
ConvKernel patch_embedding_kernel(const DepthModel<T>& model) {
  const auto& p = model.parameter("patch_embed.weight");
  const auto& b = model.parameter("patch_embed.bias");
  ConvKernel k;
  k.out_channels = p.shape[0];
  k.in_channels = p.shape[1];
  k.kernel = p.shape[2];
  k.weights.assign(p.value.begin(), p.value.end());
  k.bias.assign(b.value.begin(), b.value.end());
  return k;
}

template <typename T>
void set_patch_embedding_kernel(DepthModel<T>& model, const ConvKernel& kernel) {
  auto& p = model.parameter("patch_embed.weight");
  auto& b = model.parameter("patch_embed.bias");
  if (kernel.out_channels != p.shape[0] || kernel.in_channels != p.shape[1] ||
      kernel.kernel != p.shape[2] || kernel.weights.size() != p.size() ||
      kernel.bias.size() != b.size()) {
    throw std::invalid_argument("patch embedding kernel shape mismatch");
  }
  for (size_t i = 0; i < p.size(); ++i) p.value[i] = T(kernel.weights[i]);
  for (size_t i = 0; i < b.size(); ++i) b.value[i] = T(kernel.bias[i]);
}

template <typename T>
DepthModel<T> extend_model(const DepthModel<T>& pretrained, uint64_t init_seed,
                           double init_scale) {
  const ModelConfig& src = pretrained.config();
  if (src.input_channels != 3 || src.output_channels != 1) {
    throw std::invalid_argument("extend_model: expected an RGB model with one output channel");
  }
  ModelConfig cfg = src;
  cfg.input_channels = 4;
  cfg.output_channels = 2;

  std::vector<Parameter<T>> params = pretrained.parameters();
  std::vector<ParamSlice> added;
  for (auto& p : params) std::fill(p.grad.begin(), p.grad.end(), T(0));

  // Radar input slice of the patch embedding.
  const ConvKernel k4 =
      extend_patch_embedding(patch_embedding_kernel(pretrained), init_seed, init_scale);
  const size_t k2 = static_cast<size_t>(k4.kernel) * k4.kernel;
  for (auto& p : params) {
    if (p.name != "patch_embed.weight") continue;
    p.shape[1] = 4;
    p.value.assign(k4.weights.begin(), k4.weights.end());
    p.grad.assign(p.value.size(), T(0));
    for (int o = 0; o < k4.out_channels; ++o) {
      added.push_back({p.name, o * 4 * k2 + 3 * k2, k2});
    }
  }

  // Fusion-weight output channel: a second filter next to the depth filter.
  std::mt19937_64 rng(derive_seed(init_seed, {0x0E7}));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& p : params) {
    if (p.name == "head.out.weight") {
      const size_t per_channel = p.size();
      double sq = 0.0;
      for (T v : p.value) sq += double(v) * double(v);
      const double stddev = std::sqrt(sq / static_cast<double>(per_channel));
      p.shape[0] = 2;
      for (size_t i = 0; i < per_channel; ++i) p.value.push_back(T(stddev * normal(rng)));
      p.grad.assign(p.value.size(), T(0));
      added.push_back({p.name, per_channel, per_channel});
    } else if (p.name == "head.out.bias") {
      p.shape[0] = 2;
      p.value.push_back(T(0));
      p.grad.assign(p.value.size(), T(0));
      added.push_back({p.name, 1, 1});
    }
  }
  return DepthModel<T>::from_parameters(cfg, std::move(params), std::move(added));
}

template <typename T>
Mat<T> make_network_input(const RgbImage& rgb, const DepthMap& sparse_depth,
                          const ModelConfig& config) {
  const int h = config.image_height;
  const int w = config.image_width;
  if (rgb.height() != h || rgb.width() != w) {
    throw std::invalid_argument("image size does not match the model (" + std::to_string(w) +
                                "x" + std::to_string(h) + ")");
  }
  Mat<T> x(config.input_channels, static_cast<Eigen::Index>(h) * w);
  for (int c = 0; c < 3; ++c) {
    x.row(c) = (ConstRowVecMap<float>(rgb.channels[c].data(), h * w).template cast<T>().array() *
                    T(2) -
                T(1))
                   .matrix();
  }
  if (config.input_channels == 4) {
    if (sparse_depth.rows() != h || sparse_depth.cols() != w) {
      throw std::invalid_argument("sparse depth size does not match the model");
    }
    if ((sparse_depth.array() < 0.0).any() || !sparse_depth.allFinite()) {
      throw std::invalid_argument("sparse depth must be finite and >= 0");
    }
    x.row(3) = (ConstRowVecMap<double>(sparse_depth.data(), h * w) / config.max_depth)
                   .template cast<T>();
  }
  return x;
}

template ParamGroups param_groups(const DepthModel<float>&);
template ParamGroups param_groups(const DepthModel<double>&);
template DepthModel<float> extend_model(const DepthModel<float>&, uint64_t, double);
template DepthModel<double> extend_model(const DepthModel<double>&, uint64_t, double);
template ConvKernel patch_embedding_kernel(const DepthModel<float>&);
template ConvKernel patch_embedding_kernel(const DepthModel<double>&);
template void set_patch_embedding_kernel(DepthModel<float>&, const ConvKernel&);
template void set_patch_embedding_kernel(DepthModel<double>&, const ConvKernel&);
template Mat<float> make_network_input(const RgbImage&, const DepthMap&, const ModelConfig&);
template Mat<double> make_network_input(const RgbImage&, const DepthMap&, const ModelConfig&);

// ---------------------------------------------------------------------------

DepthMap fuse(const DepthMap& d0, const DepthMap& w,
              std::span<const PixelObservation> observations) {
  if (d0.rows() != w.rows() || d0.cols() != w.cols()) {
    throw std::invalid_argument("fuse: d0 and w must have the same shape");
  }
  const auto mean = radar_mean_depth(observations);
  if (!mean) return d0;
  if ((w.array() < 0.0).any() || (w.array() > 1.0).any()) {
    throw std::invalid_argument("fuse: weights must lie in [0, 1]");
  }
  return (d0.array() * w.array() + (1.0 - w.array()) * *mean).matrix();
}

double naive_scale_factor(const DepthMap& relative_depth,
                          std::span<const PixelObservation> observations) {
  if (observations.empty()) {
    throw std::invalid_argument("naive_scale: needs at least one radar observation");
  }
  double sum = 0.0;
  for (const auto& o : observations) {
    const long row = std::lround(o.v);
    const long col = std::lround(o.u);
    if (row < 0 || row >= relative_depth.rows() || col < 0 || col >= relative_depth.cols()) {
      throw std::invalid_argument("naive_scale: observation outside the depth map");
    }
    const double rel = relative_depth(row, col);
    if (!(rel > 0.0)) {
      throw std::invalid_argument("naive_scale: relative depth must be > 0 at observations");
    }
    sum += o.depth / rel;
  }
  return sum / static_cast<double>(observations.size());
}

DepthMap naive_scale(const DepthMap& relative_depth,
                     std::span<const PixelObservation> observations) {
  return naive_scale_factor(relative_depth, observations) * relative_depth;
}

FusionOutput predict_fused(const DepthModel<float>& model, const RgbImage& rgb,
                           const DepthMap& sparse_depth,
                           std::span<const PixelObservation> observations) {
  const Mat<float> input = make_network_input<float>(rgb, sparse_depth, model.config());
  const auto out = model.predict(std::span<const Mat<float>>(&input, 1));
  FusionOutput result;
  result.d0 = out[0].d0.cast<double>();
  if (model.config().output_channels == 2) {
    result.w = out[0].w.cast<double>();
    result.fused = fuse(result.d0, result.w, observations);
  } else {
    result.w = DepthMap::Ones(result.d0.rows(), result.d0.cols());
    result.fused = result.d0;
  }
  return result;
}

// ---------------------------------------------------------------------------

namespace {
constexpr char kMagic[8] = {'R', 'D', 'P', 'A', 'R', 'A', 'M', '1'};
}

void save_checkpoint(const std::filesystem::path& stem, const DepthModel<float>& model) {
  auto params_path = stem;
  params_path += ".params";
  auto manifest_path = stem;
  manifest_path += ".json";
  {
    std::ofstream out(params_path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + params_path.string());
    out.write(kMagic, sizeof(kMagic));
    const uint64_t count = model.parameters().size();
    out.write(reinterpret_cast<const char*>(&count), sizeof(count));
    for (const auto& p : model.parameters()) {
      const uint32_t name_len = static_cast<uint32_t>(p.name.size());
      out.write(reinterpret_cast<const char*>(&name_len), sizeof(name_len));
      out.write(p.name.data(), name_len);
      const uint32_t ndim = static_cast<uint32_t>(p.shape.size());
      out.write(reinterpret_cast<const char*>(&ndim), sizeof(ndim));
      for (int d : p.shape) {
        const int32_t d32 = d;
        out.write(reinterpret_cast<const char*>(&d32), sizeof(d32));
      }
      const uint64_t n = p.size();
      out.write(reinterpret_cast<const char*>(&n), sizeof(n));
      for (float v : p.value) {
        const double dv = v;
        out.write(reinterpret_cast<const char*>(&dv), sizeof(dv));
      }
    }
    if (!out) throw std::runtime_error("write failed for " + params_path.string());
  }
  const ParamGroups groups = param_groups(model);
  nlohmann::json j;
  j["config"] = model.config();
  j["param_groups"]["pretrained"] = groups.pretrained;
  j["param_groups"]["added"] = groups.added;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& p : model.parameters()) {
    entries.push_back({{"name", p.name}, {"shape", p.shape}});
  }
  j["parameters"] = entries;
  std::ofstream out(manifest_path);
  if (!out) throw std::runtime_error("cannot write " + manifest_path.string());
  out << j.dump(2) << "\n";
}

DepthModel<float> load_checkpoint(const std::filesystem::path& stem) {
  auto params_path = stem;
  params_path += ".params";
  auto manifest_path = stem;
  manifest_path += ".json";
  std::ifstream mf(manifest_path);
  if (!mf) throw std::runtime_error("cannot open " + manifest_path.string());
  nlohmann::json j;
  try {
    mf >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(manifest_path.string() + ": " + e.what());
  }
  const ModelConfig config = j.at("config").get<ModelConfig>();
  const auto added = j.at("param_groups").at("added").get<std::vector<ParamSlice>>();

  std::ifstream in(params_path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + params_path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || !std::equal(magic, magic + 8, kMagic)) {
    throw std::runtime_error(params_path.string() + ": not a parameter archive");
  }
  uint64_t count = 0;
  in.read(reinterpret_cast<char*>(&count), sizeof(count));
  std::vector<Parameter<float>> params;
  for (uint64_t i = 0; i < count && in; ++i) {
    Parameter<float> p;
    uint32_t name_len = 0;
    in.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
    p.name.resize(name_len);
    in.read(p.name.data(), name_len);
    uint32_t ndim = 0;
    in.read(reinterpret_cast<char*>(&ndim), sizeof(ndim));
    for (uint32_t k = 0; k < ndim; ++k) {
      int32_t d = 0;
      in.read(reinterpret_cast<char*>(&d), sizeof(d));
      p.shape.push_back(d);
    }
    uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), sizeof(n));
    p.value.resize(n);
    for (uint64_t k = 0; k < n; ++k) {
      double v = 0.0;
      in.read(reinterpret_cast<char*>(&v), sizeof(v));
      p.value[k] = static_cast<float>(v);
    }
    params.push_back(std::move(p));
  }
  if (!in) throw std::runtime_error(params_path.string() + ": truncated archive");
  return DepthModel<float>::from_parameters(config, std::move(params), added);
}

}  // namespace radepth
