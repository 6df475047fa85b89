#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "radepth/calib_radar.hpp"
#include "radepth/image.hpp"
#include "radepth/nn/layers.hpp"

namespace radepth {

using nn::Mat;

struct ModelConfig {
  int image_height = 48;
  int image_width = 64;
  int patch_size = 8;
  int embed_dim = 64;
  int num_heads = 4;
  int num_blocks = 4;
  int mlp_ratio = 4;
  int head_features = 8;  // token features upsampled to full resolution
  int head_hidden = 8;    // width of the 3x3 conv between upsampling and output
  int input_channels = 4;   // 3 = RGB, 4 = RGB + sparse radar depth
  int output_channels = 2;  // 1 = depth, 2 = depth + fusion weight
  double max_depth = 100.0; // meters; depth head is max_depth * sigmoid(raw)

  int grid_height() const { return image_height / patch_size; }
  int grid_width() const { return image_width / patch_size; }
  int num_tokens() const { return grid_height() * grid_width(); }

  // Throws std::invalid_argument on violated invariants.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Desk-scale presets "toy-S" and "toy-B".
ModelConfig model_preset(std::string_view name);

// Convolution kernel, weights laid out [out][in][k][k].
struct ConvKernel {
  int out_channels = 0;
  int in_channels = 0;
  int kernel = 0;
  std::vector<double> weights;
  std::vector<double> bias;

  double at(int o, int i, int ky, int kx) const {
    return weights[((static_cast<size_t>(o) * in_channels + i) * kernel + ky) * kernel + kx];
  }
};

// Adds a fourth input channel to a pretrained 3-channel kernel. RGB slices
// and the bias are copied verbatim; the new slice is drawn from
// N(0, (init_scale * rms(rgb slices))^2). init_scale = 0 zeroes it.
ConvKernel extend_patch_embedding(const ConvKernel& rgb_kernel, uint64_t init_seed,
                                  double init_scale = 0.01);

template <typename T>
struct Parameter {
  std::string name;
  std::vector<int> shape;
  // Aligned storage: Eigen kernels mapped over unaligned data round
  // differently, which would make results depend on heap addresses.
  std::vector<T, Eigen::aligned_allocator<T>> value;
  std::vector<T, Eigen::aligned_allocator<T>> grad;

  size_t size() const { return value.size(); }
};

// Contiguous element range of a named parameter.
struct ParamSlice {
  std::string name;
  size_t offset = 0;
  size_t count = 0;
  bool operator==(const ParamSlice&) const = default;
};

// Parameters that come from pretrained weights vs. those added on top.
struct ParamGroups {
  std::vector<ParamSlice> pretrained;
  std::vector<ParamSlice> added;
};

// Per-image network outputs; w is empty for single-output models.
template <typename T>
struct HeadOutput {
  Mat<T> d0;  // (height x width), meters
  Mat<T> w;   // (height x width), in (0, 1)
};

// Vision transformer depth model: patch embedding, pre-norm transformer
// blocks, and a convolutional head that upsamples token features to full
// resolution. Inputs are (channels x height*width) matrices built by
// make_network_input().
template <typename T>
class DepthModel {
 public:
  // Fresh model with random weights; every parameter is in the added group.
  DepthModel(const ModelConfig& config, uint64_t init_seed);

  const ModelConfig& config() const { return config_; }
  std::vector<Parameter<T>>& parameters() { return params_; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }
  Parameter<T>& parameter(std::string_view name);
  const Parameter<T>& parameter(std::string_view name) const;
  size_t parameter_count() const;

  // Slices added on top of pretrained weights (see param_groups()).
  const std::vector<ParamSlice>& added_slices() const { return added_; }
  void set_added_slices(std::vector<ParamSlice> slices) { added_ = std::move(slices); }

  // Inference; no state is kept.
  std::vector<HeadOutput<T>> predict(std::span<const Mat<T>> inputs) const;

  // Training forward pass; caches activations for backward().
  std::vector<HeadOutput<T>> forward(std::span<const Mat<T>> inputs);

  // Accumulates parameter gradients for the last forward() batch. grad_w may
  // be empty for single-output models. If input_grads is non-null it receives
  // d loss / d input for every image.
  void backward(std::span<const Mat<T>> grad_d0, std::span<const Mat<T>> grad_w,
                std::vector<Mat<T>>* input_grads = nullptr);

  void zero_grad();

  template <typename U>
  DepthModel<U> cast() const;

  // Builds a model with the given config and parameters (names and shapes
  // must match the architecture).
  static DepthModel from_parameters(const ModelConfig& config,
                                    std::vector<Parameter<T>> params,
                                    std::vector<ParamSlice> added);

 private:
  struct Cache;
  struct Layout;

  DepthModel() = default;
  void build_layout();
  std::vector<HeadOutput<T>> run(std::span<const Mat<T>> inputs, Cache* cache) const;

  ModelConfig config_;
  std::vector<Parameter<T>> params_;
  std::vector<ParamSlice> added_;
  std::shared_ptr<const Layout> layout_;
  std::shared_ptr<Cache> cache_;
};

extern template class DepthModel<float>;
extern template class DepthModel<double>;

// Parameter census of a model: every element is in exactly one group.
template <typename T>
ParamGroups param_groups(const DepthModel<T>& model);

// Extends a pretrained RGB depth model (3 inputs, 1 output) with the radar
// input channel and the fusion-weight output channel.
template <typename T>
DepthModel<T> extend_model(const DepthModel<T>& pretrained_rgb, uint64_t init_seed,
                           double init_scale = 0.01);

// Reads / writes the patch-embedding kernel of a model.
template <typename T>
ConvKernel patch_embedding_kernel(const DepthModel<T>& model);
template <typename T>
void set_patch_embedding_kernel(DepthModel<T>& model, const ConvKernel& kernel);

// Network input: RGB mapped to [-1, 1], radar depth divided by max_depth.
// `sparse_depth` is ignored for 3-channel models and may be empty.
template <typename T>
Mat<T> make_network_input(const RgbImage& rgb, const DepthMap& sparse_depth,
                          const ModelConfig& config);

// ---------------------------------------------------------------------------
// Output fusion.

struct FusionOutput {
  DepthMap d0;
  DepthMap w;
  DepthMap fused;
};

// fused = d0 * w + (1 - w) * mean(radar depths). With no observations the
// network depth is returned unchanged.
DepthMap fuse(const DepthMap& d0, const DepthMap& w,
              std::span<const PixelObservation> observations);

// Scale-corrected relative depth: s = mean(d_radar / d_rel at the rounded
// observation pixel), output = s * relative_depth.
DepthMap naive_scale(const DepthMap& relative_depth,
                     std::span<const PixelObservation> observations);
double naive_scale_factor(const DepthMap& relative_depth,
                          std::span<const PixelObservation> observations);

// Convenience: runs the model on one frame and fuses the result.
FusionOutput predict_fused(const DepthModel<float>& model, const RgbImage& rgb,
                           const DepthMap& sparse_depth,
                           std::span<const PixelObservation> observations);

// ---------------------------------------------------------------------------
// Checkpoints: "<stem>.params" holds named float64 arrays, "<stem>.json"
// holds the model config and the parameter-group assignment.

void save_checkpoint(const std::filesystem::path& stem, const DepthModel<float>& model);
DepthModel<float> load_checkpoint(const std::filesystem::path& stem);

}  // namespace radepth
