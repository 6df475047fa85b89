#pragma once

#include <nlohmann/json.hpp>

#include "radepth/fusion_net.hpp"

namespace radepth {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ModelConfig, image_height, image_width, patch_size,
                                   embed_dim, num_heads, num_blocks, mlp_ratio,
                                   head_features, head_hidden, input_channels,
                                   output_channels, max_depth)

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ParamSlice, name, offset, count)

}  // namespace radepth
