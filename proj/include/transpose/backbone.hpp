#pragma once

#include <string>
#include <vector>

#include "transpose/ops.hpp"
#include "transpose/rng.hpp"
#include "transpose/tensor.hpp"

namespace transpose {

enum class BackboneKind { TinyStem, ResNetS };

std::string to_string(BackboneKind kind);
BackboneKind backbone_from_string(const std::string& name);

// input pixels per feature cell
int backbone_rate(BackboneKind kind);

struct ConvParams {
  Tensor w;  // [Co x Ci x kh x kw]
  Tensor b;  // undefined for conv+norm layers
  int stride = 1;
  int padding = 0;
};

// Batch norm folded to a per-channel affine; never trained here.
struct NormParams {
  Tensor gamma, beta;
};

struct BottleneckParams {
  ConvParams conv1, conv2, conv3;
  NormParams bn1, bn2, bn3;
  ConvParams down;  // projection shortcut; w undefined when identity
  NormParams down_bn;
};

struct BackboneParams {
  BackboneKind kind = BackboneKind::TinyStem;
  // TinyStem: two stride-2 3x3 convolutions with bias + ReLU
  ConvParams stem1, stem2;
  // ResNetS: 7x7 stem, 3x3 max pool, bottleneck stack, 1x1 reduce to d
  ConvParams stem;
  NormParams stem_bn;
  std::vector<BottleneckParams> blocks;
  ConvParams reduce;
  NormParams reduce_bn;
};

BackboneParams init_backbone(BackboneKind kind, int model_dim, Rng& rng);

// image [3 x H x W] -> features [model_dim x H/r x W/r]
Tensor backbone_forward(const BackboneParams& params, const Tensor& image, Tape* tape);

void collect_backbone_params(const BackboneParams& params,
                             std::vector<std::pair<std::string, Tensor>>* out);

}  // namespace transpose
