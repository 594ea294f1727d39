#include "transpose/backbone.hpp"

#include <cmath>
#include <stdexcept>

namespace transpose {

std::string to_string(BackboneKind kind) {
  return kind == BackboneKind::TinyStem ? "TinyStem" : "ResNetS";
}

BackboneKind backbone_from_string(const std::string& name) {
  if (name == "TinyStem") return BackboneKind::TinyStem;
  if (name == "ResNetS") return BackboneKind::ResNetS;
  throw std::invalid_argument("unknown backbone: " + name);
}

int backbone_rate(BackboneKind kind) {
  return kind == BackboneKind::TinyStem ? 4 : 8;
}

namespace {

ConvParams make_conv(int co, int ci, int k, int stride, int padding, bool bias, Rng& rng) {
  ConvParams p;
  p.stride = stride;
  p.padding = padding;
  p.w = Tensor::zeros({co, ci, k, k}, true);
  const double he = std::sqrt(2.0 / (static_cast<double>(ci) * k * k));
  for (double& v : p.w.value()) v = rng.normal(0.0, he);
  if (bias) p.b = Tensor::zeros({co}, true);
  return p;
}

NormParams make_norm(int channels) {
  NormParams n;
  n.gamma = Tensor::full({channels}, 1.0);
  n.gamma.set_requires_grad(true);
  n.beta = Tensor::zeros({channels}, true);
  return n;
}

BottleneckParams make_bottleneck(int in_ch, int mid_ch, int stride, Rng& rng) {
  const int out_ch = mid_ch * 4;
  BottleneckParams b;
  b.conv1 = make_conv(mid_ch, in_ch, 1, 1, 0, false, rng);
  b.bn1 = make_norm(mid_ch);
  b.conv2 = make_conv(mid_ch, mid_ch, 3, stride, 1, false, rng);
  b.bn2 = make_norm(mid_ch);
  b.conv3 = make_conv(out_ch, mid_ch, 1, 1, 0, false, rng);
  b.bn3 = make_norm(out_ch);
  if (stride != 1 || in_ch != out_ch) {
    b.down = make_conv(out_ch, in_ch, 1, stride, 0, false, rng);
    b.down_bn = make_norm(out_ch);
  }
  return b;
}

Tensor bottleneck_forward(const BottleneckParams& b, const Tensor& x, Tape* tape) {
  Tensor y = relu(channel_affine(conv2d(x, b.conv1.w, b.conv1.b, 1, 0, tape),
                                 b.bn1.gamma, b.bn1.beta, tape), tape);
  y = relu(channel_affine(conv2d(y, b.conv2.w, b.conv2.b, b.conv2.stride, 1, tape),
                          b.bn2.gamma, b.bn2.beta, tape), tape);
  y = channel_affine(conv2d(y, b.conv3.w, b.conv3.b, 1, 0, tape),
                     b.bn3.gamma, b.bn3.beta, tape);
  Tensor shortcut = x;
  if (b.down.w.defined()) {
    shortcut = channel_affine(conv2d(x, b.down.w, b.down.b, b.down.stride, 0, tape),
                              b.down_bn.gamma, b.down_bn.beta, tape);
  }
  return relu(add(y, shortcut, tape), tape);
}

}  // namespace

BackboneParams init_backbone(BackboneKind kind, int model_dim, Rng& rng) {
  BackboneParams p;
  p.kind = kind;
  if (kind == BackboneKind::TinyStem) {
    if (model_dim % 2 != 0) {
      throw std::invalid_argument("TinyStem needs an even model width");
    }
    p.stem1 = make_conv(model_dim / 2, 3, 3, 2, 1, true, rng);
    p.stem2 = make_conv(model_dim, model_dim / 2, 3, 2, 1, true, rng);
    return p;
  }
  p.stem = make_conv(64, 3, 7, 2, 3, false, rng);
  p.stem_bn = make_norm(64);
  p.blocks.push_back(make_bottleneck(64, 64, 1, rng));
  p.blocks.push_back(make_bottleneck(256, 64, 1, rng));
  p.blocks.push_back(make_bottleneck(256, 64, 1, rng));
  p.blocks.push_back(make_bottleneck(256, 128, 2, rng));
  p.blocks.push_back(make_bottleneck(512, 128, 1, rng));
  p.blocks.push_back(make_bottleneck(512, 128, 1, rng));
  p.blocks.push_back(make_bottleneck(512, 128, 1, rng));
  p.reduce = make_conv(model_dim, 512, 1, 1, 0, false, rng);
  p.reduce_bn = make_norm(model_dim);
  return p;
}

Tensor backbone_forward(const BackboneParams& p, const Tensor& image, Tape* tape) {
  if (!image.defined() || image.ndim() != 3 || image.dim(0) != 3) {
    throw std::invalid_argument(
        "backbone expects a [3 x H x W] image, got " +
        (image.defined() ? shape_str(image.shape()) : std::string("<empty>")));
  }
  if (p.kind == BackboneKind::TinyStem) {
    Tensor y = relu(conv2d(image, p.stem1.w, p.stem1.b, 2, 1, tape), tape);
    return relu(conv2d(y, p.stem2.w, p.stem2.b, 2, 1, tape), tape);
  }
  Tensor y = relu(channel_affine(conv2d(image, p.stem.w, p.stem.b, 2, 3, tape),
                                 p.stem_bn.gamma, p.stem_bn.beta, tape), tape);
  y = maxpool2d(y, 3, 2, 1, tape);
  for (const auto& block : p.blocks) y = bottleneck_forward(block, y, tape);
  return relu(channel_affine(conv2d(y, p.reduce.w, p.reduce.b, 1, 0, tape),
                             p.reduce_bn.gamma, p.reduce_bn.beta, tape), tape);
}

void collect_backbone_params(const BackboneParams& p,
                             std::vector<std::pair<std::string, Tensor>>* out) {
  auto push = [out](const std::string& name, const Tensor& t) {
    if (t.defined()) out->emplace_back(name, t);
  };
  if (p.kind == BackboneKind::TinyStem) {
    push("backbone.stem1.w", p.stem1.w);
    push("backbone.stem1.b", p.stem1.b);
    push("backbone.stem2.w", p.stem2.w);
    push("backbone.stem2.b", p.stem2.b);
    return;
  }
  push("backbone.stem.w", p.stem.w);
  push("backbone.stem_bn.gamma", p.stem_bn.gamma);
  push("backbone.stem_bn.beta", p.stem_bn.beta);
  for (size_t i = 0; i < p.blocks.size(); ++i) {
    const auto& b = p.blocks[i];
    const std::string base = "backbone.block" + std::to_string(i);
    push(base + ".conv1.w", b.conv1.w);
    push(base + ".bn1.gamma", b.bn1.gamma);
    push(base + ".bn1.beta", b.bn1.beta);
    push(base + ".conv2.w", b.conv2.w);
    push(base + ".bn2.gamma", b.bn2.gamma);
    push(base + ".bn2.beta", b.bn2.beta);
    push(base + ".conv3.w", b.conv3.w);
    push(base + ".bn3.gamma", b.bn3.gamma);
    push(base + ".bn3.beta", b.bn3.beta);
    push(base + ".down.w", b.down.w);
    push(base + ".down_bn.gamma", b.down_bn.gamma);
    push(base + ".down_bn.beta", b.down_bn.beta);
  }
  push("backbone.reduce.w", p.reduce.w);
  push("backbone.reduce_bn.gamma", p.reduce_bn.gamma);
  push("backbone.reduce_bn.beta", p.reduce_bn.beta);
}

}  // namespace transpose
