#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "transpose/backbone.hpp"
#include "transpose/encoder.hpp"
#include "transpose/posembed.hpp"

namespace transpose {

enum class HeadUpsample { None, Bilinear, Deconv };

std::string to_string(HeadUpsample u);
HeadUpsample head_upsample_from_string(const std::string& name);

struct ModelConfig {
  BackboneKind backbone = BackboneKind::TinyStem;
  int r = 4;            // input pixels per attention cell
  int layers = 2;       // encoder depth N
  int dim = 32;         // model width d
  int heads = 4;
  int ffn_dim = 64;     // FFN width h
  PeKind pe_kind = PeKind::Sine2D;
  HeadUpsample head_upsample = HeadUpsample::None;
  int keypoints = 4;    // K
  int input_h = 64;
  int input_w = 48;
  double dropout_p = 0.1;

  int grid_h() const { return input_h / r; }
  int grid_w() const { return input_w / r; }
  int heatmap_h() const { return input_h / 4; }
  int heatmap_w() const { return input_w / 4; }

  // throws std::invalid_argument on inconsistent settings
  void validate() const;

  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
};

struct Model {
  ModelConfig config;
  BackboneParams backbone;
  PositionEmbedding pe;
  std::vector<EncoderLayerParams> layers;
  Tensor head_deconv_w, head_deconv_b;  // Deconv upsampling only
  Tensor head_w, head_b;                // position-wise linear d -> K

  std::vector<std::pair<std::string, Tensor>> parameters() const;
};

struct ForwardResult {
  Tensor heatmaps;  // [K x H* x W*]
  std::vector<AttentionRecord> records;
};

Model build_model(const ModelConfig& config, uint64_t seed);

// Accepts any image extent divisible by the backbone rate (and by 4); the
// position embedding is rebuilt/resampled when the grid differs from the
// configured one.
ForwardResult forward(const Model& model, const Tensor& image,
                      const EncoderRunOptions& opt);
ForwardResult forward(const Model& model, const Tensor& image,
                      bool capture_attention = false);

struct ParamCount {
  int64_t backbone = 0;
  int64_t encoder = 0;
  int64_t head = 0;
  int64_t pe_trainable = 0;
  int64_t pe_stored = 0;  // fixed sine table values
  int64_t trainable() const { return backbone + encoder + head + pe_trainable; }
  int64_t total() const { return trainable() + pe_stored; }
};

ParamCount count_params(const Model& model);

// Position embedding for an arbitrary grid: the configured table when the
// extents match, otherwise rebuilt (Sine2D) or resampled (Learnable).
PositionEmbedding runtime_pe(const Model& model, int grid_h, int grid_w);

void save_model(const Model& model, const std::string& path);
Model load_model(const std::string& path);

namespace detail {
Model build_model_skeleton(const ModelConfig& config);
}

}  // namespace transpose

