#include "transpose/model.hpp"

#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace transpose {

using nlohmann::json;

std::string to_string(HeadUpsample u) {
  switch (u) {
    case HeadUpsample::None: return "None";
    case HeadUpsample::Bilinear: return "Bilinear";
    case HeadUpsample::Deconv: return "Deconv";
  }
  return "?";
}

HeadUpsample head_upsample_from_string(const std::string& name) {
  if (name == "None") return HeadUpsample::None;
  if (name == "Bilinear") return HeadUpsample::Bilinear;
  if (name == "Deconv") return HeadUpsample::Deconv;
  throw std::invalid_argument("unknown head upsampling: " + name);
}

void ModelConfig::validate() const {
  if (r != backbone_rate(backbone)) {
    throw std::invalid_argument("backbone " + to_string(backbone) + " implies r=" +
                                std::to_string(backbone_rate(backbone)) + ", config says r=" +
                                std::to_string(r));
  }
  if (layers < 1) throw std::invalid_argument("need at least one encoder layer");
  if (dim % 4 != 0) throw std::invalid_argument("model width must be divisible by 4");
  if (heads < 1 || dim % heads != 0) {
    throw std::invalid_argument("model width " + std::to_string(dim) +
                                " not divisible by heads " + std::to_string(heads));
  }
  if (ffn_dim < 1) throw std::invalid_argument("FFN width must be positive");
  if (keypoints < 1) throw std::invalid_argument("keypoint count must be positive");
  if (input_h % r != 0 || input_w % r != 0 || input_h % 4 != 0 || input_w % 4 != 0) {
    throw std::invalid_argument("input extents " + std::to_string(input_h) + "x" +
                                std::to_string(input_w) + " must be divisible by r=" +
                                std::to_string(r) + " and by 4");
  }
  if (dropout_p < 0.0 || dropout_p >= 1.0) {
    throw std::invalid_argument("dropout probability must lie in [0,1)");
  }
  // The head has to bridge the attention grid (1/r) to the heatmap grid (1/4).
  if (r == 4 && head_upsample != HeadUpsample::None) {
    throw std::invalid_argument("r=4 needs head_upsample=None");
  }
  if (r == 8 && head_upsample == HeadUpsample::None) {
    throw std::invalid_argument("r=8 needs Deconv or Bilinear head upsampling");
  }
}

std::string ModelConfig::to_json() const {
  json j;
  j["backbone"] = transpose::to_string(backbone);
  j["r"] = r;
  j["N"] = layers;
  j["d"] = dim;
  j["heads"] = heads;
  j["h"] = ffn_dim;
  j["pe_kind"] = transpose::to_string(pe_kind);
  j["head_upsample"] = transpose::to_string(head_upsample);
  j["K"] = keypoints;
  j["input_h"] = input_h;
  j["input_w"] = input_w;
  j["dropout_p"] = dropout_p;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  static const char* known[] = {"backbone", "r", "N", "d", "heads", "h", "pe_kind",
                                "head_upsample", "K", "input_h", "input_w", "dropout_p"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw std::invalid_argument("unknown model config key: " + it.key());
  }
  ModelConfig c;
  if (j.contains("backbone")) c.backbone = backbone_from_string(j["backbone"].get<std::string>());
  c.r = j.value("r", backbone_rate(c.backbone));
  if (j.contains("N")) c.layers = j["N"].get<int>();
  if (j.contains("d")) c.dim = j["d"].get<int>();
  if (j.contains("heads")) c.heads = j["heads"].get<int>();
  if (j.contains("h")) c.ffn_dim = j["h"].get<int>();
  if (j.contains("pe_kind")) c.pe_kind = pe_kind_from_string(j["pe_kind"].get<std::string>());
  if (j.contains("head_upsample"))
    c.head_upsample = head_upsample_from_string(j["head_upsample"].get<std::string>());
  if (j.contains("K")) c.keypoints = j["K"].get<int>();
  if (j.contains("input_h")) c.input_h = j["input_h"].get<int>();
  if (j.contains("input_w")) c.input_w = j["input_w"].get<int>();
  if (j.contains("dropout_p")) c.dropout_p = j["dropout_p"].get<double>();
  c.validate();
  return c;
}

Model build_model(const ModelConfig& config, uint64_t seed) {
  config.validate();
  Model m;
  m.config = config;

  Rng backbone_rng(Rng::mix(seed, 1));
  m.backbone = init_backbone(config.backbone, config.dim, backbone_rng);

  m.pe = make_pe(config.pe_kind, config.grid_h(), config.grid_w(), config.dim,
                 Rng::mix(seed, 2));

  for (int i = 0; i < config.layers; ++i) {
    Rng layer_rng(Rng::mix(seed, 16 + static_cast<uint64_t>(i)));
    m.layers.push_back(init_encoder_layer(config.dim, config.ffn_dim, config.heads,
                                          config.dropout_p, layer_rng));
  }

  Rng head_rng(Rng::mix(seed, 3));
  if (config.head_upsample == HeadUpsample::Deconv) {
    m.head_deconv_w = Tensor::zeros({config.dim, config.dim, 4, 4}, true);
    const double he = std::sqrt(2.0 / (static_cast<double>(config.dim) * 16));
    for (double& v : m.head_deconv_w.value()) v = head_rng.normal(0.0, he);
    m.head_deconv_b = Tensor::zeros({config.dim}, true);
  }
  m.head_w = Tensor::zeros({config.dim, config.keypoints}, true);
  const double he = std::sqrt(2.0 / config.dim);
  for (double& v : m.head_w.value()) v = head_rng.normal(0.0, he);
  m.head_b = Tensor::zeros({config.keypoints}, true);
  return m;
}

std::vector<std::pair<std::string, Tensor>> Model::parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  collect_backbone_params(backbone, &out);
  if (pe.kind == PeKind::Learnable) out.emplace_back("pe.table", pe.table);
  for (size_t i = 0; i < layers.size(); ++i) {
    const auto& p = layers[i];
    const std::string base = "encoder." + std::to_string(i);
    out.emplace_back(base + ".w_q", p.w_q);
    out.emplace_back(base + ".w_k", p.w_k);
    out.emplace_back(base + ".w_v", p.w_v);
    out.emplace_back(base + ".w_o", p.w_o);
    out.emplace_back(base + ".b_o", p.b_o);
    out.emplace_back(base + ".ffn_w1", p.ffn_w1);
    out.emplace_back(base + ".ffn_b1", p.ffn_b1);
    out.emplace_back(base + ".ffn_w2", p.ffn_w2);
    out.emplace_back(base + ".ffn_b2", p.ffn_b2);
    out.emplace_back(base + ".ln1_gamma", p.ln1_gamma);
    out.emplace_back(base + ".ln1_beta", p.ln1_beta);
    out.emplace_back(base + ".ln2_gamma", p.ln2_gamma);
    out.emplace_back(base + ".ln2_beta", p.ln2_beta);
  }
  if (head_deconv_w.defined()) {
    out.emplace_back("head.deconv.w", head_deconv_w);
    out.emplace_back("head.deconv.b", head_deconv_b);
  }
  out.emplace_back("head.linear.w", head_w);
  out.emplace_back("head.linear.b", head_b);
  return out;
}

ForwardResult forward(const Model& model, const Tensor& image,
                      const EncoderRunOptions& opt) {
  const ModelConfig& cfg = model.config;
  if (!image.defined() || image.ndim() != 3 || image.dim(0) != 3) {
    throw std::invalid_argument(
        "forward expects a [3 x H x W] image, got " +
        (image.defined() ? shape_str(image.shape()) : std::string("<empty>")));
  }
  const int h_in = image.dim(1), w_in = image.dim(2);
  if (h_in % cfg.r != 0 || w_in % cfg.r != 0 || h_in % 4 != 0 || w_in % 4 != 0) {
    throw std::invalid_argument("image extents " + std::to_string(h_in) + "x" +
                                std::to_string(w_in) + " must be divisible by r=" +
                                std::to_string(cfg.r) + " and by 4");
  }
  Tape* tape = opt.tape;

  Tensor feat = backbone_forward(model.backbone, image, tape);
  const int grid_h = feat.dim(1), grid_w = feat.dim(2);
  const PositionEmbedding pe = runtime_pe(model, grid_h, grid_w);

  ForwardResult result;
  Tensor x = seq_from_chw(feat, tape);
  Tensor encoded = encoder_forward(x, pe, model.layers, opt,
                                   opt.capture_attention ? &result.records : nullptr);

  Tensor grid = chw_from_seq(encoded, grid_h, grid_w, tape);
  if (cfg.head_upsample == HeadUpsample::Deconv) {
    grid = transposed_conv2d(grid, model.head_deconv_w, model.head_deconv_b, 2, 1, tape);
  } else if (cfg.head_upsample == HeadUpsample::Bilinear) {
    grid = bilinear_upsample(grid, 2, tape);
  }
  Tensor seq = seq_from_chw(grid, tape);
  Tensor scores = add_row_bias(matmul(seq, model.head_w, tape), model.head_b, tape);
  result.heatmaps = chw_from_seq(scores, grid.dim(1), grid.dim(2), tape);
  return result;
}

ForwardResult forward(const Model& model, const Tensor& image, bool capture_attention) {
  EncoderRunOptions opt;
  opt.capture_attention = capture_attention;
  return forward(model, image, opt);
}

PositionEmbedding runtime_pe(const Model& model, int grid_h, int grid_w) {
  if (model.pe.kind == PeKind::None) return PositionEmbedding{};
  if (grid_h == model.pe.source_h && grid_w == model.pe.source_w) return model.pe;
  return resample_pe(model.pe, grid_h, grid_w);
}

ParamCount count_params(const Model& model) {
  ParamCount count;
  for (const auto& [name, t] : model.parameters()) {
    if (name.rfind("backbone.", 0) == 0) {
      count.backbone += t.size();
    } else if (name.rfind("encoder.", 0) == 0) {
      count.encoder += t.size();
    } else if (name.rfind("head.", 0) == 0) {
      count.head += t.size();
    } else if (name == "pe.table") {
      count.pe_trainable += t.size();
    }
  }
  if (model.pe.kind == PeKind::Sine2D) count.pe_stored = model.pe.table.size();
  return count;
}

namespace detail {

// Same structure as build_model, every trainable value zeroed; the loader
// fills the blocks from the file.
Model build_model_skeleton(const ModelConfig& config) {
  Model m = build_model(config, 0);
  for (auto& [name, t] : m.parameters()) {
    (void)name;
    for (double& v : t.value()) v = 0.0;
  }
  return m;
}

}  // namespace detail

}  // namespace transpose
