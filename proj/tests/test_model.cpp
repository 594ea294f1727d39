#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "support/gradcheck.hpp"
#include "transpose/model.hpp"

using namespace transpose;
using transpose::testing::max_fd_rel_err;
using transpose::testing::probe_loss;
using transpose::testing::random_tensor;

namespace {

ModelConfig toy_config() {
  ModelConfig c;
  c.backbone = BackboneKind::TinyStem;
  c.r = 4;
  c.layers = 2;
  c.dim = 32;
  c.heads = 4;
  c.ffn_dim = 64;
  c.pe_kind = PeKind::Sine2D;
  c.head_upsample = HeadUpsample::None;
  c.keypoints = 4;
  c.input_h = 64;
  c.input_w = 48;
  return c;
}

ModelConfig tp_r_a3_config() {
  ModelConfig c;
  c.backbone = BackboneKind::ResNetS;
  c.r = 8;
  c.layers = 3;
  c.dim = 256;
  c.heads = 8;
  c.ffn_dim = 1024;
  c.pe_kind = PeKind::Sine2D;
  c.head_upsample = HeadUpsample::Deconv;
  c.keypoints = 17;
  c.input_h = 256;
  c.input_w = 192;
  return c;
}

}  // namespace

TEST_CASE("toy forward produces the contract shapes") {
  Model model = build_model(toy_config(), 1);
  Rng rng(61);
  Tensor image = Tensor::zeros({3, 64, 48});
  for (double& v : image.value()) v = rng.next_double();
  ForwardResult r = forward(model, image, false);
  REQUIRE(r.heatmaps.shape() == Shape{4, 16, 12});
  CHECK(r.records.empty());
  CHECK(r.heatmaps.all_finite());

  ForwardResult rc = forward(model, image, true);
  REQUIRE(rc.records.size() == 2);
  CHECK(rc.records[0].matrix.shape() == Shape{192, 192});
  // capture does not change the numbers
  for (int64_t i = 0; i < r.heatmaps.size(); ++i) {
    CHECK(rc.heatmaps.value()[size_t(i)] == r.heatmaps.value()[size_t(i)]);
  }
}

TEST_CASE("ResNetS forward hits the published grid") {
  ModelConfig cfg = tp_r_a3_config();
  Model model = build_model(cfg, 2);
  Tensor image = Tensor::full({3, 256, 192}, 0.5);
  ForwardResult r = forward(model, image, true);
  // r=8 grid is 32x24 (L=768); deconv head brings heatmaps back to 1/4 scale
  REQUIRE(r.heatmaps.shape() == Shape{17, 64, 48});
  REQUIRE(r.records.size() == 3);
  CHECK(r.records[0].matrix.shape() == Shape{768, 768});
  CHECK(r.heatmaps.all_finite());
}

TEST_CASE("same seed builds bit-identical models") {
  Model a = build_model(toy_config(), 77);
  Model b = build_model(toy_config(), 77);
  Model c = build_model(toy_config(), 78);
  auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  REQUIRE(pa.size() == pb.size());
  bool all_same = true, any_diff = false;
  for (size_t i = 0; i < pa.size(); ++i) {
    for (int64_t j = 0; j < pa[i].second.size(); ++j) {
      all_same = all_same &&
                 pa[i].second.value()[size_t(j)] == pb[i].second.value()[size_t(j)];
      any_diff = any_diff ||
                 pa[i].second.value()[size_t(j)] != pc[i].second.value()[size_t(j)];
    }
  }
  CHECK(all_same);
  CHECK(any_diff);
}

TEST_CASE("config validation rejects inconsistent settings") {
  ModelConfig c = toy_config();
  c.r = 8;  // TinyStem implies r=4
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = toy_config();
  c.head_upsample = HeadUpsample::Deconv;  // r=4 must not upsample
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tp_r_a3_config();
  c.head_upsample = HeadUpsample::None;  // r=8 must upsample
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = toy_config();
  c.dim = 30;  // not divisible by 4
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = toy_config();
  c.heads = 5;  // 32 % 5 != 0
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = toy_config();
  c.input_w = 50;  // not divisible by 4
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("config JSON round trip and unknown key rejection") {
  ModelConfig c = tp_r_a3_config();
  ModelConfig back = ModelConfig::from_json(c.to_json());
  CHECK(back.backbone == c.backbone);
  CHECK(back.layers == c.layers);
  CHECK(back.dim == c.dim);
  CHECK(back.heads == c.heads);
  CHECK(back.ffn_dim == c.ffn_dim);
  CHECK(back.pe_kind == c.pe_kind);
  CHECK(back.head_upsample == c.head_upsample);
  CHECK(back.keypoints == c.keypoints);
  CHECK(back.input_h == c.input_h);
  CHECK(back.input_w == c.input_w);
  CHECK_THROWS_AS(ModelConfig::from_json(R"({"d": 32, "bogus": 1})"), std::invalid_argument);
}

TEST_CASE("toy parameter count equals the closed form") {
  Model model = build_model(toy_config(), 3);
  ParamCount count = count_params(model);
  // TinyStem: conv 3->16 (3x3, bias) + conv 16->32 (3x3, bias)
  const int64_t backbone = (3 * 16 * 9 + 16) + (16 * 32 * 9 + 32);
  // per layer: 4 d^2 attention matrices + d out bias, FFN d<->h with biases,
  // two LayerNorm pairs
  const int64_t layer = 4 * 32 * 32 + 32 + (32 * 64 + 64) + (64 * 32 + 32) + 4 * 32;
  const int64_t head = 32 * 4 + 4;
  CHECK(count.backbone == backbone);
  CHECK(count.encoder == 2 * layer);
  CHECK(count.head == head);
  CHECK(count.pe_trainable == 0);
  CHECK(count.pe_stored == 192 * 32);
  CHECK(count.trainable() == backbone + 2 * layer + head);
}

TEST_CASE("TP-R-A3 parameter count matches the published sizes") {
  Model model = build_model(tp_r_a3_config(), 4);
  ParamCount count = count_params(model);
  // within 5% of the published 5.2M total
  CHECK(std::abs(static_cast<double>(count.total()) / 5.2e6 - 1.0) < 0.05);
  // learnable embedding adds exactly 768*256 parameters
  ModelConfig learn = tp_r_a3_config();
  learn.pe_kind = PeKind::Learnable;
  ParamCount lcount = count_params(build_model(learn, 4));
  CHECK(lcount.pe_trainable == 196608);
  CHECK(lcount.trainable() - count.trainable() == 196608);
  // and the no-PE trainable size is ~4.999M as published
  ModelConfig none = tp_r_a3_config();
  none.pe_kind = PeKind::None;
  ParamCount ncount = count_params(build_model(none, 4));
  CHECK(std::abs(static_cast<double>(ncount.total()) / 4.999e6 - 1.0) < 0.05);
  CHECK(ncount.pe_stored == 0);
}

TEST_CASE("count_params is seed independent") {
  ParamCount a = count_params(build_model(toy_config(), 1));
  ParamCount b = count_params(build_model(toy_config(), 999));
  CHECK(a.total() == b.total());
  CHECK(a.backbone == b.backbone);
  CHECK(a.encoder == b.encoder);
  CHECK(a.head == b.head);
}

TEST_CASE("save/load round trip reproduces the forward pass bit-exactly") {
  ModelConfig cfg = toy_config();
  cfg.pe_kind = PeKind::Learnable;
  Model model = build_model(cfg, 5);
  const std::string path = "model_roundtrip.tpse";
  save_model(model, path);
  Model loaded = load_model(path);
  Rng rng(62);
  Tensor image = Tensor::zeros({3, 64, 48});
  for (double& v : image.value()) v = rng.next_double();
  Tensor a = forward(model, image, false).heatmaps;
  Tensor b = forward(loaded, image, false).heatmaps;
  for (int64_t i = 0; i < a.size(); ++i) {
    CHECK(a.value()[size_t(i)] == b.value()[size_t(i)]);
  }
  std::remove(path.c_str());
}

TEST_CASE("loading a file whose header was edited fails with a shape error") {
  Model model = build_model(toy_config(), 6);
  const std::string path = "model_edited.tpse";
  save_model(model, path);
  // bump K in the embedded config JSON: the stored blocks no longer match
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  const std::string needle = "\"K\":4";
  const size_t pos = bytes.find(needle);
  REQUIRE(pos != std::string::npos);
  bytes[pos + 4] = '5';
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.close();
  CHECK_THROWS_AS(load_model(path), std::runtime_error);
  std::remove(path.c_str());
}

TEST_CASE("model file bytes are fixed little-endian") {
  ModelConfig cfg = toy_config();
  cfg.layers = 1;
  Model model = build_model(cfg, 7);
  // plant a recognizable value in the head bias
  model.head_b.value()[0] = 1.0;
  const std::string path = "model_bytes.tpse";
  save_model(model, path);
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  REQUIRE(bytes.size() > 16);
  CHECK(bytes.compare(0, 4, "TPSE") == 0);
  // version 1 little-endian
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 0);
  CHECK(bytes[6] == 0);
  CHECK(bytes[7] == 0);
  // IEEE-754 little-endian 1.0 = 00 00 00 00 00 00 F0 3F appears in the blocks
  const std::string one("\x00\x00\x00\x00\x00\x00\xF0\x3F", 8);
  CHECK(bytes.find(one) != std::string::npos);
  std::remove(path.c_str());
}

TEST_CASE("sine PE model accepts unseen input extents") {
  Model model = build_model(toy_config(), 8);
  Tensor big = Tensor::full({3, 128, 96}, 0.25);
  ForwardResult r = forward(model, big, true);
  REQUIRE(r.heatmaps.shape() == Shape{4, 32, 24});
  CHECK(r.heatmaps.all_finite());
  CHECK(r.records[0].matrix.shape() == Shape{768, 768});

  Tensor bad = Tensor::zeros({3, 66, 48});
  CHECK_THROWS_AS(forward(model, bad, false), std::invalid_argument);
}

TEST_CASE("end-to-end toy gradients match finite differences") {
  // 2 layers, d=16, input 32x24 -> 8x6 attention grid
  ModelConfig cfg;
  cfg.backbone = BackboneKind::TinyStem;
  cfg.r = 4;
  cfg.layers = 2;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.ffn_dim = 32;
  cfg.pe_kind = PeKind::Sine2D;
  cfg.head_upsample = HeadUpsample::None;
  cfg.keypoints = 3;
  cfg.input_h = 32;
  cfg.input_w = 24;
  cfg.dropout_p = 0.0;
  Model model = build_model(cfg, 10);
  Rng rng(63);
  Tensor image = Tensor::zeros({3, 32, 24});
  for (double& v : image.value()) v = rng.next_double();
  Tensor r = random_tensor({3, 8, 6}, rng);

  std::vector<Tensor> wrt;
  for (auto& [name, t] : model.parameters()) wrt.push_back(t);
  const double err = max_fd_rel_err(
      [&](Tape* tape) {
        EncoderRunOptions opt;
        opt.tape = tape;
        return probe_loss(forward(model, image, opt).heatmaps, r, tape);
      },
      wrt);
  CHECK(err < 1e-4);
}
