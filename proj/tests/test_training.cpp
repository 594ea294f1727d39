#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "transpose/training.hpp"

using namespace transpose;

namespace {

ModelConfig small_model_config() {
  ModelConfig c;
  c.backbone = BackboneKind::TinyStem;
  c.layers = 1;
  c.dim = 16;
  c.heads = 2;
  c.ffn_dim = 32;
  c.pe_kind = PeKind::Sine2D;
  c.keypoints = 4;
  c.input_h = 32;
  c.input_w = 32;
  return c;
}

}  // namespace

TEST_CASE("adam with zero gradients leaves parameters unchanged") {
  Tensor x = Tensor::from_data({4}, {1.0, -2.0, 3.0, -4.0});
  std::vector<double> g(4, 0.0), m, v;
  adam_step(x, g, m, v, 1, 0.1, 0.9, 0.999, 1e-8);
  CHECK(x(0) == 1.0);
  CHECK(x(1) == -2.0);
  CHECK(x(2) == 3.0);
  CHECK(x(3) == -4.0);
}

TEST_CASE("adam steps downhill on x^2") {
  Tensor x = Tensor::from_data({1}, {1.0});
  std::vector<double> m, v;
  std::vector<double> g{2.0};  // d/dx x^2 at x=1
  adam_step(x, g, m, v, 1, 0.05, 0.9, 0.999, 1e-8);
  CHECK(x(0) < 1.0);
  CHECK(x(0) > 0.0);
}

TEST_CASE("adam shape mismatch is an error") {
  Tensor x = Tensor::zeros({4});
  std::vector<double> g(3, 1.0), m, v;
  CHECK_THROWS_AS(adam_step(x, g, m, v, 1, 0.1, 0.9, 0.999, 1e-8), std::invalid_argument);
}

TEST_CASE("adam converges on a 10-d convex quadratic in 200 steps") {
  Rng rng(4);
  Tensor x = Tensor::zeros({10}, true);
  std::vector<double> curv(10);
  for (int i = 0; i < 10; ++i) {
    x(i) = rng.uniform(-1.0, 1.0);
    curv[static_cast<size_t>(i)] = rng.uniform(0.5, 2.0);
  }
  std::vector<double> m, v;
  for (int t = 1; t <= 200; ++t) {
    std::vector<double> g(10);
    for (int i = 0; i < 10; ++i) g[static_cast<size_t>(i)] = curv[static_cast<size_t>(i)] * x(i);
    adam_step(x, g, m, v, t, cosine_lr(t - 1, 200, 0.2, 1e-6), 0.9, 0.999, 1e-8);
  }
  double norm = 0.0;
  for (int i = 0; i < 10; ++i) norm += x(i) * x(i);
  CHECK(std::sqrt(norm) < 1e-3);
}

TEST_CASE("cosine schedule endpoints and midpoint") {
  CHECK(cosine_lr(0, 11, 1e-3, 1e-5) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(cosine_lr(10, 11, 1e-3, 1e-5) == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(cosine_lr(5, 11, 1e-3, 1e-5) == doctest::Approx((1e-3 + 1e-5) / 2).epsilon(1e-12));
  CHECK(cosine_lr(0, 1, 5e-4, 1e-5) == 5e-4);
  CHECK_THROWS_AS(cosine_lr(5, 5, 1e-3, 1e-5), std::invalid_argument);
}

TEST_CASE("train config validation and JSON round trip") {
  TrainConfig tc;
  tc.lr_start = 1e-5;
  tc.lr_end = 1e-3;  // inverted
  CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
  TrainConfig good;
  TrainConfig back = TrainConfig::from_json(good.to_json());
  CHECK(back.epochs == good.epochs);
  CHECK(back.lr_start == good.lr_start);
  CHECK(back.seed == good.seed);
  CHECK_THROWS_AS(TrainConfig::from_json(R"({"epoch_count": 3})"), std::invalid_argument);
}

TEST_CASE("one epoch on a handful of samples runs and stays finite") {
  auto ds = make_dataset(10, 3, 32, 32, 0.2);
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 4;
  auto [model, report] = train(small_model_config(), tc, ds);
  REQUIRE(report.epochs.size() == 1);
  CHECK(std::isfinite(report.epochs[0].loss));
  CHECK(report.epochs[0].pck >= 0.0);
  CHECK(report.epochs[0].pck <= 1.0);
  CHECK_THROWS_AS(train(small_model_config(), tc, {}), std::invalid_argument);
}

TEST_CASE("training is deterministic from seeds") {
  auto ds = make_dataset(24, 9, 32, 32, 0.1);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 8;
  auto [model_a, report_a] = train(small_model_config(), tc, ds);
  auto [model_b, report_b] = train(small_model_config(), tc, ds);
  auto pa = model_a.parameters(), pb = model_b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    for (int64_t j = 0; j < pa[i].second.size(); ++j) {
      CHECK(pa[i].second.value()[size_t(j)] == pb[i].second.value()[size_t(j)]);
    }
  }
  for (size_t e = 0; e < report_a.epochs.size(); ++e) {
    CHECK(report_a.epochs[e].loss == report_b.epochs[e].loss);
    CHECK(report_a.epochs[e].pck == report_b.epochs[e].pck);
  }
}

TEST_CASE("loss decreases over the first epochs of a reduced toy run") {
  auto ds = make_dataset(300, 7, 64, 48, 0.1);
  ModelConfig mc;  // standard toy architecture
  TrainConfig tc;
  tc.epochs = 6;
  auto [model, report] = train(mc, tc, ds);
  CHECK(report.epochs[5].loss < report.epochs[1].loss);
  CHECK(report.epochs[5].loss < report.epochs[0].loss);
}

TEST_CASE("training aborts with a diagnostic on non-finite input") {
  auto ds = make_dataset(8, 5, 32, 32, 0.0);
  ds[0].image.value()[10] = std::numeric_limits<double>::quiet_NaN();
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 8;
  CHECK_THROWS_WITH_AS(train(small_model_config(), tc, ds),
                       doctest::Contains("non-finite"), std::runtime_error);
}

TEST_CASE("zero learning rate leaves parameters unchanged over a step") {
  auto ds = make_dataset(4, 11, 32, 32, 0.0);
  ModelConfig mc = small_model_config();
  Model model = build_model(mc, 42);
  auto params = model.parameters();
  std::vector<std::vector<double>> before;
  for (auto& [name, t] : params) before.emplace_back(t.value().begin(), t.value().end());
  AdamState adam(params.size(), 0.9, 0.999, 1e-8);
  Tape tape;
  EncoderRunOptions opt;
  opt.tape = &tape;
  Rng drng(1);
  opt.dropout_rng = &drng;
  ForwardResult r = forward(model, ds[0].image, opt);
  Tensor target = gaussian_target(ds[0].keypoints, 2.0, 8, 8, 4);
  Tensor loss = mse_loss(r.heatmaps, target, visibility_mask(ds[0].keypoints), &tape);
  tape.backward(loss);
  adam.step(params, 0.0);
  for (size_t i = 0; i < params.size(); ++i) {
    for (int64_t j = 0; j < params[i].second.size(); ++j) {
      CHECK(params[i].second.value()[size_t(j)] == before[i][size_t(j)]);
    }
  }
}

TEST_CASE("eval_resolutions reproduces the standard eval at the training size") {
  auto ds = make_dataset(30, 21, 32, 32, 0.1);
  TrainConfig tc;
  tc.epochs = 2;
  auto [model, report] = train(small_model_config(), tc, ds);
  DatasetSpec spec;
  spec.n = 30;
  spec.seed = 21;
  spec.occlusion_p = 0.1;
  auto table = eval_resolutions(model, spec, {{32, 32}, {64, 64}}, tc.pck_alpha);
  REQUIRE(table.size() == 2);
  CHECK(table[0].height == 32);
  CHECK(std::abs(table[0].pck - report.epochs.back().pck) < 1e-12);
  CHECK(table[1].height == 64);
  CHECK(table[1].pck >= 0.0);
}

TEST_CASE("ablate_pe runs three deterministic arms") {
  auto ds = make_dataset(20, 33, 32, 32, 0.0);
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 8;
  auto reports = ablate_pe(small_model_config(), tc, ds);
  auto again = ablate_pe(small_model_config(), tc, ds);
  for (int i = 0; i < 3; ++i) {
    REQUIRE(reports[size_t(i)].epochs.size() == 1);
    CHECK(reports[size_t(i)].epochs[0].loss == again[size_t(i)].epochs[0].loss);
    CHECK(reports[size_t(i)].epochs[0].pck == again[size_t(i)].epochs[0].pck);
  }
  // arms differ (position embedding changes the function)
  CHECK(reports[0].epochs[0].loss != reports[2].epochs[0].loss);
}

TEST_CASE("report files are written without volatile fields") {
  TrainReport report;
  report.epochs.push_back({0, 0.5, 0.1});
  report.epochs.push_back({1, 0.25, 0.4});
  report.wall_seconds = 123.0;
  report.model_path = "m.tpse";
  report.write_json("train_report_test.json");
  report.write_csv("train_curves_test.csv");
  std::ifstream jf("train_report_test.json");
  std::string text((std::istreambuf_iterator<char>(jf)), std::istreambuf_iterator<char>());
  CHECK(text.find("wall") == std::string::npos);
  CHECK(text.find("\"epochs\"") != std::string::npos);
  std::ifstream cf("train_curves_test.csv");
  std::string line;
  std::getline(cf, line);
  CHECK(line == "epoch,loss,pck");
  std::remove("train_report_test.json");
  std::remove("train_curves_test.csv");
}
