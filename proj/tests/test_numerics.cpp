#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "support/gradcheck.hpp"
#include "transpose/ops.hpp"

using namespace transpose;
using transpose::testing::max_fd_rel_err;
using transpose::testing::probe_loss;
using transpose::testing::random_tensor;

TEST_CASE("matmul identity and hand arithmetic") {
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor b = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor y = matmul(eye, b);
  for (int64_t i = 0; i < b.size(); ++i) {
    CHECK(y.value()[size_t(i)] == b.value()[size_t(i)]);
  }
  Tensor a = Tensor::from_data({1, 2}, {1, 2});
  Tensor c = Tensor::from_data({2, 1}, {3, 4});
  CHECK(matmul(a, c).value()[0] == doctest::Approx(11.0).epsilon(1e-15));
}

TEST_CASE("matmul shape error names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 5});
  try {
    matmul(a, b);
    FAIL("expected a dimension error");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x5]") != std::string::npos);
  }
}

TEST_CASE("matmul backward matches finite differences") {
  Rng rng(11);
  Tensor a = random_tensor({5, 7}, rng);
  Tensor b = random_tensor({7, 3}, rng);
  Tensor r = random_tensor({5, 3}, rng);
  const double err = max_fd_rel_err(
      [&](Tape* tape) { return probe_loss(matmul(a, b, tape), r, tape); }, {a, b});
  CHECK(err < 1e-6);
}

TEST_CASE("matmul_nt matches explicit transpose") {
  Rng rng(12);
  Tensor a = random_tensor({4, 6}, rng);
  Tensor b = random_tensor({5, 6}, rng);
  Tensor y = matmul_nt(a, b);
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 5; ++j) {
      double acc = 0.0;
      for (int l = 0; l < 6; ++l) acc += a(i, l) * b(j, l);
      CHECK(y(i, j) == doctest::Approx(acc).epsilon(1e-14));
    }
  }
  Tensor r = random_tensor({4, 5}, rng);
  const double err = max_fd_rel_err(
      [&](Tape* tape) { return probe_loss(matmul_nt(a, b, tape), r, tape); }, {a, b});
  CHECK(err < 1e-6);
}

TEST_CASE("softmax rows: symmetry, closed form, stability") {
  Tensor equal = Tensor::full({1, 5}, 3.7);
  Tensor y = softmax_rows(equal);
  for (int j = 0; j < 5; ++j) CHECK(y(0, j) == doctest::Approx(0.2).epsilon(1e-12));

  Tensor two = Tensor::from_data({1, 2}, {0.0, std::log(3.0)});
  Tensor p = softmax_rows(two);
  CHECK(p(0, 0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(p(0, 1) == doctest::Approx(0.75).epsilon(1e-12));

  Tensor big = Tensor::from_data({1, 2}, {1000.0, 0.0});
  Tensor s = softmax_rows(big);
  CHECK(s.all_finite());
  CHECK(s(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(s(0, 1) < 1e-300);  // exp(-1000) underflows
}

TEST_CASE("softmax rows sum to one and shift invariance") {
  Rng rng(13);
  Tensor x = random_tensor({6, 9}, rng, 3.0);
  Tensor y = softmax_rows(x);
  for (int i = 0; i < 6; ++i) {
    double acc = 0.0;
    for (int j = 0; j < 9; ++j) {
      CHECK(y(i, j) >= 0.0);
      acc += y(i, j);
    }
    CHECK(std::abs(acc - 1.0) < 1e-9);
  }
  Tensor shifted = x.clone();
  for (int i = 0; i < 6; ++i) {
    for (int j = 0; j < 9; ++j) shifted(i, j) += 17.25;
  }
  Tensor ys = softmax_rows(shifted);
  for (int64_t i = 0; i < y.size(); ++i) {
    CHECK(std::abs(y.value()[size_t(i)] - ys.value()[size_t(i)]) < 1e-12);
  }
}

TEST_CASE("softmax backward matches finite differences") {
  Rng rng(14);
  Tensor x = random_tensor({4, 6}, rng);
  Tensor r = random_tensor({4, 6}, rng);
  const double err = max_fd_rel_err(
      [&](Tape* tape) { return probe_loss(softmax_rows(x, tape), r, tape); }, {x});
  CHECK(err < 1e-6);
}

TEST_CASE("layer_norm definition") {
  Tensor constant = Tensor::full({2, 8}, 4.2);
  Tensor gamma = Tensor::full({8}, 1.0);
  Tensor beta = Tensor::zeros({8});
  Tensor y = layer_norm(constant, gamma, beta, 1e-5);
  for (int64_t i = 0; i < y.size(); ++i) CHECK(std::abs(y.value()[size_t(i)]) < 1e-9);

  Rng rng(15);
  Tensor x = random_tensor({5, 16}, rng, 2.0);
  Tensor g16 = Tensor::full({16}, 1.0);
  Tensor b16 = Tensor::zeros({16});
  Tensor z = layer_norm(x, g16, b16, 1e-5);
  for (int i = 0; i < 5; ++i) {
    double mean = 0.0, var = 0.0;
    for (int j = 0; j < 16; ++j) mean += z(i, j);
    mean /= 16;
    for (int j = 0; j < 16; ++j) var += (z(i, j) - mean) * (z(i, j) - mean);
    var /= 16;
    CHECK(std::abs(mean) < 1e-9);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("layer_norm backward matches finite differences") {
  Rng rng(16);
  Tensor x = random_tensor({4, 8}, rng);
  Tensor gamma = random_tensor({8}, rng, 0.5);
  Tensor beta = random_tensor({8}, rng, 0.5);
  Tensor r = random_tensor({4, 8}, rng);
  const double err = max_fd_rel_err(
      [&](Tape* tape) { return probe_loss(layer_norm(x, gamma, beta, 1e-5, tape), r, tape); },
      {x, gamma, beta});
  CHECK(err < 1e-5);
}

TEST_CASE("conv2d identity kernel and hand case") {
  Rng rng(17);
  Tensor x = random_tensor({1, 4, 4}, rng);
  Tensor w = Tensor::from_data({1, 1, 1, 1}, {1.0});
  Tensor y = conv2d(x, w, Tensor{}, 1, 0);
  for (int64_t i = 0; i < x.size(); ++i) {
    CHECK(y.value()[size_t(i)] == x.value()[size_t(i)]);
  }

  Tensor hot = Tensor::zeros({1, 5, 5});
  hot(0, 2, 2) = 1.0;
  Tensor ones = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor block = conv2d(hot, ones, Tensor{}, 1, 1);
  for (int iy = 0; iy < 5; ++iy) {
    for (int ix = 0; ix < 5; ++ix) {
      const double want = (std::abs(iy - 2) <= 1 && std::abs(ix - 2) <= 1) ? 1.0 : 0.0;
      CHECK(block(0, iy, ix) == want);
    }
  }
}

TEST_CASE("conv2d rejects mismatched channels") {
  Tensor x = Tensor::zeros({3, 8, 8});
  Tensor w = Tensor::zeros({4, 2, 3, 3});
  CHECK_THROWS_AS(conv2d(x, w, Tensor{}, 1, 1), std::invalid_argument);
}

TEST_CASE("conv2d backward matches finite differences") {
  Rng rng(18);
  Tensor x = random_tensor({2, 6, 5}, rng);
  Tensor w = random_tensor({3, 2, 3, 3}, rng, 0.5);
  Tensor b = random_tensor({3}, rng, 0.5);
  Tensor r = random_tensor({3, 3, 3}, rng);  // stride 2, pad 1: 6x5 -> 3x3
  const double err = max_fd_rel_err(
      [&](Tape* tape) { return probe_loss(conv2d(x, w, b, 2, 1, tape), r, tape); },
      {x, w, b});
  CHECK(err < 1e-5);
}

TEST_CASE("transposed_conv2d shapes and bias broadcast") {
  Tensor zero = Tensor::zeros({2, 8, 6});
  Tensor w = Tensor::zeros({2, 3, 4, 4});
  Tensor b = Tensor::from_data({3}, {0.5, -1.0, 2.0});
  Tensor y = transposed_conv2d(zero, w, b, 2, 1);
  REQUIRE(y.shape() == Shape{3, 16, 12});
  for (int c = 0; c < 3; ++c) {
    for (int iy = 0; iy < 16; ++iy) {
      for (int ix = 0; ix < 12; ++ix) CHECK(y(c, iy, ix) == b(c));
    }
  }
}

TEST_CASE("conv2d and transposed_conv2d are adjoint") {
  Rng rng(19);
  Tensor x = random_tensor({2, 8, 6}, rng);
  Tensor w = random_tensor({3, 2, 4, 4}, rng, 0.3);  // conv weight [Co x Ci x k x k]
  Tensor y = random_tensor({3, 4, 3}, rng);          // conv output extent at s=2, p=1
  Tensor cx = conv2d(x, w, Tensor{}, 2, 1);
  REQUIRE(cx.shape() == y.shape());
  Tensor ty = transposed_conv2d(y, w, Tensor{}, 2, 1);  // same buffer, [Ci'=3 x Co'=2]
  REQUIRE(ty.shape() == x.shape());
  double lhs = 0.0, rhs = 0.0;
  for (int64_t i = 0; i < cx.size(); ++i) lhs += cx.value()[size_t(i)] * y.value()[size_t(i)];
  for (int64_t i = 0; i < x.size(); ++i) rhs += x.value()[size_t(i)] * ty.value()[size_t(i)];
  CHECK(std::abs(lhs - rhs) / (std::abs(lhs) + 1e-12) < 1e-9);
}

TEST_CASE("transposed_conv2d backward matches finite differences") {
  Rng rng(20);
  Tensor x = random_tensor({2, 4, 3}, rng);
  Tensor w = random_tensor({2, 2, 4, 4}, rng, 0.4);
  Tensor b = random_tensor({2}, rng, 0.2);
  Tensor r = random_tensor({2, 8, 6}, rng);
  const double err = max_fd_rel_err(
      [&](Tape* tape) { return probe_loss(transposed_conv2d(x, w, b, 2, 1, tape), r, tape); },
      {x, w, b});
  CHECK(err < 1e-5);
}

TEST_CASE("bilinear_upsample basics") {
  Tensor constant = Tensor::full({2, 3, 4}, 0.7);
  Tensor up = bilinear_upsample(constant, 3);
  REQUIRE(up.shape() == Shape{2, 9, 12});
  for (double v : up.value()) CHECK(v == doctest::Approx(0.7).epsilon(1e-15));

  Rng rng(21);
  Tensor x = random_tensor({1, 5, 5}, rng);
  Tensor same = bilinear_upsample(x, 1);
  for (int64_t i = 0; i < x.size(); ++i) {
    CHECK(same.value()[size_t(i)] == x.value()[size_t(i)]);
  }
}

TEST_CASE("bilinear_upsample reproduces a linear ramp in the interior") {
  const int h = 6, w = 8, f = 2;
  Tensor x = Tensor::zeros({1, h, w});
  for (int y = 0; y < h; ++y) {
    for (int c = 0; c < w; ++c) x(0, y, c) = 2.0 * c + 3.0 * y;
  }
  Tensor up = bilinear_upsample(x, f);
  for (int y = 0; y < h * f; ++y) {
    for (int c = 0; c < w * f; ++c) {
      const double sy = (y + 0.5) / f - 0.5;
      const double sx = (c + 0.5) / f - 0.5;
      if (sy < 0 || sy > h - 1 || sx < 0 || sx > w - 1) continue;  // edge clamp region
      CHECK(std::abs(up(0, y, c) - (2.0 * sx + 3.0 * sy)) < 1e-9);
    }
  }
}

TEST_CASE("bilinear_upsample backward matches finite differences") {
  Rng rng(22);
  Tensor x = random_tensor({2, 3, 4}, rng);
  Tensor r = random_tensor({2, 6, 8}, rng);
  const double err = max_fd_rel_err(
      [&](Tape* tape) { return probe_loss(bilinear_upsample(x, 2, tape), r, tape); }, {x});
  CHECK(err < 1e-6);
}

TEST_CASE("maxpool2d forward and backward") {
  Rng rng(23);
  Tensor x = random_tensor({2, 7, 7}, rng);
  Tensor y = maxpool2d(x, 3, 2, 1);
  REQUIRE(y.shape() == Shape{2, 4, 4});
  Tensor r = random_tensor({2, 4, 4}, rng);
  const double err = max_fd_rel_err(
      [&](Tape* tape) { return probe_loss(maxpool2d(x, 3, 2, 1, tape), r, tape); }, {x});
  CHECK(err < 1e-6);
}

TEST_CASE("channel_affine backward matches finite differences") {
  Rng rng(24);
  Tensor x = random_tensor({3, 4, 5}, rng);
  Tensor gamma = random_tensor({3}, rng, 0.5);
  Tensor beta = random_tensor({3}, rng, 0.5);
  Tensor r = random_tensor({3, 4, 5}, rng);
  const double err = max_fd_rel_err(
      [&](Tape* tape) { return probe_loss(channel_affine(x, gamma, beta, tape), r, tape); },
      {x, gamma, beta});
  CHECK(err < 1e-6);
}

TEST_CASE("sequence/grid conversions invert each other") {
  Rng rng(25);
  Tensor x = random_tensor({3, 4, 5}, rng);
  Tensor seq = seq_from_chw(x);
  REQUIRE(seq.shape() == Shape{20, 3});
  CHECK(seq(1, 2) == x(2, 0, 1));  // j = y*W + x
  Tensor back = chw_from_seq(seq, 4, 5);
  for (int64_t i = 0; i < x.size(); ++i) {
    CHECK(back.value()[size_t(i)] == x.value()[size_t(i)]);
  }
  Tensor r = random_tensor({20, 3}, rng);
  const double err = max_fd_rel_err(
      [&](Tape* tape) { return probe_loss(seq_from_chw(x, tape), r, tape); }, {x});
  CHECK(err < 1e-6);
}

TEST_CASE("col_slice and concat_cols round trip with gradients") {
  Rng rng(26);
  Tensor x = random_tensor({4, 6}, rng);
  Tensor r = random_tensor({4, 6}, rng);
  const double err = max_fd_rel_err(
      [&](Tape* tape) {
        Tensor left = col_slice(x, 0, 2, tape);
        Tensor mid = col_slice(x, 2, 3, tape);
        Tensor right = col_slice(x, 5, 1, tape);
        return probe_loss(concat_cols({left, mid, right}, tape), r, tape);
      },
      {x});
  CHECK(err < 1e-9);
}

TEST_CASE("backward fills leaf gradients") {
  Tensor x = Tensor::from_data({2, 3}, {1, -2, 3, 4, -5, 6});
  x.set_requires_grad(true);
  {
    Tape tape;
    Tensor loss = sum(x, &tape);
    tape.backward(loss);
    for (double g : x.grad()) CHECK(g == 1.0);
  }
  {
    Tape tape;
    Tensor loss = sum(mul(x, x, &tape), &tape);
    tape.backward(loss);
    for (int64_t i = 0; i < x.size(); ++i) {
      CHECK(x.grad()[size_t(i)] == doctest::Approx(2.0 * x.value()[size_t(i)]).epsilon(1e-15));
    }
  }
}

TEST_CASE("backward rejects non-scalar losses") {
  Tensor x = Tensor::zeros({2, 2});
  Tape tape;
  Tensor y = relu(x, &tape);
  CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("repeated backward calls populate leaves exactly once each") {
  Rng rng(27);
  Tensor x = random_tensor({3, 3}, rng);
  Tape tape;
  Tensor loss = sum(mul(x, x, &tape), &tape);
  tape.backward(loss);
  std::vector<double> first(x.grad().begin(), x.grad().end());
  tape.backward(loss);  // grads re-zeroed, not doubled
  for (int64_t i = 0; i < x.size(); ++i) {
    CHECK(x.grad()[size_t(i)] == first[size_t(i)]);
  }
}

TEST_CASE("ops do not mutate their inputs") {
  Rng rng(28);
  Tensor a = random_tensor({4, 4}, rng);
  Tensor b = random_tensor({4, 4}, rng);
  const std::vector<double> a0(a.value().begin(), a.value().end());
  const std::vector<double> b0(b.value().begin(), b.value().end());
  Tape tape;
  (void)matmul(a, b, &tape);
  (void)softmax_rows(a, &tape);
  (void)add(a, b, &tape);
  (void)mul(a, b, &tape);
  (void)relu(a, &tape);
  Tensor img = random_tensor({1, 4, 4}, rng);
  const std::vector<double> img0(img.value().begin(), img.value().end());
  Tensor w = random_tensor({2, 1, 3, 3}, rng);
  (void)conv2d(img, w, Tensor{}, 1, 1, &tape);
  (void)bilinear_upsample(img, 2, &tape);
  (void)maxpool2d(img, 3, 2, 1, &tape);
  for (int64_t i = 0; i < a.size(); ++i) {
    CHECK(a.value()[size_t(i)] == a0[size_t(i)]);
    CHECK(b.value()[size_t(i)] == b0[size_t(i)]);
  }
  for (int64_t i = 0; i < img.size(); ++i) {
    CHECK(img.value()[size_t(i)] == img0[size_t(i)]);
  }
}

TEST_CASE("dropout is identity in inference and rescales in training") {
  Rng rng(29);
  Tensor x = testing::random_tensor({8, 8}, rng);
  Rng drop_rng(5);
  Tensor same = dropout(x, 0.4, drop_rng, nullptr);
  CHECK(same.same_storage(x));

  Tape tape;
  Rng drop_rng2(5);
  Tensor y = dropout(x, 0.4, drop_rng2, &tape);
  int kept = 0;
  for (int64_t i = 0; i < x.size(); ++i) {
    const double v = y.value()[size_t(i)];
    if (v != 0.0) {
      ++kept;
      CHECK(v == doctest::Approx(x.value()[size_t(i)] / 0.6).epsilon(1e-12));
    }
  }
  CHECK(kept > 0);
  CHECK(kept < x.size());
}

TEST_CASE("mse_masked values and gradient") {
  Tensor pred = Tensor::zeros({1, 4, 4});
  Tensor target = Tensor::zeros({1, 4, 4});
  target(0, 1, 2) = 1.0;
  CHECK(mse_masked(pred, pred, {true}).value()[0] == 0.0);
  CHECK(mse_masked(pred, target, {true}).value()[0] == doctest::Approx(1.0 / 16).epsilon(1e-15));
  CHECK(mse_masked(pred, target, {false}).value()[0] == 0.0);

  Rng rng(30);
  Tensor p = random_tensor({3, 4, 4}, rng);
  Tensor t = random_tensor({3, 4, 4}, rng);
  const double err = max_fd_rel_err(
      [&](Tape* tape) { return mse_masked(p, t, {true, false, true}, tape); }, {p});
  CHECK(err < 1e-7);
}
