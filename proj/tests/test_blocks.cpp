// Copyright (c) 2026 The mkcnet authors
// SPDX-License-Identifier: Apache-2.0
#include "mkc/blocks.hpp"

#include "support/gradcheck.hpp"

#include <doctest.h>

#include <cmath>

using namespace mkc;

namespace {

ParamSet hand_gab_params() {
  // Frozen alongside an independent numpy evaluation of the same block.
  ParamSet ps;
  ps.add("g.ca_w1", Tensor::from({2, 1}, {0.5, -0.3}));
  ps.add("g.ca_b1", Tensor::from({1, 1}, {0.1}));
  ps.add("g.ca_w2", Tensor::from({1, 2}, {0.7, -0.2}));
  ps.add("g.ca_b2", Tensor::from({1, 2}, {0.05, -0.05}));
  ps.add("g.sa_kernel", Tensor::from({1, 2, 1, 1}, {0.6, -0.4}));
  ps.add("g.sa_bias", Tensor::from({1, 1, 1, 1}, {0.1}));
  return ps;
}

}  // namespace

TEST_CASE("gab_forward matches a hand-evaluated 2x2x2 case") {
  ParamSet ps = hand_gab_params();
  GabParams p = GabParams::view(ps, "g");
  Tensor f = Tensor::from({1, 2, 2, 2}, {1, 2, 3, -1, 0.5, -0.5, 2, 1});
  Tensor out = gab_forward(f, p);
  const double expected[8] = {0.3957424,  0.71698522, 1.20352912, -0.34793374,
                              0.1045517, -0.09471063, 0.42394922, 0.18384213};
  REQUIRE(out.shape() == f.shape());
  for (Dim i = 0; i < 8; ++i) CHECK(out[i] == doctest::Approx(expected[i]).epsilon(1e-7));
}

TEST_CASE("gab_forward: zero input stays zero and shapes are preserved") {
  Rng rng(5);
  for (int trial = 0; trial < 4; ++trial) {
    const Dim c = 4 * (1 + rng.below(3));
    const Dim n = 1 + rng.below(2), h = 2 + rng.below(5), w = 2 + rng.below(5);
    ParamSet ps;
    GabParams p = GabParams::init(ps, "g", c, 4, 3, rng);
    Tensor f = testing::random_tensor(rng, {n, c, h, w}, -2, 2);
    CHECK(gab_forward(f, p).shape() == f.shape());
    Tensor zeros = Tensor::zeros({n, c, h, w});
    Tensor out = gab_forward(zeros, p);
    for (Dim i = 0; i < out.size(); ++i) CHECK(out[i] == 0.0);
  }
}

TEST_CASE("gab_forward approaches identity as attention saturates") {
  Rng rng(6);
  Tensor f = testing::random_tensor(rng, {1, 4, 3, 3}, 0.1, 2.0);
  double prev = std::numeric_limits<double>::infinity();
  for (double b : {2.0, 4.0, 8.0, 32.0}) {
    ParamSet ps;
    ps.add("g.ca_w1", Tensor::zeros({4, 1}));
    ps.add("g.ca_b1", Tensor::zeros({1, 1}));
    ps.add("g.ca_w2", Tensor::zeros({1, 4}));
    ps.add("g.ca_b2", Tensor::full({1, 4}, b));
    ps.add("g.sa_kernel", Tensor::zeros({1, 2, 3, 3}));
    ps.add("g.sa_bias", Tensor::full({1, 1, 1, 1}, b));
    Tensor out = gab_forward(f, GabParams::view(ps, "g"));
    const double diff = (out.array() - f.array()).abs().maxCoeff();
    CHECK(diff < prev);
    prev = diff;
  }
  CHECK(prev < 1e-6);
}

TEST_CASE("gab rejects channel counts not divisible by the reduction ratio") {
  Rng rng(1);
  ParamSet ps;
  CHECK_THROWS_AS(GabParams::init(ps, "g", 6, 4, 3, rng), std::invalid_argument);
}

TEST_CASE("mab_forward matches a hand-evaluated 3+3 case") {
  ParamSet ps;
  ps.add("m.att_w1", Tensor::from({3, 1}, {0.4, -0.5, 0.3}));
  ps.add("m.att_b1", Tensor::from({1, 1}, {0.2}));
  ps.add("m.att_w2", Tensor::from({1, 3}, {0.6, -0.1, 0.8}));
  ps.add("m.att_b2", Tensor::from({1, 3}, {0.1, 0.0, -0.2}));
  Array hw(12);
  for (int i = 0; i < 12; ++i) hw(i) = 0.1 * (i + 1);
  ps.add("m.head_w", Tensor({6, 2}, std::move(hw)));
  ps.add("m.head_b", Tensor::from({1, 2}, {0.05, -0.05}));
  MabParams p = MabParams::view(ps, "m");

  Tensor f_d = Tensor::from({1, 3}, {0.5, -1.0, 2.0});
  Tensor f_o = Tensor::from({1, 3}, {1.0, 0.2, -0.7});
  MabOut out = mab_forward(f_d, f_o, p);
  const double expect_star[6] = {0.5, -1.0, 2.0, 0.56807463, 0.0985501, -0.35559952};
  for (Dim i = 0; i < 6; ++i) CHECK(out.f_star[i] == doctest::Approx(expect_star[i]).epsilon(1e-7));
  CHECK(out.logits[0] == doctest::Approx(0.89518786).epsilon(1e-7));
  CHECK(out.logits[1] == doctest::Approx(0.97629038).epsilon(1e-7));
}

TEST_CASE("mab with a saturated gate reduces to plain concatenation") {
  Rng rng(9);
  ParamSet ps;
  MabParams p = MabParams::init(ps, "m", 4, 4, 3, rng);
  ps.at("m.att_w1") = Tensor::zeros({4, 1});
  ps.at("m.att_w2") = Tensor::zeros({1, 4});
  ps.at("m.att_b2") = Tensor::full({1, 4}, 1000.0);
  p = MabParams::view(ps, "m");
  Tensor f_d = testing::random_tensor(rng, {2, 4}, -1, 1);
  Tensor f_o = testing::random_tensor(rng, {2, 4}, -1, 1);
  MabOut out = mab_forward(f_d, f_o, p);
  for (Dim r = 0; r < 2; ++r) {
    for (Dim i = 0; i < 4; ++i) {
      CHECK(out.f_star[r * 8 + i] == f_d[r * 4 + i]);
      CHECK(out.f_star[r * 8 + 4 + i] == f_o[r * 4 + i]);
    }
  }
}

TEST_CASE("mab with zero f_omega depends only on the f_d half of the head") {
  Rng rng(10);
  ParamSet ps;
  MabParams p = MabParams::init(ps, "m", 4, 2, 2, rng);
  Tensor f_d = testing::random_tensor(rng, {1, 4}, -1, 1);
  MabOut out = mab_forward(f_d, Tensor::zeros({1, 4}), p);
  // Hand recomputation against the top half of the head weights.
  for (Dim j = 0; j < 2; ++j) {
    double v = p.head_b[j];
    for (Dim i = 0; i < 4; ++i) v += f_d[i] * p.head_w[i * 2 + j];
    CHECK(out.logits[j] == doctest::Approx(v).epsilon(1e-12));
  }
  for (Dim i = 0; i < out.gate.size(); ++i) {
    CHECK(out.gate[i] > 0.0);
    CHECK(out.gate[i] < 1.0);
  }
}

TEST_CASE("focal loss: perfect prediction, gamma reduction, scalar case") {
  CHECK(focal_loss(Tensor::from({1, 2}, {1.0, 0.0}), {0}, 2.0).item() == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(focal_loss(Tensor::from({1, 2}, {0.5, 0.5}), {0}, 0.0).item() == doctest::Approx(std::log(2.0)));
  CHECK(focal_loss(Tensor::from({1, 2}, {0.9, 0.1}), {0}, 2.0).item() ==
        doctest::Approx(1.053605156578263e-3).epsilon(1e-9));
  CHECK_THROWS_AS(focal_loss(Tensor::from({1, 2}, {0.9, 0.1}), {2}, 2.0), std::invalid_argument);
  CHECK_THROWS_AS(focal_loss(Tensor::from({1, 2}, {0.9, 0.3}), {0}, 2.0), std::invalid_argument);
}

TEST_CASE("focal loss is non-negative and monotone decreasing in p_t") {
  double prev = std::numeric_limits<double>::infinity();
  for (double p : {0.05, 0.2, 0.5, 0.8, 0.95, 0.999}) {
    const double v = focal_loss(Tensor::from({1, 2}, {p, 1.0 - p}), {0}, 2.0).item();
    CHECK(v >= 0.0);
    CHECK(v < prev);
    prev = v;
  }
}

TEST_CASE("masked_softmax semantics") {
  Tensor logits = Tensor::from({4}, {3.0, 1.0, 2.0, -1.0});
  SUBCASE("one-hot mask returns that one-hot") {
    Tensor y = masked_softmax(logits, Tensor::from({4}, {0, 0, 1, 0}));
    CHECK(y[2] == 1.0);
    CHECK(y[0] == 0.0);
    CHECK(y[1] == 0.0);
    CHECK(y[3] == 0.0);
  }
  SUBCASE("equal logits split the block evenly") {
    Tensor y = masked_softmax(Tensor::from({4}, {7.0, 7.0, 0.0, 0.0}), Tensor::from({4}, {1, 1, 0, 0}));
    CHECK(y[0] == doctest::Approx(0.5));
    CHECK(y[1] == doctest::Approx(0.5));
    CHECK(y[2] == 0.0);
    CHECK(y[3] == 0.0);
  }
  SUBCASE("block logits [1,2]") {
    Tensor y = masked_softmax(Tensor::from({4}, {9.0, 1.0, 2.0, 9.0}), Tensor::from({4}, {0, 1, 1, 0}));
    CHECK(y[1] == doctest::Approx(0.26894142).epsilon(1e-7));
    CHECK(y[2] == doctest::Approx(0.73105858).epsilon(1e-7));
    CHECK(y[0] == 0.0);
    CHECK(y[3] == 0.0);
  }
  SUBCASE("all-zero mask is rejected") {
    CHECK_THROWS_AS(masked_softmax(logits, Tensor::zeros({4})), std::invalid_argument);
  }
}

TEST_CASE("masked-out logits receive exactly zero gradient") {
  ParamSet params;
  params.add("logits", Tensor::from({2, 4}, {0.3, -1.0, 2.0, 0.5, 1.0, 1.0, -0.5, 0.25}));
  Tensor mask = Tensor::from({2, 4}, {1, 1, 0, 0, 0, 0, 1, 1});
  Tape tape;
  watch_all(tape, params);
  TapeScope scope(&tape);
  Tensor y = masked_softmax(params.at("logits"), mask);
  Tensor loss = sum(mul(y, Tensor::from({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8})));
  GradientMap g = backward(tape, loss, params);
  const Array& grad = g.at("logits").array();
  for (Dim i = 0; i < 8; ++i) {
    if (mask[i] == 0.0) {
      CHECK(grad(i) == 0.0);
    }
  }
  CHECK(grad.abs().maxCoeff() > 0.0);
}

TEST_CASE("neg_entropy values and the uniform minimum") {
  CHECK(neg_entropy(Tensor::from({3}, {1.0, 0.0, 0.0})).item() == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(neg_entropy(Tensor::full({4}, 0.25)).item() == doctest::Approx(-std::log(4.0)));
  CHECK(neg_entropy(Tensor::from({2}, {0.9, 0.1})).item() == doctest::Approx(-0.3250829733914482));
  CHECK_THROWS_AS(neg_entropy(Tensor::from({2}, {-0.1, 1.1})), std::invalid_argument);

  // Gradient of sum(p log p) on the simplex vanishes at uniform: project
  // the raw gradient onto the tangent space (mean-subtracted).
  ParamSet params;
  params.add("p", Tensor::full({4}, 0.25));
  Tape tape;
  watch_all(tape, params);
  TapeScope scope(&tape);
  GradientMap g = backward(tape, neg_entropy(params.at("p")), params);
  const Array& grad = g.at("p").array();
  const Array centered = grad - grad.mean();
  CHECK(centered.abs().maxCoeff() < 1e-9);
}
