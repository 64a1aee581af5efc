// Copyright (c) 2026 The mkcnet authors
// SPDX-License-Identifier: Apache-2.0
#include "mkc/model.hpp"

#include "support/gradcheck.hpp"

#include <doctest.h>

#include <cmath>

using namespace mkc;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.input_hw = 8;
  cfg.d_classes = 3;
  cfg.q_classes = 2;
  cfg.psi = 2;
  cfg.backbone_channels = {4, 4, 4};
  cfg.meta_channels = {4, 4};
  cfg.gab_reduction = 4;
  return cfg;
}

Tensor softmax_rows(const Tensor& t) { return softmax(t); }

}  // namespace

TEST_CASE("joint_code follows the base-Q digit reading") {
  CHECK(joint_code(0, 0, 2) == 0);
  CHECK(joint_code(0, 1, 2) == 1);
  CHECK(joint_code(1, 0, 2) == 2);
  CHECK(joint_code(1, 1, 2) == 3);
  CHECK(joint_code(2, 1, 3) == 7);
  CHECK_THROWS_AS(joint_code(0, 2, 2), std::invalid_argument);
}

TEST_CASE("build_mask places a contiguous block of psi ones") {
  Tensor m = build_mask(1, 4, 1);
  CHECK(m.shape() == Shape{4});
  CHECK(m[0] == 0.0);
  CHECK(m[1] == 1.0);
  CHECK(m[2] == 0.0);
  CHECK(m[3] == 0.0);

  Tensor m0 = build_mask(0, 4, 1);
  CHECK(m0[0] == 1.0);
  Tensor m3 = build_mask(3, 4, 1);
  CHECK(m3[3] == 1.0);

  Tensor wide = build_mask(0, 4, 2);
  CHECK(wide.shape() == Shape{8});
  CHECK(wide[0] == 1.0);
  CHECK(wide[1] == 1.0);
  for (Dim i = 2; i < 8; ++i) CHECK(wide[i] == 0.0);

  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    const Dim n_codes = 1 + rng.below(6);
    const Dim psi = 1 + rng.below(4);
    const int code = static_cast<int>(rng.below(n_codes));
    Tensor m2 = build_mask(code, n_codes, psi);
    CHECK(m2.array().sum() == static_cast<double>(psi));
    CHECK(m2.array().segment(code * psi, psi).minCoeff() == 1.0);
  }
  CHECK_THROWS_AS(build_mask(4, 4, 1), std::invalid_argument);
}

TEST_CASE("mask_code honors the masking mode") {
  ModelConfig cfg = tiny_config();
  CHECK(mask_code(2, 1, cfg) == 5);
  cfg.mask_mode = MaskMode::kQualityOnly;
  CHECK(mask_code(2, 1, cfg) == 1);
  CHECK(cfg.code_count() == 2);
  cfg.mask_mode = MaskMode::kDiagnosisOnly;
  CHECK(mask_code(2, 1, cfg) == 2);
  CHECK(cfg.code_count() == 3);
}

TEST_CASE("meta learner output is a distribution; zero weights give uniform") {
  ModelConfig cfg = tiny_config();
  Rng rng(11);
  ParamSet phi = init_meta_params(cfg, rng);
  Tensor x = testing::random_tensor(rng, {3, 1, 8, 8}, -1, 1);
  MetaOut out = meta_learner_forward(x, phi, cfg);
  REQUIRE(out.full.shape() == Shape{3, cfg.omega_dim()});
  for (Dim r = 0; r < 3; ++r) {
    CHECK(out.full.array().segment(r * cfg.omega_dim(), cfg.omega_dim()).sum() == doctest::Approx(1.0));
  }

  ParamSet zero_phi;
  for (const auto& [name, t] : phi.items()) zero_phi.add(name, Tensor::zeros(t.shape()));
  MetaOut uniform = meta_learner_forward(x, zero_phi, cfg);
  const double u = 1.0 / static_cast<double>(cfg.omega_dim());
  for (Dim i = 0; i < uniform.full.size(); ++i) CHECK(uniform.full[i] == doctest::Approx(u));

  // Bit-identical across evaluations.
  MetaOut again = meta_learner_forward(x, phi, cfg);
  for (Dim i = 0; i < out.full.size(); ++i) CHECK(again.full[i] == out.full[i]);
}

TEST_CASE("select_y_omega block semantics") {
  ModelConfig cfg = tiny_config();
  SUBCASE("psi=1 degenerates to the one-hot joint code, exhaustively") {
    cfg.psi = 1;
    Rng rng(3);
    for (int y_d = 0; y_d < cfg.d_classes; ++y_d) {
      for (int y_q = 0; y_q < cfg.q_classes; ++y_q) {
        const int code = mask_code(y_d, y_q, cfg);
        Tensor mask = build_mask_batch({code}, cfg);
        Tensor logits = testing::random_tensor(rng, {1, cfg.omega_dim()}, -3, 3);
        Tensor y = select_y_omega(logits, mask);
        for (Dim i = 0; i < y.size(); ++i) CHECK(y[i] == (i == code ? 1.0 : 0.0));
      }
    }
  }
  SUBCASE("psi=2 equal block logits split evenly") {
    Tensor logits = Tensor::zeros({1, cfg.omega_dim()});
    Tensor mask = build_mask_batch({2}, cfg);
    Tensor y = select_y_omega(logits, mask);
    CHECK(y[4] == doctest::Approx(0.5));
    CHECK(y[5] == doctest::Approx(0.5));
    CHECK(y.array().sum() == doctest::Approx(1.0));
  }
  SUBCASE("psi=2 block logits [1,2]") {
    Array z = Array::Zero(cfg.omega_dim());
    z(4) = 1.0;
    z(5) = 2.0;
    Tensor y = select_y_omega(Tensor({1, cfg.omega_dim()}, std::move(z)), build_mask_batch({2}, cfg));
    CHECK(y[4] == doctest::Approx(0.26894142).epsilon(1e-7));
    CHECK(y[5] == doctest::Approx(0.73105858).epsilon(1e-7));
  }
  SUBCASE("raw-slice variant keeps full-softmax values") {
    Tensor logits = Tensor::zeros({1, cfg.omega_dim()});
    Tensor y = select_y_omega(logits, build_mask_batch({0}, cfg), /*renormalize=*/false);
    const double u = 1.0 / static_cast<double>(cfg.omega_dim());
    CHECK(y[0] == doctest::Approx(u));
    CHECK(y[1] == doctest::Approx(u));
    CHECK(y.array().sum() == doctest::Approx(2 * u));
  }
}

TEST_CASE("task net forward: shapes, distributions, and the f_omega path") {
  ModelConfig cfg = tiny_config();
  Rng rng(21);
  ParamSet theta = init_task_params(cfg, rng);
  Tensor x = testing::random_tensor(rng, {2, 1, 8, 8}, -1, 1);
  TaskNetOut out = task_net_forward(x, theta, cfg);

  CHECK(out.f_q.shape() == Shape{2, cfg.branch_width()});
  CHECK(out.f_d.shape() == Shape{2, cfg.branch_width()});
  CHECK(out.f_omega.shape() == Shape{2, cfg.branch_width()});
  CHECK(out.f_d_star.shape() == Shape{2, 2 * cfg.branch_width()});
  CHECK(out.logits_d.shape() == Shape{2, cfg.d_classes});
  CHECK(out.logits_q.shape() == Shape{2, cfg.q_classes});
  CHECK(out.logits_omega.shape() == Shape{2, cfg.omega_dim()});

  for (const Tensor* logits : {&out.logits_d, &out.logits_q, &out.logits_omega}) {
    Tensor p = softmax_rows(*logits);
    const Dim k = p.extent(1);
    for (Dim r = 0; r < 2; ++r) CHECK(p.array().segment(r * k, k).sum() == doctest::Approx(1.0));
  }

  // Diagnosis logits must actually read f_omega: recompute the assistance
  // block with f_omega zeroed and observe a change.
  MabOut hacked = mab_forward(out.f_d, Tensor::zeros(out.f_omega.shape()), MabParams::view(theta, "task.mab"));
  double diff = (hacked.logits.array() - out.logits_d.array()).abs().maxCoeff();
  CHECK(diff > 1e-12);
}

TEST_CASE("vanilla variant is backbone plus a single diagnosis head") {
  ModelConfig cfg = tiny_config();
  cfg.variant = ModelVariant::kVanilla;
  Rng rng(22);
  ParamSet theta = init_task_params(cfg, rng);
  CHECK(!theta.contains("task.gab_q.ca_w1"));
  CHECK(!theta.contains("task.mab.head_w"));
  Tensor x = testing::random_tensor(rng, {2, 1, 8, 8}, -1, 1);
  TaskNetOut out = task_net_forward(x, theta, cfg);
  CHECK(out.logits_d.shape() == Shape{2, cfg.d_classes});
  CHECK(!out.logits_q.defined());
}

TEST_CASE("ablation variants rewire the assistance path") {
  Rng rng(23);
  Tensor x = testing::random_tensor(rng, {1, 1, 8, 8}, -1, 1);
  SUBCASE("no_meta keeps MAB but feeds it f_q") {
    ModelConfig cfg = tiny_config();
    cfg.no_meta = true;
    ParamSet theta = init_task_params(cfg, rng);
    CHECK(!theta.contains("task.gab_omega.ca_w1"));
    CHECK(!theta.contains("task.head_omega.w"));
    TaskNetOut out = task_net_forward(x, theta, cfg);
    CHECK(!out.f_omega.defined());
    CHECK(out.f_d_star.shape() == Shape{1, 2 * cfg.branch_width()});
    MabOut expected = mab_forward(out.f_d, out.f_q, MabParams::view(theta, "task.mab"));
    for (Dim i = 0; i < expected.logits.size(); ++i) CHECK(expected.logits[i] == out.logits_d[i]);
  }
  SUBCASE("no_mab reads f_d directly") {
    ModelConfig cfg = tiny_config();
    cfg.no_mab = true;
    ParamSet theta = init_task_params(cfg, rng);
    CHECK(!theta.contains("task.mab.head_w"));
    CHECK(theta.contains("task.head_d.w"));
    TaskNetOut out = task_net_forward(x, theta, cfg);
    CHECK(!out.f_d_star.defined());
    CHECK(out.logits_omega.defined());
  }
}

TEST_CASE("task_loss matches a hand-computed toy and sums exactly") {
  ModelConfig cfg = tiny_config();
  cfg.d_classes = 2;
  cfg.psi = 2;  // K = 8
  TaskNetOut out;
  out.logits_d = Tensor::from({1, 2}, {std::log(3.0), 0.0});
  out.logits_q = Tensor::from({1, 2}, {0.0, 0.0});
  out.logits_omega = Tensor::from({1, 8}, {0.2, 0.4, 0.1, 0.3, -0.2, 0.0, 0.6, -0.5});
  // Sample (y_d=0, y_q=1) -> joint code 1 -> block [2,3].
  Tensor mask = build_mask_batch({1}, cfg);
  Array meta = Array::Zero(8);
  meta(2) = 0.5;
  meta(3) = -0.25;
  Tensor y_omega = select_y_omega(Tensor({1, 8}, std::move(meta)), mask);

  LossBreakdown lb = task_loss(out, {0}, {1}, y_omega, mask, cfg, 2.0);
  CHECK(lb.l_d.item() == doctest::Approx(0.017980129528236306).epsilon(1e-9));
  CHECK(lb.l_q.item() == doctest::Approx(0.17328679513998632).epsilon(1e-9));
  CHECK(lb.l_omega.item() == doctest::Approx(0.7339746092166703).epsilon(1e-9));
  CHECK(lb.total.item() == lb.l_d.item() + lb.l_q.item() + lb.l_omega.item());
  CHECK(lb.total.item() == doctest::Approx(0.9252415338848929).epsilon(1e-9));
}

TEST_CASE("perfect one-hot predictions drive the total loss to zero at psi=1") {
  ModelConfig cfg = tiny_config();
  cfg.d_classes = 2;
  cfg.psi = 1;
  const double big = 200.0;
  TaskNetOut out;
  out.logits_d = Tensor::from({1, 2}, {big, 0.0});
  out.logits_q = Tensor::from({1, 2}, {0.0, big});
  Array om = Array::Zero(4);
  om(1) = big;
  out.logits_omega = Tensor({1, 4}, std::move(om));
  Tensor mask = build_mask_batch({joint_code(0, 1, 2)}, cfg);
  Tensor y_omega = select_y_omega(Tensor::zeros({1, 4}), mask);
  LossBreakdown lb = task_loss(out, {0}, {1}, y_omega, mask, cfg, 2.0);
  CHECK(lb.total.item() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("gradient of l_omega w.r.t. out-of-block meta logits is exactly zero") {
  ModelConfig cfg = tiny_config();
  const Dim k = cfg.omega_dim();
  Rng rng(31);
  for (int y_d = 0; y_d < cfg.d_classes; ++y_d) {
    for (int y_q = 0; y_q < cfg.q_classes; ++y_q) {
      const int code = mask_code(y_d, y_q, cfg);
      Tensor mask = build_mask_batch({code}, cfg);
      ParamSet params;
      params.add("meta_logits", testing::random_tensor(rng, {1, k}, -2, 2));
      Tensor task_omega_logits = testing::random_tensor(rng, {1, k}, -2, 2);

      Tape tape;
      watch_all(tape, params);
      TapeScope scope(&tape);
      Tensor y_omega = select_y_omega(params.at("meta_logits"), mask);
      Tensor l_omega = cross_entropy(masked_softmax(task_omega_logits, mask), y_omega);
      GradientMap g = backward(tape, l_omega, params);
      const Array& grad = g.at("meta_logits").array();
      bool in_block_nonzero = false;
      for (Dim i = 0; i < k; ++i) {
        if (mask[i] == 0.0) {
          CHECK(grad(i) == 0.0);
        } else if (grad(i) != 0.0) {
          in_block_nonzero = true;
        }
      }
      CHECK(in_block_nonzero);
    }
  }
}

TEST_CASE("branch isolation and the explicit utilization path") {
  ModelConfig cfg = tiny_config();
  Rng rng(41);
  ParamSet theta = init_task_params(cfg, rng);
  ParamSet phi = init_meta_params(cfg, rng);
  Tensor x = testing::random_tensor(rng, {2, 1, 8, 8}, -1, 1);
  std::vector<int> y_d{1, 0}, y_q{0, 1};
  std::vector<int> codes = mask_codes(y_d, y_q, cfg);
  Tensor mask = build_mask_batch(codes, cfg);
  Tensor y_omega = select_y_omega(meta_learner_forward(x, phi, cfg).logits, mask);

  Tape tape;
  watch_all(tape, theta);
  TapeScope scope(&tape);
  TaskNetOut out = task_net_forward(x, theta, cfg);
  LossBreakdown lb = task_loss(out, y_d, y_q, y_omega, mask, cfg, 2.0);

  // l_q never touches the assistance block head.
  GradientMap gq = backward(tape, lb.l_q, theta);
  CHECK(gq.at("task.mab.head_w").array().abs().maxCoeff() == 0.0);
  CHECK(gq.at("task.head_q.w").array().abs().maxCoeff() > 0.0);

  // l_d consumes f_omega through the assistance block, so the omega-branch
  // attention parameters matter to the diagnosis loss.
  GradientMap gd = backward(tape, lb.l_d, theta);
  CHECK(gd.at("task.gab_omega.ca_w1").array().abs().maxCoeff() > 0.0);
  CHECK(gd.at("task.head_q.w").array().abs().maxCoeff() == 0.0);
}
