// Copyright (c) 2026 The mkcnet authors
// SPDX-License-Identifier: Apache-2.0
#include "mkc/train.hpp"

#include "support/gradcheck.hpp"

#include <doctest.h>

#include <cmath>
#include <set>

using namespace mkc;

namespace {

ModelConfig tiny_model() {
  ModelConfig cfg;
  cfg.input_hw = 8;
  cfg.d_classes = 3;
  cfg.q_classes = 2;
  cfg.psi = 2;
  cfg.backbone_channels = {4, 4, 4};
  cfg.meta_channels = {2, 2};
  cfg.gab_reduction = 4;
  return cfg;
}

Dataset tiny_dataset(Dim n, std::uint64_t seed, Dim hw = 8) {
  SynthConfig cfg;
  cfg.n_samples = n;
  cfg.image_hw = std::max<Dim>(16, hw);  // generator minimum; resized below when needed
  cfg.seed = seed;
  Dataset ds = gen_dataset(cfg);
  if (hw != cfg.image_hw) {
    for (Tensor& img : ds.images) img = resize_bilinear(img, hw, hw);
  }
  split_dataset(ds.manifest, {0.7, 0.1, 0.2}, seed);
  return ds;
}

Batch tiny_batch(const ModelConfig& mcfg, Dim n, std::uint64_t seed) {
  Dataset ds = tiny_dataset(std::max<Dim>(n, 12), seed, mcfg.input_hw);
  std::vector<int> ids;
  for (Dim i = 0; i < n; ++i) ids.push_back(static_cast<int>(i));
  return make_batch(ds, ids, mcfg);
}

double cosine(const Tensor& a, const Tensor& b) {
  const double na = std::sqrt(a.array().square().sum());
  const double nb = std::sqrt(b.array().square().sum());
  return (a.array() * b.array()).sum() / (na * nb);
}

}  // namespace

TEST_CASE("sgd_step arithmetic and alignment checks") {
  ParamSet p;
  p.add("w", Tensor::scalar(1.0));
  GradientMap g;
  g.put("w", Tensor::scalar(2.0));
  CHECK(sgd_step(p, g, 0.1, 0.0).at("w").item() == doctest::Approx(0.8));

  GradientMap zero;
  zero.put("w", Tensor::scalar(0.0));
  CHECK(sgd_step(p, zero, 0.1, 0.0).at("w").item() == 1.0);
  CHECK(sgd_step(p, zero, 0.01, 0.0005).at("w").item() == doctest::Approx(0.999995).epsilon(1e-12));

  GradientMap wrong;
  wrong.put("v", Tensor::scalar(1.0));
  CHECK_THROWS_AS(sgd_step(p, wrong, 0.1, 0.0), std::invalid_argument);
}

TEST_CASE("pseudo_update: identity at alpha=0, exact step otherwise, theta untouched") {
  ModelConfig mcfg = tiny_model();
  Rng rng(51);
  ParamSet theta = init_task_params(mcfg, rng);
  ParamSet phi = init_meta_params(mcfg, rng);
  Batch batch = tiny_batch(mcfg, 6, 3);

  {
    Tape tape(/*second_order=*/false);
    CHECK_THROWS_AS(pseudo_update(tape, theta, phi, batch, mcfg, 0.01, 2.0, true), std::logic_error);
  }

  Tape t0(/*second_order=*/true);
  PseudoUpdateResult at_zero = pseudo_update(t0, theta, phi, batch, mcfg, 0.0, 2.0, true);
  for (const auto& [name, p] : theta.items()) {
    const Array& a = p.array();
    const Array& b = at_zero.theta_tilde.at(name).array();
    for (Dim i = 0; i < a.size(); ++i) REQUIRE(a(i) == b(i));
  }

  // theta~ equals theta - alpha * grad, with the gradient recomputed on an
  // independent first-order tape.
  const double alpha = 0.05;
  Tape t1(/*second_order=*/true);
  PseudoUpdateResult pseudo = pseudo_update(t1, theta, phi, batch, mcfg, alpha, 2.0, true);
  GradientMap g;
  {
    Tape tape;
    watch_all(tape, theta);
    TapeScope scope(&tape);
    Tensor y_omega = select_y_omega(meta_learner_forward(batch.x, phi, mcfg).logits, batch.mask, true);
    TaskNetOut out = task_net_forward(batch.x, theta, mcfg);
    g = backward(tape, task_loss(out, batch.y_d, batch.y_q, y_omega, batch.mask, mcfg, 2.0).total, theta);
  }
  for (const auto& [name, p] : theta.items()) {
    const Array expect = p.array() - alpha * g.at(name).array();
    const Array& got = pseudo.theta_tilde.at(name).array();
    for (Dim i = 0; i < expect.size(); ++i) {
      CHECK(std::abs(expect(i) - got(i)) <= 1e-12 * std::max(1.0, std::abs(expect(i))));
    }
    // the live parameters were never mutated
    for (Dim i = 0; i < p.size(); ++i) REQUIRE(p.array()(i) == theta.at(name).array()(i));
  }
}

TEST_CASE("meta_update matches the finite-difference oracle on a tiny model") {
  ModelConfig mcfg = tiny_model();
  TrainConfig tcfg;
  tcfg.alpha = 0.05;
  tcfg.beta = 0.01;
  tcfg.lambda_reg = 0.2;
  for (std::uint64_t seed : {101ULL, 202ULL}) {
    Rng rng(seed);
    ParamSet theta = init_task_params(mcfg, rng);
    ParamSet phi = init_meta_params(mcfg, rng);
    REQUIRE(phi.total_elements() <= 1000);
    Batch batch = tiny_batch(mcfg, 6, seed);

    Tape tape(/*second_order=*/true);
    PseudoUpdateResult pseudo =
        pseudo_update(tape, theta, phi, batch, mcfg, tcfg.alpha, tcfg.gamma_focal, mcfg.renormalize_block);
    ParamSet phi_next = meta_update(tape, pseudo, phi, batch, mcfg, tcfg);

    GradientMap exact;
    for (const auto& [name, p] : phi.items()) {
      Array step = (p.array() - phi_next.at(name).array()) / tcfg.beta;
      exact.put(name, Tensor(p.shape(), std::move(step)));
    }
    GradientMap oracle = fd_meta_grad_oracle(phi, theta, batch, mcfg, tcfg);

    Tensor fe = flatten(exact), fo = flatten(oracle);
    CHECK(cosine(fe, fo) >= 0.999);
    const double rel = std::sqrt((fe.array() - fo.array()).square().sum() / fo.array().square().sum());
    CHECK(rel <= 1e-3);
  }
}

TEST_CASE("meta_update with alpha=0 is driven by the regularizer alone") {
  ModelConfig mcfg = tiny_model();
  TrainConfig tcfg;
  tcfg.alpha = 0.0;
  tcfg.beta = 0.01;
  tcfg.lambda_reg = 0.3;
  Rng rng(61);
  ParamSet theta = init_task_params(mcfg, rng);
  ParamSet phi = init_meta_params(mcfg, rng);
  Batch batch = tiny_batch(mcfg, 5, 8);

  Tape tape(/*second_order=*/true);
  PseudoUpdateResult pseudo = pseudo_update(tape, theta, phi, batch, mcfg, 0.0, 2.0, true);
  ParamSet phi_next = meta_update(tape, pseudo, phi, batch, mcfg, tcfg);

  // Direct gradient of lambda * R(phi) on a fresh first-order tape.
  GradientMap reg_grad;
  {
    Tape rt;
    watch_all(rt, phi);
    TapeScope scope(&rt);
    Tensor y_omega = select_y_omega(meta_learner_forward(batch.x, phi, mcfg).logits, batch.mask, true);
    Tensor reg = scale(entropy_regularizer(y_omega, batch.codes, mcfg.psi, false), tcfg.lambda_reg);
    reg_grad = backward(rt, reg, phi);
  }
  for (const auto& [name, p] : phi.items()) {
    const Array expect = p.array() - tcfg.beta * reg_grad.at(name).array();
    const Array& got = phi_next.at(name).array();
    for (Dim i = 0; i < expect.size(); ++i) {
      CHECK(std::abs(expect(i) - got(i)) <= 1e-9 * std::max(1.0, std::abs(expect(i))));
    }
  }

  // alpha=0 and lambda=0 gives an exactly zero meta gradient.
  TrainConfig zero = tcfg;
  zero.lambda_reg = 0.0;
  GradientMap o = fd_meta_grad_oracle(phi, theta, batch, mcfg, zero);
  CHECK(flatten(o).array().abs().maxCoeff() == 0.0);
}

TEST_CASE("repeated regularizer-only meta steps push the mean block toward uniform") {
  ModelConfig mcfg = tiny_model();
  TrainConfig tcfg;
  tcfg.alpha = 0.0;
  tcfg.beta = 0.05;
  tcfg.lambda_reg = 0.2;
  Rng rng(71);
  ParamSet theta = init_task_params(mcfg, rng);
  ParamSet phi = init_meta_params(mcfg, rng);
  Batch batch = tiny_batch(mcfg, 8, 9);

  auto entropy_now = [&]() {
    Tensor y_omega = select_y_omega(meta_learner_forward(batch.x, phi, mcfg).logits, batch.mask, true);
    return neg_entropy(mean_masked_block(y_omega, batch.codes, mcfg.psi)).item();
  };

  double prev = entropy_now();
  int non_increasing = 0;
  const int steps = 50;
  for (int s = 0; s < steps; ++s) {
    Tape tape(/*second_order=*/true);
    PseudoUpdateResult pseudo = pseudo_update(tape, theta, phi, batch, mcfg, 0.0, 2.0, true);
    phi = meta_update(tape, pseudo, phi, batch, mcfg, tcfg);
    const double now = entropy_now();
    if (now <= prev + 1e-12) ++non_increasing;
    prev = now;
  }
  CHECK(non_increasing >= 45);  // >= 90% of consecutive steps
  CHECK(prev < -0.5);           // moved well toward -ln(psi)
}

TEST_CASE("stage-1 style computation accumulates exactly zero phi gradient") {
  ModelConfig mcfg = tiny_model();
  Rng rng(81);
  ParamSet theta = init_task_params(mcfg, rng);
  ParamSet phi = init_meta_params(mcfg, rng);
  Batch batch = tiny_batch(mcfg, 4, 10);

  // y_omega computed outside any tape: a constant, exactly as in stage 1.
  Tensor y_omega = select_y_omega(meta_learner_forward(batch.x, phi, mcfg).logits, batch.mask, true);
  Tape tape;
  watch_all(tape, theta);
  watch_all(tape, phi);
  TapeScope scope(&tape);
  TaskNetOut out = task_net_forward(batch.x, theta, mcfg);
  LossBreakdown lb = task_loss(out, batch.y_d, batch.y_q, y_omega, batch.mask, mcfg, 2.0);
  GradientMap g = backward(tape, lb.total, phi);
  CHECK(flatten(g).array().abs().maxCoeff() == 0.0);
}

TEST_CASE("fit: determinism, epochs=0, loss accounting, mask diversity") {
  ModelConfig mcfg = tiny_model();
  TrainConfig tcfg;
  tcfg.epochs = 2;
  tcfg.batch_size = 16;
  tcfg.seed = 5;
  Dataset ds = tiny_dataset(60, 5, 8);

  FitResult a = fit(ds, mcfg, tcfg);
  FitResult b = fit(ds, mcfg, tcfg);
  REQUIRE(a.report.history.size() == 2);
  for (size_t e = 0; e < 2; ++e) {
    CHECK(a.report.history[e].total == b.report.history[e].total);
    CHECK(a.report.history[e].val_auc == b.report.history[e].val_auc);
    CHECK(a.report.history[e].total ==
          doctest::Approx(a.report.history[e].l_d + a.report.history[e].l_q + a.report.history[e].l_omega)
              .epsilon(1e-12));
  }
  for (const auto& [name, t] : a.theta.items()) {
    const Array& x = t.array();
    const Array& y = b.theta.at(name).array();
    for (Dim i = 0; i < x.size(); ++i) REQUIRE(x(i) == y(i));
  }

  TrainConfig none = tcfg;
  none.epochs = 0;
  FitResult init = fit(ds, mcfg, none);
  CHECK(init.report.history.empty());
  Rng rng = Rng::stream(tcfg.seed, {0x54494e49});
  ParamSet expect = init_task_params(mcfg, rng);
  for (const auto& [name, t] : expect.items()) {
    const Array& x = t.array();
    const Array& y = init.theta.at(name).array();
    for (Dim i = 0; i < x.size(); ++i) REQUIRE(x(i) == y(i));
  }

  // Masking diversity: at most D*Q distinct joint codes, at most Q under
  // quality-only masking.
  std::vector<int> y_d, y_q;
  for (const SampleRecord& rec : ds.manifest.samples) {
    y_d.push_back(rec.y_d);
    y_q.push_back(rec.y_q);
  }
  std::set<int> joint(mask_codes(y_d, y_q, mcfg).begin(), mask_codes(y_d, y_q, mcfg).end());
  CHECK(static_cast<Dim>(joint.size()) <= mcfg.d_classes * mcfg.q_classes);
  ModelConfig qcfg = mcfg;
  qcfg.mask_mode = MaskMode::kQualityOnly;
  std::set<int> qonly(mask_codes(y_d, y_q, qcfg).begin(), mask_codes(y_d, y_q, qcfg).end());
  CHECK(static_cast<Dim>(qonly.size()) <= mcfg.q_classes);
}

TEST_CASE("fit aborts with a step-naming error when training diverges") {
  ModelConfig mcfg = tiny_model();
  TrainConfig tcfg;
  tcfg.epochs = 1;
  tcfg.batch_size = 8;
  tcfg.task_lr = 1e30;
  Dataset ds = tiny_dataset(24, 6, 8);
  CHECK_THROWS_WITH_AS(fit(ds, mcfg, tcfg), doctest::Contains("stage 1"), TrainAbortError);
}

TEST_CASE("fit trains the vanilla variant without a meta learner") {
  ModelConfig mcfg = tiny_model();
  mcfg.variant = ModelVariant::kVanilla;
  TrainConfig tcfg;
  tcfg.epochs = 1;
  tcfg.batch_size = 16;
  Dataset ds = tiny_dataset(40, 7, 8);
  FitResult r = fit(ds, mcfg, tcfg);
  CHECK(r.phi.size() == 0);
  CHECK(r.report.history.size() == 1);
  CHECK(r.report.history[0].l_q == 0.0);
  Tensor scores = diagnosis_scores(r.theta, ds, ds.split_indices(2), mcfg);
  CHECK(scores.extent(1) == mcfg.d_classes);
  for (Dim i = 0; i < scores.extent(0); ++i) {
    CHECK(scores.array().segment(i * 3, 3).sum() == doctest::Approx(1.0));
  }
}
