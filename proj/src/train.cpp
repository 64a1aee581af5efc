// Copyright (c) 2026 The mkcnet authors
// SPDX-License-Identifier: Apache-2.0
#include "mkc/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace mkc {

namespace {

constexpr std::uint64_t kSaltTaskInit = 0x54494e49;
constexpr std::uint64_t kSaltMetaInit = 0x4d494e49;
constexpr std::uint64_t kSaltShuffle = 0x53485546;

}  // namespace

void TrainConfig::validate() const {
  if (alpha < 0 || beta <= 0 || task_lr <= 0) throw std::invalid_argument("train: learning rates must be positive");
  if (weight_decay < 0 || lambda_reg < 0) throw std::invalid_argument("train: decay/regularizer must be >= 0");
  if (gamma_focal < 0) throw std::invalid_argument("train: gamma_focal must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (epochs < 0) throw std::invalid_argument("train: epochs must be >= 0");
  if (lq_ratio < 0 || lq_ratio > 1) throw std::invalid_argument("train: lq_ratio outside [0,1]");
}

json TrainConfig::to_json() const {
  json j;
  j["alpha"] = alpha;
  j["beta"] = beta;
  j["task_lr"] = task_lr;
  j["weight_decay"] = weight_decay;
  j["lambda_reg"] = lambda_reg;
  j["gamma_focal"] = gamma_focal;
  j["batch_size"] = batch_size;
  j["epochs"] = epochs;
  j["seed"] = seed;
  j["lq_ratio"] = lq_ratio;
  j["per_sample_entropy"] = per_sample_entropy;
  return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.alpha = j.value("alpha", c.alpha);
  c.beta = j.value("beta", c.beta);
  c.task_lr = j.value("task_lr", c.task_lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.lambda_reg = j.value("lambda_reg", c.lambda_reg);
  c.gamma_focal = j.value("gamma_focal", c.gamma_focal);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.seed = j.value("seed", c.seed);
  c.lq_ratio = j.value("lq_ratio", c.lq_ratio);
  c.per_sample_entropy = j.value("per_sample_entropy", c.per_sample_entropy);
  return c;
}

ParamSet sgd_step(const ParamSet& params, const GradientMap& grads, double lr, double weight_decay) {
  if (grads.size() != params.size()) {
    throw std::invalid_argument("sgd_step: gradient map has " + std::to_string(grads.size()) + " entries for " +
                                std::to_string(params.size()) + " parameters");
  }
  ParamSet next;
  for (const auto& [name, p] : params.items()) {
    if (!grads.contains(name)) throw std::invalid_argument("sgd_step: missing gradient for '" + name + "'");
    const Tensor& g = grads.at(name);
    if (g.shape() != p.shape()) throw std::invalid_argument("sgd_step: gradient shape mismatch for '" + name + "'");
    Array updated = p.array() - lr * (g.array() + weight_decay * p.array());
    next.add(name, Tensor(p.shape(), std::move(updated)));
  }
  return next;
}

Batch make_batch(const Dataset& ds, const std::vector<int>& ids, const ModelConfig& mcfg) {
  if (ids.empty()) throw std::invalid_argument("make_batch: empty id list");
  const Dim hw = mcfg.input_hw;
  Batch b;
  Array x(static_cast<Dim>(ids.size()) * hw * hw);
  for (size_t i = 0; i < ids.size(); ++i) {
    const SampleRecord& rec = ds.manifest.samples[static_cast<size_t>(ids[i])];
    Tensor img = ds.images[static_cast<size_t>(ids[i])];
    if (!ds.manifest.normalized) img = normalize_image(img);
    x.segment(static_cast<Dim>(i) * hw * hw, hw * hw) = img.array();
    b.y_d.push_back(rec.y_d);
    b.y_q.push_back(rec.y_q);
  }
  b.x = Tensor({static_cast<Dim>(ids.size()), 1, hw, hw}, std::move(x));
  b.codes = mask_codes(b.y_d, b.y_q, mcfg);
  b.mask = build_mask_batch(b.codes, mcfg);
  return b;
}

PseudoUpdateResult pseudo_update(Tape& tape, const ParamSet& theta, const ParamSet& phi, const Batch& batch,
                                 const ModelConfig& mcfg, double alpha, double gamma_focal,
                                 bool renormalize_block) {
  if (!tape.second_order()) {
    throw std::logic_error("pseudo_update: requires a Tape created with second-order tracking");
  }
  watch_all(tape, theta);
  watch_all(tape, phi);
  TapeScope scope(&tape);
  PseudoUpdateResult r;
  MetaOut meta = meta_learner_forward(batch.x, phi, mcfg);
  r.y_omega = select_y_omega(meta.logits, batch.mask, renormalize_block);
  TaskNetOut out = task_net_forward(batch.x, theta, mcfg);
  r.losses = task_loss(out, batch.y_d, batch.y_q, r.y_omega, batch.mask, mcfg, gamma_focal);
  GradientMap g = backward(tape, r.losses.total, theta);  // recorded: stays differentiable
  for (const auto& [name, p] : theta.items()) {
    r.theta_tilde.add(name, sub(p, scale(g.at(name), alpha)));
  }
  r.tape_serial = tape.serial();
  return r;
}

Tensor entropy_regularizer(const Tensor& y_omega, const std::vector<int>& codes, Dim psi, bool per_sample) {
  if (per_sample) {
    const Dim n = y_omega.extent(0);
    std::vector<Tensor> blocks;
    blocks.reserve(static_cast<size_t>(n));
    for (Dim i = 0; i < n; ++i) {
      blocks.push_back(slice(y_omega, {i, codes[static_cast<size_t>(i)] * psi}, {1, psi}));
    }
    Tensor stacked = concat(blocks, 0);
    return scale(sum(mul(stacked, log(stacked))), 1.0 / static_cast<double>(n));
  }
  return neg_entropy(mean_masked_block(y_omega, codes, psi));
}

namespace {

/// Post-pseudo-update objective: L_D(theta~) + L_Q(theta~) + lambda * R.
Tensor meta_objective_graphed(const PseudoUpdateResult& pseudo, const Batch& batch, const ModelConfig& mcfg,
                              const TrainConfig& tcfg) {
  TaskNetOut out = task_net_forward(batch.x, pseudo.theta_tilde, mcfg);
  Tensor obj = add(focal_loss(softmax(out.logits_d), batch.y_d, tcfg.gamma_focal),
                   focal_loss(softmax(out.logits_q), batch.y_q, tcfg.gamma_focal));
  if (tcfg.lambda_reg > 0.0) {
    Tensor reg = entropy_regularizer(pseudo.y_omega, batch.codes, mcfg.psi, tcfg.per_sample_entropy);
    obj = add(obj, scale(reg, tcfg.lambda_reg));
  }
  return obj;
}

}  // namespace

ParamSet meta_update(Tape& tape, const PseudoUpdateResult& pseudo, const ParamSet& phi, const Batch& batch,
                     const ModelConfig& mcfg, const TrainConfig& tcfg) {
  if (pseudo.tape_serial != tape.serial()) {
    throw std::logic_error("meta_update: pseudo-update record is stale or from another tape");
  }
  Tensor obj;
  {
    TapeScope scope(&tape);
    obj = meta_objective_graphed(pseudo, batch, mcfg, tcfg);
  }
  GradientMap g = backward_through_backward(tape, obj, phi);
  return sgd_step(phi, g, tcfg.beta, 0.0);
}

GradientMap fd_meta_grad_oracle(const ParamSet& phi, const ParamSet& theta, const Batch& batch,
                                const ModelConfig& mcfg, const TrainConfig& tcfg, double h) {
  if (phi.total_elements() > 1000) {
    throw std::invalid_argument("fd_meta_grad_oracle: " + std::to_string(phi.total_elements()) +
                                " meta parameters exceed the brute-force cap of 1000; use a smaller model");
  }
  // Independent evaluation of phi -> L_D(theta~(phi)) + L_Q(theta~(phi)) +
  // lambda*R(phi), rebuilt from scratch with first-order machinery only.
  auto objective = [&](const ParamSet& probe_phi) -> double {
    Tensor y_omega;
    GradientMap g;
    LossBreakdown lb;
    {
      Tape tape;
      watch_all(tape, theta);
      TapeScope scope(&tape);
      MetaOut meta = meta_learner_forward(batch.x, probe_phi, mcfg);
      y_omega = select_y_omega(meta.logits, batch.mask, mcfg.renormalize_block);
      TaskNetOut out = task_net_forward(batch.x, theta, mcfg);
      lb = task_loss(out, batch.y_d, batch.y_q, y_omega, batch.mask, mcfg, tcfg.gamma_focal);
      g = backward(tape, lb.total, theta);
    }
    ParamSet theta_tilde;
    for (const auto& [name, p] : theta.items()) {
      Array updated = p.array() - tcfg.alpha * g.at(name).array();
      theta_tilde.add(name, Tensor(p.shape(), std::move(updated)));
    }
    TaskNetOut out3 = task_net_forward(batch.x, theta_tilde, mcfg);
    double value = focal_loss(softmax(out3.logits_d), batch.y_d, tcfg.gamma_focal).item() +
                   focal_loss(softmax(out3.logits_q), batch.y_q, tcfg.gamma_focal).item();
    if (tcfg.lambda_reg > 0.0) {
      value += tcfg.lambda_reg *
               entropy_regularizer(y_omega, batch.codes, mcfg.psi, tcfg.per_sample_entropy).item();
    }
    return value;
  };
  return finite_diff_grad(objective, phi, h);
}

json TrainReport::to_json() const {
  json j;
  j["config"] = config_echo;
  j["seed"] = seed;
  j["best_epoch"] = best_epoch;
  j["best_val_auc"] = best_val_auc;
  json hist = json::array();
  for (const EpochStats& e : history) {
    hist.push_back(json{{"epoch", e.epoch},
                        {"l_d", e.l_d},
                        {"l_q", e.l_q},
                        {"l_omega", e.l_omega},
                        {"total", e.total},
                        {"val_auc", e.val_auc}});
  }
  j["history"] = std::move(hist);
  j["final_metrics"] = final_metrics;
  return j;
}

Tensor diagnosis_scores(const ParamSet& theta, const Dataset& ds, const std::vector<int>& indices,
                        const ModelConfig& mcfg, Dim eval_batch) {
  const Dim n = static_cast<Dim>(indices.size());
  Array scores(n * mcfg.d_classes);
  for (Dim lo = 0; lo < n; lo += eval_batch) {
    const Dim hi = std::min(n, lo + eval_batch);
    std::vector<int> ids(indices.begin() + lo, indices.begin() + hi);
    Batch b = make_batch(ds, ids, mcfg);
    Tensor probs = softmax(task_net_forward(b.x, theta, mcfg).logits_d);
    scores.segment(lo * mcfg.d_classes, (hi - lo) * mcfg.d_classes) = probs.array();
  }
  return Tensor({n, mcfg.d_classes}, std::move(scores));
}

FitResult fit(const Dataset& ds, const ModelConfig& mcfg, const TrainConfig& tcfg, const EpochCallback& on_epoch) {
  mcfg.validate();
  tcfg.validate();
  if (ds.size() == 0) throw std::invalid_argument("fit: empty dataset");

  FitResult r;
  r.report.seed = tcfg.seed;
  r.report.config_echo = json{{"train", tcfg.to_json()}};

  Rng task_rng = Rng::stream(tcfg.seed, {kSaltTaskInit});
  r.theta = init_task_params(mcfg, task_rng);
  if (mcfg.has_meta()) {
    Rng meta_rng = Rng::stream(tcfg.seed, {kSaltMetaInit});
    r.phi = init_meta_params(mcfg, meta_rng);
  }
  r.best_theta = r.theta;
  r.best_phi = r.phi;

  std::vector<int> train_ids = subsample_lq_train(ds, tcfg.lq_ratio, tcfg.seed);
  const std::vector<int> val_ids = ds.split_indices(1);

  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    Rng shuffle_rng = Rng::stream(tcfg.seed, {kSaltShuffle, static_cast<std::uint64_t>(epoch)});
    shuffle_rng.shuffle(train_ids);

    double sum_d = 0, sum_q = 0, sum_o = 0, sum_t = 0;
    Dim n_batches = 0;
    for (size_t lo = 0; lo < train_ids.size(); lo += static_cast<size_t>(tcfg.batch_size)) {
      const size_t hi = std::min(train_ids.size(), lo + static_cast<size_t>(tcfg.batch_size));
      std::vector<int> ids(train_ids.begin() + static_cast<std::ptrdiff_t>(lo),
                           train_ids.begin() + static_cast<std::ptrdiff_t>(hi));
      Batch batch = make_batch(ds, ids, mcfg);
      const int batch_no = static_cast<int>(lo / static_cast<size_t>(tcfg.batch_size));

      // Stage 1: descend theta with the auxiliary embedding frozen.
      Tensor y_omega_const;
      if (mcfg.has_meta()) {
        MetaOut meta = meta_learner_forward(batch.x, r.phi, mcfg);
        y_omega_const = select_y_omega(meta.logits, batch.mask, mcfg.renormalize_block);
      }
      {
        Tape tape;
        watch_all(tape, r.theta);
        TapeScope scope(&tape);
        TaskNetOut out = task_net_forward(batch.x, r.theta, mcfg);
        LossBreakdown lb = task_loss(out, batch.y_d, batch.y_q, y_omega_const, batch.mask, mcfg, tcfg.gamma_focal);
        if (!std::isfinite(lb.total.item())) {
          throw TrainAbortError("fit: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                std::to_string(batch_no) + ", stage 1");
        }
        sum_d += lb.l_d.item();
        sum_q += lb.l_q.item();
        sum_o += lb.l_omega.item();
        sum_t += lb.total.item();
        GradientMap g = backward(tape, lb.total, r.theta);
        r.theta = sgd_step(r.theta, g, tcfg.task_lr, tcfg.weight_decay);
      }
      for (const auto& [name, p] : r.theta.items()) {
        if (!p.array().allFinite()) {
          throw TrainAbortError("fit: non-finite parameter '" + name + "' after epoch " + std::to_string(epoch) +
                                ", batch " + std::to_string(batch_no) + ", stage 1 update");
        }
      }
      ++n_batches;

      // Stage 2: simulate one theta step and descend phi through it.
      if (mcfg.has_meta()) {
        Tape tape(/*second_order=*/true);
        PseudoUpdateResult pseudo =
            pseudo_update(tape, r.theta, r.phi, batch, mcfg, tcfg.alpha, tcfg.gamma_focal, mcfg.renormalize_block);
        if (!std::isfinite(pseudo.losses.total.item())) {
          throw TrainAbortError("fit: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                std::to_string(batch_no) + ", stage 2");
        }
        r.phi = meta_update(tape, pseudo, r.phi, batch, mcfg, tcfg);
      }
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.l_d = sum_d / static_cast<double>(n_batches);
    stats.l_q = sum_q / static_cast<double>(n_batches);
    stats.l_omega = sum_o / static_cast<double>(n_batches);
    stats.total = sum_t / static_cast<double>(n_batches);
    if (!val_ids.empty()) {
      std::vector<int> val_labels;
      for (int id : val_ids) val_labels.push_back(ds.manifest.samples[static_cast<size_t>(id)].y_d);
      stats.val_auc = auc_macro_ovr(diagnosis_scores(r.theta, ds, val_ids, mcfg), val_labels);
    } else {
      stats.val_auc = std::nan("");
    }
    r.report.history.push_back(stats);
    if (val_ids.empty() || !(stats.val_auc <= r.report.best_val_auc)) {  // NaN counts as improvement
      r.report.best_val_auc = val_ids.empty() ? 0.0 : stats.val_auc;
      r.report.best_epoch = epoch;
      r.best_theta = r.theta;
      r.best_phi = r.phi;
    }
    if (tcfg.verbose) {
      json line{{"epoch", epoch},   {"l_d", stats.l_d},     {"l_q", stats.l_q},
                {"l_omega", stats.l_omega}, {"total", stats.total}, {"val_auc", stats.val_auc}};
      std::printf("%s\n", line.dump().c_str());
      std::fflush(stdout);
    }
    if (on_epoch) on_epoch(epoch, r.theta, r.phi);
  }
  return r;
}

}  // namespace mkc
