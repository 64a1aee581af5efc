// Copyright (c) 2026 The mkcnet authors
// SPDX-License-Identifier: Apache-2.0
//
// Two-stage training. Stage 1 descends the Task Net loss with the
// auxiliary embedding held constant. Stage 2 simulates one Task Net step
// on a second-order tape (pseudo update) and descends the Meta Learner on
// the post-update diagnosis+quality loss plus an entropy regularizer,
// differentiating through the simulated step.
#pragma once

#include "mkc/dataset.hpp"
#include "mkc/metrics.hpp"
#include "mkc/model.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace mkc {

struct TrainConfig {
  double alpha = 0.01;   // pseudo-update step
  double beta = 0.01;    // meta learner step
  double task_lr = 0.01;
  double weight_decay = 0.0005;
  double lambda_reg = 0.2;  // weight of the entropy regularizer
  double gamma_focal = 2.0;
  Dim batch_size = 32;
  int epochs = 30;
  std::uint64_t seed = 1;
  double lq_ratio = 1.0;            // fraction of LQ training images kept
  bool per_sample_entropy = false;  // regularize per sample instead of batch-mean
  bool verbose = false;             // one JSON progress line per epoch on stdout

  void validate() const;
  json to_json() const;
  static TrainConfig from_json(const json& j);
};

/// Raised when a loss goes non-finite; names epoch, batch and stage.
class TrainAbortError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// p <- p - lr * (g + weight_decay * p), applied in parameter order.
ParamSet sgd_step(const ParamSet& params, const GradientMap& grads, double lr, double weight_decay);

struct PseudoUpdateResult {
  ParamSet theta_tilde;  // simulated parameters, differentiable w.r.t. phi
  Tensor y_omega;        // auxiliary embedding, differentiable w.r.t. phi
  LossBreakdown losses;  // Task Net losses at theta
  std::uint64_t tape_serial = 0;
};

/// One simulated descent step of theta on the full Task Net loss. theta is
/// not mutated; the phi-dependence of the result (through y_omega) stays on
/// the tape. Requires a second-order tape.
PseudoUpdateResult pseudo_update(Tape& tape, const ParamSet& theta, const ParamSet& phi, const Batch& batch,
                                 const ModelConfig& mcfg, double alpha, double gamma_focal,
                                 bool renormalize_block);

/// Entropy regularizer over the masked blocks of y_omega.
Tensor entropy_regularizer(const Tensor& y_omega, const std::vector<int>& codes, Dim psi, bool per_sample);

/// phi <- phi - beta * d/dphi [ L_D(theta~) + L_Q(theta~) + lambda * R ].
ParamSet meta_update(Tape& tape, const PseudoUpdateResult& pseudo, const ParamSet& phi, const Batch& batch,
                     const ModelConfig& mcfg, const TrainConfig& tcfg);

/// Central-difference oracle for the meta gradient: re-runs the whole
/// pseudo-update pipeline per probe using only first-order machinery.
/// Brute force, limited to |phi| <= 1000.
GradientMap fd_meta_grad_oracle(const ParamSet& phi, const ParamSet& theta, const Batch& batch,
                                const ModelConfig& mcfg, const TrainConfig& tcfg, double h = 1e-4);

struct EpochStats {
  int epoch = 0;
  double l_d = 0, l_q = 0, l_omega = 0, total = 0;
  double val_auc = 0;
};

struct TrainReport {
  json config_echo;
  std::uint64_t seed = 0;
  std::vector<EpochStats> history;
  int best_epoch = -1;
  double best_val_auc = 0.0;
  json final_metrics;  // filled by the caller after test evaluation

  json to_json() const;
};

struct FitResult {
  ParamSet theta;
  ParamSet phi;
  TrainReport report;
  ParamSet best_theta;  // snapshot at the best validation epoch
  ParamSet best_phi;
};

/// Called after every epoch with the live parameters (checkpoint hooks).
using EpochCallback = std::function<void(int epoch, const ParamSet& theta, const ParamSet& phi)>;

FitResult fit(const Dataset& ds, const ModelConfig& mcfg, const TrainConfig& tcfg,
              const EpochCallback& on_epoch = {});

/// Batch assembly from dataset rows (normalizes images unless the store
/// already is).
Batch make_batch(const Dataset& ds, const std::vector<int>& ids, const ModelConfig& mcfg);

/// Softmax diagnosis scores [n, D] over the given samples.
Tensor diagnosis_scores(const ParamSet& theta, const Dataset& ds, const std::vector<int>& indices,
                        const ModelConfig& mcfg, Dim eval_batch = 64);

}  // namespace mkc
