// Copyright (c) 2026 The mkcnet authors
// SPDX-License-Identifier: Apache-2.0
//
// The two networks and their glue: a small conv backbone with three
// attention branches and three heads (Task Net), an independent smaller
// conv net producing the auxiliary label embedding (Meta Learner), the
// joint-encoding mask that selects a slice of that embedding, and the
// composite training loss.
#pragma once

#include "mkc/blocks.hpp"
#include "mkc/grad.hpp"
#include "mkc/rng.hpp"

#include <array>
#include <string>
#include <vector>

namespace mkc {

enum class MaskMode { kJoint, kQualityOnly, kDiagnosisOnly };
enum class ModelVariant { kMkcnet, kVanilla };

const char* mask_mode_name(MaskMode m);

struct ModelConfig {
  Dim input_hw = 32;
  Dim in_channels = 1;
  Dim d_classes = 3;
  Dim q_classes = 2;
  Dim psi = 2;  // masked block width per code
  std::array<Dim, 3> backbone_channels{16, 32, 32};
  std::array<Dim, 2> meta_channels{8, 16};
  int gab_reduction = 4;
  int spatial_kernel = 7;  // falls back to 3 when the feature map is smaller
  ModelVariant variant = ModelVariant::kMkcnet;
  bool no_meta = false;  // ablation: no Meta Learner, MAB consumes f_q
  bool no_mab = false;   // ablation: diagnosis head reads f_d directly
  MaskMode mask_mode = MaskMode::kJoint;
  bool renormalize_block = true;  // y_omega: in-block softmax vs raw slice

  Dim code_count() const;
  Dim omega_dim() const { return code_count() * psi; }
  Dim branch_width() const { return backbone_channels[2]; }
  Dim feature_hw() const { return input_hw / 8; }
  int effective_spatial_kernel(Dim map_hw) const { return map_hw >= spatial_kernel ? spatial_kernel : 3; }
  bool has_meta() const { return variant == ModelVariant::kMkcnet && !no_meta; }
  bool has_omega_branch() const { return has_meta(); }
  void validate() const;
};

/// Joint label code: base-Q reading of the digit string "d q".
int joint_code(int y_d, int y_q, Dim q_classes);

/// The code actually used for masking under the configured mask mode.
int mask_code(int y_d, int y_q, const ModelConfig& cfg);

/// Binary vector of length n_codes*psi with ones on [code*psi, (code+1)*psi).
Tensor build_mask(int code, Dim n_codes, Dim psi);

/// Per-sample masks stacked into an [N, omega_dim] constant.
Tensor build_mask_batch(const std::vector<int>& codes, const ModelConfig& cfg);

/// Mask codes for a batch of labels.
std::vector<int> mask_codes(const std::vector<int>& y_d, const std::vector<int>& y_q, const ModelConfig& cfg);

ParamSet init_task_params(const ModelConfig& cfg, Rng& rng);
ParamSet init_meta_params(const ModelConfig& cfg, Rng& rng);

struct TaskNetOut {
  Tensor backbone;                  // F [N,C,h,w]
  Tensor gab_q, gab_d, gab_omega;   // branch maps, pre-pooling (CAM export)
  Tensor f_q, f_d, f_omega;         // pooled branch vectors [N,W]
  Tensor f_d_star;                  // MAB feature (undefined without MAB)
  Tensor mab_gate;                  // channel gate over f_omega
  Tensor logits_d, logits_q, logits_omega;
  Tensor final_feature;             // what the diagnosis head consumes
};

TaskNetOut task_net_forward(const Tensor& x, const ParamSet& theta, const ModelConfig& cfg);

struct MetaOut {
  Tensor logits;  // [N, omega_dim]
  Tensor full;    // softmax(logits); sums to 1 per row
};

MetaOut meta_learner_forward(const Tensor& x, const ParamSet& phi, const ModelConfig& cfg);

/// y_omega from the Meta Learner logits: in-block softmax when
/// renormalize is set (exactly zero outside the mask, sums to 1 inside),
/// otherwise the raw full-softmax values under the mask.
Tensor select_y_omega(const Tensor& meta_logits, const Tensor& mask, bool renormalize = true);

/// Mean over the batch of each sample's masked block (aligned by in-block
/// offset): [N, omega_dim] with per-sample codes -> [1, psi].
Tensor mean_masked_block(const Tensor& y_omega, const std::vector<int>& codes, Dim psi);

struct LossBreakdown {
  Tensor l_d, l_q, l_omega;
  Tensor total;  // always l_d + l_q + l_omega in that order
};

/// One assembled minibatch: stacked normalized images plus labels, mask
/// codes and the per-sample mask matrix.
struct Batch {
  Tensor x;  // [N,C,H,W]
  std::vector<int> y_d, y_q;
  std::vector<int> codes;
  Tensor mask;  // [N, omega_dim] constant

  Dim size() const { return static_cast<Dim>(y_d.size()); }
};

LossBreakdown task_loss(const TaskNetOut& out, const std::vector<int>& y_d, const std::vector<int>& y_q,
                        const Tensor& y_omega, const Tensor& mask, const ModelConfig& cfg, double gamma_focal);

}  // namespace mkc
