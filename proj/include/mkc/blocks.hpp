// Copyright (c) 2026 The mkcnet authors
// SPDX-License-Identifier: Apache-2.0
//
// Network building blocks: the global attention block (channel- then
// spatial-wise gating of a feature map), the meta-knowledge assistance
// block (gated filtering of the auxiliary feature before the diagnosis
// head), and the loss primitives.
#pragma once

#include "mkc/grad.hpp"
#include "mkc/ops.hpp"
#include "mkc/rng.hpp"

#include <string>
#include <vector>

namespace mkc {

/// Additive logit offset that pushes masked-out softmax entries to exact 0.
inline constexpr double kMaskOffset = 1e30;

/// Channel attention (two affine maps over pooled channel descriptors,
/// shared between the average- and max-pooled paths) followed by spatial
/// attention (a k x k conv over the 2-channel pooled map).
struct GabParams {
  Tensor ca_w1, ca_b1, ca_w2, ca_b2;
  Tensor sa_kernel, sa_bias;

  static GabParams init(ParamSet& params, const std::string& prefix, Dim channels, int reduction,
                        int spatial_kernel, Rng& rng);
  static GabParams view(const ParamSet& params, const std::string& prefix);
};

/// Channel gate over the auxiliary feature plus the diagnosis head on the
/// concatenated feature. The gate reads only f_omega.
struct MabParams {
  Tensor att_w1, att_b1, att_w2, att_b2;
  Tensor head_w, head_b;

  static MabParams init(ParamSet& params, const std::string& prefix, Dim width, int reduction, Dim classes,
                        Rng& rng);
  static MabParams view(const ParamSet& params, const std::string& prefix);
};

/// F [N,C,H,W] -> F * sigma(channel att) * sigma(spatial att), shape preserved.
Tensor gab_forward(const Tensor& feature_map, const GabParams& p);

struct MabOut {
  Tensor f_star;   // concat(f_d, gated f_omega), width 2W
  Tensor logits;   // diagnosis logits
  Tensor gate;     // channel gate over f_omega, in (0,1)
};

MabOut mab_forward(const Tensor& f_d, const Tensor& f_omega, const MabParams& p);

/// Mean over the batch of -(1 - p_t)^gamma * log(p_t).
Tensor focal_loss(const Tensor& probs, const std::vector<int>& targets, double gamma);

/// Softmax over mask-selected positions only; masked-out entries are exactly
/// zero and receive exactly zero gradient. The mask is 0/1 with at least one
/// 1 per row and is treated as a constant.
Tensor masked_softmax(const Tensor& logits, const Tensor& mask);

/// sum(p * log p) with 0 log 0 == 0; minimized by the uniform distribution.
Tensor neg_entropy(const Tensor& p);

/// Mean over rows of -sum(target * log(p)). The target keeps its gradient
/// path (it may be a differentiable soft label).
Tensor cross_entropy(const Tensor& p, const Tensor& target);

// Initializers (He for relu fan-in, scaled-normal for linear maps).
Tensor init_conv(Rng& rng, Dim out_ch, Dim in_ch, Dim k);
Tensor init_linear(Rng& rng, Dim in_w, Dim out_w);

}  // namespace mkc
