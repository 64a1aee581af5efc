// Copyright (c) 2026 The mkcnet authors
// SPDX-License-Identifier: Apache-2.0
#include "mkc/model.hpp"

#include <stdexcept>

namespace mkc {

const char* mask_mode_name(MaskMode m) {
  switch (m) {
    case MaskMode::kJoint: return "joint";
    case MaskMode::kQualityOnly: return "quality";
    case MaskMode::kDiagnosisOnly: return "diagnosis";
  }
  return "?";
}

Dim ModelConfig::code_count() const {
  switch (mask_mode) {
    case MaskMode::kJoint: return d_classes * q_classes;
    case MaskMode::kQualityOnly: return q_classes;
    case MaskMode::kDiagnosisOnly: return d_classes;
  }
  return 0;
}

void ModelConfig::validate() const {
  if (input_hw < 8 || input_hw % 8 != 0) {
    throw std::invalid_argument("model: input size must be a positive multiple of 8, got " +
                                std::to_string(input_hw));
  }
  if (d_classes < 2 || q_classes < 2) throw std::invalid_argument("model: need at least 2 classes per task");
  if (psi < 1) throw std::invalid_argument("model: psi must be >= 1");
  for (Dim c : backbone_channels) {
    if (c < 1 || c % gab_reduction != 0) {
      throw std::invalid_argument("model: backbone channels must divide by the attention reduction ratio");
    }
  }
  if (spatial_kernel % 2 != 1) throw std::invalid_argument("model: spatial kernel must be odd");
}

int joint_code(int y_d, int y_q, Dim q_classes) {
  if (y_q < 0 || y_q >= q_classes) throw std::invalid_argument("joint_code: quality label out of range");
  if (y_d < 0) throw std::invalid_argument("joint_code: negative diagnosis label");
  return y_d * static_cast<int>(q_classes) + y_q;
}

int mask_code(int y_d, int y_q, const ModelConfig& cfg) {
  if (y_d < 0 || y_d >= cfg.d_classes) throw std::invalid_argument("mask_code: diagnosis label out of range");
  if (y_q < 0 || y_q >= cfg.q_classes) throw std::invalid_argument("mask_code: quality label out of range");
  switch (cfg.mask_mode) {
    case MaskMode::kJoint: return joint_code(y_d, y_q, cfg.q_classes);
    case MaskMode::kQualityOnly: return y_q;
    case MaskMode::kDiagnosisOnly: return y_d;
  }
  return 0;
}

Tensor build_mask(int code, Dim n_codes, Dim psi) {
  if (psi < 1) throw std::invalid_argument("build_mask: psi must be >= 1");
  if (code < 0 || code >= n_codes) {
    throw std::invalid_argument("build_mask: code " + std::to_string(code) + " outside [0," +
                                std::to_string(n_codes) + ")");
  }
  Array m = Array::Zero(n_codes * psi);
  m.segment(code * psi, psi) = 1.0;
  return Tensor({n_codes * psi}, std::move(m));
}

std::vector<int> mask_codes(const std::vector<int>& y_d, const std::vector<int>& y_q, const ModelConfig& cfg) {
  if (y_d.size() != y_q.size()) throw std::invalid_argument("mask_codes: label vectors differ in length");
  std::vector<int> codes(y_d.size());
  for (size_t i = 0; i < y_d.size(); ++i) codes[i] = mask_code(y_d[i], y_q[i], cfg);
  return codes;
}

Tensor build_mask_batch(const std::vector<int>& codes, const ModelConfig& cfg) {
  const Dim n = static_cast<Dim>(codes.size());
  const Dim k = cfg.omega_dim();
  Array m = Array::Zero(n * k);
  for (Dim i = 0; i < n; ++i) {
    const int code = codes[static_cast<size_t>(i)];
    if (code < 0 || code >= cfg.code_count()) throw std::invalid_argument("build_mask_batch: code out of range");
    m.segment(i * k + code * cfg.psi, cfg.psi) = 1.0;
  }
  return Tensor({n, k}, std::move(m));
}

namespace {

void add_conv_block(ParamSet& ps, const std::string& prefix, Dim in_ch, Dim out_ch, Rng& rng) {
  ps.add(prefix + ".conv1.w", init_conv(rng, out_ch, in_ch, 3));
  ps.add(prefix + ".conv1.b", Tensor::zeros({1, out_ch, 1, 1}));
  ps.add(prefix + ".conv2.w", init_conv(rng, out_ch, out_ch, 3));
  ps.add(prefix + ".conv2.b", Tensor::zeros({1, out_ch, 1, 1}));
}

Tensor conv_block_forward(const Tensor& x, const ParamSet& ps, const std::string& prefix) {
  Tensor h = relu(add(conv2d(x, ps.at(prefix + ".conv1.w"), 1, 1), ps.at(prefix + ".conv1.b")));
  h = relu(add(conv2d(h, ps.at(prefix + ".conv2.w"), 1, 1), ps.at(prefix + ".conv2.b")));
  return avg_pool2d(h, 2);
}

void add_linear_head(ParamSet& ps, const std::string& prefix, Dim in_w, Dim out_w, Rng& rng) {
  ps.add(prefix + ".w", init_linear(rng, in_w, out_w));
  ps.add(prefix + ".b", Tensor::zeros({1, out_w}));
}

Tensor head_forward(const Tensor& x, const ParamSet& ps, const std::string& prefix) {
  return affine(x, ps.at(prefix + ".w"), ps.at(prefix + ".b"));
}

}  // namespace

ParamSet init_task_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamSet ps;
  const auto& bc = cfg.backbone_channels;
  add_conv_block(ps, "task.backbone.b1", cfg.in_channels, bc[0], rng);
  add_conv_block(ps, "task.backbone.b2", bc[0], bc[1], rng);
  add_conv_block(ps, "task.backbone.b3", bc[1], bc[2], rng);
  const Dim w = cfg.branch_width();
  const int sk = cfg.effective_spatial_kernel(cfg.feature_hw());

  if (cfg.variant == ModelVariant::kVanilla) {
    add_linear_head(ps, "task.head_final", w, cfg.d_classes, rng);
    return ps;
  }
  GabParams::init(ps, "task.gab_q", w, cfg.gab_reduction, sk, rng);
  GabParams::init(ps, "task.gab_d", w, cfg.gab_reduction, sk, rng);
  if (cfg.has_omega_branch()) {
    GabParams::init(ps, "task.gab_omega", w, cfg.gab_reduction, sk, rng);
    add_linear_head(ps, "task.head_omega", w, cfg.omega_dim(), rng);
  }
  add_linear_head(ps, "task.head_q", w, cfg.q_classes, rng);
  if (cfg.no_mab) {
    add_linear_head(ps, "task.head_d", w, cfg.d_classes, rng);
  } else {
    MabParams::init(ps, "task.mab", w, cfg.gab_reduction, cfg.d_classes, rng);
  }
  return ps;
}

ParamSet init_meta_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamSet ps;
  const auto& mc = cfg.meta_channels;
  add_conv_block(ps, "meta.b1", cfg.in_channels, mc[0], rng);
  add_conv_block(ps, "meta.b2", mc[0], mc[1], rng);
  add_linear_head(ps, "meta.head", mc[1], cfg.omega_dim(), rng);
  return ps;
}

TaskNetOut task_net_forward(const Tensor& x, const ParamSet& theta, const ModelConfig& cfg) {
  if (x.rank() != 4 || x.extent(1) != cfg.in_channels || x.extent(2) != cfg.input_hw ||
      x.extent(3) != cfg.input_hw) {
    throw std::invalid_argument("task_net_forward: input " + shape_str(x.shape()) +
                                " does not match the configured geometry");
  }
  TaskNetOut out;
  Tensor h = conv_block_forward(x, theta, "task.backbone.b1");
  h = conv_block_forward(h, theta, "task.backbone.b2");
  out.backbone = conv_block_forward(h, theta, "task.backbone.b3");

  if (cfg.variant == ModelVariant::kVanilla) {
    out.final_feature = global_avg_pool(out.backbone);
    out.logits_d = head_forward(out.final_feature, theta, "task.head_final");
    return out;
  }

  out.gab_q = gab_forward(out.backbone, GabParams::view(theta, "task.gab_q"));
  out.gab_d = gab_forward(out.backbone, GabParams::view(theta, "task.gab_d"));
  out.f_q = global_avg_pool(out.gab_q);
  out.f_d = global_avg_pool(out.gab_d);
  out.logits_q = head_forward(out.f_q, theta, "task.head_q");

  if (cfg.has_omega_branch()) {
    out.gab_omega = gab_forward(out.backbone, GabParams::view(theta, "task.gab_omega"));
    out.f_omega = global_avg_pool(out.gab_omega);
    out.logits_omega = head_forward(out.f_omega, theta, "task.head_omega");
  }

  if (cfg.no_mab) {
    out.final_feature = out.f_d;
    out.logits_d = head_forward(out.f_d, theta, "task.head_d");
  } else {
    // Without Meta Learner the assistance block falls back to the quality
    // branch feature.
    const Tensor& assist = cfg.has_omega_branch() ? out.f_omega : out.f_q;
    MabOut mab = mab_forward(out.f_d, assist, MabParams::view(theta, "task.mab"));
    out.f_d_star = mab.f_star;
    out.mab_gate = mab.gate;
    out.final_feature = mab.f_star;
    out.logits_d = mab.logits;
  }
  return out;
}

MetaOut meta_learner_forward(const Tensor& x, const ParamSet& phi, const ModelConfig& cfg) {
  if (x.rank() != 4 || x.extent(1) != cfg.in_channels) {
    throw std::invalid_argument("meta_learner_forward: bad input " + shape_str(x.shape()));
  }
  Tensor h = conv_block_forward(x, phi, "meta.b1");
  h = conv_block_forward(h, phi, "meta.b2");
  MetaOut out;
  out.logits = head_forward(global_avg_pool(h), phi, "meta.head");
  out.full = softmax(out.logits);
  return out;
}

Tensor select_y_omega(const Tensor& meta_logits, const Tensor& mask, bool renormalize) {
  if (renormalize) return masked_softmax(meta_logits, mask);
  return mul(softmax(meta_logits), mask);
}

Tensor mean_masked_block(const Tensor& y_omega, const std::vector<int>& codes, Dim psi) {
  if (y_omega.rank() != 2 || static_cast<Dim>(codes.size()) != y_omega.extent(0)) {
    throw std::invalid_argument("mean_masked_block: codes do not match batch");
  }
  const Dim n = y_omega.extent(0);
  std::vector<Tensor> blocks;
  blocks.reserve(static_cast<size_t>(n));
  for (Dim i = 0; i < n; ++i) {
    blocks.push_back(slice(y_omega, {i, codes[static_cast<size_t>(i)] * psi}, {1, psi}));
  }
  Tensor stacked = concat(blocks, 0);  // [N, psi]
  return scale(reduce_sum_to(stacked, {1, psi}), 1.0 / static_cast<double>(n));
}

LossBreakdown task_loss(const TaskNetOut& out, const std::vector<int>& y_d, const std::vector<int>& y_q,
                        const Tensor& y_omega, const Tensor& mask, const ModelConfig& cfg, double gamma_focal) {
  LossBreakdown lb;
  lb.l_d = focal_loss(softmax(out.logits_d), y_d, gamma_focal);
  if (cfg.variant == ModelVariant::kVanilla) {
    lb.l_q = Tensor::scalar(0.0);
    lb.l_omega = Tensor::scalar(0.0);
  } else {
    lb.l_q = focal_loss(softmax(out.logits_q), y_q, gamma_focal);
    if (cfg.has_omega_branch()) {
      lb.l_omega = cross_entropy(masked_softmax(out.logits_omega, mask), y_omega);
    } else {
      lb.l_omega = Tensor::scalar(0.0);
    }
  }
  lb.total = add(add(lb.l_d, lb.l_q), lb.l_omega);
  return lb;
}

}  // namespace mkc
