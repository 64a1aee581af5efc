// Copyright (c) 2026 The mkcnet authors
// SPDX-License-Identifier: Apache-2.0
#include "mkc/blocks.hpp"

#include <cmath>
#include <stdexcept>

namespace mkc {

Tensor init_conv(Rng& rng, Dim out_ch, Dim in_ch, Dim k) {
  const double sd = std::sqrt(2.0 / static_cast<double>(in_ch * k * k));
  Array a(out_ch * in_ch * k * k);
  for (Dim i = 0; i < a.size(); ++i) a(i) = rng.normal(0.0, sd);
  return Tensor({out_ch, in_ch, k, k}, std::move(a));
}

Tensor init_linear(Rng& rng, Dim in_w, Dim out_w) {
  const double sd = std::sqrt(1.0 / static_cast<double>(in_w));
  Array a(in_w * out_w);
  for (Dim i = 0; i < a.size(); ++i) a(i) = rng.normal(0.0, sd);
  return Tensor({in_w, out_w}, std::move(a));
}

GabParams GabParams::init(ParamSet& params, const std::string& prefix, Dim channels, int reduction,
                          int spatial_kernel, Rng& rng) {
  if (reduction < 1 || channels % reduction != 0) {
    throw std::invalid_argument("gab: channels " + std::to_string(channels) + " not divisible by reduction " +
                                std::to_string(reduction));
  }
  if (spatial_kernel % 2 != 1) throw std::invalid_argument("gab: spatial kernel must be odd");
  const Dim hidden = channels / reduction;
  GabParams p;
  p.ca_w1 = params.add(prefix + ".ca_w1", init_linear(rng, channels, hidden));
  p.ca_b1 = params.add(prefix + ".ca_b1", Tensor::zeros({1, hidden}));
  p.ca_w2 = params.add(prefix + ".ca_w2", init_linear(rng, hidden, channels));
  p.ca_b2 = params.add(prefix + ".ca_b2", Tensor::zeros({1, channels}));
  p.sa_kernel = params.add(prefix + ".sa_kernel", init_conv(rng, 1, 2, spatial_kernel));
  p.sa_bias = params.add(prefix + ".sa_bias", Tensor::zeros({1, 1, 1, 1}));
  return p;
}

GabParams GabParams::view(const ParamSet& params, const std::string& prefix) {
  GabParams p;
  p.ca_w1 = params.at(prefix + ".ca_w1");
  p.ca_b1 = params.at(prefix + ".ca_b1");
  p.ca_w2 = params.at(prefix + ".ca_w2");
  p.ca_b2 = params.at(prefix + ".ca_b2");
  p.sa_kernel = params.at(prefix + ".sa_kernel");
  p.sa_bias = params.at(prefix + ".sa_bias");
  return p;
}

Tensor gab_forward(const Tensor& feature_map, const GabParams& p) {
  if (feature_map.rank() != 4) {
    throw std::invalid_argument("gab_forward: expects [N,C,H,W], got " + shape_str(feature_map.shape()));
  }
  const Dim n = feature_map.extent(0), c = feature_map.extent(1);
  const Dim h = feature_map.extent(2), w = feature_map.extent(3);
  if (p.ca_w1.extent(0) != c) {
    throw std::invalid_argument("gab_forward: feature map " + shape_str(feature_map.shape()) +
                                " does not match attention width " + std::to_string(p.ca_w1.extent(0)));
  }
  auto mlp = [&](const Tensor& v) { return affine(relu(affine(v, p.ca_w1, p.ca_b1)), p.ca_w2, p.ca_b2); };
  Tensor gate_c = sigmoid(add(mlp(global_avg_pool(feature_map)), mlp(global_max_pool(feature_map))));
  Tensor gated = mul(feature_map, reshape(gate_c, {n, c, 1, 1}));

  Tensor ch_mean = scale(reduce_sum_to(gated, {n, 1, h, w}), 1.0 / static_cast<double>(c));
  Tensor ch_max = reduce_max_to(gated, {n, 1, h, w});
  const int k = static_cast<int>(p.sa_kernel.extent(2));
  Tensor sp = add(conv2d(concat(ch_mean, ch_max, 1), p.sa_kernel, 1, k / 2), p.sa_bias);
  Tensor gate_s = sigmoid(sp);
  return mul(gated, gate_s);
}

MabParams MabParams::init(ParamSet& params, const std::string& prefix, Dim width, int reduction, Dim classes,
                          Rng& rng) {
  if (reduction < 1 || width % reduction != 0) {
    throw std::invalid_argument("mab: width " + std::to_string(width) + " not divisible by reduction " +
                                std::to_string(reduction));
  }
  const Dim hidden = width / reduction;
  MabParams p;
  p.att_w1 = params.add(prefix + ".att_w1", init_linear(rng, width, hidden));
  p.att_b1 = params.add(prefix + ".att_b1", Tensor::zeros({1, hidden}));
  p.att_w2 = params.add(prefix + ".att_w2", init_linear(rng, hidden, width));
  p.att_b2 = params.add(prefix + ".att_b2", Tensor::zeros({1, width}));
  p.head_w = params.add(prefix + ".head_w", init_linear(rng, 2 * width, classes));
  p.head_b = params.add(prefix + ".head_b", Tensor::zeros({1, classes}));
  return p;
}

MabParams MabParams::view(const ParamSet& params, const std::string& prefix) {
  MabParams p;
  p.att_w1 = params.at(prefix + ".att_w1");
  p.att_b1 = params.at(prefix + ".att_b1");
  p.att_w2 = params.at(prefix + ".att_w2");
  p.att_b2 = params.at(prefix + ".att_b2");
  p.head_w = params.at(prefix + ".head_w");
  p.head_b = params.at(prefix + ".head_b");
  return p;
}

MabOut mab_forward(const Tensor& f_d, const Tensor& f_omega, const MabParams& p) {
  if (f_d.rank() != 2 || f_omega.rank() != 2 || f_d.shape() != f_omega.shape() ||
      f_omega.extent(1) != p.att_w1.extent(0)) {
    throw std::invalid_argument("mab_forward: widths " + shape_str(f_d.shape()) + " / " +
                                shape_str(f_omega.shape()) + " do not match parameters");
  }
  MabOut out;
  out.gate = sigmoid(affine(relu(affine(f_omega, p.att_w1, p.att_b1)), p.att_w2, p.att_b2));
  out.f_star = concat(f_d, mul(f_omega, out.gate), 1);
  out.logits = affine(out.f_star, p.head_w, p.head_b);
  return out;
}

Tensor focal_loss(const Tensor& probs, const std::vector<int>& targets, double gamma) {
  if (probs.rank() != 2) throw std::invalid_argument("focal_loss: expects [N,K] probabilities");
  if (gamma < 0.0) throw std::invalid_argument("focal_loss: gamma must be >= 0");
  const Dim n = probs.extent(0), k = probs.extent(1);
  if (static_cast<Dim>(targets.size()) != n) throw std::invalid_argument("focal_loss: batch size mismatch");
  Array onehot = Array::Zero(n * k);
  for (Dim i = 0; i < n; ++i) {
    const int t = targets[static_cast<size_t>(i)];
    if (t < 0 || t >= k) {
      throw std::invalid_argument("focal_loss: target " + std::to_string(t) + " out of range [0," +
                                  std::to_string(k) + ")");
    }
    const double row_sum = probs.array().segment(i * k, k).sum();
    if (std::abs(row_sum - 1.0) > 1e-6) {
      throw std::invalid_argument("focal_loss: probabilities row " + std::to_string(i) + " sums to " +
                                  std::to_string(row_sum));
    }
    onehot(i * k + t) = 1.0;
  }
  Tensor p_t = reduce_sum_to(mul(probs, Tensor({n, k}, std::move(onehot))), {n, 1});
  Tensor weight = pow_const(scale(p_t, -1.0, 1.0), gamma);  // (1 - p_t)^gamma
  return scale(sum(mul(weight, log(p_t))), -1.0 / static_cast<double>(n));
}

Tensor masked_softmax(const Tensor& logits, const Tensor& mask) {
  if (logits.shape() != mask.shape()) {
    throw std::invalid_argument("masked_softmax: mask " + shape_str(mask.shape()) + " does not match logits " +
                                shape_str(logits.shape()));
  }
  const Dim k = logits.extent(logits.rank() - 1);
  const Dim rows = logits.size() / k;
  for (Dim r = 0; r < rows; ++r) {
    double ones = 0.0;
    for (Dim i = 0; i < k; ++i) {
      const double v = mask[r * k + i];
      if (v != 0.0 && v != 1.0) throw std::invalid_argument("masked_softmax: mask entries must be 0 or 1");
      ones += v;
    }
    if (ones == 0.0) throw std::invalid_argument("masked_softmax: all-zero mask row " + std::to_string(r));
  }
  // Masked-out logits are first zeroed (killing their gradient exactly) and
  // then offset so far down that exp() underflows to 0.
  Tensor shifted = add(mul(logits, mask), scale(mask, kMaskOffset, -kMaskOffset));
  return softmax(shifted);
}

Tensor neg_entropy(const Tensor& p) {
  for (Dim i = 0; i < p.size(); ++i) {
    if (p[i] < 0.0) throw std::invalid_argument("neg_entropy: negative probability " + std::to_string(p[i]));
  }
  const double total = p.array().sum();
  if (total > 1.0 + 1e-6) {
    throw std::invalid_argument("neg_entropy: probabilities sum to " + std::to_string(total));
  }
  return sum(mul(p, log(p)));
}

Tensor cross_entropy(const Tensor& p, const Tensor& target) {
  if (p.shape() != target.shape()) {
    throw std::invalid_argument("cross_entropy: target " + shape_str(target.shape()) + " does not match " +
                                shape_str(p.shape()));
  }
  const Dim rows = p.rank() == 2 ? p.extent(0) : 1;
  return scale(sum(mul(target, log(p))), -1.0 / static_cast<double>(rows));
}

}  // namespace mkc
