// Copyright (c) 2026 The mkcnet authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "mkc/tape.hpp"
#include "mkc/tensor.hpp"

#include <span>
#include <string_view>

namespace mkc {

/// Floor applied inside log() so that log(0) stays finite.
inline constexpr double kLogFloor = 1e-12;

// Elementwise binary ops with same-rank broadcasting: two shapes are
// compatible when every axis either matches or is 1 on one side.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

/// y = m * x + c with scalar constants.
Tensor scale(const Tensor& t, double m, double c = 0.0);
Tensor neg(const Tensor& t);

/// [m,k] x [k,n] -> [m,n].
Tensor matmul(const Tensor& a, const Tensor& b);

/// x: [N,Cin,H,W], kernel: [Cout,Cin,k,k], zero padding. Bias is a separate add.
Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride = 1, int pad = 0);

/// Adjoint of conv2d w.r.t. its input: scatters `g` (shaped like the conv
/// output) back through `kernel` onto an input of shape `input_shape`.
Tensor conv2d_input_grad(const Tensor& g, const Tensor& kernel, int stride, int pad, Shape input_shape);

/// Adjoint of conv2d w.r.t. its kernel: correlates `x` with `g`.
Tensor conv2d_weight_grad(const Tensor& g, const Tensor& x, int stride, int pad, Shape kernel_shape);

Tensor relu(const Tensor& t);
Tensor sigmoid(const Tensor& t);
Tensor tanh(const Tensor& t);
Tensor exp(const Tensor& t);
/// log(max(x, kLogFloor)); the floor is part of the differentiated function.
Tensor log(const Tensor& t);

/// Softmax over the last axis, max-subtracted.
Tensor softmax(const Tensor& t);

/// Full reductions to a single-element tensor of shape [1].
Tensor sum(const Tensor& t);
Tensor mean(const Tensor& t);

/// Sum/max over every axis where `target` has extent 1 (ranks must match).
Tensor reduce_sum_to(const Tensor& t, Shape target);
Tensor reduce_max_to(const Tensor& t, Shape target);
/// Inverse of reduce_sum_to: replicates axes of extent 1 up to `target`.
Tensor broadcast_to(const Tensor& t, Shape target);

Tensor concat(std::span<const Tensor> parts, int axis);
Tensor concat(const Tensor& a, const Tensor& b, int axis);
Tensor slice(const Tensor& t, Shape starts, Shape sizes);
/// Zero-pads `t` into a tensor of shape `full` with its origin at `starts`.
Tensor embed(const Tensor& t, Shape full, Shape starts);
Tensor reshape(const Tensor& t, Shape shape);
Tensor permute(const Tensor& t, Shape perm);
Tensor transpose(const Tensor& t);

/// k x k average pooling with stride k; extents must divide by k.
Tensor avg_pool2d(const Tensor& t, int k);
Tensor upsample_nearest(const Tensor& t, int k);

/// [N,C,H,W] -> [N,C].
Tensor global_avg_pool(const Tensor& t);
Tensor global_max_pool(const Tensor& t);

/// x^p for constant p >= 0, with the log floor guarding x near 0.
Tensor pow_const(const Tensor& t, double p);

/// matmul(x, w) + row-broadcast bias b of shape [1,n].
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);

/// Name-dispatched forward over the full op vocabulary (composites such as
/// mean and the global pools included). Drives the generic gradient checks.
Tensor primitive_forward(std::string_view op, std::span<const Tensor> inputs, const OpAttrs& attrs);

/// Ops checkable by the generic finite-difference suite.
std::span<const std::string_view> differentiable_op_names();

namespace detail {
/// 0/1 mask selecting, per reduced group, the first element attaining the
/// maximum (flat order). Subgradient route for reduce_max_to.
Tensor reduce_max_first_argmax_mask(const Tensor& in, const Shape& target);
/// Worker-thread cap from MKC_NUM_THREADS (hardware concurrency when unset).
int worker_threads();
}  // namespace detail

}  // namespace mkc
