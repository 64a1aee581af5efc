// Copyright (c) 2026 The mkcnet authors
// SPDX-License-Identifier: Apache-2.0
//
// Generic gradient checking: every differentiable op is driven through a
// random scalar projection and its reverse-mode gradient is compared
// against central finite differences.
#pragma once

#include "mkc/grad.hpp"
#include "mkc/ops.hpp"
#include "mkc/rng.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

namespace mkc::testing {

struct OpCase {
  std::string op;
  std::vector<Tensor> inputs;
  OpAttrs attrs;
};

inline Shape random_shape(Rng& rng, int max_rank = 4, Dim max_extent = 4) {
  const int rank = 1 + static_cast<int>(rng.below(max_rank));
  Shape s;
  for (int i = 0; i < rank; ++i) s.push_back(1 + rng.below(max_extent));
  return s;
}

inline Tensor random_tensor(Rng& rng, const Shape& shape, double lo, double hi) {
  Array a(numel(shape));
  for (Dim i = 0; i < a.size(); ++i) a(i) = rng.uniform(lo, hi);
  return Tensor(shape, std::move(a));
}

/// Values bounded away from zero, for ops with a kink or a pole there.
inline Tensor random_signed_away_from_zero(Rng& rng, const Shape& shape, double lo, double hi) {
  Array a(numel(shape));
  for (Dim i = 0; i < a.size(); ++i) {
    const double mag = rng.uniform(lo, hi);
    a(i) = rng.uniform() < 0.5 ? -mag : mag;
  }
  return Tensor(shape, std::move(a));
}

inline Shape random_reduced_target(Rng& rng, const Shape& shape) {
  Shape target = shape;
  bool any = false;
  for (auto& d : target) {
    if (rng.uniform() < 0.5) {
      d = 1;
      any = true;
    }
  }
  if (!any) target[static_cast<size_t>(rng.below(static_cast<Dim>(target.size())))] = 1;
  return target;
}

inline OpCase make_op_case(const std::string& name, Rng& rng) {
  OpCase c;
  c.op = name;
  auto any = [&](double lo = -1.5, double hi = 1.5) { return random_tensor(rng, random_shape(rng), lo, hi); };
  if (name == "add" || name == "sub" || name == "mul" || name == "div") {
    Shape s = random_shape(rng);
    Shape sb = s;
    for (auto& d : sb) {
      if (rng.uniform() < 0.3) d = 1;
    }
    c.inputs.push_back(random_tensor(rng, rng.uniform() < 0.5 ? s : sb, -1.5, 1.5));
    Shape other = (c.inputs[0].shape() == s) ? sb : s;
    c.inputs.push_back(name == "div" ? random_signed_away_from_zero(rng, other, 0.5, 2.0)
                                     : random_tensor(rng, other, -1.5, 1.5));
    if (name == "div") {
      c.inputs[0] = random_tensor(rng, c.inputs[0].shape(), -1.5, 1.5);
    }
  } else if (name == "scale") {
    c.inputs.push_back(any());
    c.attrs.d0 = rng.uniform(-2.0, 2.0);
    c.attrs.d1 = rng.uniform(-1.0, 1.0);
  } else if (name == "matmul") {
    const Dim m = 1 + rng.below(4), k = 1 + rng.below(4), n = 1 + rng.below(4);
    c.inputs.push_back(random_tensor(rng, {m, k}, -1.5, 1.5));
    c.inputs.push_back(random_tensor(rng, {k, n}, -1.5, 1.5));
  } else if (name == "conv2d" || name == "conv2d_input_grad" || name == "conv2d_weight_grad") {
    const Dim n = 1 + rng.below(2), ci = 1 + rng.below(3), co = 1 + rng.below(3);
    const Dim k = 1 + rng.below(3);
    const int stride = 1 + static_cast<int>(rng.below(2));
    const int pad = static_cast<int>(rng.below(k));
    Dim h = k + rng.below(6), w = k + rng.below(6);
    const Dim ho = (h + 2 * pad - k) / stride + 1;
    const Dim wo = (w + 2 * pad - k) / stride + 1;
    c.attrs.i0 = stride;
    c.attrs.i1 = pad;
    Tensor x = random_tensor(rng, {n, ci, h, w}, -1.5, 1.5);
    Tensor kern = random_tensor(rng, {co, ci, k, k}, -1.0, 1.0);
    Tensor g = random_tensor(rng, {n, co, ho, wo}, -1.5, 1.5);
    if (name == "conv2d") {
      c.inputs = {x, kern};
    } else if (name == "conv2d_input_grad") {
      c.inputs = {g, kern};
      c.attrs.dims0 = x.shape();
    } else {
      c.inputs = {g, x};
      c.attrs.dims1 = kern.shape();
    }
  } else if (name == "relu") {
    c.inputs.push_back(random_signed_away_from_zero(rng, random_shape(rng), 0.1, 2.0));
  } else if (name == "log") {
    c.inputs.push_back(random_tensor(rng, random_shape(rng), 0.2, 2.0));
  } else if (name == "reduce_sum_to" || name == "reduce_max_to") {
    Shape s = random_shape(rng);
    c.inputs.push_back(random_tensor(rng, s, -1.5, 1.5));
    c.attrs.dims0 = random_reduced_target(rng, s);
  } else if (name == "broadcast_to") {
    Shape target = random_shape(rng);
    Shape s = target;
    for (auto& d : s) {
      if (rng.uniform() < 0.5) d = 1;
    }
    c.inputs.push_back(random_tensor(rng, s, -1.5, 1.5));
    c.attrs.dims0 = target;
  } else if (name == "concat") {
    Shape s = random_shape(rng);
    const int axis = static_cast<int>(rng.below(static_cast<Dim>(s.size())));
    c.attrs.i0 = axis;
    const int parts = 2 + static_cast<int>(rng.below(2));
    for (int i = 0; i < parts; ++i) {
      Shape si = s;
      si[static_cast<size_t>(axis)] = 1 + rng.below(3);
      c.inputs.push_back(random_tensor(rng, si, -1.5, 1.5));
    }
  } else if (name == "slice" || name == "embed") {
    Shape full = random_shape(rng);
    Shape starts(full.size()), sizes(full.size());
    for (size_t i = 0; i < full.size(); ++i) {
      sizes[i] = 1 + rng.below(full[i]);
      starts[i] = rng.below(full[i] - sizes[i] + 1);
    }
    if (name == "slice") {
      c.inputs.push_back(random_tensor(rng, full, -1.5, 1.5));
      c.attrs.dims0 = starts;
      c.attrs.dims1 = sizes;
    } else {
      c.inputs.push_back(random_tensor(rng, sizes, -1.5, 1.5));
      c.attrs.dims0 = full;
      c.attrs.dims1 = starts;
    }
  } else if (name == "reshape") {
    Shape s = random_shape(rng);
    c.inputs.push_back(random_tensor(rng, s, -1.5, 1.5));
    c.attrs.dims0 = {numel(s)};
  } else if (name == "permute") {
    Shape s = random_shape(rng);
    c.inputs.push_back(random_tensor(rng, s, -1.5, 1.5));
    Shape perm(s.size());
    for (size_t i = 0; i < s.size(); ++i) perm[i] = static_cast<Dim>(i);
    rng.shuffle(perm);
    c.attrs.dims0 = perm;
  } else if (name == "avg_pool2d" || name == "upsample_nearest") {
    const int k = 1 + static_cast<int>(rng.below(3));
    const Dim n = 1 + rng.below(2), ch = 1 + rng.below(3);
    Dim h = 1 + rng.below(3), w = 1 + rng.below(3);
    if (name == "avg_pool2d") {
      h *= k;
      w *= k;
    }
    c.inputs.push_back(random_tensor(rng, {n, ch, h, w}, -1.5, 1.5));
    c.attrs.i0 = k;
  } else if (name == "global_avg_pool" || name == "global_max_pool") {
    const Dim n = 1 + rng.below(2), ch = 1 + rng.below(3), h = 1 + rng.below(4), w = 1 + rng.below(4);
    c.inputs.push_back(random_tensor(rng, {n, ch, h, w}, -1.5, 1.5));
  } else {
    // softmax, sum, mean, exp, sigmoid, tanh
    c.inputs.push_back(any());
  }
  return c;
}

struct GradCheckResult {
  bool ok = true;
  double max_rel = 0.0;
  double max_abs = 0.0;
  std::string detail;
};

inline GradCheckResult grad_check(const OpCase& c, Rng& rng, double h = 1e-5, double rel_tol = 1e-5,
                                  double abs_tol = 1e-8) {
  ParamSet params;
  std::vector<std::string> names;
  for (size_t i = 0; i < c.inputs.size(); ++i) {
    names.push_back("in" + std::to_string(i));
    params.add(names.back(), c.inputs[i]);
  }
  std::vector<Tensor> probe_inputs = c.inputs;
  Tensor out_probe = primitive_forward(c.op, probe_inputs, c.attrs);
  Tensor proj = random_signed_away_from_zero(rng, out_probe.shape(), 0.5, 1.5);

  auto f = [&](const ParamSet& p) {
    std::vector<Tensor> ins;
    for (const auto& n : names) ins.push_back(p.at(n));
    return sum(mul(primitive_forward(c.op, ins, c.attrs), proj)).item();
  };

  Tape tape;
  watch_all(tape, params);
  GradientMap analytic;
  {
    TapeScope scope(&tape);
    std::vector<Tensor> ins;
    for (const auto& n : names) ins.push_back(params.at(n));
    Tensor s = sum(mul(primitive_forward(c.op, ins, c.attrs), proj));
    analytic = backward(tape, s, params);
  }
  GradientMap fd = finite_diff_grad(f, params, h);

  GradCheckResult r;
  for (const auto& [name, ga] : analytic.items()) {
    const Array& a = ga.array();
    const Array& b = fd.at(name).array();
    for (Dim i = 0; i < a.size(); ++i) {
      const double mag = std::max(std::abs(a(i)), std::abs(b(i)));
      const double err = std::abs(a(i) - b(i));
      if (mag < 1e-8) {
        r.max_abs = std::max(r.max_abs, err);
        if (err > abs_tol) r.ok = false;
      } else {
        const double rel = err / mag;
        r.max_rel = std::max(r.max_rel, rel);
        if (rel > rel_tol) r.ok = false;
      }
      if (!r.ok && r.detail.empty()) {
        std::ostringstream os;
        os << c.op << " " << name << "[" << i << "]: analytic " << a(i) << " vs fd " << b(i);
        r.detail = os.str();
      }
    }
  }
  return r;
}

}  // namespace mkc::testing
