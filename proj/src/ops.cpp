// Copyright (c) 2026 The mkcnet authors
// SPDX-License-Identifier: Apache-2.0
#include "mkc/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

namespace mkc {

namespace {

[[noreturn]] void fail(const std::string& op, const std::string& what) {
  throw std::invalid_argument(op + ": " + what);
}

void check_finite(const char* op, const Tensor& t) {
  if (!debug_checks_enabled()) return;
  if (!t.array().allFinite()) {
    throw std::runtime_error(std::string(op) + ": non-finite value in output of shape " + shape_str(t.shape()));
  }
}

/// Records `out` as an op node when a tape is active and any input is
/// differentiable; otherwise returns the plain value.
Tensor record(OpKind op, std::initializer_list<Tensor> inputs, Tensor out, OpAttrs attrs = {}) {
  check_finite(op_name(op), out);
  Tape* tape = Tape::active();
  if (!tape) return out;
  std::vector<int> ids;
  std::vector<Tensor> ins;
  ids.reserve(inputs.size());
  ins.reserve(inputs.size());
  bool any = false;
  for (const Tensor& in : inputs) {
    int id = tape->input_id(in);
    ids.push_back(id);
    ins.push_back(in);
    any = any || id >= 0;
  }
  if (!any) return out;
  return tape->emit(op, std::move(ids), std::move(ins), std::move(out), std::move(attrs));
}

enum class BinKind { kAdd, kSub, kMul, kDiv };

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  if (a.size() != b.size()) {
    fail(op, "rank mismatch between " + shape_str(a) + " and " + shape_str(b));
  }
  Shape out(a.size());
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i] || b[i] == 1) {
      out[i] = a[i];
    } else if (a[i] == 1) {
      out[i] = b[i];
    } else {
      fail(op, "incompatible shapes " + shape_str(a) + " and " + shape_str(b));
    }
  }
  return out;
}

std::vector<Dim> strides_of(const Shape& shape) {
  std::vector<Dim> s(shape.size());
  Dim acc = 1;
  for (size_t i = shape.size(); i-- > 0;) {
    s[i] = acc;
    acc *= shape[i];
  }
  return s;
}

Array broadcast_binary(const char* op, BinKind kind, const Tensor& ta, const Tensor& tb, const Shape& out_shape) {
  const Shape& sa = ta.shape();
  const Shape& sb = tb.shape();
  const Array& a = ta.array();
  const Array& b = tb.array();
  const int rank = static_cast<int>(out_shape.size());

  // Pick the longest trailing run over which both operands advance
  // uniformly: both contiguous, or one of them held constant.
  // 0 = both vary, 1 = b constant, 2 = a constant.
  int mode = -1;
  Dim run = 1;
  int outer_rank = rank;
  for (int ax = rank - 1; ax >= 0; --ax) {
    size_t i = static_cast<size_t>(ax);
    if (out_shape[i] == 1) {
      --outer_rank;
      continue;
    }
    const bool a_bcast = sa[i] == 1;
    const bool b_bcast = sb[i] == 1;
    const int axis_mode = b_bcast ? 1 : (a_bcast ? 2 : 0);
    if (mode == -1) mode = axis_mode;
    if (axis_mode != mode) break;
    run *= out_shape[i];
    --outer_rank;
  }
  if (mode == -1) mode = 0;

  const auto a_strides = strides_of(sa);
  const auto b_strides = strides_of(sb);
  Array out(numel(out_shape));

  std::vector<Dim> idx(static_cast<size_t>(outer_rank), 0);
  Dim n_outer = 1;
  for (int i = 0; i < outer_rank; ++i) n_outer *= out_shape[static_cast<size_t>(i)];

  Dim out_off = 0;
  for (Dim it = 0; it < n_outer; ++it, out_off += run) {
    Dim a_off = 0, b_off = 0;
    for (int i = 0; i < outer_rank; ++i) {
      size_t u = static_cast<size_t>(i);
      if (sa[u] != 1) a_off += idx[u] * a_strides[u];
      if (sb[u] != 1) b_off += idx[u] * b_strides[u];
    }
    auto dst = out.segment(out_off, run);
    if (mode == 0) {
      auto av = a.segment(a_off, run);
      auto bv = b.segment(b_off, run);
      switch (kind) {
        case BinKind::kAdd: dst = av + bv; break;
        case BinKind::kSub: dst = av - bv; break;
        case BinKind::kMul: dst = av * bv; break;
        case BinKind::kDiv: dst = av / bv; break;
      }
    } else if (mode == 1) {
      auto av = a.segment(a_off, run);
      const double bs = b(b_off);
      switch (kind) {
        case BinKind::kAdd: dst = av + bs; break;
        case BinKind::kSub: dst = av - bs; break;
        case BinKind::kMul: dst = av * bs; break;
        case BinKind::kDiv: dst = av / bs; break;
      }
    } else {
      const double as = a(a_off);
      auto bv = b.segment(b_off, run);
      switch (kind) {
        case BinKind::kAdd: dst = as + bv; break;
        case BinKind::kSub: dst = as - bv; break;
        case BinKind::kMul: dst = as * bv; break;
        case BinKind::kDiv: dst = as / bv; break;
      }
    }
    // Advance the outer odometer (last outer axis fastest).
    for (int i = outer_rank - 1; i >= 0; --i) {
      size_t u = static_cast<size_t>(i);
      if (++idx[u] < out_shape[u]) break;
      idx[u] = 0;
    }
  }
  return out;
}

Tensor binary_op(const char* name, OpKind op, BinKind kind, const Tensor& a, const Tensor& b) {
  Shape out_shape = broadcast_shape(name, a.shape(), b.shape());
  Array out = broadcast_binary(name, kind, a, b, out_shape);
  return record(op, {a, b}, Tensor(std::move(out_shape), std::move(out)));
}

/// Partition of the axes for reductions/broadcasts over one contiguous
/// block of mismatched axes: shape = [outer][block][inner].
struct BlockSplit {
  bool contiguous = false;
  Dim outer = 1, block = 1, inner = 1;
};

BlockSplit split_axes(const Shape& big, const Shape& small) {
  int lo = -1, hi = -1;
  for (size_t i = 0; i < big.size(); ++i) {
    if (small[i] == 1 && big[i] != 1) {
      if (lo < 0) lo = static_cast<int>(i);
      hi = static_cast<int>(i);
    }
  }
  BlockSplit s;
  if (lo < 0) {
    s.contiguous = true;  // nothing to reduce
    s.outer = numel(big);
    return s;
  }
  for (int i = lo; i <= hi; ++i) {
    if (small[static_cast<size_t>(i)] != 1 && big[static_cast<size_t>(i)] != 1) return s;  // gap
  }
  s.contiguous = true;
  for (int i = 0; i < lo; ++i) s.outer *= big[static_cast<size_t>(i)];
  for (int i = lo; i <= hi; ++i) s.block *= big[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(hi) + 1; i < big.size(); ++i) s.inner *= big[i];
  return s;
}

void check_reduce_shapes(const char* op, const Shape& in, const Shape& target) {
  if (in.size() != target.size()) fail(op, "rank mismatch " + shape_str(in) + " vs " + shape_str(target));
  for (size_t i = 0; i < in.size(); ++i) {
    if (target[i] != in[i] && target[i] != 1) {
      fail(op, "target " + shape_str(target) + " incompatible with " + shape_str(in));
    }
  }
}

Array reduce_sum_array(const Tensor& t, const Shape& target) {
  const Array& in = t.array();
  BlockSplit s = split_axes(t.shape(), target);
  Array out = Array::Zero(numel(target));
  if (s.contiguous) {
    if (s.block == 1) {
      out = in;
    } else if (s.inner == 1) {
      for (Dim o = 0; o < s.outer; ++o) out(o) = in.segment(o * s.block, s.block).sum();
    } else {
      for (Dim o = 0; o < s.outer; ++o) {
        auto dst = out.segment(o * s.inner, s.inner);
        for (Dim m = 0; m < s.block; ++m) dst += in.segment((o * s.block + m) * s.inner, s.inner);
      }
    }
    return out;
  }
  // Non-contiguous reduced axes: plain odometer walk.
  const Shape& shape = t.shape();
  const auto out_strides = strides_of(target);
  std::vector<Dim> idx(shape.size(), 0);
  for (Dim flat = 0; flat < in.size(); ++flat) {
    Dim o = 0;
    for (size_t i = 0; i < shape.size(); ++i) {
      if (target[i] != 1) o += idx[i] * out_strides[i];
    }
    out(o) += in(flat);
    for (size_t i = shape.size(); i-- > 0;) {
      if (++idx[i] < shape[i]) break;
      idx[i] = 0;
    }
  }
  return out;
}

Array broadcast_array(const Tensor& t, const Shape& target) {
  const Array& in = t.array();
  BlockSplit s = split_axes(target, t.shape());
  Array out(numel(target));
  if (s.contiguous) {
    if (s.block == 1) {
      out = in;
    } else if (s.inner == 1) {
      for (Dim o = 0; o < s.outer; ++o) out.segment(o * s.block, s.block) = in(o);
    } else {
      for (Dim o = 0; o < s.outer; ++o) {
        auto src = in.segment(o * s.inner, s.inner);
        for (Dim m = 0; m < s.block; ++m) out.segment((o * s.block + m) * s.inner, s.inner) = src;
      }
    }
    return out;
  }
  const auto in_strides = strides_of(t.shape());
  std::vector<Dim> idx(target.size(), 0);
  for (Dim flat = 0; flat < out.size(); ++flat) {
    Dim o = 0;
    for (size_t i = 0; i < target.size(); ++i) {
      if (t.shape()[i] != 1) o += idx[i] * in_strides[i];
    }
    out(flat) = in(o);
    for (size_t i = target.size(); i-- > 0;) {
      if (++idx[i] < target[i]) break;
      idx[i] = 0;
    }
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op("add", OpKind::kAdd, BinKind::kAdd, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op("sub", OpKind::kSub, BinKind::kSub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op("mul", OpKind::kMul, BinKind::kMul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op("div", OpKind::kDiv, BinKind::kDiv, a, b); }

Tensor scale(const Tensor& t, double m, double c) {
  Array out = t.array() * m + c;
  OpAttrs attrs;
  attrs.d0 = m;
  attrs.d1 = c;
  return record(OpKind::kScale, {t}, Tensor(t.shape(), std::move(out)), std::move(attrs));
}

Tensor neg(const Tensor& t) { return scale(t, -1.0); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    fail("matmul", "incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const Dim m = a.extent(0), k = a.extent(1), n = b.extent(1);
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMat> ma(a.array().data(), m, k);
  Eigen::Map<const RowMat> mb(b.array().data(), k, n);
  Array out(m * n);
  Eigen::Map<RowMat> mo(out.data(), m, n);
  mo.noalias() = ma * mb;
  return record(OpKind::kMatmul, {a, b}, Tensor({m, n}, std::move(out)));
}

Tensor relu(const Tensor& t) {
  Array out = t.array().max(0.0);
  return record(OpKind::kRelu, {t}, Tensor(t.shape(), std::move(out)));
}

Tensor sigmoid(const Tensor& t) {
  Array out = t.array().unaryExpr([](double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
  return record(OpKind::kSigmoid, {t}, Tensor(t.shape(), std::move(out)));
}

Tensor tanh(const Tensor& t) {
  Array out = t.array().tanh();
  return record(OpKind::kTanh, {t}, Tensor(t.shape(), std::move(out)));
}

Tensor exp(const Tensor& t) {
  Array out = t.array().exp();
  return record(OpKind::kExp, {t}, Tensor(t.shape(), std::move(out)));
}

Tensor log(const Tensor& t) {
  // Floor first so the recorded function (and its gradient) matches what
  // finite differences see: d/dx log(max(x, eps)) == 0 below the floor.
  Tensor floored = scale(relu(scale(t, 1.0, -kLogFloor)), 1.0, kLogFloor);
  Array out = floored.array().log();
  return record(OpKind::kLog, {floored}, Tensor(t.shape(), std::move(out)));
}

Tensor softmax(const Tensor& t) {
  const Dim k = t.extent(t.rank() - 1);
  const Dim rows = t.size() / k;
  Array out(t.size());
  const Array& in = t.array();
  for (Dim r = 0; r < rows; ++r) {
    auto row = in.segment(r * k, k);
    auto dst = out.segment(r * k, k);
    dst = (row - row.maxCoeff()).exp();
    dst /= dst.sum();
  }
  return record(OpKind::kSoftmax, {t}, Tensor(t.shape(), std::move(out)));
}

Tensor reduce_sum_to(const Tensor& t, Shape target) {
  check_reduce_shapes("reduce_sum_to", t.shape(), target);
  if (target == t.shape()) return t;
  Array out = reduce_sum_array(t, target);
  return record(OpKind::kReduceSumTo, {t}, Tensor(std::move(target), std::move(out)));
}

Tensor reduce_max_to(const Tensor& t, Shape target) {
  check_reduce_shapes("reduce_max_to", t.shape(), target);
  if (target == t.shape()) return t;
  const Array& in = t.array();
  BlockSplit s = split_axes(t.shape(), target);
  Array out(numel(target));
  if (s.contiguous) {
    if (s.inner == 1) {
      for (Dim o = 0; o < s.outer; ++o) out(o) = in.segment(o * s.block, s.block).maxCoeff();
    } else {
      for (Dim o = 0; o < s.outer; ++o) {
        auto dst = out.segment(o * s.inner, s.inner);
        dst = in.segment(o * s.block * s.inner, s.inner);
        for (Dim m = 1; m < s.block; ++m) dst = dst.max(in.segment((o * s.block + m) * s.inner, s.inner));
      }
    }
  } else {
    out = Array::Constant(numel(target), -std::numeric_limits<double>::infinity());
    const auto out_strides = strides_of(target);
    std::vector<Dim> idx(t.shape().size(), 0);
    for (Dim flat = 0; flat < in.size(); ++flat) {
      Dim o = 0;
      for (size_t i = 0; i < t.shape().size(); ++i) {
        if (target[i] != 1) o += idx[i] * out_strides[i];
      }
      out(o) = std::max(out(o), in(flat));
      for (size_t i = t.shape().size(); i-- > 0;) {
        if (++idx[i] < t.shape()[i]) break;
        idx[i] = 0;
      }
    }
  }
  return record(OpKind::kReduceMaxTo, {t}, Tensor(std::move(target), std::move(out)));
}

namespace detail {

Tensor reduce_max_first_argmax_mask(const Tensor& in, const Shape& target) {
  // Subgradient choice for max reductions: route to the first attaining
  // element in flat order.
  const Array& a = in.array();
  const auto out_strides = strides_of(target);
  const Dim n_out = numel(target);
  std::vector<Dim> argmax(static_cast<size_t>(n_out), -1);
  std::vector<double> best(static_cast<size_t>(n_out), -std::numeric_limits<double>::infinity());
  std::vector<Dim> idx(in.shape().size(), 0);
  for (Dim flat = 0; flat < a.size(); ++flat) {
    Dim o = 0;
    for (size_t i = 0; i < in.shape().size(); ++i) {
      if (target[i] != 1) o += idx[i] * out_strides[i];
    }
    if (a(flat) > best[static_cast<size_t>(o)]) {
      best[static_cast<size_t>(o)] = a(flat);
      argmax[static_cast<size_t>(o)] = flat;
    }
    for (size_t i = in.shape().size(); i-- > 0;) {
      if (++idx[i] < in.shape()[i]) break;
      idx[i] = 0;
    }
  }
  Array mask = Array::Zero(a.size());
  for (Dim m : argmax) {
    if (m >= 0) mask(m) = 1.0;
  }
  return Tensor(in.shape(), std::move(mask));
}

}  // namespace detail

Tensor broadcast_to(const Tensor& t, Shape target) {
  if (t.shape().size() != target.size()) {
    fail("broadcast_to", "rank mismatch " + shape_str(t.shape()) + " vs " + shape_str(target));
  }
  for (size_t i = 0; i < target.size(); ++i) {
    if (t.shape()[i] != target[i] && t.shape()[i] != 1) {
      fail("broadcast_to", shape_str(t.shape()) + " cannot broadcast to " + shape_str(target));
    }
  }
  if (target == t.shape()) return t;
  Array out = broadcast_array(t, target);
  return record(OpKind::kBroadcastTo, {t}, Tensor(std::move(target), std::move(out)));
}

Tensor sum(const Tensor& t) {
  Shape ones(static_cast<size_t>(t.rank()), 1);
  return reshape(reduce_sum_to(t, std::move(ones)), {1});
}

Tensor mean(const Tensor& t) { return scale(sum(t), 1.0 / static_cast<double>(t.size())); }

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) fail("concat", "no inputs");
  const Shape& s0 = parts[0].shape();
  const int rank = parts[0].rank();
  if (axis < 0 || axis >= rank) fail("concat", "axis " + std::to_string(axis) + " out of range");
  Shape out_shape = s0;
  out_shape[static_cast<size_t>(axis)] = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != rank) fail("concat", "rank mismatch");
    for (int i = 0; i < rank; ++i) {
      if (i != axis && p.shape()[static_cast<size_t>(i)] != s0[static_cast<size_t>(i)]) {
        fail("concat", "shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(s0));
      }
    }
    out_shape[static_cast<size_t>(axis)] += p.extent(axis);
  }
  Dim outer = 1, tail = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[static_cast<size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) tail *= s0[static_cast<size_t>(i)];
  Array out(numel(out_shape));
  const Dim out_inner = out_shape[static_cast<size_t>(axis)] * tail;
  Dim off = 0;
  for (const Tensor& p : parts) {
    const Dim inner = p.extent(axis) * tail;
    for (Dim o = 0; o < outer; ++o) {
      out.segment(o * out_inner + off, inner) = p.array().segment(o * inner, inner);
    }
    off += inner;
  }
  // The tape node needs every part; record manually to keep arity open.
  Tensor result(std::move(out_shape), std::move(out));
  check_finite("concat", result);
  Tape* tape = Tape::active();
  if (!tape) return result;
  std::vector<int> ids;
  std::vector<Tensor> ins;
  bool any = false;
  for (const Tensor& p : parts) {
    int id = tape->input_id(p);
    ids.push_back(id);
    ins.push_back(p);
    any = any || id >= 0;
  }
  if (!any) return result;
  OpAttrs attrs;
  attrs.i0 = axis;
  return tape->emit(OpKind::kConcat, std::move(ids), std::move(ins), std::move(result), std::move(attrs));
}

Tensor concat(const Tensor& a, const Tensor& b, int axis) {
  std::array<Tensor, 2> parts{a, b};
  return concat(std::span<const Tensor>(parts.data(), parts.size()), axis);
}

namespace {

/// Innermost contiguous chunk of a slice region plus the outer odometer
/// extent; shared by slice and embed.
struct CopyPlan {
  Dim chunk = 1;       // contiguous elements per copy
  int outer_rank = 0;  // axes iterated by the odometer
};

CopyPlan slice_plan(const Shape& full, const Shape& starts, const Shape& sizes) {
  CopyPlan p;
  int ax = static_cast<int>(full.size()) - 1;
  // Merge full trailing axes into the chunk, then one partial axis.
  while (ax >= 0 && sizes[static_cast<size_t>(ax)] == full[static_cast<size_t>(ax)] &&
         starts[static_cast<size_t>(ax)] == 0) {
    p.chunk *= full[static_cast<size_t>(ax)];
    --ax;
  }
  if (ax >= 0) {
    p.chunk *= sizes[static_cast<size_t>(ax)];
    --ax;
  }
  p.outer_rank = ax + 1;
  return p;
}

}  // namespace

Tensor slice(const Tensor& t, Shape starts, Shape sizes) {
  const Shape& full = t.shape();
  if (starts.size() != full.size() || sizes.size() != full.size()) fail("slice", "rank mismatch");
  for (size_t i = 0; i < full.size(); ++i) {
    if (starts[i] < 0 || sizes[i] <= 0 || starts[i] + sizes[i] > full[i]) {
      fail("slice", "window at " + shape_str(starts) + " size " + shape_str(sizes) + " outside " + shape_str(full));
    }
  }
  const CopyPlan plan = slice_plan(full, starts, sizes);
  const auto src_strides = strides_of(full);
  Array out(numel(sizes));
  std::vector<Dim> idx(static_cast<size_t>(plan.outer_rank), 0);
  Dim dst = 0;
  Dim n_outer = 1;
  for (int i = 0; i < plan.outer_rank; ++i) n_outer *= sizes[static_cast<size_t>(i)];
  for (Dim it = 0; it < n_outer; ++it, dst += plan.chunk) {
    Dim src = 0;
    for (int i = 0; i < plan.outer_rank; ++i) {
      size_t u = static_cast<size_t>(i);
      src += (starts[u] + idx[u]) * src_strides[u];
    }
    for (int i = plan.outer_rank; i < static_cast<int>(full.size()); ++i) {
      src += starts[static_cast<size_t>(i)] * src_strides[static_cast<size_t>(i)];
    }
    out.segment(dst, plan.chunk) = t.array().segment(src, plan.chunk);
    for (int i = plan.outer_rank - 1; i >= 0; --i) {
      size_t u = static_cast<size_t>(i);
      if (++idx[u] < sizes[u]) break;
      idx[u] = 0;
    }
  }
  OpAttrs attrs;
  attrs.dims0 = starts;
  attrs.dims1 = sizes;
  return record(OpKind::kSlice, {t}, Tensor(std::move(sizes), std::move(out)), std::move(attrs));
}

Tensor embed(const Tensor& t, Shape full, Shape starts) {
  const Shape& sizes = t.shape();
  if (starts.size() != full.size() || sizes.size() != full.size()) fail("embed", "rank mismatch");
  for (size_t i = 0; i < full.size(); ++i) {
    if (starts[i] < 0 || starts[i] + sizes[i] > full[i]) {
      fail("embed", "window at " + shape_str(starts) + " size " + shape_str(sizes) + " outside " + shape_str(full));
    }
  }
  const CopyPlan plan = slice_plan(full, starts, sizes);
  const auto dst_strides = strides_of(full);
  Array out = Array::Zero(numel(full));
  std::vector<Dim> idx(static_cast<size_t>(plan.outer_rank), 0);
  Dim src = 0;
  Dim n_outer = 1;
  for (int i = 0; i < plan.outer_rank; ++i) n_outer *= sizes[static_cast<size_t>(i)];
  for (Dim it = 0; it < n_outer; ++it, src += plan.chunk) {
    Dim dst = 0;
    for (int i = 0; i < plan.outer_rank; ++i) {
      size_t u = static_cast<size_t>(i);
      dst += (starts[u] + idx[u]) * dst_strides[u];
    }
    for (int i = plan.outer_rank; i < static_cast<int>(full.size()); ++i) {
      dst += starts[static_cast<size_t>(i)] * dst_strides[static_cast<size_t>(i)];
    }
    out.segment(dst, plan.chunk) = t.array().segment(src, plan.chunk);
    for (int i = plan.outer_rank - 1; i >= 0; --i) {
      size_t u = static_cast<size_t>(i);
      if (++idx[u] < sizes[u]) break;
      idx[u] = 0;
    }
  }
  OpAttrs attrs;
  attrs.dims0 = full;
  attrs.dims1 = starts;
  return record(OpKind::kEmbed, {t}, Tensor(std::move(full), std::move(out)), std::move(attrs));
}

Tensor reshape(const Tensor& t, Shape shape) {
  if (numel(shape) != t.size()) {
    fail("reshape", shape_str(shape) + " incompatible with " + shape_str(t.shape()));
  }
  if (shape == t.shape()) return t;
  OpAttrs attrs;
  attrs.dims0 = shape;
  return record(OpKind::kReshape, {t}, t.with_shape(std::move(shape)), std::move(attrs));
}

Tensor permute(const Tensor& t, Shape perm) {
  const int rank = t.rank();
  if (static_cast<int>(perm.size()) != rank) fail("permute", "permutation rank mismatch");
  std::vector<bool> seen(static_cast<size_t>(rank), false);
  for (Dim p : perm) {
    if (p < 0 || p >= rank || seen[static_cast<size_t>(p)]) fail("permute", "invalid permutation");
    seen[static_cast<size_t>(p)] = true;
  }
  Shape out_shape(static_cast<size_t>(rank));
  for (int i = 0; i < rank; ++i) out_shape[static_cast<size_t>(i)] = t.extent(static_cast<int>(perm[static_cast<size_t>(i)]));
  const auto in_strides = strides_of(t.shape());
  Array out(t.size());
  if (rank == 2 && perm[0] == 1) {
    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const RowMat> src(t.array().data(), t.extent(0), t.extent(1));
    Eigen::Map<RowMat> dst(out.data(), out_shape[0], out_shape[1]);
    dst = src.transpose();
  } else {
    std::vector<Dim> stride_for_out(static_cast<size_t>(rank));
    for (int i = 0; i < rank; ++i) stride_for_out[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    std::vector<Dim> idx(static_cast<size_t>(rank), 0);
    for (Dim flat = 0; flat < out.size(); ++flat) {
      Dim src = 0;
      for (int i = 0; i < rank; ++i) src += idx[static_cast<size_t>(i)] * stride_for_out[static_cast<size_t>(i)];
      out(flat) = t.array()(src);
      for (int i = rank - 1; i >= 0; --i) {
        size_t u = static_cast<size_t>(i);
        if (++idx[u] < out_shape[u]) break;
        idx[u] = 0;
      }
    }
  }
  OpAttrs attrs;
  attrs.dims0 = std::move(perm);
  return record(OpKind::kPermute, {t}, Tensor(std::move(out_shape), std::move(out)), std::move(attrs));
}

Tensor transpose(const Tensor& t) {
  if (t.rank() != 2) fail("transpose", "expects rank 2, got " + shape_str(t.shape()));
  return permute(t, {1, 0});
}

Tensor avg_pool2d(const Tensor& t, int k) {
  if (t.rank() != 4) fail("avg_pool2d", "expects [N,C,H,W], got " + shape_str(t.shape()));
  if (k < 1) fail("avg_pool2d", "window must be positive");
  const Dim n = t.extent(0), c = t.extent(1), h = t.extent(2), w = t.extent(3);
  if (h % k != 0 || w % k != 0) {
    fail("avg_pool2d", "extents " + shape_str(t.shape()) + " not divisible by " + std::to_string(k));
  }
  const Dim ho = h / k, wo = w / k;
  Array out(n * c * ho * wo);
  const Array& in = t.array();
  const double inv = 1.0 / (static_cast<double>(k) * k);
  for (Dim img = 0; img < n * c; ++img) {
    const Dim base = img * h * w;
    for (Dim oh = 0; oh < ho; ++oh) {
      Array acc = Array::Zero(w);
      for (int r = 0; r < k; ++r) acc += in.segment(base + (oh * k + r) * w, w);
      auto dst = out.segment((img * ho + oh) * wo, wo);
      for (Dim ow = 0; ow < wo; ++ow) dst(ow) = acc.segment(ow * k, k).sum() * inv;
    }
  }
  OpAttrs attrs;
  attrs.i0 = k;
  return record(OpKind::kAvgPool2d, {t}, Tensor({n, c, ho, wo}, std::move(out)), std::move(attrs));
}

Tensor upsample_nearest(const Tensor& t, int k) {
  if (t.rank() != 4) fail("upsample_nearest", "expects [N,C,H,W], got " + shape_str(t.shape()));
  if (k < 1) fail("upsample_nearest", "factor must be positive");
  const Dim n = t.extent(0), c = t.extent(1), h = t.extent(2), w = t.extent(3);
  const Dim ho = h * k, wo = w * k;
  Array out(n * c * ho * wo);
  const Array& in = t.array();
  Array row(wo);
  for (Dim img = 0; img < n * c; ++img) {
    for (Dim ih = 0; ih < h; ++ih) {
      auto src = in.segment((img * h + ih) * w, w);
      for (Dim iw = 0; iw < w; ++iw) row.segment(iw * k, k) = src(iw);
      for (int r = 0; r < k; ++r) {
        out.segment((img * ho + ih * k + r) * wo, wo) = row;
      }
    }
  }
  OpAttrs attrs;
  attrs.i0 = k;
  return record(OpKind::kUpsampleNearest, {t}, Tensor({n, c, ho, wo}, std::move(out)), std::move(attrs));
}

Tensor global_avg_pool(const Tensor& t) {
  if (t.rank() != 4) fail("global_avg_pool", "expects [N,C,H,W], got " + shape_str(t.shape()));
  const Dim n = t.extent(0), c = t.extent(1);
  const double inv = 1.0 / static_cast<double>(t.extent(2) * t.extent(3));
  return reshape(scale(reduce_sum_to(t, {n, c, 1, 1}), inv), {n, c});
}

Tensor global_max_pool(const Tensor& t) {
  if (t.rank() != 4) fail("global_max_pool", "expects [N,C,H,W], got " + shape_str(t.shape()));
  const Dim n = t.extent(0), c = t.extent(1);
  return reshape(reduce_max_to(t, {n, c, 1, 1}), {n, c});
}

Tensor pow_const(const Tensor& t, double p) {
  if (p < 0.0) fail("pow_const", "negative exponent");
  if (p == 0.0) return Tensor::full(t.shape(), 1.0);
  if (p == 1.0) return t;
  if (p == 2.0) return mul(t, t);
  return exp(scale(log(t), p));
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) { return add(matmul(x, w), b); }

namespace {

constexpr std::string_view kOpNames[] = {
    "add",         "sub",           "mul",          "div",
    "scale",       "matmul",        "conv2d",       "relu",
    "sigmoid",     "tanh",          "exp",          "log",
    "softmax",     "sum",           "mean",         "reduce_sum_to",
    "reduce_max_to", "broadcast_to", "concat",      "slice",
    "embed",       "reshape",       "permute",      "avg_pool2d",
    "upsample_nearest", "global_avg_pool", "global_max_pool",
};

}  // namespace

std::span<const std::string_view> differentiable_op_names() {
  return std::span<const std::string_view>(kOpNames, std::size(kOpNames));
}

Tensor primitive_forward(std::string_view op, std::span<const Tensor> in, const OpAttrs& attrs) {
  auto want = [&](size_t n) {
    if (in.size() != n) fail(std::string(op), "expected " + std::to_string(n) + " inputs, got " + std::to_string(in.size()));
  };
  if (op == "add") { want(2); return add(in[0], in[1]); }
  if (op == "sub") { want(2); return sub(in[0], in[1]); }
  if (op == "mul") { want(2); return mul(in[0], in[1]); }
  if (op == "div") { want(2); return div(in[0], in[1]); }
  if (op == "scale") { want(1); return scale(in[0], attrs.d0, attrs.d1); }
  if (op == "matmul") { want(2); return matmul(in[0], in[1]); }
  if (op == "conv2d") { want(2); return conv2d(in[0], in[1], attrs.i0, attrs.i1); }
  if (op == "conv2d_input_grad") { want(2); return conv2d_input_grad(in[0], in[1], attrs.i0, attrs.i1, attrs.dims0); }
  if (op == "conv2d_weight_grad") { want(2); return conv2d_weight_grad(in[0], in[1], attrs.i0, attrs.i1, attrs.dims1); }
  if (op == "relu") { want(1); return relu(in[0]); }
  if (op == "sigmoid") { want(1); return sigmoid(in[0]); }
  if (op == "tanh") { want(1); return tanh(in[0]); }
  if (op == "exp") { want(1); return exp(in[0]); }
  if (op == "log") { want(1); return log(in[0]); }
  if (op == "softmax") { want(1); return softmax(in[0]); }
  if (op == "sum") { want(1); return sum(in[0]); }
  if (op == "mean") { want(1); return mean(in[0]); }
  if (op == "reduce_sum_to") { want(1); return reduce_sum_to(in[0], attrs.dims0); }
  if (op == "reduce_max_to") { want(1); return reduce_max_to(in[0], attrs.dims0); }
  if (op == "broadcast_to") { want(1); return broadcast_to(in[0], attrs.dims0); }
  if (op == "concat") { return concat(in, attrs.i0); }
  if (op == "slice") { want(1); return slice(in[0], attrs.dims0, attrs.dims1); }
  if (op == "embed") { want(1); return embed(in[0], attrs.dims0, attrs.dims1); }
  if (op == "reshape") { want(1); return reshape(in[0], attrs.dims0); }
  if (op == "permute") { want(1); return permute(in[0], attrs.dims0); }
  if (op == "avg_pool2d") { want(1); return avg_pool2d(in[0], attrs.i0); }
  if (op == "upsample_nearest") { want(1); return upsample_nearest(in[0], attrs.i0); }
  if (op == "global_avg_pool") { want(1); return global_avg_pool(in[0]); }
  if (op == "global_max_pool") { want(1); return global_max_pool(in[0]); }
  throw std::invalid_argument("primitive_forward: unknown op '" + std::string(op) + "'");
}

}  // namespace mkc
