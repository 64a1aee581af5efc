// Copyright (c) 2026 The mkcnet authors
// SPDX-License-Identifier: Apache-2.0
#include "mkc/grad.hpp"

#include <stdexcept>

namespace mkc {

Tensor& TensorMap::put(const std::string& name, Tensor t) {
  auto it = index_.find(name);
  if (it != index_.end()) {
    items_[it->second].second = std::move(t);
    return items_[it->second].second;
  }
  index_.emplace(name, items_.size());
  items_.emplace_back(name, std::move(t));
  return items_.back().second;
}

bool TensorMap::contains(const std::string& name) const { return index_.count(name) != 0; }

const Tensor& TensorMap::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no tensor named '" + name + "'");
  return items_[it->second].second;
}

Tensor& TensorMap::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no tensor named '" + name + "'");
  return items_[it->second].second;
}

Dim TensorMap::total_elements() const {
  Dim n = 0;
  for (const auto& [name, t] : items_) n += t.size();
  return n;
}

Tensor& ParamSet::add(const std::string& name, Tensor t) {
  t.set_requires_grad(true);
  return map_.put(name, std::move(t));
}

ParamSet ParamSet::with_prefix(const std::string& prefix) const {
  ParamSet out;
  for (const auto& [name, t] : items()) {
    if (name.rfind(prefix, 0) == 0) out.add(name, t);
  }
  return out;
}

ParamSet ParamSet::with_value(const std::string& name, Tensor t) const {
  if (!contains(name)) throw std::out_of_range("no parameter named '" + name + "'");
  if (t.shape() != at(name).shape()) {
    throw std::invalid_argument("with_value: shape mismatch for '" + name + "'");
  }
  ParamSet out;
  for (const auto& [n, v] : items()) out.add(n, n == name ? t : v);
  return out;
}

void watch_all(Tape& tape, const ParamSet& params) {
  for (const auto& [name, t] : params.items()) tape.watch(t);
}

namespace {

Tensor fit_shape(const Tensor& g, const Shape& target) {
  return g.shape() == target ? g : reduce_sum_to(g, target);
}

Shape last_axis_kept(const Shape& s) {
  Shape out = s;
  out.back() = 1;
  return out;
}

Shape inverse_perm(const Shape& perm) {
  Shape inv(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<Dim>(i);
  return inv;
}

/// Per-input adjoint contributions of one node. Everything here is written
/// with the public ops so that, when the tape is active, the adjoint
/// computation is recorded and stays differentiable.
void accumulate_vjp(const TapeNode& node, const Tensor& g, std::vector<Tensor>& adjoint) {
  auto contribute = [&](size_t input_index, const Tensor& contribution) {
    const int id = node.in_ids[input_index];
    if (id < 0) return;
    Tensor& slot = adjoint[static_cast<size_t>(id)];
    slot = slot.defined() ? add(slot, contribution) : contribution;
  };
  auto wants = [&](size_t input_index) { return node.in_ids[input_index] >= 0; };

  switch (node.op) {
    case OpKind::kLeaf:
      break;
    case OpKind::kAdd: {
      if (wants(0)) contribute(0, fit_shape(g, node.inputs[0].shape()));
      if (wants(1)) contribute(1, fit_shape(g, node.inputs[1].shape()));
      break;
    }
    case OpKind::kSub: {
      if (wants(0)) contribute(0, fit_shape(g, node.inputs[0].shape()));
      if (wants(1)) contribute(1, fit_shape(neg(g), node.inputs[1].shape()));
      break;
    }
    case OpKind::kMul: {
      if (wants(0)) contribute(0, fit_shape(mul(g, node.inputs[1]), node.inputs[0].shape()));
      if (wants(1)) contribute(1, fit_shape(mul(g, node.inputs[0]), node.inputs[1].shape()));
      break;
    }
    case OpKind::kDiv: {
      const Tensor& a = node.inputs[0];
      const Tensor& b = node.inputs[1];
      if (wants(0)) contribute(0, fit_shape(div(g, b), a.shape()));
      if (wants(1)) contribute(1, fit_shape(neg(div(mul(g, a), mul(b, b))), b.shape()));
      break;
    }
    case OpKind::kScale: {
      if (wants(0)) contribute(0, scale(g, node.attrs.d0));
      break;
    }
    case OpKind::kMatmul: {
      if (wants(0)) contribute(0, matmul(g, transpose(node.inputs[1])));
      if (wants(1)) contribute(1, matmul(transpose(node.inputs[0]), g));
      break;
    }
    case OpKind::kConv2d: {
      const int s = node.attrs.i0, p = node.attrs.i1;
      if (wants(0)) contribute(0, conv2d_input_grad(g, node.inputs[1], s, p, node.attrs.dims0));
      if (wants(1)) contribute(1, conv2d_weight_grad(g, node.inputs[0], s, p, node.attrs.dims1));
      break;
    }
    case OpKind::kConv2dInputGrad: {
      const int s = node.attrs.i0, p = node.attrs.i1;
      if (wants(0)) contribute(0, conv2d(g, node.inputs[1], s, p));
      if (wants(1)) contribute(1, conv2d_weight_grad(node.inputs[0], g, s, p, node.attrs.dims1));
      break;
    }
    case OpKind::kConv2dWeightGrad: {
      const int s = node.attrs.i0, p = node.attrs.i1;
      if (wants(0)) contribute(0, conv2d(node.inputs[1], g, s, p));
      if (wants(1)) contribute(1, conv2d_input_grad(node.inputs[0], g, s, p, node.attrs.dims0));
      break;
    }
    case OpKind::kRelu: {
      if (wants(0)) {
        const Tensor& x = node.inputs[0];
        // Subgradient at the kink is 0; the mask is a constant, so relu
        // contributes nothing to second derivatives.
        Tensor mask(x.shape(), (x.array() > 0.0).cast<double>());
        contribute(0, mul(g, mask));
      }
      break;
    }
    case OpKind::kSigmoid: {
      if (wants(0)) contribute(0, mul(mul(g, node.value), scale(node.value, -1.0, 1.0)));
      break;
    }
    case OpKind::kTanh: {
      if (wants(0)) contribute(0, mul(g, scale(mul(node.value, node.value), -1.0, 1.0)));
      break;
    }
    case OpKind::kExp: {
      if (wants(0)) contribute(0, mul(g, node.value));
      break;
    }
    case OpKind::kLog: {
      if (wants(0)) contribute(0, div(g, node.inputs[0]));
      break;
    }
    case OpKind::kSoftmax: {
      if (wants(0)) {
        const Tensor& y = node.value;
        Tensor dot = reduce_sum_to(mul(g, y), last_axis_kept(y.shape()));
        contribute(0, mul(y, sub(g, dot)));
      }
      break;
    }
    case OpKind::kReduceSumTo: {
      if (wants(0)) contribute(0, broadcast_to(g, node.inputs[0].shape()));
      break;
    }
    case OpKind::kReduceMaxTo: {
      if (wants(0)) {
        Tensor mask = detail::reduce_max_first_argmax_mask(node.inputs[0], node.value.shape());
        contribute(0, mul(broadcast_to(g, node.inputs[0].shape()), mask));
      }
      break;
    }
    case OpKind::kBroadcastTo: {
      if (wants(0)) contribute(0, reduce_sum_to(g, node.inputs[0].shape()));
      break;
    }
    case OpKind::kConcat: {
      const int axis = node.attrs.i0;
      Shape starts(g.shape().size(), 0);
      for (size_t i = 0; i < node.inputs.size(); ++i) {
        if (wants(i)) contribute(i, slice(g, starts, node.inputs[i].shape()));
        starts[static_cast<size_t>(axis)] += node.inputs[i].extent(axis);
      }
      break;
    }
    case OpKind::kSlice: {
      if (wants(0)) contribute(0, embed(g, node.inputs[0].shape(), node.attrs.dims0));
      break;
    }
    case OpKind::kEmbed: {
      if (wants(0)) contribute(0, slice(g, node.attrs.dims1, node.inputs[0].shape()));
      break;
    }
    case OpKind::kReshape: {
      if (wants(0)) contribute(0, reshape(g, node.inputs[0].shape()));
      break;
    }
    case OpKind::kPermute: {
      if (wants(0)) contribute(0, permute(g, inverse_perm(node.attrs.dims0)));
      break;
    }
    case OpKind::kAvgPool2d: {
      const int k = node.attrs.i0;
      if (wants(0)) contribute(0, scale(upsample_nearest(g, k), 1.0 / (static_cast<double>(k) * k)));
      break;
    }
    case OpKind::kUpsampleNearest: {
      const int k = node.attrs.i0;
      if (wants(0)) contribute(0, scale(avg_pool2d(g, k), static_cast<double>(k) * k));
      break;
    }
  }
}

GradientMap backward_impl(Tape& tape, const Tensor& output, const ParamSet& wrt, bool graphed) {
  if (!output.defined() || output.size() != 1) {
    throw std::invalid_argument("backward: output has " + std::to_string(output.size()) +
                                " elements; expected a scalar");
  }
  if (output.tape_serial() != tape.serial() || output.node() < 0) {
    throw std::invalid_argument("backward: output is not part of this computation record");
  }
  for (const auto& [name, t] : wrt.items()) {
    if (tape.leaf_id(t) < 0) {
      throw std::invalid_argument("backward: parameter '" + name + "' is absent from the record roots");
    }
  }

  const int root = output.node();
  std::vector<char> reachable(static_cast<size_t>(root) + 1, 0);
  reachable[static_cast<size_t>(root)] = 1;
  for (int id = root; id >= 0; --id) {
    if (!reachable[static_cast<size_t>(id)]) continue;
    for (int in : tape.node(id).in_ids) {
      if (in >= 0) reachable[static_cast<size_t>(in)] = 1;
    }
  }

  std::vector<Tensor> adjoint(static_cast<size_t>(root) + 1);
  {
    TapeScope scope(graphed ? &tape : nullptr);
    adjoint[static_cast<size_t>(root)] = Tensor::full(output.shape(), 1.0);
    for (int id = root; id >= 0; --id) {
      if (!reachable[static_cast<size_t>(id)] || !adjoint[static_cast<size_t>(id)].defined()) continue;
      // Copy: recording VJP ops may reallocate the node storage.
      const TapeNode node = tape.node(id);
      accumulate_vjp(node, adjoint[static_cast<size_t>(id)], adjoint);
    }
  }

  GradientMap grads;
  for (const auto& [name, t] : wrt.items()) {
    const int leaf = tape.leaf_id(t);
    Tensor& adj = adjoint[static_cast<size_t>(leaf)];
    grads.put(name, adj.defined() ? adj : Tensor::zeros(t.shape()));
  }
  return grads;
}

}  // namespace

GradientMap backward(Tape& tape, const Tensor& output, const ParamSet& wrt) {
  return backward_impl(tape, output, wrt, tape.second_order());
}

GradientMap backward_through_backward(Tape& tape, const Tensor& meta_output, const ParamSet& wrt) {
  if (!tape.second_order()) {
    throw std::logic_error(
        "backward_through_backward: record was built without second-order tracking; "
        "re-run the computation on a Tape(second_order=true)");
  }
  return backward_impl(tape, meta_output, wrt, /*graphed=*/false);
}

GradientMap finite_diff_grad(const std::function<double(const ParamSet&)>& f, const ParamSet& params, double h) {
  if (h <= 0.0) throw std::invalid_argument("finite_diff_grad: step must be positive");
  const double base0 = f(params);
  const double base1 = f(params);
  if (!(base0 == base1)) {
    throw std::runtime_error("finite_diff_grad: function is not deterministic (baselines differ)");
  }
  GradientMap grads;
  for (const auto& [name, t] : params.items()) {
    Array g(t.size());
    for (Dim i = 0; i < t.size(); ++i) {
      Array plus = t.array();
      Array minus = t.array();
      plus(i) += h;
      minus(i) -= h;
      const double fp = f(params.with_value(name, Tensor(t.shape(), std::move(plus))));
      const double fm = f(params.with_value(name, Tensor(t.shape(), std::move(minus))));
      g(i) = (fp - fm) / (2.0 * h);
    }
    grads.put(name, Tensor(t.shape(), std::move(g)));
  }
  return grads;
}

Tensor flatten(const GradientMap& grads) {
  Dim total = grads.total_elements();
  Array out(total);
  Dim off = 0;
  for (const auto& [name, t] : grads.items()) {
    out.segment(off, t.size()) = t.array();
    off += t.size();
  }
  return Tensor({total}, std::move(out));
}

}  // namespace mkc
