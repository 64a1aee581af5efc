// Copyright (c) 2026 The mkcnet authors
// SPDX-License-Identifier: Apache-2.0
#include "mkc/tape.hpp"

#include <atomic>
#include <stdexcept>

namespace mkc {

namespace {
thread_local Tape* g_active_tape = nullptr;
std::atomic<std::uint64_t> g_tape_serial{1};
}  // namespace

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kDiv: return "div";
    case OpKind::kScale: return "scale";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kConv2dInputGrad: return "conv2d_input_grad";
    case OpKind::kConv2dWeightGrad: return "conv2d_weight_grad";
    case OpKind::kRelu: return "relu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kTanh: return "tanh";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kReduceSumTo: return "reduce_sum_to";
    case OpKind::kReduceMaxTo: return "reduce_max_to";
    case OpKind::kBroadcastTo: return "broadcast_to";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kEmbed: return "embed";
    case OpKind::kReshape: return "reshape";
    case OpKind::kPermute: return "permute";
    case OpKind::kAvgPool2d: return "avg_pool2d";
    case OpKind::kUpsampleNearest: return "upsample_nearest";
  }
  return "?";
}

Tape::Tape(bool second_order) : serial_(g_tape_serial.fetch_add(1)), second_order_(second_order) {}

Tape::~Tape() {
  if (g_active_tape == this) g_active_tape = nullptr;
}

int Tape::watch(const Tensor& t) {
  if (!t.defined()) throw std::invalid_argument("watch: undefined tensor");
  auto it = leaves_.find(t.key());
  if (it != leaves_.end()) return it->second;
  int id = size();
  TapeNode node;
  node.op = OpKind::kLeaf;
  node.value = t;
  node.value.node_ = id;
  node.value.tape_serial_ = serial_;
  nodes_.push_back(std::move(node));
  leaves_.emplace(t.key(), id);
  return id;
}

int Tape::leaf_id(const Tensor& t) const {
  auto it = leaves_.find(t.key());
  return it == leaves_.end() ? -1 : it->second;
}

int Tape::input_id(const Tensor& t) {
  if (t.tape_serial() == serial_) return t.node();
  if (t.tape_serial() != 0) {
    throw std::logic_error("tape: input tensor belongs to another computation record");
  }
  if (t.requires_grad()) return watch(t);
  return -1;
}

Tensor Tape::emit(OpKind op, std::vector<int> in_ids, std::vector<Tensor> inputs, Tensor value, OpAttrs attrs) {
  TapeNode node;
  node.op = op;
  node.in_ids = std::move(in_ids);
  node.inputs = std::move(inputs);
  node.attrs = std::move(attrs);
  node.value = std::move(value);
  node.value.node_ = size();
  node.value.tape_serial_ = serial_;
  Tensor out = node.value;
  nodes_.push_back(std::move(node));
  return out;
}

Tape* Tape::active() { return g_active_tape; }

TapeScope::TapeScope(Tape* tape) : prev_(g_active_tape) { g_active_tape = tape; }

TapeScope::~TapeScope() { g_active_tape = prev_; }

}  // namespace mkc
