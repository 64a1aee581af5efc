// Copyright (c) 2026 The mkcnet authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "mkc/tensor.hpp"

#include <cstdint>
#include <unordered_map>
#include <vector>

namespace mkc {

enum class OpKind : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kScale,
  kMatmul,
  kConv2d,
  kConv2dInputGrad,
  kConv2dWeightGrad,
  kRelu,
  kSigmoid,
  kTanh,
  kExp,
  kLog,
  kSoftmax,
  kReduceSumTo,
  kReduceMaxTo,
  kBroadcastTo,
  kConcat,
  kSlice,
  kEmbed,
  kReshape,
  kPermute,
  kAvgPool2d,
  kUpsampleNearest,
};

const char* op_name(OpKind op);

/// Attribute bag for ops that need more than their inputs.
struct OpAttrs {
  int i0 = 0;        // conv stride / concat axis / pool factor
  int i1 = 0;        // conv pad
  double d0 = 0.0;   // scale multiplier
  double d1 = 0.0;   // scale offset
  Shape dims0;       // slice starts / permutation / target shape / conv input shape
  Shape dims1;       // slice sizes / conv kernel shape
};

struct TapeNode {
  OpKind op;
  std::vector<int> in_ids;     // tape ids; -1 marks a constant input
  std::vector<Tensor> inputs;  // saved input handles (values needed by VJPs)
  Tensor value;                // saved output
  OpAttrs attrs;
};

/// Append-only record of a differentiable computation.
///
/// Node ids are topologically ordered by construction. A tape created with
/// second_order = true makes backward() itself record its arithmetic, so a
/// scalar computed from first-order gradients can be differentiated again.
///
/// Tapes are single-owner: one record per training step, never shared
/// across concurrently executing steps.
class Tape {
 public:
  explicit Tape(bool second_order = false);
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool second_order() const { return second_order_; }
  std::uint64_t serial() const { return serial_; }
  int size() const { return static_cast<int>(nodes_.size()); }
  const TapeNode& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  const Tensor& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }

  /// Registers `t` as a differentiable root. Idempotent per payload.
  int watch(const Tensor& t);
  /// Tape id of a previously watched tensor, -1 if unknown.
  int leaf_id(const Tensor& t) const;

  /// Resolves the tape id for an op input. Tensors that require grad but are
  /// not yet on the tape are watched as roots. Returns -1 for constants.
  int input_id(const Tensor& t);

  /// Appends an op node and stamps the output tensor with its id.
  Tensor emit(OpKind op, std::vector<int> in_ids, std::vector<Tensor> inputs, Tensor value, OpAttrs attrs);

  /// The tape ops currently record onto, nullptr when recording is off.
  static Tape* active();

 private:
  friend class TapeScope;

  std::vector<TapeNode> nodes_;
  std::unordered_map<const void*, int> leaves_;
  std::uint64_t serial_;
  bool second_order_;
};

/// RAII activation of a tape on the current thread. Pass nullptr to
/// suppress recording within the scope (used by first-order backward).
class TapeScope {
 public:
  explicit TapeScope(Tape* tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

}  // namespace mkc
