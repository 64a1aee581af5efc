// Copyright (c) 2026 The mkcnet authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "mkc/ops.hpp"
#include "mkc/tape.hpp"
#include "mkc/tensor.hpp"

#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace mkc {

/// Ordered name -> tensor mapping. Iteration follows insertion order, which
/// fixes the reduction/flattening order everywhere gradients are consumed.
class TensorMap {
 public:
  Tensor& put(const std::string& name, Tensor t);
  bool contains(const std::string& name) const;
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  size_t size() const { return items_.size(); }
  Dim total_elements() const;
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, size_t> index_;
};

using GradientMap = TensorMap;

/// Named trainable tensors; every entry requires grad.
class ParamSet {
 public:
  Tensor& add(const std::string& name, Tensor t);
  bool contains(const std::string& name) const { return map_.contains(name); }
  const Tensor& at(const std::string& name) const { return map_.at(name); }
  Tensor& at(const std::string& name) { return map_.at(name); }
  size_t size() const { return map_.size(); }
  Dim total_elements() const { return map_.total_elements(); }
  const std::vector<std::pair<std::string, Tensor>>& items() const { return map_.items(); }

  /// Entries whose name starts with `prefix`, preserving order.
  ParamSet with_prefix(const std::string& prefix) const;
  /// Copy with one entry's value replaced (same shape required).
  ParamSet with_value(const std::string& name, Tensor t) const;

 private:
  TensorMap map_;
};

/// Registers every parameter as a root of the record, so parameters that end
/// up off the computation path still report zero gradients.
void watch_all(Tape& tape, const ParamSet& params);

/// Reverse-mode gradients of a single-element `output` for every parameter
/// in `wrt`. Parameters off the path get exact zeros; parameters that were
/// never watched raise an error. On a second-order tape the adjoint
/// arithmetic is recorded, so the returned gradients are differentiable.
GradientMap backward(Tape& tape, const Tensor& output, const ParamSet& wrt);

/// Gradients of a scalar that depends on gradients produced by a previous
/// backward() on the same tape (e.g. through a one-step parameter update).
/// Requires the tape to have been built with second-order tracking.
GradientMap backward_through_backward(Tape& tape, const Tensor& meta_output, const ParamSet& wrt);

/// Central-difference gradient oracle: (f(p+h) - f(p-h)) / 2h per
/// coordinate. Rejects non-deterministic f (two baseline evaluations must
/// agree bit-exactly).
GradientMap finite_diff_grad(const std::function<double(const ParamSet&)>& f, const ParamSet& params, double h);

/// Concatenation of all entries in map order into one flat tensor.
Tensor flatten(const GradientMap& grads);

}  // namespace mkc
