// Copyright (c) 2026 The mkcnet authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace mkc {

using Dim = std::int64_t;
using Shape = std::vector<Dim>;
using Array = Eigen::ArrayXd;

Dim numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense 64-bit float tensor with an immutable, shared payload.
///
/// Copies are cheap handles. When a tensor is produced by an op under an
/// active Tape it carries the id of the producing node; tensors built
/// outside any tape are constants (node() == -1).
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, Array data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor from(Shape shape, std::vector<double> values);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Dim size() const { return data_ ? data_->size() : 0; }
  Dim extent(int axis) const { return shape_[static_cast<size_t>(axis)]; }

  const Array& array() const { return *data_; }
  double operator[](Dim i) const { return (*data_)(i); }
  /// Value of a single-element tensor.
  double item() const;

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool v) {
    requires_grad_ = v;
    return *this;
  }

  /// Id of the producing node within its tape; -1 for constants/params.
  int node() const { return node_; }
  std::uint64_t tape_serial() const { return tape_serial_; }

  /// Payload identity, used to match parameter leaves on a tape.
  const void* key() const { return data_.get(); }

  /// Same payload, new shape. Metadata-only; used by the reshape op.
  Tensor with_shape(Shape shape) const;

 private:
  friend class Tape;

  std::shared_ptr<const Array> data_;
  Shape shape_;
  int node_ = -1;
  std::uint64_t tape_serial_ = 0;
  bool requires_grad_ = false;
};

/// When enabled, every op output is scanned for NaN/Inf and an error is
/// raised naming the op. Off by default; tests and debug runs turn it on.
void set_debug_checks(bool enabled);
bool debug_checks_enabled();

}  // namespace mkc
