// Copyright (c) 2026 The mkcnet authors
// SPDX-License-Identifier: Apache-2.0
#include "mkc/tensor.hpp"

#include <atomic>
#include <sstream>
#include <stdexcept>

namespace mkc {

Dim numel(const Shape& shape) {
  Dim n = 1;
  for (Dim d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, Array data) : shape_(std::move(shape)) {
  for (Dim d : shape_) {
    if (d <= 0) throw std::invalid_argument("tensor: non-positive extent in " + shape_str(shape_));
  }
  if (numel(shape_) != data.size()) {
    throw std::invalid_argument("tensor: shape " + shape_str(shape_) + " does not match payload of " +
                                std::to_string(data.size()) + " elements");
  }
  data_ = std::make_shared<const Array>(std::move(data));
}

Tensor Tensor::zeros(Shape shape) {
  Array a = Array::Zero(numel(shape));
  return Tensor(std::move(shape), std::move(a));
}

Tensor Tensor::full(Shape shape, double value) {
  Array a = Array::Constant(numel(shape), value);
  return Tensor(std::move(shape), std::move(a));
}

Tensor Tensor::scalar(double value) { return full({1}, value); }

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  Array a(static_cast<Eigen::Index>(values.size()));
  for (size_t i = 0; i < values.size(); ++i) a(static_cast<Eigen::Index>(i)) = values[i];
  return Tensor(std::move(shape), std::move(a));
}

double Tensor::item() const {
  if (!defined() || size() != 1) {
    throw std::invalid_argument("item: tensor has " + std::to_string(size()) + " elements, expected 1");
  }
  return (*data_)(0);
}

Tensor Tensor::with_shape(Shape shape) const {
  if (numel(shape) != size()) {
    throw std::invalid_argument("with_shape: " + shape_str(shape) + " incompatible with " + shape_str(shape_));
  }
  Tensor t = *this;
  t.shape_ = std::move(shape);
  return t;
}

namespace {
std::atomic<bool> g_debug_checks{false};
}

void set_debug_checks(bool enabled) { g_debug_checks.store(enabled); }
bool debug_checks_enabled() { return g_debug_checks.load(std::memory_order_relaxed); }

}  // namespace mkc
