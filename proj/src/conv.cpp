// Copyright (c) 2026 The mkcnet authors
// SPDX-License-Identifier: Apache-2.0
//
// conv2d and its two adjoints, all lowered to per-image GEMMs over an
// im2col buffer. The three ops are mutually closed under differentiation,
// which is what makes the one-step-unrolled meta gradient exact.
#include "mkc/ops.hpp"

#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mkc {

namespace detail {

int worker_threads() {
  static const int cached = [] {
    if (const char* env = std::getenv("MKC_NUM_THREADS")) {
      const int v = std::atoi(env);
      if (v > 0) return v;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
  }();
  return cached;
}

}  // namespace detail

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeom {
  Dim n, ci, h, w;    // input
  Dim co, k;          // kernel
  Dim ho, wo;         // output
  int stride, pad;
};

ConvGeom conv_geometry(const char* op, const Shape& x, const Shape& kernel, int stride, int pad) {
  if (x.size() != 4) throw std::invalid_argument(std::string(op) + ": input must be [N,C,H,W], got " + shape_str(x));
  if (kernel.size() != 4 || kernel[2] != kernel[3]) {
    throw std::invalid_argument(std::string(op) + ": kernel must be [Cout,Cin,k,k], got " + shape_str(kernel));
  }
  if (x[1] != kernel[1]) {
    throw std::invalid_argument(std::string(op) + ": input channels of " + shape_str(x) +
                                " do not match kernel " + shape_str(kernel));
  }
  if (stride < 1 || pad < 0) throw std::invalid_argument(std::string(op) + ": invalid stride/pad");
  ConvGeom g;
  g.n = x[0];
  g.ci = x[1];
  g.h = x[2];
  g.w = x[3];
  g.co = kernel[0];
  g.k = kernel[2];
  g.stride = stride;
  g.pad = pad;
  const Dim eh = g.h + 2 * pad - g.k;
  const Dim ew = g.w + 2 * pad - g.k;
  if (eh < 0 || ew < 0) {
    throw std::invalid_argument(std::string(op) + ": kernel " + shape_str(kernel) + " larger than padded input " +
                                shape_str(x));
  }
  g.ho = eh / stride + 1;
  g.wo = ew / stride + 1;
  return g;
}

// Fills a row-major [Cin*k*k, Ho*Wo] patch matrix for one image.
void im2col(const ConvGeom& g, const double* x, double* cols) {
  const Dim span = g.ho * g.wo;
  for (Dim ci = 0; ci < g.ci; ++ci) {
    const double* plane = x + ci * g.h * g.w;
    for (Dim u = 0; u < g.k; ++u) {
      for (Dim v = 0; v < g.k; ++v) {
        double* row = cols + ((ci * g.k + u) * g.k + v) * span;
        for (Dim oh = 0; oh < g.ho; ++oh) {
          const Dim ih = oh * g.stride - g.pad + u;
          double* dst = row + oh * g.wo;
          if (ih < 0 || ih >= g.h) {
            std::fill(dst, dst + g.wo, 0.0);
            continue;
          }
          const double* src = plane + ih * g.w;
          if (g.stride == 1) {
            const Dim iw0 = -g.pad + v;
            Dim lo = std::max<Dim>(0, -iw0);
            Dim hi = std::min<Dim>(g.wo, g.w - iw0);
            if (lo > 0) std::fill(dst, dst + lo, 0.0);
            if (hi < g.wo) std::fill(dst + std::max(lo, hi), dst + g.wo, 0.0);
            if (hi > lo) std::copy(src + iw0 + lo, src + iw0 + hi, dst + lo);
          } else {
            for (Dim ow = 0; ow < g.wo; ++ow) {
              const Dim iw = ow * g.stride - g.pad + v;
              dst[ow] = (iw >= 0 && iw < g.w) ? src[iw] : 0.0;
            }
          }
        }
      }
    }
  }
}

// Scatter-adds a patch matrix back onto one image.
void col2im(const ConvGeom& g, const double* cols, double* x) {
  const Dim span = g.ho * g.wo;
  for (Dim ci = 0; ci < g.ci; ++ci) {
    double* plane = x + ci * g.h * g.w;
    for (Dim u = 0; u < g.k; ++u) {
      for (Dim v = 0; v < g.k; ++v) {
        const double* row = cols + ((ci * g.k + u) * g.k + v) * span;
        for (Dim oh = 0; oh < g.ho; ++oh) {
          const Dim ih = oh * g.stride - g.pad + u;
          if (ih < 0 || ih >= g.h) continue;
          double* dst = plane + ih * g.w;
          const double* src = row + oh * g.wo;
          for (Dim ow = 0; ow < g.wo; ++ow) {
            const Dim iw = ow * g.stride - g.pad + v;
            if (iw >= 0 && iw < g.w) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

Tensor record_conv(OpKind op, const Tensor& a, const Tensor& b, Tensor out, const ConvGeom& geom,
                   const Shape& x_shape, const Shape& w_shape) {
  if (debug_checks_enabled() && !out.array().allFinite()) {
    throw std::runtime_error(std::string(op_name(op)) + ": non-finite value in output");
  }
  Tape* tape = Tape::active();
  if (!tape) return out;
  std::vector<int> ids{tape->input_id(a), tape->input_id(b)};
  if (ids[0] < 0 && ids[1] < 0) return out;
  OpAttrs attrs;
  attrs.i0 = geom.stride;
  attrs.i1 = geom.pad;
  attrs.dims0 = x_shape;
  attrs.dims1 = w_shape;
  return tape->emit(op, std::move(ids), {a, b}, std::move(out), std::move(attrs));
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride, int pad) {
  const ConvGeom g = conv_geometry("conv2d", x.shape(), kernel.shape(), stride, pad);
  const Dim span = g.ho * g.wo;
  const Dim rows = g.ci * g.k * g.k;
  Array out(g.n * g.co * span);
  Eigen::Map<const RowMat> wmat(kernel.array().data(), g.co, rows);
  const double* xp = x.array().data();
#ifdef _OPENMP
#pragma omp parallel num_threads(detail::worker_threads())
#endif
  {
    std::vector<double> cols(static_cast<size_t>(rows * span));
#ifdef _OPENMP
#pragma omp for schedule(static)
#endif
    for (Dim n = 0; n < g.n; ++n) {
      im2col(g, xp + n * g.ci * g.h * g.w, cols.data());
      Eigen::Map<const RowMat> cmat(cols.data(), rows, span);
      Eigen::Map<RowMat> omat(out.data() + n * g.co * span, g.co, span);
      omat.noalias() = wmat * cmat;
    }
  }
  return record_conv(OpKind::kConv2d, x, kernel, Tensor({g.n, g.co, g.ho, g.wo}, std::move(out)), g, x.shape(),
                     kernel.shape());
}

Tensor conv2d_input_grad(const Tensor& gout, const Tensor& kernel, int stride, int pad, Shape input_shape) {
  const ConvGeom g = conv_geometry("conv2d_input_grad", input_shape, kernel.shape(), stride, pad);
  if (gout.shape() != Shape{g.n, g.co, g.ho, g.wo}) {
    throw std::invalid_argument("conv2d_input_grad: gradient shape " + shape_str(gout.shape()) +
                                " does not match conv output for input " + shape_str(input_shape));
  }
  const Dim span = g.ho * g.wo;
  const Dim rows = g.ci * g.k * g.k;
  Array out = Array::Zero(numel(input_shape));
  Eigen::Map<const RowMat> wmat(kernel.array().data(), g.co, rows);
  const double* gp = gout.array().data();
#ifdef _OPENMP
#pragma omp parallel num_threads(detail::worker_threads())
#endif
  {
    std::vector<double> cols(static_cast<size_t>(rows * span));
#ifdef _OPENMP
#pragma omp for schedule(static)
#endif
    for (Dim n = 0; n < g.n; ++n) {
      Eigen::Map<const RowMat> gmat(gp + n * g.co * span, g.co, span);
      Eigen::Map<RowMat> cmat(cols.data(), rows, span);
      cmat.noalias() = wmat.transpose() * gmat;
      col2im(g, cols.data(), out.data() + n * g.ci * g.h * g.w);
    }
  }
  return record_conv(OpKind::kConv2dInputGrad, gout, kernel, Tensor(std::move(input_shape), std::move(out)), g,
                     Shape{g.n, g.ci, g.h, g.w}, kernel.shape());
}

Tensor conv2d_weight_grad(const Tensor& gout, const Tensor& x, int stride, int pad, Shape kernel_shape) {
  const ConvGeom g = conv_geometry("conv2d_weight_grad", x.shape(), kernel_shape, stride, pad);
  if (gout.shape() != Shape{g.n, g.co, g.ho, g.wo}) {
    throw std::invalid_argument("conv2d_weight_grad: gradient shape " + shape_str(gout.shape()) +
                                " does not match conv output for input " + shape_str(x.shape()));
  }
  const Dim span = g.ho * g.wo;
  const Dim rows = g.ci * g.k * g.k;
  const Dim wsize = g.co * rows;
  // Per-image partials, reduced in fixed order for bit-stable results.
  std::vector<double> partials(static_cast<size_t>(g.n * wsize));
  const double* gp = gout.array().data();
  const double* xp = x.array().data();
#ifdef _OPENMP
#pragma omp parallel num_threads(detail::worker_threads())
#endif
  {
    std::vector<double> cols(static_cast<size_t>(rows * span));
#ifdef _OPENMP
#pragma omp for schedule(static)
#endif
    for (Dim n = 0; n < g.n; ++n) {
      im2col(g, xp + n * g.ci * g.h * g.w, cols.data());
      Eigen::Map<const RowMat> cmat(cols.data(), rows, span);
      Eigen::Map<const RowMat> gmat(gp + n * g.co * span, g.co, span);
      Eigen::Map<RowMat> pmat(partials.data() + n * wsize, g.co, rows);
      pmat.noalias() = gmat * cmat.transpose();
    }
  }
  Array out = Array::Zero(wsize);
  for (Dim n = 0; n < g.n; ++n) {
    out += Eigen::Map<const Array>(partials.data() + n * wsize, wsize);
  }
  return record_conv(OpKind::kConv2dWeightGrad, gout, x, Tensor(std::move(kernel_shape), std::move(out)), g,
                     x.shape(), Shape{g.co, g.ci, g.k, g.k});
}

}  // namespace mkc
