#pragma once

#include <cstdint>
#include <vector>

#include "splitstream/tensor.hpp"

// Numeric kernels behind the autograd ops. Two implementations share one
// signature set:
//   reference::  plain serial loops, written for obviousness; used as the
//                oracle in tests and as the baseline in the benchmark.
//   parallel::   im2col + GEMM, OpenMP-parallel over the batch. This is what
//                the training path calls.
// Reductions in parallel:: use per-thread partials combined in thread order,
// so results are reproducible for a fixed OMP_NUM_THREADS.
namespace splitstream::kernels {

struct ConvGeometry {
  int stride = 1;
  int padding = 0;
  // Transposed conv only: extra rows/cols appended to the output, < stride.
  int output_padding = 0;
};

/// floor((in + 2*pad - k) / stride) + 1. Throws DimensionError when the
/// kernel is larger than the padded input.
std::int64_t conv_out_extent(std::int64_t in, std::int64_t k, ConvGeometry g);

/// (in - 1) * stride - 2 * pad + k + output_padding. Throws DimensionError
/// when not positive or when output_padding is outside [0, stride).
std::int64_t conv_transpose_out_extent(std::int64_t in, std::int64_t k, ConvGeometry g);

/// Output shape of conv2d for x [B,C,H,W] and w [F,C,kh,kw].
Shape conv2d_shape(const Shape& x, const Shape& w, ConvGeometry g);

/// Output shape of a transposed conv for x [B,Cin,H,W] and w [Cin,Cout,kh,kw].
Shape conv_transpose2d_shape(const Shape& x, const Shape& w, ConvGeometry g);

std::int64_t pool_out_extent(std::int64_t in, int kernel, int stride);

namespace reference {

/// op(a) * op(b) where op transposes when the flag is set. 2-D only.
Tensor gemm(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, ConvGeometry g);
Tensor conv2d_backward_input(const Tensor& gy, const Tensor& w, ConvGeometry g, const Shape& x_shape);
Tensor conv2d_backward_weight(const Tensor& gy, const Tensor& x, ConvGeometry g, const Shape& w_shape);

/// Direct scatter form: y[b,o,i*s-p+u,j*s-p+v] += x[b,c,i,j] * w[c,o,u,v].
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor* bias, ConvGeometry g);

Tensor maxpool2d(const Tensor& x, int kernel, int stride, std::vector<std::int64_t>* argmax);

}  // namespace reference

namespace parallel {

Tensor gemm(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, ConvGeometry g);
Tensor conv2d_backward_input(const Tensor& gy, const Tensor& w, ConvGeometry g, const Shape& x_shape);
Tensor conv2d_backward_weight(const Tensor& gy, const Tensor& x, ConvGeometry g, const Shape& w_shape);

/// Implemented as the input-gradient of conv2d; w is [Cin,Cout,kh,kw].
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor* bias, ConvGeometry g);

Tensor maxpool2d(const Tensor& x, int kernel, int stride, std::vector<std::int64_t>* argmax);

}  // namespace parallel

/// Number of OpenMP threads the parallel kernels will use (1 without OpenMP).
int max_threads();

}  // namespace splitstream::kernels
