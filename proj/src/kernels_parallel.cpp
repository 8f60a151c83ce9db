#include <limits>

#include <Eigen/Core>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "splitstream/errors.hpp"
#include "splitstream/kernels.hpp"

namespace splitstream::kernels {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

int thread_id() {
#ifdef _OPENMP
  return omp_get_thread_num();
#else
  return 0;
#endif
}

struct ConvDims {
  std::int64_t C, H, W, KH, KW, HO, WO;
  std::int64_t rows() const { return C * KH * KW; }
  std::int64_t cols() const { return HO * WO; }
};

// Unfold one sample [C,H,W] into [C*KH*KW, HO*WO].
void im2col(const float* x, const ConvDims& d, ConvGeometry g, float* cols) {
  for (std::int64_t c = 0; c < d.C; ++c)
    for (std::int64_t u = 0; u < d.KH; ++u)
      for (std::int64_t v = 0; v < d.KW; ++v) {
        float* row = cols + ((c * d.KH + u) * d.KW + v) * d.cols();
        for (std::int64_t i = 0; i < d.HO; ++i) {
          const auto h = i * g.stride - g.padding + u;
          float* out = row + i * d.WO;
          if (h < 0 || h >= d.H) {
            std::fill(out, out + d.WO, 0.0f);
            continue;
          }
          const float* src = x + (c * d.H + h) * d.W;
          for (std::int64_t j = 0; j < d.WO; ++j) {
            const auto w = j * g.stride - g.padding + v;
            out[j] = (w >= 0 && w < d.W) ? src[w] : 0.0f;
          }
        }
      }
}

// Fold [C*KH*KW, HO*WO] back into one sample, accumulating overlaps.
void col2im(const float* cols, const ConvDims& d, ConvGeometry g, float* x) {
  std::fill(x, x + d.C * d.H * d.W, 0.0f);
  for (std::int64_t c = 0; c < d.C; ++c)
    for (std::int64_t u = 0; u < d.KH; ++u)
      for (std::int64_t v = 0; v < d.KW; ++v) {
        const float* row = cols + ((c * d.KH + u) * d.KW + v) * d.cols();
        for (std::int64_t i = 0; i < d.HO; ++i) {
          const auto h = i * g.stride - g.padding + u;
          if (h < 0 || h >= d.H) continue;
          float* dst = x + (c * d.H + h) * d.W;
          const float* in = row + i * d.WO;
          for (std::int64_t j = 0; j < d.WO; ++j) {
            const auto w = j * g.stride - g.padding + v;
            if (w >= 0 && w < d.W) dst[w] += in[j];
          }
        }
      }
}

ConvDims dims_for(const Shape& x, const Shape& w, const Shape& y) {
  return {x[1], x[2], x[3], w[2], w[3], y[2], y[3]};
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace parallel {

Tensor gemm(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw DimensionError("gemm needs 2-D operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  ConstMapMat am(a.raw(), a.dim(0), a.dim(1));
  ConstMapMat bm(b.raw(), b.dim(0), b.dim(1));
  const auto m = trans_a ? a.dim(1) : a.dim(0);
  const auto k = trans_a ? a.dim(0) : a.dim(1);
  const auto kb = trans_b ? b.dim(1) : b.dim(0);
  const auto n = trans_b ? b.dim(0) : b.dim(1);
  if (k != kb) {
    throw DimensionError("gemm inner dimensions disagree: " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  Tensor c({m, n});
  MapMat cm(c.raw(), m, n);
  if (!trans_a && !trans_b) cm.noalias() = am * bm;
  else if (trans_a && !trans_b) cm.noalias() = am.transpose() * bm;
  else if (!trans_a && trans_b) cm.noalias() = am * bm.transpose();
  else cm.noalias() = am.transpose() * bm.transpose();
  return c;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, ConvGeometry g) {
  Tensor y(conv2d_shape(x.shape(), w.shape(), g));
  const auto d = dims_for(x.shape(), w.shape(), y.shape());
  const auto B = x.dim(0), F = w.dim(0);
  ConstMapMat wm(w.raw(), F, d.rows());
#pragma omp parallel
  {
    std::vector<float> cols(static_cast<std::size_t>(d.rows() * d.cols()));
#pragma omp for schedule(static)
    for (std::int64_t b = 0; b < B; ++b) {
      im2col(x.raw() + b * d.C * d.H * d.W, d, g, cols.data());
      MapMat ym(y.raw() + b * F * d.cols(), F, d.cols());
      ym.noalias() = wm * ConstMapMat(cols.data(), d.rows(), d.cols());
      if (bias) {
        for (std::int64_t f = 0; f < F; ++f) ym.row(f).array() += (*bias)[f];
      }
    }
  }
  return y;
}

Tensor conv2d_backward_input(const Tensor& gy, const Tensor& w, ConvGeometry g, const Shape& x_shape) {
  Tensor gx(x_shape);
  const auto d = dims_for(x_shape, w.shape(), gy.shape());
  const auto B = x_shape[0], F = w.dim(0);
  ConstMapMat wm(w.raw(), F, d.rows());
#pragma omp parallel
  {
    std::vector<float> cols(static_cast<std::size_t>(d.rows() * d.cols()));
#pragma omp for schedule(static)
    for (std::int64_t b = 0; b < B; ++b) {
      MapMat cm(cols.data(), d.rows(), d.cols());
      cm.noalias() = wm.transpose() * ConstMapMat(gy.raw() + b * F * d.cols(), F, d.cols());
      col2im(cols.data(), d, g, gx.raw() + b * d.C * d.H * d.W);
    }
  }
  return gx;
}

Tensor conv2d_backward_weight(const Tensor& gy, const Tensor& x, ConvGeometry g, const Shape& w_shape) {
  const auto d = dims_for(x.shape(), w_shape, gy.shape());
  const auto B = x.dim(0), F = w_shape[0];
  const int threads = max_threads();
  std::vector<RowMat> partial(static_cast<std::size_t>(threads), RowMat::Zero(F, d.rows()));
#pragma omp parallel
  {
    std::vector<float> cols(static_cast<std::size_t>(d.rows() * d.cols()));
    RowMat& acc = partial[static_cast<std::size_t>(thread_id())];
#pragma omp for schedule(static)
    for (std::int64_t b = 0; b < B; ++b) {
      im2col(x.raw() + b * d.C * d.H * d.W, d, g, cols.data());
      acc.noalias() += ConstMapMat(gy.raw() + b * F * d.cols(), F, d.cols()) *
                       ConstMapMat(cols.data(), d.rows(), d.cols()).transpose();
    }
  }
  Tensor gw(w_shape);
  MapMat gm(gw.raw(), F, d.rows());
  for (const auto& p : partial) gm += p;
  return gw;
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor* bias, ConvGeometry g) {
  // A transposed conv is the input-gradient of the conv whose weight is w
  // read as [F=Cin, C=Cout, kh, kw].
  const Shape out = conv_transpose2d_shape(x.shape(), w.shape(), g);
  Tensor y = conv2d_backward_input(x, w, g, out);
  if (bias) {
    const auto plane = out[2] * out[3];
    for (std::int64_t b = 0; b < out[0]; ++b)
      for (std::int64_t o = 0; o < out[1]; ++o) {
        float* p = y.raw() + (b * out[1] + o) * plane;
        for (std::int64_t i = 0; i < plane; ++i) p[i] += (*bias)[o];
      }
  }
  return y;
}

Tensor maxpool2d(const Tensor& x, int kernel, int stride, std::vector<std::int64_t>* argmax) {
  if (x.rank() != 4) throw DimensionError("maxpool2d expects NCHW, got " + shape_str(x.shape()));
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto HO = pool_out_extent(H, kernel, stride), WO = pool_out_extent(W, kernel, stride);
  Tensor y({B, C, HO, WO});
  if (argmax) argmax->assign(y.size(), 0);
#pragma omp parallel for schedule(static)
  for (std::int64_t plane = 0; plane < B * C; ++plane) {
    const float* src = x.raw() + plane * H * W;
    for (std::int64_t i = 0; i < HO; ++i)
      for (std::int64_t j = 0; j < WO; ++j) {
        float best = -std::numeric_limits<float>::infinity();
        std::int64_t best_at = 0;
        for (int u = 0; u < kernel; ++u)
          for (int v = 0; v < kernel; ++v) {
            const auto off = (i * stride + u) * W + j * stride + v;
            if (src[off] > best) {
              best = src[off];
              best_at = off;
            }
          }
        const auto o = static_cast<std::size_t>((plane * HO + i) * WO + j);
        y[o] = best;
        if (argmax) (*argmax)[o] = plane * H * W + best_at;
      }
  }
  return y;
}

}  // namespace parallel
}  // namespace splitstream::kernels
