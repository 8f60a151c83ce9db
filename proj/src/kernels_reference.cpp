#include <limits>

#include "splitstream/errors.hpp"
#include "splitstream/kernels.hpp"

namespace splitstream::kernels {

std::int64_t conv_out_extent(std::int64_t in, std::int64_t k, ConvGeometry g) {
  if (g.stride <= 0 || g.padding < 0) {
    throw DimensionError("invalid conv geometry stride=" + std::to_string(g.stride) +
                         " padding=" + std::to_string(g.padding));
  }
  if (k > in + 2 * g.padding) {
    throw DimensionError("kernel extent " + std::to_string(k) + " exceeds padded input " +
                         std::to_string(in + 2 * g.padding));
  }
  return (in + 2 * g.padding - k) / g.stride + 1;
}

std::int64_t conv_transpose_out_extent(std::int64_t in, std::int64_t k, ConvGeometry g) {
  if (g.stride <= 0 || g.padding < 0 || g.output_padding < 0 || g.output_padding >= g.stride) {
    throw DimensionError("invalid transposed conv geometry stride=" + std::to_string(g.stride) +
                         " padding=" + std::to_string(g.padding) +
                         " output_padding=" + std::to_string(g.output_padding));
  }
  const std::int64_t out = (in - 1) * g.stride - 2 * g.padding + k + g.output_padding;
  if (out <= 0) {
    throw DimensionError("transposed conv output extent " + std::to_string(out) +
                         " is not positive (in=" + std::to_string(in) + ", k=" + std::to_string(k) + ")");
  }
  return out;
}

Shape conv2d_shape(const Shape& x, const Shape& w, ConvGeometry g) {
  if (x.size() != 4 || w.size() != 4 || x[1] != w[1]) {
    throw DimensionError("conv2d input " + shape_str(x) + " incompatible with weight " + shape_str(w));
  }
  return {x[0], w[0], conv_out_extent(x[2], w[2], g), conv_out_extent(x[3], w[3], g)};
}

Shape conv_transpose2d_shape(const Shape& x, const Shape& w, ConvGeometry g) {
  if (x.size() != 4 || w.size() != 4 || x[1] != w[0]) {
    throw DimensionError("conv_transpose2d input " + shape_str(x) + " incompatible with weight " +
                         shape_str(w));
  }
  return {x[0], w[1], conv_transpose_out_extent(x[2], w[2], g),
          conv_transpose_out_extent(x[3], w[3], g)};
}

std::int64_t pool_out_extent(std::int64_t in, int kernel, int stride) {
  if (kernel <= 0 || stride <= 0 || kernel > in) {
    throw DimensionError("pool kernel " + std::to_string(kernel) + " does not fit extent " +
                         std::to_string(in));
  }
  return (in - kernel) / stride + 1;
}

namespace reference {

Tensor gemm(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw DimensionError("gemm needs 2-D operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const auto m = trans_a ? a.dim(1) : a.dim(0);
  const auto k = trans_a ? a.dim(0) : a.dim(1);
  const auto kb = trans_b ? b.dim(1) : b.dim(0);
  const auto n = trans_b ? b.dim(0) : b.dim(1);
  if (k != kb) {
    throw DimensionError("gemm inner dimensions disagree: " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  auto av = [&](std::int64_t i, std::int64_t p) { return trans_a ? a[p * m + i] : a[i * k + p]; };
  auto bv = [&](std::int64_t p, std::int64_t j) { return trans_b ? b[j * k + p] : b[p * n + j]; };
  Tensor c({m, n});
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::int64_t p = 0; p < k; ++p) acc += static_cast<double>(av(i, p)) * bv(p, j);
      c[i * n + j] = static_cast<float>(acc);
    }
  }
  return c;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, ConvGeometry g) {
  Tensor y(conv2d_shape(x.shape(), w.shape(), g));
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto F = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const auto HO = y.dim(2), WO = y.dim(3);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t f = 0; f < F; ++f)
      for (std::int64_t i = 0; i < HO; ++i)
        for (std::int64_t j = 0; j < WO; ++j) {
          double acc = bias ? (*bias)[f] : 0.0;
          for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t u = 0; u < KH; ++u)
              for (std::int64_t v = 0; v < KW; ++v) {
                const auto h = i * g.stride - g.padding + u;
                const auto ww = j * g.stride - g.padding + v;
                if (h < 0 || h >= H || ww < 0 || ww >= W) continue;
                acc += static_cast<double>(x.at(b, c, h, ww)) * w.at(f, c, u, v);
              }
          y.at(b, f, i, j) = static_cast<float>(acc);
        }
  return y;
}

Tensor conv2d_backward_input(const Tensor& gy, const Tensor& w, ConvGeometry g, const Shape& x_shape) {
  Tensor gx(x_shape);
  const auto B = x_shape[0], C = x_shape[1], H = x_shape[2], W = x_shape[3];
  const auto F = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const auto HO = gy.dim(2), WO = gy.dim(3);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t f = 0; f < F; ++f)
      for (std::int64_t i = 0; i < HO; ++i)
        for (std::int64_t j = 0; j < WO; ++j) {
          const float go = gy.at(b, f, i, j);
          for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t u = 0; u < KH; ++u)
              for (std::int64_t v = 0; v < KW; ++v) {
                const auto h = i * g.stride - g.padding + u;
                const auto ww = j * g.stride - g.padding + v;
                if (h < 0 || h >= H || ww < 0 || ww >= W) continue;
                gx.at(b, c, h, ww) += go * w.at(f, c, u, v);
              }
        }
  return gx;
}

Tensor conv2d_backward_weight(const Tensor& gy, const Tensor& x, ConvGeometry g, const Shape& w_shape) {
  Tensor gw(w_shape);
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto F = w_shape[0], KH = w_shape[2], KW = w_shape[3];
  const auto HO = gy.dim(2), WO = gy.dim(3);
  for (std::int64_t f = 0; f < F; ++f)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t u = 0; u < KH; ++u)
        for (std::int64_t v = 0; v < KW; ++v) {
          double acc = 0.0;
          for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t i = 0; i < HO; ++i)
              for (std::int64_t j = 0; j < WO; ++j) {
                const auto h = i * g.stride - g.padding + u;
                const auto ww = j * g.stride - g.padding + v;
                if (h < 0 || h >= H || ww < 0 || ww >= W) continue;
                acc += static_cast<double>(gy.at(b, f, i, j)) * x.at(b, c, h, ww);
              }
          gw.at(f, c, u, v) = static_cast<float>(acc);
        }
  return gw;
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor* bias, ConvGeometry g) {
  Tensor y(conv_transpose2d_shape(x.shape(), w.shape(), g));
  const auto B = x.dim(0), CI = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto CO = w.dim(1), KH = w.dim(2), KW = w.dim(3);
  const auto HO = y.dim(2), WO = y.dim(3);
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t o = 0; o < CO; ++o)
      for (std::int64_t i = 0; i < HO; ++i)
        for (std::int64_t j = 0; j < WO; ++j) y.at(b, o, i, j) = bias ? (*bias)[o] : 0.0f;
    for (std::int64_t c = 0; c < CI; ++c)
      for (std::int64_t i = 0; i < H; ++i)
        for (std::int64_t j = 0; j < W; ++j)
          for (std::int64_t o = 0; o < CO; ++o)
            for (std::int64_t u = 0; u < KH; ++u)
              for (std::int64_t v = 0; v < KW; ++v) {
                const auto h = i * g.stride - g.padding + u;
                const auto ww = j * g.stride - g.padding + v;
                if (h < 0 || h >= HO || ww < 0 || ww >= WO) continue;
                y.at(b, o, h, ww) += x.at(b, c, i, j) * w.at(c, o, u, v);
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
  std::size_t o = 0;
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t i = 0; i < HO; ++i)
        for (std::int64_t j = 0; j < WO; ++j, ++o) {
          float best = -std::numeric_limits<float>::infinity();
          std::int64_t best_at = 0;
          for (int u = 0; u < kernel; ++u)
            for (int v = 0; v < kernel; ++v) {
              const auto idx = ((b * C + c) * H + i * stride + u) * W + j * stride + v;
              if (x[static_cast<std::size_t>(idx)] > best) {
                best = x[static_cast<std::size_t>(idx)];
                best_at = idx;
              }
            }
          y[o] = best;
          if (argmax) (*argmax)[o] = best_at;
        }
  return y;
}

}  // namespace reference
}  // namespace splitstream::kernels
