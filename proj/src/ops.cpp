#include "splitstream/ops.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "splitstream/errors.hpp"

namespace splitstream::ops {

namespace kp = kernels::parallel;

namespace {

// Channel layout helper: [B, C, inner...] viewed as B x C x inner.
struct ChannelView {
  std::int64_t batch = 0, channels = 0, inner = 1;
};

ChannelView channel_view(const Tensor& t, const char* op) {
  if (t.rank() < 2) {
    throw DimensionError(std::string(op) + " expects at least [B,C], got " + shape_str(t.shape()));
  }
  ChannelView v{t.dim(0), t.dim(1), 1};
  for (int i = 2; i < t.rank(); ++i) v.inner *= t.dim(i);
  return v;
}

Tensor channel_sums(const Tensor& g, const ChannelView& v) {
  Tensor s({v.channels});
  for (std::int64_t b = 0; b < v.batch; ++b)
    for (std::int64_t c = 0; c < v.channels; ++c) {
      const float* p = g.raw() + (b * v.channels + c) * v.inner;
      double acc = 0.0;
      for (std::int64_t i = 0; i < v.inner; ++i) acc += p[i];
      s[static_cast<std::size_t>(c)] += static_cast<float>(acc);
    }
  return s;
}

void check_vector(const Tensor& t, std::int64_t n, const char* what, const Shape& against) {
  if (t.rank() != 1 || t.dim(0) != n) {
    throw DimensionError(std::string(what) + " shape " + shape_str(t.shape()) +
                         " does not match channel extent of " + shape_str(against));
  }
}

void check_indices(std::span<const std::int32_t> idx, std::int64_t channels) {
  std::vector<bool> seen(static_cast<std::size_t>(channels), false);
  for (auto i : idx) {
    if (i < 0 || i >= channels) {
      throw ValidationError("channel index " + std::to_string(i) + " out of range [0," +
                            std::to_string(channels) + ")");
    }
    if (seen[static_cast<std::size_t>(i)]) {
      throw ValidationError("duplicate channel index " + std::to_string(i));
    }
    seen[static_cast<std::size_t>(i)] = true;
  }
}

}  // namespace

Var dense(Tape& tape, Var x, Var w, Var bias) {
  const Tensor& xv = tape.value(x);
  const Tensor& wv = tape.value(w);
  const Tensor& bv = tape.value(bias);
  if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(0)) {
    throw DimensionError("dense: input " + shape_str(xv.shape()) + " incompatible with weight " +
                         shape_str(wv.shape()));
  }
  check_vector(bv, wv.dim(1), "dense bias", wv.shape());
  Tensor y = kp::gemm(xv, wv);
  const auto B = y.dim(0), O = y.dim(1);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t o = 0; o < O; ++o) y[static_cast<std::size_t>(b * O + o)] += bv[static_cast<std::size_t>(o)];

  return tape.record(std::move(y), {x, w, bias}, [x, w, bias](Tape& t, const Tensor& gy) {
    if (t.requires_grad(x)) t.accumulate(x, kp::gemm(gy, t.value(w), false, true));
    if (t.requires_grad(w)) t.accumulate(w, kp::gemm(t.value(x), gy, true, false));
    if (t.requires_grad(bias)) {
      Tensor gb({gy.dim(1)});
      for (std::int64_t b = 0; b < gy.dim(0); ++b)
        for (std::int64_t o = 0; o < gy.dim(1); ++o)
          gb[static_cast<std::size_t>(o)] += gy[static_cast<std::size_t>(b * gy.dim(1) + o)];
      t.accumulate(bias, gb);
    }
  });
}

Var conv2d(Tape& tape, Var x, Var w, std::optional<Var> bias, kernels::ConvGeometry g) {
  const Tensor& wv = tape.value(w);
  const Tensor* bv = bias ? &tape.value(*bias) : nullptr;
  if (bv) check_vector(*bv, wv.dim(0), "conv2d bias", wv.shape());
  Tensor y = kp::conv2d(tape.value(x), wv, bv, g);

  auto fn = [x, w, bias, g](Tape& t, const Tensor& gy) {
    if (t.requires_grad(x)) {
      t.accumulate(x, kp::conv2d_backward_input(gy, t.value(w), g, t.value(x).shape()));
    }
    if (t.requires_grad(w)) {
      t.accumulate(w, kp::conv2d_backward_weight(gy, t.value(x), g, t.value(w).shape()));
    }
    if (bias && t.requires_grad(*bias)) t.accumulate(*bias, channel_sums(gy, channel_view(gy, "conv2d")));
  };
  if (bias) return tape.record(std::move(y), {x, w, *bias}, fn);
  return tape.record(std::move(y), {x, w}, fn);
}

Var conv_transpose2d(Tape& tape, Var x, Var w, std::optional<Var> bias, kernels::ConvGeometry g) {
  const Tensor& wv = tape.value(w);
  const Tensor* bv = bias ? &tape.value(*bias) : nullptr;
  if (bv) check_vector(*bv, wv.dim(1), "conv_transpose2d bias", wv.shape());
  Tensor y = kp::conv_transpose2d(tape.value(x), wv, bv, g);

  auto fn = [x, w, bias, g](Tape& t, const Tensor& gy) {
    if (t.requires_grad(x)) t.accumulate(x, kp::conv2d(gy, t.value(w), nullptr, g));
    if (t.requires_grad(w)) {
      // Roles swap relative to a forward conv: the transposed-conv input acts
      // as the output gradient and gy as the input.
      t.accumulate(w, kp::conv2d_backward_weight(t.value(x), gy, g, t.value(w).shape()));
    }
    if (bias && t.requires_grad(*bias)) {
      t.accumulate(*bias, channel_sums(gy, channel_view(gy, "conv_transpose2d")));
    }
  };
  if (bias) return tape.record(std::move(y), {x, w, *bias}, fn);
  return tape.record(std::move(y), {x, w}, fn);
}

Var batchnorm(Tape& tape, Var x, Var gamma, Var beta, BatchNormState state, Mode mode) {
  const Tensor& xv = tape.value(x);
  const ChannelView v = channel_view(xv, "batchnorm");
  const Tensor& gv = tape.value(gamma);
  const Tensor& bv = tape.value(beta);
  check_vector(gv, v.channels, "batchnorm gamma", xv.shape());
  check_vector(bv, v.channels, "batchnorm beta", xv.shape());
  if (!state.running_mean || !state.running_var) throw StateError("batchnorm without running stats");
  check_vector(*state.running_mean, v.channels, "batchnorm running mean", xv.shape());
  check_vector(*state.running_var, v.channels, "batchnorm running var", xv.shape());

  const auto C = static_cast<std::size_t>(v.channels);
  const double count = static_cast<double>(v.batch * v.inner);
  std::vector<float> mean(C), inv_std(C);
  if (mode == Mode::Train) {
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0, sq = 0.0;
      for (std::int64_t b = 0; b < v.batch; ++b) {
        const float* p = xv.raw() + (b * v.channels + static_cast<std::int64_t>(c)) * v.inner;
        for (std::int64_t i = 0; i < v.inner; ++i) s += p[i];
      }
      const double m = s / count;
      for (std::int64_t b = 0; b < v.batch; ++b) {
        const float* p = xv.raw() + (b * v.channels + static_cast<std::int64_t>(c)) * v.inner;
        for (std::int64_t i = 0; i < v.inner; ++i) sq += (p[i] - m) * (p[i] - m);
      }
      const double var = sq / count;
      mean[c] = static_cast<float>(m);
      inv_std[c] = static_cast<float>(1.0 / std::sqrt(var + state.eps));
      Tensor& rm = *state.running_mean;
      Tensor& rv = *state.running_var;
      rm[c] = (1.0f - state.momentum) * rm[c] + state.momentum * static_cast<float>(m);
      const double unbiased = count > 1.0 ? var * count / (count - 1.0) : var;
      rv[c] = (1.0f - state.momentum) * rv[c] + state.momentum * static_cast<float>(unbiased);
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = (*state.running_mean)[c];
      inv_std[c] = 1.0f / std::sqrt((*state.running_var)[c] + state.eps);
    }
  }

  Tensor xhat(xv.shape());
  Tensor y(xv.shape());
  for (std::int64_t b = 0; b < v.batch; ++b)
    for (std::int64_t c = 0; c < v.channels; ++c) {
      const auto off = (b * v.channels + c) * v.inner;
      const auto cc = static_cast<std::size_t>(c);
      for (std::int64_t i = 0; i < v.inner; ++i) {
        const float h = (xv[static_cast<std::size_t>(off + i)] - mean[cc]) * inv_std[cc];
        xhat[static_cast<std::size_t>(off + i)] = h;
        y[static_cast<std::size_t>(off + i)] = gv[cc] * h + bv[cc];
      }
    }

  return tape.record(std::move(y), {x, gamma, beta},
                     [x, gamma, beta, v, mode, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                         Tape& t, const Tensor& gy) {
                       const auto C = static_cast<std::size_t>(v.channels);
                       std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
                       for (std::int64_t b = 0; b < v.batch; ++b)
                         for (std::int64_t c = 0; c < v.channels; ++c) {
                           const auto off = (b * v.channels + c) * v.inner;
                           for (std::int64_t i = 0; i < v.inner; ++i) {
                             const auto k = static_cast<std::size_t>(off + i);
                             sum_dy[static_cast<std::size_t>(c)] += gy[k];
                             sum_dy_xhat[static_cast<std::size_t>(c)] += gy[k] * xhat[k];
                           }
                         }
                       if (t.requires_grad(gamma)) {
                         Tensor gg({v.channels});
                         for (std::size_t c = 0; c < C; ++c) gg[c] = static_cast<float>(sum_dy_xhat[c]);
                         t.accumulate(gamma, gg);
                       }
                       if (t.requires_grad(beta)) {
                         Tensor gb({v.channels});
                         for (std::size_t c = 0; c < C; ++c) gb[c] = static_cast<float>(sum_dy[c]);
                         t.accumulate(beta, gb);
                       }
                       if (!t.requires_grad(x)) return;
                       const Tensor& gv = t.value(gamma);
                       const double count = static_cast<double>(v.batch * v.inner);
                       Tensor gx(gy.shape());
                       for (std::int64_t b = 0; b < v.batch; ++b)
                         for (std::int64_t c = 0; c < v.channels; ++c) {
                           const auto cc = static_cast<std::size_t>(c);
                           const auto off = (b * v.channels + c) * v.inner;
                           const double scale = gv[cc] * inv_std[cc];
                           for (std::int64_t i = 0; i < v.inner; ++i) {
                             const auto k = static_cast<std::size_t>(off + i);
                             if (mode == Mode::Train) {
                               gx[k] = static_cast<float>(
                                   scale * (gy[k] - sum_dy[cc] / count - xhat[k] * sum_dy_xhat[cc] / count));
                             } else {
                               gx[k] = static_cast<float>(scale * gy[k]);
                             }
                           }
                         }
                       t.accumulate(x, gx);
                     });
}

Var relu(Tape& tape, Var x) {
  Tensor y = tape.value(x);
  for (auto& e : y.data()) e = e > 0.0f ? e : 0.0f;
  return tape.record(std::move(y), {x}, [x](Tape& t, const Tensor& gy) {
    const Tensor& xv = t.value(x);
    Tensor gx(gy.shape());
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = xv[i] > 0.0f ? gy[i] : 0.0f;
    t.accumulate(x, gx);
  });
}

Var sigmoid(Tape& tape, Var x) {
  Tensor y = tape.value(x);
  for (auto& e : y.data()) {
    e = e >= 0.0f ? 1.0f / (1.0f + std::exp(-e)) : std::exp(e) / (1.0f + std::exp(e));
  }
  Tensor saved = y;
  return tape.record(std::move(y), {x}, [x, s = std::move(saved)](Tape& t, const Tensor& gy) {
    Tensor gx(gy.shape());
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = gy[i] * s[i] * (1.0f - s[i]);
    t.accumulate(x, gx);
  });
}

Var maxpool2d(Tape& tape, Var x, int kernel, int stride) {
  std::vector<std::int64_t> argmax;
  Tensor y = kp::maxpool2d(tape.value(x), kernel, stride, &argmax);
  return tape.record(std::move(y), {x}, [x, argmax = std::move(argmax)](Tape& t, const Tensor& gy) {
    Tensor gx(t.value(x).shape());
    for (std::size_t i = 0; i < gy.size(); ++i) gx[static_cast<std::size_t>(argmax[i])] += gy[i];
    t.accumulate(x, gx);
  });
}

Var reshape(Tape& tape, Var x, Shape shape) {
  Tensor y = tape.value(x).reshaped(std::move(shape));
  return tape.record(std::move(y), {x}, [x](Tape& t, const Tensor& gy) {
    t.accumulate(x, gy.reshaped(t.value(x).shape()));
  });
}

Var flatten(Tape& tape, Var x) {
  const Tensor& xv = tape.value(x);
  if (xv.rank() < 1) throw DimensionError("flatten of a scalar");
  const auto b = xv.dim(0);
  const auto rest = b == 0 ? 0 : static_cast<std::int64_t>(xv.size()) / b;
  return reshape(tape, x, {b, rest});
}

Var softmax_cross_entropy(Tape& tape, Var logits, std::span<const std::int32_t> labels) {
  const Tensor& z = tape.value(logits);
  if (z.rank() != 2) throw DimensionError("softmax_cross_entropy expects [B,K], got " + shape_str(z.shape()));
  const auto B = z.dim(0), K = z.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != B) {
    throw DimensionError("got " + std::to_string(labels.size()) + " labels for logits " + shape_str(z.shape()));
  }
  for (auto y : labels) {
    if (y < 0 || y >= K) {
      throw ValidationError("label " + std::to_string(y) + " outside [0," + std::to_string(K) + ")");
    }
  }
  Tensor probs(z.shape());
  double loss = 0.0;
  for (std::int64_t b = 0; b < B; ++b) {
    const float* row = z.raw() + b * K;
    const float m = *std::max_element(row, row + K);
    double denom = 0.0;
    for (std::int64_t k = 0; k < K; ++k) denom += std::exp(static_cast<double>(row[k]) - m);
    const double lse = m + std::log(denom);
    for (std::int64_t k = 0; k < K; ++k) {
      probs[static_cast<std::size_t>(b * K + k)] = static_cast<float>(std::exp(row[k] - lse));
    }
    loss += lse - row[labels[static_cast<std::size_t>(b)]];
  }
  std::vector<std::int32_t> y(labels.begin(), labels.end());
  return tape.record(Tensor::scalar(static_cast<float>(loss / static_cast<double>(B))), {logits},
                     [logits, probs = std::move(probs), y = std::move(y)](Tape& t, const Tensor& gy) {
                       const auto B = probs.dim(0), K = probs.dim(1);
                       const float s = gy.item() / static_cast<float>(B);
                       Tensor gz = probs;
                       for (std::int64_t b = 0; b < B; ++b) gz[static_cast<std::size_t>(b * K + y[static_cast<std::size_t>(b)])] -= 1.0f;
                       for (auto& e : gz.data()) e *= s;
                       t.accumulate(logits, gz);
                     });
}

Var scale_channels(Tape& tape, Var x, Var f) {
  const Tensor& xv = tape.value(x);
  const Tensor& fv = tape.value(f);
  const ChannelView v = channel_view(xv, "scale_channels");
  check_vector(fv, v.channels, "scale_channels filter", xv.shape());
  Tensor y(xv.shape());
  for (std::int64_t b = 0; b < v.batch; ++b)
    for (std::int64_t c = 0; c < v.channels; ++c) {
      const auto off = static_cast<std::size_t>((b * v.channels + c) * v.inner);
      for (std::int64_t i = 0; i < v.inner; ++i) y[off + static_cast<std::size_t>(i)] = xv[off + static_cast<std::size_t>(i)] * fv[static_cast<std::size_t>(c)];
    }
  return tape.record(std::move(y), {x, f}, [x, f, v](Tape& t, const Tensor& gy) {
    const Tensor& xv = t.value(x);
    const Tensor& fv = t.value(f);
    Tensor gx(gy.shape());
    Tensor gf({v.channels});
    for (std::int64_t b = 0; b < v.batch; ++b)
      for (std::int64_t c = 0; c < v.channels; ++c) {
        const auto off = static_cast<std::size_t>((b * v.channels + c) * v.inner);
        double acc = 0.0;
        for (std::int64_t i = 0; i < v.inner; ++i) {
          const auto k = off + static_cast<std::size_t>(i);
          gx[k] = gy[k] * fv[static_cast<std::size_t>(c)];
          acc += static_cast<double>(gy[k]) * xv[k];
        }
        gf[static_cast<std::size_t>(c)] += static_cast<float>(acc);
      }
    t.accumulate(x, gx);
    t.accumulate(f, gf);
  });
}

namespace {

Tensor gather_impl(const Tensor& x, std::span<const std::int32_t> idx, const ChannelView& v) {
  Shape s = x.shape();
  s[1] = static_cast<std::int64_t>(idx.size());
  Tensor y(s);
  const auto out_c = static_cast<std::int64_t>(idx.size());
  for (std::int64_t b = 0; b < v.batch; ++b)
    for (std::int64_t k = 0; k < out_c; ++k) {
      const float* src = x.raw() + (b * v.channels + idx[static_cast<std::size_t>(k)]) * v.inner;
      std::copy(src, src + v.inner, y.raw() + (b * out_c + k) * v.inner);
    }
  return y;
}

Tensor scatter_impl(const Tensor& x, std::span<const std::int32_t> idx, std::int64_t channels) {
  Shape s = x.shape();
  s[1] = channels;
  Tensor y(s);
  const ChannelView v = channel_view(x, "scatter_channels");
  for (std::int64_t b = 0; b < v.batch; ++b)
    for (std::int64_t k = 0; k < v.channels; ++k) {
      const float* src = x.raw() + (b * v.channels + k) * v.inner;
      std::copy(src, src + v.inner, y.raw() + (b * channels + idx[static_cast<std::size_t>(k)]) * v.inner);
    }
  return y;
}

}  // namespace

Var gather_channels(Tape& tape, Var x, std::span<const std::int32_t> indices) {
  const Tensor& xv = tape.value(x);
  const ChannelView v = channel_view(xv, "gather_channels");
  check_indices(indices, v.channels);
  std::vector<std::int32_t> idx(indices.begin(), indices.end());
  Tensor y = gather_impl(xv, idx, v);
  return tape.record(std::move(y), {x}, [x, idx, v](Tape& t, const Tensor& gy) {
    t.accumulate(x, scatter_impl(gy, idx, v.channels));
  });
}

Var scatter_channels(Tape& tape, Var x, std::span<const std::int32_t> indices, std::int64_t channels) {
  const Tensor& xv = tape.value(x);
  const ChannelView v = channel_view(xv, "scatter_channels");
  if (static_cast<std::int64_t>(indices.size()) != v.channels) {
    throw ValidationError(std::to_string(indices.size()) + " indices for a payload with " +
                          std::to_string(v.channels) + " channels");
  }
  check_indices(indices, channels);
  std::vector<std::int32_t> idx(indices.begin(), indices.end());
  Tensor y = scatter_impl(xv, idx, channels);
  const ChannelView full{v.batch, channels, v.inner};
  return tape.record(std::move(y), {x}, [x, idx, full](Tape& t, const Tensor& gy) {
    t.accumulate(x, gather_impl(gy, idx, full));
  });
}

Var sum(Tape& tape, Var x) {
  double acc = 0.0;
  for (float e : tape.value(x).data()) acc += e;
  return tape.record(Tensor::scalar(static_cast<float>(acc)), {x}, [x](Tape& t, const Tensor& gy) {
    t.accumulate(x, Tensor(t.value(x).shape(), gy.item()));
  });
}

Var add(Tape& tape, Var a, Var b) {
  Tensor y = tape.value(a);
  y.add_(tape.value(b));
  return tape.record(std::move(y), {a, b}, [a, b](Tape& t, const Tensor& gy) {
    t.accumulate(a, gy);
    t.accumulate(b, gy);
  });
}

Var mul(Tape& tape, Var a, Var b) {
  const Tensor& av = tape.value(a);
  const Tensor& bv = tape.value(b);
  if (av.shape() != bv.shape()) {
    throw DimensionError("mul: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  }
  Tensor y = av;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  return tape.record(std::move(y), {a, b}, [a, b](Tape& t, const Tensor& gy) {
    if (t.requires_grad(a)) {
      Tensor g = gy;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= t.value(b)[i];
      t.accumulate(a, g);
    }
    if (t.requires_grad(b)) {
      Tensor g = gy;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= t.value(a)[i];
      t.accumulate(b, g);
    }
  });
}

Var scale(Tape& tape, Var x, float s) {
  Tensor y = tape.value(x);
  for (auto& e : y.data()) e *= s;
  return tape.record(std::move(y), {x}, [x, s](Tape& t, const Tensor& gy) {
    Tensor g = gy;
    for (auto& e : g.data()) e *= s;
    t.accumulate(x, g);
  });
}

}  // namespace splitstream::ops
