#pragma once

#include <cstdint>
#include <optional>
#include <span>

#include "splitstream/kernels.hpp"
#include "splitstream/tape.hpp"

// Differentiable primitives. Each op computes its forward value with the
// parallel kernels and records a backward closure on the tape.
namespace splitstream::ops {

enum class Mode { Train, Eval };

/// y = x * w + bias for x [B,I], w [I,O], bias [O].
Var dense(Tape& tape, Var x, Var w, Var bias);

/// Cross-correlation; x [B,C,H,W], w [F,C,kh,kw], bias [F].
Var conv2d(Tape& tape, Var x, Var w, std::optional<Var> bias, kernels::ConvGeometry g);

/// x [B,Cin,H,W], w [Cin,Cout,kh,kw], bias [Cout]. Output extent (H-1)*s - 2p + kh.
Var conv_transpose2d(Tape& tape, Var x, Var w, std::optional<Var> bias, kernels::ConvGeometry g);

/// Running statistics updated in Train mode, read in Eval mode.
struct BatchNormState {
  Tensor* running_mean = nullptr;
  Tensor* running_var = nullptr;
  float momentum = 0.1f;
  float eps = 1e-5f;
};

/// Per-channel normalization of [B,C,H,W] or [B,C]. Train mode uses batch
/// statistics (biased variance) and updates the running stats with the
/// unbiased variance.
Var batchnorm(Tape& tape, Var x, Var gamma, Var beta, BatchNormState state, Mode mode);

Var relu(Tape& tape, Var x);
Var sigmoid(Tape& tape, Var x);
Var maxpool2d(Tape& tape, Var x, int kernel, int stride);
/// [B, ...] -> [B, prod(...)].
Var flatten(Tape& tape, Var x);
/// Reshape to an arbitrary shape with the same element count.
Var reshape(Tape& tape, Var x, Shape shape);

/// Mean over the batch of -log softmax(logits)[label]. Labels must lie in
/// [0, num_classes); otherwise ValidationError.
Var softmax_cross_entropy(Tape& tape, Var logits, std::span<const std::int32_t> labels);

/// y[:,k,...] = x[:,k,...] * f[k]. f is a vector of length C.
Var scale_channels(Tape& tape, Var x, Var f);

/// Stack the listed channels of x in the given order.
Var gather_channels(Tape& tape, Var x, std::span<const std::int32_t> indices);

/// Inverse of gather: place x's channels at the listed positions of a
/// zero tensor with `channels` channels.
Var scatter_channels(Tape& tape, Var x, std::span<const std::int32_t> indices, std::int64_t channels);

Var sum(Tape& tape, Var x);
Var add(Tape& tape, Var a, Var b);
Var mul(Tape& tape, Var a, Var b);
Var scale(Tape& tape, Var x, float s);

}  // namespace splitstream::ops
