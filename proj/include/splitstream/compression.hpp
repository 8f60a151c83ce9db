#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "splitstream/ops.hpp"
#include "splitstream/params.hpp"

// Learnable bottleneck at the split point.
//
// Client side (compress):   l_n -> conv(k=2+r, stride r, pad r) -> batchnorm
//                           -> mul by f = sigmoid(f_hat) per channel -> l_c
// Wire:                     top-b channels of l_c by f, plus f itself
// Server side (decompress): zero-fill to phi channels -> transposed conv
//                           (same kernel/stride/pad) -> batchnorm -> l_d
//
// In vector mode (MLP split) the convolutions become dense maps and r is 1.
namespace splitstream {

struct CompressionConfig {
  int r = 1;
  std::int64_t phi = 0;        // channels out of the compression conv
  std::int64_t phi_tilde = 0;  // channels of l_n
  bool vector_mode = false;
  // Identity module: no conv, no batchnorm, no gating. Test-only.
  bool bypass = false;
  // Replaces the 2+r kernel rule when set.
  std::optional<int> kernel_override;

  int kernel() const { return kernel_override ? *kernel_override : 2 + r; }
  int stride() const { return r; }
  int padding() const { return r; }

  /// Throws ValidationError on r < 1, phi > phi_tilde, r != 1 in vector mode.
  void validate() const;
};

struct LossWeights {
  double delta = 1.0;
  double lambda = 0.5;
  double epsilon = 0.1;

  void validate() const;
};

/// B is the soft target of sum(f); b the number of channels sent.
struct Budget {
  double target = 0.0;
  int channels = 1;

  /// b = round(B), at least 1.
  static Budget from_target(double B);
};

/// Read-only view of the filter: f = sigmoid(f_hat).
std::vector<float> filter_values(const Tensor& f_hat);

/// Parameter names used by the module. Client store holds compress.* and the
/// filter; the server store holds decompress.*.
namespace names {
inline constexpr const char* kFilter = "compress.f_hat";
}

void init_compression_params(const CompressionConfig& cfg, ParameterStore& client, std::mt19937_64& rng);
void init_decompression_params(const CompressionConfig& cfg, ParameterStore& server, std::mt19937_64& rng);

/// Per-sample shape of l_c for a per-sample l_n shape ([C,H,W] or [C]).
Shape compressed_sample_shape(const CompressionConfig& cfg, const Shape& ln_sample);

struct CompressOutput {
  Var l_c;  // [B, phi, H', W'] (or [B, phi])
  Var f;    // [phi]
};

CompressOutput compress(Tape& tape, Var l_n, const CompressionConfig& cfg, ParameterStore& client,
                        ops::Mode mode);

/// Indices of the b largest f values (ties to the smaller index), ascending.
std::vector<std::int32_t> top_b_indices(std::span<const float> f, int b);

struct ChannelSelection {
  std::vector<std::int32_t> indices;
  Tensor payload;  // [B, b, ...] stacked in index order
};

ChannelSelection select_channels(const Tensor& l_c, std::span<const float> f, int b);

/// Zero-fills the channels not in `indices`, then restores the shape of l_n
/// (`ln_sample` is its per-sample shape). `f` is accepted for interface
/// symmetry with the forward message; the payload already carries it.
Var decompress(Tape& tape, Var payload, std::span<const std::int32_t> indices, std::span<const float> f,
               const CompressionConfig& cfg, const Shape& ln_sample, ParameterStore& server, ops::Mode mode);

/// exp(delta*(s-B)) + lambda*exp(-delta*(s-B)) with s = sum(f), evaluated in
/// double. The exponent is clamped to +-30.
double prune_loss_value(std::span<const float> f, double B, const LossWeights& w);

/// d prune_loss / d s (identical for every f_k).
double prune_loss_slope(std::span<const float> f, double B, const LossWeights& w);

Var prune_loss(Tape& tape, Var f, double B, const LossWeights& w);

/// task + epsilon * prune.
Var total_loss(Tape& tape, Var task_loss, Var prune, double epsilon);

/// Entries whose sigmoid exceeds `threshold` are redrawn from U(-0.1, 0.1);
/// the rest are kept. Deterministic in `seed`.
Tensor reset_prune(const Tensor& f_hat, double threshold, std::uint64_t seed);

inline constexpr float kFilterInitBound = 0.1f;
inline constexpr double kPruneExponentClamp = 30.0;

}  // namespace splitstream
