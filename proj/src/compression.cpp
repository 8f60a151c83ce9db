#include "splitstream/compression.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "splitstream/errors.hpp"

namespace splitstream {

void CompressionConfig::validate() const {
  if (r < 1) throw ValidationError("resolution factor r must be >= 1, got " + std::to_string(r));
  if (phi_tilde < 1) throw ValidationError("phi_tilde must be positive");
  if (phi < 1 || phi > phi_tilde) {
    throw ValidationError("phi must satisfy 1 <= phi <= phi_tilde (" + std::to_string(phi) + " vs " +
                          std::to_string(phi_tilde) + ")");
  }
  if (vector_mode && r != 1) throw ValidationError("vector-mode compression requires r = 1");
  if (kernel_override && *kernel_override < 1) throw ValidationError("kernel override must be positive");
  if (bypass && phi != phi_tilde) throw ValidationError("bypass mode requires phi == phi_tilde");
}

void LossWeights::validate() const {
  if (!(delta > 0.0)) throw ValidationError("delta must be positive");
  if (lambda < 0.0 || lambda > 1.0) throw ValidationError("lambda must lie in [0,1]");
  if (epsilon < 0.0) throw ValidationError("epsilon must be non-negative");
}

Budget Budget::from_target(double B) {
  if (B < 0.0) throw ValidationError("budget target must be non-negative");
  return Budget{B, std::max(1, static_cast<int>(std::lround(B)))};
}

std::vector<float> filter_values(const Tensor& f_hat) {
  std::vector<float> f(f_hat.size());
  for (std::size_t i = 0; i < f.size(); ++i) {
    const float x = f_hat[i];
    f[i] = x >= 0.0f ? 1.0f / (1.0f + std::exp(-x)) : std::exp(x) / (1.0f + std::exp(x));
  }
  return f;
}

namespace {

std::string key(const char* prefix, const char* leaf) { return std::string(prefix) + "." + leaf; }

void add_batchnorm(ParameterStore& store, const char* prefix, std::int64_t c) {
  store.add(key(prefix, "bn.gamma"), Tensor({c}, 1.0f));
  store.add(key(prefix, "bn.beta"), Tensor({c}, 0.0f));
  store.add(key(prefix, "bn.running_mean"), Tensor({c}, 0.0f), false);
  store.add(key(prefix, "bn.running_var"), Tensor({c}, 1.0f), false);
}

Var apply_batchnorm(Tape& tape, Var x, ParameterStore& store, const char* prefix, ops::Mode mode) {
  ops::BatchNormState st{&store.get(key(prefix, "bn.running_mean")).value,
                         &store.get(key(prefix, "bn.running_var")).value};
  return ops::batchnorm(tape, x, tape.parameter(store.get(key(prefix, "bn.gamma"))),
                        tape.parameter(store.get(key(prefix, "bn.beta"))), st, mode);
}

}  // namespace

void init_compression_params(const CompressionConfig& cfg, ParameterStore& client, std::mt19937_64& rng) {
  cfg.validate();
  if (cfg.bypass) return;
  const auto k = cfg.kernel();
  if (cfg.vector_mode) {
    client.add("compress.weight", kaiming_uniform({cfg.phi_tilde, cfg.phi}, cfg.phi_tilde, rng));
  } else {
    client.add("compress.weight", kaiming_uniform({cfg.phi, cfg.phi_tilde, k, k}, cfg.phi_tilde * k * k, rng));
  }
  client.add("compress.bias", Tensor({cfg.phi}, 0.0f));
  add_batchnorm(client, "compress", cfg.phi);
  Tensor f_hat({cfg.phi});
  std::uniform_real_distribution<float> dist(-kFilterInitBound, kFilterInitBound);
  for (auto& e : f_hat.data()) e = dist(rng);
  client.add(names::kFilter, std::move(f_hat));
}

void init_decompression_params(const CompressionConfig& cfg, ParameterStore& server, std::mt19937_64& rng) {
  cfg.validate();
  if (cfg.bypass) return;
  const auto k = cfg.kernel();
  if (cfg.vector_mode) {
    server.add("decompress.weight", kaiming_uniform({cfg.phi, cfg.phi_tilde}, cfg.phi, rng));
  } else {
    server.add("decompress.weight", kaiming_uniform({cfg.phi, cfg.phi_tilde, k, k}, cfg.phi * k * k, rng));
  }
  server.add("decompress.bias", Tensor({cfg.phi_tilde}, 0.0f));
  add_batchnorm(server, "decompress", cfg.phi_tilde);
}

Shape compressed_sample_shape(const CompressionConfig& cfg, const Shape& ln_sample) {
  if (ln_sample.empty() || ln_sample[0] != cfg.phi_tilde) {
    throw DimensionError("l_n sample shape " + shape_str(ln_sample) + " does not have phi_tilde=" +
                         std::to_string(cfg.phi_tilde) + " channels");
  }
  if (cfg.bypass) return ln_sample;
  if (cfg.vector_mode) {
    if (ln_sample.size() != 1) throw DimensionError("vector-mode compression needs a [features] sample shape");
    return {cfg.phi};
  }
  if (ln_sample.size() != 3) throw DimensionError("conv compression needs a [C,H,W] sample shape");
  const kernels::ConvGeometry g{cfg.stride(), cfg.padding()};
  return {cfg.phi, kernels::conv_out_extent(ln_sample[1], cfg.kernel(), g),
          kernels::conv_out_extent(ln_sample[2], cfg.kernel(), g)};
}

CompressOutput compress(Tape& tape, Var l_n, const CompressionConfig& cfg, ParameterStore& client,
                        ops::Mode mode) {
  const Tensor& x = tape.value(l_n);
  if (x.rank() < 2 || x.dim(1) != cfg.phi_tilde) {
    throw DimensionError("compress: l_n " + shape_str(x.shape()) + " does not have phi_tilde=" +
                         std::to_string(cfg.phi_tilde) + " channels");
  }
  if (cfg.bypass) {
    return {l_n, tape.constant(Tensor({cfg.phi_tilde}, 1.0f))};
  }
  const Var w = tape.parameter(client.get("compress.weight"));
  const Var b = tape.parameter(client.get("compress.bias"));
  Var h;
  if (cfg.vector_mode) {
    h = ops::dense(tape, l_n, w, b);
  } else {
    h = ops::conv2d(tape, l_n, w, b, {cfg.stride(), cfg.padding()});
  }
  const Var lc_hat = apply_batchnorm(tape, h, client, "compress", mode);
  const Var f = ops::sigmoid(tape, tape.parameter(client.get(names::kFilter)));
  return {ops::scale_channels(tape, lc_hat, f), f};
}

std::vector<std::int32_t> top_b_indices(std::span<const float> f, int b) {
  const auto phi = static_cast<int>(f.size());
  if (b < 1 || b > phi) {
    throw ValidationError("budget b=" + std::to_string(b) + " outside [1," + std::to_string(phi) + "]");
  }
  std::vector<std::int32_t> order(f.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::int32_t a, std::int32_t c) {
    return f[static_cast<std::size_t>(a)] > f[static_cast<std::size_t>(c)];
  });
  order.resize(static_cast<std::size_t>(b));
  std::sort(order.begin(), order.end());
  return order;
}

ChannelSelection select_channels(const Tensor& l_c, std::span<const float> f, int b) {
  if (l_c.rank() < 2 || l_c.dim(1) != static_cast<std::int64_t>(f.size())) {
    throw DimensionError("select_channels: l_c " + shape_str(l_c.shape()) + " vs filter of length " +
                         std::to_string(f.size()));
  }
  ChannelSelection sel;
  sel.indices = top_b_indices(f, b);
  Tape tape;
  const Var x = tape.constant(l_c);
  sel.payload = tape.value(ops::gather_channels(tape, x, sel.indices));
  return sel;
}

Var decompress(Tape& tape, Var payload, std::span<const std::int32_t> indices, std::span<const float> f,
               const CompressionConfig& cfg, const Shape& ln_sample, ParameterStore& server, ops::Mode mode) {
  if (static_cast<std::int64_t>(f.size()) != cfg.phi) {
    throw DimensionError("decompress: filter of length " + std::to_string(f.size()) + " for phi=" +
                         std::to_string(cfg.phi));
  }
  const Var full = ops::scatter_channels(tape, payload, indices, cfg.phi);
  if (cfg.bypass) return full;
  const Var w = tape.parameter(server.get("decompress.weight"));
  const Var b = tape.parameter(server.get("decompress.bias"));
  Var h;
  if (cfg.vector_mode) {
    h = ops::dense(tape, full, w, b);
  } else {
    const Tensor& pv = tape.value(full);
    kernels::ConvGeometry g{cfg.stride(), cfg.padding(), 0};
    // Pick the output padding that lands exactly on the extent of l_n.
    const auto natural_h = (pv.dim(2) - 1) * g.stride - 2 * g.padding + cfg.kernel();
    const auto natural_w = (pv.dim(3) - 1) * g.stride - 2 * g.padding + cfg.kernel();
    const auto pad_h = ln_sample.at(1) - natural_h;
    const auto pad_w = ln_sample.at(2) - natural_w;
    if (pad_h != pad_w || pad_h < 0 || pad_h >= g.stride) {
      throw DimensionError("decompression cannot restore " + shape_str(ln_sample) + " from " +
                           shape_str(pv.shape()));
    }
    g.output_padding = static_cast<int>(pad_h);
    h = ops::conv_transpose2d(tape, full, w, b, g);
  }
  return apply_batchnorm(tape, h, server, "decompress", mode);
}

namespace {

double clamped_exponent(std::span<const float> f, double B, const LossWeights& w) {
  double s = 0.0;
  for (float v : f) s += v;
  return std::clamp(w.delta * (s - B), -kPruneExponentClamp, kPruneExponentClamp);
}

}  // namespace

double prune_loss_value(std::span<const float> f, double B, const LossWeights& w) {
  const double a = clamped_exponent(f, B, w);
  return std::exp(a) + w.lambda * std::exp(-a);
}

double prune_loss_slope(std::span<const float> f, double B, const LossWeights& w) {
  // Slope at the clamped exponent; the clamp does not zero it.
  const double a = clamped_exponent(f, B, w);
  return w.delta * (std::exp(a) - w.lambda * std::exp(-a));
}

Var prune_loss(Tape& tape, Var f, double B, const LossWeights& w) {
  const Tensor& fv = tape.value(f);
  if (fv.rank() != 1) throw DimensionError("prune_loss expects a filter vector, got " + shape_str(fv.shape()));
  const double value = prune_loss_value(fv.data(), B, w);
  const double slope = prune_loss_slope(fv.data(), B, w);
  return tape.record(Tensor::scalar(static_cast<float>(value)), {f}, [f, slope](Tape& t, const Tensor& gy) {
    t.accumulate(f, Tensor(t.value(f).shape(), static_cast<float>(slope * gy.item())));
  });
}

Var total_loss(Tape& tape, Var task_loss, Var prune, double epsilon) {
  if (tape.value(task_loss).size() != 1 || tape.value(prune).size() != 1) {
    throw DimensionError("total_loss expects scalar inputs");
  }
  return ops::add(tape, task_loss, ops::scale(tape, prune, static_cast<float>(epsilon)));
}

Tensor reset_prune(const Tensor& f_hat, double threshold, std::uint64_t seed) {
  Tensor out = f_hat;
  const auto f = filter_values(f_hat);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(-kFilterInitBound, kFilterInitBound);
  for (std::size_t k = 0; k < f.size(); ++k) {
    // Draw for every entry so the value given to channel k does not depend
    // on which other channels were reset.
    const float draw = dist(rng);
    if (f[k] > threshold) out[k] = draw;
  }
  return out;
}

}  // namespace splitstream
