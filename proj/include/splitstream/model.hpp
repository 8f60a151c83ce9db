#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "splitstream/compression.hpp"
#include "splitstream/ops.hpp"
#include "splitstream/params.hpp"

namespace splitstream {

enum class LayerKind { Conv, Dense, Relu, MaxPool, BatchNorm, Flatten };

const char* layer_kind_name(LayerKind kind);

/// One entry of a sequential model. Every entry counts as one layer for
/// split indexing: split n means entries [0, n) run on the client.
struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  std::int64_t in = 0;   // input channels (conv, batchnorm) or features (dense)
  std::int64_t out = 0;  // output channels / features
  int kernel = 0;        // conv, maxpool
  int stride = 1;
  int padding = 0;

  static LayerSpec conv(std::int64_t in, std::int64_t out, int kernel, int stride = 1, int padding = 0);
  static LayerSpec dense(std::int64_t in, std::int64_t out);
  static LayerSpec relu();
  static LayerSpec maxpool(int kernel, int stride);
  static LayerSpec batchnorm(std::int64_t channels);
  static LayerSpec flatten();
};

using LayerList = std::vector<LayerSpec>;

/// Output shape of one layer for a batched input shape; DimensionError when
/// the layer does not accept it.
Shape layer_output_shape(const LayerSpec& layer, const Shape& input);

/// Shapes l_0 .. l_L for a batched input shape. Validates chaining.
std::vector<Shape> infer_shapes(const LayerList& layers, const Shape& input);

/// VGG11 (8 conv + 3 dense) for 32x32 inputs with channel widths scaled by
/// width_scale (rounded up). With batch_norm each conv is followed by a
/// batchnorm layer, so entries go conv, bn, relu[, pool].
LayerList build_vgg11_like(int num_classes, double width_scale, bool batch_norm = true);

/// dense + relu stack; no relu after the last dense.
LayerList build_mlp(const std::vector<int>& widths);

/// Parameter name for a layer-local tensor, e.g. "layer4.weight".
std::string layer_param_name(std::size_t layer_index, const char* leaf);

/// Adds parameters for layers [begin, end). Kaiming-uniform weights, zero
/// biases, gamma=1/beta=0, running stats 0/1.
void init_layer_params(const LayerList& layers, std::size_t begin, std::size_t end, ParameterStore& store,
                       std::mt19937_64& rng);

/// Runs layers [begin, end) on the tape.
Var forward_layers(Tape& tape, Var x, const LayerList& layers, std::size_t begin, std::size_t end,
                   ParameterStore& store, ops::Mode mode);

/// A layer list cut at index n with the compression module between halves.
struct SplitModel {
  LayerList layers;
  std::size_t split_index = 0;
  CompressionConfig compression;
  Shape sample_shape;  // per-sample input shape, e.g. [3,32,32]
  Shape split_sample;  // per-sample shape of l_n
  Shape payload_sample;  // per-sample shape of l_c

  std::int64_t phi() const { return compression.phi; }
  std::int64_t phi_tilde() const { return compression.phi_tilde; }
  std::size_t num_layers() const { return layers.size(); }
};

/// Validates 0 <= n < L, derives phi_tilde from l_n and fills in phi when it
/// is 0 (phi = phi_tilde). Vector-shaped l_n forces vector mode with r = 1.
SplitModel split_at(LayerList layers, std::size_t n, CompressionConfig compression, Shape sample_shape);

/// Parameters of both halves of a split model.
struct SplitParams {
  ParameterStore client;  // layers [0,n), compress.*, f_hat
  ParameterStore server;  // decompress.*, layers [n,L)
};

SplitParams init_split_params(const SplitModel& model, std::uint64_t seed);

/// Client half: l_0 -> l_n -> (l_c, f).
CompressOutput client_forward(Tape& tape, Var input, const SplitModel& model, ParameterStore& client,
                              ops::Mode mode);

/// Server half: payload -> l_d -> logits.
Var server_forward(Tape& tape, Var payload, std::span<const std::int32_t> indices, std::span<const float> f,
                   const SplitModel& model, ParameterStore& server, ops::Mode mode);

/// Checkpoint file: "SPLT", version byte (1), then records until end of file:
/// u32 name length, name bytes, u8 dtype (1 = f32), u32 rank, rank x u64
/// extents, raw little-endian values. Integers are little-endian. Running
/// batchnorm statistics load as non-learnable.
void save_checkpoint(const std::string& path, const std::vector<const ParameterStore*>& stores,
                     const std::vector<std::string>& prefixes);
/// Loads into a fresh store: record names keep their prefixes.
ParameterStore load_checkpoint(const std::string& path);

void save_split_checkpoint(const std::string& path, const SplitParams& params);
SplitParams load_split_checkpoint(const std::string& path);

}  // namespace splitstream
