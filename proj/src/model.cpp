#include "splitstream/model.hpp"

#include <cmath>
#include <fstream>
#include <iterator>

#include "splitstream/bytes.hpp"
#include "splitstream/errors.hpp"

namespace splitstream {

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv: return "conv";
    case LayerKind::Dense: return "dense";
    case LayerKind::Relu: return "relu";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::Flatten: return "flatten";
  }
  return "?";
}

LayerSpec LayerSpec::conv(std::int64_t in, std::int64_t out, int kernel, int stride, int padding) {
  return {LayerKind::Conv, in, out, kernel, stride, padding};
}
LayerSpec LayerSpec::dense(std::int64_t in, std::int64_t out) { return {LayerKind::Dense, in, out, 0, 1, 0}; }
LayerSpec LayerSpec::relu() { return {LayerKind::Relu, 0, 0, 0, 1, 0}; }
LayerSpec LayerSpec::maxpool(int kernel, int stride) { return {LayerKind::MaxPool, 0, 0, kernel, stride, 0}; }
LayerSpec LayerSpec::batchnorm(std::int64_t channels) {
  return {LayerKind::BatchNorm, channels, channels, 0, 1, 0};
}
LayerSpec LayerSpec::flatten() { return {LayerKind::Flatten, 0, 0, 0, 1, 0}; }

Shape layer_output_shape(const LayerSpec& layer, const Shape& input) {
  auto fail = [&](const std::string& why) {
    throw DimensionError(std::string(layer_kind_name(layer.kind)) + " layer cannot take " + shape_str(input) +
                         ": " + why);
  };
  switch (layer.kind) {
    case LayerKind::Conv: {
      if (input.size() != 4 || input[1] != layer.in) fail("expects [B," + std::to_string(layer.in) + ",H,W]");
      const kernels::ConvGeometry g{layer.stride, layer.padding};
      return {input[0], layer.out, kernels::conv_out_extent(input[2], layer.kernel, g),
              kernels::conv_out_extent(input[3], layer.kernel, g)};
    }
    case LayerKind::Dense:
      if (input.size() != 2 || input[1] != layer.in) fail("expects [B," + std::to_string(layer.in) + "]");
      return {input[0], layer.out};
    case LayerKind::Relu:
      return input;
    case LayerKind::MaxPool:
      if (input.size() != 4) fail("expects NCHW");
      return {input[0], input[1], kernels::pool_out_extent(input[2], layer.kernel, layer.stride),
              kernels::pool_out_extent(input[3], layer.kernel, layer.stride)};
    case LayerKind::BatchNorm:
      if (input.size() < 2 || input[1] != layer.in) fail("channel extent must be " + std::to_string(layer.in));
      return input;
    case LayerKind::Flatten: {
      if (input.size() < 2) fail("needs a batch axis and features");
      std::int64_t n = 1;
      for (std::size_t i = 1; i < input.size(); ++i) n *= input[i];
      return {input[0], n};
    }
  }
  fail("unknown kind");
  return {};
}

std::vector<Shape> infer_shapes(const LayerList& layers, const Shape& input) {
  std::vector<Shape> shapes{input};
  for (const auto& l : layers) shapes.push_back(layer_output_shape(l, shapes.back()));
  return shapes;
}

LayerList build_vgg11_like(int num_classes, double width_scale, bool batch_norm) {
  if (num_classes < 2) throw ValidationError("num_classes must be >= 2");
  if (!(width_scale > 0.0 && width_scale <= 1.0)) throw ValidationError("width_scale must lie in (0,1]");
  auto scaled = [&](int c) { return static_cast<std::int64_t>(std::ceil(c * width_scale - 1e-9)); };
  // 0 marks a 2x2 max pool.
  const int plan[] = {64, 0, 128, 0, 256, 256, 0, 512, 512, 0, 512, 512, 0};
  LayerList layers;
  std::int64_t channels = 3;
  for (int c : plan) {
    if (c == 0) {
      layers.push_back(LayerSpec::maxpool(2, 2));
      continue;
    }
    const auto out = scaled(c);
    layers.push_back(LayerSpec::conv(channels, out, 3, 1, 1));
    if (batch_norm) layers.push_back(LayerSpec::batchnorm(out));
    layers.push_back(LayerSpec::relu());
    channels = out;
  }
  // 32x32 input reaches 1x1 after five pools.
  const auto hidden = scaled(512);
  layers.push_back(LayerSpec::flatten());
  layers.push_back(LayerSpec::dense(channels, hidden));
  layers.push_back(LayerSpec::relu());
  layers.push_back(LayerSpec::dense(hidden, hidden));
  layers.push_back(LayerSpec::relu());
  layers.push_back(LayerSpec::dense(hidden, num_classes));
  return layers;
}

LayerList build_mlp(const std::vector<int>& widths) {
  if (widths.size() < 2) throw ValidationError("an MLP needs at least two widths");
  for (int w : widths)
    if (w <= 0) throw ValidationError("MLP widths must be positive");
  LayerList layers;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    layers.push_back(LayerSpec::dense(widths[i], widths[i + 1]));
    if (i + 2 < widths.size()) layers.push_back(LayerSpec::relu());
  }
  return layers;
}

std::string layer_param_name(std::size_t layer_index, const char* leaf) {
  return "layer" + std::to_string(layer_index) + "." + leaf;
}

void init_layer_params(const LayerList& layers, std::size_t begin, std::size_t end, ParameterStore& store,
                       std::mt19937_64& rng) {
  for (std::size_t i = begin; i < end; ++i) {
    const auto& l = layers[i];
    switch (l.kind) {
      case LayerKind::Conv:
        store.add(layer_param_name(i, "weight"),
                  kaiming_uniform({l.out, l.in, l.kernel, l.kernel}, l.in * l.kernel * l.kernel, rng));
        store.add(layer_param_name(i, "bias"), Tensor({l.out}));
        break;
      case LayerKind::Dense:
        store.add(layer_param_name(i, "weight"), kaiming_uniform({l.in, l.out}, l.in, rng));
        store.add(layer_param_name(i, "bias"), Tensor({l.out}));
        break;
      case LayerKind::BatchNorm:
        store.add(layer_param_name(i, "gamma"), Tensor({l.in}, 1.0f));
        store.add(layer_param_name(i, "beta"), Tensor({l.in}, 0.0f));
        store.add(layer_param_name(i, "running_mean"), Tensor({l.in}, 0.0f), false);
        store.add(layer_param_name(i, "running_var"), Tensor({l.in}, 1.0f), false);
        break;
      default:
        break;
    }
  }
}

Var forward_layers(Tape& tape, Var x, const LayerList& layers, std::size_t begin, std::size_t end,
                   ParameterStore& store, ops::Mode mode) {
  for (std::size_t i = begin; i < end; ++i) {
    const auto& l = layers[i];
    switch (l.kind) {
      case LayerKind::Conv:
        x = ops::conv2d(tape, x, tape.parameter(store.get(layer_param_name(i, "weight"))),
                        tape.parameter(store.get(layer_param_name(i, "bias"))), {l.stride, l.padding});
        break;
      case LayerKind::Dense:
        x = ops::dense(tape, x, tape.parameter(store.get(layer_param_name(i, "weight"))),
                       tape.parameter(store.get(layer_param_name(i, "bias"))));
        break;
      case LayerKind::Relu:
        x = ops::relu(tape, x);
        break;
      case LayerKind::MaxPool:
        x = ops::maxpool2d(tape, x, l.kernel, l.stride);
        break;
      case LayerKind::BatchNorm: {
        ops::BatchNormState st{&store.get(layer_param_name(i, "running_mean")).value,
                               &store.get(layer_param_name(i, "running_var")).value};
        x = ops::batchnorm(tape, x, tape.parameter(store.get(layer_param_name(i, "gamma"))),
                           tape.parameter(store.get(layer_param_name(i, "beta"))), st, mode);
        break;
      }
      case LayerKind::Flatten:
        x = ops::flatten(tape, x);
        break;
    }
  }
  return x;
}

SplitModel split_at(LayerList layers, std::size_t n, CompressionConfig compression, Shape sample_shape) {
  if (layers.empty()) throw ValidationError("cannot split an empty model");
  if (n >= layers.size()) {
    throw ValidationError("split index " + std::to_string(n) + " outside [0," + std::to_string(layers.size()) +
                          ")");
  }
  Shape batched{1};
  batched.insert(batched.end(), sample_shape.begin(), sample_shape.end());
  const auto shapes = infer_shapes(layers, batched);

  SplitModel m;
  m.split_index = n;
  m.sample_shape = std::move(sample_shape);
  m.split_sample.assign(shapes[n].begin() + 1, shapes[n].end());
  const bool vector_split = m.split_sample.size() == 1;
  if (vector_split) {
    if (compression.r != 1) {
      throw ValidationError("split after a flatten/dense boundary needs r = 1 (vector mode)");
    }
    compression.vector_mode = true;
  } else if (compression.vector_mode) {
    throw ValidationError("vector-mode compression requested at a spatial split point");
  }
  compression.phi_tilde = m.split_sample[0];
  if (compression.phi == 0) compression.phi = compression.phi_tilde;
  compression.validate();
  m.compression = compression;
  m.payload_sample = compressed_sample_shape(m.compression, m.split_sample);

  // Restoration contract: decompression must land on the shape of l_n.
  if (!compression.bypass && !vector_split) {
    const auto k = compression.kernel();
    for (int axis : {1, 2}) {
      const auto natural = (m.payload_sample[static_cast<std::size_t>(axis)] - 1) * compression.r -
                           2 * compression.r + k;
      const auto pad = m.split_sample[static_cast<std::size_t>(axis)] - natural;
      if (pad < 0 || pad >= compression.r) {
        throw DimensionError("decompression cannot restore split shape " + shape_str(m.split_sample) +
                             " with r=" + std::to_string(compression.r));
      }
    }
  }
  m.layers = std::move(layers);
  return m;
}

SplitParams init_split_params(const SplitModel& model, std::uint64_t seed) {
  // One stream for the whole model, drawn in layer order, so the client and
  // server halves get the same values as an unsplit model with the same seed.
  std::mt19937_64 rng(seed);
  SplitParams p;
  init_layer_params(model.layers, 0, model.split_index, p.client, rng);
  init_layer_params(model.layers, model.split_index, model.layers.size(), p.server, rng);
  std::mt19937_64 module_rng(seed ^ 0x9e3779b97f4a7c15ULL);
  init_compression_params(model.compression, p.client, module_rng);
  init_decompression_params(model.compression, p.server, module_rng);
  return p;
}

CompressOutput client_forward(Tape& tape, Var input, const SplitModel& model, ParameterStore& client,
                              ops::Mode mode) {
  const Var l_n = forward_layers(tape, input, model.layers, 0, model.split_index, client, mode);
  return compress(tape, l_n, model.compression, client, mode);
}

Var server_forward(Tape& tape, Var payload, std::span<const std::int32_t> indices, std::span<const float> f,
                   const SplitModel& model, ParameterStore& server, ops::Mode mode) {
  const Var l_d = decompress(tape, payload, indices, f, model.compression, model.split_sample, server, mode);
  return forward_layers(tape, l_d, model.layers, model.split_index, model.layers.size(), server, mode);
}

namespace {

constexpr char kCheckpointMagic[4] = {'S', 'P', 'L', 'T'};
constexpr std::uint8_t kCheckpointVersion = 1;
constexpr std::uint8_t kDtypeF32 = 1;

bool is_buffer_name(const std::string& name) {
  auto ends_with = [&](std::string_view suffix) {
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return ends_with("running_mean") || ends_with("running_var");
}

}  // namespace

void save_checkpoint(const std::string& path, const std::vector<const ParameterStore*>& stores,
                     const std::vector<std::string>& prefixes) {
  if (stores.size() != prefixes.size()) throw ValidationError("one prefix per store required");
  std::vector<std::uint8_t> buf;
  ByteWriter w(buf);
  w.bytes(std::string_view(kCheckpointMagic, 4));
  w.u8(kCheckpointVersion);
  for (std::size_t s = 0; s < stores.size(); ++s) {
    for (const Parameter* p : stores[s]->all()) {
      const std::string name = prefixes[s] + p->name;
      w.u32(static_cast<std::uint32_t>(name.size()));
      w.bytes(name);
      w.u8(kDtypeF32);
      w.u32(static_cast<std::uint32_t>(p->value.rank()));
      for (auto d : p->value.shape()) w.u64(static_cast<std::uint64_t>(d));
      w.f32s(p->value.data());
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open checkpoint for writing: " + path);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw FormatError("failed writing checkpoint: " + path);
}

ParameterStore load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint: " + path);
  const std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  ParameterStore store;
  try {
    ByteReader r(buf);
    if (r.bytes(4) != std::string_view(kCheckpointMagic, 4)) throw FormatError("not a checkpoint (bad magic): " + path);
    const auto version = r.u8();
    if (version != kCheckpointVersion) {
      throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    while (r.remaining() > 0) {
      const auto len = r.u32();
      std::string name = r.bytes(len);
      if (r.u8() != kDtypeF32) throw FormatError("unsupported dtype for '" + name + "'");
      const auto rank = r.u32();
      if (rank > 8) throw FormatError("implausible rank for '" + name + "'");
      Shape shape;
      for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::int64_t>(r.u64()));
      Tensor t(shape);
      r.f32s(t.data());
      const bool learnable = !is_buffer_name(name);
      store.add(std::move(name), std::move(t), learnable);
    }
  } catch (const FramingError& e) {
    throw FormatError("truncated checkpoint " + path + ": " + e.what());
  }
  return store;
}

void save_split_checkpoint(const std::string& path, const SplitParams& params) {
  save_checkpoint(path, {&params.client, &params.server}, {"client/", "server/"});
}

SplitParams load_split_checkpoint(const std::string& path) {
  ParameterStore all = load_checkpoint(path);
  SplitParams p;
  for (Parameter* param : all.all()) {
    const std::string& n = param->name;
    if (n.rfind("client/", 0) == 0) {
      p.client.add(n.substr(7), param->value, param->learnable);
    } else if (n.rfind("server/", 0) == 0) {
      p.server.add(n.substr(7), param->value, param->learnable);
    } else {
      throw FormatError("checkpoint record '" + n + "' has no client/ or server/ prefix");
    }
  }
  return p;
}

}  // namespace splitstream
