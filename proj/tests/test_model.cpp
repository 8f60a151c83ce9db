#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <list>
#include <random>

#include "splitstream/errors.hpp"
#include "splitstream/model.hpp"
#include "test_util.hpp"

using namespace splitstream;
using splitstream::testing::check_gradients;
using splitstream::testing::random_tensor;

namespace {

CompressionConfig bypass_config() {
  CompressionConfig c;
  c.bypass = true;
  return c;
}

CompressionConfig resolution(int r, std::int64_t phi = 0) {
  CompressionConfig c;
  c.r = r;
  c.phi = phi;
  return c;
}

// Independent dense-chain oracle in double.
std::vector<double> dense_chain(const std::vector<double>& x, const std::vector<const Tensor*>& weights,
                                const std::vector<const Tensor*>& biases) {
  std::vector<double> h = x;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    const auto in = weights[l]->dim(0), out = weights[l]->dim(1);
    std::vector<double> next(static_cast<std::size_t>(out));
    for (std::int64_t o = 0; o < out; ++o) {
      double s = (*biases[l])[static_cast<std::size_t>(o)];
      for (std::int64_t i = 0; i < in; ++i) s += h[static_cast<std::size_t>(i)] * (*weights[l])[static_cast<std::size_t>(i * out + o)];
      next[static_cast<std::size_t>(o)] = (l + 1 < weights.size() && s < 0.0) ? 0.0 : s;
    }
    h = std::move(next);
  }
  return h;
}

}  // namespace

TEST(Vgg11, SplitFiveExposesOneTwentyEightMaps) {
  const auto m = split_at(build_vgg11_like(10, 1.0), 5, resolution(1), {3, 32, 32});
  EXPECT_EQ(m.phi_tilde(), 128);
  EXPECT_EQ(m.split_sample, (Shape{128, 16, 16}));
}

TEST(Vgg11, QuarterWidth) {
  const auto m = split_at(build_vgg11_like(10, 0.25), 5, resolution(1), {3, 32, 32});
  EXPECT_EQ(m.phi_tilde(), 32);
}

TEST(Vgg11, Topology) {
  const auto layers = build_vgg11_like(10, 0.5);
  int conv = 0, dense = 0;
  for (const auto& l : layers) {
    conv += l.kind == LayerKind::Conv;
    dense += l.kind == LayerKind::Dense;
  }
  EXPECT_EQ(conv, 8);
  EXPECT_EQ(dense, 3);
  const auto shapes = infer_shapes(layers, {2, 3, 32, 32});
  EXPECT_EQ(shapes.back(), (Shape{2, 10}));
  EXPECT_THROW(build_vgg11_like(1, 0.5), ValidationError);
  EXPECT_THROW(build_vgg11_like(10, 0.0), ValidationError);
}

TEST(Vgg11, ProbeForwardAtSeveralWidths) {
  for (double w : {0.125, 0.25, 0.5}) {
    const auto layers = build_vgg11_like(4, w);
    ParameterStore store;
    std::mt19937_64 rng(1);
    init_layer_params(layers, 0, layers.size(), store, rng);
    Tape t;
    const Var y = forward_layers(t, t.constant(random_tensor({2, 3, 32, 32}, rng)), layers, 0, layers.size(), store,
                                 ops::Mode::Train);
    EXPECT_EQ(t.value(y).shape(), (Shape{2, 4}));
    EXPECT_TRUE(t.value(y).all_finite());
  }
}

TEST(Vgg11, ShapeChainMismatchDetected) {
  LayerList bad{LayerSpec::conv(3, 8, 3, 1, 1), LayerSpec::conv(4, 8, 3, 1, 1)};
  EXPECT_THROW(infer_shapes(bad, {1, 3, 8, 8}), DimensionError);
}

TEST(Mlp, ThreeWidthsGiveTwoDenseLayers) {
  const auto layers = build_mlp({4, 3, 2});
  int dense = 0;
  for (const auto& l : layers) dense += l.kind == LayerKind::Dense;
  EXPECT_EQ(dense, 2);
  EXPECT_EQ(infer_shapes(layers, {5, 4}).back(), (Shape{5, 2}));
  EXPECT_THROW(build_mlp({4}), ValidationError);
  EXPECT_THROW(build_mlp({4, 0, 2}), ValidationError);
}

TEST(Mlp, SplitAfterFirstDense) {
  const auto m = split_at(build_mlp({8, 6, 4}), 1, resolution(1), {8});
  EXPECT_EQ(m.phi_tilde(), 6);
  EXPECT_TRUE(m.compression.vector_mode);
  EXPECT_THROW(split_at(build_mlp({8, 6, 4}), 1, resolution(2), {8}), ValidationError);
}

TEST(Mlp, ForwardMatchesDenseChainOracle) {
  std::mt19937_64 rng(2);
  const auto layers = build_mlp({5, 7, 6, 3});
  ParameterStore store;
  init_layer_params(layers, 0, layers.size(), store, rng);
  for (auto* p : store.all())
    if (p->name.find("bias") != std::string::npos) p->value = random_tensor(p->value.shape(), rng);
  const Tensor x = random_tensor({4, 5}, rng);
  Tape t;
  const Tensor& y = t.value(forward_layers(t, t.constant(x), layers, 0, layers.size(), store, ops::Mode::Train));
  std::vector<const Tensor*> ws, bs;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].kind != LayerKind::Dense) continue;
    ws.push_back(&store.get(layer_param_name(i, "weight")).value);
    bs.push_back(&store.get(layer_param_name(i, "bias")).value);
  }
  for (std::int64_t b = 0; b < 4; ++b) {
    std::vector<double> row(5);
    for (std::int64_t i = 0; i < 5; ++i) row[static_cast<std::size_t>(i)] = x[static_cast<std::size_t>(b * 5 + i)];
    const auto expected = dense_chain(row, ws, bs);
    for (std::int64_t o = 0; o < 3; ++o) EXPECT_NEAR(y[static_cast<std::size_t>(b * 3 + o)], expected[static_cast<std::size_t>(o)], 1e-5);
  }
}

TEST(SplitAt, IndexValidation) {
  const auto layers = build_vgg11_like(10, 0.25);
  EXPECT_THROW(split_at(layers, layers.size(), resolution(1), {3, 32, 32}), ValidationError);
  EXPECT_NO_THROW(split_at(layers, layers.size() - 1, resolution(1), {3, 32, 32}));
}

TEST(SplitAt, ZeroCompressesTheImage) {
  const auto m = split_at(build_vgg11_like(10, 0.25), 0, resolution(2), {3, 32, 32});
  EXPECT_EQ(m.split_index, 0u);
  EXPECT_EQ(m.phi_tilde(), 3);
  EXPECT_EQ(m.payload_sample, (Shape{3, 17, 17}));
  auto params = init_split_params(m, 3);
  for (const auto* p : params.client.all()) EXPECT_EQ(p->name.rfind("compress", 0), 0u) << p->name;
}

TEST(SplitAt, FiveLayersOnClient) {
  const auto m = split_at(build_vgg11_like(10, 0.5), 5, resolution(1), {3, 32, 32});
  EXPECT_EQ(m.split_index, 5u);
  auto params = init_split_params(m, 4);
  EXPECT_NE(params.client.find(layer_param_name(4, "weight")), nullptr);
  EXPECT_EQ(params.client.find(layer_param_name(8, "weight")), nullptr);
  EXPECT_NE(params.server.find(layer_param_name(8, "weight")), nullptr);
}

TEST(SplitAt, BypassMatchesUnsplitLogits) {
  const auto layers = build_vgg11_like(10, 0.125);
  std::mt19937_64 data_rng(5);
  const Tensor x = random_tensor({3, 3, 32, 32}, data_rng);
  for (std::size_t n : {0u, 3u, 5u, 9u, 15u, 23u}) {
    const auto m = split_at(layers, n, bypass_config(), {3, 32, 32});
    auto split = init_split_params(m, 6);
    ParameterStore whole;
    std::mt19937_64 rng(6);
    init_layer_params(layers, 0, layers.size(), whole, rng);

    Tape ref;
    const Tensor expected =
        ref.value(forward_layers(ref, ref.constant(x), layers, 0, layers.size(), whole, ops::Mode::Train));

    Tape t;
    const auto out = client_forward(t, t.constant(x), m, split.client, ops::Mode::Train);
    const auto f = t.value(out.f).storage();
    const auto sel = select_channels(t.value(out.l_c), f, static_cast<int>(m.phi()));
    const Var logits = server_forward(t, t.constant(sel.payload), sel.indices, f, m, split.server, ops::Mode::Train);
    EXPECT_LE(max_abs_diff(t.value(logits), expected), 1e-5f) << "n=" << n;
  }
}

TEST(SplitAt, DecompressionRestoresSplitShape) {
  const auto layers = build_vgg11_like(10, 0.125);
  std::mt19937_64 rng(7);
  const Tensor x = random_tensor({2, 3, 32, 32}, rng);
  const auto shapes = infer_shapes(layers, {2, 3, 32, 32});
  for (int r : {1, 2, 3}) {
    for (std::size_t n = 0; n < layers.size(); ++n) {
      if (shapes[n].size() != 4) continue;
      if (shapes[n][2] + 2 * r < 2 + r) continue;  // compression conv does not fit
      const auto m = split_at(layers, n, resolution(r), {3, 32, 32});
      auto params = init_split_params(m, 8);
      Tape t;
      const auto out = client_forward(t, t.constant(x), m, params.client, ops::Mode::Train);
      const auto f = t.value(out.f).storage();
      const auto sel = select_channels(t.value(out.l_c), f, static_cast<int>(m.phi()));
      const Var ld = decompress(t, t.constant(sel.payload), sel.indices, f, m.compression, m.split_sample,
                                params.server, ops::Mode::Train);
      EXPECT_EQ(t.value(ld).shape(), shapes[n]) << "r=" << r << " n=" << n;
    }
  }
}

TEST(SplitAt, PhiDefaultsAndBounds) {
  const auto layers = build_vgg11_like(10, 0.25);
  EXPECT_EQ(split_at(layers, 5, resolution(1, 0), {3, 32, 32}).phi(), 32);
  EXPECT_EQ(split_at(layers, 5, resolution(1, 16), {3, 32, 32}).phi(), 16);
  EXPECT_THROW(split_at(layers, 5, resolution(1, 33), {3, 32, 32}), ValidationError);
}

TEST(Checkpoint, RoundTripKeepsNamesValuesAndBuffers) {
  const auto m = split_at(build_vgg11_like(10, 0.125), 5, resolution(2, 8), {3, 32, 32});
  auto params = init_split_params(m, 9);
  std::mt19937_64 rng(10);
  for (auto* p : params.client.all()) p->value = random_tensor(p->value.shape(), rng);
  const auto path = (std::filesystem::temp_directory_path() / "splitstream_ckpt_roundtrip.bin").string();
  save_split_checkpoint(path, params);
  const auto loaded = load_split_checkpoint(path);
  ASSERT_EQ(loaded.client.size(), params.client.size());
  ASSERT_EQ(loaded.server.size(), params.server.size());
  for (const auto* p : params.client.all()) {
    const auto* q = loaded.client.find(p->name);
    ASSERT_NE(q, nullptr) << p->name;
    EXPECT_EQ(q->value, p->value);
    EXPECT_EQ(q->learnable, p->learnable) << p->name;
  }
  for (const auto* p : params.server.all()) EXPECT_EQ(loaded.server.get(p->name).value, p->value);

  std::ifstream in(path, std::ios::binary);
  char magic[5] = {};
  in.read(magic, 5);
  EXPECT_EQ(std::string(magic, 4), "SPLT");
  EXPECT_EQ(magic[4], 1);
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptFilesRejected) {
  const auto dir = std::filesystem::temp_directory_path();
  const auto bad_magic = (dir / "splitstream_bad_magic.bin").string();
  {
    std::ofstream o(bad_magic, std::ios::binary);
    o << "NOPE\x01";
  }
  EXPECT_THROW(load_checkpoint(bad_magic), FormatError);

  ParameterStore s;
  s.add("w", Tensor({4}, 1.0f));
  const auto good = (dir / "splitstream_truncated.bin").string();
  save_checkpoint(good, {&s}, {""});
  std::filesystem::resize_file(good, std::filesystem::file_size(good) - 3);
  EXPECT_THROW(load_checkpoint(good), FormatError);
  EXPECT_THROW(load_checkpoint((dir / "splitstream_missing_file.bin").string()), FormatError);
  std::filesystem::remove(bad_magic);
  std::filesystem::remove(good);
}

class ClientCompositeGradients : public ::testing::TestWithParam<int> {};

TEST_P(ClientCompositeGradients, InputThroughClientHalfAndCompression) {
  const LayerList layers{LayerSpec::conv(2, 4, 3, 1, 1), LayerSpec::batchnorm(4), LayerSpec::relu(),
                         LayerSpec::conv(4, 4, 3, 1, 1), LayerSpec::relu()};
  const int r = 1 + GetParam() % 3;
  CompressionConfig cfg = resolution(r, 3);
  const auto m = split_at(layers, 4, cfg, {2, 6, 6});
  const auto base = init_split_params(m, 50 + static_cast<std::uint64_t>(GetParam()));
  std::mt19937_64 rng(60 + GetParam());
  // Keep every relu input clear of its kink by more than a probe can move it.
  auto clear_of_kinks = [&](const Tensor& x) {
    ParameterStore scratch = base.client;
    Tape t;
    const Tensor& pre = t.value(forward_layers(t, t.constant(x), m.layers, 0, 2, scratch, ops::Mode::Train));
    for (float v : pre.data())
      if (std::abs(v) < 1e-2f) return false;
    return true;
  };
  Tensor x = random_tensor({2, 2, 6, 6}, rng);
  while (!clear_of_kinks(x)) x = random_tensor({2, 2, 6, 6}, rng);
  std::list<ParameterStore> probes;
  auto res = check_gradients(
      [&](Tape& t, const std::vector<Var>& v) {
        auto& client = probes.emplace_back(base.client);
        const Var l_n = forward_layers(t, v[0], m.layers, 0, m.split_index, client, ops::Mode::Train);
        const Var lc = compress(t, l_n, m.compression, client, ops::Mode::Train).l_c;
        return lc;
      },
      {x}, rng, 3e-3f);
  EXPECT_LE(res.relative_error, 1e-3);
}

INSTANTIATE_TEST_SUITE_P(Seeds, ClientCompositeGradients, ::testing::Range(0, 20));
