#include "splitstream/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "splitstream/errors.hpp"

namespace splitstream {

namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string subset_key(const std::vector<int>& subset) {
  if (subset.empty()) return "all";
  std::string key;
  for (int c : subset) key += (key.empty() ? "" : "_") + std::to_string(c);
  return key;
}

void normalize(Dataset& d, const ChannelStats& s) {
  const auto plane = static_cast<std::size_t>(d.sample_shape[1] * d.sample_shape[2]);
  for (std::size_t n = 0; n < d.size(); ++n)
    for (std::size_t c = 0; c < 3; ++c) {
      float* p = d.features.data() + (n * 3 + c) * plane;
      const auto m = static_cast<float>(s.mean[c]);
      const auto inv = static_cast<float>(1.0 / s.stddev[c]);
      for (std::size_t i = 0; i < plane; ++i) p[i] = (p[i] - m) * inv;
    }
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

// ---- procedural images ----

constexpr int kSide = 32;

struct Rgb {
  float v[3];
};

Rgb random_color(std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.05f, 0.95f);
  return {{u(rng), u(rng), u(rng)}};
}

// Inside test for the class shapes, in the object's rotated frame.
bool inside(int shape, float x, float y, float radius) {
  const float u = x / radius, v = y / radius;
  switch (shape % 5) {
    case 0: return u * u / 1.0f + v * v / 0.36f <= 1.0f;           // ellipse
    case 1: return std::abs(u) <= 0.85f && std::abs(v) <= 0.6f;    // box
    case 2: return v <= 0.7f && v >= 1.4f * std::abs(u) - 0.7f;    // triangle
    case 3: {                                                      // ring
      const float r2 = u * u + v * v;
      return r2 <= 1.0f && r2 >= 0.3f;
    }
    default: return std::abs(u) <= 0.25f || std::abs(v) <= 0.25f ? u * u + v * v <= 1.0f : false;  // cross
  }
}

struct Object {
  int shape;
  float angle;      // stripe orientation
  float rotation;   // shape rotation
  float cx, cy, radius, period, phase, alpha;
  Rgb color;
};

void draw(std::vector<float>& img, const Object& o) {
  const float cr = std::cos(o.rotation), sr = std::sin(o.rotation);
  const float ca = std::cos(o.angle), sa = std::sin(o.angle);
  for (int y = 0; y < kSide; ++y)
    for (int x = 0; x < kSide; ++x) {
      const float dx = static_cast<float>(x) - o.cx, dy = static_cast<float>(y) - o.cy;
      if (!inside(o.shape, cr * dx + sr * dy, -sr * dx + cr * dy, o.radius)) continue;
      const float stripe =
          0.5f + 0.5f * std::sin(2.0f * std::numbers::pi_v<float> * (ca * dx + sa * dy) / o.period + o.phase);
      const float shade = 0.35f + 0.65f * stripe;
      for (int c = 0; c < 3; ++c) {
        float& p = img[static_cast<std::size_t>((c * kSide + y) * kSide + x)];
        p = (1.0f - o.alpha) * p + o.alpha * o.color.v[c] * shade;
      }
    }
}

// Ten object kinds: shape = kind % 5, stripe orientation = kind / 5. Class
// k draws its object from the kinds labelled k; faint distractors come from
// any labelled kind. Two classes use kinds 0 and 6 only.
constexpr int kKinds = 10;

int kind_label(int kind, int classes) {
  if (classes == 2) return kind == 0 ? 0 : kind == 6 ? 1 : -1;
  return kind % classes;
}

Object make_object(int kind, float radius_lo, float radius_hi, float alpha_lo, float alpha_hi, float spread,
                   std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  auto in = [&](float lo, float hi) { return lo + (hi - lo) * u(rng); };
  const float pi = std::numbers::pi_v<float>;
  Object o;
  o.shape = kind % 5;
  o.angle = pi * (kind / 5 == 0 ? 0.125f : 0.625f) + in(-0.3f, 0.3f);
  o.rotation = in(-0.35f, 0.35f);
  o.cx = 15.5f + in(-spread, spread);
  o.cy = 15.5f + in(-spread, spread);
  o.radius = in(radius_lo, radius_hi);
  o.period = in(3.5f, 6.0f);
  o.phase = in(0.0f, 2.0f * pi);
  o.alpha = in(alpha_lo, alpha_hi);
  o.color = random_color(rng);
  return o;
}

std::vector<float> render(int cls, int classes, double noise, std::mt19937_64& rng) {
  std::vector<float> img(static_cast<std::size_t>(3 * kSide * kSide));
  const Rgb c0 = random_color(rng), c1 = random_color(rng);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  const float a = 2.0f * std::numbers::pi_v<float> * u(rng);
  for (int y = 0; y < kSide; ++y)
    for (int x = 0; x < kSide; ++x) {
      const float t = std::clamp(0.5f + ((x - 15.5f) * std::cos(a) + (y - 15.5f) * std::sin(a)) / 45.0f, 0.0f, 1.0f);
      for (int c = 0; c < 3; ++c) img[static_cast<std::size_t>((c * kSide + y) * kSide + x)] = (1 - t) * c0.v[c] + t * c1.v[c];
    }
  std::vector<int> used, own;
  for (int k = 0; k < kKinds; ++k) {
    if (kind_label(k, classes) < 0) continue;
    used.push_back(k);
    if (kind_label(k, classes) == cls) own.push_back(k);
  }
  std::uniform_int_distribution<std::size_t> pick_any(0, used.size() - 1), pick_own(0, own.size() - 1);
  const int distractors = 1 + static_cast<int>(u(rng) * 2.0f);
  for (int i = 0; i < distractors; ++i) draw(img, make_object(used[pick_any(rng)], 3.0f, 6.0f, 0.2f, 0.5f, 11.0f, rng));
  draw(img, make_object(own[pick_own(rng)], 7.0f, 12.0f, 0.55f, 0.95f, 5.0f, rng));
  std::normal_distribution<float> g(0.0f, static_cast<float>(noise));
  for (auto& p : img) p = std::clamp(p + g(rng), 0.0f, 1.0f);
  return img;
}

void write_split(const std::string& path, int classes, int per_class, double noise, std::mt19937_64& rng) {
  std::vector<std::uint8_t> labels, pixels;
  for (int i = 0; i < per_class * classes; ++i) {
    const int cls = i % classes;
    labels.push_back(static_cast<std::uint8_t>(cls));
    for (float p : render(cls, classes, noise, rng)) pixels.push_back(static_cast<std::uint8_t>(std::lround(p * 255.0f)));
  }
  write_cifar10_binary(path, labels, pixels);
}

}  // namespace

ChannelStats compute_channel_stats(const Dataset& d) {
  if (d.sample_shape.size() != 3 || d.sample_shape[0] != 3) throw DimensionError("channel stats need [3,H,W] samples");
  const auto plane = static_cast<std::size_t>(d.sample_shape[1] * d.sample_shape[2]);
  ChannelStats s;
  for (std::size_t c = 0; c < 3; ++c) {
    double sum = 0.0, sq = 0.0;
    for (std::size_t n = 0; n < d.size(); ++n) {
      const float* p = d.features.data() + (n * 3 + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        sum += p[i];
        sq += static_cast<double>(p[i]) * p[i];
      }
    }
    const double count = static_cast<double>(d.size() * plane);
    s.mean[c] = sum / count;
    s.stddev[c] = std::sqrt(std::max(1e-12, sq / count - s.mean[c] * s.mean[c]));
  }
  return s;
}

Dataset read_cifar10_binary(const std::vector<std::string>& files, const std::vector<int>& subset) {
  Dataset d;
  d.sample_shape = {3, 32, 32};
  d.num_classes = subset.empty() ? 10 : static_cast<int>(subset.size());
  for (const auto& path : files) {
    const auto bytes = read_file(path);
    if (bytes.empty() || bytes.size() % kCifarRecordSize != 0) {
      throw FormatError(path + ": " + std::to_string(bytes.size()) + " bytes is not a whole number of " +
                        std::to_string(kCifarRecordSize) + "-byte records");
    }
    for (std::size_t at = 0; at < bytes.size(); at += kCifarRecordSize) {
      int label = bytes[at];
      if (label > 9) throw FormatError(path + ": label byte " + std::to_string(label) + " out of range");
      if (!subset.empty()) {
        const auto it = std::find(subset.begin(), subset.end(), label);
        if (it == subset.end()) continue;
        label = static_cast<int>(it - subset.begin());
      }
      d.labels.push_back(label);
      for (std::size_t i = 1; i <= kCifarImageBytes; ++i) d.features.push_back(bytes[at + i] / 255.0f);
    }
  }
  return d;
}

DatasetSplit load_cifar10_binary(const std::string& dir, const std::vector<int>& subset, ChannelStats* stats) {
  std::vector<std::string> train_files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name.rfind("data_batch_", 0) == 0 && e.path().extension() == ".bin") train_files.push_back(e.path().string());
  }
  std::sort(train_files.begin(), train_files.end());
  const auto test_file = (fs::path(dir) / "test_batch.bin").string();
  if (train_files.empty() || !fs::exists(test_file)) {
    throw FormatError(dir + " does not hold data_batch_*.bin and test_batch.bin");
  }
  DatasetSplit split{read_cifar10_binary(train_files, subset), read_cifar10_binary({test_file}, subset)};
  split.train.validate();
  split.test.validate();

  const auto cache = fs::path(dir) / ("channel_stats_" + subset_key(subset) + ".json");
  ChannelStats s;
  if (fs::exists(cache)) {
    std::ifstream in(cache);
    const auto j = nlohmann::json::parse(in);
    s.mean = j.at("mean").get<std::array<double, 3>>();
    s.stddev = j.at("std").get<std::array<double, 3>>();
  } else {
    s = compute_channel_stats(split.train);
    std::ofstream out(cache);
    out << nlohmann::json{{"mean", s.mean}, {"std", s.stddev}}.dump(2) << "\n";
  }
  normalize(split.train, s);
  normalize(split.test, s);
  if (stats) *stats = s;
  return split;
}

void write_cifar10_binary(const std::string& path, const std::vector<std::uint8_t>& labels,
                          const std::vector<std::uint8_t>& pixels) {
  if (pixels.size() != labels.size() * kCifarImageBytes) throw ValidationError("pixel count does not match labels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path);
  for (std::size_t n = 0; n < labels.size(); ++n) {
    out.put(static_cast<char>(labels[n]));
    out.write(reinterpret_cast<const char*>(pixels.data() + n * kCifarImageBytes), kCifarImageBytes);
  }
}

void generate_synthetic_cifar(const std::string& dir, const ImageSynthSpec& spec) {
  if (spec.classes < 2 || spec.classes > 10) throw ValidationError("synthetic images support 2..10 classes");
  if (spec.train_per_class < 1 || spec.test_per_class < 1) throw ValidationError("per-class counts must be positive");
  fs::create_directories(dir);
  std::mt19937_64 rng(spec.seed);
  write_split((fs::path(dir) / "data_batch_1.bin").string(), spec.classes, spec.train_per_class, spec.noise, rng);
  write_split((fs::path(dir) / "test_batch.bin").string(), spec.classes, spec.test_per_class, spec.noise, rng);
}

std::vector<float> synth_class_mean(int k, int classes, int dims, double separation) {
  if (classes < 2) throw ValidationError("need at least two classes");
  if (dims < classes) throw ValidationError("blob generator needs dims >= classes");
  std::vector<float> m(static_cast<std::size_t>(dims), 0.0f);
  m[static_cast<std::size_t>(k)] = static_cast<float>(separation);
  return m;
}

Dataset synth_dataset(int classes, int dims, int n_per_class, std::uint64_t seed, double separation) {
  if (n_per_class < 1) throw ValidationError("n_per_class must be positive");
  Dataset d;
  d.sample_shape = {dims};
  d.num_classes = classes;
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g;
  std::vector<std::vector<float>> means;
  for (int k = 0; k < classes; ++k) means.push_back(synth_class_mean(k, classes, dims, separation));
  for (int i = 0; i < n_per_class * classes; ++i) {
    const int k = i % classes;
    d.labels.push_back(k);
    for (int j = 0; j < dims; ++j) d.features.push_back(means[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)] + g(rng));
  }
  return d;
}

DatasetSplit split_dataset(const Dataset& all, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ValidationError("test fraction must be in (0,1)");
  std::vector<std::size_t> order(all.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), std::mt19937_64(seed));
  const auto n_test = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(test_fraction * all.size())));
  DatasetSplit s;
  for (auto* part : {&s.train, &s.test}) {
    part->sample_shape = all.sample_shape;
    part->num_classes = all.num_classes;
  }
  const std::vector<std::size_t> test_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  const std::vector<std::size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  s.test.features = all.batch(test_idx).storage();
  s.test.labels = all.batch_labels(test_idx);
  s.train.features = all.batch(train_idx).storage();
  s.train.labels = all.batch_labels(train_idx);
  return s;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  if (img.size() < 16 || read_be32(img, 0) != 0x00000803) throw FormatError(images_path + " is not an IDX3 ubyte file");
  if (lab.size() < 8 || read_be32(lab, 0) != 0x00000801) throw FormatError(labels_path + " is not an IDX1 ubyte file");
  const std::size_t n = read_be32(img, 4), h = read_be32(img, 8), w = read_be32(img, 12);
  if (img.size() != 16 + n * h * w) throw FormatError(images_path + ": size does not match its header");
  if (read_be32(lab, 4) != n || lab.size() != 8 + n) throw FormatError(labels_path + ": count does not match images");
  Dataset d;
  d.sample_shape = {1, static_cast<std::int64_t>(h), static_cast<std::int64_t>(w)};
  d.features.reserve(n * h * w);
  for (std::size_t i = 16; i < img.size(); ++i) d.features.push_back(img[i] / 255.0f);
  int max_label = 0;
  for (std::size_t i = 8; i < lab.size(); ++i) {
    d.labels.push_back(lab[i]);
    max_label = std::max<int>(max_label, lab[i]);
  }
  d.num_classes = max_label + 1;
  return d;
}

const char* dataset_kind_name(DatasetKind k) {
  switch (k) {
    case DatasetKind::Cifar10Binary: return "cifar10-binary";
    case DatasetKind::SyntheticImages: return "synthetic-images";
    case DatasetKind::Idx: return "idx";
    case DatasetKind::Synthetic: return "synthetic";
  }
  return "?";
}

DatasetKind parse_dataset_kind(const std::string& s) {
  for (auto k : {DatasetKind::Cifar10Binary, DatasetKind::SyntheticImages, DatasetKind::Idx, DatasetKind::Synthetic})
    if (s == dataset_kind_name(k)) return k;
  throw ValidationError("unknown dataset kind '" + s + "'");
}

std::string resolve_data_dir(const DatasetSpec& spec) {
  std::string root = spec.path;
  if (const char* env = std::getenv("SPLITSTREAM_DATA"); env && *env) root = env;
  if (root.empty()) root = "data";
  if (spec.kind != DatasetKind::SyntheticImages) return root;
  std::ostringstream name;
  name << "synth-images-c" << spec.classes << "-n" << spec.train_per_class << "x" << spec.test_per_class << "-s"
       << spec.seed << "-z" << std::lround(spec.noise * 1000);
  return (fs::path(root) / name.str()).string();
}

DatasetSplit load_dataset(const DatasetSpec& spec) {
  switch (spec.kind) {
    case DatasetKind::Cifar10Binary:
      return load_cifar10_binary(resolve_data_dir(spec), spec.subset);
    case DatasetKind::SyntheticImages: {
      const auto dir = resolve_data_dir(spec);
      if (!fs::exists(fs::path(dir) / "test_batch.bin")) {
        generate_synthetic_cifar(dir, {spec.classes, spec.train_per_class, spec.test_per_class, spec.seed, spec.noise});
      }
      auto subset = spec.subset;
      if (subset.empty())
        for (int c = 0; c < spec.classes; ++c) subset.push_back(c);
      return load_cifar10_binary(dir, subset);
    }
    case DatasetKind::Idx: {
      const fs::path dir = resolve_data_dir(spec);
      DatasetSplit s{load_idx((dir / "train-images-idx3-ubyte").string(), (dir / "train-labels-idx1-ubyte").string()),
                     load_idx((dir / "t10k-images-idx3-ubyte").string(), (dir / "t10k-labels-idx1-ubyte").string())};
      s.test.num_classes = s.train.num_classes = std::max(s.train.num_classes, s.test.num_classes);
      return s;
    }
    case DatasetKind::Synthetic:
      return {synth_dataset(spec.classes, spec.dims, spec.train_per_class, spec.seed),
              synth_dataset(spec.classes, spec.dims, spec.test_per_class, spec.seed + 1)};
  }
  throw ValidationError("unknown dataset kind");
}

}  // namespace splitstream
