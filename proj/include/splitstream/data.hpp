#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "splitstream/dataset.hpp"

namespace splitstream {

inline constexpr std::size_t kCifarRecordSize = 3073;
inline constexpr std::size_t kCifarImageBytes = 3072;

struct ChannelStats {
  std::array<double, 3> mean{};
  std::array<double, 3> stddev{};
};

/// Per-channel mean and standard deviation of [N,3,H,W] images in [0,1].
ChannelStats compute_channel_stats(const Dataset& images);

/// Reads one or more CIFAR-10 binary files (1 label byte + 3072 pixel
/// bytes per record). Pixels scale to [0,1]; no normalization. FormatError
/// when a file size is not a multiple of 3073. Keeps only labels in
/// `subset` when it is non-empty; labels are then remapped to their
/// position in `subset`.
Dataset read_cifar10_binary(const std::vector<std::string>& files, const std::vector<int>& subset = {});

/// Loads data_batch_*.bin and test_batch.bin from `dir`, normalizes both
/// splits by the training statistics. The statistics are cached in `dir`
/// per subset and reused on later loads.
DatasetSplit load_cifar10_binary(const std::string& dir, const std::vector<int>& subset = {},
                                 ChannelStats* stats = nullptr);

/// Writes records in the CIFAR-10 binary layout.
void write_cifar10_binary(const std::string& path, const std::vector<std::uint8_t>& labels,
                          const std::vector<std::uint8_t>& pixels);

/// Procedural 32x32 RGB images: a textured object per class over a
/// cluttered background, written as data_batch_1.bin and test_batch.bin.
struct ImageSynthSpec {
  int classes = 2;
  int train_per_class = 2000;
  int test_per_class = 500;
  std::uint64_t seed = 7;
  double noise = 0.12;
};
void generate_synthetic_cifar(const std::string& dir, const ImageSynthSpec& spec);

/// Gaussian blobs with unit variance. Class k is centred `separation`
/// standard deviations out along axis k, so needs dims >= classes.
Dataset synth_dataset(int classes, int dims, int n_per_class, std::uint64_t seed, double separation = 3.0);
/// Mean of class k used by synth_dataset.
std::vector<float> synth_class_mean(int k, int classes, int dims, double separation = 3.0);

/// Deterministic shuffled split.
DatasetSplit split_dataset(const Dataset& all, double test_fraction, std::uint64_t seed);

/// IDX (MNIST-style) unsigned-byte images and labels. Images load as
/// [1,H,W] scaled to [0,1].
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

enum class DatasetKind { Cifar10Binary, SyntheticImages, Idx, Synthetic };

struct DatasetSpec {
  DatasetKind kind = DatasetKind::SyntheticImages;
  std::string path;  // dataset directory; SPLITSTREAM_DATA overrides it when set
  std::vector<int> subset;
  // Synthetic generators.
  int classes = 2;
  int dims = 16;
  int train_per_class = 2000;
  int test_per_class = 500;
  std::uint64_t seed = 7;
  double noise = 0.12;
};

const char* dataset_kind_name(DatasetKind k);
DatasetKind parse_dataset_kind(const std::string& s);

/// Resolves the dataset directory, generating synthetic image files there on
/// first use.
DatasetSplit load_dataset(const DatasetSpec& spec);
std::string resolve_data_dir(const DatasetSpec& spec);

}  // namespace splitstream
