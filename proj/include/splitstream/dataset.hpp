#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "splitstream/tensor.hpp"

namespace splitstream {

/// In-memory labelled samples stored contiguously, one sample after another.
struct Dataset {
  Shape sample_shape;  // e.g. [3,32,32] or [features]
  int num_classes = 0;
  std::vector<float> features;
  std::vector<std::int32_t> labels;

  std::size_t size() const { return labels.size(); }
  std::int64_t sample_numel() const { return shape_numel(sample_shape); }

  /// Stacks the listed samples into [n, sample_shape...].
  Tensor batch(std::span<const std::size_t> indices) const;
  std::vector<std::int32_t> batch_labels(std::span<const std::size_t> indices) const;

  /// Throws ValidationError on empty data, ragged storage or labels out of range.
  void validate() const;
};

struct DatasetSplit {
  Dataset train;
  Dataset test;
};

}  // namespace splitstream
