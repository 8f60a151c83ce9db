#include "splitstream/dataset.hpp"

#include <algorithm>
#include <string>

#include "splitstream/errors.hpp"

namespace splitstream {

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  Shape s{static_cast<std::int64_t>(indices.size())};
  s.insert(s.end(), sample_shape.begin(), sample_shape.end());
  Tensor out(s);
  const auto n = static_cast<std::size_t>(sample_numel());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const float* src = features.data() + indices[i] * n;
    std::copy(src, src + n, out.raw() + i * n);
  }
  return out;
}

std::vector<std::int32_t> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<std::int32_t> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels[i]);
  return out;
}

void Dataset::validate() const {
  if (labels.empty()) throw ValidationError("dataset is empty");
  if (features.size() != labels.size() * static_cast<std::size_t>(sample_numel())) {
    throw ValidationError("dataset storage does not match " + std::to_string(labels.size()) + " samples of " +
                          shape_str(sample_shape));
  }
  if (num_classes < 2) throw ValidationError("dataset needs at least two classes");
  for (auto y : labels)
    if (y < 0 || y >= num_classes) throw ValidationError("label " + std::to_string(y) + " out of range");
}

}  // namespace splitstream
