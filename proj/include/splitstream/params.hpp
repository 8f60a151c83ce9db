#pragma once

#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "splitstream/tape.hpp"

namespace splitstream {

/// Owns named parameters with stable addresses. Insertion order is the
/// iteration (and checkpoint) order.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore& other);
  ParameterStore& operator=(const ParameterStore& other);
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  Parameter& add(std::string name, Tensor value, bool learnable = true);
  Parameter* find(std::string_view name);
  const Parameter* find(std::string_view name) const;
  /// Throws ValidationError when absent.
  Parameter& get(std::string_view name);
  const Parameter& get(std::string_view name) const;

  std::size_t size() const { return params_.size(); }
  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::vector<Parameter*> learnable();

  /// Copy values of every parameter of `other` whose name exists here.
  /// Shapes must agree. Returns the number copied.
  std::size_t copy_values_from(const ParameterStore& other);

  void zero_grad();

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

/// p <- p - lr * (grad + weight_decay * p), then clears grads.
/// A learnable parameter without a gradient is a StateError.
void sgd_step(std::span<Parameter* const> params, float lr, float weight_decay);
void sgd_step(ParameterStore& store, float lr, float weight_decay);

/// He/Kaiming uniform: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
Tensor kaiming_uniform(Shape shape, std::int64_t fan_in, std::mt19937_64& rng);

}  // namespace splitstream
