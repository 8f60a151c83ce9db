#include "splitstream/params.hpp"

#include <cmath>

#include "splitstream/errors.hpp"

namespace splitstream {

ParameterStore::ParameterStore(const ParameterStore& other) {
  params_.reserve(other.params_.size());
  for (const auto& p : other.params_) params_.push_back(std::make_unique<Parameter>(*p));
}

ParameterStore& ParameterStore::operator=(const ParameterStore& other) {
  if (this != &other) {
    ParameterStore copy(other);
    *this = std::move(copy);
  }
  return *this;
}

Parameter& ParameterStore::add(std::string name, Tensor value, bool learnable) {
  if (find(name)) throw ValidationError("duplicate parameter name '" + name + "'");
  params_.push_back(std::make_unique<Parameter>(std::move(name), std::move(value), learnable));
  return *params_.back();
}

Parameter* ParameterStore::find(std::string_view name) {
  for (auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

const Parameter* ParameterStore::find(std::string_view name) const {
  for (const auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

Parameter& ParameterStore::get(std::string_view name) {
  if (auto* p = find(name)) return *p;
  throw ValidationError("no parameter named '" + std::string(name) + "'");
}

const Parameter& ParameterStore::get(std::string_view name) const {
  if (const auto* p = find(name)) return *p;
  throw ValidationError("no parameter named '" + std::string(name) + "'");
}

std::vector<Parameter*> ParameterStore::all() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParameterStore::all() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<Parameter*> ParameterStore::learnable() {
  std::vector<Parameter*> out;
  for (auto& p : params_)
    if (p->learnable) out.push_back(p.get());
  return out;
}

std::size_t ParameterStore::copy_values_from(const ParameterStore& other) {
  std::size_t n = 0;
  for (const auto& src : other.params_) {
    Parameter* dst = find(src->name);
    if (!dst) continue;
    if (dst->value.shape() != src->value.shape()) {
      throw DimensionError("parameter '" + src->name + "' shape " + shape_str(src->value.shape()) +
                           " does not match " + shape_str(dst->value.shape()));
    }
    dst->value = src->value;
    ++n;
  }
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

void sgd_step(std::span<Parameter* const> params, float lr, float weight_decay) {
  if (!(lr > 0.0f)) throw ValidationError("learning rate must be positive");
  if (weight_decay < 0.0f) throw ValidationError("weight decay must be non-negative");
  for (Parameter* p : params) {
    if (!p->learnable) continue;
    if (!p->has_grad) throw StateError("parameter '" + p->name + "' has no gradient");
  }
  for (Parameter* p : params) {
    if (!p->learnable) continue;
    auto v = p->value.data();
    auto g = p->grad.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * (g[i] + weight_decay * v[i]);
    p->zero_grad();
  }
}

void sgd_step(ParameterStore& store, float lr, float weight_decay) {
  const auto ps = store.learnable();
  sgd_step(ps, lr, weight_decay);
}

Tensor kaiming_uniform(Shape shape, std::int64_t fan_in, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  const float bound = std::sqrt(6.0f / static_cast<float>(std::max<std::int64_t>(fan_in, 1)));
  std::uniform_real_distribution<float> dist(-bound, bound);
  for (auto& e : t.data()) e = dist(rng);
  return t;
}

}  // namespace splitstream
