#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "splitstream/tensor.hpp"

namespace splitstream {

/// A named trainable (or buffer) tensor. Gradients are accumulated by
/// Tape::backward and cleared by sgd_step.
struct Parameter {
  Parameter() = default;
  Parameter(std::string name_, Tensor value_, bool learnable_ = true)
      : name(std::move(name_)), value(std::move(value_)), learnable(learnable_) {}

  std::string name;
  Tensor value;
  Tensor grad;
  bool learnable = true;
  bool has_grad = false;

  void zero_grad() {
    if (!grad.empty()) grad.fill(0.0f);
    has_grad = false;
  }
};

/// Handle to a value recorded on a Tape.
struct Var {
  std::uint32_t id = 0;
};

/// Ordered record of executed operations. Backward replays them in reverse
/// and may run exactly once; a second call is a StateError.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  struct Seed {
    Var var;
    Tensor grad;
  };

  /// Leaf that never receives a gradient.
  Var constant(Tensor value);
  /// Leaf whose gradient is readable through grad() after backward.
  Var leaf(Tensor value);
  /// Leaf bound to a Parameter; backward adds into p.grad when p is learnable.
  Var parameter(Parameter& p);

  /// Used by ops: appends a node. The node requires grad iff any input does;
  /// fn is dropped otherwise.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);

  const Tensor& value(Var v) const;
  Tensor& mutable_value(Var v);
  bool requires_grad(Var v) const;

  /// Gradient computed for v by backward; zeros when nothing reached v.
  Tensor grad(Var v) const;

  /// Add g into the gradient slot of v (no-op when v does not require grad).
  void accumulate(Var v, const Tensor& g);
  /// Gradient slot of v, allocated with zeros on first use.
  Tensor& grad_slot(Var v);

  /// loss must be a single-element tensor; seeds it with 1.
  void backward(Var loss);
  /// Seeds arbitrary outputs with given gradients (split-learning client side).
  void backward(std::vector<Seed> seeds);

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };

  Node& node(Var v);
  const Node& node(Var v) const;
  Var push(Node n);
  void run_backward();

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

}  // namespace splitstream
