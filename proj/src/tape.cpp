#include "splitstream/tape.hpp"

#include "splitstream/errors.hpp"

namespace splitstream {

Tape::Node& Tape::node(Var v) {
  if (v.id >= nodes_.size()) throw StateError("variable does not belong to this tape");
  return nodes_[v.id];
}

const Tape::Node& Tape::node(Var v) const {
  if (v.id >= nodes_.size()) throw StateError("variable does not belong to this tape");
  return nodes_[v.id];
}

Var Tape::push(Node n) {
  if (consumed_) throw StateError("tape already consumed by backward; record a new forward");
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::leaf(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::parameter(Parameter& p) {
  Node n;
  n.value = p.value;
  n.requires_grad = p.learnable;
  n.param = &p;
  return push(std::move(n));
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  for (Var in : inputs) n.requires_grad = n.requires_grad || node(in).requires_grad;
  if (n.requires_grad) n.backward = std::move(fn);
  return push(std::move(n));
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

Tensor& Tape::mutable_value(Var v) { return node(v).value; }

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

Tensor Tape::grad(Var v) const {
  const Node& n = node(v);
  if (n.has_grad) return n.grad;
  return Tensor(n.value.shape());
}

Tensor& Tape::grad_slot(Var v) {
  Node& n = node(v);
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape());
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::accumulate(Var v, const Tensor& g) {
  if (!node(v).requires_grad) return;
  grad_slot(v).add_(g);
}

void Tape::backward(Var loss) {
  if (value(loss).size() != 1) {
    throw ValidationError("backward needs a scalar loss, got shape " + shape_str(value(loss).shape()));
  }
  backward({Seed{loss, Tensor(value(loss).shape(), 1.0f)}});
}

void Tape::backward(std::vector<Seed> seeds) {
  if (consumed_) throw StateError("backward called twice on the same tape");
  for (auto& s : seeds) {
    if (s.grad.shape() != value(s.var).shape()) {
      throw DimensionError("seed gradient " + shape_str(s.grad.shape()) + " does not match value " +
                           shape_str(value(s.var).shape()));
    }
    accumulate(s.var, s.grad);
  }
  run_backward();
}

void Tape::run_backward() {
  consumed_ = true;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    // The callback may touch earlier nodes only; nodes_ is not resized here.
    n.backward(*this, n.grad);
  }
  for (Node& n : nodes_) {
    if (!n.param || !n.has_grad || !n.param->learnable) continue;
    Parameter& p = *n.param;
    if (p.grad.shape() != p.value.shape()) p.grad = Tensor(p.value.shape());
    p.grad.add_(n.grad);
    p.has_grad = true;
  }
}

}  // namespace splitstream
