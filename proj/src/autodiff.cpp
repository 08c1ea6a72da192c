#include "rcalign/autodiff.hpp"

#include "rcalign/error.hpp"

namespace rcalign {

const Tensor& Var::value() const { return tape->value(id); }

bool Var::requires_grad() const { return tape->requires_grad(id); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node node;
  node.owned = std::move(value);
  node.requires_grad = requires_grad && grad_enabled_;
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::external(const Tensor& value, bool requires_grad) {
  Node node;
  node.alias = &value;
  node.requires_grad = requires_grad && grad_enabled_;
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  Node node;
  node.owned = std::move(value);
  if (grad_enabled_) {
    for (const Var& in : inputs) {
      if (in.tape != this) throw UsageError("operand recorded on a different tape");
      if (nodes_[in.id].requires_grad) node.requires_grad = true;
    }
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tensor& Tape::value(std::uint32_t id) const {
  const Node& n = nodes_[id];
  return n.alias != nullptr ? *n.alias : n.owned;
}

std::span<const double> Tape::grad(Var v) const { return nodes_[v.id].grad; }

std::vector<double>& Tape::grad_buffer(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(value(id).size(), 0.0);
  return n.grad;
}

void Tape::backward(Var root) {
  if (root.tape != this) throw UsageError("backward root belongs to a different tape");
  if (value(root.id).size() != 1) {
    throw UsageError("backward requires a scalar root, got shape " +
                     shape_str(value(root.id).shape()));
  }
  if (!nodes_[root.id].requires_grad) return;
  grad_buffer(root.id)[0] += 1.0;
  for (std::uint32_t id = root.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.backward || n.grad.empty()) continue;
    n.backward(*this, id);
  }
}

}  // namespace rcalign
