#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "rcalign/tensor.hpp"

namespace rcalign {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
// owning tape is alive and has not been cleared.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  Shape shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const;
};

// Define-by-run reverse-mode tape. Nodes are appended in execution order, so
// operands always precede their consumers and a single reverse sweep is a
// valid topological traversal.
class Tape {
 public:
  // Receives the tape and the id of the node whose gradient is being
  // propagated. The node's own gradient is available via grad_of(self).
  using BackwardFn = std::function<void(Tape&, std::uint32_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Owned leaf.
  Var leaf(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  // Leaf that aliases caller-owned storage; the tensor must outlive the tape.
  Var external(const Tensor& value, bool requires_grad);

  // Appends an op result. requires_grad is inferred from the inputs; the
  // backward rule is dropped when no input needs a gradient.
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }

  const Tensor& value(std::uint32_t id) const;
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }

  // Gradient accumulated on a node; empty when none was propagated.
  std::span<const double> grad(Var v) const;
  // Mutable gradient buffer, zero-initialized on first access.
  std::vector<double>& grad_buffer(std::uint32_t id);
  std::span<const double> grad_of(std::uint32_t id) const { return nodes_[id].grad; }

  // Seeds d(root)/d(root) = 1 and sweeps the tape in reverse.
  void backward(Var root);

  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  bool grad_enabled() const { return grad_enabled_; }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }
  // Drops every node recorded after the first `count`; earlier Vars stay valid.
  void truncate(std::size_t count) {
    if (count < nodes_.size()) nodes_.resize(count);
  }

 private:
  struct Node {
    Tensor owned;
    const Tensor* alias = nullptr;
    std::vector<double> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  // deque: appending never moves existing nodes, so references returned by
  // value() stay valid while later ops are recorded.
  std::deque<Node> nodes_;
  bool grad_enabled_ = true;
};

}  // namespace rcalign
