#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "inrseg/tensor.hpp"

namespace inrseg {

// Handle into a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode gradient tape. Operations append nodes in execution order;
// backward() walks them in exact reverse. A tensor consumed by k ops receives
// the sum of k gradient contributions because every consumer accumulates into
// the same buffer. Leaves may alias persistent parameter tensors, in which
// case their gradients land directly in the parameter's grad buffer.
//
// Tapes are single-threaded and short-lived: one tape per forward/backward.
class Tape {
 public:
  // Leaf aliasing a persistent tensor. requires_grad marks trainable leaves.
  Var leaf(TensorPtr t, bool requires_grad) {
    if (!t) raise_invariant("null tensor bound to tape");
    check_finite(*t);
    nodes_.push_back(Node{std::move(t), requires_grad, {}});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  // Leaf owning a constant value (inputs, targets, fixed encodings).
  Var constant(Tensor t) { return leaf(make_tensor(std::move(t)), false); }

  // Interior node produced by an op.
  Var push(Tensor value, bool needs_grad, std::function<void(Tape&)> backward) {
    check_finite(value);
    nodes_.push_back(Node{make_tensor(std::move(value)), needs_grad,
                          needs_grad ? std::move(backward) : std::function<void(Tape&)>{}});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor& value(Var v) const { return *nodes_[check(v)].value; }
  Tensor& value_mut(Var v) { return *nodes_[check(v)].value; }
  bool needs_grad(Var v) const { return nodes_[check(v)].needs_grad; }

  bool has_grad(Var v) const { return nodes_[check(v)].value->has_grad(); }
  const Array& grad(Var v) const { return nodes_[check(v)].value->grad(); }

  // Accumulate a gradient contribution into v (no-op when v doesn't need one).
  void accumulate(Var v, const Array& g) {
    Node& n = nodes_[check(v)];
    if (!n.needs_grad) return;
    if (g.size() != n.value->size())
      raise_invalid_shape("gradient size mismatch on tape node");
    n.value->ensure_grad();
    n.value->grad() += g;
  }

  // Seeds d(loss)/d(loss)=1 and sweeps the tape in reverse recording order.
  void backward(Var loss) {
    Node& ln = nodes_[check(loss)];
    if (ln.value->size() != 1) raise_invalid_shape("backward() expects a scalar loss");
    if (!ln.needs_grad) return;  // nothing trainable upstream
    ln.value->ensure_grad();
    ln.value->grad()[0] += 1.0;
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backward && n.needs_grad && n.value->has_grad()) n.backward(*this);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    TensorPtr value;
    bool needs_grad;
    std::function<void(Tape&)> backward;
  };

  std::size_t check(Var v) const {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
      raise_invariant("dangling tape handle");
    return static_cast<std::size_t>(v.id);
  }

  static void check_finite(const Tensor& t) {
    if (!t.all_finite()) raise_numeric("non-finite value recorded on tape");
  }

  std::vector<Node> nodes_;
};

}  // namespace inrseg
