#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <stdexcept>
#include <utility>
#include <vector>

#include "congeal/tensor.hpp"

namespace congeal {

template <typename T>
class Tape;

// Handle to a value recorded on a tape. Cheap to copy.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
  int dim(int i) const { return value().dim(i); }
  std::size_t size() const { return value().size(); }
};

struct TapeError : std::logic_error {
  using std::logic_error::logic_error;
};

// Records operations in execution order; backward() replays them in reverse.
// A tape supports exactly one backward pass.
template <typename T>
class Tape {
 public:
  // Called with the gradient flowing into the node's output.
  using BackwardFn = std::function<void(Tape&, const std::vector<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Binds an external tensor. After backward() its grad() holds d loss / d tensor
  // when requires_grad() is set.
  Var<T> leaf(Tensor<T>& tensor) {
    check_open();
    if (!tensor.all_finite()) throw NonFiniteError("non-finite value in leaf tensor " + shape_str(tensor.shape()));
    Node& node = nodes_.emplace_back();
    node.bound = &tensor;
    node.needs_grad = tensor.requires_grad();
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  Var<T> constant(Tensor<T> value) {
    check_open();
    if (!value.all_finite()) throw NonFiniteError("non-finite value in constant " + shape_str(value.shape()));
    Node& node = nodes_.emplace_back();
    node.owned = std::move(value);
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  // Appends an operation result. The node needs a gradient when any input does.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward) {
    check_open();
    if (!value.all_finite()) throw NonFiniteError("operation produced non-finite values " + shape_str(value.shape()));
    bool needs = false;
    for (const Var<T>& in : inputs) {
      if (in.tape != this) throw TapeError("operand recorded on a different tape");
      needs = needs || nodes_[static_cast<std::size_t>(in.id)].needs_grad;
    }
    Node& node = nodes_.emplace_back();
    node.owned = std::move(value);
    node.needs_grad = needs;
    if (needs) node.backward = std::move(backward);
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor<T>& value(int id) const {
    const Node& node = nodes_.at(static_cast<std::size_t>(id));
    return node.bound ? *node.bound : node.owned;
  }

  bool needs_grad(int id) const { return nodes_.at(static_cast<std::size_t>(id)).needs_grad; }
  bool needs_grad(Var<T> v) const { return needs_grad(v.id); }

  // Gradient accumulator of a node, zero-filled on first access.
  std::vector<T>& grad(int id) {
    Node& node = nodes_.at(static_cast<std::size_t>(id));
    if (node.grad.empty()) node.grad.assign(value(id).size(), T(0));
    return node.grad;
  }
  std::vector<T>& grad(Var<T> v) { return grad(v.id); }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  void backward(Var<T> loss) {
    if (consumed_) throw TapeError("backward already ran on this tape; record a new one");
    if (loss.tape != this) throw TapeError("loss was not recorded on this tape");
    if (value(loss.id).size() != 1) {
      throw TapeError("backward needs a scalar loss, got shape " + shape_str(value(loss.id).shape()));
    }
    consumed_ = true;
    grad(loss.id)[0] = T(1);
    for (int id = loss.id; id >= 0; --id) {
      Node& node = nodes_[static_cast<std::size_t>(id)];
      if (!node.backward || node.grad.empty()) continue;
      node.backward(*this, node.grad);
    }
    // Several nodes may bind one tensor; their contributions add up.
    std::map<Tensor<T>*, bool> seen;
    for (Node& node : nodes_) {
      if (!node.bound || !node.bound->requires_grad()) continue;
      Tensor<T>& target = *node.bound;
      if (!seen[&target]) {
        target.zero_grad();
        seen[&target] = true;
      }
      if (node.grad.empty()) continue;
      std::vector<T>& g = target.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i];
    }
    for (auto& [target, _] : seen) {
      for (T g : target->grad()) {
        if (!std::isfinite(g)) throw NonFiniteError("backward produced a non-finite gradient");
      }
    }
  }

 private:
  struct Node {
    Tensor<T> owned;
    Tensor<T>* bound = nullptr;
    bool needs_grad = false;
    std::vector<T> grad;
    BackwardFn backward;
  };

  void check_open() const {
    if (consumed_) throw TapeError("cannot record on a tape after backward");
  }

  std::deque<Node> nodes_;
  bool consumed_ = false;
};

}  // namespace congeal
