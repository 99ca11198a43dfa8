#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "emma/tensor.hpp"

namespace emma {

// Handle to a value recorded on a Tape.
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const { return id != npos; }
};

// Reverse-mode tape. Nodes are appended after their inputs, so index order is a
// topological order and backward() walks it from the loss down to 0. A tape is
// single-owner: one training step, one thread.
template <typename T>
class Tape {
 public:
  // Receives the gradient of this node's output and accumulates into inputs.
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  Var leaf(Tensor<T> value, bool requires_grad = false);
  // Records an op result. The node requires grad iff any input does.
  Var record(Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn fn);

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  const Shape& shape(Var v) const { return nodes_.at(v.id).value.shape(); }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  // Adds `g` into the gradient buffer of `v`; no-op if `v` needs no gradient.
  void accumulate(Var v, const Tensor<T>& g);
  // Mutable gradient buffer, zero-initialised on first access. Only valid
  // for nodes that require grad; ops use it to scatter-add in place.
  Tensor<T>* grad_buffer(Var v);

  // Reverse sweep from a scalar loss. Clears gradients from earlier sweeps.
  void backward(Var loss);

  // Gradient after backward(); zeros for nodes the loss does not reach.
  Tensor<T> grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

template <typename T>
using GradientMap = std::map<std::string, Tensor<T>>;

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace emma
