#include "emma/autodiff.hpp"

#include <algorithm>

namespace emma {

template <typename T>
Var Tape<T>::leaf(Tensor<T> value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Tape<T>::record(Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                [this](Var v) { return v.valid() && nodes_.at(v.id).requires_grad; });
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
Tensor<T>* Tape<T>::grad_buffer(Var v) {
  Node& n = nodes_.at(v.id);
  if (!n.requires_grad) return nullptr;
  if (!n.has_grad) {
    n.grad = Tensor<T>::zeros(n.value.shape());
    n.has_grad = true;
  }
  return &n.grad;
}

template <typename T>
void Tape<T>::accumulate(Var v, const Tensor<T>& g) {
  Tensor<T>* buf = grad_buffer(v);
  if (!buf) return;
  if (g.numel() != buf->numel()) {
    throw DimensionError("gradient shape " + shape_str(g.shape()) + " does not match value shape " +
                         shape_str(buf->shape()));
  }
  T* dst = buf->data();
  const T* src = g.data();
  for (std::size_t i = 0; i < g.numel(); ++i) dst[i] += src[i];
}

template <typename T>
void Tape<T>::backward(Var loss) {
  if (!loss.valid() || loss.id >= nodes_.size()) throw UsageError("backward: loss is not on this tape");
  if (nodes_[loss.id].value.numel() != 1) {
    throw UsageError("backward: loss must be a scalar, got shape " +
                     shape_str(nodes_[loss.id].value.shape()));
  }
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor<T>();
  }
  if (!nodes_[loss.id].requires_grad) return;
  *grad_buffer(loss) = Tensor<T>::full(nodes_[loss.id].value.shape(), T{1});

  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    // Callbacks only write to their inputs, which precede node i.
    Tensor<T> g = std::move(n.grad);
    n.backward(*this, g);
    n.grad = std::move(g);
  }
}

template <typename T>
Tensor<T> Tape<T>::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.has_grad) return n.grad;
  return Tensor<T>::zeros(n.value.shape());
}

template class Tape<float>;
template class Tape<double>;

}  // namespace emma
