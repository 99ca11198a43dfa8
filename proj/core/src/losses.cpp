#include "emma/losses.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace emma {

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::cross_entropy: return "cross_entropy";
    case LossKind::soft_dice: return "soft_dice";
    case LossKind::soft_iou: return "soft_iou";
  }
  return "unknown";
}

LossKind parse_loss_kind(std::string_view name) {
  if (name == "cross_entropy") return LossKind::cross_entropy;
  if (name == "soft_dice") return LossKind::soft_dice;
  if (name == "soft_iou") return LossKind::soft_iou;
  throw ConfigError("unknown loss kind '" + std::string(name) + "'");
}

void LossSpec::validate(std::size_t num_classes) const {
  if (class_weights.empty()) return;
  if (class_weights.size() != num_classes) {
    throw ConfigError("class_weights has " + std::to_string(class_weights.size()) + " entries, expected " +
                      std::to_string(num_classes));
  }
  bool any_positive = false;
  for (double w : class_weights) {
    if (!(w >= 0.0)) throw ConfigError("class_weights must be non-negative");
    any_positive |= w > 0.0;
  }
  if (!any_positive) throw ConfigError("class_weights needs at least one positive entry");
}

namespace {

template <typename T>
void check_probs_target(const Tensor<T>& p, const Shape& target_spatial, const char* op) {
  if (p.rank() != 4) throw DimensionError(std::string(op) + ": probabilities must be [K,D,H,W]");
  if (target_spatial.size() != 3 || target_spatial[0] != p.dim(1) || target_spatial[1] != p.dim(2) ||
      target_spatial[2] != p.dim(3)) {
    throw DimensionError(std::string(op) + ": target extents " + shape_str(target_spatial) +
                         " do not match probabilities " + shape_str(p.shape()));
  }
}

enum class Overlap { dice, iou };

template <typename T>
Var overlap_loss(Tape<T>& tape, Var probs, const Tensor<T>& target, bool include_background, Overlap kind) {
  const auto& p = tape.value(probs);
  if (target.shape() != p.shape()) {
    throw DimensionError("overlap loss: target shape " + shape_str(target.shape()) + " does not match " +
                         shape_str(p.shape()));
  }
  const std::size_t K = p.dim(0);
  const std::size_t n = p.numel() / K;
  const std::size_t first = include_background ? 0 : 1;
  if (first >= K) throw UsageError("overlap loss: no classes left to average");
  const double count = static_cast<double>(K - first);
  const double s = kOverlapSmoothing;

  struct ClassSums {
    double inter, sum_p, sum_g;
  };
  auto sums = std::make_shared<std::vector<ClassSums>>(K);
  double ratio_sum = 0.0;
  for (std::size_t k = first; k < K; ++k) {
    double inter = 0.0, sp = 0.0, sg = 0.0;
    const T* pk = p.data() + k * n;
    const T* gk = target.data() + k * n;
    for (std::size_t i = 0; i < n; ++i) {
      inter += static_cast<double>(pk[i]) * gk[i];
      sp += pk[i];
      sg += gk[i];
    }
    (*sums)[k] = {inter, sp, sg};
    ratio_sum += kind == Overlap::dice ? (2.0 * inter + s) / (sp + sg + s) : (inter + s) / (sp + sg - inter + s);
  }
  const double loss = 1.0 - ratio_sum / count;
  auto g = std::make_shared<Tensor<T>>(target);
  return tape.record(Tensor<T>({1}, static_cast<T>(loss)), {probs},
                     [probs, g, sums, K, n, first, count, s, kind](Tape<T>& t, const Tensor<T>& go) {
                       Tensor<T>* gp = t.grad_buffer(probs);
                       const double scale = -static_cast<double>(go[0]) / count;
                       for (std::size_t k = first; k < K; ++k) {
                         const auto [inter, sp, sg] = (*sums)[k];
                         const T* gk = g->data() + k * n;
                         T* dst = gp->data() + k * n;
                         if (kind == Overlap::dice) {
                           const double den = sp + sg + s;
                           const double num = 2.0 * inter + s;
                           for (std::size_t i = 0; i < n; ++i)
                             dst[i] += static_cast<T>(scale * (2.0 * gk[i] * den - num) / (den * den));
                         } else {
                           const double uni = sp + sg - inter + s;
                           const double num = inter + s;
                           for (std::size_t i = 0; i < n; ++i)
                             dst[i] += static_cast<T>(scale * (gk[i] * uni - num * (1.0 - gk[i])) / (uni * uni));
                         }
                       }
                     });
}

}  // namespace

template <typename T>
Tensor<T> one_hot(const LabelTensor& labels, std::size_t num_classes) {
  if (labels.rank() != 3) throw DimensionError("one_hot: labels must be [D,H,W]");
  Shape s{num_classes, labels.dim(0), labels.dim(1), labels.dim(2)};
  Tensor<T> out(s);
  const std::size_t n = labels.numel();
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= num_classes) {
      throw UsageError("one_hot: label " + std::to_string(labels[i]) + " >= class count " + std::to_string(num_classes));
    }
    out[labels[i] * n + i] = T{1};
  }
  return out;
}

template <typename T>
Var cross_entropy_loss(Tape<T>& tape, Var probs, const LabelTensor& target, std::span<const double> weights) {
  const auto& p = tape.value(probs);
  check_probs_target(p, target.shape(), "cross_entropy_loss");
  const std::size_t K = p.dim(0);
  const std::size_t n = target.numel();
  if (!weights.empty() && weights.size() != K) {
    throw UsageError("cross_entropy_loss: " + std::to_string(weights.size()) + " weights for " + std::to_string(K) +
                     " classes");
  }
  auto w = std::make_shared<std::vector<double>>(K, 1.0);
  if (!weights.empty()) std::copy(weights.begin(), weights.end(), w->begin());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = target[i];
    if (c >= K) {
      throw UsageError("cross_entropy_loss: target label " + std::to_string(c) + " >= class count " +
                       std::to_string(K));
    }
    total += -(*w)[c] * std::log(std::max(static_cast<double>(p[c * n + i]), kLogClamp));
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  auto labels = std::make_shared<LabelTensor>(target);
  return tape.record(Tensor<T>({1}, static_cast<T>(total * inv_n)), {probs},
                     [probs, labels, w, n, inv_n](Tape<T>& t, const Tensor<T>& go) {
                       const auto& p = t.value(probs);
                       Tensor<T>* gp = t.grad_buffer(probs);
                       for (std::size_t i = 0; i < n; ++i) {
                         const std::size_t c = (*labels)[i];
                         const double pc = p[c * n + i];
                         if (pc > kLogClamp) (*gp)[c * n + i] += static_cast<T>(-go[0] * (*w)[c] * inv_n / pc);
                       }
                     });
}

template <typename T>
Var soft_dice_loss(Tape<T>& tape, Var probs, const Tensor<T>& target_onehot, bool include_background) {
  return overlap_loss(tape, probs, target_onehot, include_background, Overlap::dice);
}

template <typename T>
Var soft_iou_loss(Tape<T>& tape, Var probs, const Tensor<T>& target_onehot, bool include_background) {
  return overlap_loss(tape, probs, target_onehot, include_background, Overlap::iou);
}

template <typename T>
Var compute_loss(Tape<T>& tape, Var probs, const LabelTensor& target, const LossSpec& spec) {
  const std::size_t K = tape.value(probs).dim(0);
  switch (spec.kind) {
    case LossKind::cross_entropy: return cross_entropy_loss(tape, probs, target, spec.class_weights);
    case LossKind::soft_dice: return soft_dice_loss(tape, probs, one_hot<T>(target, K), spec.include_background);
    case LossKind::soft_iou: return soft_iou_loss(tape, probs, one_hot<T>(target, K), spec.include_background);
  }
  throw UsageError("compute_loss: unknown loss kind");
}

#define EMMA_INSTANTIATE_LOSSES(T)                                                          \
  template Tensor<T> one_hot<T>(const LabelTensor&, std::size_t);                          \
  template Var cross_entropy_loss<T>(Tape<T>&, Var, const LabelTensor&, std::span<const double>); \
  template Var soft_dice_loss<T>(Tape<T>&, Var, const Tensor<T>&, bool);                   \
  template Var soft_iou_loss<T>(Tape<T>&, Var, const Tensor<T>&, bool);                    \
  template Var compute_loss<T>(Tape<T>&, Var, const LabelTensor&, const LossSpec&);

EMMA_INSTANTIATE_LOSSES(float)
EMMA_INSTANTIATE_LOSSES(double)

}  // namespace emma
