#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "emma/autodiff.hpp"

namespace emma {

using LabelTensor = Tensor<std::uint8_t>;

enum class LossKind { cross_entropy, soft_dice, soft_iou };

std::string to_string(LossKind kind);
LossKind parse_loss_kind(std::string_view name);

struct LossSpec {
  LossKind kind = LossKind::cross_entropy;
  // Per-class weights for cross-entropy; empty means all ones.
  std::vector<double> class_weights;
  // Soft Dice/IoU average over all K classes by default; false averages
  // over the foreground classes 1..K-1 only.
  bool include_background = true;

  void validate(std::size_t num_classes) const;
};

inline constexpr double kLogClamp = 1e-12;
inline constexpr double kOverlapSmoothing = 1.0;

// Expands class indices [D,H,W] into [K,D,H,W] indicators.
template <typename T>
Tensor<T> one_hot(const LabelTensor& labels, std::size_t num_classes);

// Mean over voxels of -w_c log(max(p_c, 1e-12)) at the true class c.
template <typename T>
Var cross_entropy_loss(Tape<T>& tape, Var probs, const LabelTensor& target, std::span<const double> weights = {});

// 1 - mean_k (2 sum(p g) + s) / (sum p + sum g + s), s = 1.
template <typename T>
Var soft_dice_loss(Tape<T>& tape, Var probs, const Tensor<T>& target_onehot, bool include_background = true);

// 1 - mean_k (sum(p g) + s) / (sum p + sum g - sum(p g) + s), s = 1.
template <typename T>
Var soft_iou_loss(Tape<T>& tape, Var probs, const Tensor<T>& target_onehot, bool include_background = true);

template <typename T>
Var compute_loss(Tape<T>& tape, Var probs, const LabelTensor& target, const LossSpec& spec);

}  // namespace emma
