#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "p3d/autograd.hpp"

namespace p3d {

/// How the soft Dice sums are reduced over the class axis.
enum class DiceReduction {
  /// Dice computed per class over all pixels of the batch, then averaged
  /// over classes (background included).
  kClassMean,
  /// One ratio over every (pixel, class) pair.
  kFlattened,
};

struct LossOptions {
  double epsilon = 1e-7;
  DiceReduction reduction = DiceReduction::kClassMean;
  /// Probabilities are clipped to [clip_min, 1] before the logarithm.
  double clip_min = 1e-12;
  /// Drops the cross-entropy term (Dice-only training).
  bool dice_only = false;

  bool operator==(const LossOptions&) const = default;
};

namespace losses {

/// 2|U∩V| / (|U|+|V|); 1.0 when both masks are empty.
double hard_dice(std::span<const std::uint8_t> u, std::span<const std::uint8_t> v);
/// Hard Dice of one class between two label maps.
double hard_dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth, std::uint8_t cls);

/// Negated soft Dice between probabilities u and one-hot v, last axis = class.
Var soft_dice(Var u, Var v, const LossOptions& opts = {});
/// Mean over pixels of -sum_k v_k log(u_k).
Var cross_entropy(Var u, Var v, const LossOptions& opts = {});
/// soft_dice + cross_entropy (or soft_dice alone when opts.dice_only).
Var combined(Var u, Var v, const LossOptions& opts = {});

}  // namespace losses

/// One-hot encoding of a label map; the class axis is appended last.
Tensor one_hot(std::span<const std::uint8_t> labels, const Shape& label_shape, int num_classes);

/// Per-position argmax over the last axis.
std::vector<std::uint8_t> argmax_labels(const Tensor& probs);

}  // namespace p3d
