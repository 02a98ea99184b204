#include "p3d/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "p3d/ops.hpp"

namespace p3d {

Tensor one_hot(std::span<const std::uint8_t> labels, const Shape& label_shape, int num_classes) {
  if (static_cast<Index>(labels.size()) != shape_size(label_shape)) {
    throw std::invalid_argument("label count does not match label shape");
  }
  Shape s = label_shape;
  s.push_back(num_classes);
  Tensor t(s);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) throw std::invalid_argument("label value exceeds class count");
    t[static_cast<Index>(i) * num_classes + labels[i]] = 1.0;
  }
  return t;
}

std::vector<std::uint8_t> argmax_labels(const Tensor& probs) {
  const Index K = probs.shape().back();
  const Index M = probs.size() / K;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(M));
  for (Index i = 0; i < M; ++i) {
    const double* row = probs.data() + i * K;
    out[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(std::max_element(row, row + K) - row);
  }
  return out;
}

namespace losses {

double hard_dice(std::span<const std::uint8_t> u, std::span<const std::uint8_t> v) {
  if (u.size() != v.size()) throw std::invalid_argument("hard_dice: mask shapes differ");
  std::size_t inter = 0, su = 0, sv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const bool a = u[i] != 0, b = v[i] != 0;
    su += a;
    sv += b;
    inter += a && b;
  }
  if (su + sv == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(su + sv);
}

double hard_dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth, std::uint8_t cls) {
  if (pred.size() != truth.size()) throw std::invalid_argument("hard_dice: label map shapes differ");
  std::size_t inter = 0, su = 0, sv = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] == cls, b = truth[i] == cls;
    su += a;
    sv += b;
    inter += a && b;
  }
  if (su + sv == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(su + sv);
}

Var soft_dice(Var u, Var v, const LossOptions& opts) {
  const Tensor& up = u.value();
  const Tensor& vp = v.value();
  if (up.shape() != vp.shape()) throw std::invalid_argument("soft_dice: prediction and target shapes differ");
  const Index K = up.shape().back();
  const Index M = up.size() / K;
  const Index groups = opts.reduction == DiceReduction::kClassMean ? K : 1;
  std::vector<double> inter(static_cast<std::size_t>(groups), 0.0), total(static_cast<std::size_t>(groups), 0.0);
  for (Index i = 0; i < M; ++i)
    for (Index k = 0; k < K; ++k) {
      const auto g = static_cast<std::size_t>(groups == 1 ? 0 : k);
      inter[g] += up[i * K + k] * vp[i * K + k];
      total[g] += up[i * K + k] + vp[i * K + k];
    }
  const double eps = opts.epsilon;
  double loss = 0.0;
  for (std::size_t g = 0; g < inter.size(); ++g) loss += -2.0 * inter[g] / (total[g] + eps);
  loss /= static_cast<double>(groups);

  auto backward = [inter, total, eps, K, M, groups](BackwardContext& ctx) {
    const double scale = ctx.out_grad()[0] / static_cast<double>(groups);
    const Tensor& up = ctx.input(0);
    const Tensor& vp = ctx.input(1);
    Tensor* du = ctx.input_grad(0);
    Tensor* dv = ctx.input_grad(1);
    for (Index i = 0; i < M; ++i)
      for (Index k = 0; k < K; ++k) {
        const auto g = static_cast<std::size_t>(groups == 1 ? 0 : k);
        const double den = total[g] + eps;
        const double common = 2.0 * inter[g] / (den * den);
        if (du) (*du)[i * K + k] += scale * (-2.0 * vp[i * K + k] / den + common);
        if (dv) (*dv)[i * K + k] += scale * (-2.0 * up[i * K + k] / den + common);
      }
  };
  return u.graph->record(Tensor::scalar(loss), {u, v}, backward, "soft_dice");
}

Var cross_entropy(Var u, Var v, const LossOptions& opts) {
  const Tensor& up = u.value();
  const Tensor& vp = v.value();
  if (up.shape() != vp.shape()) throw std::invalid_argument("cross_entropy: prediction and target shapes differ");
  const Index K = up.shape().back();
  const Index M = up.size() / K;
  const double lo = opts.clip_min;
  double loss = 0.0;
  for (Index i = 0; i < up.size(); ++i) {
    if (vp[i] != 0.0) loss -= vp[i] * std::log(std::clamp(up[i], lo, 1.0));
  }
  loss /= static_cast<double>(M);
  auto backward = [lo, M](BackwardContext& ctx) {
    const double scale = ctx.out_grad()[0] / static_cast<double>(M);
    const Tensor& up = ctx.input(0);
    const Tensor& vp = ctx.input(1);
    if (Tensor* du = ctx.input_grad(0))
      for (Index i = 0; i < up.size(); ++i)
        if (up[i] > lo) (*du)[i] -= scale * vp[i] / up[i];
    if (Tensor* dv = ctx.input_grad(1))
      for (Index i = 0; i < up.size(); ++i) (*dv)[i] -= scale * std::log(std::clamp(up[i], lo, 1.0));
  };
  return u.graph->record(Tensor::scalar(loss), {u, v}, backward, "cross_entropy");
}

Var combined(Var u, Var v, const LossOptions& opts) {
  Var dice = soft_dice(u, v, opts);
  if (opts.dice_only) return dice;
  return ops::add(dice, cross_entropy(u, v, opts));
}

}  // namespace losses

}  // namespace p3d
