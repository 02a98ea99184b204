#include <cmath>
#include <numbers>

#include "doctest.h"
#include "p3d/gradcheck.hpp"
#include "p3d/losses.hpp"
#include "p3d/ops.hpp"
#include "test_util.hpp"

using namespace p3d;
using p3d::testing::random_tensor;

namespace {

double eval_loss(Var (*fn)(Var, Var, const LossOptions&), const Tensor& u, const Tensor& v,
                 const LossOptions& opts = {}) {
  Graph g;
  return fn(g.input(u), g.constant(v), opts).value()[0];
}

std::vector<std::uint8_t> mask(std::size_t n, std::size_t from, std::size_t to) {
  std::vector<std::uint8_t> m(n, 0);
  for (std::size_t i = from; i < to; ++i) m[i] = 1;
  return m;
}

}  // namespace

TEST_CASE("hard_dice examples") {
  const auto a = mask(400, 0, 100);
  CHECK(losses::hard_dice(a, a) == 1.0);
  CHECK(losses::hard_dice(a, mask(400, 200, 300)) == 0.0);
  // |U| = |V| = 100 with 50 shared voxels
  CHECK(losses::hard_dice(a, mask(400, 50, 150)) == doctest::Approx(0.5));
  CHECK(losses::hard_dice(mask(10, 0, 0), mask(10, 0, 0)) == 1.0);
  CHECK_THROWS_AS(losses::hard_dice(mask(10, 0, 1), mask(11, 0, 1)), std::invalid_argument);
}

TEST_CASE("hard_dice is symmetric") {
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    std::vector<std::uint8_t> u(64), v(64);
    for (auto& x : u) x = static_cast<std::uint8_t>(rng.bernoulli(0.3));
    for (auto& x : v) x = static_cast<std::uint8_t>(rng.bernoulli(0.4));
    CHECK(losses::hard_dice(u, v) == losses::hard_dice(v, u));
  }
}

TEST_CASE("soft_dice_loss examples") {
  const std::vector<std::uint8_t> labels{0, 1, 2, 1, 0, 2};
  const Tensor v = one_hot(labels, {6}, 3);
  const double eps = 1e-7;
  SUBCASE("perfect overlap") {
    const double N = 6;
    CHECK(eval_loss(losses::soft_dice, v, v, {.reduction = DiceReduction::kFlattened}) ==
          doctest::Approx(-2 * N / (2 * N + eps)).epsilon(1e-15));
    CHECK(eval_loss(losses::soft_dice, v, v) == doctest::Approx(-1.0).epsilon(1e-7));
  }
  SUBCASE("disjoint supports") {
    const Tensor shifted = one_hot(std::vector<std::uint8_t>{1, 2, 0, 2, 1, 0}, {6}, 3);
    CHECK(eval_loss(losses::soft_dice, shifted, v) == 0.0);
    CHECK(eval_loss(losses::soft_dice, shifted, v, {.reduction = DiceReduction::kFlattened}) == 0.0);
  }
  SUBCASE("single pixel, hand-evaluated") {
    const Tensor u({1, 2}, {0.8, 0.2});
    const Tensor t({1, 2}, {1.0, 0.0});
    CHECK(eval_loss(losses::soft_dice, u, t, {.epsilon = 0.0, .reduction = DiceReduction::kFlattened}) ==
          doctest::Approx(-0.8).epsilon(1e-15));
    // per class: -1.6 / 1.8 and 0 / 0.2, averaged
    CHECK(eval_loss(losses::soft_dice, u, t, {.epsilon = 0.0}) == doctest::Approx(-0.8 / 1.8).epsilon(1e-15));
  }
}

TEST_CASE("soft dice stays in [-1, 0]") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Graph g;
    Var u = ops::softmax(g.input(random_tensor({2, 4, 4, 3}, seed, -4, 4)));
    Rng rng(seed + 1);
    std::vector<std::uint8_t> lab(32);
    for (auto& l : lab) l = static_cast<std::uint8_t>(rng.uniform_int(0, 2));
    Var v = g.constant(one_hot(lab, {2, 4, 4}, 3));
    for (auto red : {DiceReduction::kClassMean, DiceReduction::kFlattened}) {
      const double l = losses::soft_dice(u, v, {.reduction = red}).value()[0];
      CHECK(l >= -1.0);
      CHECK(l <= 0.0);
    }
  }
}

TEST_CASE("cross_entropy_loss examples") {
  const Tensor v({1, 4}, {0, 0, 1, 0});
  CHECK(eval_loss(losses::cross_entropy, v, v) == 0.0);
  CHECK(eval_loss(losses::cross_entropy, Tensor({1, 4}, 0.25), v) == doctest::Approx(std::log(4.0)).epsilon(1e-15));
  CHECK(eval_loss(losses::cross_entropy, Tensor({1, 2}, 0.5), Tensor({1, 2}, {1, 0})) ==
        doctest::Approx(std::numbers::ln2).epsilon(1e-15));
  // zero probability on the true class is clipped, not infinite
  CHECK(std::isfinite(eval_loss(losses::cross_entropy, Tensor({1, 2}, {1, 0}), Tensor({1, 2}, {0, 1}))));
}

TEST_CASE("combined_loss examples") {
  const Tensor v = one_hot(std::vector<std::uint8_t>{0, 1, 1, 0}, {4}, 2);
  Graph g;
  CHECK(losses::combined(g.input(v), g.constant(v)).value()[0] == doctest::Approx(-1.0).epsilon(1e-6));
  const double uniform = losses::combined(g.input(Tensor({1, 2}, 0.5)), g.constant(Tensor({1, 2}, {1, 0})),
                                          {.reduction = DiceReduction::kFlattened})
                             .value()[0];
  CHECK(uniform == doctest::Approx(-0.5 + std::numbers::ln2).epsilon(1e-6));
  CHECK(std::abs(uniform - 0.1931) < 1e-4);
  const double dice_only =
      losses::combined(g.input(Tensor({1, 2}, 0.5)), g.constant(Tensor({1, 2}, {1, 0})), {.dice_only = true})
          .value()[0];
  CHECK(dice_only == doctest::Approx(-1.0 / 3.0).epsilon(1e-6));
}

TEST_CASE("loss gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    std::vector<std::uint8_t> lab(18);
    for (auto& l : lab) l = static_cast<std::uint8_t>(rng.uniform_int(0, 2));
    const Tensor v = one_hot(lab, {2, 3, 3}, 3);
    for (auto red : {DiceReduction::kClassMean, DiceReduction::kFlattened}) {
      const LossOptions opts{.reduction = red};
      auto dice = [&](Graph& g, Var x) { return losses::soft_dice(ops::softmax(x), g.constant(v), opts); };
      auto comb = [&](Graph& g, Var x) { return losses::combined(ops::softmax(x), g.constant(v), opts); };
      const Tensor logits = random_tensor({2, 3, 3, 3}, seed + 10);
      CHECK(finite_difference_check(dice, logits, {.tolerance = 1e-4}).passed);
      CHECK(finite_difference_check(comb, logits, {.tolerance = 1e-5}).passed);
    }
  }
}

TEST_CASE("descent on a fixed sample does not increase the combined loss") {
  const Tensor v = one_hot(std::vector<std::uint8_t>{0, 1, 2, 2, 1, 0, 0, 0}, {2, 2, 2}, 3);
  Tensor logits = random_tensor({2, 2, 2, 3}, 4);
  double previous = 1e300;
  for (int step = 0; step < 50; ++step) {
    Graph g;
    Var x = g.input(logits);
    Var loss = losses::combined(ops::softmax(x), g.constant(v));
    g.backward(loss);
    CHECK(loss.value()[0] <= previous + 1e-12);
    previous = loss.value()[0];
    const Tensor& grad = g.grad(x);
    for (Index i = 0; i < logits.size(); ++i) logits[i] -= 0.1 * grad[i];
  }
}

TEST_CASE("argmax dice is invariant to monotone logit rescaling") {
  Rng rng(5);
  for (int t = 0; t < 10; ++t) {
    const Tensor logits = random_tensor({1, 6, 6, 3}, static_cast<std::uint64_t>(t));
    Tensor scaled = logits;
    const double a = rng.uniform(0.1, 5.0), b = rng.uniform(-3, 3);
    for (double& x : scaled.values()) x = a * std::tanh(x) + b;
    Graph g;
    const auto p1 = argmax_labels(ops::softmax(g.input(logits)).value());
    const auto p2 = argmax_labels(ops::softmax(g.input(scaled)).value());
    std::vector<std::uint8_t> truth(36);
    for (auto& l : truth) l = static_cast<std::uint8_t>(rng.uniform_int(0, 2));
    for (std::uint8_t c = 0; c < 3; ++c) CHECK(losses::hard_dice(p1, truth, c) == losses::hard_dice(p2, truth, c));
  }
}
