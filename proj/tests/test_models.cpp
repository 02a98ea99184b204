#include <cmath>

#include "doctest.h"
#include "p3d/losses.hpp"
#include "p3d/models.hpp"
#include "test_util.hpp"

using namespace p3d;
using p3d::testing::random_tensor;

namespace {

ModelSpec spec(Mode m, int d, Backbone b = Backbone::kUNet, int C = 4, int K = 4, int f = 16) {
  ModelSpec s;
  s.mode = m;
  s.backbone = b;
  s.d = d;
  s.in_channels = C;
  s.num_classes = K;
  s.base_filters = f;
  return s;
}

std::int64_t count(const ModelSpec& s) { return SegmentationModel(s, 0).parameter_count(); }

}  // namespace

TEST_CASE("ModelSpec invariants") {
  CHECK_NOTHROW(spec(Mode::kEnd2End2D, 1).validate());
  CHECK_THROWS_AS(spec(Mode::kEnd2End2D, 3).validate(), std::invalid_argument);
  CHECK_THROWS_AS(spec(Mode::kProposed, 4).validate(), std::invalid_argument);
  CHECK_THROWS_AS(spec(Mode::kProposed, 1).validate(), std::invalid_argument);
  CHECK_THROWS_AS(spec(Mode::kChannelBased, 2).validate(), std::invalid_argument);
  CHECK_NOTHROW(spec(Mode::kChannelBased, 1).validate());
  CHECK_NOTHROW(spec(Mode::kEnd2End3D, 16).validate());
  CHECK(spec(Mode::kProposed, 5).label() == "proposed-unet-d5");
  CHECK(parse_mode("channel_based") == Mode::kChannelBased);
  CHECK_THROWS_AS(parse_mode("pseudo"), std::invalid_argument);
}

TEST_CASE("build_transition_block layer counts and depth cascade") {
  std::vector<std::unique_ptr<Parameter>> store;
  Rng rng(1);
  CHECK(TransitionBlock(store, rng, 3, 4, 16).num_layers() == 1);
  CHECK(TransitionBlock(store, rng, 13, 4, 16).num_layers() == 6);
  CHECK_THROWS_AS(TransitionBlock(store, rng, 4, 4, 16), std::invalid_argument);
  CHECK_THROWS_AS(TransitionBlock(store, rng, 1, 4, 16), std::invalid_argument);

  TransitionBlock block(store, rng, 13, 1, 16);
  Graph g;
  std::vector<Index> depths;
  Var y = block.forward(g, g.input(random_tensor({1, 13, 8, 8, 1}, 2)), true, &depths);
  CHECK(depths == std::vector<Index>{13, 11, 9, 7, 5, 3, 1});
  CHECK(y.shape() == Shape{1, 8, 8, 16});
}

TEST_CASE("transition layer parameter count") {
  std::vector<std::unique_ptr<Parameter>> store;
  Rng rng(1);
  TransitionBlock block(store, rng, 3, 4, 16);
  CHECK(block.layers()[0].weight().value.size() + block.layers()[0].bias().value.size() == 27 * 4 * 16 + 16);
  CHECK(27 * 4 * 16 + 16 == 1744);
}

TEST_CASE("apply_transition_block shapes and errors") {
  std::vector<std::unique_ptr<Parameter>> store;
  Rng rng(3);
  TransitionBlock block(store, rng, 5, 1, 16);
  Graph g;
  CHECK(block.forward(g, g.input(random_tensor({1, 5, 8, 8, 1}, 4)), true).shape() == Shape{1, 8, 8, 16});
  CHECK_THROWS_AS(block.forward(g, g.input(random_tensor({1, 3, 8, 8, 1}, 4)), true), std::invalid_argument);

  SUBCASE("zero input in inference mode gives the BN shift after ReLU") {
    TransitionBlock z(store, rng, 3, 2, 16);
    Graph h;
    const Tensor& out = z.forward(h, h.input(Tensor({1, 3, 4, 4, 2})), false).value();
    // bias 0, running mean 0, beta 0 -> relu(0) everywhere
    CHECK(out.max_abs() == 0.0);
  }
  SUBCASE("full BraTS patch shape traces to W x H x 16") {
    TransitionBlock big(store, rng, 3, 4, 16);
    CostTrace cost;
    CHECK(big.trace({1, 3, 160, 192, 4}, cost) == Shape{1, 160, 192, 16});
  }
}

TEST_CASE("channel_fold of a single slice is the identity") {
  Graph g;
  const Tensor in = random_tensor({2, 1, 4, 4, 3}, 5);
  CHECK(ops::channel_fold(g.input(in)).value() == in.reshaped({2, 4, 4, 3}));
  CostTrace cost;
  CHECK(SegmentationModel(spec(Mode::kChannelBased, 3), 0).trace({1, 3, 160, 192, 4}, cost) == Shape{1, 160, 192, 4});
}

TEST_CASE("U-Net parameter counts") {
  const auto two_d = count(spec(Mode::kEnd2End2D, 1));
  const auto three_d = count(spec(Mode::kEnd2End3D, 16));
  CHECK(two_d == 488900);
  CHECK(three_d == 1462340);
  CHECK(std::abs(two_d - 493000) <= 0.02 * 493000);
  CHECK(std::abs(three_d - 1461000) <= 0.02 * 1461000);

  const auto p5 = count(spec(Mode::kProposed, 5));
  CHECK(std::abs(p5 - 502000) <= 0.02 * 502000);
  for (int d = 3; d <= 11; d += 2) {
    // one extra 16->16 3x3x3 layer: 6912 weights + 16 bias + 32 BN
    CHECK(count(spec(Mode::kProposed, d + 2)) - count(spec(Mode::kProposed, d)) == 6912 + 16 + 32);
  }
  for (int d = 1; d <= 13; d += 2) {
    CHECK(count(spec(Mode::kChannelBased, d)) - two_d == 9 * (d * 4 - 4) * 16);
  }
}

TEST_CASE("transposed upsampling variant is selectable") {
  ModelSpec s = spec(Mode::kEnd2End2D, 1);
  s.upsampling = Upsampling::kTransposed;
  CHECK(count(s) == 483636);
  SegmentationModel m(s, 1);
  Graph g;
  CHECK(m.forward(g, g.input(random_tensor({1, 1, 16, 16, 4}, 1)), true).shape() == Shape{1, 16, 16, 4});
}

TEST_CASE("parameter count is a pure function of the spec") {
  const ModelSpec s = spec(Mode::kProposed, 7, Backbone::kSegNet);
  CHECK(SegmentationModel(s, 1).parameter_count() == SegmentationModel(s, 99).parameter_count());
  CostTrace a, b;
  SegmentationModel m(s, 3);
  m.trace({1, 7, 16, 16, 4}, a);
  m.trace({1, 7, 32, 64, 4}, b);
  CHECK(b.macs == 8 * a.macs);
}

TEST_CASE("every mode produces normalized central-slice probabilities") {
  struct Case {
    Mode mode;
    int d;
  };
  for (Backbone bb : {Backbone::kUNet, Backbone::kSegNet}) {
    for (Case c : {Case{Mode::kEnd2End2D, 1}, Case{Mode::kProposed, 3}, Case{Mode::kProposed, 5},
                   Case{Mode::kChannelBased, 5}, Case{Mode::kEnd2End3D, 8}}) {
      SegmentationModel m(spec(c.mode, c.d, bb, 2, 3, 4), 7);
      Graph g;
      const Tensor& y = m.forward(g, g.input(random_tensor({2, c.d, 16, 16, 2}, 8)), true).value();
      if (c.mode == Mode::kEnd2End3D) {
        CHECK(y.shape() == Shape{2, 8, 16, 16, 3});
      } else {
        CHECK(y.shape() == Shape{2, 16, 16, 3});
      }
      CHECK(y.all_finite());
      for (Index i = 0; i < y.size() / 3; ++i) CHECK(std::abs(y[i * 3] + y[i * 3 + 1] + y[i * 3 + 2] - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("proposed model probes the depth trace for every d") {
  for (int d = 3; d <= 13; d += 2) {
    SegmentationModel m(spec(Mode::kProposed, d, Backbone::kUNet, 1, 2, 4), 1);
    Graph g;
    ForwardProbe probe;
    Var y = m.forward(g, g.input(random_tensor({1, d, 8, 8, 1}, 1)), true, &probe);
    CHECK(y.shape() == Shape{1, 8, 8, 2});
    REQUIRE(probe.transition_depths.size() == static_cast<std::size_t>(d / 2 + 1));
    for (std::size_t i = 0; i < probe.transition_depths.size(); ++i)
      CHECK(probe.transition_depths[i] == d - 2 * static_cast<Index>(i));
    CHECK(probe.backbone_input == Shape{1, 8, 8, 4});
  }
}

TEST_CASE("FLOP ordering across modes") {
  auto flops = [](const ModelSpec& s) {
    CostTrace c;
    SegmentationModel(s, 0).trace({1, s.d, 160, 192, 4}, c);
    return 2 * c.macs;
  };
  const auto f2 = flops(spec(Mode::kEnd2End2D, 1));
  const auto f3 = flops(spec(Mode::kProposed, 3));
  const auto f13 = flops(spec(Mode::kProposed, 13));
  CHECK(f2 < f3);
  CHECK(f3 < f13);
}

TEST_CASE("state snapshot round-trips") {
  SegmentationModel m(spec(Mode::kProposed, 3, Backbone::kSegNet, 1, 2, 4), 5);
  const ModelState s = m.state();
  for (Parameter* p : m.parameters()) p->value.fill(0.5);
  m.load_state(s);
  CHECK(m.state().parameters == s.parameters);
}
