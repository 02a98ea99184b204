// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance          run every criterion
//   acceptance 3 7      run only the listed ones

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "p3d/analysis.hpp"
#include "p3d/experiment.hpp"
#include "p3d/gradcheck.hpp"
#include "p3d/losses.hpp"
#include "p3d/ops.hpp"
#include "p3d/training.hpp"
#include "test_util.hpp"

using namespace p3d;
using p3d::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

/// Collects failed sub-checks; the first few are reported.
class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    ++total_;
    if (ok) return;
    if (failures_.size() < 4) failures_.push_back(what);
    ++failed_;
  }
  Outcome outcome(const std::string& summary) const {
    Outcome o{failed_ == 0, summary};
    if (failed_ > 0) {
      o.detail += "; " + std::to_string(failed_) + "/" + std::to_string(total_) + " failed:";
      for (const auto& f : failures_) o.detail += " [" + f + "]";
    }
    return o;
  }

 private:
  int total_ = 0, failed_ = 0;
  std::vector<std::string> failures_;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

ModelSpec spec(Mode m, int d, int C = 4, int K = 4, Backbone b = Backbone::kUNet) {
  ModelSpec s;
  s.mode = m;
  s.backbone = b;
  s.d = d;
  s.in_channels = C;
  s.num_classes = K;
  return s;
}

std::int64_t params(const ModelSpec& s) { return SegmentationModel(s, 0).parameter_count(); }

Tensor random_one_hot(const Shape& label_shape, int K, std::uint64_t seed) {
  Rng rng(seed);
  Index n = 1;
  for (Index e : label_shape) n *= e;
  std::vector<std::uint8_t> labels(static_cast<std::size_t>(n));
  for (auto& l : labels) l = static_cast<std::uint8_t>(rng.uniform_int(0, K - 1));
  return one_hot(labels, label_shape, K);
}

std::vector<Index> sample_coordinates(Index size, int count, std::uint64_t seed) {
  Rng rng(seed);
  std::set<Index> picked;
  while (static_cast<int>(picked.size()) < std::min<Index>(count, size)) picked.insert(rng.uniform_int(0, size - 1));
  return {picked.begin(), picked.end()};
}

// ---------------------------------------------------------------------------

Outcome gradient_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  Checks checks;
  double worst_primitive = 0.0, worst_model = 0.0;
  Index probed = 0, retried = 0;
  auto record = [&](const GradCheckReport& r, const std::string& name, std::uint64_t seed, double& worst) {
    worst = std::max(worst, r.max_rel_error);
    probed += r.coordinates_checked;
    retried += r.coordinates_retried;
    checks.expect(r.passed, name + " seed " + std::to_string(seed) + " rel " + fmt("%.2e", r.max_rel_error));
  };
  const GradCheckOptions prim{.step = 1e-5, .tolerance = 1e-4};

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto weighted = [&](Graph& g, Var y) { return ops::sum(ops::mul(y, g.constant(random_tensor(y.shape(), seed + 900)))); };
    const Tensor k2 = random_tensor({3, 3, 2, 3}, seed + 100);
    const Tensor k3 = random_tensor({3, 3, 3, 2, 3}, seed + 200);
    const Tensor kt2 = random_tensor({2, 2, 2, 3}, seed + 300);
    const Tensor kt3 = random_tensor({2, 2, 2, 2, 3}, seed + 400);
    const Tensor bias = random_tensor({3}, seed + 500);
    ops::BatchNormState bn(2);

    record(finite_difference_check(
               [&](Graph& g, Var x) { return weighted(g, ops::conv(x, g.constant(k2), g.constant(bias), pad_all(Rank::k2D))); },
               random_tensor({2, 5, 4, 2}, seed), prim),
           "conv2d", seed, worst_primitive);
    record(finite_difference_check(
               [&](Graph& g, Var x) { return weighted(g, ops::conv(x, g.constant(k3), g.constant(bias), pad_all(Rank::k3D))); },
               random_tensor({1, 3, 4, 4, 2}, seed), prim),
           "conv3d", seed, worst_primitive);
    record(finite_difference_check(
               [&](Graph& g, Var x) { return weighted(g, ops::conv(x, g.constant(k3), g.constant(bias), pad_inplane())); },
               random_tensor({1, 5, 4, 4, 2}, seed), prim),
           "conv3d-valid-depth", seed, worst_primitive);
    record(finite_difference_check(
               [&](Graph& g, Var x) { return weighted(g, ops::conv_transpose(x, g.constant(kt2), g.constant(bias), Rank::k2D)); },
               random_tensor({2, 3, 2, 2}, seed), prim),
           "conv_transpose2d", seed, worst_primitive);
    record(finite_difference_check(
               [&](Graph& g, Var x) { return weighted(g, ops::conv_transpose(x, g.constant(kt3), g.constant(bias), Rank::k3D)); },
               random_tensor({1, 2, 2, 3, 2}, seed), prim),
           "conv_transpose3d", seed, worst_primitive);
    record(finite_difference_check([&](Graph& g, Var x) { return weighted(g, ops::maxpool(x, Rank::k2D).output); },
                                   random_tensor({2, 4, 4, 2}, seed), prim),
           "maxpool2d", seed, worst_primitive);
    record(finite_difference_check([&](Graph& g, Var x) { return weighted(g, ops::maxpool(x, Rank::k3D).output); },
                                   random_tensor({1, 4, 4, 4, 2}, seed), prim),
           "maxpool3d", seed, worst_primitive);
    {
      // unpooling against fixed indices
      Graph g0;
      const auto pooled = ops::maxpool(g0.constant(random_tensor({1, 4, 4, 2}, seed + 600)), Rank::k2D);
      record(finite_difference_check([&](Graph& g, Var x) { return weighted(g, ops::max_unpool(x, pooled.indices)); },
                                     random_tensor({1, 2, 2, 2}, seed), prim),
             "max_unpool", seed, worst_primitive);
    }
    record(finite_difference_check(
               [&](Graph& g, Var x) {
                 return weighted(g, ops::batch_norm(x, g.constant(Tensor({2}, {1.5, 0.5})),
                                                    g.constant(Tensor({2}, {0.1, -0.2})), bn, true));
               },
               random_tensor({2, 3, 3, 2}, seed), prim),
           "batch_norm", seed, worst_primitive);
    record(finite_difference_check([&](Graph& g, Var x) { return weighted(g, ops::softmax(x)); },
                                   random_tensor({2, 3, 3, 4}, seed), prim),
           "softmax", seed, worst_primitive);

    const Tensor target = random_one_hot({2, 4, 4}, 3, seed + 700);
    const Tensor u = random_tensor({2, 4, 4, 3}, seed + 800, 0.05, 1.0);
    for (DiceReduction red : {DiceReduction::kClassMean, DiceReduction::kFlattened}) {
      const LossOptions lo{.reduction = red};
      const std::string tag = red == DiceReduction::kClassMean ? "" : "-flattened";
      record(finite_difference_check([&](Graph& g, Var x) { return losses::soft_dice(x, g.constant(target), lo); }, u, prim),
             "soft_dice" + tag, seed, worst_primitive);
      record(finite_difference_check([&](Graph& g, Var x) { return losses::combined(x, g.constant(target), lo); }, u, prim),
             "combined" + tag, seed, worst_primitive);
    }
    record(finite_difference_check([&](Graph& g, Var x) { return losses::cross_entropy(x, g.constant(target)); }, u, prim),
           "cross_entropy", seed, worst_primitive);
  }

  // Full proposed d = 3 model on a 16 x 16 x 3 x 2 input.
  // Conv biases ahead of batch norm have an exactly zero gradient; the floor
  // keeps their round-off-level differences from reading as relative error.
  const GradCheckOptions full{.step = 1e-6, .tolerance = 1e-3, .floor = 1e-5, .retry_steps = {1e-7, 1e-8}};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SegmentationModel model(spec(Mode::kProposed, 3, 2, 3), seed);
    const Tensor x = random_tensor({1, 3, 16, 16, 2}, seed + 1000);
    const Tensor target = random_one_hot({1, 16, 16}, 3, seed + 2000);
    auto loss_of_input = [&](Graph& g, Var in) { return losses::combined(model.forward(g, in, true), g.constant(target)); };
    GradCheckOptions opts = full;
    opts.coordinates = sample_coordinates(x.size(), 12, seed + 3000);
    record(finite_difference_check(loss_of_input, x, opts), "model input", seed, worst_model);

    auto loss = [&](Graph& g) { return losses::combined(model.forward(g, g.input(x, false), true), g.constant(target)); };
    const auto ps = model.parameters();
    // first transition layer, a mid-network tensor and the last (head) tensors
    for (std::size_t i : {std::size_t{0}, std::size_t{1}, std::size_t{2}, ps.size() / 2, ps.size() - 2, ps.size() - 1}) {
      Parameter& p = *ps[i];
      GradCheckOptions po = full;
      po.coordinates = sample_coordinates(p.value.size(), 6, seed * 131 + i);
      record(parameter_gradient_check(loss, p, po), "model " + p.name, seed, worst_model);
    }
  }
  const double t = seconds_since(t0);
  checks.expect(t < 120.0, "runtime " + fmt("%.1f s", t));
  return checks.outcome("primitives worst rel " + fmt("%.2e", worst_primitive) + " (< 1e-4), full model worst rel " +
                        fmt("%.2e", worst_model) + " (< 1e-3), 20 seeds, " + std::to_string(probed) + " coordinates (" +
                        std::to_string(retried) + " re-probed at a smaller step), " + fmt("%.1f s", t));
}

Outcome shape_cascade() {
  Checks checks;
  for (int d = 3; d <= 13; d += 2) {
    SegmentationModel m(spec(Mode::kProposed, d, 1, 2), 1);
    Graph g;
    ForwardProbe probe;
    m.forward(g, g.input(random_tensor({1, d, 16, 8, 1}, 7)), false, &probe);
    std::vector<Index> expect;
    for (Index k = d; k >= 1; k -= 2) expect.push_back(k);
    checks.expect(probe.transition_depths == expect, "depth trace d=" + std::to_string(d));
    checks.expect(probe.backbone_input == Shape{1, 16, 8, 16}, "transition output d=" + std::to_string(d));
  }
  return checks.outcome("d = 3..13: depth trace d, d-2, ..., 1 and transition output W x H x 16");
}

Outcome parameter_counts() {
  Checks checks;
  const auto two_d = params(spec(Mode::kEnd2End2D, 1));
  const auto three_d = params(spec(Mode::kEnd2End3D, 16));
  checks.expect(std::abs(two_d - 493000) <= 0.02 * 493000, "2D " + std::to_string(two_d));
  checks.expect(std::abs(three_d - 1461000) <= 0.02 * 1461000, "3D " + std::to_string(three_d));
  std::int64_t lo = 1 << 30, hi = 0;
  for (int d = 5; d <= 11; d += 2) {
    const auto step = params(spec(Mode::kProposed, d + 2)) - params(spec(Mode::kProposed, d));
    lo = std::min(lo, step);
    hi = std::max(hi, step);
    checks.expect(step >= 6900 && step <= 7100, "proposed step d=" + std::to_string(d) + ": " + std::to_string(step));
  }
  for (int d = 3; d <= 13; d += 2) {
    const auto delta = params(spec(Mode::kChannelBased, d)) - two_d;
    // first 3x3 convolution: in-channels C -> d*C
    checks.expect(delta == 9 * (d * 4 - 4) * 16, "channel-based d=" + std::to_string(d) + ": " + std::to_string(delta));
  }
  return checks.outcome("2D " + std::to_string(two_d) + " (" + fmt("%+.2f%%", 100.0 * (two_d - 493000) / 493000) +
                        "), 3D " + std::to_string(three_d) + " (" +
                        fmt("%+.2f%%", 100.0 * (three_d - 1461000) / 1461000) + "), proposed step " +
                        std::to_string(lo) + ".." + std::to_string(hi) + ", channel-based delta exact");
}

Outcome loss_identities() {
  Checks checks;
  auto value = [](Var (*fn)(Var, Var, const LossOptions&), const Tensor& u, const Tensor& v, const LossOptions& o) {
    Graph g;
    return fn(g.input(u), g.constant(v), o).value()[0];
  };
  const LossOptions opts;
  for (int K : {2, 3, 5}) {
    const Tensor v = random_one_hot({2, 6, 6}, K, static_cast<std::uint64_t>(K));
    const std::string k = " K=" + std::to_string(K);
    for (DiceReduction red : {DiceReduction::kClassMean, DiceReduction::kFlattened}) {
      const LossOptions o{.reduction = red};
      // every class present in the one-hot target is within eps of a perfect ratio
      checks.expect(std::abs(value(losses::soft_dice, v, v, o) + 1.0) <= 1e-6, "perfect soft DSC" + k);
      Tensor shifted(v.shape());
      for (Index i = 0; i < v.size() / K; ++i)
        for (Index c = 0; c < K; ++c) shifted[i * K + (c + 1) % K] = v[i * K + c];
      checks.expect(value(losses::soft_dice, shifted, v, o) == 0.0, "disjoint soft DSC" + k);
    }
    checks.expect(value(losses::cross_entropy, v, v, opts) == 0.0, "perfect CE" + k);
    const Tensor uniform(v.shape(), 1.0 / K);
    checks.expect(std::abs(value(losses::cross_entropy, uniform, v, opts) - std::log(static_cast<double>(K))) <= 1e-9,
                  "uniform CE" + k);
  }
  return checks.outcome("perfect soft DSC = -1 (within eps), perfect CE = 0, disjoint soft DSC = 0, uniform CE = log K");
}

Outcome overfit() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<Phantom> ph;
  for (std::uint64_t i = 0; i < 4; ++i) ph.push_back(generate_phantom(phantom_recipe("toy", 16, 32, 32, i)));
  std::vector<const LabeledVolume*> vols;
  for (const auto& p : ph) vols.push_back(&p.volume);
  SegmentationModel model(spec(Mode::kProposed, 3, 1, 3), 0);
  TrainConfig c;
  c.max_epochs = 200;
  c.patience_epochs = 10;
  c.early_stop_epochs = 30;
  c.seed = 0;
  const TrainHistory h = run_training(model, vols, vols, 3, c);
  const double dsc = evaluate(model, vols, 3).mean_dsc;
  const double t = seconds_since(t0);
  Checks checks;
  checks.expect(dsc > 0.95, "train DSC " + fmt("%.4f", dsc));
  checks.expect(t < 900.0, "runtime " + fmt("%.0f s", t));
  checks.expect(h.epochs.size() <= 200, "epochs");
  return checks.outcome("proposed d=3 U-Net, 4 toy volumes 32x32x16, K=3: mean train DSC " + fmt("%.4f", dsc) +
                        " after " + std::to_string(h.epochs.size()) + " epochs (best " +
                        std::to_string(h.best_epoch) + "), " + fmt("%.0f s", t));
}

Outcome degenerate_mode() {
  Checks checks;
  const ModelSpec s2 = spec(Mode::kEnd2End2D, 1, 1, 3);
  const ModelSpec s1 = spec(Mode::kChannelBased, 1, 1, 3);
  checks.expect(params(s2) == params(s1), "parameter count");

  std::vector<Phantom> ph;
  for (std::uint64_t i = 0; i < 3; ++i) ph.push_back(generate_phantom(phantom_recipe("toy", 8, 16, 16, i)));
  std::vector<const LabeledVolume*> train{&ph[0].volume, &ph[1].volume}, val{&ph[2].volume};
  TrainConfig c;
  c.max_epochs = 4;
  c.seed = 5;
  SegmentationModel a(s2, 11), b(s1, 11);
  const TrainHistory ha = run_training(a, train, val, 3, c);
  const TrainHistory hb = run_training(b, train, val, 3, c);
  checks.expect(ha.epochs.size() == hb.epochs.size(), "epoch count");
  for (std::size_t e = 0; e < std::min(ha.epochs.size(), hb.epochs.size()); ++e) {
    const auto &x = ha.epochs[e], &y = hb.epochs[e];
    checks.expect(x.train_loss == y.train_loss && x.val_loss == y.val_loss && x.val_dsc == y.val_dsc && x.lr == y.lr,
                  "epoch " + std::to_string(e + 1));
  }
  const ModelState sa = a.state(), sb = b.state();
  bool same = sa.parameters.size() == sb.parameters.size();
  for (std::size_t i = 0; same && i < sa.parameters.size(); ++i) same = sa.parameters[i] == sb.parameters[i];
  checks.expect(same, "final parameters");
  return checks.outcome("channel_based d=1 vs end2end_2d: " + std::to_string(params(s1)) + " params each, " +
                        std::to_string(ha.epochs.size()) + "-epoch trajectories and final weights bit-identical");
}

Outcome callback_schedule() {
  TrainConfig c;
  c.patience_epochs = 5;
  c.early_stop_epochs = 11;
  c.max_epochs = 200;
  EpochHooks hooks;
  hooks.train_epoch = [](int, double) { return 1.0; };
  hooks.validate = [] { return ValidationResult{0.5, 0.0}; };
  const TrainHistory h = run_epochs(c, hooks);
  std::vector<double> expect(11, 1e-4);
  for (int e = 5; e < 10; ++e) expect[static_cast<std::size_t>(e)] = 1e-4 * 0.2;
  expect[10] = 1e-4 * 0.2 * 0.2;
  Checks checks;
  checks.expect(h.lr_trace() == expect, "lr trace");
  checks.expect(std::abs(expect[5] - 2e-5) < 1e-18 && std::abs(expect[10] - 4e-6) < 1e-18, "lr values");
  checks.expect(h.stop_reason == StopReason::kEarlyStop && h.epochs.size() == 11, "stopped at epoch " +
                                                                                    std::to_string(h.epochs.size()));
  return checks.outcome("lr 1e-4 (1-5), 2e-5 (6-10), 4e-6 (11), early stop after epoch " +
                        std::to_string(h.epochs.size()));
}

Outcome structure_features() {
  const auto t0 = std::chrono::steady_clock::now();
  Checks checks;
  auto make = [](int label, ShapeFamily f, double cz, double cy, double cx, double rz, double ry, double rx,
                 double dy = 0, double dx = 0) {
    Structure s;
    s.label = label;
    s.family = f;
    s.center_z = cz;
    s.center_y = cy;
    s.center_x = cx;
    s.radius_z = rz;
    s.radius_y = ry;
    s.radius_x = rx;
    s.drift_y = dy;
    s.drift_x = dx;
    return s;
  };
  PhantomSpec spec;
  spec.depth = 24;
  spec.height = 64;
  spec.width = 64;
  spec.background_noise = 0;
  std::vector<Phantom> ph;
  const std::vector<std::vector<Structure>> layouts = {
      {make(1, ShapeFamily::kCylinder, 11.5, 20, 20, 6.5, 7, 6, 0.3, 0.4),
       make(2, ShapeFamily::kEllipsoid, 12, 46, 44, 8, 8, 9, -0.2, 0.1),
       make(3, ShapeFamily::kBox, 6, 48, 14, 3, 4, 5, 0.0, 0.5), make(3, ShapeFamily::kBox, 18, 14, 46, 2, 3, 3)},
      {make(1, ShapeFamily::kEllipsoid, 10, 30, 22, 7, 9, 8, 0.2, -0.3),
       make(2, ShapeFamily::kCylinder, 13.5, 42, 48, 9.5, 6, 7, -0.4, 0.0),
       make(3, ShapeFamily::kBox, 4, 12, 12, 2, 4, 4, 0.5, 0.5)},
      {make(1, ShapeFamily::kBox, 12, 20, 40, 5, 6, 6, -0.3, 0.2), make(2, ShapeFamily::kEllipsoid, 11, 44, 18, 6, 7, 7),
       make(3, ShapeFamily::kCylinder, 16.5, 48, 46, 4.5, 5, 5, 0.2, -0.2),
       make(3, ShapeFamily::kCylinder, 4, 14, 12, 2, 4, 4)},
  };
  for (std::size_t i = 0; i < layouts.size(); ++i) {
    spec.seed = i;
    spec.explicit_structures = layouts[i];
    ph.push_back(generate_phantom(spec));
  }
  std::vector<const LabeledVolume*> vols;
  std::vector<const Phantom*> pp;
  for (const auto& p : ph) {
    vols.push_back(&p.volume);
    pp.push_back(&p);
  }
  const StructureFeatures f = compute_features(vols, 4);
  double worst_u = 0.0, worst_psi = 0.0;
  for (int c = 1; c <= 3; ++c) {
    const ClassFeatures truth = metadata_features(pp, c);
    const ClassFeatures& got = f.classes[static_cast<std::size_t>(c - 1)];
    const double du = std::abs(got.upsilon - truth.upsilon) / truth.upsilon;
    const double dp = std::abs(got.psi - truth.psi);
    worst_u = std::max(worst_u, du);
    worst_psi = std::max(worst_psi, dp);
    const std::string k = " class " + std::to_string(c);
    checks.expect(got.phi == truth.phi, "phi" + k + " " + fmt("%.6g", got.phi) + " vs " + fmt("%.6g", truth.phi));
    checks.expect(du <= 0.05, "upsilon" + k + " " + fmt("%.3f", du));
    checks.expect(dp <= 0.5, "psi" + k + " " + fmt("%.3f", dp));
  }

  // two disks, (10,10) then (13,14)
  LabeledVolume two;
  two.image = Tensor({2, 32, 32, 1});
  two.labels.assign(2 * 32 * 32, 0);
  for (Index z = 0; z < 2; ++z)
    for (Index y = 0; y < 32; ++y)
      for (Index x = 0; x < 32; ++x) {
        const double cy = z == 0 ? 10 : 13, cx = z == 0 ? 10 : 14;
        if (std::hypot(static_cast<double>(y) - cy, static_cast<double>(x) - cx) <= 2.5)
          two.labels[static_cast<std::size_t>((z * 32 + y) * 32 + x)] = 1;
      }
  const double psi = structure_displacement({&two}, 1);
  checks.expect(psi == 2.5, "two-disk psi " + fmt("%.17g", psi));
  const double t = seconds_since(t0);
  checks.expect(t < 60.0, "runtime");
  return checks.outcome("phi exact, upsilon worst rel " + fmt("%.4f", worst_u) + " (<= 0.05), psi worst abs " +
                        fmt("%.3f", worst_psi) + " (<= 0.5), two-disk psi " + fmt("%.17g", psi) + ", " +
                        fmt("%.2f s", t));
}

Outcome normalization() {
  Checks checks;
  checks.expect(normalize_ct(-1000.0) == -1.0, "-1000");
  checks.expect(normalize_ct(2000.0) == 1.0, "2000");
  checks.expect(normalize_ct(500.0) == 0.0, "500");
  const Tensor hu = random_tensor({6, 20, 20, 1}, 17, -4000.0, 6000.0);
  const Tensor n = normalize_ct(hu);
  double lo = 1e9, hi = -1e9;
  for (double v : n.values()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  checks.expect(lo >= -1.0 && hi <= 1.0, "range");
  return checks.outcome("-1000 -> -1, 2000 -> 1, 500 -> 0 exact; " + std::to_string(n.size()) +
                        " random HU in [" + fmt("%.3f", lo) + ", " + fmt("%.3f", hi) + "]");
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "p3d_acceptance_determinism";
  fs::remove_all(root);
  ExperimentConfig c;
  c.source.recipe = "toy";
  c.source.count = 4;
  c.source.depth = 8;
  c.source.height = 16;
  c.source.width = 16;
  c.grid.modes = {Mode::kEnd2End2D, Mode::kProposed, Mode::kChannelBased, Mode::kEnd2End3D};
  c.grid.backbones = {Backbone::kUNet};
  c.grid.slices = {3};
  c.grid.base_filters = 4;
  c.train.max_epochs = 3;
  c.folds = 2;
  auto read = [](const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
  };
  std::ostringstream log;
  c.output_dir = root / "a";
  const GridSummary a = run_grid(c, log);
  c.output_dir = root / "b";
  const GridSummary b = run_grid(c, log);
  const std::string ta = read(root / "a" / "aggregate.csv"), tb = read(root / "b" / "aggregate.csv");
  Checks checks;
  checks.expect(a.cells.size() == 4 && a.trained == 8 && b.trained == 8, "cells trained");
  checks.expect(!ta.empty() && ta == tb, "aggregate tables differ");
  std::size_t histories = 0;
  for (const auto& cell : a.cells)
    for (int f = 0; f < c.folds; ++f) {
      const fs::path rel = fs::path("cells") / cell / ("fold" + std::to_string(f));
      for (const char* name : {"history.csv", "result.json"}) {
        checks.expect(read(root / "a" / rel / name) == read(root / "b" / rel / name), (rel / name).string());
        ++histories;
      }
    }
  fs::remove_all(root);
  return checks.outcome("4-cell x 2-fold grid run twice from scratch: aggregate tables bit-identical (" +
                        std::to_string(ta.size()) + " bytes), " + std::to_string(histories) +
                        " per-fold artifacts identical");
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient correctness", gradient_correctness},
      {"shape cascade", shape_cascade},
      {"parameter counts", parameter_counts},
      {"loss identities", loss_identities},
      {"overfit smoke test", overfit},
      {"degenerate-mode equivalence", degenerate_mode},
      {"callback schedule", callback_schedule},
      {"structure features", structure_features},
      {"normalization", normalization},
      {"determinism", determinism},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s  %2d. %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
