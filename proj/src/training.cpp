#include "p3d/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace p3d {

void TrainConfig::validate() const {
  if (!(initial_lr > 0.0)) throw std::invalid_argument("initial_lr must be positive");
  if (!(lr_drop_factor > 0.0) || lr_drop_factor > 1.0) throw std::invalid_argument("lr_drop_factor must be in (0, 1]");
  if (patience_epochs <= 0) throw std::invalid_argument("patience_epochs must be positive");
  if (early_stop_epochs < patience_epochs) throw std::invalid_argument("early_stop_epochs must be >= patience_epochs");
  if (max_epochs <= 0) throw std::invalid_argument("max_epochs must be positive");
  if (l2_coefficient < 0.0) throw std::invalid_argument("l2_coefficient must be non-negative");
  if (batch_size < 0) throw std::invalid_argument("batch_size must be positive");
  if (min_delta < 0.0) throw std::invalid_argument("min_delta must be non-negative");
}

int TrainConfig::effective_batch_size(Mode mode) const {
  if (batch_size > 0) return batch_size;
  return mode == Mode::kEnd2End3D ? 1 : 8;
}

std::string to_string(StopReason r) { return r == StopReason::kEarlyStop ? "early_stop" : "max_epochs"; }

std::vector<double> TrainHistory::lr_trace() const {
  std::vector<double> out;
  for (const auto& e : epochs) out.push_back(e.lr);
  return out;
}

void adam_step(const std::vector<Parameter*>& params, AdamState& state, double lr, const AdamOptions& opts) {
  if (state.m.empty()) {
    for (Parameter* p : params) {
      state.m.push_back(Tensor::zeros(p->value.shape()));
      state.v.push_back(Tensor::zeros(p->value.shape()));
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("optimizer state does not match parameter list");
  ++state.step;
  const double bc1 = 1.0 - std::pow(opts.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(opts.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    if (p.grad.shape() != p.value.shape() || state.m[i].shape() != p.value.shape()) {
      throw std::invalid_argument("shape mismatch for parameter " + p.name);
    }
    const double l2 = p.decay ? opts.l2 : 0.0;
    double* w = p.value.data();
    const double* g = p.grad.data();
    double* m = state.m[i].data();
    double* v = state.v[i].data();
    for (Index j = 0; j < p.value.size(); ++j) {
      const double gj = g[j] + 2.0 * l2 * w[j];
      m[j] = opts.beta1 * m[j] + (1.0 - opts.beta1) * gj;
      v[j] = opts.beta2 * v[j] + (1.0 - opts.beta2) * gj * gj;
      w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + opts.eps);
    }
  }
}

PlateauSchedule::PlateauSchedule(const TrainConfig& config, double baseline_val_loss)
    : config_(config), lr_(config.initial_lr), best_(baseline_val_loss) {}

bool PlateauSchedule::observe(double val_loss) {
  improved_ = val_loss <= best_ - config_.min_delta;
  if (improved_) {
    best_ = val_loss;
    since_improvement_ = 0;
    since_drop_ = 0;
    return false;
  }
  ++since_improvement_;
  ++since_drop_;
  if (since_improvement_ >= config_.early_stop_epochs) return true;
  if (since_drop_ >= config_.patience_epochs) {
    lr_ *= config_.lr_drop_factor;
    since_drop_ = 0;
  }
  return false;
}

TrainHistory run_epochs(const TrainConfig& config, const EpochHooks& hooks) {
  config.validate();
  TrainHistory h;
  const ValidationResult base = hooks.validate();
  h.initial_val_loss = base.loss;
  h.best_val_loss = base.loss;
  if (hooks.on_improvement) hooks.on_improvement(0);
  PlateauSchedule schedule(config, base.loss);
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    EpochRecord r;
    r.epoch = epoch;
    r.lr = schedule.lr();
    r.train_loss = hooks.train_epoch(epoch, r.lr);
    const ValidationResult val = hooks.validate();
    r.val_loss = val.loss;
    r.val_dsc = val.dsc;
    h.epochs.push_back(r);
    const bool stop = schedule.observe(val.loss);
    if (schedule.improved()) {
      h.best_epoch = epoch;
      h.best_val_loss = val.loss;
      if (hooks.on_improvement) hooks.on_improvement(epoch);
    }
    if (stop) {
      h.stop_reason = StopReason::kEarlyStop;
      return h;
    }
  }
  h.stop_reason = StopReason::kMaxEpochs;
  return h;
}

// ---------------------------------------------------------------------------

namespace {

struct SampleRef {
  std::size_t volume;
  Index index;  // centre slice, or patch start for 3D
};

bool is_3d(const SegmentationModel& m) { return m.spec().mode == Mode::kEnd2End3D; }

void check_uniform(const std::vector<const LabeledVolume*>& volumes) {
  if (volumes.empty()) throw std::invalid_argument("empty volume set");
  for (const auto* v : volumes) {
    if (v->height() != volumes[0]->height() || v->width() != volumes[0]->width() ||
        v->channels() != volumes[0]->channels()) {
      throw std::invalid_argument("volumes must share in-plane extents and channel count");
    }
  }
}

SliceStackSample make_sample(const SegmentationModel& model, const LabeledVolume& v, Index index, int K) {
  if (is_3d(model)) return extract_patch(v, index, patch_depth_3d(v.depth()), K);
  return extract_stack(v, index, model.spec().d, K);
}

std::vector<SampleRef> all_samples(const SegmentationModel& model, const std::vector<const LabeledVolume*>& volumes) {
  std::vector<SampleRef> out;
  for (std::size_t i = 0; i < volumes.size(); ++i) {
    if (is_3d(model)) {
      for (Index s : depth_tiles(volumes[i]->depth(), patch_depth_3d(volumes[i]->depth()))) out.push_back({i, s});
    } else {
      for (Index z = 0; z < volumes[i]->depth(); ++z) out.push_back({i, z});
    }
  }
  return out;
}

struct Batch {
  Tensor input;
  Tensor target;
};

Batch stack_batch(const std::vector<SliceStackSample>& samples) {
  const Tensor& first = samples[0].input;
  Shape in_shape{static_cast<Index>(samples.size())};
  in_shape.insert(in_shape.end(), first.shape().begin(), first.shape().end());
  Batch b;
  b.input = Tensor(in_shape);
  std::vector<Tensor> targets;
  for (const auto& s : samples) targets.push_back(s.target_one_hot());
  Shape t_shape{static_cast<Index>(samples.size())};
  t_shape.insert(t_shape.end(), targets[0].shape().begin(), targets[0].shape().end());
  b.target = Tensor(t_shape);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::copy_n(samples[i].input.data(), first.size(), b.input.data() + static_cast<Index>(i) * first.size());
    std::copy_n(targets[i].data(), targets[i].size(), b.target.data() + static_cast<Index>(i) * targets[i].size());
  }
  return b;
}

}  // namespace

Index patch_depth_3d(Index volume_depth) {
  const Index p = std::min<Index>(32, volume_depth) / 8 * 8;
  if (p < 8) throw std::invalid_argument("3D mode needs at least 8 slices, volume has " + std::to_string(volume_depth));
  return p;
}

EvalResult score_predictions(const std::vector<std::vector<std::uint8_t>>& predictions,
                             const std::vector<const LabeledVolume*>& volumes, int num_classes) {
  if (predictions.size() != volumes.size()) throw std::invalid_argument("one prediction per volume required");
  EvalResult r;
  r.per_class_dsc.assign(static_cast<std::size_t>(num_classes), 0.0);
  for (std::size_t i = 0; i < volumes.size(); ++i)
    for (int c = 0; c < num_classes; ++c)
      r.per_class_dsc[static_cast<std::size_t>(c)] +=
          losses::hard_dice(predictions[i], volumes[i]->labels, static_cast<std::uint8_t>(c));
  for (double& d : r.per_class_dsc) d /= static_cast<double>(volumes.size());
  for (int c = 1; c < num_classes; ++c) r.mean_dsc += r.per_class_dsc[static_cast<std::size_t>(c)];
  r.mean_dsc /= static_cast<double>(std::max(1, num_classes - 1));
  r.predictions = predictions;
  return r;
}

EvalResult evaluate(SegmentationModel& model, const std::vector<const LabeledVolume*>& volumes, int num_classes,
                    const LossOptions& loss, int batch_size) {
  check_uniform(volumes);
  if (batch_size <= 0) throw std::invalid_argument("batch_size must be positive");
  std::vector<std::vector<std::uint8_t>> preds;
  double loss_sum = 0.0;
  Index loss_weight = 0;
  for (std::size_t vi = 0; vi < volumes.size(); ++vi) {
    const LabeledVolume& v = *volumes[vi];
    const Index hw = v.height() * v.width();
    std::vector<std::uint8_t> pred(v.labels.size(), 0);
    std::vector<Index> starts;
    if (is_3d(model)) {
      starts = depth_tiles(v.depth(), patch_depth_3d(v.depth()));
    } else {
      for (Index z = 0; z < v.depth(); ++z) starts.push_back(z);
    }
    const std::size_t step = is_3d(model) ? 1 : static_cast<std::size_t>(batch_size);
    for (std::size_t b = 0; b < starts.size(); b += step) {
      std::vector<SliceStackSample> samples;
      for (std::size_t j = b; j < std::min(starts.size(), b + step); ++j)
        samples.push_back(make_sample(model, v, starts[j], num_classes));
      const Batch batch = stack_batch(samples);
      Graph g;
      Var y = model.forward(g, g.input(batch.input, false), false);
      loss_sum += losses::combined(y, g.constant(batch.target), loss).value()[0] * static_cast<double>(samples.size());
      loss_weight += static_cast<Index>(samples.size());
      const std::vector<std::uint8_t> labels = argmax_labels(y.value());
      for (std::size_t j = 0; j < samples.size(); ++j) {
        const Index n = samples[j].target_slices * hw;
        const Index first = is_3d(model) ? starts[b + j] : samples[j].center_index;
        std::copy_n(labels.begin() + static_cast<std::ptrdiff_t>(static_cast<Index>(j) * n), n,
                    pred.begin() + static_cast<std::ptrdiff_t>(first * hw));
      }
    }
    preds.push_back(std::move(pred));
  }
  EvalResult r = score_predictions(preds, volumes, num_classes);
  r.loss = loss_sum / static_cast<double>(loss_weight);
  return r;
}

TrainHistory run_training(SegmentationModel& model, const std::vector<const LabeledVolume*>& train,
                          const std::vector<const LabeledVolume*>& val, int num_classes, const TrainConfig& config) {
  config.validate();
  if (train.empty() || val.empty()) throw std::invalid_argument("training and validation sets must be non-empty");
  check_uniform(train);
  check_uniform(val);
  const int batch_size = config.effective_batch_size(model.spec().mode);
  const std::vector<SampleRef> samples = all_samples(model, train);
  const std::vector<Parameter*> params = model.parameters();
  AdamState adam;
  ModelState best = model.state();

  EpochHooks hooks;
  hooks.train_epoch = [&](int epoch, double lr) {
    std::vector<SampleRef> order = samples;
    Rng rng(Rng::mix(config.seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(batch_size)) {
      std::vector<SliceStackSample> batch_samples;
      for (std::size_t j = b; j < std::min(order.size(), b + static_cast<std::size_t>(batch_size)); ++j) {
        SliceStackSample s = make_sample(model, *train[order[j].volume], order[j].index, num_classes);
        if (config.augment) s = augment(s, config.augmentation, rng.next_u64());
        batch_samples.push_back(std::move(s));
      }
      const Batch batch = stack_batch(batch_samples);
      for (Parameter* p : params) p->zero_grad();
      Graph g;
      Var y = model.forward(g, g.input(batch.input, false), true);
      Var loss = losses::combined(y, g.constant(batch.target), config.loss);
      g.backward(loss);
      adam_step(params, adam, lr, {.l2 = config.l2_coefficient});
      loss_sum += loss.value()[0] * static_cast<double>(batch_samples.size());
    }
    return loss_sum / static_cast<double>(order.size());
  };
  hooks.validate = [&]() {
    const EvalResult r = evaluate(model, val, num_classes, config.loss, batch_size);
    return ValidationResult{r.loss, r.mean_dsc};
  };
  hooks.on_improvement = [&](int) { best = model.state(); };

  TrainHistory h = run_epochs(config, hooks);
  model.load_state(best);
  return h;
}

void write_history(const std::filesystem::path& path, const TrainHistory& history) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "epoch,train_loss,val_loss,val_dsc,lr\n";
  os.precision(17);
  for (const auto& e : history.epochs)
    os << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.val_dsc << ',' << e.lr << '\n';
}

std::vector<EpochRecord> read_history(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(is, line);
  std::vector<EpochRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    EpochRecord r;
    if (!(ls >> r.epoch >> r.train_loss >> r.val_loss >> r.val_dsc >> r.lr)) {
      throw std::runtime_error("malformed history line in " + path.string());
    }
    out.push_back(r);
  }
  return out;
}

}  // namespace p3d
