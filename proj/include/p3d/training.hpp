#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "p3d/data.hpp"
#include "p3d/losses.hpp"
#include "p3d/models.hpp"

namespace p3d {

struct TrainConfig {
  double initial_lr = 1e-4;
  double lr_drop_factor = 0.2;
  int patience_epochs = 5;
  int early_stop_epochs = 12;
  int max_epochs = 200;
  double l2_coefficient = 1e-5;
  /// 0 selects the mode default: 8 for slice stacks, 1 for 3D patches.
  int batch_size = 0;
  std::uint64_t seed = 0;
  bool augment = true;
  /// Minimum validation-loss decrease that counts as an improvement.
  double min_delta = 1e-5;
  AugmentParams augmentation;
  LossOptions loss;

  void validate() const;
  int effective_batch_size(Mode mode) const;
  bool operator==(const TrainConfig&) const = default;
};

enum class StopReason { kEarlyStop, kMaxEpochs };
std::string to_string(StopReason r);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_dsc = 0.0;
  /// Learning rate used during this epoch.
  double lr = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  StopReason stop_reason = StopReason::kMaxEpochs;
  /// Epoch whose parameters were retained; 0 means the initial parameters.
  int best_epoch = 0;
  double best_val_loss = 0.0;
  double initial_val_loss = 0.0;

  std::vector<double> lr_trace() const;
};

/// Per-parameter Adam moments.
struct AdamState {
  std::vector<Tensor> m, v;
  std::int64_t step = 0;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double l2 = 0.0;
};

/// One Adam update from each parameter's grad. Parameters flagged `decay`
/// receive 2 * l2 * w added to their gradient first. Throws on shape
/// mismatch between a value, its gradient and the stored moments.
void adam_step(const std::vector<Parameter*>& params, AdamState& state, double lr, const AdamOptions& opts = {});

/// Patience and early-stopping callbacks on the validation loss.
class PlateauSchedule {
 public:
  explicit PlateauSchedule(const TrainConfig& config, double baseline_val_loss);
  double lr() const { return lr_; }
  /// Feeds one epoch's validation loss. Returns true when training should stop.
  bool observe(double val_loss);
  bool improved() const { return improved_; }
  double best() const { return best_; }

 private:
  TrainConfig config_;
  double lr_;
  double best_;
  int since_improvement_ = 0;
  int since_drop_ = 0;
  bool improved_ = false;
};

struct ValidationResult {
  double loss = 0.0;
  double dsc = 0.0;
};

struct EpochHooks {
  /// Trains one epoch at the given lr, returns the mean training loss.
  std::function<double(int epoch, double lr)> train_epoch;
  std::function<ValidationResult()> validate;
  /// Called whenever the validation loss improves (and for the baseline).
  std::function<void(int epoch)> on_improvement;
};

/// The epoch loop with its callbacks. Validation runs once before the first
/// epoch to set the baseline.
TrainHistory run_epochs(const TrainConfig& config, const EpochHooks& hooks);

struct EvalResult {
  /// Per-class hard DSC, averaged over volumes.
  std::vector<double> per_class_dsc;
  /// Mean of per_class_dsc over the foreground classes.
  double mean_dsc = 0.0;
  /// Mean combined loss over prediction batches.
  double loss = 0.0;
  std::vector<std::vector<std::uint8_t>> predictions;
};

/// Patch depth used for 3D training and tiled inference.
Index patch_depth_3d(Index volume_depth);

/// Predicts each volume (slice by slice, or in depth tiles for 3D) in
/// inference mode and scores the reassembled label maps.
EvalResult evaluate(SegmentationModel& model, const std::vector<const LabeledVolume*>& volumes, int num_classes,
                    const LossOptions& loss = {}, int batch_size = 8);

/// Scores given predictions against the volumes' labels.
EvalResult score_predictions(const std::vector<std::vector<std::uint8_t>>& predictions,
                             const std::vector<const LabeledVolume*>& volumes, int num_classes);

/// Augmented mini-batch training with the plateau schedule. The parameters
/// with the best validation loss are loaded back into the model on return.
TrainHistory run_training(SegmentationModel& model, const std::vector<const LabeledVolume*>& train,
                          const std::vector<const LabeledVolume*>& val, int num_classes, const TrainConfig& config);

/// One line per epoch: epoch,train_loss,val_loss,val_dsc,lr after a header.
void write_history(const std::filesystem::path& path, const TrainHistory& history);
std::vector<EpochRecord> read_history(const std::filesystem::path& path);

}  // namespace p3d
