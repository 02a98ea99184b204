#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "p3d/autograd.hpp"
#include "p3d/ops.hpp"
#include "p3d/rng.hpp"

namespace p3d {

enum class Mode { kEnd2End2D, kProposed, kChannelBased, kEnd2End3D };
enum class Backbone { kUNet, kSegNet };
/// U-Net decoder upsampling: parameter-free nearest-neighbour repeat with the
/// full bottleneck width carried into the skip concatenation, or a learned
/// 2x transposed convolution that halves the channel count first.
enum class Upsampling { kNearest, kTransposed };

std::string to_string(Mode m);
std::string to_string(Backbone b);
std::string to_string(Upsampling u);
Mode parse_mode(const std::string& s);
Backbone parse_backbone(const std::string& s);
Upsampling parse_upsampling(const std::string& s);

/// One experiment variant.
struct ModelSpec {
  Mode mode = Mode::kProposed;
  Backbone backbone = Backbone::kUNet;
  /// Input slice count: 1 for 2D, odd >= 3 for the pseudo-3D modes, the
  /// patch depth for 3D.
  int d = 3;
  int in_channels = 1;
  int num_classes = 2;
  int base_filters = 16;
  Upsampling upsampling = Upsampling::kNearest;

  /// Throws std::invalid_argument describing the first violated invariant.
  void validate() const;
  /// Stable identifier such as "proposed-unet-d5".
  std::string label() const;
  bool operator==(const ModelSpec&) const = default;
};

/// Multiply-accumulate and activation tallies gathered by shape tracing.
struct CostTrace {
  std::int64_t macs = 0;
  std::int64_t activation_elements = 0;
};

/// Conv + batch norm + ReLU, the unit every encoder/decoder level is made of.
class ConvBnRelu {
 public:
  ConvBnRelu(std::vector<std::unique_ptr<Parameter>>& store, Rng& rng, const std::string& name, Rank rank,
             Index cin, Index cout, PadFlags padding);

  Var forward(Graph& g, Var x, bool training);
  Shape trace(const Shape& in, CostTrace& cost) const;

  Parameter& weight() { return *weight_; }
  Parameter& bias() { return *bias_; }
  ops::BatchNormState& bn_state() { return bn_; }
  const ops::BatchNormState& bn_state() const { return bn_; }

 private:
  Rank rank_;
  Index cin_, cout_;
  PadFlags padding_;
  Parameter* weight_;
  Parameter* bias_;
  Parameter* gamma_;
  Parameter* beta_;
  ops::BatchNormState bn_;
};

/// Stack of floor(d/2) 3x3x3 convolutions padded in-plane only. Each layer
/// removes two slices; the last leaves one, which is squeezed away.
class TransitionBlock {
 public:
  TransitionBlock(std::vector<std::unique_ptr<Parameter>>& store, Rng& rng, int d, Index cin, Index width);

  int slices() const { return d_; }
  int num_layers() const { return static_cast<int>(layers_.size()); }
  Index width() const { return width_; }

  /// (N, d, H, W, C) -> (N, H, W, width). When depth_trace is given it
  /// receives the slice count before the first layer and after each layer.
  Var forward(Graph& g, Var x, bool training, std::vector<Index>* depth_trace = nullptr);
  Shape trace(const Shape& in, CostTrace& cost) const;

  std::vector<ConvBnRelu>& layers() { return layers_; }

 private:
  int d_;
  Index width_;
  std::vector<ConvBnRelu> layers_;
};

/// Encoder-decoder network producing per-pixel class probabilities.
class BackboneNet {
 public:
  virtual ~BackboneNet() = default;
  virtual Var forward(Graph& g, Var x, bool training) = 0;
  virtual Shape trace(const Shape& in, CostTrace& cost) const = 0;
  virtual std::vector<ConvBnRelu*> blocks() = 0;
};

/// Encoder filters f, 2f, 4f; bottleneck 8f; two conv units per level.
std::unique_ptr<BackboneNet> build_backbone(std::vector<std::unique_ptr<Parameter>>& store, Rng& rng,
                                            Backbone kind, Rank rank, Index in_channels, Index num_classes,
                                            Index base_filters, Upsampling upsampling = Upsampling::kNearest);

/// Snapshot of every trainable tensor and batch-norm running statistic.
struct ModelState {
  std::vector<Tensor> parameters;
  std::vector<ops::BatchNormState> batch_norm;
};

/// Values recorded during a forward pass for inspection in tests.
struct ForwardProbe {
  std::vector<Index> transition_depths;
  Shape backbone_input;
};

/// A complete model: input handling for the mode followed by the backbone.
///
/// Input is always a slice stack (N, d, H, W, C). The 2D and pseudo-3D modes
/// return (N, H, W, K) probabilities for the central slice; the 3D mode
/// returns (N, d, H, W, K).
class SegmentationModel {
 public:
  SegmentationModel(const ModelSpec& spec, std::uint64_t seed);

  const ModelSpec& spec() const { return spec_; }
  Var forward(Graph& g, Var stack, bool training, ForwardProbe* probe = nullptr);

  std::vector<Parameter*> parameters();
  std::int64_t parameter_count() const;
  /// Output shape and cost tally for an input of the given shape.
  Shape trace(const Shape& input, CostTrace& cost) const;

  ModelState state();
  void load_state(const ModelState& s);

  TransitionBlock* transition() { return transition_ ? &*transition_ : nullptr; }

 private:
  std::vector<ops::BatchNormState*> bn_states();

  ModelSpec spec_;
  std::vector<std::unique_ptr<Parameter>> store_;
  std::optional<TransitionBlock> transition_;
  std::unique_ptr<BackboneNet> backbone_;
};

/// Convenience for callers that only need a network.
inline SegmentationModel assemble_model(const ModelSpec& spec, std::uint64_t seed) {
  return SegmentationModel(spec, seed);
}

}  // namespace p3d
