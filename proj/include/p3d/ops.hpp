#pragma once

#include <array>
#include <memory>
#include <vector>

#include "p3d/autograd.hpp"

namespace p3d {

/// Spatial rank of an operation: planar (N,H,W,C) or volumetric (N,D,H,W,C).
enum class Rank { k2D = 2, k3D = 3 };

inline int rank_value(Rank r) { return static_cast<int>(r); }

/// Which spatial axes receive size-preserving zero padding, ordered (D, H, W)
/// for volumetric data and (H, W) for planar data.
using PadFlags = std::vector<bool>;

inline PadFlags pad_all(Rank r) { return PadFlags(static_cast<std::size_t>(rank_value(r)), true); }
/// Pads H and W but not the slice axis.
inline PadFlags pad_inplane() { return PadFlags{false, true, true}; }

/// Argmax positions recorded by max pooling, one flat input offset per
/// output element.
struct IndexMap {
  Shape input_shape;
  Shape output_shape;
  std::vector<Index> argmax;
};

struct PoolResult {
  Var output;
  std::shared_ptr<const IndexMap> indices;
};

namespace ops {

/// Stride-1 convolution. Kernel layout is (k..., Cin, Cout) with one extent
/// of 1 or 3 per spatial axis; bias has Cout entries.
Var conv(Var input, Var kernel, Var bias, const PadFlags& padding);

/// Stride-2 transposed convolution with kernel 2 per axis.
/// Kernel layout is (Cin, 2, 2[, 2], Cout); every spatial extent doubles.
Var conv_transpose(Var input, Var kernel, Var bias, Rank rank);

/// 2-per-axis, stride-2 max pooling. Ties resolve to the first position in
/// row-major window order.
PoolResult maxpool(Var input, Rank rank);

/// Scatters each pooled value back to its recorded argmax, zeros elsewhere.
Var max_unpool(Var input, const std::shared_ptr<const IndexMap>& indices);

/// Nearest-neighbour 2x upsampling along every spatial axis.
Var upsample_nearest(Var input, Rank rank);

struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.99;
  double epsilon = 1e-3;

  explicit BatchNormState(Index channels, double mom = 0.99, double eps = 1e-3)
      : running_mean(static_cast<std::size_t>(channels), 0.0),
        running_var(static_cast<std::size_t>(channels), 1.0),
        momentum(mom),
        epsilon(eps) {}
};

/// Per-channel normalization over every axis but the last. In training mode
/// batch statistics are used and running statistics updated as
/// running = momentum * running + (1 - momentum) * batch.
Var batch_norm(Var input, Var gamma, Var beta, BatchNormState& state, bool training);

Var relu(Var input);
/// Softmax along the last axis.
Var softmax(Var input);

/// Concatenates along the last (channel) axis.
Var concat_channels(Var a, Var b);
Var reshape(Var input, Shape shape);

/// (N, d, H, W, C) -> (N, H, W, d*C) with output channel = slice * C + channel.
Var channel_fold(Var input);
/// Inverse of channel_fold for a given slice count.
Var channel_unfold(Var input, Index slices);

Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var sum(Var a);
Var mean(Var a);

}  // namespace ops

/// Forward-only kernels shared by the graph ops and by tests.
namespace kernels {

struct ConvGeometry {
  Index batch = 0;
  std::array<Index, 3> in{};   // D, H, W
  std::array<Index, 3> out{};  // D, H, W
  std::array<Index, 3> k{};    // kernel extents
  std::array<Index, 3> pad{};  // leading padding
  Index cin = 0;
  Index cout = 0;
};

ConvGeometry conv_geometry(const Shape& input, const Shape& kernel, const PadFlags& padding);
Shape spatial_output_shape(const ConvGeometry& g, int rank);

}  // namespace kernels

}  // namespace p3d
