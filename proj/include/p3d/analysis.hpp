#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "p3d/data.hpp"
#include "p3d/models.hpp"

namespace p3d {

// ---------------------------------------------------------------------------
// Structure features

/// A 26-connected component of one class.
struct Region {
  Index first_slice = 0;
  Index last_slice = 0;
  Index voxel_count = 0;
  Index depth() const { return last_slice - first_slice + 1; }
};

/// Components of `cls` in a (D, H, W) label map, ordered by first voxel.
std::vector<Region> connected_regions(std::span<const std::uint8_t> labels, const Shape& shape, std::uint8_t cls);

enum class DepthAggregation {
  /// Mean region depth per patient, then mean over patients with the class.
  kRegionMean,
  /// Region depths summed and divided by sum_{r=1..R} r per patient.
  kTriangular,
};

/// Φ_c. Throws when the class is absent from every volume.
double structure_depth(const std::vector<const LabeledVolume*>& volumes, std::uint8_t cls,
                       DepthAggregation agg = DepthAggregation::kRegionMean);

/// Υ_c = sum_p voxels_cp / (P * H * W * D). Volumes must share extents.
double structure_size(const std::vector<const LabeledVolume*>& volumes, std::uint8_t cls);

/// Per-slice (y, x) centroid of `cls`; `present` is false on slices without it.
struct SliceCentroid {
  bool present = false;
  double y = 0.0, x = 0.0;
};
std::vector<SliceCentroid> slice_centroids(const LabeledVolume& volume, std::uint8_t cls);

/// Ψ_c = sum_p sum_s ||ψ(s-1) - ψ(s)|| / (P * D) over consecutive slices that
/// both contain the class. Throws when no volume has the class on two
/// consecutive slices.
double structure_displacement(const std::vector<const LabeledVolume*>& volumes, std::uint8_t cls);

struct ClassFeatures {
  int cls = 0;
  bool present = false;
  double phi = 0.0, upsilon = 0.0, psi = 0.0;
};

struct StructureFeatures {
  std::vector<ClassFeatures> classes;
  /// min, mean, max over the present foreground classes.
  std::array<double, 3> phi{}, upsilon{}, psi{};
};

/// Features of every foreground class. Absent classes are listed but
/// excluded from the aggregates; Ψ is 0 for a class never on two adjacent
/// slices.
StructureFeatures compute_features(const std::vector<const LabeledVolume*>& volumes, int num_classes,
                                   DepthAggregation agg = DepthAggregation::kRegionMean);

/// Features of one class predicted from generator metadata alone: region
/// depths from the recorded slice ranges, sizes from analytic volumes, and
/// per-slice centroids from the analytic centre paths weighted by analytic
/// cross-section areas.
ClassFeatures metadata_features(const std::vector<const Phantom*>& phantoms, int cls);

/// cls,present,phi,upsilon,psi rows followed by min/mean/max rows.
std::string features_csv(const StructureFeatures& f);

// ---------------------------------------------------------------------------
// Cost

std::int64_t count_params(const SegmentationModel& model);
/// 2 * multiply-accumulates of every convolution at the given input shape.
std::int64_t count_flops(const SegmentationModel& model, const Shape& input);

struct CostReport {
  std::string label;
  Shape input_shape;
  std::int64_t parameter_count = 0;
  std::int64_t flop_count = 0;
  /// Forward activations plus their gradients, 8 bytes each.
  std::int64_t activation_bytes = 0;
  /// Values, gradients and both Adam moments, 8 bytes each.
  std::int64_t parameter_bytes = 0;
  std::int64_t memory_estimate_bytes() const { return activation_bytes + parameter_bytes; }
  /// Negative when not measured.
  double train_seconds_per_epoch = -1.0;
  double predict_seconds_per_sample = -1.0;
};

/// Analytic part of the report for one batch of the given input shape.
CostReport profile_model(const SegmentationModel& model, const Shape& input);

/// Mean wall time of a forward pass in inference mode, per sample.
double time_prediction(SegmentationModel& model, const Shape& input, int repeats = 3);

std::string cost_csv_header();
std::string cost_csv_row(const CostReport& r);

// ---------------------------------------------------------------------------
// Result aggregation

struct RunRecord {
  std::string cell;
  int fold = 0;
  double mean_dsc = 0.0;
  std::vector<double> per_class_dsc;
};

struct AggregateRow {
  std::string cell;
  std::size_t runs = 0;
  double mean = 0.0;
  /// Population standard deviation over runs.
  double stddev = 0.0;
  std::vector<double> class_mean, class_std;
};

/// One row per expected cell, in the given order. Throws when a cell has no
/// runs or a record names a cell that was not expected.
std::vector<AggregateRow> aggregate_results(const std::vector<RunRecord>& records,
                                            const std::vector<std::string>& cells);

/// cell,runs,mean_dsc,std_dsc[,dsc_c<k>_mean,dsc_c<k>_std...]
std::string aggregate_csv(const std::vector<AggregateRow>& rows);

}  // namespace p3d
