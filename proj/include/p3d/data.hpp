#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "p3d/tensor.hpp"

namespace p3d {

/// Millimetres along (slice, row, column).
using Spacing = std::array<double, 3>;

/// A multi-channel image volume with its label map.
///
/// image is (D, H, W, C) and labels is a row-major D*H*W map.
struct LabeledVolume {
  std::string patient_id;
  Tensor image;
  std::vector<std::uint8_t> labels;
  Spacing spacing{1.0, 1.0, 1.0};

  Index depth() const { return image.dim(0); }
  Index height() const { return image.dim(1); }
  Index width() const { return image.dim(2); }
  Index channels() const { return image.dim(3); }
  Shape label_shape() const { return {depth(), height(), width()}; }

  /// Throws if image and labels disagree or a label is >= num_classes.
  void validate(int num_classes) const;
  std::uint8_t label(Index z, Index y, Index x) const {
    return labels[static_cast<std::size_t>((z * height() + y) * width() + x)];
  }
};

// ---------------------------------------------------------------------------
// Phantoms

enum class ShapeFamily { kEllipsoid, kCylinder, kBox };

std::string to_string(ShapeFamily f);
ShapeFamily parse_shape_family(const std::string& s);

/// One rasterizable structure. The in-plane centre at slice z is
/// (center_y + drift_y * (z - center_z), center_x + drift_x * (z - center_z)).
///
/// Cylinders and boxes occupy the slices with |z - center_z| <= radius_z;
/// ellipsoids use radius_z as their axial semi-axis.
struct Structure {
  int label = 1;
  ShapeFamily family = ShapeFamily::kCylinder;
  double center_z = 0, center_y = 0, center_x = 0;
  double radius_z = 1, radius_y = 1, radius_x = 1;
  double drift_y = 0, drift_x = 0;
  double intensity_mean = 1.0;
  double intensity_noise = 0.0;

  std::array<double, 2> center_at(double z) const {
    return {center_y + drift_y * (z - center_z), center_x + drift_x * (z - center_z)};
  }
  bool contains(double z, double y, double x) const;
};

/// Sampling ranges for the structures of one class.
struct StructureRecipe {
  int label = 1;
  int count = 1;
  ShapeFamily family = ShapeFamily::kCylinder;
  /// In-plane semi-axis range, voxels.
  double size_min = 3, size_max = 5;
  /// Axial extent range, slices.
  Index depth_min = 4, depth_max = 8;
  /// Per-slice in-plane drift range (each axis uniform in [-max, max]).
  double drift_max = 0.0;
  double intensity_mean = 1.0;
  double intensity_noise = 0.1;
};

struct PhantomSpec {
  Index depth = 16, height = 32, width = 32;
  int channels = 1;
  Spacing spacing{1.0, 1.0, 1.0};
  double background_mean = 0.0;
  double background_noise = 0.1;
  std::vector<StructureRecipe> recipes;
  /// Placed verbatim after the sampled ones.
  std::vector<Structure> explicit_structures;
  std::uint64_t seed = 0;
  std::string patient_id = "phantom";

  int num_classes() const;
};

/// Ground truth recorded for each rasterized structure.
struct StructureInfo {
  Structure structure;
  Index first_slice = -1;
  Index last_slice = -1;
  Index voxel_count = 0;
  double analytic_volume = 0.0;
  /// Analytic (y, x) centre for every slice in [first_slice, last_slice].
  std::vector<std::array<double, 2>> centroid_path;

  Index depth() const { return first_slice < 0 ? 0 : last_slice - first_slice + 1; }
};

struct Phantom {
  LabeledVolume volume;
  std::vector<StructureInfo> structures;
  int num_classes = 0;
};

/// Deterministic for a fixed spec. Sampled structures never overlap each
/// other; explicit structures are drawn in order and a later one overwrites
/// earlier voxels.
Phantom generate_phantom(const PhantomSpec& spec);

/// Named recipe sets loosely mimicking the class counts and structure
/// properties of common segmentation data sets: "brain_tumor",
/// "kidney", "brain_tissue", "head_neck", "prostate", and "toy".
PhantomSpec phantom_recipe(const std::string& name, Index depth, Index height, Index width, std::uint64_t seed);
std::vector<std::string> phantom_recipe_names();

// ---------------------------------------------------------------------------
// Intensity normalization and geometry standardization

/// (clip(x, -1000, 2000) - 500) / 1500, mapping into [-1, 1].
Tensor normalize_ct(const Tensor& image);
double normalize_ct(double hu);

/// Zero mean, unit variance over the whole volume; throws on a constant volume.
Tensor normalize_zscore(const Tensor& image);

struct StandardizeOptions {
  Spacing target_spacing{1.0, 1.0, 1.0};
  std::array<Index, 3> pad_shape{};
  std::array<Index, 3> final_shape{};
};

/// Extents after resampling from `from` spacing to `to` spacing.
std::array<Index, 3> resampled_extent(const std::array<Index, 3>& extent, const Spacing& from, const Spacing& to);

/// Resample to the target spacing (trilinear image, nearest labels), zero-pad
/// symmetrically to pad_shape, then resample to final_shape.
LabeledVolume standardize_volume(const LabeledVolume& volume, const StandardizeOptions& opts);

// ---------------------------------------------------------------------------
// Samples

/// A slice stack with its target.
///
/// input is (d, H, W, C). target holds `target_slices` label slices: one
/// (the central slice) for the 2D and pseudo-3D modes, all d for 3D patches.
struct SliceStackSample {
  Tensor input;
  std::vector<std::uint8_t> target;
  Index target_slices = 1;
  Index center_index = 0;
  int num_classes = 2;

  Index height() const { return input.dim(1); }
  Index width() const { return input.dim(2); }
  /// (target_slices, H, W, K) one-hot; (H, W, K) when target_slices == 1.
  Tensor target_one_hot() const;
};

/// d slices centred on `center`, edge slices replicated past the volume
/// bounds; the target is the central label slice.
SliceStackSample extract_stack(const LabeledVolume& volume, Index center, int d, int num_classes);

/// A contiguous depth patch [start, start + depth) with all its labels.
SliceStackSample extract_patch(const LabeledVolume& volume, Index start, Index depth, int num_classes);

/// Patch start indices covering [0, D) without overlap; the last patch is
/// right-aligned.
std::vector<Index> depth_tiles(Index volume_depth, Index patch_depth);

struct AugmentParams {
  double p_flip = 0.5;
  double p_rotate = 0.5;
  double p_shear = 0.5;
  double p_zoom = 0.5;
  double p_elastic = 0.5;
  bool allow_flip = true;
  double rotation_deg = 1.0;
  double shear = 0.05;
  double zoom_min = 0.9, zoom_max = 1.1;
  double elastic_sigma = 4.0;
  double elastic_alpha = 8.0;

  static AugmentParams none();
  bool operator==(const AugmentParams&) const = default;
};

/// One geometric transform applied identically to every input slice and to
/// the target. Image values interpolate bilinearly, labels take the nearest
/// neighbour.
SliceStackSample augment(const SliceStackSample& sample, const AugmentParams& params, std::uint64_t seed);

/// Left-right mirror of every slice (input and target).
SliceStackSample flip_horizontal(const SliceStackSample& sample);

// ---------------------------------------------------------------------------
// Splits

struct Fold {
  std::vector<std::size_t> train, val, test;
};

/// Patient-level k-fold split: each fold tests on one fifth (for k = 5) and
/// divides the rest 80/20 into train and validation.
std::vector<Fold> make_folds(std::size_t num_patients, int k, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Volume files
//
// Layout: "SSV1", u32 rank, u32 extents[rank], u8 dtype (0 = f32 image,
// 1 = u8 labels), then the row-major payload, all little-endian.

enum class VolumeDType : std::uint8_t { kF32 = 0, kU8 = 1 };

struct VolumeFile {
  std::vector<std::uint32_t> extents;
  VolumeDType dtype = VolumeDType::kF32;
  std::vector<float> f32;
  std::vector<std::uint8_t> u8;
};

void write_volume_file(const std::filesystem::path& path, const VolumeFile& file);
VolumeFile read_volume_file(const std::filesystem::path& path);

/// Writes <dir>/images/<id>.ssv and <dir>/labels/<id>.ssv.
void save_volume(const std::filesystem::path& dir, const LabeledVolume& volume);
/// Loads every image/label pair under dir, sorted by stem.
std::vector<LabeledVolume> load_volume_dir(const std::filesystem::path& dir);
LabeledVolume load_volume(const std::filesystem::path& image_path, const std::filesystem::path& label_path);

}  // namespace p3d
