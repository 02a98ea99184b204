#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "p3d/analysis.hpp"
#include "p3d/data.hpp"
#include "p3d/models.hpp"
#include "p3d/training.hpp"

namespace p3d {

/// Where the volumes of an experiment come from.
struct DataSource {
  enum class Kind { kPhantom, kDirectory };
  Kind kind = Kind::kPhantom;
  // phantom
  std::string recipe = "toy";
  int count = 10;
  Index depth = 16, height = 32, width = 32;
  std::uint64_t seed = 0;
  // directory
  std::filesystem::path path;
  /// 0 infers the class count from the largest label present.
  int num_classes = 0;

  bool operator==(const DataSource&) const = default;
};

struct ModelGrid {
  std::vector<Mode> modes{Mode::kEnd2End2D, Mode::kProposed, Mode::kChannelBased, Mode::kEnd2End3D};
  std::vector<Backbone> backbones{Backbone::kUNet, Backbone::kSegNet};
  /// Slice counts for the pseudo-3D modes.
  std::vector<int> slices{3, 5, 7, 9, 11, 13};
  int base_filters = 16;
  Upsampling upsampling = Upsampling::kNearest;

  bool operator==(const ModelGrid&) const = default;
};

struct ExperimentConfig {
  DataSource source;
  ModelGrid grid;
  TrainConfig train;
  int folds = 5;
  std::uint64_t fold_seed = 0;
  std::filesystem::path output_dir = "runs";

  /// Throws ConfigError naming the offending field.
  void validate() const;
  bool operator==(const ExperimentConfig&) const = default;
};

/// Error in a configuration file; the message starts with the field path.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& field, const std::string& what) : std::runtime_error(field + ": " + what) {}
};

/// JSON text form. Unknown keys are rejected; omitted keys keep defaults.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string config_to_json(const ExperimentConfig& config);

/// Loaded volumes with their class count.
struct Dataset {
  std::vector<LabeledVolume> volumes;
  int num_classes = 0;
  /// Content hash over every image and label byte.
  std::uint64_t fingerprint = 0;

  std::vector<const LabeledVolume*> select(const std::vector<std::size_t>& indices) const;
};

Dataset load_dataset(const DataSource& source);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t h = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ULL);

/// Model variants of the grid, in configuration order.
std::vector<ModelSpec> expand_grid(const ExperimentConfig& config, const Dataset& data);

struct CellResult {
  RunRecord record;
  TrainHistory history;
  CostReport cost;
  bool reused = false;
};

struct GridSummary {
  std::vector<CellResult> results;
  std::vector<std::string> cells;
  std::size_t trained = 0;
  std::size_t reused = 0;
  std::filesystem::path aggregate_path;
};

/// Trains and evaluates every cell on every fold, writing under
/// output_dir/cells/<cell>/fold<k>/ (history.csv, result.json, cost.csv and a
/// completion marker), then output_dir/aggregate.csv. Folds whose marker
/// matches the current configuration and data are not retrained.
GridSummary run_grid(const ExperimentConfig& config, std::ostream& log);

/// Rebuilds the aggregate table from result files under a run directory.
std::vector<AggregateRow> aggregate_directory(const std::filesystem::path& dir);

/// Cost reports for every cell at the data's slice shape; no training.
std::vector<CostReport> profile_grid(const ExperimentConfig& config);

/// Binary PPM of one axial slice: channel 0 in grayscale with every
/// non-background label painted in an opaque class colour. Throws on an
/// out-of-range slice.
std::string render_slice_ppm(const LabeledVolume& volume, std::span<const std::uint8_t> labels, Index slice);
void render_slice(const LabeledVolume& volume, std::span<const std::uint8_t> labels, Index slice,
                  const std::filesystem::path& out);

}  // namespace p3d
