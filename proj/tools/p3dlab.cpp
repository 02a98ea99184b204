// p3dlab: command-line front end for grid runs, aggregation, profiling,
// structure features and slice rendering.

#include <cstdint>
#include <exception>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "p3d/experiment.hpp"

namespace {

using namespace p3d;

int cmd_run(const std::string& config_path, const std::string& output) {
  ExperimentConfig c = load_config(config_path);
  if (!output.empty()) c.output_dir = output;
  const GridSummary s = run_grid(c, std::cout);
  std::cout << s.trained << " trained, " << s.reused << " reused; table at " << s.aggregate_path.string() << "\n";
  return 0;
}

int cmd_aggregate(const std::string& dir) {
  std::cout << aggregate_csv(aggregate_directory(dir));
  return 0;
}

int cmd_profile(const std::string& config_path) {
  const ExperimentConfig c = load_config(config_path);
  std::cout << cost_csv_header() << "\n";
  for (const auto& r : profile_grid(c)) std::cout << cost_csv_row(r) << "\n";
  return 0;
}

int cmd_features(const std::string& dir, bool triangular, int num_classes) {
  const auto volumes = load_volume_dir(dir);
  int k = num_classes;
  if (k <= 0) {
    k = 2;
    for (const auto& v : volumes)
      for (auto l : v.labels) k = std::max(k, static_cast<int>(l) + 1);
  }
  std::vector<const LabeledVolume*> ptrs;
  for (const auto& v : volumes) ptrs.push_back(&v);
  std::cout << features_csv(
      compute_features(ptrs, k, triangular ? DepthAggregation::kTriangular : DepthAggregation::kRegionMean));
  return 0;
}

int cmd_render(const std::string& image, Index slice, const std::string& out, const std::string& labels) {
  const LabeledVolume v = load_volume(image, labels);
  render_slice(v, v.labels, slice, out);
  return 0;
}

int cmd_generate(const std::string& recipe, const std::string& out, int count, Index d, Index h, Index w,
                 std::uint64_t seed) {
  DataSource src;
  src.recipe = recipe;
  src.count = count;
  src.depth = d;
  src.height = h;
  src.width = w;
  src.seed = seed;
  const Dataset data = load_dataset(src);
  for (const auto& v : data.volumes) save_volume(out, v);
  std::cout << data.volumes.size() << " volumes, " << data.num_classes << " classes written to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"p3dlab: pseudo-3D segmentation experiments"};
  app.require_subcommand(1);

  std::string config, output, dir, image, out, labels, recipe;
  Index slice = 0;
  bool triangular = false;
  int num_classes = 0, count = 10;
  Index depth = 16, height = 32, width = 32;
  std::uint64_t seed = 0;

  auto* run = app.add_subcommand("run", "Train and evaluate every grid cell on every fold");
  run->add_option("config", config, "JSON experiment configuration")->required()->check(CLI::ExistingFile);
  run->add_option("-o,--output", output, "Override output_dir");

  auto* agg = app.add_subcommand("aggregate", "Print the aggregate table of a run directory");
  agg->add_option("dir", dir, "Run directory")->required()->check(CLI::ExistingDirectory);

  auto* prof = app.add_subcommand("profile", "Parameter, FLOP, memory and timing report per cell");
  prof->add_option("config", config, "JSON experiment configuration")->required()->check(CLI::ExistingFile);

  auto* feat = app.add_subcommand("features", "Structure depth, size and displacement per class");
  feat->add_option("dir", dir, "Volume directory with images/ and labels/")->required()->check(CLI::ExistingDirectory);
  feat->add_flag("--triangular", triangular, "Divide summed region depths by R(R+1)/2 instead of R");
  feat->add_option("-k,--classes", num_classes, "Class count (default: inferred)");

  auto* render = app.add_subcommand("render", "Write one axial slice as a PPM image");
  render->add_option("image", image, "Image volume (.ssv)")->required()->check(CLI::ExistingFile);
  render->add_option("slice", slice, "Slice index")->required();
  render->add_option("out", out, "Output .ppm")->required();
  render->add_option("-l,--labels", labels, "Label volume to overlay")->check(CLI::ExistingFile);

  auto* gen = app.add_subcommand("generate", "Write a phantom data set as a volume directory");
  gen->add_option("recipe", recipe, "Recipe name")->required();
  gen->add_option("out", out, "Output directory")->required();
  gen->add_option("-n,--count", count, "Number of volumes");
  gen->add_option("--depth", depth);
  gen->add_option("--height", height);
  gen->add_option("--width", width);
  gen->add_option("--seed", seed);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(config, output);
    if (*agg) return cmd_aggregate(dir);
    if (*prof) return cmd_profile(config);
    if (*feat) return cmd_features(dir, triangular, num_classes);
    if (*render) return cmd_render(image, slice, out, labels);
    if (*gen) return cmd_generate(recipe, out, count, depth, height, width, seed);
  } catch (const std::exception& e) {
    std::cerr << "p3dlab: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
