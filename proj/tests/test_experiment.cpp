#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "p3d/experiment.hpp"

using namespace p3d;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("p3d_experiment_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

ExperimentConfig tiny_config(const fs::path& out) {
  ExperimentConfig c;
  c.source.recipe = "toy";
  c.source.count = 4;
  c.source.depth = 8;
  c.source.height = 16;
  c.source.width = 16;
  c.grid.modes = {Mode::kEnd2End2D, Mode::kProposed};
  c.grid.backbones = {Backbone::kUNet};
  c.grid.slices = {3, 5};
  c.grid.base_filters = 4;
  c.train.max_epochs = 2;
  c.train.augment = false;
  c.folds = 2;
  c.output_dir = out;
  return c;
}

std::size_t count_files(const fs::path& dir, const std::string& name) {
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.path().filename() == name) ++n;
  return n;
}

std::size_t csv_rows(const std::string& text) {
  std::size_t n = 0;
  for (char ch : text) n += ch == '\n';
  return n - 1;
}

std::string error_of(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("config round-trips through JSON") {
  ExperimentConfig c = tiny_config("some/dir");
  c.source.seed = 12345678901234ULL;
  c.train.initial_lr = 3.3e-4;
  c.train.loss.reduction = DiceReduction::kFlattened;
  c.train.augmentation.rotation_deg = 7.25;
  c.grid.upsampling = Upsampling::kTransposed;
  c.fold_seed = 9;
  CHECK(parse_config(config_to_json(c)) == c);
  CHECK(parse_config(config_to_json(ExperimentConfig{})) == ExperimentConfig{});

  ExperimentConfig d;
  d.source.kind = DataSource::Kind::kDirectory;
  d.source.path = "vols";
  d.source.num_classes = 5;
  CHECK(parse_config(config_to_json(d)) == d);

  // omitted keys keep defaults
  CHECK(parse_config("{}") == ExperimentConfig{});
  CHECK(parse_config(R"({"folds": 3})").folds == 3);
}

TEST_CASE("config errors name the field") {
  CHECK(error_of(R"({"fold": 3})") == "fold: unknown key");
  CHECK(error_of(R"({"train": {"augmentation": {"p_flp": 0.5}}})") == "train.augmentation.p_flp: unknown key");
  CHECK(error_of(R"({"grid": {"modes": ["end2end_2d", "2.5d"]}})").rfind("grid.modes[1]: ", 0) == 0);
  CHECK(error_of(R"({"grid": {"slices": [3, 4]}})").rfind("grid.slices[1]: ", 0) == 0);
  CHECK(error_of(R"({"train": {"max_epochs": "many"}})").rfind("train.max_epochs: ", 0) == 0);
  CHECK(error_of(R"({"source": {"recipe": "lungs"}})").rfind("source.recipe: ", 0) == 0);
  CHECK(error_of(R"({"folds": 1})").rfind("folds: ", 0) == 0);
  CHECK(error_of(R"({"train": {"loss": {"reduction": "sum"}}})").rfind("train.loss.reduction: ", 0) == 0);
  CHECK(error_of("{not json").rfind("<root>: ", 0) == 0);
}

TEST_CASE("fnv1a reference values") {
  CHECK(fnv1a(std::string()) == 0xcbf29ce484222325ULL);
  CHECK(fnv1a(std::string("a")) == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a(std::string("foobar")) == 0x85944171f73967e8ULL);
}

TEST_CASE("phantom data sets are deterministic and fingerprinted") {
  DataSource s;
  s.count = 3;
  s.depth = 8;
  s.height = 16;
  s.width = 16;
  const Dataset a = load_dataset(s), b = load_dataset(s);
  CHECK(a.volumes.size() == 3);
  CHECK(a.num_classes == 3);
  CHECK(a.fingerprint == b.fingerprint);
  CHECK(a.volumes[0].patient_id != a.volumes[1].patient_id);
  s.seed = 1;
  CHECK(load_dataset(s).fingerprint != a.fingerprint);
}

TEST_CASE("directory data sets infer the class count") {
  const fs::path dir = scratch("dir_source");
  DataSource s;
  s.count = 2;
  s.depth = 8;
  s.height = 16;
  s.width = 16;
  const Dataset ph = load_dataset(s);
  for (const auto& v : ph.volumes) save_volume(dir, v);
  DataSource d;
  d.kind = DataSource::Kind::kDirectory;
  d.path = dir;
  const Dataset loaded = load_dataset(d);
  CHECK(loaded.volumes.size() == 2);
  CHECK(loaded.num_classes == 3);
  d.num_classes = 2;
  CHECK_THROWS_AS(load_dataset(d), std::invalid_argument);
  fs::remove_all(dir);
}

TEST_CASE("grid expansion") {
  ExperimentConfig c;
  c.source.count = 1;
  c.grid.base_filters = 4;
  const Dataset data = load_dataset(c.source);
  const auto specs = expand_grid(c, data);
  // per backbone: 2D + 6 proposed + 6 channel-based + 3D
  CHECK(specs.size() == 28);
  std::set<std::string> labels;
  for (const auto& s : specs) labels.insert(s.label());
  CHECK(labels.size() == 28);
  CHECK(labels.count("end2end_2d-unet-d1") == 1);
  CHECK(labels.count("end2end_3d-segnet-d16") == 1);
  CHECK(labels.count("channel_based-segnet-d13") == 1);
}

TEST_CASE("grid run writes records and resumes from markers") {
  const fs::path out = scratch("grid");
  const ExperimentConfig c = tiny_config(out);
  std::ostringstream log;

  const GridSummary first = run_grid(c, log);
  CHECK(first.trained == 6);
  CHECK(first.reused == 0);
  CHECK(count_files(out, "result.json") == 6);
  CHECK(count_files(out, "history.csv") == 6);
  CHECK(count_files(out, "complete") == 6);
  CHECK(count_files(out, "aggregate.csv") == 1);
  const std::string table = slurp(out / "aggregate.csv");
  CHECK(csv_rows(table) == 3);
  CHECK(table.find("train_s") == std::string::npos);
  CHECK(aggregate_csv(aggregate_directory(out)) == table);

  const GridSummary second = run_grid(c, log);
  CHECK(second.trained == 0);
  CHECK(second.reused == 6);
  CHECK(slurp(out / "aggregate.csv") == table);

  fs::remove(out / "cells" / "proposed-unet-d5" / "fold1" / "complete");
  const GridSummary third = run_grid(c, log);
  CHECK(third.trained == 1);
  CHECK(third.reused == 5);
  CHECK(slurp(out / "aggregate.csv") == table);

  // a changed training configuration invalidates every marker
  ExperimentConfig changed = c;
  changed.train.max_epochs = 1;
  CHECK(run_grid(changed, log).trained == 6);
  fs::remove_all(out);
}

TEST_CASE("full variant grid for one backbone has 14 rows") {
  const fs::path out = scratch("full");
  ExperimentConfig c = tiny_config(out);
  c.grid.modes = {Mode::kEnd2End2D, Mode::kProposed, Mode::kChannelBased, Mode::kEnd2End3D};
  c.grid.slices = {3, 5, 7, 9, 11, 13};
  c.train.max_epochs = 1;
  std::ostringstream log;
  const GridSummary s = run_grid(c, log);
  CHECK(s.cells.size() == 14);
  CHECK(csv_rows(slurp(out / "aggregate.csv")) == 14);
  std::set<std::string> cells(s.cells.begin(), s.cells.end());
  CHECK(cells.size() == 14);
  fs::remove_all(out);
}

TEST_CASE("render_slice") {
  LabeledVolume v;
  v.image = Tensor({2, 4, 5, 1}, 0.0);
  for (Index i = 0; i < v.image.size(); ++i) v.image[i] = static_cast<double>(i % 7);
  v.labels.assign(40, 0);

  const std::string bg = render_slice_ppm(v, v.labels, 0);
  const std::string header = "P6\n5 4\n255\n";
  REQUIRE(bg.size() == header.size() + 60);
  CHECK(bg.compare(0, header.size(), header) == 0);
  for (std::size_t p = header.size(); p < bg.size(); p += 3) {
    CHECK(bg[p] == bg[p + 1]);
    CHECK(bg[p] == bg[p + 2]);
  }

  // constant image with one class on part of the slice
  LabeledVolume c;
  c.image = Tensor({1, 4, 5, 1}, 3.0);
  c.labels.assign(20, 0);
  for (int i = 0; i < 8; ++i) c.labels[static_cast<std::size_t>(i)] = 2;
  const std::string img = render_slice_ppm(c, c.labels, 0);
  std::set<std::string> colours;
  for (std::size_t p = header.size(); p < img.size(); p += 3) colours.insert(img.substr(p, 3));
  CHECK(colours.size() == 2);

  CHECK(render_slice_ppm(v, v.labels, 1) == render_slice_ppm(v, v.labels, 1));
  CHECK_THROWS_AS(render_slice_ppm(v, v.labels, 2), std::out_of_range);
  CHECK_THROWS_AS(render_slice_ppm(v, v.labels, -1), std::out_of_range);

  const fs::path file = scratch("render") / "s.ppm";
  render_slice(c, c.labels, 0, file);
  CHECK(slurp(file) == img);
  fs::remove_all(file.parent_path());
}

TEST_CASE("command-line exit codes") {
  const fs::path dir = scratch("cli");
  fs::create_directories(dir);
  const std::string exe = P3DLAB_PATH;
  auto run = [&](const std::string& args) {
    const std::string cmd = exe + " " + args + " > " + (dir / "stdout").string() + " 2> " + (dir / "stderr").string();
    const int rc = std::system(cmd.c_str());
    return rc;
  };

  CHECK(run("generate toy " + (dir / "vols").string() + " -n 2 --depth 8 --height 16 --width 16") == 0);
  CHECK(run("features " + (dir / "vols").string()) == 0);
  CHECK(slurp(dir / "stdout").rfind("class,present,phi,upsilon,psi\n", 0) == 0);

  const std::string image = (dir / "vols" / "images" / "toy-000.ssv").string();
  const std::string labels = (dir / "vols" / "labels" / "toy-000.ssv").string();
  CHECK(run("render " + image + " 3 " + (dir / "a.ppm").string() + " --labels " + labels) == 0);
  CHECK(slurp(dir / "a.ppm").rfind("P6\n16 16\n255\n", 0) == 0);
  CHECK(run("render " + image + " 8 " + (dir / "b.ppm").string()) != 0);
  CHECK(slurp(dir / "stderr").find("slice 8") != std::string::npos);

  ExperimentConfig c = tiny_config(dir / "runs");
  c.grid.modes = {Mode::kEnd2End2D};
  c.train.max_epochs = 1;
  std::ofstream(dir / "ok.json") << config_to_json(c);
  std::ofstream(dir / "bad.json") << R"({"grid": {"modez": []}})";
  CHECK(run("run " + (dir / "ok.json").string()) == 0);
  CHECK(run("aggregate " + (dir / "runs").string()) == 0);
  CHECK(slurp(dir / "stdout") == slurp(dir / "runs" / "aggregate.csv"));
  CHECK(run("profile " + (dir / "ok.json").string()) == 0);
  CHECK(csv_rows(slurp(dir / "stdout")) == 1);
  CHECK(run("run " + (dir / "bad.json").string()) != 0);
  CHECK(slurp(dir / "stderr").find("grid.modez") != std::string::npos);
  CHECK(run("aggregate " + dir.string()) != 0);
  CHECK(run("frobnicate") != 0);
  CHECK(run("") != 0);
  fs::remove_all(dir);
}
