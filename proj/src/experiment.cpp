#include "p3d/experiment.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace p3d {

// ---------------------------------------------------------------------------
// Config text form

namespace {

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

/// Reads keys from one JSON object and rejects whatever it did not consume.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(join(path_, key), std::string("wrong type (") + e.what() + ")");
    }
  }

  template <typename T, typename Parse>
  void get_enum(const std::string& key, T& out, Parse parse) {
    std::string s;
    get(key, s);
    if (s.empty()) return;
    try {
      out = parse(s);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(join(path_, key), e.what());
    }
  }

  template <typename T, typename Parse>
  void get_enum_list(const std::string& key, std::vector<T>& out, Parse parse) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    if (!it->is_array()) throw ConfigError(join(path_, key), "expected a list");
    out.clear();
    for (std::size_t i = 0; i < it->size(); ++i) {
      const std::string field = join(path_, key) + "[" + std::to_string(i) + "]";
      if (!(*it)[i].is_string()) throw ConfigError(field, "expected a string");
      try {
        out.push_back(parse((*it)[i].template get<std::string>()));
      } catch (const std::invalid_argument& e) {
        throw ConfigError(field, e.what());
      }
    }
  }

  ObjectReader child(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    static const json empty = json::object();
    return ObjectReader(it == j_.end() ? empty : *it, join(path_, key));
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError(join(path_, k), "unknown key");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::string to_string(DataSource::Kind k) { return k == DataSource::Kind::kPhantom ? "phantom" : "directory"; }

DataSource::Kind parse_source_kind(const std::string& s) {
  if (s == "phantom") return DataSource::Kind::kPhantom;
  if (s == "directory") return DataSource::Kind::kDirectory;
  throw std::invalid_argument("unknown source kind '" + s + "' (expected phantom or directory)");
}

std::string to_string(DiceReduction r) { return r == DiceReduction::kClassMean ? "class_mean" : "flattened"; }

DiceReduction parse_reduction(const std::string& s) {
  if (s == "class_mean") return DiceReduction::kClassMean;
  if (s == "flattened") return DiceReduction::kFlattened;
  throw std::invalid_argument("unknown dice reduction '" + s + "'");
}

json train_json(const TrainConfig& t) {
  const AugmentParams& a = t.augmentation;
  return {{"initial_lr", t.initial_lr},
          {"lr_drop_factor", t.lr_drop_factor},
          {"patience_epochs", t.patience_epochs},
          {"early_stop_epochs", t.early_stop_epochs},
          {"max_epochs", t.max_epochs},
          {"l2_coefficient", t.l2_coefficient},
          {"batch_size", t.batch_size},
          {"seed", t.seed},
          {"augment", t.augment},
          {"min_delta", t.min_delta},
          {"augmentation",
           {{"p_flip", a.p_flip},
            {"p_rotate", a.p_rotate},
            {"p_shear", a.p_shear},
            {"p_zoom", a.p_zoom},
            {"p_elastic", a.p_elastic},
            {"allow_flip", a.allow_flip},
            {"rotation_deg", a.rotation_deg},
            {"shear", a.shear},
            {"zoom_min", a.zoom_min},
            {"zoom_max", a.zoom_max},
            {"elastic_sigma", a.elastic_sigma},
            {"elastic_alpha", a.elastic_alpha}}},
          {"loss",
           {{"epsilon", t.loss.epsilon},
            {"reduction", to_string(t.loss.reduction)},
            {"clip_min", t.loss.clip_min},
            {"dice_only", t.loss.dice_only}}}};
}

void read_train(ObjectReader r, TrainConfig& t) {
  r.get("initial_lr", t.initial_lr);
  r.get("lr_drop_factor", t.lr_drop_factor);
  r.get("patience_epochs", t.patience_epochs);
  r.get("early_stop_epochs", t.early_stop_epochs);
  r.get("max_epochs", t.max_epochs);
  r.get("l2_coefficient", t.l2_coefficient);
  r.get("batch_size", t.batch_size);
  r.get("seed", t.seed);
  r.get("augment", t.augment);
  r.get("min_delta", t.min_delta);
  {
    ObjectReader a = r.child("augmentation");
    AugmentParams& p = t.augmentation;
    a.get("p_flip", p.p_flip);
    a.get("p_rotate", p.p_rotate);
    a.get("p_shear", p.p_shear);
    a.get("p_zoom", p.p_zoom);
    a.get("p_elastic", p.p_elastic);
    a.get("allow_flip", p.allow_flip);
    a.get("rotation_deg", p.rotation_deg);
    a.get("shear", p.shear);
    a.get("zoom_min", p.zoom_min);
    a.get("zoom_max", p.zoom_max);
    a.get("elastic_sigma", p.elastic_sigma);
    a.get("elastic_alpha", p.elastic_alpha);
    a.finish();
  }
  {
    ObjectReader l = r.child("loss");
    l.get("epsilon", t.loss.epsilon);
    l.get_enum("reduction", t.loss.reduction, parse_reduction);
    l.get("clip_min", t.loss.clip_min);
    l.get("dice_only", t.loss.dice_only);
    l.finish();
  }
  r.finish();
}

json config_json(const ExperimentConfig& c) {
  json source = {{"kind", to_string(c.source.kind)}};
  if (c.source.kind == DataSource::Kind::kPhantom) {
    source.update({{"recipe", c.source.recipe},
                   {"count", c.source.count},
                   {"depth", c.source.depth},
                   {"height", c.source.height},
                   {"width", c.source.width},
                   {"seed", c.source.seed}});
  } else {
    source.update({{"path", c.source.path.string()}, {"num_classes", c.source.num_classes}});
  }
  json modes = json::array(), backbones = json::array();
  for (Mode m : c.grid.modes) modes.push_back(to_string(m));
  for (Backbone b : c.grid.backbones) backbones.push_back(to_string(b));
  return {{"source", source},
          {"grid",
           {{"modes", modes},
            {"backbones", backbones},
            {"slices", c.grid.slices},
            {"base_filters", c.grid.base_filters},
            {"upsampling", to_string(c.grid.upsampling)}}},
          {"train", train_json(c.train)},
          {"folds", c.folds},
          {"fold_seed", c.fold_seed},
          {"output_dir", c.output_dir.string()}};
}

}  // namespace

void ExperimentConfig::validate() const {
  if (source.kind == DataSource::Kind::kPhantom) {
    const auto names = phantom_recipe_names();
    if (std::find(names.begin(), names.end(), source.recipe) == names.end()) {
      throw ConfigError("source.recipe", "unknown recipe '" + source.recipe + "'");
    }
    if (source.count < 1) throw ConfigError("source.count", "must be positive");
    if (source.depth < 1 || source.height < 1 || source.width < 1) {
      throw ConfigError("source.depth", "extents must be positive");
    }
  } else if (source.path.empty()) {
    throw ConfigError("source.path", "required for a directory source");
  }
  if (source.num_classes < 0 || source.num_classes > 255) throw ConfigError("source.num_classes", "out of range");
  if (grid.modes.empty()) throw ConfigError("grid.modes", "must not be empty");
  if (grid.backbones.empty()) throw ConfigError("grid.backbones", "must not be empty");
  if (grid.base_filters < 1) throw ConfigError("grid.base_filters", "must be positive");
  const bool pseudo = std::any_of(grid.modes.begin(), grid.modes.end(),
                                  [](Mode m) { return m == Mode::kProposed || m == Mode::kChannelBased; });
  if (pseudo && grid.slices.empty()) throw ConfigError("grid.slices", "required for the pseudo-3D modes");
  for (std::size_t i = 0; i < grid.slices.size(); ++i) {
    const int d = grid.slices[i];
    if (d < 3 || d % 2 == 0) {
      throw ConfigError("grid.slices[" + std::to_string(i) + "]", "slice counts must be odd and >= 3");
    }
  }
  try {
    train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("train", e.what());
  }
  if (folds < 2) throw ConfigError("folds", "must be at least 2");
  if (output_dir.empty()) throw ConfigError("output_dir", "must not be empty");
}

ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("<root>", std::string("not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  ObjectReader root(j, "");
  {
    ObjectReader s = root.child("source");
    s.get_enum("kind", c.source.kind, parse_source_kind);
    s.get("recipe", c.source.recipe);
    s.get("count", c.source.count);
    s.get("depth", c.source.depth);
    s.get("height", c.source.height);
    s.get("width", c.source.width);
    s.get("seed", c.source.seed);
    std::string path;
    s.get("path", path);
    c.source.path = path;
    s.get("num_classes", c.source.num_classes);
    s.finish();
  }
  {
    ObjectReader g = root.child("grid");
    g.get_enum_list("modes", c.grid.modes, parse_mode);
    g.get_enum_list("backbones", c.grid.backbones, parse_backbone);
    g.get("slices", c.grid.slices);
    g.get("base_filters", c.grid.base_filters);
    g.get_enum("upsampling", c.grid.upsampling, parse_upsampling);
    g.finish();
  }
  read_train(root.child("train"), c.train);
  root.get("folds", c.folds);
  root.get("fold_seed", c.fold_seed);
  std::string out = c.output_dir.string();
  root.get("output_dir", out);
  c.output_dir = out;
  root.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  ExperimentConfig c = parse_config(ss.str());
  if (c.source.kind == DataSource::Kind::kDirectory && c.source.path.is_relative()) {
    c.source.path = path.parent_path() / c.source.path;
  }
  return c;
}

std::string config_to_json(const ExperimentConfig& config) { return config_json(config).dump(2) + "\n"; }

// ---------------------------------------------------------------------------
// Data

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a(const std::string& s, std::uint64_t h) { return fnv1a(s.data(), s.size(), h); }

std::vector<const LabeledVolume*> Dataset::select(const std::vector<std::size_t>& indices) const {
  std::vector<const LabeledVolume*> out;
  for (std::size_t i : indices) out.push_back(&volumes.at(i));
  return out;
}

Dataset load_dataset(const DataSource& source) {
  Dataset d;
  if (source.kind == DataSource::Kind::kPhantom) {
    for (int i = 0; i < source.count; ++i) {
      PhantomSpec spec = phantom_recipe(source.recipe, source.depth, source.height, source.width,
                                        Rng::mix(source.seed, static_cast<std::uint64_t>(i)));
      char id[32];
      std::snprintf(id, sizeof id, "%03d", i);
      spec.patient_id = source.recipe + "-" + id;
      Phantom p = generate_phantom(spec);
      d.num_classes = p.num_classes;
      d.volumes.push_back(std::move(p.volume));
    }
  } else {
    d.volumes = load_volume_dir(source.path);
    int k = 2;
    for (const auto& v : d.volumes)
      for (auto l : v.labels) k = std::max(k, static_cast<int>(l) + 1);
    if (source.num_classes > 0 && source.num_classes < k) {
      throw std::invalid_argument("labels exceed the configured class count");
    }
    d.num_classes = source.num_classes > 0 ? source.num_classes : k;
  }
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& v : d.volumes) {
    v.validate(d.num_classes);
    h = fnv1a(v.patient_id, h);
    h = fnv1a(v.image.data(), static_cast<std::size_t>(v.image.size()) * sizeof(double), h);
    h = fnv1a(v.labels.data(), v.labels.size(), h);
  }
  d.fingerprint = h;
  return d;
}

std::vector<ModelSpec> expand_grid(const ExperimentConfig& config, const Dataset& data) {
  if (data.volumes.empty()) throw std::invalid_argument("data set is empty");
  Index min_depth = data.volumes[0].depth();
  for (const auto& v : data.volumes) min_depth = std::min(min_depth, v.depth());
  std::vector<ModelSpec> out;
  for (Backbone b : config.grid.backbones) {
    for (Mode m : config.grid.modes) {
      std::vector<int> ds;
      if (m == Mode::kEnd2End2D) ds = {1};
      else if (m == Mode::kEnd2End3D) ds = {static_cast<int>(patch_depth_3d(min_depth))};
      else ds = config.grid.slices;
      for (int d : ds) {
        ModelSpec s;
        s.mode = m;
        s.backbone = b;
        s.d = d;
        s.in_channels = static_cast<int>(data.volumes[0].channels());
        s.num_classes = data.num_classes;
        s.base_filters = config.grid.base_filters;
        s.upsampling = config.grid.upsampling;
        s.validate();
        out.push_back(s);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Grid runner

namespace {

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  os << text;
  if (!os) throw std::runtime_error("cannot write " + p.string());
}

std::string marker_for(const ExperimentConfig& c, const ModelSpec& s, int fold, std::uint64_t fingerprint) {
  json cell = {{"cell", s.label()},
               {"in_channels", s.in_channels},
               {"num_classes", s.num_classes},
               {"base_filters", s.base_filters},
               {"upsampling", to_string(s.upsampling)},
               {"fold", fold},
               {"folds", c.folds},
               {"fold_seed", c.fold_seed},
               {"train", train_json(c.train)},
               {"data", hex(fingerprint)}};
  return hex(fnv1a(cell.dump()));
}

json record_json(const CellResult& r) {
  return {{"cell", r.record.cell},
          {"fold", r.record.fold},
          {"mean_dsc", r.record.mean_dsc},
          {"per_class_dsc", r.record.per_class_dsc},
          {"epochs", r.history.epochs.size()},
          {"best_epoch", r.history.best_epoch},
          {"best_val_loss", r.history.best_val_loss},
          {"stop_reason", to_string(r.history.stop_reason)}};
}

RunRecord read_record(const fs::path& p) {
  const json j = json::parse(read_file(p));
  RunRecord r;
  r.cell = j.at("cell").get<std::string>();
  r.fold = j.at("fold").get<int>();
  r.mean_dsc = j.at("mean_dsc").get<double>();
  r.per_class_dsc = j.at("per_class_dsc").get<std::vector<double>>();
  return r;
}

Shape sample_shape(const ModelSpec& s, const LabeledVolume& v) {
  return {1, s.mode == Mode::kEnd2End3D ? patch_depth_3d(v.depth()) : s.d, v.height(), v.width(), v.channels()};
}

}  // namespace

GridSummary run_grid(const ExperimentConfig& config, std::ostream& log) {
  config.validate();
  const Dataset data = load_dataset(config.source);
  if (data.volumes.size() < static_cast<std::size_t>(config.folds)) {
    throw std::invalid_argument("data set of " + std::to_string(data.volumes.size()) + " volumes is too small for " +
                                std::to_string(config.folds) + " folds");
  }
  const std::vector<ModelSpec> specs = expand_grid(config, data);
  const std::vector<Fold> folds = make_folds(data.volumes.size(), config.folds, config.fold_seed);
  fs::create_directories(config.output_dir);
  write_file(config.output_dir / "config.json", config_to_json(config));

  GridSummary summary;
  std::string cell_list;
  for (const auto& s : specs) {
    summary.cells.push_back(s.label());
    cell_list += s.label() + "\n";
  }
  write_file(config.output_dir / "cells.txt", cell_list);

  for (const ModelSpec& spec : specs) {
    for (int f = 0; f < config.folds; ++f) {
      const fs::path dir = config.output_dir / "cells" / spec.label() / ("fold" + std::to_string(f));
      const std::string marker = marker_for(config, spec, f, data.fingerprint);
      CellResult result;
      if (fs::exists(dir / "complete") && read_file(dir / "complete") == marker + "\n" &&
          fs::exists(dir / "result.json")) {
        result.record = read_record(dir / "result.json");
        result.reused = true;
        ++summary.reused;
        log << "skip  " << spec.label() << " fold " << f << " (complete)\n";
        summary.results.push_back(std::move(result));
        continue;
      }
      fs::create_directories(dir);
      fs::remove(dir / "complete");
      const Fold& fold = folds[static_cast<std::size_t>(f)];
      TrainConfig tc = config.train;
      tc.seed = Rng::mix(config.train.seed, static_cast<std::uint64_t>(f));
      SegmentationModel model(spec, tc.seed);

      const auto t0 = std::chrono::steady_clock::now();
      result.history = run_training(model, data.select(fold.train), data.select(fold.val), data.num_classes, tc);
      const auto t1 = std::chrono::steady_clock::now();
      const auto test = data.select(fold.test);
      const EvalResult eval = evaluate(model, test, data.num_classes, tc.loss, tc.effective_batch_size(spec.mode));
      const auto t2 = std::chrono::steady_clock::now();

      result.record = {spec.label(), f, eval.mean_dsc, eval.per_class_dsc};
      result.cost = profile_model(model, sample_shape(spec, data.volumes[0]));
      result.cost.train_seconds_per_epoch = std::chrono::duration<double>(t1 - t0).count() /
                                            static_cast<double>(std::max<std::size_t>(1, result.history.epochs.size()));
      Index samples = 0;
      for (const auto* v : test)
        samples += spec.mode == Mode::kEnd2End3D
                       ? static_cast<Index>(depth_tiles(v->depth(), patch_depth_3d(v->depth())).size())
                       : v->depth();
      result.cost.predict_seconds_per_sample =
          std::chrono::duration<double>(t2 - t1).count() / static_cast<double>(samples);

      write_history(dir / "history.csv", result.history);
      write_file(dir / "result.json", record_json(result).dump(2) + "\n");
      write_file(dir / "cost.csv", cost_csv_header() + "\n" + cost_csv_row(result.cost) + "\n");
      write_file(dir / "complete", marker + "\n");
      ++summary.trained;
      log << "train " << spec.label() << " fold " << f << ": " << result.history.epochs.size() << " epochs ("
          << to_string(result.history.stop_reason) << "), test DSC " << eval.mean_dsc << "\n";
      summary.results.push_back(std::move(result));
    }
  }

  std::vector<RunRecord> records;
  for (const auto& r : summary.results) records.push_back(r.record);
  summary.aggregate_path = config.output_dir / "aggregate.csv";
  write_file(summary.aggregate_path, aggregate_csv(aggregate_results(records, summary.cells)));
  return summary;
}

std::vector<AggregateRow> aggregate_directory(const fs::path& dir) {
  if (!fs::exists(dir / "cells.txt")) throw std::runtime_error(dir.string() + " has no cells.txt; not a run directory");
  std::vector<std::string> cells;
  {
    std::istringstream is(read_file(dir / "cells.txt"));
    for (std::string line; std::getline(is, line);)
      if (!line.empty()) cells.push_back(line);
  }
  std::vector<RunRecord> records;
  for (const auto& c : cells) {
    const fs::path cell_dir = dir / "cells" / c;
    if (!fs::is_directory(cell_dir)) continue;
    std::vector<fs::path> folds;
    for (const auto& e : fs::directory_iterator(cell_dir))
      if (fs::exists(e.path() / "complete") && fs::exists(e.path() / "result.json")) folds.push_back(e.path());
    std::sort(folds.begin(), folds.end());
    for (const auto& f : folds) records.push_back(read_record(f / "result.json"));
  }
  return aggregate_results(records, cells);
}

std::vector<CostReport> profile_grid(const ExperimentConfig& config) {
  config.validate();
  const Dataset data = load_dataset(config.source);
  std::vector<CostReport> out;
  for (const ModelSpec& spec : expand_grid(config, data)) {
    SegmentationModel model(spec, config.train.seed);
    const Shape one = sample_shape(spec, data.volumes[0]);
    CostReport r = profile_model(model, one);
    r.predict_seconds_per_sample = time_prediction(model, one, 3);

    // One timed optimisation step, scaled to the batches of an epoch over
    // the whole data set.
    const int bs = config.train.effective_batch_size(spec.mode);
    Shape batch_shape = one;
    batch_shape[0] = bs;
    const Tensor x(batch_shape, 0.5);
    std::vector<std::uint8_t> labels(static_cast<std::size_t>(bs * one[2] * one[3] *
                                                              (spec.mode == Mode::kEnd2End3D ? one[1] : 1)),
                                     0);
    const Shape label_shape = spec.mode == Mode::kEnd2End3D ? Shape{bs, one[1], one[2], one[3]}
                                                              : Shape{bs, one[2], one[3]};
    const Tensor target = one_hot(labels, label_shape, spec.num_classes);
    const auto t0 = std::chrono::steady_clock::now();
    {
      Graph g;
      Var loss = losses::combined(model.forward(g, g.input(x, false), true), g.constant(target), config.train.loss);
      g.backward(loss);
    }
    const double step = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    Index samples = 0;
    for (const auto& v : data.volumes)
      samples += spec.mode == Mode::kEnd2End3D
                     ? static_cast<Index>(depth_tiles(v.depth(), patch_depth_3d(v.depth())).size())
                     : v.depth();
    r.train_seconds_per_epoch = step * static_cast<double>((samples + bs - 1) / bs);
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rendering

namespace {

constexpr std::array<std::array<unsigned char, 3>, 8> kPalette{{{230, 25, 75},
                                                               {60, 180, 75},
                                                               {0, 130, 200},
                                                               {255, 225, 25},
                                                               {145, 30, 180},
                                                               {70, 240, 240},
                                                               {245, 130, 48},
                                                               {240, 50, 230}}};

}  // namespace

std::string render_slice_ppm(const LabeledVolume& volume, std::span<const std::uint8_t> labels, Index slice) {
  if (slice < 0 || slice >= volume.depth()) {
    throw std::out_of_range("slice " + std::to_string(slice) + " outside [0, " + std::to_string(volume.depth()) + ")");
  }
  if (static_cast<Index>(labels.size()) != volume.depth() * volume.height() * volume.width()) {
    throw std::invalid_argument("label map does not match the volume");
  }
  const Index H = volume.height(), W = volume.width(), C = volume.channels();
  double lo = 0.0, hi = 0.0;
  for (Index i = 0; i < H * W; ++i) {
    const double v = volume.image[(slice * H * W + i) * C];
    lo = i == 0 ? v : std::min(lo, v);
    hi = i == 0 ? v : std::max(hi, v);
  }
  std::string out = "P6\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  for (Index i = 0; i < H * W; ++i) {
    const std::uint8_t l = labels[static_cast<std::size_t>(slice * H * W + i)];
    if (l > 0) {
      const auto& c = kPalette[static_cast<std::size_t>(l - 1) % kPalette.size()];
      out.append(reinterpret_cast<const char*>(c.data()), 3);
      continue;
    }
    const double v = volume.image[(slice * H * W + i) * C];
    const auto g = static_cast<char>(hi > lo ? std::lround(255.0 * (v - lo) / (hi - lo)) : 128);
    out.append(3, g);
  }
  return out;
}

void render_slice(const LabeledVolume& volume, std::span<const std::uint8_t> labels, Index slice,
                  const fs::path& out) {
  const std::string bytes = render_slice_ppm(volume, labels, slice);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_file(out, bytes);
}

}  // namespace p3d
