#include "p3d/analysis.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "p3d/autograd.hpp"

namespace p3d {

std::vector<Region> connected_regions(std::span<const std::uint8_t> labels, const Shape& shape, std::uint8_t cls) {
  if (shape.size() != 3 || static_cast<Index>(labels.size()) != shape_size(shape)) {
    throw std::invalid_argument("label map does not match shape " + shape_string(shape));
  }
  const Index D = shape[0], H = shape[1], W = shape[2];
  std::vector<char> seen(labels.size(), 0);
  std::vector<Region> regions;
  std::vector<Index> stack;
  for (Index start = 0; start < D * H * W; ++start) {
    if (labels[static_cast<std::size_t>(start)] != cls || seen[static_cast<std::size_t>(start)]) continue;
    Region r;
    r.first_slice = start / (H * W);
    r.last_slice = r.first_slice;
    seen[static_cast<std::size_t>(start)] = 1;
    stack.assign(1, start);
    while (!stack.empty()) {
      const Index v = stack.back();
      stack.pop_back();
      ++r.voxel_count;
      const Index z = v / (H * W), y = (v / W) % H, x = v % W;
      r.first_slice = std::min(r.first_slice, z);
      r.last_slice = std::max(r.last_slice, z);
      for (Index dz = -1; dz <= 1; ++dz)
        for (Index dy = -1; dy <= 1; ++dy)
          for (Index dx = -1; dx <= 1; ++dx) {
            const Index nz = z + dz, ny = y + dy, nx = x + dx;
            if (nz < 0 || nz >= D || ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
            const auto n = static_cast<std::size_t>((nz * H + ny) * W + nx);
            if (labels[n] == cls && !seen[n]) {
              seen[n] = 1;
              stack.push_back(static_cast<Index>(n));
            }
          }
    }
    regions.push_back(r);
  }
  return regions;
}

double structure_depth(const std::vector<const LabeledVolume*>& volumes, std::uint8_t cls, DepthAggregation agg) {
  double total = 0.0;
  int patients = 0;
  for (const auto* v : volumes) {
    const auto regions = connected_regions(v->labels, v->label_shape(), cls);
    if (regions.empty()) continue;
    double sum = 0.0;
    for (const auto& r : regions) sum += static_cast<double>(r.depth());
    const auto R = static_cast<double>(regions.size());
    total += agg == DepthAggregation::kRegionMean ? sum / R : sum / (R * (R + 1.0) / 2.0);
    ++patients;
  }
  if (patients == 0) throw std::invalid_argument("class " + std::to_string(cls) + " is absent from every volume");
  return total / patients;
}

double structure_size(const std::vector<const LabeledVolume*>& volumes, std::uint8_t cls) {
  if (volumes.empty()) throw std::invalid_argument("no volumes");
  const Shape s = volumes[0]->label_shape();
  double count = 0.0;
  for (const auto* v : volumes) {
    if (v->label_shape() != s) throw std::invalid_argument("structure_size needs volumes of equal extents");
    count += static_cast<double>(std::count(v->labels.begin(), v->labels.end(), cls));
  }
  return count / (static_cast<double>(volumes.size()) * static_cast<double>(shape_size(s)));
}

std::vector<SliceCentroid> slice_centroids(const LabeledVolume& volume, std::uint8_t cls) {
  const Index D = volume.depth(), H = volume.height(), W = volume.width();
  std::vector<SliceCentroid> out(static_cast<std::size_t>(D));
  for (Index z = 0; z < D; ++z) {
    double sy = 0.0, sx = 0.0;
    Index n = 0;
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x)
        if (volume.label(z, y, x) == cls) {
          sy += static_cast<double>(y);
          sx += static_cast<double>(x);
          ++n;
        }
    if (n > 0) out[static_cast<std::size_t>(z)] = {true, sy / static_cast<double>(n), sx / static_cast<double>(n)};
  }
  return out;
}

double structure_displacement(const std::vector<const LabeledVolume*>& volumes, std::uint8_t cls) {
  if (volumes.empty()) throw std::invalid_argument("no volumes");
  double total = 0.0;
  bool any_pair = false;
  const Index D = volumes[0]->depth();
  for (const auto* v : volumes) {
    if (v->depth() != D) throw std::invalid_argument("structure_displacement needs volumes of equal depth");
    const auto c = slice_centroids(*v, cls);
    for (std::size_t s = 1; s < c.size(); ++s) {
      if (!c[s - 1].present || !c[s].present) continue;
      total += std::hypot(c[s].y - c[s - 1].y, c[s].x - c[s - 1].x);
      any_pair = true;
    }
  }
  if (!any_pair) {
    throw std::invalid_argument("class " + std::to_string(cls) + " never occupies two consecutive slices");
  }
  return total / (static_cast<double>(volumes.size()) * static_cast<double>(D));
}

StructureFeatures compute_features(const std::vector<const LabeledVolume*>& volumes, int num_classes,
                                   DepthAggregation agg) {
  StructureFeatures f;
  std::vector<double> phi, ups, psi;
  for (int c = 1; c < num_classes; ++c) {
    ClassFeatures cf;
    cf.cls = c;
    const auto cls = static_cast<std::uint8_t>(c);
    cf.upsilon = structure_size(volumes, cls);
    cf.present = cf.upsilon > 0.0;
    if (cf.present) {
      cf.phi = structure_depth(volumes, cls, agg);
      try {
        cf.psi = structure_displacement(volumes, cls);
      } catch (const std::invalid_argument&) {
        cf.psi = 0.0;
      }
      phi.push_back(cf.phi);
      ups.push_back(cf.upsilon);
      psi.push_back(cf.psi);
    }
    f.classes.push_back(cf);
  }
  auto summarize = [](const std::vector<double>& v) {
    if (v.empty()) return std::array<double, 3>{0.0, 0.0, 0.0};
    double sum = 0.0;
    for (double x : v) sum += x;
    return std::array<double, 3>{*std::min_element(v.begin(), v.end()), sum / static_cast<double>(v.size()),
                                 *std::max_element(v.begin(), v.end())};
  };
  f.phi = summarize(phi);
  f.upsilon = summarize(ups);
  f.psi = summarize(psi);
  return f;
}

namespace {

double cross_section(const Structure& s, double z) {
  const double dz = (z - s.center_z) / s.radius_z;
  switch (s.family) {
    case ShapeFamily::kEllipsoid: return std::numbers::pi * s.radius_y * s.radius_x * std::max(0.0, 1.0 - dz * dz);
    case ShapeFamily::kCylinder: return std::numbers::pi * s.radius_y * s.radius_x;
    case ShapeFamily::kBox: return (2.0 * s.radius_y + 1.0) * (2.0 * s.radius_x + 1.0);
  }
  return 0.0;
}

}  // namespace

ClassFeatures metadata_features(const std::vector<const Phantom*>& phantoms, int cls) {
  if (phantoms.empty()) throw std::invalid_argument("no phantoms");
  ClassFeatures f;
  f.cls = cls;
  const LabeledVolume& first = phantoms[0]->volume;
  const double P = static_cast<double>(phantoms.size());
  const Index D = first.depth();
  double phi = 0.0, volume = 0.0, psi = 0.0;
  int with_class = 0;
  for (const Phantom* p : phantoms) {
    double depth_sum = 0.0;
    int regions = 0;
    std::vector<double> wy(static_cast<std::size_t>(D), 0.0), wx(wy.size(), 0.0), w(wy.size(), 0.0);
    for (const auto& info : p->structures) {
      if (info.structure.label != cls || info.depth() == 0) continue;
      depth_sum += static_cast<double>(info.depth());
      ++regions;
      volume += info.analytic_volume;
      for (Index z = info.first_slice; z <= info.last_slice; ++z) {
        const auto& c = info.centroid_path[static_cast<std::size_t>(z - info.first_slice)];
        const double a = cross_section(info.structure, static_cast<double>(z));
        wy[static_cast<std::size_t>(z)] += a * c[0];
        wx[static_cast<std::size_t>(z)] += a * c[1];
        w[static_cast<std::size_t>(z)] += a;
      }
    }
    if (regions == 0) continue;
    ++with_class;
    phi += depth_sum / regions;
    for (std::size_t z = 1; z < w.size(); ++z)
      if (w[z - 1] > 0.0 && w[z] > 0.0)
        psi += std::hypot(wy[z] / w[z] - wy[z - 1] / w[z - 1], wx[z] / w[z] - wx[z - 1] / w[z - 1]);
  }
  f.present = with_class > 0;
  if (f.present) f.phi = phi / with_class;
  f.upsilon = volume / (P * static_cast<double>(shape_size(first.label_shape())));
  f.psi = psi / (P * static_cast<double>(D));
  return f;
}

std::string features_csv(const StructureFeatures& f) {
  std::ostringstream os;
  os.precision(10);
  os << "class,present,phi,upsilon,psi\n";
  for (const auto& c : f.classes)
    os << c.cls << ',' << (c.present ? 1 : 0) << ',' << c.phi << ',' << c.upsilon << ',' << c.psi << '\n';
  const char* names[3] = {"min", "mean", "max"};
  for (int i = 0; i < 3; ++i) os << names[i] << ",," << f.phi[i] << ',' << f.upsilon[i] << ',' << f.psi[i] << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------

std::int64_t count_params(const SegmentationModel& model) { return model.parameter_count(); }

std::int64_t count_flops(const SegmentationModel& model, const Shape& input) {
  CostTrace c;
  model.trace(input, c);
  return 2 * c.macs;
}

CostReport profile_model(const SegmentationModel& model, const Shape& input) {
  CostReport r;
  r.label = model.spec().label();
  r.input_shape = input;
  CostTrace c;
  model.trace(input, c);
  r.parameter_count = model.parameter_count();
  r.flop_count = 2 * c.macs;
  r.activation_bytes = 2 * c.activation_elements * 8;
  r.parameter_bytes = 4 * r.parameter_count * 8;
  return r;
}

double time_prediction(SegmentationModel& model, const Shape& input, int repeats) {
  const Tensor x(input, 0.5);
  double total = 0.0;
  for (int i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Graph g;
    model.forward(g, g.input(x, false), false);
    total += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  return total / (repeats * static_cast<double>(input[0]));
}

std::string cost_csv_header() {
  return "model,input_shape,params,flops,activation_bytes,parameter_bytes,memory_bytes,train_s_per_epoch,"
         "predict_s_per_sample";
}

std::string cost_csv_row(const CostReport& r) {
  std::ostringstream os;
  std::string shape;
  for (std::size_t i = 0; i < r.input_shape.size(); ++i) shape += (i ? "x" : "") + std::to_string(r.input_shape[i]);
  os << r.label << ',' << shape << ',' << r.parameter_count << ',' << r.flop_count << ',' << r.activation_bytes
     << ',' << r.parameter_bytes << ',' << r.memory_estimate_bytes() << ',' << r.train_seconds_per_epoch << ','
     << r.predict_seconds_per_sample;
  return os.str();
}

// ---------------------------------------------------------------------------

namespace {

std::pair<double, double> mean_std(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - m) * (x - m);
  return {m, std::sqrt(var / static_cast<double>(v.size()))};
}

}  // namespace

std::vector<AggregateRow> aggregate_results(const std::vector<RunRecord>& records,
                                            const std::vector<std::string>& cells) {
  std::map<std::string, std::vector<const RunRecord*>> by_cell;
  for (const auto& c : cells) by_cell[c];
  for (const auto& r : records) {
    auto it = by_cell.find(r.cell);
    if (it == by_cell.end()) throw std::invalid_argument("run record for unexpected cell '" + r.cell + "'");
    it->second.push_back(&r);
  }
  std::vector<AggregateRow> rows;
  for (const auto& c : cells) {
    const auto& runs = by_cell[c];
    if (runs.empty()) throw std::invalid_argument("cell '" + c + "' has no completed runs");
    AggregateRow row;
    row.cell = c;
    row.runs = runs.size();
    std::vector<double> m;
    for (const auto* r : runs) m.push_back(r->mean_dsc);
    std::tie(row.mean, row.stddev) = mean_std(m);
    const std::size_t K = runs[0]->per_class_dsc.size();
    for (std::size_t k = 0; k < K; ++k) {
      std::vector<double> v;
      for (const auto* r : runs) {
        if (r->per_class_dsc.size() != K) throw std::invalid_argument("inconsistent class count in cell '" + c + "'");
        v.push_back(r->per_class_dsc[k]);
      }
      const auto [cm, cs] = mean_std(v);
      row.class_mean.push_back(cm);
      row.class_std.push_back(cs);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string aggregate_csv(const std::vector<AggregateRow>& rows) {
  std::ostringstream os;
  os.precision(10);
  os << "cell,runs,mean_dsc,std_dsc";
  const std::size_t K = rows.empty() ? 0 : rows[0].class_mean.size();
  for (std::size_t k = 0; k < K; ++k) os << ",dsc_c" << k << "_mean,dsc_c" << k << "_std";
  os << '\n';
  for (const auto& r : rows) {
    os << r.cell << ',' << r.runs << ',' << r.mean << ',' << r.stddev;
    for (std::size_t k = 0; k < r.class_mean.size(); ++k) os << ',' << r.class_mean[k] << ',' << r.class_std[k];
    os << '\n';
  }
  return os.str();
}

}  // namespace p3d
