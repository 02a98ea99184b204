#include "p3d/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "p3d/losses.hpp"
#include "p3d/rng.hpp"

namespace fs = std::filesystem;

namespace p3d {

void LabeledVolume::validate(int num_classes) const {
  if (image.rank() != 4) throw std::invalid_argument("image must be (D,H,W,C), got " + shape_string(image.shape()));
  if (static_cast<Index>(labels.size()) != depth() * height() * width()) {
    throw std::invalid_argument("label map of " + patient_id + " does not match image extents");
  }
  for (std::uint8_t l : labels)
    if (l >= num_classes) throw std::invalid_argument("label " + std::to_string(l) + " >= class count in " + patient_id);
}

std::string to_string(ShapeFamily f) {
  switch (f) {
    case ShapeFamily::kEllipsoid: return "ellipsoid";
    case ShapeFamily::kCylinder: return "cylinder";
    case ShapeFamily::kBox: return "box";
  }
  return "?";
}

ShapeFamily parse_shape_family(const std::string& s) {
  for (ShapeFamily f : {ShapeFamily::kEllipsoid, ShapeFamily::kCylinder, ShapeFamily::kBox})
    if (to_string(f) == s) return f;
  throw std::invalid_argument("unknown shape family '" + s + "'");
}

bool Structure::contains(double z, double y, double x) const {
  const auto [cy, cx] = center_at(z);
  const double dz = (z - center_z) / radius_z;
  const double dy = (y - cy) / radius_y;
  const double dx = (x - cx) / radius_x;
  constexpr double kTol = 1e-9;
  switch (family) {
    case ShapeFamily::kEllipsoid: return dz * dz + dy * dy + dx * dx <= 1.0 + kTol;
    case ShapeFamily::kCylinder: return std::abs(dz) <= 1.0 + kTol && dy * dy + dx * dx <= 1.0 + kTol;
    case ShapeFamily::kBox: return std::abs(dz) <= 1.0 + kTol && std::abs(dy) <= 1.0 + kTol && std::abs(dx) <= 1.0 + kTol;
  }
  return false;
}

int PhantomSpec::num_classes() const {
  int k = 1;
  for (const auto& r : recipes) k = std::max(k, r.label + 1);
  for (const auto& s : explicit_structures) k = std::max(k, s.label + 1);
  return std::max(k, 2);
}

namespace {

double analytic_volume(const Structure& s) {
  const double pi = std::numbers::pi;
  switch (s.family) {
    case ShapeFamily::kEllipsoid: return 4.0 / 3.0 * pi * s.radius_z * s.radius_y * s.radius_x;
    // axial extent counted in whole slices
    case ShapeFamily::kCylinder: return pi * s.radius_y * s.radius_x * (2.0 * s.radius_z + 1.0);
    case ShapeFamily::kBox: return (2.0 * s.radius_y + 1.0) * (2.0 * s.radius_x + 1.0) * (2.0 * s.radius_z + 1.0);
  }
  return 0.0;
}

struct Box3 {
  double z0, z1, y0, y1, x0, x1;
  bool overlaps(const Box3& o, double margin) const {
    return !(z1 + margin < o.z0 || o.z1 + margin < z0 || y1 + margin < o.y0 || o.y1 + margin < y0 ||
             x1 + margin < o.x0 || o.x1 + margin < x0);
  }
};

Box3 bounds(const Structure& s) {
  const double dy = std::abs(s.drift_y) * s.radius_z, dx = std::abs(s.drift_x) * s.radius_z;
  return {s.center_z - s.radius_z, s.center_z + s.radius_z, s.center_y - s.radius_y - dy,
          s.center_y + s.radius_y + dy, s.center_x - s.radius_x - dx, s.center_x + s.radius_x + dx};
}

Structure sample_structure(const StructureRecipe& r, const PhantomSpec& spec, Rng& rng) {
  Structure s;
  s.label = r.label;
  s.family = r.family;
  s.intensity_mean = r.intensity_mean;
  s.intensity_noise = r.intensity_noise;
  const Index depth = rng.uniform_int(r.depth_min, r.depth_max);
  s.radius_z = (static_cast<double>(depth) - 1.0) / 2.0;
  if (s.family == ShapeFamily::kEllipsoid) s.radius_z = static_cast<double>(depth) / 2.0;
  s.radius_y = rng.uniform(r.size_min, r.size_max);
  s.radius_x = rng.uniform(r.size_min, r.size_max);
  s.drift_y = rng.uniform(-r.drift_max, r.drift_max);
  s.drift_x = rng.uniform(-r.drift_max, r.drift_max);

  // Centre ranges that keep the whole drifting footprint inside the volume.
  const double half_z = std::max(s.radius_z, 0.0);
  const double reach_y = s.radius_y + std::abs(s.drift_y) * half_z;
  const double reach_x = s.radius_x + std::abs(s.drift_x) * half_z;
  const double zlo = half_z, zhi = static_cast<double>(spec.depth - 1) - half_z;
  const double ylo = reach_y, yhi = static_cast<double>(spec.height - 1) - reach_y;
  const double xlo = reach_x, xhi = static_cast<double>(spec.width - 1) - reach_x;
  if (zlo > zhi || ylo > yhi || xlo > xhi) {
    throw std::invalid_argument("structure of class " + std::to_string(r.label) + " cannot fit in a " +
                                std::to_string(spec.depth) + "x" + std::to_string(spec.height) + "x" +
                                std::to_string(spec.width) + " volume");
  }
  // Integer or half-integer axial centres keep the slice count exact.
  const double zc = rng.uniform(zlo, zhi);
  s.center_z = (depth % 2 == 1 || s.family == ShapeFamily::kEllipsoid) ? std::round(zc) : std::floor(zc) + 0.5;
  s.center_z = std::clamp(s.center_z, zlo, zhi);
  s.center_y = rng.uniform(ylo, yhi);
  s.center_x = rng.uniform(xlo, xhi);
  return s;
}

}  // namespace

Phantom generate_phantom(const PhantomSpec& spec) {
  if (spec.depth <= 0 || spec.height <= 0 || spec.width <= 0 || spec.channels <= 0) {
    throw std::invalid_argument("phantom extents and channels must be positive");
  }
  Rng rng(spec.seed);
  std::vector<Structure> placed;
  std::vector<Box3> boxes;
  for (const auto& recipe : spec.recipes) {
    for (int i = 0; i < recipe.count; ++i) {
      bool ok = false;
      for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
        Structure s = sample_structure(recipe, spec, rng);
        const Box3 b = bounds(s);
        if (std::none_of(boxes.begin(), boxes.end(), [&](const Box3& o) { return b.overlaps(o, 1.0); })) {
          placed.push_back(s);
          boxes.push_back(b);
          ok = true;
        }
      }
      if (!ok) {
        throw std::invalid_argument("structure of class " + std::to_string(recipe.label) +
                                    " cannot fit without overlapping earlier structures");
      }
    }
  }
  placed.insert(placed.end(), spec.explicit_structures.begin(), spec.explicit_structures.end());

  const Index D = spec.depth, H = spec.height, W = spec.width, C = spec.channels;
  Phantom out;
  out.num_classes = spec.num_classes();
  out.volume.patient_id = spec.patient_id;
  out.volume.spacing = spec.spacing;
  out.volume.labels.assign(static_cast<std::size_t>(D * H * W), 0);
  std::vector<int> owner(static_cast<std::size_t>(D * H * W), -1);
  for (std::size_t si = 0; si < placed.size(); ++si) {
    const Structure& s = placed[si];
    for (Index z = 0; z < D; ++z)
      for (Index y = 0; y < H; ++y)
        for (Index x = 0; x < W; ++x)
          if (s.contains(static_cast<double>(z), static_cast<double>(y), static_cast<double>(x))) {
            const auto v = static_cast<std::size_t>((z * H + y) * W + x);
            out.volume.labels[v] = static_cast<std::uint8_t>(s.label);
            owner[v] = static_cast<int>(si);
          }
  }

  for (std::size_t si = 0; si < placed.size(); ++si) {
    StructureInfo info;
    info.structure = placed[si];
    info.analytic_volume = analytic_volume(placed[si]);
    for (Index z = 0; z < D; ++z)
      for (Index i = 0; i < H * W; ++i)
        if (owner[static_cast<std::size_t>(z * H * W + i)] == static_cast<int>(si)) {
          ++info.voxel_count;
          if (info.first_slice < 0) info.first_slice = z;
          info.last_slice = z;
        }
    for (Index z = info.first_slice; info.first_slice >= 0 && z <= info.last_slice; ++z)
      info.centroid_path.push_back(placed[si].center_at(static_cast<double>(z)));
    out.structures.push_back(std::move(info));
  }

  out.volume.image = Tensor({D, H, W, C});
  Tensor& img = out.volume.image;
  for (Index v = 0; v < D * H * W; ++v) {
    const int o = owner[static_cast<std::size_t>(v)];
    const double mean = o < 0 ? spec.background_mean : placed[static_cast<std::size_t>(o)].intensity_mean;
    const double noise = o < 0 ? spec.background_noise : placed[static_cast<std::size_t>(o)].intensity_noise;
    for (Index c = 0; c < C; ++c) img[v * C + c] = mean * (1.0 + 0.25 * static_cast<double>(c)) + noise * rng.normal();
  }
  return out;
}

std::vector<std::string> phantom_recipe_names() {
  return {"toy", "brain_tumor", "kidney", "brain_tissue", "head_neck", "prostate"};
}

PhantomSpec phantom_recipe(const std::string& name, Index depth, Index height, Index width, std::uint64_t seed) {
  PhantomSpec s;
  s.depth = depth;
  s.height = height;
  s.width = width;
  s.seed = seed;
  s.patient_id = name + "-" + std::to_string(seed);
  const double m = static_cast<double>(std::min(height, width));
  const auto dfrac = [depth](double f) { return std::max<Index>(2, static_cast<Index>(std::round(f * static_cast<double>(depth)))); };
  auto recipe = [&](int label, int count, ShapeFamily fam, double smin, double smax, double dmin, double dmax,
                    double drift, double mean) {
    StructureRecipe r;
    r.label = label;
    r.count = count;
    r.family = fam;
    r.size_min = smin * m;
    r.size_max = smax * m;
    r.depth_min = dfrac(dmin);
    r.depth_max = std::max(r.depth_min, dfrac(dmax));
    r.drift_max = drift;
    r.intensity_mean = mean;
    r.intensity_noise = 0.1;
    return r;
  };
  using F = ShapeFamily;
  if (name == "toy") {
    s.recipes = {recipe(1, 1, F::kCylinder, 0.12, 0.18, 0.4, 0.7, 0.3, 1.0),
                 recipe(2, 1, F::kBox, 0.08, 0.12, 0.3, 0.5, 0.0, -1.0)};
  } else if (name == "brain_tumor") {
    s.channels = 4;
    s.recipes = {recipe(1, 1, F::kEllipsoid, 0.10, 0.14, 0.5, 0.7, 0.1, 0.8),
                 recipe(2, 1, F::kEllipsoid, 0.06, 0.09, 0.3, 0.5, 0.1, 1.6),
                 recipe(3, 1, F::kEllipsoid, 0.04, 0.06, 0.2, 0.3, 0.1, -0.8)};
  } else if (name == "kidney") {
    s.recipes = {recipe(1, 2, F::kEllipsoid, 0.08, 0.11, 0.5, 0.8, 0.2, 1.0),
                 recipe(2, 1, F::kEllipsoid, 0.04, 0.06, 0.2, 0.3, 0.1, 2.0)};
  } else if (name == "brain_tissue") {
    s.recipes = {recipe(1, 1, F::kBox, 0.12, 0.16, 0.6, 0.8, 0.0, 0.5),
                 recipe(2, 1, F::kEllipsoid, 0.10, 0.14, 0.6, 0.8, 0.0, 1.0),
                 recipe(3, 1, F::kCylinder, 0.05, 0.07, 0.5, 0.7, 0.05, -0.5)};
  } else if (name == "head_neck") {
    s.recipes = {recipe(1, 1, F::kCylinder, 0.05, 0.07, 0.6, 0.9, 0.5, 1.0),
                 recipe(2, 1, F::kCylinder, 0.04, 0.06, 0.3, 0.5, 0.4, -1.0),
                 recipe(3, 1, F::kEllipsoid, 0.06, 0.08, 0.3, 0.5, 0.2, 1.5),
                 recipe(4, 1, F::kBox, 0.04, 0.06, 0.2, 0.4, 0.0, 2.0)};
  } else if (name == "prostate") {
    s.recipes = {recipe(1, 1, F::kEllipsoid, 0.12, 0.16, 0.4, 0.6, 0.1, 0.7),
                 recipe(2, 1, F::kEllipsoid, 0.06, 0.08, 0.3, 0.5, 0.1, 1.4)};
  } else {
    throw std::invalid_argument("unknown phantom recipe '" + name + "'");
  }
  return s;
}

// ---------------------------------------------------------------------------

double normalize_ct(double hu) { return (std::clamp(hu, -1000.0, 2000.0) - 500.0) / 1500.0; }

Tensor normalize_ct(const Tensor& image) {
  Tensor out = image;
  for (double& v : out.values()) v = normalize_ct(v);
  return out;
}

Tensor normalize_zscore(const Tensor& image) {
  const auto n = static_cast<double>(image.size());
  if (image.size() == 0) throw std::invalid_argument("cannot normalize an empty volume");
  const double mean = image.sum() / n;
  double var = 0.0;
  for (double v : image.values()) var += (v - mean) * (v - mean);
  var /= n;
  if (!(var > 0.0)) throw std::invalid_argument("cannot z-score normalize a constant volume");
  const double inv = 1.0 / std::sqrt(var);
  Tensor out = image;
  for (double& v : out.values()) v = (v - mean) * inv;
  return out;
}

namespace {

// Source coordinate of output voxel i when `in` samples span `out` samples.
double source_coord(Index i, double ratio, Index in) {
  const double s = (static_cast<double>(i) + 0.5) * ratio - 0.5;
  return std::clamp(s, 0.0, static_cast<double>(in - 1));
}

LabeledVolume resample(const LabeledVolume& v, const std::array<Index, 3>& out) {
  const std::array<Index, 3> in{v.depth(), v.height(), v.width()};
  const Index C = v.channels();
  std::array<double, 3> ratio{};
  for (std::size_t a = 0; a < 3; ++a) {
    if (out[a] <= 0) throw std::invalid_argument("resampled extent must be positive");
    ratio[a] = static_cast<double>(in[a]) / static_cast<double>(out[a]);
  }
  LabeledVolume r;
  r.patient_id = v.patient_id;
  r.spacing = v.spacing;
  r.image = Tensor({out[0], out[1], out[2], C});
  r.labels.resize(static_cast<std::size_t>(out[0] * out[1] * out[2]));
  for (Index z = 0; z < out[0]; ++z) {
    const double sz = source_coord(z, ratio[0], in[0]);
    const Index z0 = static_cast<Index>(std::floor(sz)), z1 = std::min(z0 + 1, in[0] - 1);
    const double fz = sz - static_cast<double>(z0);
    for (Index y = 0; y < out[1]; ++y) {
      const double sy = source_coord(y, ratio[1], in[1]);
      const Index y0 = static_cast<Index>(std::floor(sy)), y1 = std::min(y0 + 1, in[1] - 1);
      const double fy = sy - static_cast<double>(y0);
      for (Index x = 0; x < out[2]; ++x) {
        const double sx = source_coord(x, ratio[2], in[2]);
        const Index x0 = static_cast<Index>(std::floor(sx)), x1 = std::min(x0 + 1, in[2] - 1);
        const double fx = sx - static_cast<double>(x0);
        const Index o = (z * out[1] + y) * out[2] + x;
        for (Index c = 0; c < C; ++c) {
          auto at = [&](Index zz, Index yy, Index xx) { return v.image[((zz * in[1] + yy) * in[2] + xx) * C + c]; };
          const double c00 = at(z0, y0, x0) * (1 - fx) + at(z0, y0, x1) * fx;
          const double c01 = at(z0, y1, x0) * (1 - fx) + at(z0, y1, x1) * fx;
          const double c10 = at(z1, y0, x0) * (1 - fx) + at(z1, y0, x1) * fx;
          const double c11 = at(z1, y1, x0) * (1 - fx) + at(z1, y1, x1) * fx;
          r.image[o * C + c] = (c00 * (1 - fy) + c01 * fy) * (1 - fz) + (c10 * (1 - fy) + c11 * fy) * fz;
        }
        const Index nz = std::lround(sz), ny = std::lround(sy), nx = std::lround(sx);
        r.labels[static_cast<std::size_t>(o)] = v.label(nz, ny, nx);
      }
    }
  }
  return r;
}

}  // namespace

std::array<Index, 3> resampled_extent(const std::array<Index, 3>& extent, const Spacing& from, const Spacing& to) {
  std::array<Index, 3> out{};
  for (std::size_t a = 0; a < 3; ++a) {
    if (!(from[a] > 0.0) || !(to[a] > 0.0)) throw std::invalid_argument("voxel spacing must be positive");
    out[a] = std::max<Index>(1, std::lround(static_cast<double>(extent[a]) * from[a] / to[a]));
  }
  return out;
}

LabeledVolume standardize_volume(const LabeledVolume& volume, const StandardizeOptions& opts) {
  for (std::size_t a = 0; a < 3; ++a) {
    if (opts.pad_shape[a] <= 0 || opts.final_shape[a] <= 0) {
      throw std::invalid_argument("pad and final shapes must be positive");
    }
  }
  const auto target = resampled_extent({volume.depth(), volume.height(), volume.width()}, volume.spacing,
                                       opts.target_spacing);
  LabeledVolume r = resample(volume, target);
  r.spacing = opts.target_spacing;
  for (std::size_t a = 0; a < 3; ++a) {
    if (opts.pad_shape[a] < target[a]) {
      throw std::invalid_argument("pad shape is smaller than the resampled shape on axis " + std::to_string(a));
    }
  }
  // Symmetric zero padding; the odd voxel goes to the far side.
  const Index C = r.channels();
  const auto& P = opts.pad_shape;
  std::array<Index, 3> lead{};
  for (std::size_t a = 0; a < 3; ++a) lead[a] = (P[a] - target[a]) / 2;
  LabeledVolume padded;
  padded.patient_id = r.patient_id;
  padded.image = Tensor({P[0], P[1], P[2], C});
  padded.labels.assign(static_cast<std::size_t>(P[0] * P[1] * P[2]), 0);
  for (Index z = 0; z < target[0]; ++z)
    for (Index y = 0; y < target[1]; ++y)
      for (Index x = 0; x < target[2]; ++x) {
        const Index src = (z * target[1] + y) * target[2] + x;
        const Index dst = ((z + lead[0]) * P[1] + y + lead[1]) * P[2] + x + lead[2];
        for (Index c = 0; c < C; ++c) padded.image[dst * C + c] = r.image[src * C + c];
        padded.labels[static_cast<std::size_t>(dst)] = r.labels[static_cast<std::size_t>(src)];
      }
  LabeledVolume out = resample(padded, opts.final_shape);
  for (std::size_t a = 0; a < 3; ++a) {
    out.spacing[a] = opts.target_spacing[a] * static_cast<double>(P[a]) / static_cast<double>(opts.final_shape[a]);
  }
  return out;
}

// ---------------------------------------------------------------------------

Tensor SliceStackSample::target_one_hot() const {
  const Index H = height(), W = width();
  Shape s = target_slices == 1 ? Shape{H, W} : Shape{target_slices, H, W};
  return one_hot(target, s, num_classes);
}

namespace {

void copy_slice(const LabeledVolume& v, Index src, Tensor& dst, Index slot) {
  const Index n = v.height() * v.width() * v.channels();
  std::copy_n(v.image.data() + src * n, n, dst.data() + slot * n);
}

}  // namespace

SliceStackSample extract_stack(const LabeledVolume& volume, Index center, int d, int num_classes) {
  if (d < 1 || d % 2 == 0) throw std::invalid_argument("slice stack depth must be odd, got " + std::to_string(d));
  const Index D = volume.depth();
  if (center < 0 || center >= D) throw std::out_of_range("centre slice out of range");
  SliceStackSample s;
  s.input = Tensor({d, volume.height(), volume.width(), volume.channels()});
  const Index half = d / 2;
  for (Index j = 0; j < d; ++j) copy_slice(volume, std::clamp(center + j - half, Index{0}, D - 1), s.input, j);
  const Index hw = volume.height() * volume.width();
  s.target.assign(volume.labels.begin() + center * hw, volume.labels.begin() + (center + 1) * hw);
  s.target_slices = 1;
  s.center_index = center;
  s.num_classes = num_classes;
  return s;
}

SliceStackSample extract_patch(const LabeledVolume& volume, Index start, Index depth, int num_classes) {
  if (depth <= 0 || start < 0 || start + depth > volume.depth()) {
    throw std::out_of_range("patch [" + std::to_string(start) + ", " + std::to_string(start + depth) +
                            ") outside volume depth " + std::to_string(volume.depth()));
  }
  SliceStackSample s;
  s.input = Tensor({depth, volume.height(), volume.width(), volume.channels()});
  for (Index j = 0; j < depth; ++j) copy_slice(volume, start + j, s.input, j);
  const Index hw = volume.height() * volume.width();
  s.target.assign(volume.labels.begin() + start * hw, volume.labels.begin() + (start + depth) * hw);
  s.target_slices = depth;
  s.center_index = start + depth / 2;
  s.num_classes = num_classes;
  return s;
}

std::vector<Index> depth_tiles(Index volume_depth, Index patch_depth) {
  if (patch_depth <= 0 || volume_depth < patch_depth) {
    throw std::invalid_argument("patch depth " + std::to_string(patch_depth) + " does not fit volume depth " +
                                std::to_string(volume_depth));
  }
  std::vector<Index> starts;
  for (Index s = 0; s + patch_depth <= volume_depth; s += patch_depth) starts.push_back(s);
  if (starts.back() + patch_depth < volume_depth) starts.push_back(volume_depth - patch_depth);
  return starts;
}

AugmentParams AugmentParams::none() {
  AugmentParams p;
  p.p_flip = p.p_rotate = p.p_shear = p.p_zoom = p.p_elastic = 0.0;
  return p;
}

SliceStackSample flip_horizontal(const SliceStackSample& sample) {
  SliceStackSample out = sample;
  const Index S = sample.input.dim(0), H = sample.height(), W = sample.width(), C = sample.input.dim(3);
  for (Index s = 0; s < S; ++s)
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x)
        for (Index c = 0; c < C; ++c)
          out.input[((s * H + y) * W + x) * C + c] = sample.input[((s * H + y) * W + (W - 1 - x)) * C + c];
  for (Index t = 0; t < sample.target_slices; ++t)
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x)
        out.target[static_cast<std::size_t>((t * H + y) * W + x)] =
            sample.target[static_cast<std::size_t>((t * H + y) * W + (W - 1 - x))];
  return out;
}

namespace {

std::vector<double> gaussian_smooth(const std::vector<double>& f, Index H, Index W, double sigma) {
  const Index r = std::max<Index>(1, static_cast<Index>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double ks = 0.0;
  for (Index i = -r; i <= r; ++i) {
    k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    ks += k[static_cast<std::size_t>(i + r)];
  }
  for (double& v : k) v /= ks;
  std::vector<double> tmp(f.size()), out(f.size());
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) {
      double acc = 0.0;
      for (Index i = -r; i <= r; ++i)
        acc += k[static_cast<std::size_t>(i + r)] * f[static_cast<std::size_t>(y * W + std::clamp(x + i, Index{0}, W - 1))];
      tmp[static_cast<std::size_t>(y * W + x)] = acc;
    }
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) {
      double acc = 0.0;
      for (Index i = -r; i <= r; ++i)
        acc += k[static_cast<std::size_t>(i + r)] * tmp[static_cast<std::size_t>(std::clamp(y + i, Index{0}, H - 1) * W + x)];
      out[static_cast<std::size_t>(y * W + x)] = acc;
    }
  return out;
}

}  // namespace

SliceStackSample augment(const SliceStackSample& sample, const AugmentParams& params, std::uint64_t seed) {
  Rng rng(seed);
  // Every draw happens unconditionally so the stream does not depend on
  // which transforms fire.
  const bool do_flip = rng.bernoulli(params.p_flip) && params.allow_flip;
  const bool do_rot = rng.bernoulli(params.p_rotate);
  const bool do_shear = rng.bernoulli(params.p_shear);
  const bool do_zoom = rng.bernoulli(params.p_zoom);
  const bool do_elastic = rng.bernoulli(params.p_elastic);
  const double angle = rng.uniform(-params.rotation_deg, params.rotation_deg) * std::numbers::pi / 180.0;
  const double shear = rng.uniform(-params.shear, params.shear);
  const double zoom = rng.uniform(params.zoom_min, params.zoom_max);

  SliceStackSample out = do_flip ? flip_horizontal(sample) : sample;
  if (!(do_rot || do_shear || do_zoom || do_elastic)) return out;

  const Index S = sample.input.dim(0), H = sample.height(), W = sample.width(), C = sample.input.dim(3);
  std::vector<double> ey(static_cast<std::size_t>(H * W), 0.0), ex(ey.size(), 0.0);
  if (do_elastic) {
    for (auto& v : ey) v = rng.uniform(-1.0, 1.0);
    for (auto& v : ex) v = rng.uniform(-1.0, 1.0);
    ey = gaussian_smooth(ey, H, W, params.elastic_sigma);
    ex = gaussian_smooth(ex, H, W, params.elastic_sigma);
    for (auto& v : ey) v *= params.elastic_alpha;
    for (auto& v : ex) v *= params.elastic_alpha;
  }
  const double th = do_rot ? angle : 0.0;
  const double sh = do_shear ? shear : 0.0;
  const double inv_zoom = do_zoom ? 1.0 / zoom : 1.0;
  // Sampling matrix: rotation * shear / zoom, about the image centre.
  const double a00 = std::cos(th) * inv_zoom, a01 = (std::cos(th) * sh - std::sin(th)) * inv_zoom;
  const double a10 = std::sin(th) * inv_zoom, a11 = (std::sin(th) * sh + std::cos(th)) * inv_zoom;
  const double cy = static_cast<double>(H - 1) / 2.0, cx = static_cast<double>(W - 1) / 2.0;

  const SliceStackSample src = out;
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) {
      const double py = static_cast<double>(y) - cy, px = static_cast<double>(x) - cx;
      const auto e = static_cast<std::size_t>(y * W + x);
      const double sy = std::clamp(a00 * py + a01 * px + cy + ey[e], 0.0, static_cast<double>(H - 1));
      const double sx = std::clamp(a10 * py + a11 * px + cx + ex[e], 0.0, static_cast<double>(W - 1));
      const Index y0 = static_cast<Index>(std::floor(sy)), x0 = static_cast<Index>(std::floor(sx));
      const Index y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
      const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
      for (Index s = 0; s < S; ++s)
        for (Index c = 0; c < C; ++c) {
          auto at = [&](Index yy, Index xx) { return src.input[((s * H + yy) * W + xx) * C + c]; };
          out.input[((s * H + y) * W + x) * C + c] =
              (at(y0, x0) * (1 - fx) + at(y0, x1) * fx) * (1 - fy) + (at(y1, x0) * (1 - fx) + at(y1, x1) * fx) * fy;
        }
      const Index ny = std::lround(sy), nx = std::lround(sx);
      for (Index t = 0; t < sample.target_slices; ++t)
        out.target[static_cast<std::size_t>((t * H + y) * W + x)] =
            src.target[static_cast<std::size_t>((t * H + ny) * W + nx)];
    }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<Fold> make_folds(std::size_t num_patients, int k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("fold count must be at least 2");
  if (num_patients < static_cast<std::size_t>(k)) {
    throw std::invalid_argument("data set of " + std::to_string(num_patients) + " patients is too small for " +
                                std::to_string(k) + " folds");
  }
  std::vector<std::size_t> order(num_patients);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<Fold> folds;
  for (int f = 0; f < k; ++f) {
    const std::size_t lo = num_patients * static_cast<std::size_t>(f) / static_cast<std::size_t>(k);
    const std::size_t hi = num_patients * static_cast<std::size_t>(f + 1) / static_cast<std::size_t>(k);
    Fold fold;
    fold.test.assign(order.begin() + static_cast<std::ptrdiff_t>(lo), order.begin() + static_cast<std::ptrdiff_t>(hi));
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < num_patients; ++i)
      if (i < lo || i >= hi) rest.push_back(order[i]);
    Rng fold_rng(Rng::mix(seed, static_cast<std::uint64_t>(f)));
    fold_rng.shuffle(rest);
    auto n_val = static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(rest.size())));
    if (rest.size() >= 2) n_val = std::clamp<std::size_t>(n_val, 1, rest.size() - 1);
    fold.val.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(n_val));
    fold.train.assign(rest.begin() + static_cast<std::ptrdiff_t>(n_val), rest.end());
    for (auto* v : {&fold.train, &fold.val, &fold.test}) std::sort(v->begin(), v->end());
    folds.push_back(std::move(fold));
  }
  return folds;
}

// ---------------------------------------------------------------------------

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("truncated volume header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::size_t element_count(const std::vector<std::uint32_t>& extents) {
  std::size_t n = 1;
  for (auto e : extents) n *= e;
  return n;
}

}  // namespace

void write_volume_file(const fs::path& path, const VolumeFile& file) {
  const std::size_t n = element_count(file.extents);
  if (file.dtype == VolumeDType::kF32 ? file.f32.size() != n : file.u8.size() != n) {
    throw std::invalid_argument("volume payload does not match extents");
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write("SSV1", 4);
  put_u32(os, static_cast<std::uint32_t>(file.extents.size()));
  for (auto e : file.extents) put_u32(os, e);
  const auto tag = static_cast<char>(file.dtype);
  os.write(&tag, 1);
  if (file.dtype == VolumeDType::kF32) {
    for (float f : file.f32) {
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(os, bits);
    }
  } else {
    os.write(reinterpret_cast<const char*>(file.u8.data()), static_cast<std::streamsize>(file.u8.size()));
  }
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

VolumeFile read_volume_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "SSV1", 4) != 0) {
    throw std::runtime_error(path.string() + " is not an SSV1 volume");
  }
  VolumeFile f;
  const std::uint32_t rank = get_u32(is);
  if (rank == 0 || rank > 8) throw std::runtime_error("implausible volume rank in " + path.string());
  for (std::uint32_t i = 0; i < rank; ++i) f.extents.push_back(get_u32(is));
  char tag;
  if (!is.read(&tag, 1)) throw std::runtime_error("truncated volume header");
  if (tag != 0 && tag != 1) throw std::runtime_error("unknown dtype tag in " + path.string());
  f.dtype = static_cast<VolumeDType>(tag);
  const std::size_t n = element_count(f.extents);
  if (f.dtype == VolumeDType::kF32) {
    f.f32.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint32_t bits = get_u32(is);
      std::memcpy(&f.f32[i], &bits, 4);
    }
  } else {
    f.u8.resize(n);
    if (!is.read(reinterpret_cast<char*>(f.u8.data()), static_cast<std::streamsize>(n))) {
      throw std::runtime_error("truncated label payload in " + path.string());
    }
  }
  return f;
}

void save_volume(const fs::path& dir, const LabeledVolume& volume) {
  VolumeFile img;
  for (Index e : volume.image.shape()) img.extents.push_back(static_cast<std::uint32_t>(e));
  img.dtype = VolumeDType::kF32;
  img.f32.reserve(static_cast<std::size_t>(volume.image.size()));
  for (double v : volume.image.values()) img.f32.push_back(static_cast<float>(v));
  write_volume_file(dir / "images" / (volume.patient_id + ".ssv"), img);

  VolumeFile lab;
  for (Index e : volume.label_shape()) lab.extents.push_back(static_cast<std::uint32_t>(e));
  lab.dtype = VolumeDType::kU8;
  lab.u8 = volume.labels;
  write_volume_file(dir / "labels" / (volume.patient_id + ".ssv"), lab);
}

LabeledVolume load_volume(const fs::path& image_path, const fs::path& label_path) {
  const VolumeFile img = read_volume_file(image_path);
  if (img.dtype != VolumeDType::kF32 || (img.extents.size() != 4 && img.extents.size() != 3)) {
    throw std::runtime_error(image_path.string() + " is not a (D,H,W[,C]) f32 image");
  }
  Shape s(img.extents.begin(), img.extents.end());
  if (s.size() == 3) s.push_back(1);
  LabeledVolume v;
  v.patient_id = image_path.stem().string();
  v.image = Tensor(s, std::vector<double>(img.f32.begin(), img.f32.end()));
  if (!label_path.empty()) {
    const VolumeFile lab = read_volume_file(label_path);
    if (lab.dtype != VolumeDType::kU8 || lab.extents.size() != 3 || static_cast<Index>(lab.extents[0]) != s[0] ||
        static_cast<Index>(lab.extents[1]) != s[1] || static_cast<Index>(lab.extents[2]) != s[2]) {
      throw std::runtime_error(label_path.string() + " does not pair with " + image_path.string());
    }
    v.labels = lab.u8;
  } else {
    v.labels.assign(static_cast<std::size_t>(s[0] * s[1] * s[2]), 0);
  }
  return v;
}

std::vector<LabeledVolume> load_volume_dir(const fs::path& dir) {
  const fs::path images = dir / "images", labels = dir / "labels";
  if (!fs::is_directory(images)) throw std::runtime_error(dir.string() + " has no images/ directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(images))
    if (e.path().extension() == ".ssv") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<LabeledVolume> out;
  for (const auto& f : files) {
    const fs::path lab = labels / f.filename();
    if (!fs::exists(lab)) throw std::runtime_error("missing label map " + lab.string());
    out.push_back(load_volume(f, lab));
  }
  if (out.empty()) throw std::runtime_error("no volumes found under " + images.string());
  return out;
}

}  // namespace p3d
