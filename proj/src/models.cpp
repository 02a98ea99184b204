#include "p3d/models.hpp"

#include <cmath>
#include <stdexcept>

namespace p3d {

std::string to_string(Mode m) {
  switch (m) {
    case Mode::kEnd2End2D: return "end2end_2d";
    case Mode::kProposed: return "proposed";
    case Mode::kChannelBased: return "channel_based";
    case Mode::kEnd2End3D: return "end2end_3d";
  }
  return "?";
}

std::string to_string(Backbone b) { return b == Backbone::kUNet ? "unet" : "segnet"; }
std::string to_string(Upsampling u) { return u == Upsampling::kNearest ? "nearest" : "transposed"; }

Mode parse_mode(const std::string& s) {
  for (Mode m : {Mode::kEnd2End2D, Mode::kProposed, Mode::kChannelBased, Mode::kEnd2End3D})
    if (to_string(m) == s) return m;
  throw std::invalid_argument("unknown mode '" + s + "'");
}

Backbone parse_backbone(const std::string& s) {
  if (s == "unet") return Backbone::kUNet;
  if (s == "segnet") return Backbone::kSegNet;
  throw std::invalid_argument("unknown backbone '" + s + "'");
}

Upsampling parse_upsampling(const std::string& s) {
  if (s == "nearest") return Upsampling::kNearest;
  if (s == "transposed") return Upsampling::kTransposed;
  throw std::invalid_argument("unknown upsampling '" + s + "'");
}

void ModelSpec::validate() const {
  if (in_channels <= 0) throw std::invalid_argument("in_channels must be positive");
  if (num_classes < 2) throw std::invalid_argument("num_classes must be at least 2");
  if (num_classes > 255) throw std::invalid_argument("num_classes must fit in a u8 label map");
  if (base_filters < 1) throw std::invalid_argument("base_filters must be >= 1");
  switch (mode) {
    case Mode::kEnd2End2D:
      if (d != 1) throw std::invalid_argument("end2end_2d requires d = 1");
      break;
    case Mode::kProposed:
      if (d < 3 || d % 2 == 0) throw std::invalid_argument("proposed mode requires odd d >= 3, got " + std::to_string(d));
      break;
    case Mode::kChannelBased:
      // d = 1 is accepted as the degenerate fold.
      if (d < 1 || d % 2 == 0) throw std::invalid_argument("channel_based mode requires odd d, got " + std::to_string(d));
      break;
    case Mode::kEnd2End3D:
      if (d < 8 || d % 8 != 0) throw std::invalid_argument("end2end_3d patch depth must be a positive multiple of 8");
      break;
  }
}

std::string ModelSpec::label() const {
  return to_string(mode) + "-" + to_string(backbone) + "-d" + std::to_string(d);
}

namespace {

Parameter* add_param(std::vector<std::unique_ptr<Parameter>>& store, std::string name, Tensor v, bool decay) {
  store.push_back(std::make_unique<Parameter>(std::move(name), std::move(v), decay));
  return store.back().get();
}

// He-uniform: U(-limit, limit) with limit = sqrt(6 / fan_in).
Tensor he_uniform(Shape shape, Index fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (double& v : t.values()) v = rng.uniform(-limit, limit);
  return t;
}

Shape kernel_shape(Rank rank, Index k, Index cin, Index cout) {
  Shape s(static_cast<std::size_t>(rank_value(rank)), k);
  s.push_back(cin);
  s.push_back(cout);
  return s;
}

Index spatial_elems(const Shape& s) {
  Index n = 1;
  for (std::size_t i = 1; i + 1 < s.size(); ++i) n *= s[i];
  return n;
}

// Plain convolution layer (no normalization), used for 1x1 heads.
struct ConvLayer {
  Parameter* weight = nullptr;
  Parameter* bias = nullptr;
  PadFlags padding;
  Rank rank = Rank::k2D;
  Index k = 1, cin = 0, cout = 0;

  ConvLayer() = default;
  ConvLayer(std::vector<std::unique_ptr<Parameter>>& store, Rng& rng, const std::string& name, Rank r, Index kk,
            Index ci, Index co)
      : padding(pad_all(r)), rank(r), k(kk), cin(ci), cout(co) {
    const Index fan_in = static_cast<Index>(std::pow(kk, rank_value(r))) * ci;
    weight = add_param(store, name + ".weight", he_uniform(kernel_shape(r, kk, ci, co), fan_in, rng), true);
    bias = add_param(store, name + ".bias", Tensor::zeros({co}), false);
  }

  Var forward(Graph& g, Var x) const {
    return ops::conv(x, g.parameter(*weight), g.parameter(*bias), padding);
  }

  Shape trace(const Shape& in, CostTrace& cost) const {
    const auto geom = kernels::conv_geometry(in, weight->value.shape(), padding);
    Shape out = kernels::spatial_output_shape(geom, rank_value(rank));
    const Index kvol = geom.k[0] * geom.k[1] * geom.k[2];
    cost.macs += out[0] * spatial_elems(out) * kvol * cin * cout;
    cost.activation_elements += shape_size(out);
    return out;
  }
};

struct TransposedConvLayer {
  Parameter* weight = nullptr;
  Parameter* bias = nullptr;
  Rank rank = Rank::k2D;
  Index cin = 0, cout = 0;

  TransposedConvLayer() = default;
  TransposedConvLayer(std::vector<std::unique_ptr<Parameter>>& store, Rng& rng, const std::string& name, Rank r,
                      Index ci, Index co)
      : rank(r), cin(ci), cout(co) {
    Shape s{ci};
    for (int a = 0; a < rank_value(r); ++a) s.push_back(2);
    s.push_back(co);
    const Index taps = rank_value(r) == 3 ? 8 : 4;
    weight = add_param(store, name + ".weight", he_uniform(s, ci * taps, rng), true);
    bias = add_param(store, name + ".bias", Tensor::zeros({co}), false);
  }

  Var forward(Graph& g, Var x) const {
    return ops::conv_transpose(x, g.parameter(*weight), g.parameter(*bias), rank);
  }

  Shape trace(const Shape& in, CostTrace& cost) const {
    Shape out = in;
    for (std::size_t i = 1; i + 1 < out.size(); ++i) out[i] *= 2;
    out.back() = cout;
    cost.macs += shape_size(in) * cout * (rank_value(rank) == 3 ? 8 : 4);
    cost.activation_elements += shape_size(out);
    return out;
  }
};

Shape halve(const Shape& in, CostTrace& cost) {
  Shape out = in;
  for (std::size_t i = 1; i + 1 < out.size(); ++i) {
    if (out[i] % 2 != 0) throw std::invalid_argument("pooling requires even extents, got " + shape_string(in));
    out[i] /= 2;
  }
  cost.activation_elements += shape_size(out);
  return out;
}

Shape twice(const Shape& in, Index channels, CostTrace& cost) {
  Shape out = in;
  for (std::size_t i = 1; i + 1 < out.size(); ++i) out[i] *= 2;
  out.back() = channels;
  cost.activation_elements += shape_size(out);
  return out;
}

constexpr int kLevels = 3;

class UNet final : public BackboneNet {
 public:
  UNet(std::vector<std::unique_ptr<Parameter>>& store, Rng& rng, Rank rank, Index cin, Index classes, Index f,
       Upsampling up)
      : rank_(rank), up_(up) {
    const PadFlags pad = pad_all(rank);
    Index c = cin;
    for (int l = 0; l < kLevels; ++l) {
      const Index width = f << l;
      const std::string n = "enc" + std::to_string(l + 1);
      enc_.emplace_back(store, rng, n + ".conv1", rank, c, width, pad);
      enc_.emplace_back(store, rng, n + ".conv2", rank, width, width, pad);
      c = width;
    }
    const Index bottom = f << kLevels;
    mid_.emplace_back(store, rng, "bottleneck.conv1", rank, c, bottom, pad);
    mid_.emplace_back(store, rng, "bottleneck.conv2", rank, bottom, bottom, pad);
    c = bottom;
    for (int l = kLevels - 1; l >= 0; --l) {
      const Index width = f << l;
      const std::string n = "dec" + std::to_string(l + 1);
      Index merged = c + width;
      if (up_ == Upsampling::kTransposed) {
        upconv_.emplace_back(store, rng, n + ".up", rank, c, width);
        merged = 2 * width;
      }
      dec_.emplace_back(store, rng, n + ".conv1", rank, merged, width, pad);
      dec_.emplace_back(store, rng, n + ".conv2", rank, width, width, pad);
      c = width;
    }
    head_ = ConvLayer(store, rng, "head", rank, 1, c, classes);
  }

  Var forward(Graph& g, Var x, bool training) override {
    std::vector<Var> skips;
    for (int l = 0; l < kLevels; ++l) {
      x = enc_[2 * l].forward(g, x, training);
      x = enc_[2 * l + 1].forward(g, x, training);
      skips.push_back(x);
      x = ops::maxpool(x, rank_).output;
    }
    x = mid_[0].forward(g, x, training);
    x = mid_[1].forward(g, x, training);
    for (int i = 0; i < kLevels; ++i) {
      const int l = kLevels - 1 - i;
      x = up_ == Upsampling::kTransposed ? upconv_[static_cast<std::size_t>(i)].forward(g, x)
                                         : ops::upsample_nearest(x, rank_);
      x = ops::concat_channels(x, skips[static_cast<std::size_t>(l)]);
      x = dec_[2 * i].forward(g, x, training);
      x = dec_[2 * i + 1].forward(g, x, training);
    }
    return ops::softmax(head_.forward(g, x));
  }

  Shape trace(const Shape& in, CostTrace& cost) const override {
    Shape s = in;
    std::vector<Shape> skips;
    for (int l = 0; l < kLevels; ++l) {
      s = enc_[2 * l].trace(s, cost);
      s = enc_[2 * l + 1].trace(s, cost);
      skips.push_back(s);
      s = halve(s, cost);
    }
    s = mid_[0].trace(s, cost);
    s = mid_[1].trace(s, cost);
    for (int i = 0; i < kLevels; ++i) {
      const int l = kLevels - 1 - i;
      s = up_ == Upsampling::kTransposed ? upconv_[static_cast<std::size_t>(i)].trace(s, cost)
                                         : twice(s, s.back(), cost);
      s.back() += skips[static_cast<std::size_t>(l)].back();
      cost.activation_elements += shape_size(s);
      s = dec_[2 * i].trace(s, cost);
      s = dec_[2 * i + 1].trace(s, cost);
    }
    s = head_.trace(s, cost);
    cost.activation_elements += shape_size(s);
    return s;
  }

  std::vector<ConvBnRelu*> blocks() override {
    std::vector<ConvBnRelu*> out;
    for (auto* v : {&enc_, &mid_, &dec_})
      for (auto& b : *v) out.push_back(&b);
    return out;
  }

 private:
  Rank rank_;
  Upsampling up_;
  std::vector<ConvBnRelu> enc_, mid_, dec_;
  std::vector<TransposedConvLayer> upconv_;
  ConvLayer head_;
};

// Decoder mirrors the encoder and upsamples with the pooling indices; there
// are no skip concatenations.
class SegNet final : public BackboneNet {
 public:
  SegNet(std::vector<std::unique_ptr<Parameter>>& store, Rng& rng, Rank rank, Index cin, Index classes, Index f)
      : rank_(rank) {
    const PadFlags pad = pad_all(rank);
    Index c = cin;
    for (int l = 0; l < kLevels; ++l) {
      const Index width = f << l;
      const std::string n = "enc" + std::to_string(l + 1);
      enc_.emplace_back(store, rng, n + ".conv1", rank, c, width, pad);
      enc_.emplace_back(store, rng, n + ".conv2", rank, width, width, pad);
      c = width;
    }
    const Index bottom = f << kLevels;
    mid_.emplace_back(store, rng, "bottleneck.conv1", rank, c, bottom, pad);
    mid_.emplace_back(store, rng, "bottleneck.conv2", rank, bottom, c, pad);
    for (int l = kLevels - 1; l >= 0; --l) {
      const Index width = f << l;
      const Index next = l > 0 ? (f << (l - 1)) : f;
      const std::string n = "dec" + std::to_string(l + 1);
      dec_.emplace_back(store, rng, n + ".conv1", rank, width, width, pad);
      dec_.emplace_back(store, rng, n + ".conv2", rank, width, next, pad);
    }
    head_ = ConvLayer(store, rng, "head", rank, 1, f, classes);
  }

  Var forward(Graph& g, Var x, bool training) override {
    std::vector<std::shared_ptr<const IndexMap>> indices;
    for (int l = 0; l < kLevels; ++l) {
      x = enc_[2 * l].forward(g, x, training);
      x = enc_[2 * l + 1].forward(g, x, training);
      PoolResult p = ops::maxpool(x, rank_);
      indices.push_back(p.indices);
      x = p.output;
    }
    x = mid_[0].forward(g, x, training);
    x = mid_[1].forward(g, x, training);
    for (int i = 0; i < kLevels; ++i) {
      const int l = kLevels - 1 - i;
      x = ops::max_unpool(x, indices[static_cast<std::size_t>(l)]);
      x = dec_[2 * i].forward(g, x, training);
      x = dec_[2 * i + 1].forward(g, x, training);
    }
    return ops::softmax(head_.forward(g, x));
  }

  Shape trace(const Shape& in, CostTrace& cost) const override {
    Shape s = in;
    for (int l = 0; l < kLevels; ++l) {
      s = enc_[2 * l].trace(s, cost);
      s = enc_[2 * l + 1].trace(s, cost);
      s = halve(s, cost);
    }
    s = mid_[0].trace(s, cost);
    s = mid_[1].trace(s, cost);
    for (int i = 0; i < kLevels; ++i) {
      s = twice(s, s.back(), cost);
      s = dec_[2 * i].trace(s, cost);
      s = dec_[2 * i + 1].trace(s, cost);
    }
    s = head_.trace(s, cost);
    cost.activation_elements += shape_size(s);
    return s;
  }

  std::vector<ConvBnRelu*> blocks() override {
    std::vector<ConvBnRelu*> out;
    for (auto* v : {&enc_, &mid_, &dec_})
      for (auto& b : *v) out.push_back(&b);
    return out;
  }

 private:
  Rank rank_;
  std::vector<ConvBnRelu> enc_, mid_, dec_;
  ConvLayer head_;
};

}  // namespace

ConvBnRelu::ConvBnRelu(std::vector<std::unique_ptr<Parameter>>& store, Rng& rng, const std::string& name, Rank rank,
                       Index cin, Index cout, PadFlags padding)
    : rank_(rank), cin_(cin), cout_(cout), padding_(std::move(padding)), bn_(cout) {
  const Index fan_in = static_cast<Index>(std::pow(3, rank_value(rank))) * cin;
  weight_ = add_param(store, name + ".weight", he_uniform(kernel_shape(rank, 3, cin, cout), fan_in, rng), true);
  bias_ = add_param(store, name + ".bias", Tensor::zeros({cout}), false);
  gamma_ = add_param(store, name + ".bn.gamma", Tensor({cout}, 1.0), false);
  beta_ = add_param(store, name + ".bn.beta", Tensor::zeros({cout}), false);
}

Var ConvBnRelu::forward(Graph& g, Var x, bool training) {
  Var y = ops::conv(x, g.parameter(*weight_), g.parameter(*bias_), padding_);
  y = ops::batch_norm(y, g.parameter(*gamma_), g.parameter(*beta_), bn_, training);
  return ops::relu(y);
}

Shape ConvBnRelu::trace(const Shape& in, CostTrace& cost) const {
  const auto geom = kernels::conv_geometry(in, weight_->value.shape(), padding_);
  Shape out = kernels::spatial_output_shape(geom, rank_value(rank_));
  cost.macs += out[0] * spatial_elems(out) * geom.k[0] * geom.k[1] * geom.k[2] * cin_ * cout_;
  // conv output, normalized output, activation
  cost.activation_elements += 3 * shape_size(out);
  return out;
}

TransitionBlock::TransitionBlock(std::vector<std::unique_ptr<Parameter>>& store, Rng& rng, int d, Index cin,
                                 Index width)
    : d_(d), width_(width) {
  if (d < 3 || d % 2 == 0) throw std::invalid_argument("transition block requires odd d >= 3, got " + std::to_string(d));
  const int layers = d / 2;
  Index c = cin;
  for (int l = 0; l < layers; ++l) {
    layers_.emplace_back(store, rng, "transition" + std::to_string(l + 1), Rank::k3D, c, width, pad_inplane());
    c = width;
  }
}

Var TransitionBlock::forward(Graph& g, Var x, bool training, std::vector<Index>* depth_trace) {
  const Shape& s = x.shape();
  if (s.size() != 5) throw std::invalid_argument("transition block expects (N,d,H,W,C), got " + shape_string(s));
  if (s[1] != d_) {
    throw std::invalid_argument("transition block built for d=" + std::to_string(d_) + " received depth " +
                                std::to_string(s[1]));
  }
  if (depth_trace) depth_trace->push_back(s[1]);
  for (auto& layer : layers_) {
    x = layer.forward(g, x, training);
    if (depth_trace) depth_trace->push_back(x.shape()[1]);
  }
  const Shape& o = x.shape();
  return ops::reshape(x, Shape{o[0], o[2], o[3], o[4]});
}

Shape TransitionBlock::trace(const Shape& in, CostTrace& cost) const {
  Shape s = in;
  for (const auto& layer : layers_) s = layer.trace(s, cost);
  return Shape{s[0], s[2], s[3], s[4]};
}

std::unique_ptr<BackboneNet> build_backbone(std::vector<std::unique_ptr<Parameter>>& store, Rng& rng,
                                            Backbone kind, Rank rank, Index in_channels, Index num_classes,
                                            Index base_filters, Upsampling upsampling) {
  if (base_filters < 1) throw std::invalid_argument("base_filters must be >= 1");
  if (kind == Backbone::kUNet)
    return std::make_unique<UNet>(store, rng, rank, in_channels, num_classes, base_filters, upsampling);
  return std::make_unique<SegNet>(store, rng, rank, in_channels, num_classes, base_filters);
}

SegmentationModel::SegmentationModel(const ModelSpec& spec, std::uint64_t seed) : spec_(spec) {
  spec_.validate();
  Rng rng(seed);
  const Index C = spec_.in_channels;
  const Index f = spec_.base_filters;
  switch (spec_.mode) {
    case Mode::kEnd2End2D:
      backbone_ = build_backbone(store_, rng, spec_.backbone, Rank::k2D, C, spec_.num_classes, f, spec_.upsampling);
      break;
    case Mode::kProposed:
      transition_.emplace(store_, rng, spec_.d, C, f);
      backbone_ = build_backbone(store_, rng, spec_.backbone, Rank::k2D, f, spec_.num_classes, f, spec_.upsampling);
      break;
    case Mode::kChannelBased:
      backbone_ = build_backbone(store_, rng, spec_.backbone, Rank::k2D, C * spec_.d, spec_.num_classes, f,
                                 spec_.upsampling);
      break;
    case Mode::kEnd2End3D:
      backbone_ = build_backbone(store_, rng, spec_.backbone, Rank::k3D, C, spec_.num_classes, f, spec_.upsampling);
      break;
  }
}

Var SegmentationModel::forward(Graph& g, Var stack, bool training, ForwardProbe* probe) {
  const Shape& s = stack.shape();
  if (s.size() != 5) throw std::invalid_argument("model input must be (N,d,H,W,C), got " + shape_string(s));
  if (s[4] != spec_.in_channels) throw std::invalid_argument("model input channel mismatch");
  if (spec_.mode != Mode::kEnd2End3D && s[1] != spec_.d) {
    throw std::invalid_argument(spec_.label() + " expects " + std::to_string(spec_.d) + " slices, got " +
                                std::to_string(s[1]));
  }
  Var x = stack;
  switch (spec_.mode) {
    case Mode::kEnd2End2D: x = ops::reshape(x, Shape{s[0], s[2], s[3], s[4]}); break;
    case Mode::kProposed:
      x = transition_->forward(g, x, training, probe ? &probe->transition_depths : nullptr);
      break;
    case Mode::kChannelBased: x = ops::channel_fold(x); break;
    case Mode::kEnd2End3D: break;
  }
  if (probe) probe->backbone_input = x.shape();
  return backbone_->forward(g, x, training);
}

std::vector<Parameter*> SegmentationModel::parameters() {
  std::vector<Parameter*> out;
  out.reserve(store_.size());
  for (auto& p : store_) out.push_back(p.get());
  return out;
}

std::int64_t SegmentationModel::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : store_) n += p->value.size();
  return n;
}

Shape SegmentationModel::trace(const Shape& input, CostTrace& cost) const {
  if (input.size() != 5) throw std::invalid_argument("trace input must be (N,d,H,W,C)");
  switch (spec_.mode) {
    case Mode::kEnd2End2D: return backbone_->trace(Shape{input[0], input[2], input[3], input[4]}, cost);
    case Mode::kProposed: return backbone_->trace(transition_->trace(input, cost), cost);
    case Mode::kChannelBased:
      return backbone_->trace(Shape{input[0], input[2], input[3], input[1] * input[4]}, cost);
    case Mode::kEnd2End3D: return backbone_->trace(input, cost);
  }
  return {};
}

std::vector<ops::BatchNormState*> SegmentationModel::bn_states() {
  std::vector<ops::BatchNormState*> out;
  if (transition_)
    for (auto& l : transition_->layers()) out.push_back(&l.bn_state());
  for (ConvBnRelu* b : backbone_->blocks()) out.push_back(&b->bn_state());
  return out;
}

ModelState SegmentationModel::state() {
  ModelState s;
  for (auto& p : store_) s.parameters.push_back(p->value);
  for (auto* bn : bn_states()) s.batch_norm.push_back(*bn);
  return s;
}

void SegmentationModel::load_state(const ModelState& s) {
  if (s.parameters.size() != store_.size()) throw std::invalid_argument("state does not match model");
  for (std::size_t i = 0; i < store_.size(); ++i) {
    if (s.parameters[i].shape() != store_[i]->value.shape()) throw std::invalid_argument("state shape mismatch");
    store_[i]->value = s.parameters[i];
  }
  auto bns = bn_states();
  if (bns.size() != s.batch_norm.size()) throw std::invalid_argument("state batch-norm count mismatch");
  for (std::size_t i = 0; i < bns.size(); ++i) *bns[i] = s.batch_norm[i];
}

}  // namespace p3d
