#include "p3d/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

namespace p3d {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

int spatial_rank_of(const Shape& feature_map) {
  require(feature_map.size() == 4 || feature_map.size() == 5,
          "feature map must be (N,H,W,C) or (N,D,H,W,C), got " + shape_string(feature_map));
  return static_cast<int>(feature_map.size()) - 2;
}

// Views a feature map as (N, D, H, W, C) with D = 1 for planar data.
struct Volume5 {
  Index n, d, h, w, c;
};

Volume5 as_volume(const Shape& s) {
  if (s.size() == 4) return {s[0], 1, s[1], s[2], s[3]};
  return {s[0], s[1], s[2], s[3], s[4]};
}

Shape make_feature_shape(int rank, Index n, Index d, Index h, Index w, Index c) {
  if (rank == 2) return {n, h, w, c};
  return {n, d, h, w, c};
}

void im2col(const double* x, const kernels::ConvGeometry& g, double* cols) {
  const Index D = g.in[0], H = g.in[1], W = g.in[2];
  const Index kd = g.k[0], kh = g.k[1], kw = g.k[2];
  const Index ci = g.cin;
  const std::size_t bytes = static_cast<std::size_t>(ci) * sizeof(double);
  double* dst = cols;
  for (Index z = 0; z < g.out[0]; ++z) {
    for (Index y = 0; y < g.out[1]; ++y) {
      for (Index xo = 0; xo < g.out[2]; ++xo) {
        for (Index a = 0; a < kd; ++a) {
          const Index sz = z + a - g.pad[0];
          for (Index b = 0; b < kh; ++b) {
            const Index sy = y + b - g.pad[1];
            for (Index c = 0; c < kw; ++c) {
              const Index sx = xo + c - g.pad[2];
              if (sz < 0 || sz >= D || sy < 0 || sy >= H || sx < 0 || sx >= W) {
                std::memset(dst, 0, bytes);
              } else {
                std::memcpy(dst, x + ((sz * H + sy) * W + sx) * ci, bytes);
              }
              dst += ci;
            }
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const kernels::ConvGeometry& g, double* dx) {
  const Index D = g.in[0], H = g.in[1], W = g.in[2];
  const Index kd = g.k[0], kh = g.k[1], kw = g.k[2];
  const Index ci = g.cin;
  const double* src = cols;
  for (Index z = 0; z < g.out[0]; ++z) {
    for (Index y = 0; y < g.out[1]; ++y) {
      for (Index xo = 0; xo < g.out[2]; ++xo) {
        for (Index a = 0; a < kd; ++a) {
          const Index sz = z + a - g.pad[0];
          for (Index b = 0; b < kh; ++b) {
            const Index sy = y + b - g.pad[1];
            for (Index c = 0; c < kw; ++c) {
              const Index sx = xo + c - g.pad[2];
              if (!(sz < 0 || sz >= D || sy < 0 || sy >= H || sx < 0 || sx >= W)) {
                double* t = dx + ((sz * H + sy) * W + sx) * ci;
                for (Index k = 0; k < ci; ++k) t[k] += src[k];
              }
              src += ci;
            }
          }
        }
      }
    }
  }
}

}  // namespace

namespace kernels {

ConvGeometry conv_geometry(const Shape& input, const Shape& kernel, const PadFlags& padding) {
  const int rank = spatial_rank_of(input);
  require(static_cast<int>(kernel.size()) == rank + 2,
          "kernel " + shape_string(kernel) + " does not match input rank " + shape_string(input));
  require(static_cast<int>(padding.size()) == rank, "padding flags must have one entry per spatial axis");
  const Volume5 v = as_volume(input);
  ConvGeometry g;
  g.batch = v.n;
  g.in = {v.d, v.h, v.w};
  g.cin = v.c;
  g.cout = kernel.back();
  require(kernel[kernel.size() - 2] == v.c, "channel mismatch: input has " + std::to_string(v.c) +
                                                " channels, kernel expects " +
                                                std::to_string(kernel[kernel.size() - 2]));
  const int offset = 3 - rank;
  g.k = {1, 1, 1};
  g.pad = {0, 0, 0};
  for (int a = 0; a < rank; ++a) {
    const Index ext = kernel[static_cast<std::size_t>(a)];
    require(ext == 1 || ext == 3, "kernel extents must be 1 or 3");
    g.k[static_cast<std::size_t>(a + offset)] = ext;
    g.pad[static_cast<std::size_t>(a + offset)] = padding[static_cast<std::size_t>(a)] ? (ext - 1) / 2 : 0;
  }
  for (std::size_t a = 0; a < 3; ++a) {
    g.out[a] = g.in[a] + 2 * g.pad[a] - g.k[a] + 1;
    require(g.out[a] > 0, "convolution output extent would be non-positive for input " + shape_string(input));
  }
  return g;
}

Shape spatial_output_shape(const ConvGeometry& g, int rank) {
  return make_feature_shape(rank, g.batch, g.out[0], g.out[1], g.out[2], g.cout);
}

}  // namespace kernels

namespace ops {

Var conv(Var input, Var kernel, Var bias, const PadFlags& padding) {
  const Tensor& x = input.value();
  const Tensor& w = kernel.value();
  const Tensor& b = bias.value();
  const int rank = spatial_rank_of(x.shape());
  const kernels::ConvGeometry g = kernels::conv_geometry(x.shape(), w.shape(), padding);
  require(b.size() == g.cout, "bias length must equal output channels");

  const Index in_per = g.in[0] * g.in[1] * g.in[2] * g.cin;
  const Index P = g.out[0] * g.out[1] * g.out[2];
  const Index Kc = g.k[0] * g.k[1] * g.k[2] * g.cin;
  Tensor y(kernels::spatial_output_shape(g, rank));
  Buffer cols(static_cast<std::size_t>(P * Kc));
  ConstMapMat wm(w.data(), Kc, g.cout);
  Eigen::Map<const Eigen::RowVectorXd> bv(b.data(), g.cout);
  for (Index n = 0; n < g.batch; ++n) {
    im2col(x.data() + n * in_per, g, cols.data());
    MapMat ym(y.data() + n * P * g.cout, P, g.cout);
    ym.noalias() = ConstMapMat(cols.data(), P, Kc) * wm;
    ym.rowwise() += bv;
  }

  auto backward = [g, P, Kc, in_per](BackwardContext& ctx) {
    const Tensor& x = ctx.input(0);
    const Tensor& w = ctx.input(1);
    const Tensor& dy = ctx.out_grad();
    Tensor* dx = ctx.input_grad(0);
    Tensor* dw = ctx.input_grad(1);
    Tensor* db = ctx.input_grad(2);
    Buffer cols(static_cast<std::size_t>(P * Kc));
    ConstMapMat wm(w.data(), Kc, g.cout);
    for (Index n = 0; n < g.batch; ++n) {
      ConstMapMat dym(dy.data() + n * P * g.cout, P, g.cout);
      if (dw) {
        im2col(x.data() + n * in_per, g, cols.data());
        MapMat dwm(dw->data(), Kc, g.cout);
        dwm.noalias() += ConstMapMat(cols.data(), P, Kc).transpose() * dym;
      }
      if (db) {
        Eigen::Map<Eigen::RowVectorXd> dbv(db->data(), g.cout);
        dbv += dym.colwise().sum();
      }
      if (dx) {
        MapMat cm(cols.data(), P, Kc);
        cm.noalias() = dym * wm.transpose();
        col2im_add(cols.data(), g, dx->data() + n * in_per);
      }
    }
  };
  return input.graph->record(std::move(y), {input, kernel, bias}, backward, "conv");
}

Var conv_transpose(Var input, Var kernel, Var bias, Rank rank) {
  const Tensor& x = input.value();
  const Tensor& w = kernel.value();
  const int r = rank_value(rank);
  require(spatial_rank_of(x.shape()) == r, "transposed conv rank does not match input " + shape_string(x.shape()));
  require(w.rank() == r + 2, "transposed conv kernel must be (Cin, 2.., Cout)");
  for (int a = 1; a <= r; ++a) require(w.shape()[static_cast<std::size_t>(a)] == 2, "transposed conv kernel extent must be 2");
  const Volume5 v = as_volume(x.shape());
  require(w.shape()[0] == v.c, "channel mismatch: input has " + std::to_string(v.c) +
                                   " channels, kernel expects " + std::to_string(w.shape()[0]));
  require(v.d > 0 && v.h > 0 && v.w > 0, "transposed conv input extents must be positive");
  const Index co = w.shape().back();
  require(bias.value().size() == co, "bias length must equal output channels");
  const Index kd = r == 3 ? 2 : 1;
  const Index T = kd * 4;
  const Index P = v.d * v.h * v.w;
  const Index od = v.d * kd, oh = v.h * 2, ow = v.w * 2;
  Tensor y(make_feature_shape(r, v.n, od, oh, ow, co));
  const double* bptr = bias.value().data();

  Buffer tmp(static_cast<std::size_t>(P * T * co));
  ConstMapMat wm(w.data(), v.c, T * co);
  for (Index n = 0; n < v.n; ++n) {
    MapMat tm(tmp.data(), P, T * co);
    tm.noalias() = ConstMapMat(x.data() + n * P * v.c, P, v.c) * wm;
    double* yn = y.data() + n * od * oh * ow * co;
    for (Index z = 0; z < v.d; ++z)
      for (Index yy = 0; yy < v.h; ++yy)
        for (Index xx = 0; xx < v.w; ++xx) {
          const double* row = tmp.data() + ((z * v.h + yy) * v.w + xx) * T * co;
          for (Index a = 0; a < kd; ++a)
            for (Index b = 0; b < 2; ++b)
              for (Index c = 0; c < 2; ++c) {
                const double* src = row + ((a * 2 + b) * 2 + c) * co;
                double* dst = yn + (((z * kd + a) * oh + yy * 2 + b) * ow + xx * 2 + c) * co;
                for (Index k = 0; k < co; ++k) dst[k] = src[k] + bptr[k];
              }
        }
  }

  auto backward = [v, kd, T, P, od, oh, ow, co](BackwardContext& ctx) {
    const Tensor& x = ctx.input(0);
    const Tensor& w = ctx.input(1);
    const Tensor& dy = ctx.out_grad();
    Tensor* dx = ctx.input_grad(0);
    Tensor* dw = ctx.input_grad(1);
    Tensor* db = ctx.input_grad(2);
    Buffer tmp(static_cast<std::size_t>(P * T * co));
    ConstMapMat wm(w.data(), v.c, T * co);
    for (Index n = 0; n < v.n; ++n) {
      const double* dyn = dy.data() + n * od * oh * ow * co;
      for (Index z = 0; z < v.d; ++z)
        for (Index yy = 0; yy < v.h; ++yy)
          for (Index xx = 0; xx < v.w; ++xx) {
            double* row = tmp.data() + ((z * v.h + yy) * v.w + xx) * T * co;
            for (Index a = 0; a < kd; ++a)
              for (Index b = 0; b < 2; ++b)
                for (Index c = 0; c < 2; ++c) {
                  const double* src = dyn + (((z * kd + a) * oh + yy * 2 + b) * ow + xx * 2 + c) * co;
                  std::memcpy(row + ((a * 2 + b) * 2 + c) * co, src, static_cast<std::size_t>(co) * sizeof(double));
                }
          }
      ConstMapMat tm(tmp.data(), P, T * co);
      if (dw) {
        MapMat dwm(dw->data(), v.c, T * co);
        dwm.noalias() += ConstMapMat(x.data() + n * P * v.c, P, v.c).transpose() * tm;
      }
      if (dx) {
        MapMat dxm(dx->data() + n * P * v.c, P, v.c);
        dxm.noalias() += tm * wm.transpose();
      }
      if (db) {
        for (Index i = 0; i < P * T; ++i)
          for (Index k = 0; k < co; ++k) (*db)[k] += tmp[static_cast<std::size_t>(i * co + k)];
      }
    }
  };
  return input.graph->record(std::move(y), {input, kernel, bias}, backward, "conv_transpose");
}

PoolResult maxpool(Var input, Rank rank) {
  const Tensor& x = input.value();
  const int r = rank_value(rank);
  require(spatial_rank_of(x.shape()) == r, "max pool rank does not match input " + shape_string(x.shape()));
  const Volume5 v = as_volume(x.shape());
  const Index kd = r == 3 ? 2 : 1;
  require(v.h % 2 == 0 && v.w % 2 == 0 && v.d % kd == 0,
          "max pool requires even spatial extents, got " + shape_string(x.shape()));
  const Index od = v.d / kd, oh = v.h / 2, ow = v.w / 2;
  auto map = std::make_shared<IndexMap>();
  map->input_shape = x.shape();
  map->output_shape = make_feature_shape(r, v.n, od, oh, ow, v.c);
  Tensor y(map->output_shape);
  map->argmax.resize(static_cast<std::size_t>(y.size()));
  Index o = 0;
  for (Index n = 0; n < v.n; ++n)
    for (Index z = 0; z < od; ++z)
      for (Index yy = 0; yy < oh; ++yy)
        for (Index xx = 0; xx < ow; ++xx)
          for (Index c = 0; c < v.c; ++c, ++o) {
            double best = -std::numeric_limits<double>::infinity();
            Index best_idx = -1;
            for (Index a = 0; a < kd; ++a)
              for (Index b = 0; b < 2; ++b)
                for (Index e = 0; e < 2; ++e) {
                  const Index idx = (((n * v.d + z * kd + a) * v.h + yy * 2 + b) * v.w + xx * 2 + e) * v.c + c;
                  if (best_idx < 0 || x[idx] > best) {
                    best = x[idx];
                    best_idx = idx;
                  }
                }
            y[o] = best;
            map->argmax[static_cast<std::size_t>(o)] = best_idx;
          }
  std::shared_ptr<const IndexMap> indices = map;
  auto backward = [indices](BackwardContext& ctx) {
    Tensor* dx = ctx.input_grad(0);
    if (!dx) return;
    const Tensor& dy = ctx.out_grad();
    for (Index i = 0; i < dy.size(); ++i) (*dx)[indices->argmax[static_cast<std::size_t>(i)]] += dy[i];
  };
  Var out = input.graph->record(std::move(y), {input}, backward, "maxpool");
  return {out, indices};
}

Var max_unpool(Var input, const std::shared_ptr<const IndexMap>& indices) {
  const Tensor& x = input.value();
  require(indices != nullptr, "max_unpool requires pooling indices");
  require(x.shape() == indices->output_shape, "unpool input " + shape_string(x.shape()) +
                                                  " does not match pooled shape " +
                                                  shape_string(indices->output_shape));
  Tensor y(indices->input_shape);
  for (Index i = 0; i < x.size(); ++i) y[indices->argmax[static_cast<std::size_t>(i)]] = x[i];
  auto backward = [indices](BackwardContext& ctx) {
    Tensor* dx = ctx.input_grad(0);
    if (!dx) return;
    const Tensor& dy = ctx.out_grad();
    for (Index i = 0; i < dx->size(); ++i) (*dx)[i] += dy[indices->argmax[static_cast<std::size_t>(i)]];
  };
  return input.graph->record(std::move(y), {input}, backward, "max_unpool");
}

Var upsample_nearest(Var input, Rank rank) {
  const Tensor& x = input.value();
  const int r = rank_value(rank);
  require(spatial_rank_of(x.shape()) == r, "upsample rank does not match input " + shape_string(x.shape()));
  const Volume5 v = as_volume(x.shape());
  const Index kd = r == 3 ? 2 : 1;
  const Index od = v.d * kd, oh = v.h * 2, ow = v.w * 2;
  Tensor y(make_feature_shape(r, v.n, od, oh, ow, v.c));
  auto src_index = [v, kd](Index n, Index z, Index yy, Index xx) {
    return (((n * v.d + z / kd) * v.h + yy / 2) * v.w + xx / 2) * v.c;
  };
  Index o = 0;
  for (Index n = 0; n < v.n; ++n)
    for (Index z = 0; z < od; ++z)
      for (Index yy = 0; yy < oh; ++yy)
        for (Index xx = 0; xx < ow; ++xx) {
          const Index s = src_index(n, z, yy, xx);
          for (Index c = 0; c < v.c; ++c) y[o++] = x[s + c];
        }
  auto backward = [v, od, oh, ow, src_index](BackwardContext& ctx) {
    Tensor* dx = ctx.input_grad(0);
    if (!dx) return;
    const Tensor& dy = ctx.out_grad();
    Index o = 0;
    for (Index n = 0; n < v.n; ++n)
      for (Index z = 0; z < od; ++z)
        for (Index yy = 0; yy < oh; ++yy)
          for (Index xx = 0; xx < ow; ++xx) {
            const Index s = src_index(n, z, yy, xx);
            for (Index c = 0; c < v.c; ++c) (*dx)[s + c] += dy[o++];
          }
  };
  return input.graph->record(std::move(y), {input}, backward, "upsample_nearest");
}

Var batch_norm(Var input, Var gamma, Var beta, BatchNormState& state, bool training) {
  const Tensor& x = input.value();
  require(x.rank() >= 2, "batch norm needs a channel axis");
  const Index C = x.shape().back();
  const Index M = C > 0 ? x.size() / C : 0;
  require(M > 0 && x.dim(0) > 0, "batch norm on an empty batch");
  require(gamma.value().size() == C && beta.value().size() == C, "gamma/beta length must equal channel extent");
  require(static_cast<Index>(state.running_mean.size()) == C, "running statistics channel mismatch");
  const double* g = gamma.value().data();
  const double* b = beta.value().data();

  std::vector<double> mean(static_cast<std::size_t>(C), 0.0), inv_std(static_cast<std::size_t>(C), 0.0);
  if (training) {
    std::vector<double> var(static_cast<std::size_t>(C), 0.0);
    for (Index i = 0; i < M; ++i)
      for (Index c = 0; c < C; ++c) mean[static_cast<std::size_t>(c)] += x[i * C + c];
    for (auto& m : mean) m /= static_cast<double>(M);
    for (Index i = 0; i < M; ++i)
      for (Index c = 0; c < C; ++c) {
        const double d = x[i * C + c] - mean[static_cast<std::size_t>(c)];
        var[static_cast<std::size_t>(c)] += d * d;
      }
    for (std::size_t c = 0; c < var.size(); ++c) {
      var[c] /= static_cast<double>(M);
      inv_std[c] = 1.0 / std::sqrt(var[c] + state.epsilon);
      state.running_mean[c] = state.momentum * state.running_mean[c] + (1.0 - state.momentum) * mean[c];
      state.running_var[c] = state.momentum * state.running_var[c] + (1.0 - state.momentum) * var[c];
    }
  } else {
    for (std::size_t c = 0; c < mean.size(); ++c) {
      mean[c] = state.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(state.running_var[c] + state.epsilon);
    }
  }

  Tensor y(x.shape());
  for (Index i = 0; i < M; ++i)
    for (Index c = 0; c < C; ++c) {
      const auto cc = static_cast<std::size_t>(c);
      y[i * C + c] = g[c] * (x[i * C + c] - mean[cc]) * inv_std[cc] + b[c];
    }

  auto backward = [M, C, mean, inv_std, training](BackwardContext& ctx) {
    const Tensor& x = ctx.input(0);
    const Tensor& gm = ctx.input(1);
    const Tensor& dy = ctx.out_grad();
    Tensor* dx = ctx.input_grad(0);
    Tensor* dg = ctx.input_grad(1);
    Tensor* dbeta = ctx.input_grad(2);
    std::vector<double> sum_dy(static_cast<std::size_t>(C), 0.0), sum_dy_xhat(static_cast<std::size_t>(C), 0.0);
    for (Index i = 0; i < M; ++i)
      for (Index c = 0; c < C; ++c) {
        const auto cc = static_cast<std::size_t>(c);
        const double xhat = (x[i * C + c] - mean[cc]) * inv_std[cc];
        sum_dy[cc] += dy[i * C + c];
        sum_dy_xhat[cc] += dy[i * C + c] * xhat;
      }
    if (dg)
      for (Index c = 0; c < C; ++c) (*dg)[c] += sum_dy_xhat[static_cast<std::size_t>(c)];
    if (dbeta)
      for (Index c = 0; c < C; ++c) (*dbeta)[c] += sum_dy[static_cast<std::size_t>(c)];
    if (!dx) return;
    const double inv_m = 1.0 / static_cast<double>(M);
    for (Index i = 0; i < M; ++i)
      for (Index c = 0; c < C; ++c) {
        const auto cc = static_cast<std::size_t>(c);
        const double scale = gm[c] * inv_std[cc];
        if (training) {
          const double xhat = (x[i * C + c] - mean[cc]) * inv_std[cc];
          (*dx)[i * C + c] += scale * (dy[i * C + c] - inv_m * sum_dy[cc] - xhat * inv_m * sum_dy_xhat[cc]);
        } else {
          (*dx)[i * C + c] += scale * dy[i * C + c];
        }
      }
  };
  return input.graph->record(std::move(y), {input, gamma, beta}, backward, "batch_norm");
}

Var relu(Var input) {
  const Tensor& x = input.value();
  Tensor y(x.shape());
  for (Index i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  auto backward = [](BackwardContext& ctx) {
    Tensor* dx = ctx.input_grad(0);
    if (!dx) return;
    const Tensor& x = ctx.input(0);
    const Tensor& dy = ctx.out_grad();
    for (Index i = 0; i < x.size(); ++i)
      if (x[i] > 0.0) (*dx)[i] += dy[i];
  };
  return input.graph->record(std::move(y), {input}, backward, "relu");
}

Var softmax(Var input) {
  const Tensor& x = input.value();
  require(x.rank() >= 1 && x.shape().back() >= 2, "softmax needs a class axis of extent >= 2");
  const Index K = x.shape().back();
  const Index M = x.size() / K;
  Tensor y(x.shape());
  for (Index i = 0; i < M; ++i) {
    const double* row = x.data() + i * K;
    double* out = y.data() + i * K;
    const double mx = *std::max_element(row, row + K);
    double s = 0.0;
    for (Index k = 0; k < K; ++k) {
      out[k] = std::exp(row[k] - mx);
      s += out[k];
    }
    for (Index k = 0; k < K; ++k) out[k] /= s;
  }
  auto backward = [M, K](BackwardContext& ctx) {
    Tensor* dx = ctx.input_grad(0);
    if (!dx) return;
    const Tensor& y = ctx.output();
    const Tensor& dy = ctx.out_grad();
    for (Index i = 0; i < M; ++i) {
      double dot = 0.0;
      for (Index k = 0; k < K; ++k) dot += dy[i * K + k] * y[i * K + k];
      for (Index k = 0; k < K; ++k) (*dx)[i * K + k] += y[i * K + k] * (dy[i * K + k] - dot);
    }
  };
  return input.graph->record(std::move(y), {input}, backward, "softmax");
}

Var concat_channels(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  require(x.rank() == z.rank() && x.rank() >= 1, "concat rank mismatch");
  for (Index i = 0; i + 1 < x.rank(); ++i)
    require(x.shape()[static_cast<std::size_t>(i)] == z.shape()[static_cast<std::size_t>(i)],
            "concat leading extents differ: " + shape_string(x.shape()) + " vs " + shape_string(z.shape()));
  const Index ca = x.shape().back(), cb = z.shape().back();
  const Index M = ca > 0 ? x.size() / ca : 0;
  Shape s = x.shape();
  s.back() = ca + cb;
  Tensor y(s);
  for (Index i = 0; i < M; ++i) {
    std::copy_n(x.data() + i * ca, ca, y.data() + i * (ca + cb));
    std::copy_n(z.data() + i * cb, cb, y.data() + i * (ca + cb) + ca);
  }
  auto backward = [M, ca, cb](BackwardContext& ctx) {
    const Tensor& dy = ctx.out_grad();
    if (Tensor* da = ctx.input_grad(0))
      for (Index i = 0; i < M; ++i)
        for (Index c = 0; c < ca; ++c) (*da)[i * ca + c] += dy[i * (ca + cb) + c];
    if (Tensor* db = ctx.input_grad(1))
      for (Index i = 0; i < M; ++i)
        for (Index c = 0; c < cb; ++c) (*db)[i * cb + c] += dy[i * (ca + cb) + ca + c];
  };
  return a.graph->record(std::move(y), {a, b}, backward, "concat");
}

Var reshape(Var input, Shape shape) {
  Tensor y = input.value().reshaped(std::move(shape));
  auto backward = [](BackwardContext& ctx) {
    Tensor* dx = ctx.input_grad(0);
    if (!dx) return;
    const Tensor& dy = ctx.out_grad();
    for (Index i = 0; i < dy.size(); ++i) (*dx)[i] += dy[i];
  };
  return input.graph->record(std::move(y), {input}, backward, "reshape");
}

namespace {

// Offset of (n, slice, pixel, channel) in the stacked layout and in the folded layout.
struct FoldLayout {
  Index n, d, hw, c;
  Index stacked(Index ni, Index s, Index p, Index ch) const { return ((ni * d + s) * hw + p) * c + ch; }
  Index folded(Index ni, Index s, Index p, Index ch) const { return ((ni * hw + p) * d + s) * c + ch; }
};

}  // namespace

Var channel_fold(Var input) {
  const Tensor& x = input.value();
  require(x.rank() == 5, "channel_fold expects (N,d,H,W,C), got " + shape_string(x.shape()));
  const auto& s = x.shape();
  const FoldLayout L{s[0], s[1], s[2] * s[3], s[4]};
  Tensor y(Shape{s[0], s[2], s[3], s[1] * s[4]});
  for (Index n = 0; n < L.n; ++n)
    for (Index sl = 0; sl < L.d; ++sl)
      for (Index p = 0; p < L.hw; ++p)
        for (Index c = 0; c < L.c; ++c) y[L.folded(n, sl, p, c)] = x[L.stacked(n, sl, p, c)];
  auto backward = [L](BackwardContext& ctx) {
    Tensor* dx = ctx.input_grad(0);
    if (!dx) return;
    const Tensor& dy = ctx.out_grad();
    for (Index n = 0; n < L.n; ++n)
      for (Index sl = 0; sl < L.d; ++sl)
        for (Index p = 0; p < L.hw; ++p)
          for (Index c = 0; c < L.c; ++c) (*dx)[L.stacked(n, sl, p, c)] += dy[L.folded(n, sl, p, c)];
  };
  return input.graph->record(std::move(y), {input}, backward, "channel_fold");
}

Var channel_unfold(Var input, Index slices) {
  const Tensor& x = input.value();
  require(x.rank() == 4, "channel_unfold expects (N,H,W,d*C)");
  const auto& s = x.shape();
  require(slices > 0 && s[3] % slices == 0, "channel extent is not divisible by the slice count");
  const FoldLayout L{s[0], slices, s[1] * s[2], s[3] / slices};
  Tensor y(Shape{s[0], slices, s[1], s[2], L.c});
  for (Index n = 0; n < L.n; ++n)
    for (Index sl = 0; sl < L.d; ++sl)
      for (Index p = 0; p < L.hw; ++p)
        for (Index c = 0; c < L.c; ++c) y[L.stacked(n, sl, p, c)] = x[L.folded(n, sl, p, c)];
  auto backward = [L](BackwardContext& ctx) {
    Tensor* dx = ctx.input_grad(0);
    if (!dx) return;
    const Tensor& dy = ctx.out_grad();
    for (Index n = 0; n < L.n; ++n)
      for (Index sl = 0; sl < L.d; ++sl)
        for (Index p = 0; p < L.hw; ++p)
          for (Index c = 0; c < L.c; ++c) (*dx)[L.folded(n, sl, p, c)] += dy[L.stacked(n, sl, p, c)];
  };
  return input.graph->record(std::move(y), {input}, backward, "channel_unfold");
}

Var add(Var a, Var b) {
  require(a.shape() == b.shape(), "add shape mismatch");
  Tensor y = a.value();
  y.accumulate(b.value());
  auto backward = [](BackwardContext& ctx) {
    if (Tensor* da = ctx.input_grad(0)) da->accumulate(ctx.out_grad());
    if (Tensor* db = ctx.input_grad(1)) db->accumulate(ctx.out_grad());
  };
  return a.graph->record(std::move(y), {a, b}, backward, "add");
}

Var mul(Var a, Var b) {
  require(a.shape() == b.shape(), "mul shape mismatch");
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  Tensor y(x.shape());
  for (Index i = 0; i < y.size(); ++i) y[i] = x[i] * z[i];
  auto backward = [](BackwardContext& ctx) {
    const Tensor& dy = ctx.out_grad();
    const Tensor& x = ctx.input(0);
    const Tensor& z = ctx.input(1);
    if (Tensor* da = ctx.input_grad(0))
      for (Index i = 0; i < dy.size(); ++i) (*da)[i] += dy[i] * z[i];
    if (Tensor* db = ctx.input_grad(1))
      for (Index i = 0; i < dy.size(); ++i) (*db)[i] += dy[i] * x[i];
  };
  return a.graph->record(std::move(y), {a, b}, backward, "mul");
}

Var scale(Var a, double factor) {
  Tensor y = a.value();
  for (double& v : y.values()) v *= factor;
  auto backward = [factor](BackwardContext& ctx) {
    Tensor* dx = ctx.input_grad(0);
    if (!dx) return;
    const Tensor& dy = ctx.out_grad();
    for (Index i = 0; i < dy.size(); ++i) (*dx)[i] += factor * dy[i];
  };
  return a.graph->record(std::move(y), {a}, backward, "scale");
}

Var sum(Var a) {
  Tensor y = Tensor::scalar(a.value().sum());
  auto backward = [](BackwardContext& ctx) {
    Tensor* dx = ctx.input_grad(0);
    if (!dx) return;
    const double g = ctx.out_grad()[0];
    for (double& v : dx->values()) v += g;
  };
  return a.graph->record(std::move(y), {a}, backward, "sum");
}

Var mean(Var a) {
  const Index n = a.value().size();
  require(n > 0, "mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

}  // namespace ops

}  // namespace p3d
