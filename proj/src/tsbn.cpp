#include "stcore/tsbn.hpp"

#include <algorithm>
#include <cmath>

#include "stcore/autograd.hpp"
#include "stcore/error.hpp"
#include "stcore/ops.hpp"

namespace stcore {

namespace {

using Index = std::int64_t;

struct Geometry {
  Index T, B, C, HW;
};

Geometry geometry_of(const Tensor& x) {
  if (x.rank() != 5) throw ShapeError("TSBN expects [T,B,C,H,W], got " + shape_str(x.shape()));
  return {x.dim(0), x.dim(1), x.dim(2), x.dim(3) * x.dim(4)};
}

void check_layer_input(const Tensor& x, const TsbnLayer& layer) {
  const auto g = geometry_of(x);
  if (g.T != layer.T || g.C != layer.C) {
    throw ShapeError("TSBN '" + layer.name + "' built for T=" + std::to_string(layer.T) +
                     ", C=" + std::to_string(layer.C) + ", got " + shape_str(x.shape()));
  }
  if (layer.w > g.T) throw ValueError("TSBN window w exceeds T");
}

}  // namespace

TsbnLayer TsbnLayer::create(Index T, Index C, Index w, GammaStorage storage, std::string name) {
  if (T < 1 || C < 1) throw ValueError("TSBN needs T >= 1 and C >= 1");
  if (w < 1 || w > T) throw ValueError("TSBN window must satisfy 1 <= w <= T");
  TsbnLayer layer;
  layer.T = T;
  layer.C = C;
  layer.w = w;
  layer.storage = storage;
  layer.gamma_param = Tensor::full({T, C}, storage == GammaStorage::Log ? 0.0f : 1.0f);
  layer.gamma_param.set_requires_grad(true);
  layer.beta = Tensor::zeros({T, C});
  layer.beta.set_requires_grad(true);
  layer.running_mu = Tensor::zeros({T, C});
  layer.running_var = Tensor::ones({T, C});
  layer.name = std::move(name);
  return layer;
}

Tensor TsbnLayer::gamma() const { return storage == GammaStorage::Log ? exp(gamma_param) : gamma_param; }

std::vector<double> TsbnLayer::gamma_values() const {
  const auto p = gamma_param.data();
  std::vector<double> out(p.begin(), p.end());
  if (storage == GammaStorage::Log) {
    for (auto& v : out) v = std::exp(v);
  }
  return out;
}

void TsbnLayer::validate() const {
  if (w < 1 || w > T) throw ValueError("TSBN '" + name + "': window must satisfy 1 <= w <= T");
  if (!(eps > 0.0)) throw ValueError("TSBN '" + name + "': eps must be positive");
  const Shape tc{T, C};
  for (const Tensor* t : {&gamma_param, &beta, &running_mu, &running_var}) {
    if (t->shape() != tc) throw ShapeError("TSBN '" + name + "': parameter shape " + shape_str(t->shape()));
  }
  for (float v : running_var.data()) {
    if (v < 0.0f) throw ValueError("TSBN '" + name + "': negative running variance");
  }
}

Index tsbn_window_start(Index t, Index w, Index T) {
  return std::clamp<Index>(t - w + 1, 0, std::max<Index>(T - w, 0));
}

std::pair<std::vector<double>, std::vector<double>> tsbn_window_stats_f64(const Tensor& x, Index t, Index w) {
  const auto g = geometry_of(x);
  if (t < 0 || t >= g.T) throw ValueError("tsbn_window_stats: t out of range");
  if (w < 1 || w > g.T) throw ValueError("tsbn_window_stats: window must satisfy 1 <= w <= T");
  const Index s = tsbn_window_start(t, w, g.T);
  const auto d = x.data();
  std::vector<double> mu(static_cast<std::size_t>(g.C), 0.0), var(static_cast<std::size_t>(g.C), 0.0);
  const double n = static_cast<double>(w * g.B * g.HW);
  for (Index c = 0; c < g.C; ++c) {
    double acc = 0.0;
    for (Index tt = s; tt < s + w; ++tt) {
      for (Index b = 0; b < g.B; ++b) {
        const float* p = d.data() + ((tt * g.B + b) * g.C + c) * g.HW;
        for (Index i = 0; i < g.HW; ++i) acc += p[i];
      }
    }
    const double m = n > 0 ? acc / n : 0.0;
    double sq = 0.0;
    for (Index tt = s; tt < s + w; ++tt) {
      for (Index b = 0; b < g.B; ++b) {
        const float* p = d.data() + ((tt * g.B + b) * g.C + c) * g.HW;
        for (Index i = 0; i < g.HW; ++i) sq += (p[i] - m) * (p[i] - m);
      }
    }
    mu[static_cast<std::size_t>(c)] = m;
    var[static_cast<std::size_t>(c)] = n > 0 ? sq / n : 0.0;
  }
  return {std::move(mu), std::move(var)};
}

std::pair<Tensor, Tensor> tsbn_window_stats(const Tensor& x, Index t, Index w) {
  auto [mu, var] = tsbn_window_stats_f64(x, t, w);
  const Index C = static_cast<Index>(mu.size());
  return {Tensor({C}, std::vector<float>(mu.begin(), mu.end())),
          Tensor({C}, std::vector<float>(var.begin(), var.end()))};
}

Tensor tsbn_forward_train(const Tensor& x, TsbnLayer& layer) {
  check_layer_input(x, layer);
  const auto g = geometry_of(x);
  if (g.B * g.HW == 0) throw ShapeError("TSBN training needs a non-empty batch");
  const Tensor gamma = layer.gamma();
  const auto gd = gamma.data();
  const auto bd = layer.beta.data();
  const auto xd = x.data();

  const auto TC = static_cast<std::size_t>(g.T * g.C);
  std::vector<double> mu(TC), inv_std(TC);
  for (Index t = 0; t < g.T; ++t) {
    auto [m, v] = tsbn_window_stats_f64(x, t, layer.w);
    for (Index c = 0; c < g.C; ++c) {
      const auto k = static_cast<std::size_t>(t * g.C + c);
      mu[k] = m[static_cast<std::size_t>(c)];
      inv_std[k] = 1.0 / std::sqrt(v[static_cast<std::size_t>(c)] + layer.eps);
      const double m_old = layer.running_mu.data()[k];
      const double v_old = layer.running_var.data()[k];
      layer.running_mu.mutable_data()[k] = static_cast<float>((1.0 - layer.momentum) * m_old + layer.momentum * mu[k]);
      layer.running_var.mutable_data()[k] =
          static_cast<float>((1.0 - layer.momentum) * v_old + layer.momentum * v[static_cast<std::size_t>(c)]);
    }
  }
  layer.stats_ready = true;

  std::vector<float> out(xd.size());
  for (Index t = 0; t < g.T; ++t) {
    for (Index b = 0; b < g.B; ++b) {
      for (Index c = 0; c < g.C; ++c) {
        const auto k = static_cast<std::size_t>(t * g.C + c);
        const Index base = ((t * g.B + b) * g.C + c) * g.HW;
        for (Index i = 0; i < g.HW; ++i) {
          const double xhat = (xd[static_cast<std::size_t>(base + i)] - mu[k]) * inv_std[k];
          out[static_cast<std::size_t>(base + i)] = static_cast<float>(gd[k] * xhat + bd[k]);
        }
      }
    }
  }
  Tensor y(x.shape(), std::move(out));

  if (detail::needs_grad({&x, &gamma, &layer.beta})) {
    const Index w = layer.w;
    detail::record_op(
        "tsbn_train", y, {x, gamma, layer.beta},
        [x, gamma, g, w, mu = std::move(mu), inv_std = std::move(inv_std)](
            std::span<const double> go, std::span<const std::span<double>> gin) {
          const auto xd = x.data();
          const auto gd = gamma.data();
          const double n = static_cast<double>(w * g.B * g.HW);
          for (Index t = 0; t < g.T; ++t) {
            const Index s = tsbn_window_start(t, w, g.T);
            for (Index c = 0; c < g.C; ++c) {
              const auto k = static_cast<std::size_t>(t * g.C + c);
              // sums over the output slice at t only
              double sum_g = 0.0, sum_gx = 0.0;
              for (Index b = 0; b < g.B; ++b) {
                const Index base = ((t * g.B + b) * g.C + c) * g.HW;
                for (Index i = 0; i < g.HW; ++i) {
                  const auto j = static_cast<std::size_t>(base + i);
                  sum_g += go[j];
                  sum_gx += go[j] * (xd[j] - mu[k]) * inv_std[k];
                }
              }
              if (!gin[1].empty()) gin[1][k] += sum_gx;
              if (!gin[2].empty()) gin[2][k] += sum_g;
              if (gin[0].empty()) continue;
              const double a = gd[k] * inv_std[k];
              for (Index tt = s; tt < s + w; ++tt) {
                for (Index b = 0; b < g.B; ++b) {
                  const Index base = ((tt * g.B + b) * g.C + c) * g.HW;
                  for (Index i = 0; i < g.HW; ++i) {
                    const auto j = static_cast<std::size_t>(base + i);
                    const double xhat = (xd[j] - mu[k]) * inv_std[k];
                    double d = -(sum_g + xhat * sum_gx) / n;
                    if (tt == t) d += go[j];
                    gin[0][j] += a * d;
                  }
                }
              }
            }
          }
        });
  }
  return y;
}

std::vector<double> tsbn_forward_infer_f64(const Tensor& x, const TsbnLayer& layer) {
  check_layer_input(x, layer);
  if (!layer.stats_ready) {
    throw StateError("TSBN '" + layer.name + "' has no running statistics; run a training batch first");
  }
  const auto g = geometry_of(x);
  const auto gamma = layer.gamma_values();
  const auto bd = layer.beta.data();
  const auto rm = layer.running_mu.data();
  const auto rv = layer.running_var.data();
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (Index t = 0; t < g.T; ++t) {
    for (Index c = 0; c < g.C; ++c) {
      const auto k = static_cast<std::size_t>(t * g.C + c);
      const double scale = gamma[k] / std::sqrt(static_cast<double>(rv[k]) + layer.eps);
      for (Index b = 0; b < g.B; ++b) {
        const Index base = ((t * g.B + b) * g.C + c) * g.HW;
        for (Index i = 0; i < g.HW; ++i) {
          const auto j = static_cast<std::size_t>(base + i);
          out[j] = scale * (xd[j] - static_cast<double>(rm[k])) + bd[k];
        }
      }
    }
  }
  return out;
}

Tensor tsbn_forward_infer(const Tensor& x, const TsbnLayer& layer) {
  const auto out = tsbn_forward_infer_f64(x, layer);
  return Tensor(x.shape(), std::vector<float>(out.begin(), out.end()));
}

}  // namespace stcore
