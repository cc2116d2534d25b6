#include "stcore/temporal_fold.hpp"

#include <cmath>
#include <limits>

#include "stcore/error.hpp"

namespace stcore {

namespace {

using Index = std::int64_t;

float round_up(double v) {
  float f = static_cast<float>(v);
  if (static_cast<double>(f) < v) f = std::nextafter(f, std::numeric_limits<float>::infinity());
  return f;
}

}  // namespace

std::vector<double> fold_threshold_f64(const TsbnLayer& layer, double v_th) {
  layer.validate();
  if (!layer.stats_ready) {
    throw StateError("cannot fold TSBN '" + layer.name + "': no running statistics");
  }
  const auto gamma = layer.gamma_values();
  const auto beta = layer.beta.data();
  const auto rm = layer.running_mu.data();
  const auto rv = layer.running_var.data();
  std::vector<double> out(gamma.size());
  for (Index t = 0; t < layer.T; ++t) {
    for (Index c = 0; c < layer.C; ++c) {
      const auto k = static_cast<std::size_t>(t * layer.C + c);
      if (!(gamma[k] > 0.0)) {
        throw ValueError("cannot fold TSBN '" + layer.name + "': gamma <= 0 at (t=" + std::to_string(t) +
                         ", c=" + std::to_string(c) + ")");
      }
      out[k] = (v_th - beta[k]) * std::sqrt(static_cast<double>(rv[k]) + layer.eps) / gamma[k] + rm[k];
      if (!std::isfinite(out[k])) {
        throw ValueError("cannot fold TSBN '" + layer.name + "': non-finite threshold at (t=" +
                         std::to_string(t) + ", c=" + std::to_string(c) + ")");
      }
    }
  }
  return out;
}

FoldedThreshold fold_threshold(const TsbnLayer& layer, double v_th) {
  const auto v = fold_threshold_f64(layer, v_th);
  std::vector<float> f(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) f[i] = round_up(v[i]);
  return {Tensor({layer.T, layer.C}, std::move(f)), layer.name};
}

std::vector<double> normalized_margin(const Tensor& x, const TsbnLayer& layer, double v_th) {
  auto z = tsbn_forward_infer_f64(x, layer);
  for (auto& v : z) v -= v_th;
  return z;
}

Tensor spike_normalized(const Tensor& x, const TsbnLayer& layer, double v_th) {
  const auto z = tsbn_forward_infer_f64(x, layer);
  std::vector<float> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] >= v_th ? 1.0f : 0.0f;
  return Tensor(x.shape(), std::move(out));
}

Tensor spike_folded(const Tensor& x, const FoldedThreshold& ft) {
  if (x.rank() != 5) throw ShapeError("spike_folded expects [T,B,C,H,W], got " + shape_str(x.shape()));
  const Index T = ft.v_th_eff.dim(0), C = ft.v_th_eff.dim(1);
  if (x.dim(0) != T || x.dim(2) != C) {
    throw ShapeError("spike_folded: thresholds " + shape_str(ft.v_th_eff.shape()) + " vs input " +
                     shape_str(x.shape()));
  }
  const Index B = x.dim(1), HW = x.dim(3) * x.dim(4);
  const auto xd = x.data();
  const auto th = ft.v_th_eff.data();
  std::vector<float> out(xd.size());
  for (Index t = 0; t < T; ++t)
    for (Index b = 0; b < B; ++b)
      for (Index c = 0; c < C; ++c) {
        const float v = th[static_cast<std::size_t>(t * C + c)];
        const Index base = ((t * B + b) * C + c) * HW;
        for (Index i = 0; i < HW; ++i) {
          out[static_cast<std::size_t>(base + i)] = xd[static_cast<std::size_t>(base + i)] >= v ? 1.0f : 0.0f;
        }
      }
  return Tensor(x.shape(), std::move(out));
}

}  // namespace stcore
