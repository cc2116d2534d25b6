#include "stcore/lif.hpp"

#include <cmath>
#include <numbers>

#include "stcore/autograd.hpp"
#include "stcore/error.hpp"

namespace stcore {

void LifParams::validate() const {
  if (!(k_tau >= 1.0)) throw ValueError("LIF k_tau must be >= 1");
  if (!(v_th > v_reset)) throw ValueError("LIF v_th must exceed v_reset");
  if (!(surrogate_alpha >= 0.0)) throw ValueError("surrogate alpha must be >= 0");
}

LifState LifState::rest(const Shape& shape, const LifParams& params) {
  return {Tensor::full(shape, static_cast<float>(params.v_reset))};
}

double arctan_surrogate(double u, double v_th, double alpha) {
  const double z = std::numbers::pi / 2.0 * alpha * (u - v_th);
  return alpha / (2.0 * (1.0 + z * z));
}

LifStepResult lif_step(const Tensor& x_t, const LifState& state, const LifParams& params) {
  params.validate();
  if (x_t.shape() != state.v.shape()) {
    throw ShapeError("lif_step: input " + shape_str(x_t.shape()) + " vs state " +
                     shape_str(state.v.shape()));
  }
  const auto x = x_t.data();
  const auto v = state.v.data();
  std::vector<float> spikes(x.size()), v_next(x.size()), membrane(x.size());
  const double inv_tau = 1.0 / params.k_tau;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double u = v[i] + inv_tau * (x[i] - (v[i] - params.v_reset));
    const bool fire = u >= params.v_th;
    membrane[i] = static_cast<float>(u);
    spikes[i] = fire ? 1.0f : 0.0f;
    v_next[i] = fire ? static_cast<float>(params.v_reset) : static_cast<float>(u);
  }
  return {Tensor(x_t.shape(), std::move(spikes)), LifState{Tensor(x_t.shape(), std::move(v_next))},
          Tensor(x_t.shape(), std::move(membrane))};
}

namespace {

struct LifRun {
  std::vector<float> spikes;
  std::vector<float> membrane;
};

// V is rounded to float32 between steps so the fold matches lif_step exactly.
LifRun run_lif(const Tensor& x, const LifParams& params) {
  const auto T = x.dim(0);
  const auto n = static_cast<std::size_t>(x.numel() / T);
  const auto xd = x.data();
  LifRun run{std::vector<float>(xd.size()), std::vector<float>(xd.size())};
  std::vector<double> v(n, static_cast<double>(static_cast<float>(params.v_reset)));
  const double inv_tau = 1.0 / params.k_tau;
  for (std::int64_t t = 0; t < T; ++t) {
    const std::size_t off = static_cast<std::size_t>(t) * n;
    for (std::size_t i = 0; i < n; ++i) {
      const double u = v[i] + inv_tau * (xd[off + i] - (v[i] - params.v_reset));
      const bool fire = u >= params.v_th;
      run.membrane[off + i] = static_cast<float>(u);
      run.spikes[off + i] = fire ? 1.0f : 0.0f;
      v[i] = fire ? static_cast<double>(static_cast<float>(params.v_reset))
                  : static_cast<double>(static_cast<float>(u));
    }
  }
  return run;
}

Tensor lif_sequence_impl(const Tensor& x, const LifParams& params, Tensor* membrane_out) {
  params.validate();
  if (x.rank() < 1 || x.dim(0) < 1) throw ShapeError("lif_sequence needs T >= 1");
  LifRun run = run_lif(x, params);
  if (membrane_out) *membrane_out = Tensor(x.shape(), run.membrane);
  Tensor spikes(x.shape(), std::move(run.spikes));
  if (detail::needs_grad({&x})) {
    const auto T = x.dim(0);
    const auto n = static_cast<std::size_t>(x.numel() / T);
    detail::record_op(
        "lif_sequence", spikes, {x},
        [params, T, n, membrane = std::move(run.membrane), spk = spikes](
            std::span<const double> g, std::span<const std::span<double>> gin) {
          const auto s = spk.data();
          const double inv_tau = 1.0 / params.k_tau;
          // carry = dL/dV[t] flowing back from step t+1
          std::vector<double> carry(n, 0.0);
          for (std::int64_t t = T; t-- > 0;) {
            const std::size_t off = static_cast<std::size_t>(t) * n;
            for (std::size_t i = 0; i < n; ++i) {
              const double sg = arctan_surrogate(membrane[off + i], params.v_th, params.surrogate_alpha);
              const double du = g[off + i] * sg + carry[i] * (1.0 - s[off + i]);
              gin[0][off + i] += du * inv_tau;
              carry[i] = du * (1.0 - inv_tau);
            }
          }
        });
  }
  return spikes;
}

}  // namespace

Tensor lif_sequence(const Tensor& x, const LifParams& params) {
  return lif_sequence_impl(x, params, nullptr);
}

std::pair<Tensor, Tensor> lif_sequence_with_membrane(const Tensor& x, const LifParams& params) {
  Tensor membrane;
  Tensor spikes = lif_sequence_impl(x, params, &membrane);
  return {spikes, membrane};
}

Tensor surrogate_grad(const Tensor& u, const LifParams& params) {
  const auto d = u.data();
  std::vector<float> out(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    out[i] = static_cast<float>(arctan_surrogate(d[i], params.v_th, params.surrogate_alpha));
  }
  return Tensor(u.shape(), std::move(out));
}

Tensor threshold_spike(const Tensor& z, double v_th, double alpha) {
  const auto d = z.data();
  std::vector<float> out(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) out[i] = d[i] >= v_th ? 1.0f : 0.0f;
  Tensor spikes(z.shape(), std::move(out));
  if (detail::needs_grad({&z})) {
    detail::record_op("threshold_spike", spikes, {z},
                      [z, v_th, alpha](std::span<const double> g, std::span<const std::span<double>> gin) {
                        const auto d = z.data();
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          gin[0][i] += g[i] * arctan_surrogate(d[i], v_th, alpha);
                        }
                      });
  }
  return spikes;
}

}  // namespace stcore
