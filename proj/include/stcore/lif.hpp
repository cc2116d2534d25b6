#pragma once

#include <utility>

#include "stcore/tensor.hpp"

namespace stcore {

/// Leaky integrate-and-fire hyperparameters. Defaults are k_tau = 2,
/// V_th = 1, V_reset = 0 with an arctan surrogate of sharpness 2.
struct LifParams {
  double k_tau = 2.0;
  double v_th = 1.0;
  double v_reset = 0.0;
  double surrogate_alpha = 2.0;

  /// Throws ValueError unless k_tau >= 1, v_th > v_reset, alpha >= 0.
  void validate() const;
};

/// Membrane potential V[t-1] of one layer.
struct LifState {
  Tensor v;

  /// All neurons at v_reset.
  static LifState rest(const Shape& shape, const LifParams& params);
};

struct LifStepResult {
  Tensor spikes;
  LifState state;
  Tensor membrane;  // U[t], before reset
};

/// One timestep:
///   U  = V + (X - (V - V_reset)) / k_tau
///   S  = H(U - V_th), H(0) = 1
///   V' = U (1 - S) + V_reset S
/// Forward only; use lif_sequence for training.
LifStepResult lif_step(const Tensor& x_t, const LifState& state, const LifParams& params);

/// Runs lif_step over axis 0 of x [T, ...] from rest. Differentiable: the
/// backward pass uses the arctan surrogate for dS/dU and treats S in the
/// reset term as a constant.
Tensor lif_sequence(const Tensor& x, const LifParams& params);

/// Same as lif_sequence but also returns the pre-reset membrane U for every
/// timestep (no gradient recording on the membrane output).
std::pair<Tensor, Tensor> lif_sequence_with_membrane(const Tensor& x, const LifParams& params);

/// Arctan surrogate derivative alpha / (2 (1 + (pi/2 alpha (u - v_th))^2)).
double arctan_surrogate(double u, double v_th, double alpha);

/// Elementwise arctan_surrogate over u.
Tensor surrogate_grad(const Tensor& u, const LifParams& params);

/// Stateless threshold unit: S = H(z - v_th) with H(0) = 1, backward through
/// the arctan surrogate of sharpness `alpha`.
Tensor threshold_spike(const Tensor& z, double v_th, double alpha);

}  // namespace stcore
