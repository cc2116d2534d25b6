#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "stcore/tensor.hpp"

namespace stcore {

enum class GammaStorage { Linear, Log };

/// Temporal sliding batch norm over activations [T, B, C, H, W].
///
/// Every timestep t has its own per-channel affine pair gamma[t], beta[t].
/// Training statistics at t come from a window of w consecutive timesteps
/// (see tsbn_window) pooled over batch and space. Running statistics are kept
/// per timestep index for inference and folding.
struct TsbnLayer {
  std::int64_t T = 0;
  std::int64_t C = 0;
  std::int64_t w = 0;
  GammaStorage storage = GammaStorage::Linear;
  Tensor gamma_param;  // [T, C]; log(gamma) when storage == Log
  Tensor beta;         // [T, C]
  Tensor running_mu;   // [T, C], starts at 0
  Tensor running_var;  // [T, C], starts at 1
  bool stats_ready = false;
  double momentum = 0.1;
  double eps = 1e-5;
  std::string name;

  /// gamma = 1, beta = 0, trainable. Throws ValueError unless 1 <= w <= T.
  static TsbnLayer create(std::int64_t T, std::int64_t C, std::int64_t w,
                          GammaStorage storage = GammaStorage::Linear, std::string name = {});

  /// Effective gamma [T, C]; exp(gamma_param) for log storage (differentiable).
  Tensor gamma() const;
  /// Effective gamma as plain doubles, row-major [T, C].
  std::vector<double> gamma_values() const;
  std::vector<Tensor> parameters() const { return {gamma_param, beta}; }
  /// gamma, beta and both running statistics.
  std::int64_t stored_floats() const { return 4 * T * C; }
  void validate() const;
};

/// First timestep of the statistics window for output t: the w consecutive
/// steps starting at max(0, t - w + 1), kept inside [0, T).
std::int64_t tsbn_window_start(std::int64_t t, std::int64_t w, std::int64_t T);

/// Per-channel mean and biased variance of x [T,B,C,H,W] over the window of
/// timestep t, pooled over window time, batch and space.
std::pair<Tensor, Tensor> tsbn_window_stats(const Tensor& x, std::int64_t t, std::int64_t w);

/// Double-precision variant returning flat [C] vectors.
std::pair<std::vector<double>, std::vector<double>> tsbn_window_stats_f64(const Tensor& x, std::int64_t t,
                                                                          std::int64_t w);

/// Normalizes with window statistics and updates the running statistics of
/// `layer`. Differentiable in x, gamma_param and beta.
Tensor tsbn_forward_train(const Tensor& x, TsbnLayer& layer);

/// Normalizes with the running statistics. Read-only; throws StateError if
/// the layer has never seen a training batch.
Tensor tsbn_forward_infer(const Tensor& x, const TsbnLayer& layer);

/// tsbn_forward_infer evaluated and returned in double, [T,B,C,H,W] flat.
std::vector<double> tsbn_forward_infer_f64(const Tensor& x, const TsbnLayer& layer);

}  // namespace stcore
