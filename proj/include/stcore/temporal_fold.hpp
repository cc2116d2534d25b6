#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stcore/tensor.hpp"
#include "stcore/tsbn.hpp"

namespace stcore {

/// Per-timestep, per-channel threshold that replaces TSBN + compare.
struct FoldedThreshold {
  Tensor v_th_eff;     // [T, C]
  std::string source;  // name of the TSBN it came from
};

/// v_eff = (v_th - beta) sqrt(running_var + eps) / gamma + running_mu.
///
/// Evaluated in double and rounded up to float, so for any float x the test
/// x >= v_eff agrees with the double-precision threshold. Throws ValueError
/// naming (t, c) if some gamma <= 0, StateError without running statistics.
FoldedThreshold fold_threshold(const TsbnLayer& layer, double v_th);

/// Unrounded effective thresholds, row-major [T, C].
std::vector<double> fold_threshold_f64(const TsbnLayer& layer, double v_th);

/// Reference path: inference TSBN followed by a >= v_th compare, in double.
Tensor spike_normalized(const Tensor& x, const TsbnLayer& layer, double v_th);

/// Folded path: spike = x >= v_th_eff[t, c]. No arithmetic besides compares.
Tensor spike_folded(const Tensor& x, const FoldedThreshold& ft);

/// Signed distance of every normalized element from v_th, in double. Used to
/// place elements inside or outside the boundary band.
std::vector<double> normalized_margin(const Tensor& x, const TsbnLayer& layer, double v_th);

}  // namespace stcore
