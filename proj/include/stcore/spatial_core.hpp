#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stcore/random.hpp"
#include "stcore/tensor.hpp"
#include "stcore/tsbn.hpp"

namespace stcore {

enum class BranchKind { Identity, Conv1x1, Conv3x3 };

std::string branch_kind_name(BranchKind kind);
std::int64_t branch_kernel_size(BranchKind kind);

struct Branch {
  BranchKind kind = BranchKind::Identity;
  Tensor kernel;  // [C, k, k]; all-ones 1x1 and frozen for Identity
  TsbnLayer tsbn;
};

/// Parallel depthwise convolutions, each followed by its own TSBN, summed.
struct BranchBank {
  std::int64_t T = 0;
  std::int64_t C = 0;
  std::int64_t K = 3;
  std::vector<Branch> branches;
  std::string name;

  /// Standard five-branch bank {identity, 1x1, 1x1, 3x3, 3x3}. Kernels are
  /// Kaiming-uniform, TSBN gamma 1, beta 0.
  static BranchBank create(std::int64_t T, std::int64_t C, std::int64_t w, Rng& rng, std::string name = {});
  /// Bank with an arbitrary branch list; kernels drawn as in create().
  static BranchBank create(std::int64_t T, std::int64_t C, std::int64_t w, const std::vector<BranchKind>& kinds,
                           Rng& rng, std::string name = {});

  /// Trainable tensors (identity kernels excluded).
  std::vector<Tensor> parameters() const;
  std::int64_t stored_floats() const;
  void validate() const;
};

/// Single depthwise conv per timestep: kernel [T, C, K, K], bias [T, C].
struct FusedConv {
  Tensor kernel;
  Tensor bias;
  std::string name;

  std::int64_t T() const { return kernel.dim(0); }
  std::int64_t C() const { return kernel.dim(1); }
  std::int64_t stored_floats() const { return kernel.numel() + bias.numel(); }
};

/// FusedConv kept in double, for the high-precision equivalence check.
struct FusedConvF64 {
  std::int64_t T = 0, C = 0, K = 0;
  std::vector<double> kernel;  // [T, C, K, K]
  std::vector<double> bias;    // [T, C]
};

enum class BankMode { Train, Infer };

/// Centres kernel [C, k, k] in a K x K zero field. k <= K, both odd.
Tensor pad_kernel(const Tensor& kernel, std::int64_t K);

/// Sum over branches of TSBN(conv2d_dw(x_t, W_i)) for x [T, B, C, H, W].
/// Train mode is differentiable and updates the running statistics; infer
/// mode accumulates in double and rounds once.
Tensor branch_forward(const Tensor& x, BranchBank& bank, BankMode mode);
std::vector<double> branch_forward_infer_f64(const Tensor& x, const BranchBank& bank);

/// Folds every branch into one kernel and bias per timestep using running
/// statistics. Throws StateError when any branch lacks statistics.
FusedConv fuse(const BranchBank& bank);
FusedConvF64 fuse_f64(const BranchBank& bank);

Tensor fused_forward(const FusedConv& fc, const Tensor& x);
std::vector<double> fused_forward_f64(const FusedConvF64& fc, const Tensor& x);

}  // namespace stcore
