#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "stcore/tensor.hpp"

namespace stcore {

// Differentiable tensor operations. Reductions and convolutions accumulate in
// double and round once into float32 storage.

/// Right-aligned broadcast of two shapes.
///
/// Rank-5 results are activations laid out [T, B, C, H, W]; for those every
/// operand must itself be rank 5 with the full time extent, so nothing is
/// replicated across time implicitly.
Shape broadcast_shapes(const Shape& a, const Shape& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor exp(const Tensor& a);

Tensor sum(const Tensor& a, std::vector<std::int64_t> axes, bool keepdim = false);
Tensor mean(const Tensor& a, std::vector<std::int64_t> axes, bool keepdim = false);
/// Biased (population) variance over `axes`.
Tensor var(const Tensor& a, std::vector<std::int64_t> axes, bool keepdim = false);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
/// Swaps the two innermost axes.
Tensor transpose_last2(const Tensor& a);

/// Depthwise convolution: x [B,C,H,W], kernel [C,k,k], k odd, stride 1,
/// zero padding (k-1)/2 so H and W are preserved.
Tensor conv2d_dw(const Tensor& x, const Tensor& kernel);

/// Dense cross-correlation: x [B,Cin,H,W], kernel [Cout,Cin,k,k], k odd,
/// stride 1 or 2, zero padding (k-1)/2.
Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride = 1);

/// Batched product a [...,M,K] x b [...,K,N]; leading extents must match.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Mean negative log-likelihood of softmax(logits [B,K]) at `labels`.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> labels);

/// Output extent of a padded convolution along one spatial axis.
std::int64_t conv_out_extent(std::int64_t in, std::int64_t k, int stride);

}  // namespace stcore
