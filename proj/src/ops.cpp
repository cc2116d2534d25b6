#include "stcore/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "stcore/autograd.hpp"
#include "stcore/error.hpp"

namespace stcore {

namespace {

using Index = std::int64_t;

std::vector<float> to_float(const std::vector<double>& acc) {
  std::vector<float> out(acc.size());
  std::transform(acc.begin(), acc.end(), out.begin(), [](double v) { return static_cast<float>(v); });
  return out;
}

// Strides of `in` laid against the axes of `out` (right-aligned); broadcast
// and missing axes get stride 0.
std::vector<Index> aligned_strides(const Shape& in, const Shape& out) {
  std::vector<Index> strides(out.size(), 0);
  Index stride = 1;
  const auto offset = out.size() - in.size();
  for (std::size_t k = in.size(); k-- > 0;) {
    strides[k + offset] = in[k] == 1 ? 0 : stride;
    stride *= in[k];
  }
  return strides;
}

// Calls f(out_index, a_index, b_index) over every element of `out`.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<Index>& sa, const std::vector<Index>& sb,
                        F&& f) {
  const Index n = shape_numel(out);
  if (n == 0) return;
  const std::size_t rank = out.size();
  std::vector<Index> counter(rank, 0);
  Index ia = 0;
  Index ib = 0;
  for (Index i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (std::size_t k = rank; k-- > 0;) {
      ++counter[k];
      ia += sa[k];
      ib += sb[k];
      if (counter[k] < out[k]) break;
      ia -= sa[k] * out[k];
      ib -= sb[k] * out[k];
      counter[k] = 0;
    }
  }
}

enum class Binary { Add, Sub, Mul };

Tensor binary_op(const Tensor& a, const Tensor& b, Binary kind) {
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  const auto sa = aligned_strides(a.shape(), out_shape);
  const auto sb = aligned_strides(b.shape(), out_shape);
  const auto da = a.data();
  const auto db = b.data();
  std::vector<float> out(static_cast<std::size_t>(shape_numel(out_shape)));
  const bool same = a.shape() == b.shape();
  auto apply = [kind](float x, float y) {
    switch (kind) {
      case Binary::Add: return x + y;
      case Binary::Sub: return x - y;
      case Binary::Mul: return x * y;
    }
    return 0.0f;
  };
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply(da[i], db[i]);
  } else {
    for_each_broadcast(out_shape, sa, sb, [&](Index i, Index ia, Index ib) {
      out[static_cast<std::size_t>(i)] = apply(da[static_cast<std::size_t>(ia)], db[static_cast<std::size_t>(ib)]);
    });
  }
  Tensor result(out_shape, std::move(out));
  if (detail::needs_grad({&a, &b})) {
    const char* name = kind == Binary::Add ? "add" : kind == Binary::Sub ? "sub" : "mul";
    detail::record_op(name, result, {a, b},
                      [a, b, out_shape, sa, sb, kind](std::span<const double> g,
                                                      std::span<const std::span<double>> gin) {
                        const auto xa = a.data();
                        const auto xb = b.data();
                        auto ga = gin[0];
                        auto gb = gin[1];
                        const double sign_b = kind == Binary::Sub ? -1.0 : 1.0;
                        for_each_broadcast(out_shape, sa, sb, [&](Index i, Index ia, Index ib) {
                          const double gi = g[static_cast<std::size_t>(i)];
                          if (kind == Binary::Mul) {
                            if (!ga.empty()) ga[static_cast<std::size_t>(ia)] += gi * xb[static_cast<std::size_t>(ib)];
                            if (!gb.empty()) gb[static_cast<std::size_t>(ib)] += gi * xa[static_cast<std::size_t>(ia)];
                          } else {
                            if (!ga.empty()) ga[static_cast<std::size_t>(ia)] += gi;
                            if (!gb.empty()) gb[static_cast<std::size_t>(ib)] += sign_b * gi;
                          }
                        });
                      });
  }
  return result;
}

std::vector<std::int64_t> normalize_axes(std::vector<std::int64_t> axes, std::int64_t rank) {
  for (auto& ax : axes) {
    if (ax < 0) ax += rank;
    if (ax < 0 || ax >= rank) throw ShapeError("reduction axis out of range");
  }
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  return axes;
}

struct ReducePlan {
  Shape out_shape;
  std::vector<Index> in_to_out;  // output stride per input axis, 0 if reduced
  Index group = 1;               // elements folded into each output
};

ReducePlan plan_reduce(const Shape& in, const std::vector<std::int64_t>& axes, bool keepdim) {
  ReducePlan plan;
  std::vector<bool> reduced(in.size(), false);
  for (auto ax : axes) reduced[static_cast<std::size_t>(ax)] = true;
  for (std::size_t k = 0; k < in.size(); ++k) {
    if (reduced[k]) {
      plan.group *= in[k];
      if (keepdim) plan.out_shape.push_back(1);
    } else {
      plan.out_shape.push_back(in[k]);
    }
  }
  plan.in_to_out.assign(in.size(), 0);
  Index stride = 1;
  for (std::size_t k = in.size(); k-- > 0;) {
    if (!reduced[k]) {
      plan.in_to_out[k] = stride;
      stride *= in[k];
    }
  }
  return plan;
}

// Calls f(in_index, out_index) for every input element.
template <typename F>
void for_each_reduce(const Shape& in, const std::vector<Index>& in_to_out, F&& f) {
  const Index n = shape_numel(in);
  if (n == 0) return;
  std::vector<Index> counter(in.size(), 0);
  Index o = 0;
  for (Index i = 0; i < n; ++i) {
    f(i, o);
    for (std::size_t k = in.size(); k-- > 0;) {
      ++counter[k];
      o += in_to_out[k];
      if (counter[k] < in[k]) break;
      o -= in_to_out[k] * in[k];
      counter[k] = 0;
    }
  }
}

enum class Reduce { Sum, Mean, Var };

Tensor reduce_op(const Tensor& a, std::vector<std::int64_t> axes_in, bool keepdim, Reduce kind) {
  const auto axes = normalize_axes(std::move(axes_in), a.rank());
  const auto plan = plan_reduce(a.shape(), axes, keepdim);
  const Index n_out = shape_numel(plan.out_shape);
  if (kind != Reduce::Sum && plan.group == 0) throw ShapeError("mean/var over an empty extent");
  const auto x = a.data();
  std::vector<double> acc(static_cast<std::size_t>(n_out), 0.0);
  for_each_reduce(a.shape(), plan.in_to_out, [&](Index i, Index o) {
    acc[static_cast<std::size_t>(o)] += x[static_cast<std::size_t>(i)];
  });
  std::vector<double> mu;
  if (kind != Reduce::Sum) {
    for (auto& v : acc) v /= static_cast<double>(plan.group);
  }
  if (kind == Reduce::Var) {
    mu = acc;
    std::fill(acc.begin(), acc.end(), 0.0);
    for_each_reduce(a.shape(), plan.in_to_out, [&](Index i, Index o) {
      const double d = x[static_cast<std::size_t>(i)] - mu[static_cast<std::size_t>(o)];
      acc[static_cast<std::size_t>(o)] += d * d;
    });
    for (auto& v : acc) v /= static_cast<double>(plan.group);
  }
  Tensor result(plan.out_shape, to_float(acc));
  if (detail::needs_grad({&a})) {
    const char* name = kind == Reduce::Sum ? "sum" : kind == Reduce::Mean ? "mean" : "var";
    detail::record_op(name, result, {a},
                      [a, plan, kind, mu = std::move(mu)](std::span<const double> g,
                                                          std::span<const std::span<double>> gin) {
                        auto ga = gin[0];
                        const auto x = a.data();
                        const double inv = 1.0 / static_cast<double>(std::max<Index>(plan.group, 1));
                        for_each_reduce(a.shape(), plan.in_to_out, [&](Index i, Index o) {
                          const auto ui = static_cast<std::size_t>(i);
                          const auto uo = static_cast<std::size_t>(o);
                          switch (kind) {
                            case Reduce::Sum: ga[ui] += g[uo]; break;
                            case Reduce::Mean: ga[ui] += g[uo] * inv; break;
                            case Reduce::Var: ga[ui] += g[uo] * 2.0 * (x[ui] - mu[uo]) * inv; break;
                          }
                        });
                      });
  }
  return result;
}

std::int64_t check_odd_kernel(std::int64_t k) {
  if (k <= 0 || k % 2 == 0) throw ValueError("kernel size must be odd, got " + std::to_string(k));
  return (k - 1) / 2;
}

// Range of output columns j whose input column j*s + v - p lies in [0, w_in).
std::pair<Index, Index> valid_range(Index w_out, Index w_in, Index v, Index p, Index s) {
  Index lo = 0;
  if (p > v) lo = (p - v + s - 1) / s;
  const Index top = w_in - 1 + p - v;
  if (top < 0) return {0, 0};
  const Index hi = std::min(w_out, top / s + 1);
  return {lo, std::max(lo, hi)};
}

}  // namespace

std::int64_t conv_out_extent(std::int64_t in, std::int64_t k, int stride) {
  const auto p = (k - 1) / 2;
  return (in + 2 * p - k) / stride + 1;
}

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t k = 0; k < rank; ++k) {
    const Index ea = k < rank - a.size() ? 1 : a[k - (rank - a.size())];
    const Index eb = k < rank - b.size() ? 1 : b[k - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[k] = ea == 1 ? eb : ea;
  }
  if (rank == 5 && (a.size() != 5 || b.size() != 5 || a[0] != b[0])) {
    throw ShapeError("implicit broadcast across the time axis: " + shape_str(a) + " vs " + shape_str(b));
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, Binary::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, Binary::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, Binary::Mul); }

Tensor scale(const Tensor& a, double factor) {
  const auto x = a.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>(x[i] * factor);
  Tensor result(a.shape(), std::move(out));
  if (detail::needs_grad({&a})) {
    detail::record_op("scale", result, {a},
                      [factor](std::span<const double> g, std::span<const std::span<double>> gin) {
                        for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += factor * g[i];
                      });
  }
  return result;
}

Tensor add_scalar(const Tensor& a, double value) {
  const auto x = a.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>(x[i] + value);
  Tensor result(a.shape(), std::move(out));
  if (detail::needs_grad({&a})) {
    detail::record_op("add_scalar", result, {a},
                      [](std::span<const double> g, std::span<const std::span<double>> gin) {
                        for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                      });
  }
  return result;
}

Tensor exp(const Tensor& a) {
  const auto x = a.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>(std::exp(static_cast<double>(x[i])));
  Tensor result(a.shape(), std::move(out));
  if (detail::needs_grad({&a})) {
    detail::record_op("exp", result, {a},
                      [a](std::span<const double> g, std::span<const std::span<double>> gin) {
                        const auto x = a.data();
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          gin[0][i] += g[i] * std::exp(static_cast<double>(x[i]));
                        }
                      });
  }
  return result;
}

Tensor sum(const Tensor& a, std::vector<std::int64_t> axes, bool keepdim) {
  return reduce_op(a, std::move(axes), keepdim, Reduce::Sum);
}
Tensor mean(const Tensor& a, std::vector<std::int64_t> axes, bool keepdim) {
  return reduce_op(a, std::move(axes), keepdim, Reduce::Mean);
}
Tensor var(const Tensor& a, std::vector<std::int64_t> axes, bool keepdim) {
  return reduce_op(a, std::move(axes), keepdim, Reduce::Var);
}

namespace {
std::vector<std::int64_t> all_axes(const Tensor& a) {
  std::vector<std::int64_t> axes(static_cast<std::size_t>(a.rank()));
  std::iota(axes.begin(), axes.end(), 0);
  return axes;
}
}  // namespace

Tensor sum_all(const Tensor& a) { return sum(a, all_axes(a)); }
Tensor mean_all(const Tensor& a) { return mean(a, all_axes(a)); }

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  const auto x = a.data();
  Tensor result(std::move(shape), std::vector<float>(x.begin(), x.end()));
  if (detail::needs_grad({&a})) {
    detail::record_op("reshape", result, {a},
                      [](std::span<const double> g, std::span<const std::span<double>> gin) {
                        for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                      });
  }
  return result;
}

Tensor transpose_last2(const Tensor& a) {
  if (a.rank() < 2) throw ShapeError("transpose_last2 needs rank >= 2");
  Shape shape = a.shape();
  const Index m = shape[shape.size() - 2];
  const Index n = shape[shape.size() - 1];
  std::swap(shape[shape.size() - 2], shape[shape.size() - 1]);
  const Index batch = m * n == 0 ? 0 : a.numel() / (m * n);
  const auto x = a.data();
  std::vector<float> out(x.size());
  for (Index b = 0; b < batch; ++b) {
    const float* src = x.data() + b * m * n;
    float* dst = out.data() + b * m * n;
    for (Index i = 0; i < m; ++i)
      for (Index j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  }
  Tensor result(shape, std::move(out));
  if (detail::needs_grad({&a})) {
    detail::record_op("transpose_last2", result, {a},
                      [batch, m, n](std::span<const double> g, std::span<const std::span<double>> gin) {
                        for (Index b = 0; b < batch; ++b)
                          for (Index i = 0; i < m; ++i)
                            for (Index j = 0; j < n; ++j)
                              gin[0][static_cast<std::size_t>(b * m * n + i * n + j)] +=
                                  g[static_cast<std::size_t>(b * m * n + j * m + i)];
                      });
  }
  return result;
}

Tensor conv2d_dw(const Tensor& x, const Tensor& kernel) {
  if (x.rank() != 4) throw ShapeError("conv2d_dw expects x [B,C,H,W], got " + shape_str(x.shape()));
  if (kernel.rank() != 3 || kernel.dim(1) != kernel.dim(2)) {
    throw ShapeError("conv2d_dw expects kernel [C,k,k], got " + shape_str(kernel.shape()));
  }
  const Index k = kernel.dim(1);
  const Index p = check_odd_kernel(k);
  const Index B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (kernel.dim(0) != C) {
    throw ShapeError("conv2d_dw channel mismatch: x has " + std::to_string(C) + ", kernel has " +
                     std::to_string(kernel.dim(0)));
  }
  const auto xd = x.data();
  const auto kd = kernel.data();
  std::vector<float> out(xd.size());
  std::vector<double> acc(static_cast<std::size_t>(H * W));
  for (Index b = 0; b < B; ++b) {
    for (Index c = 0; c < C; ++c) {
      std::fill(acc.begin(), acc.end(), 0.0);
      const float* plane = xd.data() + (b * C + c) * H * W;
      for (Index u = 0; u < k; ++u) {
        for (Index v = 0; v < k; ++v) {
          const double w = kd[static_cast<std::size_t>((c * k + u) * k + v)];
          const auto [jlo, jhi] = valid_range(W, W, v, p, 1);
          for (Index i = 0; i < H; ++i) {
            const Index hi = i + u - p;
            if (hi < 0 || hi >= H) continue;
            const float* row = plane + hi * W;
            double* arow = acc.data() + i * W;
            for (Index j = jlo; j < jhi; ++j) arow[j] += w * row[j + v - p];
          }
        }
      }
      float* dst = out.data() + (b * C + c) * H * W;
      for (Index i = 0; i < H * W; ++i) dst[i] = static_cast<float>(acc[static_cast<std::size_t>(i)]);
    }
  }
  Tensor result(x.shape(), std::move(out));
  if (detail::needs_grad({&x, &kernel})) {
    detail::record_op(
        "conv2d_dw", result, {x, kernel},
        [x, kernel, B, C, H, W, k, p](std::span<const double> g, std::span<const std::span<double>> gin) {
          const auto xd = x.data();
          const auto kd = kernel.data();
          auto gx = gin[0];
          auto gk = gin[1];
          for (Index b = 0; b < B; ++b) {
            for (Index c = 0; c < C; ++c) {
              const Index base = (b * C + c) * H * W;
              for (Index u = 0; u < k; ++u) {
                for (Index v = 0; v < k; ++v) {
                  const auto kidx = static_cast<std::size_t>((c * k + u) * k + v);
                  const double w = kd[kidx];
                  const auto [jlo, jhi] = valid_range(W, W, v, p, 1);
                  double wacc = 0.0;
                  for (Index i = 0; i < H; ++i) {
                    const Index hi = i + u - p;
                    if (hi < 0 || hi >= H) continue;
                    for (Index j = jlo; j < jhi; ++j) {
                      const double gij = g[static_cast<std::size_t>(base + i * W + j)];
                      const auto src = static_cast<std::size_t>(base + hi * W + j + v - p);
                      if (!gx.empty()) gx[src] += w * gij;
                      wacc += gij * xd[src];
                    }
                  }
                  if (!gk.empty()) gk[kidx] += wacc;
                }
              }
            }
          }
        });
  }
  return result;
}

namespace {

// 1x1 stride-1 convolution as a per-sample [Cout,Cin] x [Cin,HW] product.
Tensor conv2d_pointwise(const Tensor& x, const Tensor& kernel) {
  const Index B = x.dim(0), Cin = x.dim(1), HW = x.dim(2) * x.dim(3);
  const Index Cout = kernel.dim(0);
  const auto xd = x.data();
  const auto kd = kernel.data();
  std::vector<float> out(static_cast<std::size_t>(B * Cout * HW));
  std::vector<double> acc(static_cast<std::size_t>(HW));
  for (Index b = 0; b < B; ++b) {
    const float* xb = xd.data() + b * Cin * HW;
    for (Index co = 0; co < Cout; ++co) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (Index ci = 0; ci < Cin; ++ci) {
        const double w = kd[static_cast<std::size_t>(co * Cin + ci)];
        if (w == 0.0) continue;
        const float* row = xb + ci * HW;
        for (Index n = 0; n < HW; ++n) acc[static_cast<std::size_t>(n)] += w * row[n];
      }
      float* dst = out.data() + (b * Cout + co) * HW;
      for (Index n = 0; n < HW; ++n) dst[n] = static_cast<float>(acc[static_cast<std::size_t>(n)]);
    }
  }
  Tensor result({B, Cout, x.dim(2), x.dim(3)}, std::move(out));
  if (detail::needs_grad({&x, &kernel})) {
    detail::record_op(
        "conv2d", result, {x, kernel},
        [x, kernel, B, Cin, Cout, HW](std::span<const double> g, std::span<const std::span<double>> gin) {
          const auto xd = x.data();
          const auto kd = kernel.data();
          auto gx = gin[0];
          auto gk = gin[1];
          for (Index b = 0; b < B; ++b) {
            for (Index co = 0; co < Cout; ++co) {
              const double* grow = g.data() + (b * Cout + co) * HW;
              for (Index ci = 0; ci < Cin; ++ci) {
                const auto kidx = static_cast<std::size_t>(co * Cin + ci);
                const float* xrow = xd.data() + (b * Cin + ci) * HW;
                if (!gx.empty()) {
                  const double w = kd[kidx];
                  double* gxrow = gx.data() + (b * Cin + ci) * HW;
                  for (Index n = 0; n < HW; ++n) gxrow[n] += w * grow[n];
                }
                if (!gk.empty()) {
                  double s = 0.0;
                  for (Index n = 0; n < HW; ++n) s += grow[n] * xrow[n];
                  gk[kidx] += s;
                }
              }
            }
          }
        });
  }
  return result;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride) {
  if (x.rank() != 4) throw ShapeError("conv2d expects x [B,Cin,H,W], got " + shape_str(x.shape()));
  if (kernel.rank() != 4 || kernel.dim(2) != kernel.dim(3)) {
    throw ShapeError("conv2d expects kernel [Cout,Cin,k,k], got " + shape_str(kernel.shape()));
  }
  if (stride != 1 && stride != 2) throw ValueError("conv2d stride must be 1 or 2");
  const Index k = kernel.dim(2);
  const Index p = check_odd_kernel(k);
  if (kernel.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d input channels: x " + shape_str(x.shape()) + " vs kernel " +
                     shape_str(kernel.shape()));
  }
  if (k == 1 && stride == 1) return conv2d_pointwise(x, kernel);

  const Index B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Index Cout = kernel.dim(0);
  const Index s = stride;
  const Index Ho = conv_out_extent(H, k, stride), Wo = conv_out_extent(W, k, stride);
  const auto xd = x.data();
  const auto kd = kernel.data();
  std::vector<float> out(static_cast<std::size_t>(B * Cout * Ho * Wo));
  std::vector<double> acc(static_cast<std::size_t>(Ho * Wo));
  for (Index b = 0; b < B; ++b) {
    for (Index co = 0; co < Cout; ++co) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (Index ci = 0; ci < Cin; ++ci) {
        const float* plane = xd.data() + (b * Cin + ci) * H * W;
        for (Index u = 0; u < k; ++u) {
          for (Index v = 0; v < k; ++v) {
            const double w = kd[static_cast<std::size_t>(((co * Cin + ci) * k + u) * k + v)];
            if (w == 0.0) continue;
            const auto [jlo, jhi] = valid_range(Wo, W, v, p, s);
            for (Index i = 0; i < Ho; ++i) {
              const Index hi = i * s + u - p;
              if (hi < 0 || hi >= H) continue;
              const float* row = plane + hi * W;
              double* arow = acc.data() + i * Wo;
              for (Index j = jlo; j < jhi; ++j) arow[j] += w * row[j * s + v - p];
            }
          }
        }
      }
      float* dst = out.data() + (b * Cout + co) * Ho * Wo;
      for (Index i = 0; i < Ho * Wo; ++i) dst[i] = static_cast<float>(acc[static_cast<std::size_t>(i)]);
    }
  }
  Tensor result({B, Cout, Ho, Wo}, std::move(out));
  if (detail::needs_grad({&x, &kernel})) {
    detail::record_op(
        "conv2d", result, {x, kernel},
        [x, kernel, B, Cin, Cout, H, W, Ho, Wo, k, p, s](std::span<const double> g,
                                                         std::span<const std::span<double>> gin) {
          const auto xd = x.data();
          const auto kd = kernel.data();
          auto gx = gin[0];
          auto gk = gin[1];
          for (Index b = 0; b < B; ++b) {
            for (Index co = 0; co < Cout; ++co) {
              const double* gplane = g.data() + (b * Cout + co) * Ho * Wo;
              for (Index ci = 0; ci < Cin; ++ci) {
                const Index xbase = (b * Cin + ci) * H * W;
                for (Index u = 0; u < k; ++u) {
                  for (Index v = 0; v < k; ++v) {
                    const auto kidx = static_cast<std::size_t>(((co * Cin + ci) * k + u) * k + v);
                    const double w = kd[kidx];
                    const auto [jlo, jhi] = valid_range(Wo, W, v, p, s);
                    double wacc = 0.0;
                    for (Index i = 0; i < Ho; ++i) {
                      const Index hi = i * s + u - p;
                      if (hi < 0 || hi >= H) continue;
                      for (Index j = jlo; j < jhi; ++j) {
                        const double gij = gplane[i * Wo + j];
                        const auto src = static_cast<std::size_t>(xbase + hi * W + j * s + v - p);
                        if (!gx.empty()) gx[src] += w * gij;
                        wacc += gij * xd[src];
                      }
                    }
                    if (!gk.empty()) gk[kidx] += wacc;
                  }
                }
              }
            }
          }
        });
  }
  return result;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() != a.rank()) {
    throw ShapeError("matmul rank mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const Index M = a.dim(-2), K = a.dim(-1), N = b.dim(-1);
  if (b.dim(-2) != K) {
    throw ShapeError("matmul inner extent mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  for (Index ax = 0; ax < a.rank() - 2; ++ax) {
    if (a.dim(ax) != b.dim(ax)) {
      throw ShapeError("matmul leading extents differ: " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
    }
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(M);
  out_shape.push_back(N);
  const Index batch = shape_numel(out_shape) == 0 ? 0 : shape_numel(out_shape) / (M * N);
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<float> out(static_cast<std::size_t>(shape_numel(out_shape)));
  std::vector<double> acc(static_cast<std::size_t>(N));
  for (Index t = 0; t < batch; ++t) {
    const float* A = ad.data() + t * M * K;
    const float* Bm = bd.data() + t * K * N;
    for (Index m = 0; m < M; ++m) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (Index kk = 0; kk < K; ++kk) {
        const double av = A[m * K + kk];
        if (av == 0.0) continue;
        const float* brow = Bm + kk * N;
        for (Index n = 0; n < N; ++n) acc[static_cast<std::size_t>(n)] += av * brow[n];
      }
      float* dst = out.data() + (t * M + m) * N;
      for (Index n = 0; n < N; ++n) dst[n] = static_cast<float>(acc[static_cast<std::size_t>(n)]);
    }
  }
  Tensor result(out_shape, std::move(out));
  if (detail::needs_grad({&a, &b})) {
    detail::record_op("matmul", result, {a, b},
                      [a, b, batch, M, K, N](std::span<const double> g, std::span<const std::span<double>> gin) {
                        const auto ad = a.data();
                        const auto bd = b.data();
                        auto ga = gin[0];
                        auto gb = gin[1];
                        for (Index t = 0; t < batch; ++t) {
                          const float* A = ad.data() + t * M * K;
                          const float* Bm = bd.data() + t * K * N;
                          const double* G = g.data() + t * M * N;
                          for (Index m = 0; m < M; ++m) {
                            const double* grow = G + m * N;
                            for (Index kk = 0; kk < K; ++kk) {
                              const float* brow = Bm + kk * N;
                              if (!ga.empty()) {
                                double s = 0.0;
                                for (Index n = 0; n < N; ++n) s += grow[n] * brow[n];
                                ga[static_cast<std::size_t>(t * M * K + m * K + kk)] += s;
                              }
                              if (!gb.empty()) {
                                const double av = A[m * K + kk];
                                double* gbrow = gb.data() + t * K * N + kk * N;
                                for (Index n = 0; n < N; ++n) gbrow[n] += av * grow[n];
                              }
                            }
                          }
                        }
                      });
  }
  return result;
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> labels) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy expects logits [B,K]");
  const Index B = logits.dim(0), K = logits.dim(1);
  if (static_cast<Index>(labels.size()) != B) throw ShapeError("cross_entropy: label count != batch");
  if (B == 0) throw ShapeError("cross_entropy on an empty batch");
  const auto x = logits.data();
  std::vector<double> probs(static_cast<std::size_t>(B * K));
  double loss = 0.0;
  for (Index b = 0; b < B; ++b) {
    const auto label = labels[static_cast<std::size_t>(b)];
    if (label < 0 || label >= K) throw ValueError("cross_entropy: label out of range");
    const float* row = x.data() + b * K;
    const double mx = *std::max_element(row, row + K);
    double z = 0.0;
    for (Index j = 0; j < K; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    loss += lse - row[label];
    for (Index j = 0; j < K; ++j) probs[static_cast<std::size_t>(b * K + j)] = std::exp(row[j] - lse);
  }
  Tensor result = Tensor::scalar(static_cast<float>(loss / static_cast<double>(B)));
  if (detail::needs_grad({&logits})) {
    std::vector<std::int64_t> lab(labels.begin(), labels.end());
    detail::record_op("cross_entropy", result, {logits},
                      [probs = std::move(probs), lab = std::move(lab), B, K](
                          std::span<const double> g, std::span<const std::span<double>> gin) {
                        const double s = g[0] / static_cast<double>(B);
                        for (Index b = 0; b < B; ++b) {
                          for (Index j = 0; j < K; ++j) {
                            const double onehot = lab[static_cast<std::size_t>(b)] == j ? 1.0 : 0.0;
                            gin[0][static_cast<std::size_t>(b * K + j)] +=
                                s * (probs[static_cast<std::size_t>(b * K + j)] - onehot);
                          }
                        }
                      });
  }
  return result;
}

}  // namespace stcore
