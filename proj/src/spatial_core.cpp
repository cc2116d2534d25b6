#include "stcore/spatial_core.hpp"

#include <cmath>

#include "stcore/error.hpp"
#include "stcore/ops.hpp"

namespace stcore {

namespace {

using Index = std::int64_t;

void check_activation(const Tensor& x, Index T, Index C, const std::string& who) {
  if (x.rank() != 5) throw ShapeError(who + " expects [T,B,C,H,W], got " + shape_str(x.shape()));
  if (x.dim(0) != T) throw ShapeError(who + ": T mismatch, expected " + std::to_string(T) + ", got " + shape_str(x.shape()));
  if (x.dim(2) != C) throw ShapeError(who + ": channel mismatch, expected " + std::to_string(C) + ", got " + shape_str(x.shape()));
}

// out += same-padded depthwise conv of one timestep x [B,C,H,W] with kernel [C,k,k].
template <typename K>
void dw_accumulate(const float* x, Index B, Index C, Index H, Index W, const K* kernel, Index k, double* out) {
  const Index p = (k - 1) / 2;
  for (Index b = 0; b < B; ++b) {
    for (Index c = 0; c < C; ++c) {
      const float* plane = x + (b * C + c) * H * W;
      double* dst = out + (b * C + c) * H * W;
      const K* kc = kernel + c * k * k;
      for (Index u = 0; u < k; ++u) {
        for (Index v = 0; v < k; ++v) {
          const double wv = static_cast<double>(kc[u * k + v]);
          if (wv == 0.0) continue;
          const Index du = u - p, dv = v - p;
          for (Index i = std::max<Index>(0, -du); i < std::min<Index>(H, H - du); ++i) {
            const float* row = plane + (i + du) * W;
            double* orow = dst + i * W;
            for (Index j = std::max<Index>(0, -dv); j < std::min<Index>(W, W - dv); ++j) orow[j] += wv * row[j + dv];
          }
        }
      }
    }
  }
}

}  // namespace

std::string branch_kind_name(BranchKind kind) {
  switch (kind) {
    case BranchKind::Identity: return "identity";
    case BranchKind::Conv1x1: return "conv1x1";
    case BranchKind::Conv3x3: return "conv3x3";
  }
  return "?";
}

Index branch_kernel_size(BranchKind kind) { return kind == BranchKind::Conv3x3 ? 3 : 1; }

BranchBank BranchBank::create(Index T, Index C, Index w, Rng& rng, std::string name) {
  return create(T, C, w,
                {BranchKind::Identity, BranchKind::Conv1x1, BranchKind::Conv1x1, BranchKind::Conv3x3,
                 BranchKind::Conv3x3},
                rng, std::move(name));
}

BranchBank BranchBank::create(Index T, Index C, Index w, const std::vector<BranchKind>& kinds, Rng& rng,
                              std::string name) {
  if (kinds.empty()) throw ValueError("branch bank needs at least one branch");
  BranchBank bank;
  bank.T = T;
  bank.C = C;
  bank.name = std::move(name);
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    Branch br;
    br.kind = kinds[i];
    const Index k = branch_kernel_size(kinds[i]);
    if (kinds[i] == BranchKind::Identity) {
      br.kernel = Tensor::ones({C, 1, 1});
    } else {
      const double bound = std::sqrt(6.0 / static_cast<double>(k * k));
      std::vector<float> v(static_cast<std::size_t>(C * k * k));
      for (auto& e : v) e = static_cast<float>(rng.uniform(-bound, bound));
      br.kernel = Tensor({C, k, k}, std::move(v));
      br.kernel.set_requires_grad(true);
    }
    br.tsbn = TsbnLayer::create(T, C, w, GammaStorage::Linear, bank.name + ".branch" + std::to_string(i) + ".tsbn");
    bank.branches.push_back(std::move(br));
  }
  return bank;
}

std::vector<Tensor> BranchBank::parameters() const {
  std::vector<Tensor> out;
  for (const auto& br : branches) {
    if (br.kind != BranchKind::Identity) out.push_back(br.kernel);
    for (const auto& p : br.tsbn.parameters()) out.push_back(p);
  }
  return out;
}

Index BranchBank::stored_floats() const {
  Index n = 0;
  for (const auto& br : branches) n += br.kernel.numel() + br.tsbn.stored_floats();
  return n;
}

void BranchBank::validate() const {
  if (branches.empty()) throw ValueError("branch bank '" + name + "' is empty");
  for (const auto& br : branches) {
    const Index k = br.kernel.dim(-1);
    if (br.kernel.rank() != 3 || br.kernel.dim(1) != k || k % 2 == 0 || k > K) {
      throw ShapeError("branch bank '" + name + "': bad kernel " + shape_str(br.kernel.shape()));
    }
    if (br.kernel.dim(0) != C) {
      throw ShapeError("branch bank '" + name + "': inconsistent channel count " + shape_str(br.kernel.shape()));
    }
    if (br.tsbn.T != T || br.tsbn.C != C || br.tsbn.w != branches.front().tsbn.w) {
      throw ShapeError("branch bank '" + name + "': TSBN layers disagree on T, C or w");
    }
    br.tsbn.validate();
  }
}

Tensor pad_kernel(const Tensor& kernel, Index K) {
  if (kernel.rank() != 3 || kernel.dim(1) != kernel.dim(2)) {
    throw ShapeError("pad_kernel expects [C,k,k], got " + shape_str(kernel.shape()));
  }
  const Index C = kernel.dim(0), k = kernel.dim(1);
  if (k % 2 == 0 || K % 2 == 0) throw ValueError("pad_kernel needs odd kernel sizes");
  if (k > K) throw ValueError("pad_kernel: k=" + std::to_string(k) + " exceeds K=" + std::to_string(K));
  const Index off = (K - k) / 2;
  std::vector<float> out(static_cast<std::size_t>(C * K * K), 0.0f);
  const auto d = kernel.data();
  for (Index c = 0; c < C; ++c)
    for (Index u = 0; u < k; ++u)
      for (Index v = 0; v < k; ++v)
        out[static_cast<std::size_t>((c * K + u + off) * K + v + off)] = d[static_cast<std::size_t>((c * k + u) * k + v)];
  return Tensor({C, K, K}, std::move(out));
}

Tensor branch_forward(const Tensor& x, BranchBank& bank, BankMode mode) {
  bank.validate();
  check_activation(x, bank.T, bank.C, "branch_forward");
  if (mode == BankMode::Infer) {
    const auto out = branch_forward_infer_f64(x, bank);
    return Tensor(x.shape(), std::vector<float>(out.begin(), out.end()));
  }
  const Shape& s = x.shape();
  const Tensor flat = reshape(x, {s[0] * s[1], s[2], s[3], s[4]});
  Tensor y;
  for (auto& br : bank.branches) {
    const Tensor conv = reshape(conv2d_dw(flat, br.kernel), s);
    const Tensor z = tsbn_forward_train(conv, br.tsbn);
    y = y.defined() ? add(y, z) : z;
  }
  return y;
}

std::vector<double> branch_forward_infer_f64(const Tensor& x, const BranchBank& bank) {
  bank.validate();
  check_activation(x, bank.T, bank.C, "branch_forward");
  const Index T = x.dim(0), B = x.dim(1), C = x.dim(2), H = x.dim(3), W = x.dim(4);
  const Index step = B * C * H * W;
  std::vector<double> out(x.data().size(), 0.0);
  std::vector<double> conv(static_cast<std::size_t>(step));
  for (const auto& br : bank.branches) {
    const auto& bn = br.tsbn;
    if (!bn.stats_ready) throw StateError("TSBN '" + bn.name + "' has no running statistics");
    const auto gamma = bn.gamma_values();
    const auto beta = bn.beta.data();
    const auto rm = bn.running_mu.data();
    const auto rv = bn.running_var.data();
    const Index k = br.kernel.dim(1);
    for (Index t = 0; t < T; ++t) {
      std::fill(conv.begin(), conv.end(), 0.0);
      dw_accumulate(x.data().data() + t * step, B, C, H, W, br.kernel.data().data(), k, conv.data());
      for (Index b = 0; b < B; ++b) {
        for (Index c = 0; c < C; ++c) {
          const auto tc = static_cast<std::size_t>(t * C + c);
          const double sc = gamma[tc] / std::sqrt(static_cast<double>(rv[tc]) + bn.eps);
          const double mu = rm[tc];
          const Index base = (b * C + c) * H * W;
          double* dst = out.data() + t * step + base;
          for (Index i = 0; i < H * W; ++i) dst[i] += sc * (conv[static_cast<std::size_t>(base + i)] - mu) + beta[tc];
        }
      }
    }
  }
  return out;
}

FusedConvF64 fuse_f64(const BranchBank& bank) {
  bank.validate();
  const Index T = bank.T, C = bank.C, K = bank.K;
  FusedConvF64 fc{T, C, K, std::vector<double>(static_cast<std::size_t>(T * C * K * K), 0.0),
                  std::vector<double>(static_cast<std::size_t>(T * C), 0.0)};
  for (const auto& br : bank.branches) {
    const auto& bn = br.tsbn;
    if (!bn.stats_ready) {
      throw StateError("cannot fuse '" + bank.name + "': TSBN '" + bn.name + "' has no running statistics");
    }
    const auto gamma = bn.gamma_values();
    const auto beta = bn.beta.data();
    const auto rm = bn.running_mu.data();
    const auto rv = bn.running_var.data();
    const Tensor padded = pad_kernel(br.kernel, K);
    const auto pk = padded.data();
    for (Index t = 0; t < T; ++t) {
      for (Index c = 0; c < C; ++c) {
        const auto tc = static_cast<std::size_t>(t * C + c);
        const double sc = gamma[tc] / std::sqrt(static_cast<double>(rv[tc]) + bn.eps);
        for (Index i = 0; i < K * K; ++i) {
          fc.kernel[static_cast<std::size_t>(tc * K * K + i)] += sc * pk[static_cast<std::size_t>(c * K * K + i)];
        }
        fc.bias[tc] += beta[tc] - sc * rm[tc];
      }
    }
  }
  return fc;
}

FusedConv fuse(const BranchBank& bank) {
  const auto f = fuse_f64(bank);
  return {Tensor({f.T, f.C, f.K, f.K}, std::vector<float>(f.kernel.begin(), f.kernel.end())),
          Tensor({f.T, f.C}, std::vector<float>(f.bias.begin(), f.bias.end())), bank.name};
}

namespace {

template <typename Kd>
std::vector<double> fused_apply(const Kd* kernel, const Kd* bias, Index T, Index C, Index K, const Tensor& x) {
  check_activation(x, T, C, "fused_forward");
  const Index B = x.dim(1), H = x.dim(3), W = x.dim(4);
  const Index step = B * C * H * W;
  std::vector<double> out(x.data().size(), 0.0);
  for (Index t = 0; t < T; ++t) {
    double* dst = out.data() + t * step;
    for (Index b = 0; b < B; ++b)
      for (Index c = 0; c < C; ++c) {
        const double bv = bias[t * C + c];
        double* plane = dst + (b * C + c) * H * W;
        for (Index i = 0; i < H * W; ++i) plane[i] = bv;
      }
    dw_accumulate(x.data().data() + t * step, B, C, H, W, kernel + t * C * K * K, K, dst);
  }
  return out;
}

}  // namespace

Tensor fused_forward(const FusedConv& fc, const Tensor& x) {
  if (fc.kernel.rank() != 4 || fc.bias.shape() != Shape{fc.T(), fc.C()}) {
    throw ShapeError("fused conv '" + fc.name + "' has malformed kernel or bias");
  }
  const auto out = fused_apply(fc.kernel.data().data(), fc.bias.data().data(), fc.T(), fc.C(), fc.kernel.dim(2), x);
  return Tensor(x.shape(), std::vector<float>(out.begin(), out.end()));
}

std::vector<double> fused_forward_f64(const FusedConvF64& fc, const Tensor& x) {
  return fused_apply(fc.kernel.data(), fc.bias.data(), fc.T, fc.C, fc.K, x);
}

}  // namespace stcore
