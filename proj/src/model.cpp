#include "stcore/model.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

#include "stcore/autograd.hpp"
#include "stcore/error.hpp"
#include "stcore/ops.hpp"
#include "stcore/random.hpp"

namespace stcore {

namespace {

using Index = std::int64_t;

Tensor kaiming_uniform(Shape shape, Index fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& e : v) e = static_cast<float>(rng.uniform(-bound, bound));
  Tensor t(std::move(shape), std::move(v));
  t.set_requires_grad(true);
  return t;
}

SpikeUnit make_unit(const std::string& name, Index c_out, Index c_in, Index k, int stride, const RtformerConfig& cfg,
                    Rng& rng) {
  SpikeUnit u;
  u.name = name;
  u.weight = kaiming_uniform({c_out, c_in, k, k}, c_in * k * k, rng);
  u.stride = stride;
  u.tsbn = TsbnLayer::create(cfg.T, c_out, cfg.window(), GammaStorage::Log, name + ".tsbn");
  return u;
}

Tensor deep_copy(const Tensor& t) {
  if (!t.defined()) return t;
  Tensor c = t.clone();
  if (t.requires_grad()) c.set_requires_grad(true);
  return c;
}

TsbnLayer copy_tsbn(const TsbnLayer& l) {
  TsbnLayer c = l;
  c.gamma_param = deep_copy(l.gamma_param);
  c.beta = deep_copy(l.beta);
  c.running_mu = l.running_mu.clone();
  c.running_var = l.running_var.clone();
  return c;
}

SpikeUnit copy_unit(const SpikeUnit& u) {
  SpikeUnit c;
  c.name = u.name;
  c.weight = deep_copy(u.weight);
  c.stride = u.stride;
  if (u.tsbn) c.tsbn = copy_tsbn(*u.tsbn);
  if (u.folded) c.folded = FoldedThreshold{u.folded->v_th_eff.clone(), u.folded->source};
  return c;
}

void add_tsbn_tensors(std::vector<std::pair<std::string, Tensor>>& out, const TsbnLayer& l) {
  out.emplace_back(l.name + (l.storage == GammaStorage::Log ? ".log_gamma" : ".gamma"), l.gamma_param);
  out.emplace_back(l.name + ".beta", l.beta);
  out.emplace_back(l.name + ".running_mu", l.running_mu);
  out.emplace_back(l.name + ".running_var", l.running_var);
}

void add_unit_tensors(std::vector<std::pair<std::string, Tensor>>& out, const SpikeUnit& u) {
  out.emplace_back(u.name + ".weight", u.weight);
  if (u.tsbn) add_tsbn_tensors(out, *u.tsbn);
  if (u.folded) out.emplace_back(u.name + ".v_th_eff", u.folded->v_th_eff);
}

void require_binary(const Tensor& t, const char* who) {
  if (checked_mode() && !is_binary(t)) throw ValueError(std::string(who) + ": input is not a binary spike tensor");
}

}  // namespace

std::string mode_name(NetMode mode) {
  switch (mode) {
    case NetMode::Train: return "train";
    case NetMode::Infer: return "infer";
    case NetMode::Fused: return "fused";
  }
  return "?";
}

Index RtformerConfig::grid_h() const { return conv_out_extent(height, 3, embed_stride); }
Index RtformerConfig::grid_w() const { return conv_out_extent(width, 3, embed_stride); }

void RtformerConfig::validate() const {
  auto fail = [](const std::string& m) { throw ValueError("invalid config: " + m); };
  if (T < 1) fail("T must be >= 1");
  if (window() < 1 || window() > T) fail("w must satisfy 1 <= w <= T");
  if (depth < 0) fail("depth must be >= 0");
  if (dim < 1 || heads < 1 || dim % heads != 0) fail("dim must be a positive multiple of heads");
  if (classes < 2) fail("classes must be >= 2");
  if (in_channels < 1 || height < 1 || width < 1) fail("input geometry must be positive");
  if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
  if (embed_stride != 1 && embed_stride != 2) fail("embed_stride must be 1 or 2");
  if (!(attn_scale > 0.0) || !std::isfinite(attn_scale)) fail("attn_scale must be positive");
  if (!std::isfinite(v_th)) fail("v_th must be finite");
  if (block_order != "attn-mlp" && block_order != "mlp-attn") fail("block_order must be attn-mlp or mlp-attn");
  lif.validate();
}

std::vector<std::pair<std::string, std::string>> RtformerConfig::to_records() const {
  auto d = [](double v) { return fmt::format("{:.17g}", v); };
  return {{"T", std::to_string(T)},
          {"depth", std::to_string(depth)},
          {"dim", std::to_string(dim)},
          {"heads", std::to_string(heads)},
          {"w", std::to_string(w)},
          {"classes", std::to_string(classes)},
          {"in_channels", std::to_string(in_channels)},
          {"height", std::to_string(height)},
          {"width", std::to_string(width)},
          {"mlp_ratio", std::to_string(mlp_ratio)},
          {"embed_stride", std::to_string(embed_stride)},
          {"attn_scale", d(attn_scale)},
          {"v_th", d(v_th)},
          {"lif_k_tau", d(lif.k_tau)},
          {"lif_v_th", d(lif.v_th)},
          {"lif_v_reset", d(lif.v_reset)},
          {"lif_alpha", d(lif.surrogate_alpha)},
          {"seed", std::to_string(seed)},
          {"block_order", block_order},
          {"dataset", dataset}};
}

RtformerConfig RtformerConfig::from_records(const std::vector<std::pair<std::string, std::string>>& records) {
  RtformerConfig c;
  for (const auto& [key, value] : records) {
    try {
      if (key == "T") c.T = std::stoll(value);
      else if (key == "depth") c.depth = std::stoll(value);
      else if (key == "dim") c.dim = std::stoll(value);
      else if (key == "heads") c.heads = std::stoll(value);
      else if (key == "w") c.w = std::stoll(value);
      else if (key == "classes") c.classes = std::stoll(value);
      else if (key == "in_channels") c.in_channels = std::stoll(value);
      else if (key == "height") c.height = std::stoll(value);
      else if (key == "width") c.width = std::stoll(value);
      else if (key == "mlp_ratio") c.mlp_ratio = std::stoll(value);
      else if (key == "embed_stride") c.embed_stride = static_cast<int>(std::stol(value));
      else if (key == "attn_scale") c.attn_scale = std::stod(value);
      else if (key == "v_th") c.v_th = std::stod(value);
      else if (key == "lif_k_tau") c.lif.k_tau = std::stod(value);
      else if (key == "lif_v_th") c.lif.v_th = std::stod(value);
      else if (key == "lif_v_reset") c.lif.v_reset = std::stod(value);
      else if (key == "lif_alpha") c.lif.surrogate_alpha = std::stod(value);
      else if (key == "seed") c.seed = std::stoull(value);
      else if (key == "block_order") c.block_order = value;
      else if (key == "dataset") c.dataset = value;
      else throw FormatError("unknown config key '" + key + "'");
    } catch (const std::logic_error&) {
      throw FormatError("bad value for config key '" + key + "': '" + value + "'");
    }
  }
  c.validate();
  return c;
}

RtformerNet RtformerNet::build(const RtformerConfig& config) {
  config.validate();
  RtformerNet net;
  net.config_ = config;
  Rng rng(config.seed);
  const Index D = config.dim, Dh = config.dim * config.mlp_ratio;
  net.embed_ = make_unit("embed", D, config.in_channels, 3, config.embed_stride, config, rng);
  for (Index i = 0; i < config.depth; ++i) {
    RtformerBlock b;
    b.name = "blocks." + std::to_string(i);
    b.core = BranchBank::create(config.T, D, config.window(), rng, b.name + ".core");
    b.q = make_unit(b.name + ".q", D, D, 1, 1, config, rng);
    b.k = make_unit(b.name + ".k", D, D, 1, 1, config, rng);
    b.v = make_unit(b.name + ".v", D, D, 1, 1, config, rng);
    b.proj = make_unit(b.name + ".proj", D, D, 1, 1, config, rng);
    b.fc1 = make_unit(b.name + ".fc1", Dh, D, 1, 1, config, rng);
    b.fc2 = make_unit(b.name + ".fc2", D, Dh, 1, 1, config, rng);
    net.blocks_.push_back(std::move(b));
  }
  net.head_w_ = kaiming_uniform({D, config.classes}, D, rng);
  net.head_b_ = Tensor::zeros({config.classes});
  net.head_b_.set_requires_grad(true);
  return net;
}


RtformerNet RtformerNet::build_fused_shell(const RtformerConfig& config) {
  RtformerNet net = build(config);
  net.set_stats_ready(true);
  return fuse_network(net);
}

void RtformerNet::set_mode(NetMode mode) {
  if (mode_ == mode) return;
  if (mode_ == NetMode::Fused) throw StateError("a fused network is inference-only");
  if (mode == NetMode::Fused) throw StateError("use fuse_network() to obtain a fused network");
  if (mode == NetMode::Infer) {
    const auto missing = layers_missing_stats();
    if (!missing.empty()) throw StateError("TSBN '" + missing.front() + "' has no running statistics");
  }
  mode_ = mode;
}

namespace {

struct Runner {
  const RtformerConfig& cfg;
  NetMode mode;
  ForwardTrace* trace;

  Tensor unit(SpikeUnit& u, const Tensor& x) const {
    const Shape& s = x.shape();
    const Tensor flat = reshape(x, {s[0] * s[1], s[2], s[3], s[4]});
    const Tensor conv = conv2d(flat, u.weight, u.stride);
    const Tensor pre = reshape(conv, {s[0], s[1], conv.dim(1), conv.dim(2), conv.dim(3)});
    Tensor spikes;
    std::vector<double> margin;
    switch (mode) {
      case NetMode::Train:
        spikes = threshold_spike(tsbn_forward_train(pre, *u.tsbn), cfg.v_th, cfg.lif.surrogate_alpha);
        break;
      case NetMode::Infer:
        spikes = spike_normalized(pre, *u.tsbn, cfg.v_th);
        if (trace) margin = normalized_margin(pre, *u.tsbn, cfg.v_th);
        break;
      case NetMode::Fused:
        spikes = spike_folded(pre, *u.folded);
        if (trace) margin = raw_margin(pre, u.folded->v_th_eff);
        break;
    }
    if (trace) trace->layers.push_back({u.name, x, spikes, std::move(margin)});
    return spikes;
  }

  static std::vector<double> raw_margin(const Tensor& pre, const Tensor& th) {
    const Index T = pre.dim(0), B = pre.dim(1), C = pre.dim(2), HW = pre.dim(3) * pre.dim(4);
    std::vector<double> m(pre.data().size());
    for (Index t = 0; t < T; ++t)
      for (Index b = 0; b < B; ++b)
        for (Index c = 0; c < C; ++c) {
          const double v = th.data()[static_cast<std::size_t>(t * C + c)];
          const Index base = ((t * B + b) * C + c) * HW;
          for (Index i = 0; i < HW; ++i) {
            const auto j = static_cast<std::size_t>(base + i);
            m[j] = pre.data()[j] - v;
          }
        }
    return m;
  }

  Tensor lif(const std::string& name, const Tensor& input, const Tensor& drive) const {
    if (mode == NetMode::Train) {
      Tensor s = lif_sequence(drive, cfg.lif);
      if (trace) trace->layers.push_back({name, input, s, {}});
      return s;
    }
    auto [s, membrane] = lif_sequence_with_membrane(drive, cfg.lif);
    if (trace) {
      std::vector<double> margin(membrane.data().begin(), membrane.data().end());
      for (auto& v : margin) v -= cfg.lif.v_th;
      trace->layers.push_back({name, input, s, std::move(margin)});
    }
    return s;
  }

  Tensor block(RtformerBlock& b, const Tensor& x) const {
    Tensor core_out;
    if (mode == NetMode::Fused) {
      core_out = fused_forward(*b.core_fused, x);
    } else {
      core_out = branch_forward(x, *b.core, mode == NetMode::Train ? BankMode::Train : BankMode::Infer);
    }
    const Tensor s1 = lif(b.name + ".core.lif", x, core_out);
    if (cfg.block_order == "mlp-attn") return attention(b, mlp(b, s1));
    return mlp(b, attention(b, s1));
  }

  Tensor attention(RtformerBlock& b, const Tensor& r) const {
    const Shape& s = r.shape();
    const Index T = s[0], B = s[1], D = s[2], N = s[3] * s[4];
    const Index h = cfg.heads, d = D / h;
    // [T,B,D,H,W] is [T,B,h,d,N] in memory; attention wants tokens first.
    auto tokens = [&](const Tensor& t) { return transpose_last2(reshape(t, {T, B, h, d, N})); };
    const Tensor q = unit(b.q, r), k = unit(b.k, r), v = unit(b.v, r);
    const Tensor qt = tokens(q), kt = tokens(k), vt = tokens(v);
    if (trace) trace->attention_qk.emplace_back(qt, kt);
    const Tensor attn = spiking_attention(qt, kt, vt, cfg.attn_scale);
    const Tensor attn_map = reshape(transpose_last2(attn), s);
    const Tensor a = lif(b.name + ".attn.lif", attn_map, attn_map);
    return spike_or(r, unit(b.proj, a));
  }

  Tensor mlp(RtformerBlock& b, const Tensor& r) const {
    const Tensor hdn = unit(b.fc1, r);
    return spike_or(r, unit(b.fc2, hdn));
  }
};

}  // namespace

Tensor RtformerNet::forward(const Tensor& x, ForwardTrace* trace) {
  const auto& c = config_;
  if (x.rank() != 5 || x.dim(0) != c.T || x.dim(2) != c.in_channels || x.dim(3) != c.height ||
      x.dim(4) != c.width) {
    throw ShapeError(fmt::format("network expects [{}, B, {}, {}, {}], got {}", c.T, c.in_channels, c.height,
                                 c.width, shape_str(x.shape())));
  }
  if (mode_ == NetMode::Infer) {
    const auto missing = layers_missing_stats();
    if (!missing.empty()) throw StateError("TSBN '" + missing.front() + "' has no running statistics");
  }
  const Runner run{config_, mode_, trace};
  Tensor h = run.unit(embed_, x);
  for (auto& b : blocks_) h = run.block(b, h);
  if (trace) trace->head_input = h;
  const Tensor feat = mean(h, {0, 3, 4});
  return add(matmul(feat, head_w_), head_b_);
}

Tensor spiking_attention(const Tensor& q, const Tensor& k, const Tensor& v, double scale_factor) {
  if (q.rank() != 5 || k.shape() != q.shape() || v.shape() != q.shape()) {
    throw ShapeError("spiking_attention expects equal [T,B,heads,N,d] inputs, got " + shape_str(q.shape()) + ", " +
                     shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  require_binary(q, "spiking_attention");
  require_binary(k, "spiking_attention");
  require_binary(v, "spiking_attention");
  return scale(matmul(q, matmul(transpose_last2(k), v)), scale_factor);
}

Tensor spike_or(const Tensor& a, const Tensor& b) {
  require_binary(a, "spike_or");
  require_binary(b, "spike_or");
  return sub(add(a, b), mul(a, b));
}

std::vector<Tensor> RtformerNet::parameters() const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : named_tensors()) {
    if (t.requires_grad()) out.push_back(t);
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>> RtformerNet::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  add_unit_tensors(out, embed_);
  for (const auto& b : blocks_) {
    if (b.core) {
      for (std::size_t i = 0; i < b.core->branches.size(); ++i) {
        const auto& br = b.core->branches[i];
        out.emplace_back(b.core->name + ".branch" + std::to_string(i) + ".kernel", br.kernel);
        add_tsbn_tensors(out, br.tsbn);
      }
    }
    if (b.core_fused) {
      out.emplace_back(b.core_fused->name + ".fused.kernel", b.core_fused->kernel);
      out.emplace_back(b.core_fused->name + ".fused.bias", b.core_fused->bias);
    }
    for (const SpikeUnit* u : {&b.q, &b.k, &b.v, &b.proj, &b.fc1, &b.fc2}) add_unit_tensors(out, *u);
  }
  out.emplace_back("head.weight", head_w_);
  out.emplace_back("head.bias", head_b_);
  return out;
}

Index RtformerNet::parameter_count() const {
  Index n = 0;
  for (const auto& [name, t] : named_tensors()) n += t.numel();
  return n;
}

Index RtformerNet::expected_parameter_count(const RtformerConfig& c) {
  const Index T = c.T, D = c.dim, Dh = c.dim * c.mlp_ratio;
  const Index embed = D * c.in_channels * 9 + 4 * T * D;
  const Index core = D * (1 + 1 + 1 + 9 + 9) + 5 * 4 * T * D;
  const Index attn = 4 * (D * D + 4 * T * D);
  const Index mlp = (Dh * D + 4 * T * Dh) + (D * Dh + 4 * T * D);
  return embed + c.depth * (core + attn + mlp) + D * c.classes + c.classes;
}

Index RtformerNet::expected_fused_parameter_count(const RtformerConfig& c) {
  const Index T = c.T, D = c.dim, Dh = c.dim * c.mlp_ratio;
  const Index embed = D * c.in_channels * 9 + T * D;
  const Index core = T * D * (9 + 1);
  const Index attn = 4 * (D * D + T * D);
  const Index mlp = (Dh * D + T * Dh) + (D * Dh + T * D);
  return embed + c.depth * (core + attn + mlp) + D * c.classes + c.classes;
}

std::vector<std::string> RtformerNet::layers_missing_stats() const {
  std::vector<std::string> out;
  auto check = [&](const TsbnLayer& l) {
    if (!l.stats_ready) out.push_back(l.name);
  };
  if (embed_.tsbn) check(*embed_.tsbn);
  for (const auto& b : blocks_) {
    if (b.core) {
      for (const auto& br : b.core->branches) check(br.tsbn);
    }
    for (const SpikeUnit* u : {&b.q, &b.k, &b.v, &b.proj, &b.fc1, &b.fc2}) {
      if (u->tsbn) check(*u->tsbn);
    }
  }
  return out;
}

void RtformerNet::assign(const std::string& name, const Tensor& value) {
  for (auto& [n, t] : named_tensors()) {
    if (n != name) continue;
    if (t.shape() != value.shape()) {
      throw ShapeError("tensor '" + name + "' expects " + shape_str(t.shape()) + ", got " + shape_str(value.shape()));
    }
    auto dst = t.mutable_data();
    std::copy(value.data().begin(), value.data().end(), dst.begin());
    return;
  }
  throw ValueError("network has no tensor named '" + name + "'");
}

void RtformerNet::set_stats_ready(bool ready) {
  if (embed_.tsbn) embed_.tsbn->stats_ready = ready;
  for (auto& b : blocks_) {
    if (b.core) {
      for (auto& br : b.core->branches) br.tsbn.stats_ready = ready;
    }
    for (SpikeUnit* u : {&b.q, &b.k, &b.v, &b.proj, &b.fc1, &b.fc2}) {
      if (u->tsbn) u->tsbn->stats_ready = ready;
    }
  }
}

RtformerNet clone_network(const RtformerNet& net) {
  RtformerNet c = net;
  c.embed() = copy_unit(net.embed());
  for (std::size_t i = 0; i < net.blocks().size(); ++i) {
    const auto& src = net.blocks()[i];
    auto& dst = c.blocks()[i];
    if (src.core) {
      for (std::size_t j = 0; j < src.core->branches.size(); ++j) {
        dst.core->branches[j].kernel = deep_copy(src.core->branches[j].kernel);
        dst.core->branches[j].tsbn = copy_tsbn(src.core->branches[j].tsbn);
      }
    }
    if (src.core_fused) {
      dst.core_fused = FusedConv{src.core_fused->kernel.clone(), src.core_fused->bias.clone(), src.core_fused->name};
    }
    dst.q = copy_unit(src.q);
    dst.k = copy_unit(src.k);
    dst.v = copy_unit(src.v);
    dst.proj = copy_unit(src.proj);
    dst.fc1 = copy_unit(src.fc1);
    dst.fc2 = copy_unit(src.fc2);
  }
  c.head_weight() = deep_copy(const_cast<RtformerNet&>(net).head_weight());
  c.head_bias() = deep_copy(const_cast<RtformerNet&>(net).head_bias());
  return c;
}

RtformerNet fuse_network(const RtformerNet& net) {
  if (net.fused()) throw StateError("network is already fused");
  const auto missing = net.layers_missing_stats();
  if (!missing.empty()) {
    throw StateError("cannot fuse: TSBN '" + missing.front() + "' has no running statistics");
  }
  RtformerNet out = clone_network(net);
  const double v_th = net.config().v_th;
  auto fold_unit = [&](SpikeUnit& u) {
    u.folded = fold_threshold(*u.tsbn, v_th);
    u.tsbn.reset();
    u.weight.impl().requires_grad = false;
  };
  fold_unit(out.embed_);
  for (auto& b : out.blocks_) {
    b.core_fused = fuse(*b.core);
    b.core.reset();
    for (SpikeUnit* u : {&b.q, &b.k, &b.v, &b.proj, &b.fc1, &b.fc2}) fold_unit(*u);
  }
  out.head_w_.impl().requires_grad = false;
  out.head_b_.impl().requires_grad = false;
  out.mode_ = NetMode::Fused;
  return out;
}

Tensor Dataset::batch(const std::vector<Index>& indices) const {
  const Index B = static_cast<Index>(indices.size());
  const Index per_t = C * H * W, per_sample = T * per_t;
  std::vector<float> out(static_cast<std::size_t>(T * B * per_t));
  for (Index bi = 0; bi < B; ++bi) {
    const Index n = indices[static_cast<std::size_t>(bi)];
    if (n < 0 || n >= size()) throw ValueError("dataset index out of range");
    for (Index t = 0; t < T; ++t) {
      const float* src = data.data() + n * per_sample + t * per_t;
      std::copy(src, src + per_t, out.begin() + (t * B + bi) * per_t);
    }
  }
  return Tensor({T, B, C, H, W}, std::move(out));
}

void Dataset::append(const Tensor& sample, Index label) {
  Shape s = sample.shape();
  if (s.size() == 5) {
    if (s[1] != 1) throw ShapeError("Dataset::append takes one sample at a time");
    s.erase(s.begin() + 1);
  }
  if (s.size() != 4) throw ShapeError("Dataset::append expects [T,C,H,W], got " + shape_str(sample.shape()));
  if (labels.empty() && data.empty()) {
    T = s[0];
    C = s[1];
    H = s[2];
    W = s[3];
  } else if (s != Shape{T, C, H, W}) {
    throw ShapeError("sample shape " + shape_str(s) + " differs from dataset");
  }
  data.insert(data.end(), sample.data().begin(), sample.data().end());
  labels.push_back(label);
}

void SgdOptimizer::step(const std::vector<Tensor>& params) {
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    auto& vel = velocity_[p.id()];
    const auto g = p.grad();
    if (vel.empty()) vel.assign(g.size(), 0.0);
    auto d = const_cast<Tensor&>(p).mutable_data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      vel[i] = momentum_ * vel[i] + g[i];
      d[i] = static_cast<float>(d[i] - lr_ * vel[i]);
    }
  }
}

void SgdOptimizer::zero_grad(const std::vector<Tensor>& params) {
  for (auto p : params) p.zero_grad();
}

namespace {

std::int64_t argmax_row(std::span<const float> row) {
  return static_cast<std::int64_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace

EpochMetrics train_epoch(RtformerNet& net, const Dataset& data, SgdOptimizer& opt, Index batch_size,
                         std::uint64_t seed) {
  if (net.fused()) throw StateError("fused networks are inference-only");
  if (batch_size < 1) throw ValueError("batch size must be >= 1");
  if (data.size() == 0) throw ValueError("empty training set");
  net.set_mode(NetMode::Train);
  std::vector<Index> order(static_cast<std::size_t>(data.size()));
  for (Index i = 0; i < data.size(); ++i) order[static_cast<std::size_t>(i)] = i;
  Rng rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  const auto params = net.parameters();
  EpochMetrics m;
  double loss_sum = 0.0;
  Index correct = 0;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<Index> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                           order.begin() + static_cast<std::ptrdiff_t>(end));
    std::vector<Index> labels;
    for (Index i : idx) labels.push_back(data.labels[static_cast<std::size_t>(i)]);
    GradTape tape;
    Tensor logits, loss;
    {
      GradTape::Recording rec(tape);
      logits = net.forward(data.batch(idx));
      loss = cross_entropy(logits, labels);
    }
    opt.zero_grad(params);
    backward(loss, tape);
    opt.step(params);
    const double l = loss.item();
    m.batch_losses.push_back(l);
    loss_sum += l * static_cast<double>(idx.size());
    const Index K = logits.dim(1);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      if (argmax_row(logits.data().subspan(b * static_cast<std::size_t>(K), static_cast<std::size_t>(K))) == labels[b]) {
        ++correct;
      }
    }
  }
  m.loss = loss_sum / static_cast<double>(data.size());
  m.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return m;
}

EvalResult evaluate(RtformerNet& net, const Dataset& data, Index batch_size) {
  const NetMode previous = net.mode();
  if (previous == NetMode::Train) net.set_mode(NetMode::Infer);
  EvalResult r;
  Index correct = 0;
  for (Index start = 0; start < data.size(); start += batch_size) {
    std::vector<Index> idx;
    for (Index i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    const Tensor logits = net.forward(data.batch(idx));
    const Index K = logits.dim(1);
    r.logits.insert(r.logits.end(), logits.data().begin(), logits.data().end());
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const Index p = argmax_row(logits.data().subspan(b * static_cast<std::size_t>(K), static_cast<std::size_t>(K)));
      r.predictions.push_back(p);
      if (p == data.labels[static_cast<std::size_t>(idx[b])]) ++correct;
    }
  }
  if (previous == NetMode::Train) net.set_mode(NetMode::Train);
  r.accuracy = data.size() > 0 ? static_cast<double>(correct) / static_cast<double>(data.size()) : 0.0;
  return r;
}

bool VerifyReport::passed() const {
  return mismatches == 0 && logits_within_tol == static_cast<Index>(samples.size());
}

std::string VerifyReport::summary() const {
  const auto n = samples.size();
  return fmt::format(
      "{} samples: {} mismatches outside boundary band ({} in-band flips, {} downstream of them); "
      "logits within {:g}: {}/{} (max relative error {:.3e}); argmax agreement {}/{}",
      n, mismatches, band_mismatches, cascade_mismatches, tolerance, logits_within_tol, n, max_logit_rel_error,
      argmax_agree, n);
}

VerifyReport verify_fusion(RtformerNet& reference, RtformerNet& fused, const Dataset& data, double tolerance,
                           Index limit, double band) {
  if (!fused.fused()) throw StateError("verify_fusion: second network is not fused");
  if (reference.fused()) throw StateError("verify_fusion: reference network is fused");
  const NetMode previous = reference.mode();
  reference.set_mode(NetMode::Infer);
  VerifyReport rep;
  rep.tolerance = tolerance;
  rep.band = band;
  const Index n = limit > 0 ? std::min(limit, data.size()) : data.size();
  const Index chunk = 25;
  for (Index start = 0; start < n; start += chunk) {
    std::vector<Index> idx;
    for (Index i = start; i < std::min(n, start + chunk); ++i) idx.push_back(i);
    const Tensor x = data.batch(idx);
    ForwardTrace tr, tf;
    const Tensor lr = reference.forward(x, &tr);
    const Tensor lf = fused.forward(x, &tf);
    if (tr.layers.size() != tf.layers.size()) throw StateError("verify_fusion: traces differ in layout");
    const Index B = static_cast<Index>(idx.size());
    const Index K = lr.dim(1);
    for (Index b = 0; b < B; ++b) {
      SampleVerdict v;
      v.index = idx[static_cast<std::size_t>(b)];
      const auto ref = lr.data().subspan(static_cast<std::size_t>(b * K), static_cast<std::size_t>(K));
      const auto got = lf.data().subspan(static_cast<std::size_t>(b * K), static_cast<std::size_t>(K));
      v.logit_rel_error = max_relative_error(got, ref);
      v.argmax_agrees = argmax_row(ref) == argmax_row(got);
      bool cascading = false;
      for (std::size_t L = 0; L < tr.layers.size(); ++L) {
        const auto& a = tr.layers[L];
        const auto& f = tf.layers[L];
        const Index T = a.spikes.dim(0);
        const Index per = a.spikes.numel() / (T * B);
        Index first_band_t = T;
        // first pass: locate in-band flips
        for (Index t = 0; t < T; ++t)
          for (Index e = 0; e < per; ++e) {
            const auto j = static_cast<std::size_t>((t * B + b) * per + e);
            if (a.spikes.data()[j] != f.spikes.data()[j] && std::abs(a.margin[j]) < band) {
              first_band_t = std::min(first_band_t, t);
            }
          }
        for (Index t = 0; t < T; ++t)
          for (Index e = 0; e < per; ++e) {
            const auto j = static_cast<std::size_t>((t * B + b) * per + e);
            if (a.spikes.data()[j] == f.spikes.data()[j]) continue;
            if (cascading || t > first_band_t) ++v.cascade_mismatches;
            else if (std::abs(a.margin[j]) < band) ++v.band_mismatches;
            else ++v.mismatches;
          }
        if (first_band_t < T) cascading = true;
      }
      rep.max_logit_rel_error = std::max(rep.max_logit_rel_error, v.logit_rel_error);
      rep.mismatches += v.mismatches;
      rep.band_mismatches += v.band_mismatches;
      rep.cascade_mismatches += v.cascade_mismatches;
      if (v.logit_rel_error <= tolerance) ++rep.logits_within_tol;
      if (v.argmax_agrees) ++rep.argmax_agree;
      rep.samples.push_back(v);
    }
  }
  reference.set_mode(previous);
  return rep;
}

namespace {

double rate_of(const Tensor& t) {
  if (t.numel() == 0) return 0.0;
  double s = 0.0;
  for (float v : t.data()) s += v;
  return s / static_cast<double>(t.numel());
}

// One conv row: spike-driven ACs for binary input, dense MACs otherwise.
OpCount conv_row(const std::string& name, const Tensor& input, const ConvGeometry& g) {
  OpCount oc;
  oc.layer_id = name;
  if (is_binary(input)) {
    oc.spike_driven = true;
    oc.firing_rate = rate_of(input);
    oc.acs = count_spike_acs(g, oc.firing_rate);
  } else {
    oc.macs = static_cast<double>(count_conv_macs(g));
  }
  return oc;
}

}  // namespace

EnergyReport estimate_energy(RtformerNet& net, const Tensor& probe) {
  if (net.mode() == NetMode::Train) throw StateError("estimate_energy needs an inference-mode network");
  ForwardTrace tr;
  net.forward(probe, &tr);
  const auto& c = net.config();
  const Index T = c.T, B = probe.dim(1), D = c.dim, Dh = c.dim * c.mlp_ratio;
  const Index H = c.grid_h(), W = c.grid_w(), HW = H * W;
  const bool fused = net.fused();
  EnergyReport rep;
  rep.variant = fused ? "fused" : "unfused";

  auto find_input = [&](const std::string& name) -> const Tensor& {
    for (const auto& l : tr.layers) {
      if (l.name == name) return l.input;
    }
    throw StateError("trace has no layer '" + name + "'");
  };
  auto elementwise = [&](const std::string& name, Index channels, bool mac) {
    OpCount oc;
    oc.layer_id = name;
    const double n = static_cast<double>(T * channels * HW);
    (mac ? oc.macs : oc.acs) = n;
    rep.layers.push_back(oc);
  };
  auto unit_rows = [&](const SpikeUnit& u, Index c_in, Index c_out, Index k) {
    rep.layers.push_back(conv_row(u.name + ".conv", find_input(u.name), {T, c_in, c_out, k, H, W}));
    if (!fused) elementwise(u.name + ".tsbn", c_out, true);
  };

  unit_rows(net.embed(), c.in_channels, D, 3);
  for (std::size_t i = 0; i < net.blocks().size(); ++i) {
    const auto& b = net.blocks()[i];
    const Tensor& x = find_input(b.name + ".core.lif");
    if (fused) {
      rep.layers.push_back(conv_row(b.name + ".core.fused", x, {T, 1, D, 3, H, W}));
      elementwise(b.name + ".core.bias", D, false);
    } else {
      for (std::size_t j = 0; j < b.core->branches.size(); ++j) {
        const Index k = b.core->branches[j].kernel.dim(1);
        rep.layers.push_back(conv_row(b.name + ".core.branch" + std::to_string(j), x, {T, 1, D, k, H, W}));
      }
      elementwise(b.name + ".core.tsbn", D * static_cast<Index>(b.core->branches.size()), true);
      elementwise(b.name + ".core.sum", D * static_cast<Index>(b.core->branches.size() - 1), false);
    }
    for (const SpikeUnit* u : {&b.q, &b.k, &b.v}) unit_rows(*u, D, D, 1);

    // k^T v adds one v row per k spike, q (k^T v) one row per q spike.
    const auto& [q, k] = tr.attention_qk[i];
    const Index d = D / c.heads;
    OpCount attn;
    attn.layer_id = b.name + ".attn";
    attn.spike_driven = true;
    attn.firing_rate = 0.5 * (rate_of(q) + rate_of(k));
    attn.acs = (rate_of(q) + rate_of(k)) * static_cast<double>(T * HW * D * d);
    rep.layers.push_back(attn);
    elementwise(b.name + ".attn.scale", D, true);

    unit_rows(b.proj, D, D, 1);
    unit_rows(b.fc1, D, Dh, 1);
    unit_rows(b.fc2, Dh, D, 1);
  }
  OpCount pool;
  pool.layer_id = "head.pool";
  pool.spike_driven = true;
  pool.firing_rate = rate_of(tr.head_input);
  pool.acs = count_spike_acs(T, D * HW, pool.firing_rate);
  rep.layers.push_back(pool);
  OpCount fc;
  fc.layer_id = "head.fc";
  fc.macs = static_cast<double>(D * c.classes);
  rep.layers.push_back(fc);
  (void)B;
  rep.validate();
  return rep;
}

}  // namespace stcore
