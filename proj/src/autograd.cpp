#include "stcore/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "stcore/error.hpp"
#include "stcore/random.hpp"

namespace stcore {

namespace {

thread_local GradTape* t_active_tape = nullptr;

}  // namespace

void GradTape::record(Node node) {
  for (const auto& in : node.inputs) {
    if (in.id() >= node.output.id()) {
      throw StateError("tape order violated by op '" + node.op + "'");
    }
  }
  nodes_.push_back(std::move(node));
}

GradTape* GradTape::active() { return t_active_tape; }

GradTape::Recording::Recording(GradTape& tape) : previous_(t_active_tape) { t_active_tape = &tape; }
GradTape::Recording::~Recording() { t_active_tape = previous_; }

namespace detail {

bool needs_grad(std::initializer_list<const Tensor*> inputs) {
  if (t_active_tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->defined() && t->requires_grad(); });
}

void record_op(std::string op, const Tensor& output, std::vector<Tensor> inputs, BackwardFn fn) {
  auto& impl = output.impl();
  impl.requires_grad = true;
  impl.is_leaf = false;
  t_active_tape->record({std::move(op), std::move(inputs), output, std::move(fn)});
}

}  // namespace detail

void backward_with_seed(const Tensor& output, std::span<const double> seed, const GradTape& tape) {
  if (static_cast<std::int64_t>(seed.size()) != output.numel()) {
    throw ShapeError("seed gradient size does not match output " + shape_str(output.shape()));
  }
  std::unordered_map<const detail::TensorImpl*, std::vector<double>> grads;
  grads.emplace(&output.impl(), std::vector<double>(seed.begin(), seed.end()));

  const auto nodes = tape.nodes();
  bool reached = output.is_leaf() && output.requires_grad();
  std::vector<std::span<double>> grad_in;
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    const auto found = grads.find(&it->output.impl());
    if (found == grads.end()) continue;
    reached = true;
    grad_in.assign(it->inputs.size(), std::span<double>{});
    for (std::size_t i = 0; i < it->inputs.size(); ++i) {
      const auto& in = it->inputs[i];
      if (!in.requires_grad()) continue;
      auto& buf = grads[&in.impl()];
      if (buf.empty()) buf.assign(static_cast<std::size_t>(in.numel()), 0.0);
      grad_in[i] = buf;
    }
    // grads may have rehashed; node-based storage keeps element addresses.
    const auto& gout = grads.at(&it->output.impl());
    it->backward(gout, grad_in);
  }
  if (!reached) throw StateError("output is not reachable from the tape");

  for (auto& [impl_ptr, buf] : grads) {
    auto* impl = const_cast<detail::TensorImpl*>(impl_ptr);
    if (!impl->is_leaf || !impl->requires_grad) continue;
    if (impl->grad.empty()) impl->grad.assign(impl->data.size(), 0.0f);
    for (std::size_t i = 0; i < buf.size(); ++i) {
      impl->grad[i] = static_cast<float>(impl->grad[i] + buf[i]);
    }
  }
}

void backward(const Tensor& loss, const GradTape& tape) {
  if (loss.numel() != 1) {
    throw ShapeError("backward needs a scalar loss, got " + shape_str(loss.shape()));
  }
  const double one = 1.0;
  backward_with_seed(loss, std::span<const double>(&one, 1), tape);
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps,
                  std::uint64_t seed) {
  if (!(eps >= 1e-4 && eps <= 1e-2)) throw ValueError("grad_check eps must lie in [1e-4, 1e-2]");

  auto contract = [](const Tensor& out, const std::vector<double>& w) {
    double acc = 0.0;
    const auto d = out.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (!std::isfinite(d[i])) throw ValueError("grad_check: non-finite output value");
      acc += w[i] * static_cast<double>(d[i]);
    }
    return acc;
  };

  Tensor leaf = x.clone();
  leaf.set_requires_grad(true);
  GradTape tape;
  Tensor out;
  {
    GradTape::Recording rec(tape);
    out = f(leaf);
  }
  std::vector<double> weights(static_cast<std::size_t>(out.numel()), 1.0);
  if (out.numel() > 1) {
    Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
    for (auto& w : weights) w = rng.uniform(0.5, 1.5);
  }
  std::vector<double> analytic(static_cast<std::size_t>(x.numel()), 0.0);
  if (out.requires_grad()) {
    backward_with_seed(out, weights, tape);
    if (leaf.has_grad()) {
      const auto g = leaf.grad();
      std::copy(g.begin(), g.end(), analytic.begin());
    }
  }
  for (double g : analytic) {
    if (!std::isfinite(g)) throw ValueError("grad_check: non-finite analytic gradient");
  }

  double worst = 0.0;
  const auto base = x.data();
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<float> plus(base.begin(), base.end());
    std::vector<float> minus(base.begin(), base.end());
    plus[i] = static_cast<float>(base[i] + eps);
    minus[i] = static_cast<float>(base[i] - eps);
    const double step = static_cast<double>(plus[i]) - static_cast<double>(minus[i]);
    const double fp = contract(f(Tensor(x.shape(), std::move(plus))), weights);
    const double fm = contract(f(Tensor(x.shape(), std::move(minus))), weights);
    const double numeric = (fp - fm) / step;
    if (!std::isfinite(numeric)) throw ValueError("grad_check: non-finite finite difference");
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace stcore
