#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "stcore/tensor.hpp"

namespace stcore {

/// Backward rule of one recorded op. `grad_in[i]` is empty when input i does
/// not need a gradient; rules must accumulate (+=), never assign, because the
/// same tensor may appear as several inputs.
using BackwardFn =
    std::function<void(std::span<const double> grad_out, std::span<const std::span<double>> grad_in)>;

/// Ordered record of differentiable ops executed while the tape is active.
///
/// Ops record themselves only when a tape is active on the current thread and
/// at least one input requires a gradient. Outputs are always created after
/// their inputs, so append order is a topological order.
class GradTape {
 public:
  struct Node {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };

  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;
  GradTape(GradTape&&) = default;
  GradTape& operator=(GradTape&&) = default;

  void record(Node node);
  std::span<const Node> nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  void clear() { nodes_.clear(); }

  /// Tape ops record into on this thread, or nullptr.
  static GradTape* active();

  /// RAII activation; restores the previously active tape on destruction.
  class Recording {
   public:
    explicit Recording(GradTape& tape);
    ~Recording();
    Recording(const Recording&) = delete;
    Recording& operator=(const Recording&) = delete;

   private:
    GradTape* previous_;
  };

 private:
  std::vector<Node> nodes_;
};

/// Reverse pass from a scalar loss. Leaf tensors with requires_grad receive
/// dLoss/dLeaf added to their existing grad buffer.
void backward(const Tensor& loss, const GradTape& tape);

/// Reverse pass seeded with an explicit output gradient (any shape).
void backward_with_seed(const Tensor& output, std::span<const double> seed, const GradTape& tape);

/// Central-difference gradient check of f at x.
///
/// Non-scalar outputs are contracted with fixed pseudo-random weights drawn
/// from `seed` so every output element participates; the contraction is done
/// in double. Returns max_i |analytic_i - numeric_i| / max(1, |numeric_i|).
/// The numeric step divides by the actual float32 spacing of the perturbed
/// coordinates. Throws ValueError when f produces a non-finite value.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-3,
                  std::uint64_t seed = 0);

namespace detail {

/// True when an op on these inputs must be recorded.
bool needs_grad(std::initializer_list<const Tensor*> inputs);

/// Registers `output` as produced by `op`. Caller has checked needs_grad().
void record_op(std::string op, const Tensor& output, std::vector<Tensor> inputs, BackwardFn fn);

}  // namespace detail

}  // namespace stcore
