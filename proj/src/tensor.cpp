#include "stcore/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

#include "stcore/error.hpp"

namespace stcore {

namespace {

std::atomic<bool> g_checked{true};
std::atomic<std::uint64_t> g_next_id{1};

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) {
    if (e < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

bool checked_mode() { return g_checked.load(std::memory_order_relaxed); }
void set_checked_mode(bool enabled) { g_checked.store(enabled, std::memory_order_relaxed); }

Tensor::Tensor(Shape shape, std::vector<float> values) {
  const auto n = shape_numel(shape);
  if (static_cast<std::int64_t>(values.size()) != n) {
    throw ShapeError("tensor of shape " + shape_str(shape) + " needs " + std::to_string(n) +
                     " values, got " + std::to_string(values.size()));
  }
  if (checked_mode()) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (!std::isfinite(values[i])) {
        throw ValueError("non-finite value at flat index " + std::to_string(i));
      }
    }
  }
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0f); }
Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0f); }

Tensor Tensor::full(Shape shape, float value) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<float>(static_cast<std::size_t>(n), value));
}

Tensor Tensor::scalar(float value) { return Tensor({}, {value}); }

const Shape& Tensor::shape() const { return impl().shape; }

std::int64_t Tensor::dim(std::int64_t axis) const {
  const auto r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  }
  return shape()[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(impl().data.size()); }

std::span<const float> Tensor::data() const { return impl().data; }
std::span<float> Tensor::mutable_data() { return impl().data; }

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl().data[0];
}

float Tensor::at(std::initializer_list<std::int64_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw ShapeError("index rank mismatch for " + shape_str(s));
  std::int64_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i < 0 || i >= s[axis]) throw ShapeError("index out of range for " + shape_str(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return impl().data[static_cast<std::size_t>(flat)];
}

bool Tensor::requires_grad() const { return impl().requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!impl().is_leaf) throw StateError("requires_grad can only be set on leaf tensors");
  impl().requires_grad = flag;
  return *this;
}

bool Tensor::is_leaf() const { return impl().is_leaf; }
bool Tensor::has_grad() const { return !impl().grad.empty(); }
std::span<const float> Tensor::grad() const { return impl().grad; }
void Tensor::zero_grad() { impl().grad.clear(); }

Tensor Tensor::clone() const {
  Tensor out;
  out.impl_ = std::make_shared<detail::TensorImpl>();
  out.impl_->shape = impl().shape;
  out.impl_->data = impl().data;
  out.impl_->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return out;
}

std::uint64_t Tensor::id() const { return impl().id; }

detail::TensorImpl& Tensor::impl() const {
  if (!impl_) throw StateError("use of an undefined tensor");
  return *impl_;
}

bool is_binary(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(),
                     [](float v) { return v == 0.0f || v == 1.0f; });
}

namespace {

template <typename A, typename B>
double relative_error_impl(std::span<A> a, std::span<B> b) {
  if (a.size() != b.size()) throw ShapeError("relative error of differently sized buffers");
  double diff = 0.0;
  double scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    scale = std::max(scale, std::abs(static_cast<double>(b[i])));
  }
  if (diff == 0.0) return 0.0;
  return diff / std::max(scale, 1e-30);
}

}  // namespace

double max_relative_error(std::span<const float> a, std::span<const float> b) {
  return relative_error_impl(a, b);
}

double max_relative_error(std::span<const double> a, std::span<const double> b) {
  return relative_error_impl(a, b);
}

}  // namespace stcore
