#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace stcore {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Checked mode validates finiteness at tensor construction and binary
/// discipline on spike paths. On by default.
bool checked_mode();
void set_checked_mode(bool enabled);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  bool is_leaf = true;
  std::uint64_t id = 0;
};

}  // namespace detail

/// Dense row-major float32 array shared by handle.
///
/// Copying a Tensor copies the handle, not the storage. Values are treated as
/// immutable once built; the only sanctioned in-place writes are optimizer
/// updates and loaders filling freshly created tensors (mutable_data()).
/// Activations use the axis order [T, B, C, H, W].
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> values);

  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, float value);
  static Tensor scalar(float value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::int64_t rank() const { return static_cast<std::int64_t>(shape().size()); }
  /// Extent of `axis`; negative axes count from the back.
  std::int64_t dim(std::int64_t axis) const;
  std::int64_t numel() const;

  std::span<const float> data() const;
  std::span<float> mutable_data();

  float item() const;
  float at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const;
  /// Marks a leaf as trainable. Non-leaf tensors cannot be toggled.
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const float> grad() const;
  void zero_grad();

  /// Deep copy, detached from any tape, requires_grad cleared.
  Tensor clone() const;

  std::uint64_t id() const;
  detail::TensorImpl& impl() const;

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// True when every element is exactly 0.0f or 1.0f.
bool is_binary(const Tensor& t);

/// Max |a - b| / max |b|, the normwise relative error used by the
/// equivalence checks. Shapes must match.
double max_relative_error(std::span<const float> a, std::span<const float> b);
double max_relative_error(std::span<const double> a, std::span<const double> b);

}  // namespace stcore
