// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace unlearn::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

// Dense n-d array of 64-bit reals with an optional gradient buffer.
// Value-semantic handle over shared storage; gradients accumulate into the
// shared buffer, so fan-out sums naturally during backward.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor from(Shape shape, std::vector<double> data);
  static Tensor scalar(double v);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t numel() const;
  std::size_t dim(std::size_t i) const { return shape().at(i); }
  std::size_t ndim() const { return shape().size(); }

  std::span<double> data();
  std::span<const double> data() const;
  double item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool v);

  bool has_grad() const;
  std::span<double> grad();
  std::span<const double> grad() const;
  void ensure_grad();
  void zero_grad();
  void drop_grad();

  // deep copy of values; no grad, no provenance
  Tensor clone() const;
  // same values, requires_grad off (fresh storage)
  Tensor detached() const;

  // throws when any stored value is non-finite
  void check_finite(const char* what) const;

  // identity of the underlying storage (used for tape ids / freezing)
  const void* storage_id() const;

 private:
  friend class Tape;
  struct Impl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until ensure_grad
    bool requires_grad = false;
    // provenance: tape that recorded this tensor (0 = none)
    std::uint64_t tape_serial = 0;
  };
  std::shared_ptr<Impl> impl_;
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  Impl& ref();
  const Impl& ref() const;
};

}  // namespace unlearn::ad
