// SPDX-License-Identifier: Apache-2.0
#include "unlearn/tensor.hpp"

#include <cmath>
#include <sstream>

namespace unlearn::ad {

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

Tensor Tensor::zeros(Shape shape) {
  for (std::size_t d : shape)
    if (d == 0) throw std::invalid_argument("tensor dimensions must be positive");
  auto impl = std::make_shared<Impl>();
  impl->data.assign(shape_numel(shape), 0.0);
  impl->shape = std::move(shape);
  return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double v) {
  Tensor t = zeros(std::move(shape));
  for (double& x : t.data()) x = v;
  t.check_finite("full");
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> data) {
  for (std::size_t d : shape)
    if (d == 0) throw std::invalid_argument("tensor dimensions must be positive");
  if (shape_numel(shape) != data.size())
    throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  Tensor t(std::move(impl));
  t.check_finite("from");
  return t;
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

Tensor::Impl& Tensor::ref() {
  if (!impl_) throw std::runtime_error("use of undefined tensor");
  return *impl_;
}

const Tensor::Impl& Tensor::ref() const {
  if (!impl_) throw std::runtime_error("use of undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return ref().shape; }
std::size_t Tensor::numel() const { return ref().data.size(); }

std::span<double> Tensor::data() { return ref().data; }
std::span<const double> Tensor::data() const { return ref().data; }

double Tensor::item() const {
  if (numel() != 1) throw std::runtime_error("item() on non-scalar tensor");
  return ref().data[0];
}

bool Tensor::requires_grad() const { return ref().requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
  ref().requires_grad = v;
  return *this;
}

bool Tensor::has_grad() const { return !ref().grad.empty(); }

std::span<double> Tensor::grad() {
  if (!has_grad()) throw std::runtime_error("tensor has no gradient buffer");
  return ref().grad;
}

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw std::runtime_error("tensor has no gradient buffer");
  return ref().grad;
}

void Tensor::ensure_grad() {
  auto& r = ref();
  if (r.grad.empty()) r.grad.assign(r.data.size(), 0.0);
}

void Tensor::zero_grad() {
  auto& r = ref();
  if (!r.grad.empty()) r.grad.assign(r.data.size(), 0.0);
}

void Tensor::drop_grad() { ref().grad.clear(); }

Tensor Tensor::clone() const {
  auto impl = std::make_shared<Impl>();
  impl->shape = ref().shape;
  impl->data = ref().data;
  impl->requires_grad = ref().requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::detached() const {
  Tensor t = clone();
  t.set_requires_grad(false);
  return t;
}

void Tensor::check_finite(const char* what) const {
  for (double v : ref().data)
    if (!std::isfinite(v))
      throw std::runtime_error(std::string("non-finite value in ") + what);
}

const void* Tensor::storage_id() const { return impl_.get(); }

}  // namespace unlearn::ad
