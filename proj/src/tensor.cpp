#include "sfr/tensor.hpp"

#include <algorithm>
#include <sstream>

SFR_BEGIN_NAMESPACE

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::size_t Tensor::rows() const { return impl_->shape.size() == 2 ? impl_->shape[0] : 1; }

std::size_t Tensor::cols() const { return impl_->shape.size() == 2 ? impl_->shape[1] : numel(); }

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0, requires_grad); }

Tensor Tensor::full(Shape shape, Scalar value, bool requires_grad) {
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape));
  auto impl = std::make_shared<Impl>();
  impl->values.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<Scalar> values, bool requires_grad) {
  if (values.size() != shape_numel(shape))
    throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
                         shape_string(shape));
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape));
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->values = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(Scalar value, bool requires_grad) { return full({1}, value, requires_grad); }

Scalar Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape()));
  return impl_->values[0];
}

std::span<Scalar> Tensor::grad() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), 0);
  return impl_->grad;
}

void Tensor::zero_grad() const { std::fill(impl_->grad.begin(), impl_->grad.end(), Scalar(0)); }

Tensor Tensor::clone() const {
  auto impl = std::make_shared<Impl>(*impl_);
  return Tensor(std::move(impl));
}

void Tape::record(const Tensor& output, std::function<void()> backward) {
  if (consumed_) throw StateError("cannot record onto a tape that has already been replayed");
  entries_.push_back({output.id(), std::move(backward)});
}

void Tape::backward(const Tensor& root) {
  if (consumed_) throw StateError("backward already ran on this tape; build a new tape for another pass");
  if (root.numel() != 1) throw DimensionError("backward root must be a scalar, got " + shape_string(root.shape()));
  const bool on_tape = std::any_of(entries_.begin(), entries_.end(),
                                   [&](const Entry& e) { return e.output == root.id(); });
  if (!on_tape) throw StateError("backward root was not produced by an operation on this tape");
  consumed_ = true;
  Tensor r = root;
  r.grad()[0] += 1;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
}

SFR_END_NAMESPACE
