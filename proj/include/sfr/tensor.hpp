#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sfr/common.hpp"

SFR_BEGIN_NAMESPACE

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major tensor handle. Copies share storage (like a framework
/// tensor handle); use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Scalar value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<Scalar> values, bool requires_grad = false);
  static Tensor scalar(Scalar value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t numel() const { return impl_->values.size(); }
  /// Matrix view: 2-D tensors are rows x cols, anything else is one row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const Scalar> values() const { return impl_->values; }
  std::span<Scalar> mutable_values() { return impl_->values; }
  Scalar item() const;
  Scalar at(std::size_t i) const { return impl_->values[i]; }
  Scalar at(std::size_t r, std::size_t c) const { return impl_->values[r * cols() + c]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  bool has_grad() const { return !impl_->grad.empty(); }
  /// Allocates a zeroed gradient buffer if absent and returns it. The
  /// buffer belongs to the shared storage, so const handles may write it.
  std::span<Scalar> grad() const;
  void zero_grad() const;

  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  const void* id() const { return impl_.get(); }

 private:
  struct Impl {
    Shape shape;
    std::vector<Scalar> values;
    std::vector<Scalar> grad;
    bool requires_grad = false;
  };
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<Impl> impl_;
};

/// Ordered record of differentiable operations. Ops append a backward
/// closure when recording is enabled and any input requires a gradient.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return entries_.size(); }

  void record(const Tensor& output, std::function<void()> backward);

  /// Seeds d(root)/d(root) = 1 and runs every recorded closure in reverse.
  /// A tape can be replayed at most once.
  void backward(const Tensor& root);

 private:
  struct Entry {
    const void* output;
    std::function<void()> backward;
  };
  bool recording_;
  bool consumed_ = false;
  std::vector<Entry> entries_;
};

SFR_END_NAMESPACE
