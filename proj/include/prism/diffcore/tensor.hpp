#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace prism::ad {

#ifdef PRISM_VQ_USE_FLOAT32
using Real = float;
#else
using Real = double;
#endif

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool frozen = false;
  bool on_tape = false;  // produced by a recorded op (non-leaf)

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), Real{0});
  }
};

// Dense row-major array with an optional gradient slot. Copies share storage,
// like a handle; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, Real fill, bool requires_grad = false);
  static Tensor from(const Shape& shape, std::vector<Real> values,
                     bool requires_grad = false);
  static Tensor scalar(Real v, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim() const { return impl_->shape.size(); }
  std::size_t size(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->value.size(); }

  std::span<const Real> values() const { return impl_->value; }
  std::span<Real> mutable_values() { return impl_->value; }
  const std::vector<Real>& vec() const { return impl_->value; }
  Real operator[](std::size_t i) const { return impl_->value[i]; }
  Real item() const;

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const Real> grad() const { return impl_->grad; }
  std::span<Real> mutable_grad() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  void zero_grad();

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  bool frozen() const { return impl_->frozen; }
  // A frozen tensor never requires grad; optimizers refuse to update it.
  void set_frozen(bool on);

  // Same values, no gradient connection.
  Tensor detach() const;
  Tensor clone() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& shared() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

using BackwardFn = std::function<void()>;

// Records primitive operations in execution order so reverse-mode
// accumulation can replay them. One tape per thread.
class Tape {
 public:
  struct Record {
    std::shared_ptr<TensorImpl> output;
    BackwardFn backward;
  };

  static Tape& current();

  void record(const Tensor& output, BackwardFn fn);
  // Seeds d(loss)/d(loss) = 1 and propagates to every reachable leaf.
  // Intermediate gradients are reset on entry so repeated calls accumulate
  // into leaves only.
  void backward(const Tensor& loss);
  void clear();
  std::size_t size() const { return records_.size(); }

 private:
  std::vector<Record> records_;
};

bool grad_enabled();

// Disables recording for its lifetime (inference paths).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

void backward(const Tensor& loss);

}  // namespace prism::ad
