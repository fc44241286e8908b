#include "prism/diffcore/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace prism::ad {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, Real{0}, requires_grad);
}

Tensor Tensor::full(const Shape& shape, Real fill, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->value.assign(shape_numel(shape), fill);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(const Shape& shape, std::vector<Real> values, bool requires_grad) {
  if (values.size() != shape_numel(shape)) {
    throw std::invalid_argument("Tensor::from: " + std::to_string(values.size()) +
                                " values for shape " + shape_to_string(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->value = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(Real v, bool requires_grad) {
  return from(Shape{1}, {v}, requires_grad);
}

Real Tensor::item() const {
  if (numel() != 1) {
    throw std::invalid_argument("Tensor::item on shape " + shape_to_string(shape()));
  }
  return impl_->value[0];
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), Real{0});
}

void Tensor::set_frozen(bool on) {
  impl_->frozen = on;
  if (on) impl_->requires_grad = false;
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->value = impl_->value;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<TensorImpl>(*impl_);
  impl->on_tape = false;
  return Tensor(std::move(impl));
}

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

void Tape::record(const Tensor& output, BackwardFn fn) {
  output.impl()->on_tape = true;
  records_.push_back(Record{output.shared(), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar tensor");
  }
  for (auto& rec : records_) rec.output->grad.clear();
  if (!loss.requires_grad()) return;  // constant loss: nothing to propagate
  TensorImpl* root = loss.impl();
  if (root->on_tape) root->grad.clear();
  root->ensure_grad();
  root->grad[0] += Real{1};
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // not reachable from the loss
    it->backward();
  }
}

void Tape::clear() { records_.clear(); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Tensor& loss) { Tape::current().backward(loss); }

}  // namespace prism::ad
