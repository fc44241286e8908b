#include "prism/training/optimizer.hpp"

#include <algorithm>
#include <cmath>

#include "prism/common/error.hpp"
#include "prism/common/log.hpp"

namespace prism::train {

AdamW::AdamW(nn::Params params, AdamWSettings settings) : params_(std::move(params)), settings_(settings) {
  for (auto& p : params_) {
    if (p.tensor.frozen()) throw Error(ErrorCategory::state, "AdamW: parameter " + p.name + " is frozen");
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

bool AdamW::step(double lr) {
  for (const auto& p : params_) {
    if (p.tensor.frozen()) {
      throw Error(ErrorCategory::state, "AdamW: refusing to update frozen parameter " + p.name);
    }
  }
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) continue;
    for (auto g : p.tensor.grad()) {
      if (!std::isfinite(g)) {
        ++skipped_;
        log::warn("AdamW: non-finite gradient in " + p.name + ", step skipped (" + std::to_string(skipped_) +
                  " so far)");
        return false;
      }
    }
  }
  ++t_;
  const auto& s = settings_;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    nn::Tensor w = params_[k].tensor;
    auto values = w.mutable_values();
    const bool has_grad = w.has_grad();
    auto grad = w.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = has_grad ? static_cast<double>(grad[i]) : 0.0;
      m[i] = s.beta1 * m[i] + (1 - s.beta1) * g;
      v[i] = s.beta2 * v[i] + (1 - s.beta2) * g * g;
      double x = static_cast<double>(values[i]);
      x -= lr * s.weight_decay * x;
      x -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + s.eps);
      values[i] = static_cast<nn::Real>(x);
    }
  }
  return true;
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

double clip_global_norm(const nn::Params& params, double max_norm) {
  if (!(max_norm > 0)) throw std::invalid_argument("clip_global_norm: max_norm must be > 0");
  double sq = 0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (auto g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto p : params) {
      if (!p.tensor.has_grad()) continue;
      for (auto& g : p.tensor.mutable_grad()) g = static_cast<nn::Real>(g * scale);
    }
  }
  return norm;
}

double lr_multiplier(std::size_t epoch, std::size_t max_epochs, double floor) {
  if (max_epochs == 0 || epoch >= max_epochs) return floor;
  const double frac = static_cast<double>(epoch) / static_cast<double>(max_epochs);
  return 1.0 - (1.0 - floor) * frac;
}

bool EarlyStopping::update(double value) {
  const std::size_t epoch = epoch_++;
  const bool better = !has_best_ || (std::isfinite(value) && (mode_ == Mode::minimize ? value < best_ : value > best_));
  if (better && std::isfinite(value)) {
    has_best_ = true;
    best_ = value;
    best_epoch_ = epoch;
    stale_ = 0;
    return true;
  }
  ++stale_;
  return false;
}

}  // namespace prism::train
