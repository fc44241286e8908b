#pragma once

#include <cstddef>
#include <vector>

#include "prism/diffcore/nn.hpp"

namespace prism::train {

struct AdamWSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Decoupled weight decay Adam with bias-corrected moments. The parameter set
// is fixed at construction; every one of them must be trainable.
class AdamW {
 public:
  AdamW() = default;
  AdamW(nn::Params params, AdamWSettings settings);

  // Applies one update at learning rate lr. A step whose gradients contain a
  // non-finite value is skipped and counted. Throws a state error if any
  // parameter has been frozen since construction.
  bool step(double lr);
  void zero_grad();

  std::size_t steps() const { return t_; }
  std::size_t skipped() const { return skipped_; }
  const nn::Params& params() const { return params_; }

 private:
  nn::Params params_;
  AdamWSettings settings_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
  std::size_t skipped_ = 0;
};

// Scales every gradient by max_norm / g when the global l2 norm g exceeds
// max_norm. Returns g.
double clip_global_norm(const nn::Params& params, double max_norm);

// Linear decay from 1 at epoch 0 to `floor` at max_epochs, constant after.
double lr_multiplier(std::size_t epoch, std::size_t max_epochs, double floor = 0.1);

// Tracks the best validation value and signals a stop after `patience`
// consecutive epochs without strict improvement.
class EarlyStopping {
 public:
  enum class Mode { minimize, maximize };
  EarlyStopping(std::size_t patience, Mode mode) : patience_(patience), mode_(mode) {}

  // Returns true when value is a new best.
  bool update(double value);
  bool should_stop() const { return stale_ >= patience_; }
  double best() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }

 private:
  std::size_t patience_;
  Mode mode_;
  bool has_best_ = false;
  double best_ = 0;
  std::size_t best_epoch_ = 0;
  std::size_t epoch_ = 0;
  std::size_t stale_ = 0;
};

}  // namespace prism::train
