#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "prism/datapanel/panel.hpp"
#include "prism/datapanel/transforms.hpp"

namespace prism::data {

struct DatasetOptions {
  std::size_t lookback = 20;      // T
  std::size_t horizons = 9;       // N_h
  std::size_t main_horizon = 5;   // Delta
  std::size_t prior_window = 20;  // window of the compounded prior factors
};

// Model-ready panel: normalized features, standardized priors, forward-return
// targets, and per-cell usability. Immutable once built.
class Dataset {
 public:
  Dataset(const Panel& panel, const SplitSpec& split, const DatasetOptions& options);

  const Panel& panel() const { return *panel_; }
  const DatasetOptions& options() const { return options_; }
  const SplitSpec& split() const { return split_; }
  const NormalizationStats& stats() const { return stats_; }

  std::size_t num_dates() const { return D_; }
  std::size_t num_stocks() const { return N_; }
  std::size_t num_features() const { return C_; }
  std::size_t num_priors() const { return P_; }

  // True when the lookback window and the prior window both fit before t.
  bool date_ready(std::size_t t) const;
  // Member on every date of the lookback window ending at t.
  bool usable(std::size_t t, std::size_t i) const { return usable_[t * N_ + i] != 0; }
  // Stocks usable at t; with need_target, only those whose main target exists.
  std::vector<std::size_t> stocks_at(std::size_t t, bool need_target) const;
  // Dates of a range that are ready and have at least min_stocks stocks.
  std::vector<std::size_t> dates_in(DateRange range, bool need_target,
                                    std::size_t min_stocks = 2) const;

  // Lookback window of normalized features, [stocks.size(), T, C] row-major.
  std::vector<double> window(std::size_t t, const std::vector<std::size_t>& stocks) const;
  // Standardized prior factors at t, [P].
  std::vector<double> priors(std::size_t t) const;
  // Raw forward return at horizon h (1-based); NaN when undefined.
  double target(std::size_t t, std::size_t i, std::size_t h) const {
    return targets_[(t * N_ + i) * H_ + (h - 1)];
  }
  // Cross-sectionally rank-normalized target among usable stocks.
  double ranked_target(std::size_t t, std::size_t i, std::size_t h) const {
    return ranked_[(t * N_ + i) * H_ + (h - 1)];
  }
  double normalized_feature(std::size_t t, std::size_t i, std::size_t c) const {
    return x_[(t * N_ + i) * C_ + c];
  }

 private:
  const Panel* panel_;
  DatasetOptions options_;
  SplitSpec split_;
  NormalizationStats stats_;
  std::size_t D_, N_, C_, P_, H_;
  std::vector<double> x_;              // [D, N, C]
  std::vector<std::uint8_t> usable_;   // [D, N]
  std::vector<double> priors_;         // [D, P], NaN before the window fits
  std::vector<double> targets_;        // [D, N, H]
  std::vector<double> ranked_;         // [D, N, H]
};

}  // namespace prism::data
