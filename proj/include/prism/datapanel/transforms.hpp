#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "prism/datapanel/panel.hpp"

namespace prism::data {

inline constexpr double kMadScale = 1.4826;
inline constexpr double kMadFloor = 1e-8;
inline constexpr double kZClip = 3.0;

// Half-open range of date indices.
struct DateRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool empty() const { return end <= begin; }
  bool contains(std::size_t d) const { return d >= begin && d < end; }
};

struct SplitSpec {
  DateRange train;
  DateRange valid;
  DateRange test;
};

// Splits n dates by leading fractions; the test range takes the remainder.
SplitSpec split_by_fraction(std::size_t n_dates, double train_fraction, double valid_fraction);
// Splits at the first date strictly after train_end / valid_end (ISO strings).
SplitSpec split_by_dates(const Panel& panel, const std::string& train_end,
                         const std::string& valid_end);

struct PanelView {
  const Panel* panel = nullptr;
  DateRange range;
  std::size_t num_dates() const { return range.size(); }
  const std::string& date(std::size_t k) const { return panel->dates[range.begin + k]; }
};

// Validates the spec (non-empty, ordered, non-overlapping, inside the panel)
// and returns train/valid/test views. Throws a config error otherwise.
std::vector<PanelView> chronological_split(const Panel& panel, const SplitSpec& spec);

struct NormalizationStats {
  std::vector<double> median;      // [C]
  std::vector<double> mad;         // [C]
  std::vector<double> prior_mean;  // [P]
  std::vector<double> prior_std;   // [P]
};

double robust_zscore(double x, double median, double mad);
// Per-feature robust statistics over member cells of the train range only.
NormalizationStats fit_feature_stats(const Panel& panel, DateRange train);

// Percentile (rank - 0.5) / n with average ranks, standardized to zero mean
// and unit population variance. NaN entries are skipped and stay NaN. With a
// single valid entry the output is 0 and a warning is logged.
std::vector<double> cs_rank_norm(std::span<const double> values);

// y[t, i] = (close[t+h] - open[t+1]) / open[t+1]; NaN where t + h is past the
// panel or any price involved is missing. Throws a data error on a
// non-positive price.
std::vector<double> forward_returns(const std::vector<double>& open,
                                    const std::vector<double>& close, std::size_t n_dates,
                                    std::size_t n_stocks, std::size_t h);

// Compounded factor return over dates t-T .. t-1. Requires t >= T; throws a
// data error when any return in the window is <= -1.
std::vector<double> prior_factor_window(const Panel& panel, std::size_t t, std::size_t T);

}  // namespace prism::data
