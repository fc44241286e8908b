#include "prism/datapanel/dataset.hpp"

#include <cmath>
#include <limits>

#include "prism/common/error.hpp"

namespace prism::data {
namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}

Dataset::Dataset(const Panel& panel, const SplitSpec& split, const DatasetOptions& options)
    : panel_(&panel),
      options_(options),
      split_(split),
      D_(panel.num_dates()),
      N_(panel.num_stocks()),
      C_(panel.num_features()),
      P_(panel.num_priors()),
      H_(options.horizons) {
  panel.validate();
  chronological_split(panel, split);
  if (options.lookback == 0 || options.horizons == 0 || options.prior_window == 0) {
    throw config_error("lookback, horizons, and prior_window must be >= 1");
  }
  if (options.main_horizon == 0 || options.main_horizon > options.horizons) {
    throw config_error("main_horizon must lie in [1, horizons]");
  }

  stats_ = fit_feature_stats(panel, split.train);
  x_.assign(D_ * N_ * C_, 0.0);
  for (std::size_t cell = 0; cell < D_ * N_; ++cell) {
    if (!panel.member[cell]) continue;
    for (std::size_t c = 0; c < C_; ++c) {
      const double v = panel.features[cell * C_ + c];
      x_[cell * C_ + c] = std::isnan(v) ? 0.0 : robust_zscore(v, stats_.median[c], stats_.mad[c]);
    }
  }

  const std::size_t W = options.prior_window;
  priors_.assign(D_ * P_, kNaN);
  for (std::size_t t = W; t < D_; ++t) {
    const auto f = prior_factor_window(panel, t, W);
    std::copy(f.begin(), f.end(), priors_.begin() + static_cast<long>(t * P_));
  }
  stats_.prior_mean.assign(P_, 0.0);
  stats_.prior_std.assign(P_, 1.0);
  for (std::size_t j = 0; j < P_; ++j) {
    double sum = 0, sq = 0;
    std::size_t n = 0;
    for (std::size_t t = std::max(W, split.train.begin); t < split.train.end; ++t) {
      const double v = priors_[t * P_ + j];
      if (std::isnan(v)) continue;
      sum += v;
      sq += v * v;
      ++n;
    }
    if (n == 0) continue;
    const double mean = sum / static_cast<double>(n);
    const double var = std::max(0.0, sq / static_cast<double>(n) - mean * mean);
    stats_.prior_mean[j] = mean;
    stats_.prior_std[j] = std::sqrt(var) > 1e-12 ? std::sqrt(var) : 1.0;
  }
  for (std::size_t t = 0; t < D_; ++t) {
    for (std::size_t j = 0; j < P_; ++j) {
      double& v = priors_[t * P_ + j];
      if (!std::isnan(v)) v = (v - stats_.prior_mean[j]) / stats_.prior_std[j];
    }
  }

  const std::size_t T = options.lookback;
  usable_.assign(D_ * N_, 0);
  for (std::size_t i = 0; i < N_; ++i) {
    std::size_t run = 0;
    for (std::size_t t = 0; t < D_; ++t) {
      run = panel.member[panel.cell(t, i)] ? run + 1 : 0;
      usable_[t * N_ + i] = run >= T;
    }
  }

  targets_.assign(D_ * N_ * H_, kNaN);
  ranked_.assign(D_ * N_ * H_, kNaN);
  std::vector<double> column(N_);
  for (std::size_t h = 1; h <= H_; ++h) {
    const auto y = forward_returns(panel.open, panel.close, D_, N_, h);
    for (std::size_t t = 0; t < D_; ++t) {
      for (std::size_t i = 0; i < N_; ++i) {
        const double v = y[t * N_ + i];
        targets_[(t * N_ + i) * H_ + h - 1] = v;
        column[i] = usable_[t * N_ + i] ? v : kNaN;
      }
      std::size_t valid = 0;
      for (double v : column) valid += !std::isnan(v);
      if (valid < 2) continue;
      const auto ranked = cs_rank_norm(column);
      for (std::size_t i = 0; i < N_; ++i) ranked_[(t * N_ + i) * H_ + h - 1] = ranked[i];
    }
  }
}

bool Dataset::date_ready(std::size_t t) const {
  return t < D_ && t + 1 >= options_.lookback && t >= options_.prior_window;
}

std::vector<std::size_t> Dataset::stocks_at(std::size_t t, bool need_target) const {
  std::vector<std::size_t> out;
  if (!date_ready(t)) return out;
  for (std::size_t i = 0; i < N_; ++i) {
    if (!usable_[t * N_ + i]) continue;
    if (need_target && std::isnan(ranked_target(t, i, options_.main_horizon))) continue;
    out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> Dataset::dates_in(DateRange range, bool need_target,
                                           std::size_t min_stocks) const {
  std::vector<std::size_t> out;
  for (std::size_t t = range.begin; t < range.end && t < D_; ++t) {
    if (date_ready(t) && stocks_at(t, need_target).size() >= min_stocks) out.push_back(t);
  }
  return out;
}

std::vector<double> Dataset::window(std::size_t t, const std::vector<std::size_t>& stocks) const {
  const std::size_t T = options_.lookback;
  if (t + 1 < T) throw data_error("window: date index precedes a full lookback");
  std::vector<double> out(stocks.size() * T * C_);
  for (std::size_t k = 0; k < stocks.size(); ++k) {
    for (std::size_t tau = 0; tau < T; ++tau) {
      const std::size_t src = ((t + 1 - T + tau) * N_ + stocks[k]) * C_;
      std::copy(x_.begin() + static_cast<long>(src), x_.begin() + static_cast<long>(src + C_),
                out.begin() + static_cast<long>((k * T + tau) * C_));
    }
  }
  return out;
}

std::vector<double> Dataset::priors(std::size_t t) const {
  return {priors_.begin() + static_cast<long>(t * P_), priors_.begin() + static_cast<long>((t + 1) * P_)};
}

}  // namespace prism::data
