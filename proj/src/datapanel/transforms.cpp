#include "prism/datapanel/transforms.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "prism/common/error.hpp"
#include "prism/common/log.hpp"

namespace prism::data {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double median_of(std::vector<double>& v) {
  if (v.empty()) return 0.0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<long>(mid), v.end());
  const double upper = v[mid];
  if (v.size() % 2 == 1) return upper;
  const double lower = *std::max_element(v.begin(), v.begin() + static_cast<long>(mid));
  return 0.5 * (lower + upper);
}

std::string range_text(const char* name, DateRange r) {
  return std::string(name) + " [" + std::to_string(r.begin) + ", " + std::to_string(r.end) + ")";
}

}  // namespace

SplitSpec split_by_fraction(std::size_t n, double train_fraction, double valid_fraction) {
  if (train_fraction <= 0 || valid_fraction < 0 || train_fraction + valid_fraction >= 1) {
    throw config_error("split fractions must satisfy 0 < train, 0 <= valid, train + valid < 1");
  }
  const auto train_end = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  const auto valid_end =
      train_end + static_cast<std::size_t>(std::llround(valid_fraction * static_cast<double>(n)));
  return {{0, train_end}, {train_end, valid_end}, {valid_end, n}};
}

SplitSpec split_by_dates(const Panel& panel, const std::string& train_end,
                         const std::string& valid_end) {
  auto after = [&](const std::string& date) {
    return static_cast<std::size_t>(
        std::upper_bound(panel.dates.begin(), panel.dates.end(), date) - panel.dates.begin());
  };
  const std::size_t a = after(train_end), b = after(valid_end);
  return {{0, a}, {a, b}, {b, panel.num_dates()}};
}

std::vector<PanelView> chronological_split(const Panel& panel, const SplitSpec& spec) {
  const DateRange parts[3] = {spec.train, spec.valid, spec.test};
  const char* names[3] = {"train", "valid", "test"};
  for (int k = 0; k < 3; ++k) {
    if (parts[k].empty()) throw config_error(std::string("empty ") + names[k] + " split");
    if (parts[k].end > panel.num_dates()) {
      throw config_error(range_text(names[k], parts[k]) + " exceeds the panel's " +
                         std::to_string(panel.num_dates()) + " dates");
    }
    if (k > 0 && parts[k].begin < parts[k - 1].end) {
      throw config_error(range_text(names[k], parts[k]) + " overlaps or precedes " +
                         range_text(names[k - 1], parts[k - 1]));
    }
  }
  return {{&panel, spec.train}, {&panel, spec.valid}, {&panel, spec.test}};
}

double robust_zscore(double x, double median, double mad) {
  const double z = (x - median) / (kMadScale * std::max(mad, kMadFloor));
  return std::clamp(z, -kZClip, kZClip);
}

NormalizationStats fit_feature_stats(const Panel& panel, DateRange train) {
  const std::size_t N = panel.num_stocks(), C = panel.num_features();
  NormalizationStats stats;
  stats.median.assign(C, 0.0);
  stats.mad.assign(C, 0.0);
  std::vector<double> column;
  for (std::size_t c = 0; c < C; ++c) {
    column.clear();
    for (std::size_t d = train.begin; d < train.end; ++d) {
      for (std::size_t i = 0; i < N; ++i) {
        if (!panel.member[panel.cell(d, i)]) continue;
        const double v = panel.feature(d, i, c);
        if (!std::isnan(v)) column.push_back(v);
      }
    }
    const double med = median_of(column);
    for (auto& v : column) v = std::abs(v - med);
    stats.median[c] = med;
    stats.mad[c] = median_of(column);
  }
  return stats;
}

std::vector<double> cs_rank_norm(std::span<const double> values) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isnan(values[i])) idx.push_back(i);
  }
  std::vector<double> out(values.size(), kNaN);
  const std::size_t n = idx.size();
  if (n == 0) return out;
  if (n == 1) {
    log::warn("cs_rank_norm: single valid entry on a date; emitting 0");
    out[idx[0]] = 0.0;
    return out;
  }
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> p(n);
  for (std::size_t lo = 0; lo < n;) {
    std::size_t hi = lo + 1;
    while (hi < n && values[idx[hi]] == values[idx[lo]]) ++hi;
    const double avg_rank = 0.5 * static_cast<double>(lo + 1 + hi);  // mean of lo+1 .. hi
    for (std::size_t k = lo; k < hi; ++k) p[k] = (avg_rank - 0.5) / static_cast<double>(n);
    lo = hi;
  }
  const double mean = std::accumulate(p.begin(), p.end(), 0.0) / static_cast<double>(n);
  double var = 0.0;
  for (double v : p) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  const double sd = std::sqrt(var);
  for (std::size_t k = 0; k < n; ++k) out[idx[k]] = sd > 0 ? (p[k] - mean) / sd : 0.0;
  return out;
}

std::vector<double> forward_returns(const std::vector<double>& open, const std::vector<double>& close,
                                    std::size_t D, std::size_t N, std::size_t h) {
  if (h == 0) throw config_error("forward_returns: horizon must be >= 1");
  std::vector<double> y(D * N, kNaN);
  for (std::size_t t = 0; t + h < D; ++t) {
    for (std::size_t i = 0; i < N; ++i) {
      const double o = open[(t + 1) * N + i];
      const double c = close[(t + h) * N + i];
      if (std::isnan(o) || std::isnan(c)) continue;
      if (o <= 0 || c <= 0) {
        throw data_error("non-positive price for stock " + std::to_string(i) + " near date index " +
                         std::to_string(t + 1));
      }
      y[t * N + i] = (c - o) / o;
    }
  }
  return y;
}

std::vector<double> prior_factor_window(const Panel& panel, std::size_t t, std::size_t T) {
  if (T == 0 || t < T || t >= panel.num_dates()) {
    throw data_error("prior_factor_window: need T <= t < D, got t=" + std::to_string(t) +
                     ", T=" + std::to_string(T));
  }
  const std::size_t P = panel.num_priors();
  std::vector<double> f(P, 0.0);
  for (std::size_t j = 0; j < P; ++j) {
    double acc = 0.0;
    for (std::size_t tau = t - T; tau < t; ++tau) {
      const double r = panel.factor_return(tau, j);
      if (r <= -1.0) {
        throw data_error("factor '" + panel.prior_names[j] + "' return " + std::to_string(r) +
                         " <= -1 on " + panel.dates[tau]);
      }
      acc += std::log1p(r);
    }
    f[j] = std::expm1(acc);
  }
  return f;
}

}  // namespace prism::data
