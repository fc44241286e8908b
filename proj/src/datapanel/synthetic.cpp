#include "prism/datapanel/synthetic.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <unordered_map>

#include "prism/common/csv.hpp"
#include "prism/common/error.hpp"
#include "prism/common/rng.hpp"
#include "prism/datapanel/transforms.hpp"

namespace prism::data {
namespace {

constexpr double kFactorVol = 0.01;
constexpr double kIdioVol = 0.02;
constexpr double kSignalScale = 0.005;
constexpr double kSignalPersistence = 0.9;
constexpr double kClusterPersistence = 0.9;
constexpr double kSignalObsNoise = 0.3;
constexpr double kClusterObsNoise = 0.5;

// Civil date from days since 1970-01-01 (proleptic Gregorian).
std::string civil_date(long days) {
  days += 719468;
  const long era = (days >= 0 ? days : days - 146096) / 146097;
  const long doe = days - era * 146097;
  const long yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const long doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const long mp = (5 * doy + 2) / 153;
  const long d = doy - (153 * mp + 2) / 5 + 1;
  const long m = mp < 10 ? mp + 3 : mp - 9;
  const long y = yoe + era * 400 + (m <= 2);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%04d-%02d-%02d", static_cast<int>(y), static_cast<int>(m),
                static_cast<int>(d));
  return buf;
}

// Weekdays starting 2015-01-02 (a Friday).
std::vector<std::string> business_days(std::size_t n) {
  std::vector<std::string> out;
  long day = 16437;  // 2015-01-02
  while (out.size() < n) {
    const long weekday = (day + 4) % 7;  // 0 = Sunday
    if (weekday != 0 && weekday != 6) out.push_back(civil_date(day));
    ++day;
  }
  return out;
}

std::string padded(const char* prefix, std::size_t k, int width) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s%0*zu", prefix, width, k);
  return buf;
}

double spearman_of(const std::vector<double>& a, const std::vector<double>& b) {
  const auto ra = cs_rank_norm(a), rb = cs_rank_norm(b);
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += ra[i] * rb[i];
  return acc / static_cast<double>(a.size());
}

}  // namespace

void SyntheticConfig::validate() const {
  if (n_stocks < 2) throw config_error("synthetic: need at least 2 stocks");
  if (n_clusters == 0 || n_clusters > n_stocks) {
    throw config_error("synthetic: n_clusters must lie in [1, n_stocks]");
  }
  if (!(snr > 0)) throw config_error("synthetic: snr must be > 0");
  if (n_features < 3) throw config_error("synthetic: need at least 3 feature columns");
  if (n_factors == 0) throw config_error("synthetic: need at least 1 factor");
  if (n_dates < 2) throw config_error("synthetic: need at least 2 dates");
}

SyntheticMarket synthetic_generate(const SyntheticConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const std::size_t D = cfg.n_dates, N = cfg.n_stocks, G = cfg.n_clusters;
  const std::size_t P = cfg.n_factors, C = cfg.n_features;
  const double noise_scale = std::isinf(cfg.snr) ? 0.0 : 1.0 / std::sqrt(cfg.snr);

  SyntheticMarket m;
  Panel& p = m.panel;
  SyntheticTruth& truth = m.truth;
  p.dates = business_days(D);
  for (std::size_t i = 0; i < N; ++i) p.tickers.push_back(padded("S", i + 1, 4));
  for (std::size_t c = 0; c < C; ++c) p.feature_names.push_back(padded("f", c + 1, 3));
  for (std::size_t j = 0; j < P; ++j) p.prior_names.push_back(padded("p", j + 1, 2));

  truth.cluster.resize(N);
  for (std::size_t i = 0; i < N; ++i) truth.cluster[i] = i % G;
  rng.shuffle(truth.cluster);
  for (std::size_t g = 0; g < G; ++g) {
    truth.cluster_factor.push_back(g % P);
    truth.cluster_slope.push_back(G == 1 ? 1.0 : 0.5 + static_cast<double>(g) / static_cast<double>(G - 1));
  }

  truth.loadings.assign(N * P, 0.0);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < P; ++j) {
      const bool dominant = j == truth.cluster_factor[truth.cluster[i]];
      truth.loadings[i * P + j] = dominant ? 1.5 + 0.2 * rng.normal() : 0.2 * rng.normal();
    }
  }

  p.factor_returns.assign(D * P, 0.0);
  for (auto& f : p.factor_returns) f = kFactorVol * rng.normal();

  const double innov = std::sqrt(1 - kSignalPersistence * kSignalPersistence);
  std::vector<double> s(D * N);
  for (std::size_t i = 0; i < N; ++i) s[i] = rng.normal();
  for (std::size_t t = 1; t < D; ++t) {
    for (std::size_t i = 0; i < N; ++i) {
      s[t * N + i] = kSignalPersistence * s[(t - 1) * N + i] + innov * rng.normal();
    }
  }
  truth.signal.assign(D * N, 0.0);
  for (std::size_t t = 0; t < D; ++t) {
    for (std::size_t i = 0; i < N; ++i) {
      truth.signal[t * N + i] = kSignalScale * truth.cluster_slope[truth.cluster[i]] * s[t * N + i];
    }
  }

  std::vector<double> ret(D * N, 0.0);
  for (std::size_t t = 1; t < D; ++t) {
    for (std::size_t i = 0; i < N; ++i) {
      double common = 0;
      for (std::size_t j = 0; j < P; ++j) common += truth.loadings[i * P + j] * p.factor_returns[t * P + j];
      const double eps = rng.normal();
      ret[t * N + i] = truth.signal[(t - 1) * N + i] + noise_scale * (common + kIdioVol * eps);
    }
  }

  truth.returns = ret;
  p.open.assign(D * N, 0.0);
  p.close.assign(D * N, 0.0);
  p.member.assign(D * N, 1);
  for (std::size_t i = 0; i < N; ++i) {
    p.close[i] = 20.0 + 80.0 * rng.uniform();
    p.open[i] = p.close[i];
    for (std::size_t t = 1; t < D; ++t) {
      p.open[t * N + i] = p.close[(t - 1) * N + i];
      p.close[t * N + i] = p.open[t * N + i] * (1.0 + ret[t * N + i]);
    }
  }

  const double cl_innov = std::sqrt(1 - kClusterPersistence * kClusterPersistence);
  // One shared process per cluster. Every member carries it in all cluster
  // columns with a fixed cluster-specific sign pattern (Walsh rows), so the
  // pattern survives per-window normalization and identifies the cluster.
  auto pattern = [](std::size_t g, std::size_t k) {
    return std::popcount(static_cast<unsigned>(g & k)) % 2 == 0 ? 1.0 : -1.0;
  };
  std::vector<double> u(G);
  for (auto& v : u) v = rng.normal();
  p.features.assign(D * N * C, 0.0);
  for (std::size_t t = 0; t < D; ++t) {
    if (t > 0) {
      for (auto& v : u) v = kClusterPersistence * v + cl_innov * rng.normal();
    }
    for (std::size_t i = 0; i < N; ++i) {
      double* row = &p.features[(t * N + i) * C];
      row[0] = s[t * N + i] + kSignalObsNoise * rng.normal();
      row[1] = ret[t * N + i];
      const std::size_t g = truth.cluster[i];
      for (std::size_t k = 0; k + 2 < C; ++k) {
        row[2 + k] = pattern(g, k) * u[g] + kClusterObsNoise * rng.normal();
      }
    }
  }

  const auto y5 = forward_returns(p.open, p.close, D, N, 5);
  truth.achievable_ic.assign(D, std::numeric_limits<double>::quiet_NaN());
  double total = 0;
  std::size_t count = 0;
  std::vector<double> a(N), b(N);
  for (std::size_t t = 0; t + 5 < D; ++t) {
    for (std::size_t i = 0; i < N; ++i) {
      a[i] = truth.signal[t * N + i];
      b[i] = y5[t * N + i];
    }
    truth.achievable_ic[t] = spearman_of(a, b);
    total += truth.achievable_ic[t];
    ++count;
  }
  truth.mean_achievable_ic = count ? total / static_cast<double>(count) : 0.0;

  // Population correlation of the equal-weight cluster return with its
  // dominant factor, mapped to Spearman under joint normality.
  for (std::size_t g = 0; g < G; ++g) {
    std::vector<double> mean_loading(P, 0.0);
    std::size_t n_g = 0;
    for (std::size_t i = 0; i < N; ++i) {
      if (truth.cluster[i] != g) continue;
      ++n_g;
      for (std::size_t j = 0; j < P; ++j) mean_loading[j] += truth.loadings[i * P + j];
    }
    double factor_var = 0;
    for (auto& l : mean_loading) {
      l /= static_cast<double>(n_g);
      factor_var += l * l;
    }
    const double a_g = kSignalScale * truth.cluster_slope[g];
    const double var = a_g * a_g / static_cast<double>(n_g) +
                       noise_scale * noise_scale *
                           (kFactorVol * kFactorVol * factor_var + kIdioVol * kIdioVol / static_cast<double>(n_g));
    const double cov = noise_scale * mean_loading[truth.cluster_factor[g]] * kFactorVol * kFactorVol;
    const double pearson = var > 0 ? cov / (kFactorVol * std::sqrt(var)) : 0.0;
    truth.planted_rho.push_back(6.0 / std::numbers::pi * std::asin(pearson / 2.0));
  }
  return m;
}

void write_truth(const SyntheticMarket& market, const std::string& dir) {
  const Panel& p = market.panel;
  {
    csv::Writer w(dir + "/truth.csv", {"ticker", "cluster"});
    for (std::size_t i = 0; i < p.num_stocks(); ++i) {
      w.cell(p.tickers[i]).cell(market.truth.cluster[i]);
      w.end_row();
    }
    w.close();
  }
  {
    csv::Writer w(dir + "/truth_ic.csv", {"date", "achievable_ic"});
    for (std::size_t t = 0; t < p.num_dates(); ++t) {
      w.cell(p.dates[t]).cell(market.truth.achievable_ic[t]);
      w.end_row();
    }
    w.close();
  }
}

std::vector<std::size_t> read_truth_clusters(const std::string& path,
                                             const std::vector<std::string>& tickers) {
  const auto table = csv::read(path);
  const std::size_t tc = table.column("ticker"), cc = table.column("cluster");
  std::unordered_map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < tickers.size(); ++i) pos[tickers[i]] = i;
  std::vector<std::size_t> out(tickers.size(), std::numeric_limits<std::size_t>::max());
  for (const auto& row : table.rows) {
    auto it = pos.find(row.cells[tc]);
    if (it == pos.end()) continue;
    const double v = csv::parse_number(row.cells[cc], path, row.line, "cluster");
    if (!(v >= 0)) throw data_error(path + ":" + std::to_string(row.line) + ": bad cluster id");
    out[it->second] = static_cast<std::size_t>(v);
  }
  return out;
}

}  // namespace prism::data
