#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "prism/datapanel/panel.hpp"

namespace prism::data {

struct SyntheticConfig {
  std::size_t n_stocks = 200;
  std::size_t n_dates = 500;
  std::size_t n_clusters = 4;
  double snr = 1.0;
  std::size_t n_factors = 5;
  std::size_t n_features = 8;
  std::uint64_t seed = 0;

  // Throws a config error on n_clusters > n_stocks, snr <= 0, or too few
  // feature columns to hold the signal, lagged return, and one cluster column.
  void validate() const;
};

struct SyntheticTruth {
  std::vector<std::size_t> cluster;        // [N]
  std::vector<std::size_t> cluster_factor;  // [G] factor each cluster loads on most
  std::vector<double> cluster_slope;        // [G] signal slope a_g (> 0)
  std::vector<double> loadings;             // [N, P]
  std::vector<double> signal;               // [D, N] expected next-day return
  std::vector<double> returns;              // [D, N] realized daily return (0 on the first date)
  std::vector<double> achievable_ic;        // [D] Spearman(signal, 5-day return); NaN at the tail
  std::vector<double> planted_rho;          // [G] Spearman of cluster return vs its factor
  double mean_achievable_ic = 0.0;
};

struct SyntheticMarket {
  Panel panel;
  SyntheticTruth truth;
};

// Planted-structure market. Stocks split evenly (then shuffled) into
// clusters; each cluster loads mostly on one factor and has its own positive
// slope on a persistent stock signal. Next-day return:
//   r[t+1, i] = kappa * a_g * s[t, i] + (B_i . f[t+1] + sigma * eps) / sqrt(snr)
// Features: column 0 is s plus observation noise, column 1 the latest daily
// return. Every further column carries the stock's cluster process times a
// fixed cluster-specific sign, plus noise.
// Prices compound from the returns with open[t] = close[t-1].
SyntheticMarket synthetic_generate(const SyntheticConfig& cfg);

// truth.csv (ticker,cluster) and truth_ic.csv (date,achievable_ic).
void write_truth(const SyntheticMarket& market, const std::string& dir);
std::vector<std::size_t> read_truth_clusters(const std::string& path,
                                             const std::vector<std::string>& tickers);

}  // namespace prism::data
