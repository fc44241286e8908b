#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace prism::eval {

// Average ranks with rank 1 = highest value.
std::vector<double> descending_ranks(std::span<const double> values);

// Pearson correlation of descending ranks. NaN when n < 2 or either vector
// is constant.
double spearman(std::span<const double> a, std::span<const double> b);

// One date's cross-section of predicted scores and realized returns.
struct CrossSection {
  std::string date;
  std::vector<double> scores;
  std::vector<double> returns;  // NaN entries are dropped pairwise
};

struct ICSeries {
  std::vector<std::string> dates;
  std::vector<double> values;
  std::vector<std::size_t> counts;
};

// Daily Spearman between scores and returns. Dates with fewer than two
// finite pairs, or an undefined correlation, are skipped with a warning.
ICSeries rank_ic(const std::vector<CrossSection>& days);

struct ICSummary {
  double mean = 0;
  double stddev = 0;  // sample, denominator n - 1
  double icir = 0;    // mean / stddev; +-inf when stddev == 0 and mean != 0
  std::size_t days = 0;
};
ICSummary summarize(const ICSeries& series);

// One-sided p-value for mean(a - b) > 0 by moving-block bootstrap: the
// fraction of resampled means that are <= 0. Block length shrinks to the
// series length, with a warning, when the series is shorter.
double block_bootstrap_pvalue(std::span<const double> a, std::span<const double> b,
                              std::size_t block_length = 20, std::size_t resamples = 10000,
                              std::uint64_t seed = 0);

// Writes `metric,value` rows: rank_ic, rank_ic_std, rank_icir, days.
void write_ic_metrics(const std::string& path, const ICSummary& summary);
// Writes `date,rank_ic,n`.
void write_ic_series(const std::string& path, const ICSeries& series);

}  // namespace prism::eval
