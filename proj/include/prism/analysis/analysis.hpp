#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "prism/datapanel/panel.hpp"

namespace prism::analysis {

// Code of every (date, stock) cell over an evaluation range; -1 where the
// stock had no assignment.
struct AssignmentHistory {
  std::vector<std::string> dates;
  std::vector<std::string> tickers;
  std::vector<int> codes;  // [D, N]

  int at(std::size_t d, std::size_t i) const { return codes[d * tickers.size() + i]; }
};

struct TransitionResult {
  std::size_t horizon = 0;
  std::vector<int> codes;              // the K' most active codes, most active first
  std::vector<double> probability;     // [K', K'] row-major; all-zero rows had no transitions
  std::vector<std::size_t> row_count;  // transitions counted out of each code
  double persistence = 0;              // mean diagonal over rows with transitions
  double entropy = 0;                  // mean row entropy in nats over the same rows
};

// Counts code(t) -> code(t + horizon) per stock, keeping pairs whose both
// ends are among the `top_codes` most frequently assigned codes (ties to the
// smaller index).
TransitionResult code_transitions(const AssignmentHistory& history, std::size_t horizon, std::size_t top_codes);

struct Exposure {
  int code = -1;
  std::size_t observations = 0;
  std::vector<std::size_t> factors;  // up to three, largest |rho| first
  std::vector<double> rho;
};

struct ExposureReport {
  std::vector<Exposure> rows;
  std::size_t skipped = 0;  // codes below the observation threshold
};

// Code return on date t: equal-weighted mean of the next-day returns
// (`next_returns`, [D, N], NaN when missing) of the stocks holding the code
// at t. Each code with at least `min_obs` such dates is ranked against every
// factor column of `factor_returns` ([D, P], aligned with the same next day).
ExposureReport code_factor_exposures(const AssignmentHistory& history, const std::vector<double>& next_returns,
                                     const std::vector<double>& factor_returns, std::size_t factors,
                                     std::size_t min_obs);

// Next-day close-to-close returns and next-day factor returns for the
// history's dates, looked up in the panel.
void next_day_series(const AssignmentHistory& history, const data::Panel& panel, std::vector<double>& next_returns,
                     std::vector<double>& factor_returns);

// Per-date mean gate weight of each expert, [D, M].
struct ActivationPanel {
  std::vector<std::string> dates;
  std::size_t experts = 0;
  std::vector<double> values;

  double at(std::size_t d, std::size_t e) const { return values[d * experts + e]; }
  std::vector<double> series(std::size_t e) const;
};

struct GateRow {
  std::string date;
  std::vector<std::size_t> experts;
  std::vector<double> weights;
};

// Rows must be grouped by date. Unselected experts count as weight zero.
ActivationPanel expert_activation(const std::vector<GateRow>& rows, std::size_t experts);

struct SpikeReport {
  double sigma_multiple = 1.5;
  std::vector<double> mean, stddev, threshold;
  std::vector<std::vector<std::size_t>> spikes;  // date indices per expert
  std::vector<double> jaccard;                   // [M, M]; NaN when both sets are empty
  double mean_jaccard = 0;                       // over defined off-diagonal pairs; NaN if none
};

// Spike dates exceed the expert's mean plus `sigma_multiple` sample
// standard deviations; a constant series never spikes.
SpikeReport expert_spikes(const ActivationPanel& panel, double sigma_multiple = 1.5);

// |A and B| / |A or B| over sorted index sets; NaN when both are empty.
double jaccard(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b);

struct WilcoxonResult {
  std::size_t n = 0;  // non-zero differences
  double statistic = 0;  // min of the positive and negative rank sums
  double p_value = 1;
  bool exact = false;
};

// Two-sided signed-rank test. Exact enumeration of the null for n <= 25
// without tied magnitudes, otherwise the normal approximation with tie
// correction. All-zero differences give p = 1.
WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b);

// Code assignments and gate rows from a prediction file
// (`date,ticker,...,code_index,expert_top1..k,gate_w1..k`). Tickers are the
// sorted union over all dates; absent cells get code -1.
struct PredictionFile {
  AssignmentHistory history;
  std::vector<GateRow> gates;
};
PredictionFile read_prediction_file(const std::string& path);

// Mean Jaccard of random spike sets with the observed per-expert sizes drawn
// uniformly over `days` dates, averaged over `draws` simulations.
double simulated_null_jaccard(const std::vector<std::size_t>& spike_counts, std::size_t days, std::size_t draws,
                              std::uint64_t seed);

void write_transitions(const std::string& path, const TransitionResult& result);
// persistence.csv: horizon,codes,persistence,entropy,uniform_persistence
void write_persistence(const std::string& path, const std::vector<TransitionResult>& results);
// exposures.csv: code,observations,F1,rho1,F2,rho2,F3,rho3
void write_exposures(const std::string& path, const ExposureReport& report,
                     const std::vector<std::string>& factor_names);
void write_activation(const std::string& path, const ActivationPanel& panel);
// spikes.csv: expert,mean_activation,std,threshold,n_spikes,spike_rate,spike_dates
void write_spikes(const std::string& path, const SpikeReport& report, const ActivationPanel& panel);
// jaccard.csv: expert_a,expert_b,jaccard,null_jaccard
void write_jaccard(const std::string& path, const SpikeReport& report, double null_jaccard);
// wilcoxon.csv: expert_a,expert_b,n,statistic,p_value,method
void write_wilcoxon(const std::string& path, const ActivationPanel& panel);

}  // namespace prism::analysis
