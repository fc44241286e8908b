#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace prism::data {

// Raw date x stock x feature panel as ingested. Missing cells are NaN.
struct Panel {
  std::vector<std::string> dates;    // ISO-8601, strictly increasing
  std::vector<std::string> tickers;  // lexicographically sorted
  std::vector<std::string> feature_names;
  std::vector<std::string> prior_names;
  std::vector<double> features;        // [D, N, C]
  std::vector<double> open;            // [D, N]
  std::vector<double> close;           // [D, N]
  std::vector<std::uint8_t> member;    // [D, N]
  std::vector<double> factor_returns;  // [D, P] daily returns of the prior factors

  std::size_t num_dates() const { return dates.size(); }
  std::size_t num_stocks() const { return tickers.size(); }
  std::size_t num_features() const { return feature_names.size(); }
  std::size_t num_priors() const { return prior_names.size(); }

  std::size_t cell(std::size_t d, std::size_t i) const { return d * tickers.size() + i; }
  double feature(std::size_t d, std::size_t i, std::size_t c) const {
    return features[cell(d, i) * feature_names.size() + c];
  }
  double factor_return(std::size_t d, std::size_t p) const {
    return factor_returns[d * prior_names.size() + p];
  }

  // Throws a data error when array sizes disagree with the axis labels.
  void validate() const;
};

struct PanelFiles {
  std::string features;
  std::string prices;
  std::string priors;
};

PanelFiles panel_files(const std::string& dir);

// Reads the three panel CSVs. Features are forward-filled per stock; a
// (date, stock) with no observation so far, or absent from the prices file,
// is non-member. Throws prism::Error (data) naming file and line on
// duplicate keys, misaligned dates, malformed dates, or non-numeric cells.
Panel load_panel(const PanelFiles& files);

// Writes the three files; load_panel(write_panel(p)) reproduces p exactly when
// p has no missing features.
void write_panel(const Panel& panel, const PanelFiles& files);

bool is_iso_date(const std::string& s);

}  // namespace prism::data
