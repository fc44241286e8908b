#include "prism/datapanel/panel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <unordered_map>

#include "prism/common/csv.hpp"
#include "prism/common/error.hpp"

namespace prism::data {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string where(const csv::Table& t, std::size_t line) {
  return t.path + ":" + std::to_string(line);
}

void expect_prefix(const csv::Table& t, const std::vector<std::string>& prefix) {
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    if (i >= t.header.size() || t.header[i] != prefix[i]) {
      throw data_error(t.path + ": header must start with '" + prefix[i] + "' in column " +
                       std::to_string(i + 1));
    }
  }
}

void check_date(const csv::Table& t, const csv::Row& row) {
  if (!is_iso_date(row.cells[0])) {
    throw data_error(where(t, row.line) + ": malformed date '" + row.cells[0] + "'");
  }
}

std::size_t index_of(const std::vector<std::string>& sorted, const std::string& key) {
  return static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), key) -
                                  sorted.begin());
}

}  // namespace

bool is_iso_date(const std::string& s) {
  if (s.size() != 10 || s[4] != '-' || s[7] != '-') return false;
  for (std::size_t i : {0, 1, 2, 3, 5, 6, 8, 9}) {
    if (s[i] < '0' || s[i] > '9') return false;
  }
  const int month = std::stoi(s.substr(5, 2));
  const int day = std::stoi(s.substr(8, 2));
  return month >= 1 && month <= 12 && day >= 1 && day <= 31;
}

void Panel::validate() const {
  const std::size_t D = num_dates(), N = num_stocks();
  if (features.size() != D * N * num_features() || open.size() != D * N ||
      close.size() != D * N || member.size() != D * N ||
      factor_returns.size() != D * num_priors()) {
    throw data_error("panel arrays disagree with its axes");
  }
  for (std::size_t d = 1; d < D; ++d) {
    if (!(dates[d - 1] < dates[d])) throw data_error("panel dates not strictly increasing");
  }
}

PanelFiles panel_files(const std::string& dir) {
  return {dir + "/features.csv", dir + "/prices.csv", dir + "/priors.csv"};
}

Panel load_panel(const PanelFiles& files) {
  const csv::Table prices = csv::read(files.prices);
  const csv::Table feats = csv::read(files.features);
  const csv::Table priors = csv::read(files.priors);
  expect_prefix(prices, {"date", "ticker", "open", "close", "member"});
  expect_prefix(feats, {"date", "ticker"});
  expect_prefix(priors, {"date"});

  Panel p;
  p.feature_names.assign(feats.header.begin() + 2, feats.header.end());
  p.prior_names.assign(priors.header.begin() + 1, priors.header.end());

  std::set<std::string> date_set, ticker_set;
  for (const auto& row : prices.rows) {
    check_date(prices, row);
    date_set.insert(row.cells[0]);
    ticker_set.insert(row.cells[1]);
  }
  for (const auto& row : feats.rows) {
    check_date(feats, row);
    if (!date_set.count(row.cells[0])) {
      throw data_error(where(feats, row.line) + ": date " + row.cells[0] +
                       " is absent from " + prices.path);
    }
    ticker_set.insert(row.cells[1]);
  }
  p.dates.assign(date_set.begin(), date_set.end());
  p.tickers.assign(ticker_set.begin(), ticker_set.end());
  const std::size_t D = p.dates.size(), N = p.tickers.size();
  const std::size_t C = p.feature_names.size(), P = p.prior_names.size();

  p.features.assign(D * N * C, kNaN);
  p.open.assign(D * N, kNaN);
  p.close.assign(D * N, kNaN);
  p.member.assign(D * N, 0);
  p.factor_returns.assign(D * P, kNaN);

  std::vector<std::size_t> price_line(D * N, 0);
  for (const auto& row : prices.rows) {
    const std::size_t cell = p.cell(index_of(p.dates, row.cells[0]), index_of(p.tickers, row.cells[1]));
    if (price_line[cell] != 0) {
      throw data_error(where(prices, row.line) + ": duplicate (date,ticker) " + row.cells[0] + "," +
                       row.cells[1] + " first seen on line " + std::to_string(price_line[cell]));
    }
    price_line[cell] = row.line;
    p.open[cell] = csv::parse_number(row.cells[2], prices.path, row.line, "open");
    p.close[cell] = csv::parse_number(row.cells[3], prices.path, row.line, "close");
    const std::string& m = row.cells[4];
    if (m != "0" && m != "1") {
      throw data_error(where(prices, row.line) + ": member must be 0 or 1, found '" + m + "'");
    }
    p.member[cell] = m == "1";
    if (p.member[cell] && !(p.open[cell] > 0 && p.close[cell] > 0)) {
      throw data_error(where(prices, row.line) + ": member row needs positive open and close");
    }
  }

  std::vector<std::size_t> feature_line(D * N, 0);
  for (const auto& row : feats.rows) {
    const std::size_t cell = p.cell(index_of(p.dates, row.cells[0]), index_of(p.tickers, row.cells[1]));
    if (feature_line[cell] != 0) {
      throw data_error(where(feats, row.line) + ": duplicate (date,ticker) " + row.cells[0] + "," +
                       row.cells[1] + " first seen on line " + std::to_string(feature_line[cell]));
    }
    feature_line[cell] = row.line;
    for (std::size_t c = 0; c < C; ++c) {
      p.features[cell * C + c] =
          csv::parse_number(row.cells[2 + c], feats.path, row.line, p.feature_names[c]);
    }
  }

  std::vector<std::size_t> prior_line(D, 0);
  for (const auto& row : priors.rows) {
    check_date(priors, row);
    if (!date_set.count(row.cells[0])) {
      throw data_error(where(priors, row.line) + ": date " + row.cells[0] +
                       " is absent from " + prices.path);
    }
    const std::size_t d = index_of(p.dates, row.cells[0]);
    if (prior_line[d] != 0) {
      throw data_error(where(priors, row.line) + ": duplicate date " + row.cells[0] +
                       " first seen on line " + std::to_string(prior_line[d]));
    }
    prior_line[d] = row.line;
    for (std::size_t j = 0; j < P; ++j) {
      p.factor_returns[d * P + j] =
          csv::parse_number(row.cells[1 + j], priors.path, row.line, p.prior_names[j]);
    }
  }
  for (std::size_t d = 0; d < D; ++d) {
    if (prior_line[d] == 0) {
      throw data_error(priors.path + ": no row for date " + p.dates[d] + " present in " +
                       prices.path);
    }
  }

  // Forward fill per stock and feature; a stock never observed so far is not
  // a member yet.
  for (std::size_t i = 0; i < N; ++i) {
    bool seen = false;
    for (std::size_t d = 0; d < D; ++d) {
      const std::size_t cell = p.cell(d, i);
      if (feature_line[cell] != 0) seen = true;
      if (!seen) {
        p.member[cell] = 0;
        continue;
      }
      if (d == 0) continue;
      const std::size_t prev = p.cell(d - 1, i);
      for (std::size_t c = 0; c < C; ++c) {
        double& v = p.features[cell * C + c];
        if (std::isnan(v)) v = p.features[prev * C + c];
      }
    }
  }
  return p;
}

void write_panel(const Panel& p, const PanelFiles& files) {
  p.validate();
  const std::size_t D = p.num_dates(), N = p.num_stocks(), C = p.num_features();
  {
    std::vector<std::string> header{"date", "ticker"};
    header.insert(header.end(), p.feature_names.begin(), p.feature_names.end());
    csv::Writer w(files.features, header);
    for (std::size_t d = 0; d < D; ++d) {
      for (std::size_t i = 0; i < N; ++i) {
        const std::size_t cell = p.cell(d, i);
        bool any = false;
        for (std::size_t c = 0; c < C; ++c) any = any || !std::isnan(p.features[cell * C + c]);
        if (!any && !p.member[cell]) continue;
        w.cell(p.dates[d]).cell(p.tickers[i]);
        for (std::size_t c = 0; c < C; ++c) w.cell(p.features[cell * C + c]);
        w.end_row();
      }
    }
    w.close();
  }
  {
    csv::Writer w(files.prices, {"date", "ticker", "open", "close", "member"});
    for (std::size_t d = 0; d < D; ++d) {
      for (std::size_t i = 0; i < N; ++i) {
        const std::size_t cell = p.cell(d, i);
        if (!p.member[cell] && std::isnan(p.open[cell]) && std::isnan(p.close[cell])) continue;
        w.cell(p.dates[d]).cell(p.tickers[i]).cell(p.open[cell]).cell(p.close[cell]);
        w.cell(std::string_view(p.member[cell] ? "1" : "0"));
        w.end_row();
      }
    }
    w.close();
  }
  {
    std::vector<std::string> header{"date"};
    header.insert(header.end(), p.prior_names.begin(), p.prior_names.end());
    csv::Writer w(files.priors, header);
    for (std::size_t d = 0; d < D; ++d) {
      w.cell(p.dates[d]);
      for (std::size_t j = 0; j < p.num_priors(); ++j) w.cell(p.factor_return(d, j));
      w.end_row();
    }
    w.close();
  }
}

}  // namespace prism::data
