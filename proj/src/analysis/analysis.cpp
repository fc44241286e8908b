#include "prism/analysis/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <unordered_map>

#include "prism/common/csv.hpp"
#include "prism/common/error.hpp"
#include "prism/common/rng.hpp"
#include "prism/evaluation/metrics.hpp"

namespace prism::analysis {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr std::size_t kExactLimit = 25;

void check_history(const AssignmentHistory& h) {
  if (h.codes.size() != h.dates.size() * h.tickers.size())
    throw data_error("assignment history has " + std::to_string(h.codes.size()) + " cells for " +
                     std::to_string(h.dates.size()) + " dates x " + std::to_string(h.tickers.size()) + " stocks");
}

}  // namespace

TransitionResult code_transitions(const AssignmentHistory& history, std::size_t horizon, std::size_t top_codes) {
  check_history(history);
  if (horizon == 0) throw Error(ErrorCategory::usage, "transition horizon must be positive");
  if (top_codes == 0) throw Error(ErrorCategory::usage, "number of codes to keep must be positive");

  std::map<int, std::size_t> frequency;
  for (int c : history.codes)
    if (c >= 0) ++frequency[c];
  std::vector<std::pair<int, std::size_t>> ordered(frequency.begin(), frequency.end());
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (ordered.size() > top_codes) ordered.resize(top_codes);

  TransitionResult out;
  out.horizon = horizon;
  const std::size_t k = ordered.size();
  std::unordered_map<int, std::size_t> slot;
  for (std::size_t j = 0; j < k; ++j) {
    out.codes.push_back(ordered[j].first);
    slot.emplace(ordered[j].first, j);
  }
  std::vector<double> counts(k * k, 0.0);
  out.row_count.assign(k, 0);
  const std::size_t n = history.tickers.size();
  for (std::size_t d = 0; d + horizon < history.dates.size(); ++d) {
    for (std::size_t i = 0; i < n; ++i) {
      auto from = slot.find(history.at(d, i));
      if (from == slot.end()) continue;
      auto to = slot.find(history.at(d + horizon, i));
      if (to == slot.end()) continue;
      counts[from->second * k + to->second] += 1.0;
      ++out.row_count[from->second];
    }
  }

  out.probability.assign(k * k, 0.0);
  std::size_t live = 0;
  double diag = 0, entropy = 0;
  for (std::size_t a = 0; a < k; ++a) {
    if (out.row_count[a] == 0) continue;
    ++live;
    const double total = static_cast<double>(out.row_count[a]);
    double h = 0;
    for (std::size_t b = 0; b < k; ++b) {
      const double p = counts[a * k + b] / total;
      out.probability[a * k + b] = p;
      if (p > 0) h -= p * std::log(p);
    }
    diag += out.probability[a * k + a];
    entropy += h;
  }
  out.persistence = live ? diag / static_cast<double>(live) : kNaN;
  out.entropy = live ? entropy / static_cast<double>(live) : kNaN;
  return out;
}

ExposureReport code_factor_exposures(const AssignmentHistory& history, const std::vector<double>& next_returns,
                                     const std::vector<double>& factor_returns, std::size_t factors,
                                     std::size_t min_obs) {
  check_history(history);
  const std::size_t D = history.dates.size(), N = history.tickers.size();
  if (next_returns.size() != D * N) throw data_error("next-day returns do not match the assignment history");
  if (factor_returns.size() != D * factors) throw data_error("factor returns do not match the assignment history");

  // code -> (date index, equal-weighted return) over usable dates
  std::map<int, std::vector<std::pair<std::size_t, double>>> series;
  std::map<int, std::pair<double, std::size_t>> day;
  for (std::size_t d = 0; d < D; ++d) {
    day.clear();
    for (std::size_t i = 0; i < N; ++i) {
      const int c = history.at(d, i);
      const double r = next_returns[d * N + i];
      if (c < 0 || !std::isfinite(r)) continue;
      auto& acc = day[c];
      acc.first += r;
      ++acc.second;
    }
    bool factors_ok = true;
    for (std::size_t p = 0; p < factors; ++p) factors_ok = factors_ok && std::isfinite(factor_returns[d * factors + p]);
    if (!factors_ok) continue;
    for (const auto& [c, acc] : day) series[c].emplace_back(d, acc.first / static_cast<double>(acc.second));
  }

  ExposureReport out;
  std::vector<double> code_r, factor_r;
  for (const auto& [c, obs] : series) {
    if (obs.size() < min_obs) {
      ++out.skipped;
      continue;
    }
    Exposure e;
    e.code = c;
    e.observations = obs.size();
    code_r.clear();
    for (const auto& o : obs) code_r.push_back(o.second);
    std::vector<std::pair<std::size_t, double>> rho;
    for (std::size_t p = 0; p < factors; ++p) {
      factor_r.clear();
      for (const auto& o : obs) factor_r.push_back(factor_returns[o.first * factors + p]);
      const double r = eval::spearman(code_r, factor_r);
      if (std::isfinite(r)) rho.emplace_back(p, r);
    }
    std::stable_sort(rho.begin(), rho.end(),
                     [](const auto& a, const auto& b) { return std::abs(a.second) > std::abs(b.second); });
    for (std::size_t j = 0; j < std::min<std::size_t>(3, rho.size()); ++j) {
      e.factors.push_back(rho[j].first);
      e.rho.push_back(rho[j].second);
    }
    out.rows.push_back(std::move(e));
  }
  // Codes that never had a usable date also count as thin.
  std::map<int, bool> seen;
  for (int c : history.codes)
    if (c >= 0 && !series.count(c)) seen[c] = true;
  out.skipped += seen.size();
  return out;
}

void next_day_series(const AssignmentHistory& history, const data::Panel& panel, std::vector<double>& next_returns,
                     std::vector<double>& factor_returns) {
  check_history(history);
  std::unordered_map<std::string, std::size_t> date_index, ticker_index;
  for (std::size_t d = 0; d < panel.dates.size(); ++d) date_index.emplace(panel.dates[d], d);
  for (std::size_t i = 0; i < panel.tickers.size(); ++i) ticker_index.emplace(panel.tickers[i], i);
  const std::size_t D = history.dates.size(), N = history.tickers.size(), P = panel.num_priors();
  next_returns.assign(D * N, kNaN);
  factor_returns.assign(D * P, kNaN);
  std::vector<std::ptrdiff_t> stock(N, -1);
  for (std::size_t i = 0; i < N; ++i) {
    auto it = ticker_index.find(history.tickers[i]);
    if (it != ticker_index.end()) stock[i] = static_cast<std::ptrdiff_t>(it->second);
  }
  for (std::size_t d = 0; d < D; ++d) {
    auto it = date_index.find(history.dates[d]);
    if (it == date_index.end() || it->second + 1 >= panel.num_dates()) continue;
    const std::size_t t = it->second;
    for (std::size_t p = 0; p < P; ++p) factor_returns[d * P + p] = panel.factor_return(t + 1, p);
    for (std::size_t i = 0; i < N; ++i) {
      if (stock[i] < 0) continue;
      const std::size_t a = panel.cell(t, static_cast<std::size_t>(stock[i]));
      const std::size_t b = panel.cell(t + 1, static_cast<std::size_t>(stock[i]));
      if (panel.member[a] && panel.member[b] && panel.close[a] > 0)
        next_returns[d * N + i] = panel.close[b] / panel.close[a] - 1.0;
    }
  }
}

std::vector<double> ActivationPanel::series(std::size_t e) const {
  std::vector<double> out(dates.size());
  for (std::size_t d = 0; d < dates.size(); ++d) out[d] = at(d, e);
  return out;
}

ActivationPanel expert_activation(const std::vector<GateRow>& rows, std::size_t experts) {
  if (experts == 0) throw Error(ErrorCategory::usage, "expert count must be positive");
  ActivationPanel out;
  out.experts = experts;
  std::vector<std::size_t> rows_per_date;
  for (const auto& r : rows) {
    if (r.experts.size() != r.weights.size())
      throw data_error("gate row on " + r.date + " has mismatched experts and weights");
    if (out.dates.empty() || out.dates.back() != r.date) {
      if (std::find(out.dates.begin(), out.dates.end(), r.date) != out.dates.end())
        throw data_error("gate rows for " + r.date + " are not contiguous");
      out.dates.push_back(r.date);
      out.values.resize(out.values.size() + experts, 0.0);
      rows_per_date.push_back(0);
    }
    double* v = out.values.data() + (out.dates.size() - 1) * experts;
    for (std::size_t j = 0; j < r.experts.size(); ++j) {
      if (r.experts[j] >= experts)
        throw data_error("gate row on " + r.date + " names expert " + std::to_string(r.experts[j]) + " of " +
                         std::to_string(experts));
      v[r.experts[j]] += r.weights[j];
    }
    ++rows_per_date.back();
  }
  for (std::size_t d = 0; d < out.dates.size(); ++d)
    for (std::size_t e = 0; e < experts; ++e) out.values[d * experts + e] /= static_cast<double>(rows_per_date[d]);
  return out;
}

double jaccard(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  if (a.empty() && b.empty()) return kNaN;
  std::vector<std::size_t> both;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
  const double inter = static_cast<double>(both.size());
  return inter / (static_cast<double>(a.size() + b.size()) - inter);
}

SpikeReport expert_spikes(const ActivationPanel& panel, double sigma_multiple) {
  const std::size_t M = panel.experts, D = panel.dates.size();
  SpikeReport out;
  out.sigma_multiple = sigma_multiple;
  out.mean.assign(M, kNaN);
  out.stddev.assign(M, kNaN);
  out.threshold.assign(M, kNaN);
  out.spikes.assign(M, {});
  for (std::size_t e = 0; e < M; ++e) {
    if (D == 0) continue;
    double mean = 0;
    for (std::size_t d = 0; d < D; ++d) mean += panel.at(d, e);
    mean /= static_cast<double>(D);
    double ss = 0;
    for (std::size_t d = 0; d < D; ++d) ss += (panel.at(d, e) - mean) * (panel.at(d, e) - mean);
    const double sd = D > 1 ? std::sqrt(ss / static_cast<double>(D - 1)) : 0.0;
    out.mean[e] = mean;
    out.stddev[e] = sd;
    out.threshold[e] = mean + sigma_multiple * sd;
    if (sd <= 0) continue;
    for (std::size_t d = 0; d < D; ++d)
      if (panel.at(d, e) > out.threshold[e]) out.spikes[e].push_back(d);
  }
  out.jaccard.assign(M * M, kNaN);
  double sum = 0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < M; ++a) {
    for (std::size_t b = 0; b < M; ++b) {
      const double j = jaccard(out.spikes[a], out.spikes[b]);
      out.jaccard[a * M + b] = j;
      if (a < b && std::isfinite(j)) {
        sum += j;
        ++pairs;
      }
    }
  }
  out.mean_jaccard = pairs ? sum / static_cast<double>(pairs) : kNaN;
  return out;
}

WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size())
    throw data_error("signed-rank test needs paired samples, got " + std::to_string(a.size()) + " and " +
                     std::to_string(b.size()));
  std::vector<double> diff;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    if (!std::isfinite(d)) throw Error(ErrorCategory::numeric, "signed-rank test on non-finite difference");
    if (d != 0) diff.push_back(d);
  }
  WilcoxonResult out;
  out.n = diff.size();
  if (diff.empty()) return out;

  const std::size_t n = diff.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t x, std::size_t y) { return std::abs(diff[x]) < std::abs(diff[y]); });
  std::vector<double> rank(n);
  double tie_term = 0;
  bool ties = false;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && std::abs(diff[order[j + 1]]) == std::abs(diff[order[i]])) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    const double t = static_cast<double>(j - i + 1);
    if (t > 1) {
      ties = true;
      tie_term += t * t * t - t;
    }
    i = j + 1;
  }
  double w_plus = 0, w_minus = 0;
  for (std::size_t i = 0; i < n; ++i) (diff[i] > 0 ? w_plus : w_minus) += rank[i];
  out.statistic = std::min(w_plus, w_minus);

  const double nn = static_cast<double>(n);
  if (n <= kExactLimit && !ties) {
    // Null distribution of the positive rank sum over all 2^n sign patterns.
    const std::size_t max_sum = n * (n + 1) / 2;
    std::vector<double> ways(max_sum + 1, 0.0);
    ways[0] = 1;
    for (std::size_t r = 1; r <= n; ++r)
      for (std::size_t s = max_sum; s >= r; --s) ways[s] += ways[s - r];
    const auto w = static_cast<std::size_t>(std::llround(out.statistic));
    double tail = 0;
    for (std::size_t s = 0; s <= w; ++s) tail += ways[s];
    out.p_value = std::min(1.0, 2.0 * tail / std::ldexp(1.0, static_cast<int>(n)));
    out.exact = true;
    return out;
  }
  const double mean = nn * (nn + 1) / 4.0;
  const double var = nn * (nn + 1) * (2 * nn + 1) / 24.0 - tie_term / 48.0;
  if (var <= 0) return out;
  const double z = (out.statistic - mean) / std::sqrt(var);
  out.p_value = std::min(1.0, std::erfc(-z / std::sqrt(2.0)));
  return out;
}

PredictionFile read_prediction_file(const std::string& path) {
  const auto table = csv::read(path);
  const std::size_t c_date = table.column("date"), c_ticker = table.column("ticker");
  const std::size_t c_code = table.column("code_index");
  std::vector<std::size_t> c_expert, c_weight;
  for (std::size_t j = 1;; ++j) {
    const auto e = std::find(table.header.begin(), table.header.end(), "expert_top" + std::to_string(j));
    const auto g = std::find(table.header.begin(), table.header.end(), "gate_w" + std::to_string(j));
    if (e == table.header.end() || g == table.header.end()) break;
    c_expert.push_back(static_cast<std::size_t>(e - table.header.begin()));
    c_weight.push_back(static_cast<std::size_t>(g - table.header.begin()));
  }

  PredictionFile out;
  auto& h = out.history;
  std::vector<std::string> tickers;
  for (const auto& row : table.rows) {
    if (row.cells.size() != table.header.size())
      throw data_error(path + ":" + std::to_string(row.line) + ": expected " + std::to_string(table.header.size()) +
                       " cells");
    if (h.dates.empty() || h.dates.back() != row.cells[c_date]) h.dates.push_back(row.cells[c_date]);
    tickers.push_back(row.cells[c_ticker]);
  }
  std::sort(tickers.begin(), tickers.end());
  tickers.erase(std::unique(tickers.begin(), tickers.end()), tickers.end());
  h.tickers = tickers;
  h.codes.assign(h.dates.size() * h.tickers.size(), -1);

  std::size_t d = 0;
  for (const auto& row : table.rows) {
    if (h.dates[d] != row.cells[c_date]) ++d;
    const auto i = static_cast<std::size_t>(
        std::lower_bound(tickers.begin(), tickers.end(), row.cells[c_ticker]) - tickers.begin());
    const double code = csv::parse_number(row.cells[c_code], path, row.line, "code_index");
    if (!std::isfinite(code) || code != std::floor(code) || code < -1)
      throw data_error(path + ":" + std::to_string(row.line) + ": code_index must be an integer >= -1");
    h.codes[d * tickers.size() + i] = static_cast<int>(code);
    GateRow g;
    g.date = row.cells[c_date];
    for (std::size_t j = 0; j < c_expert.size(); ++j) {
      const double e = csv::parse_number(row.cells[c_expert[j]], path, row.line, table.header[c_expert[j]]);
      const double w = csv::parse_number(row.cells[c_weight[j]], path, row.line, table.header[c_weight[j]]);
      if (!std::isfinite(e) || e < 0 || e != std::floor(e))
        throw data_error(path + ":" + std::to_string(row.line) + ": expert index must be a non-negative integer");
      g.experts.push_back(static_cast<std::size_t>(e));
      g.weights.push_back(w);
    }
    out.gates.push_back(std::move(g));
  }
  return out;
}

double simulated_null_jaccard(const std::vector<std::size_t>& spike_counts, std::size_t days, std::size_t draws,
                              std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::size_t> pool(days);
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t r = 0; r < draws; ++r) {
    std::vector<std::vector<std::size_t>> sets;
    for (std::size_t count : spike_counts) {
      std::iota(pool.begin(), pool.end(), 0);
      const std::size_t k = std::min(count, days);
      // Partial Fisher-Yates: the first k slots become a uniform k-subset.
      for (std::size_t j = 0; j < k; ++j) std::swap(pool[j], pool[j + rng.index(days - j)]);
      std::vector<std::size_t> s(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
      std::sort(s.begin(), s.end());
      sets.push_back(std::move(s));
    }
    for (std::size_t a = 0; a < sets.size(); ++a)
      for (std::size_t b = a + 1; b < sets.size(); ++b) {
        const double j = jaccard(sets[a], sets[b]);
        if (std::isfinite(j)) {
          sum += j;
          ++n;
        }
      }
  }
  return n ? sum / static_cast<double>(n) : kNaN;
}

void write_transitions(const std::string& path, const TransitionResult& result) {
  std::vector<std::string> header{"from_code", "transitions"};
  for (int c : result.codes) header.push_back("to_" + std::to_string(c));
  csv::Writer w(path, header);
  const std::size_t k = result.codes.size();
  for (std::size_t a = 0; a < k; ++a) {
    w.cell(result.codes[a]).cell(result.row_count[a]);
    for (std::size_t b = 0; b < k; ++b) w.cell(result.probability[a * k + b]);
    w.end_row();
  }
  w.close();
}

void write_persistence(const std::string& path, const std::vector<TransitionResult>& results) {
  csv::Writer w(path, {"horizon", "codes", "persistence", "entropy", "uniform_persistence"});
  for (const auto& r : results) {
    const double uniform = r.codes.empty() ? kNaN : 1.0 / static_cast<double>(r.codes.size());
    w.cell(r.horizon).cell(r.codes.size()).cell(r.persistence).cell(r.entropy).cell(uniform);
    w.end_row();
  }
  w.close();
}

void write_exposures(const std::string& path, const ExposureReport& report,
                     const std::vector<std::string>& factor_names) {
  csv::Writer w(path, {"code", "observations", "F1", "rho1", "F2", "rho2", "F3", "rho3"});
  for (const auto& e : report.rows) {
    w.cell(e.code).cell(e.observations);
    for (std::size_t j = 0; j < 3; ++j) {
      if (j < e.factors.size()) {
        const std::size_t f = e.factors[j];
        w.cell(f < factor_names.size() ? factor_names[f] : "F" + std::to_string(f));
        w.cell(e.rho[j]);
      } else {
        w.cell("").cell(kNaN);
      }
    }
    w.end_row();
  }
  w.close();
}

void write_activation(const std::string& path, const ActivationPanel& panel) {
  std::vector<std::string> header{"date"};
  for (std::size_t e = 0; e < panel.experts; ++e) header.push_back("expert_" + std::to_string(e));
  csv::Writer w(path, header);
  for (std::size_t d = 0; d < panel.dates.size(); ++d) {
    w.cell(panel.dates[d]);
    for (std::size_t e = 0; e < panel.experts; ++e) w.cell(panel.at(d, e));
    w.end_row();
  }
  w.close();
}

void write_spikes(const std::string& path, const SpikeReport& report, const ActivationPanel& panel) {
  csv::Writer w(path, {"expert", "mean_activation", "std", "threshold", "n_spikes", "spike_rate", "spike_dates"});
  const double days = static_cast<double>(panel.dates.size());
  for (std::size_t e = 0; e < report.spikes.size(); ++e) {
    std::string dates;
    for (std::size_t d : report.spikes[e]) {
      if (!dates.empty()) dates += ';';
      dates += panel.dates[d];
    }
    w.cell(e).cell(report.mean[e]).cell(report.stddev[e]).cell(report.threshold[e]);
    w.cell(report.spikes[e].size()).cell(days > 0 ? static_cast<double>(report.spikes[e].size()) / days : kNaN);
    w.cell(dates);
    w.end_row();
  }
  w.close();
}

void write_jaccard(const std::string& path, const SpikeReport& report, double null_jaccard) {
  const std::size_t M = report.spikes.size();
  csv::Writer w(path, {"expert_a", "expert_b", "jaccard", "null_jaccard"});
  for (std::size_t a = 0; a < M; ++a)
    for (std::size_t b = a + 1; b < M; ++b)
      w.cell(a).cell(b).cell(report.jaccard[a * M + b]).cell(null_jaccard).end_row();
  w.close();
}

void write_wilcoxon(const std::string& path, const ActivationPanel& panel) {
  csv::Writer w(path, {"expert_a", "expert_b", "n", "statistic", "p_value", "method"});
  for (std::size_t a = 0; a < panel.experts; ++a) {
    const auto sa = panel.series(a);
    for (std::size_t b = a + 1; b < panel.experts; ++b) {
      const auto r = wilcoxon_signed_rank(sa, panel.series(b));
      w.cell(a).cell(b).cell(r.n).cell(r.statistic).cell(r.p_value).cell(r.exact ? "exact" : "normal");
      w.end_row();
    }
  }
  w.close();
}

}  // namespace prism::analysis
