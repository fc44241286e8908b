#include "prism/backtest/backtest.hpp"

#include <algorithm>
#include <cstdio>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <unordered_map>

#include "prism/common/csv.hpp"
#include "prism/common/error.hpp"
#include "prism/common/log.hpp"

namespace prism::bt {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kTradingDays = 252.0;

// Candidate order: higher score first, then smaller ticker.
struct Ranked {
  double score;
  const std::string* ticker;
  bool operator<(const Ranked& o) const {
    if (score != o.score) return score > o.score;
    return *ticker < *o.ticker;
  }
};

std::vector<std::string> sorted(std::vector<std::string> v) {
  std::sort(v.begin(), v.end());
  return v;
}

std::vector<std::string> minus(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::string> out;
  std::set_difference(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

}  // namespace

const std::vector<CostRegime>& cost_regimes() {
  static const std::vector<CostRegime> regimes = {
      {"No", 0, 0}, {"Low", 2, 3}, {"Default", 5, 15}, {"High", 10, 20}, {"VeryHigh", 15, 30}, {"Extreme", 20, 40},
  };
  return regimes;
}

void BacktestConfig::validate() const {
  if (portfolio_size == 0) throw config_error("backtest: portfolio_size must be >= 1");
  if (n_drop == 0 || n_drop > portfolio_size) {
    throw config_error("backtest: n_drop must lie in [1, portfolio_size], got " + std::to_string(n_drop));
  }
  if (!(cost_buy_bps >= 0) || !(cost_sell_bps >= 0)) throw config_error("backtest: costs must be >= 0");
}

Rebalance topk_dropn(const std::vector<std::string>& universe, const std::vector<double>& scores,
                     const std::vector<std::string>& previous, std::size_t k, std::size_t n_drop) {
  if (universe.size() != scores.size()) throw std::invalid_argument("topk_dropn: scores do not cover the universe");
  std::unordered_map<std::string, double> score_of;
  std::vector<Ranked> ranked;
  ranked.reserve(universe.size());
  for (std::size_t j = 0; j < universe.size(); ++j) {
    score_of.emplace(universe[j], scores[j]);
    ranked.push_back({scores[j], &universe[j]});
  }
  std::sort(ranked.begin(), ranked.end());

  const std::size_t top = std::min(k, ranked.size());
  const std::set<std::string> held(previous.begin(), previous.end());

  // Held names still in the universe, best first.
  std::vector<Ranked> kept;
  for (const auto& name : previous) {
    auto it = score_of.find(name);
    if (it != score_of.end()) kept.push_back({it->second, &it->first});
  }
  std::sort(kept.begin(), kept.end());
  const std::size_t n_sell = std::min(n_drop, kept.size());
  kept.resize(kept.size() - n_sell);

  std::set<std::string> book;
  for (const auto& r : kept) book.insert(*r.ticker);
  std::size_t bought = 0;
  for (std::size_t j = 0; j < top && bought < n_sell; ++j) {
    const std::string& name = *ranked[j].ticker;
    if (held.count(name)) continue;
    book.insert(name);
    ++bought;
  }
  for (std::size_t j = 0; j < top && book.size() < k; ++j) book.insert(*ranked[j].ticker);

  Rebalance out;
  out.holdings.assign(book.begin(), book.end());
  const auto prev = sorted(previous);
  out.sells = minus(prev, out.holdings);
  out.buys = minus(out.holdings, prev);
  return out;
}

double daily_log_return(double gross, double bought_weight, double sold_weight, double buy_bps, double sell_bps,
                        const std::string& date) {
  const double cost = buy_bps * 1e-4 * bought_weight + sell_bps * 1e-4 * sold_weight;
  const double net = gross - cost;
  if (!(net > -1.0)) {
    throw Error(ErrorCategory::numeric, "backtest: portfolio wiped out on " + date + " (gross " + csv::format(gross) +
                                            ", cost " + csv::format(cost) + ")");
  }
  return std::log1p(net);
}

double turnover(const std::vector<std::string>& previous, const std::vector<std::string>& current) {
  std::unordered_map<std::string, double> w;
  for (const auto& n : previous) w[n] -= 1.0 / static_cast<double>(previous.size());
  for (const auto& n : current) w[n] += 1.0 / static_cast<double>(current.size());
  double l1 = 0;
  for (const auto& [name, d] : w) l1 += std::abs(d);
  return 0.5 * l1;
}

double max_drawdown(const std::vector<double>& wealth) {
  double peak = -std::numeric_limits<double>::infinity(), mdd = 0;
  for (double w : wealth) {
    peak = std::max(peak, w);
    mdd = std::max(mdd, 1.0 - w / peak);
  }
  return mdd;
}

Metrics portfolio_metrics(const std::vector<double>& g) {
  if (g.empty()) throw data_error("portfolio_metrics: empty return series");
  Metrics m;
  m.days = g.size();
  const double n = static_cast<double>(g.size());
  const double sum = std::accumulate(g.begin(), g.end(), 0.0);
  const double mean = sum / n;
  m.annual_return = std::expm1(kTradingDays * mean);
  m.cumulative = std::expm1(sum);
  std::vector<double> wealth{1.0};
  double acc = 0;
  for (double x : g) {
    acc += x;
    wealth.push_back(std::exp(acc));
  }
  m.max_drawdown = max_drawdown(wealth);
  const bool constant = std::all_of(g.begin(), g.end(), [&](double x) { return x == g.front(); });
  if (g.size() < 2 || constant) {
    m.sharpe = kNaN;
  } else {
    double ss = 0;
    for (double x : g) ss += (x - mean) * (x - mean);
    m.sharpe = std::sqrt(kTradingDays) * mean / std::sqrt(ss / (n - 1));
  }
  return m;
}

namespace {

Metrics summarize(const std::vector<DailyRecord>& daily) {
  std::vector<double> g;
  double tsum = 0;
  for (const auto& d : daily) {
    g.push_back(d.log_return);
    tsum += d.turnover;
  }
  Metrics m = portfolio_metrics(g);
  m.mean_turnover = tsum / static_cast<double>(daily.size());
  return m;
}

void price_day(DailyRecord& rec, double buy_bps, double sell_bps, double& acc) {
  const double n = static_cast<double>(std::max<std::size_t>(rec.holdings.size(), 1));
  rec.cost = buy_bps * 1e-4 * static_cast<double>(rec.buys) / n + sell_bps * 1e-4 * static_cast<double>(rec.sells) / n;
  rec.log_return = daily_log_return(rec.gross, static_cast<double>(rec.buys) / n, static_cast<double>(rec.sells) / n,
                                    buy_bps, sell_bps, rec.date);
  acc += rec.log_return;
  rec.wealth = std::exp(acc);
}

}  // namespace

BacktestResult run_backtest(const std::vector<CrossSection>& days, const BacktestConfig& cfg) {
  cfg.validate();
  BacktestResult out;
  std::vector<std::string> book;
  double acc = 0;
  for (const auto& day : days) {
    if (day.tickers.size() != day.scores.size() || day.tickers.size() != day.returns.size()) {
      throw data_error("backtest: ragged cross-section on " + day.date);
    }
    std::vector<std::string> universe;
    std::vector<double> scores;
    std::unordered_map<std::string, double> ret;
    for (std::size_t j = 0; j < day.tickers.size(); ++j) {
      if (!std::isfinite(day.scores[j]) || !std::isfinite(day.returns[j])) continue;
      universe.push_back(day.tickers[j]);
      scores.push_back(day.scores[j]);
      ret[day.tickers[j]] = day.returns[j];
    }
    if (universe.empty()) continue;
    if (universe.size() < cfg.portfolio_size) {
      log::warn("backtest: " + day.date + " has " + std::to_string(universe.size()) + " names for K = " +
                std::to_string(cfg.portfolio_size) + "; holding all of them");
    }
    Rebalance r = topk_dropn(universe, scores, book, cfg.portfolio_size, cfg.n_drop);
    DailyRecord rec;
    rec.date = day.date;
    rec.buys = r.buys.size();
    rec.sells = r.sells.size();
    rec.turnover = turnover(book, r.holdings);
    for (const auto& name : r.holdings) rec.gross += ret.at(name);
    rec.gross /= static_cast<double>(r.holdings.size());
    rec.holdings = std::move(r.holdings);
    price_day(rec, cfg.cost_buy_bps, cfg.cost_sell_bps, acc);
    book = rec.holdings;
    out.daily.push_back(std::move(rec));
  }
  if (out.daily.empty()) throw data_error("backtest: no tradable dates");
  out.metrics = summarize(out.daily);
  return out;
}

BacktestResult reprice(const BacktestResult& trades, double buy_bps, double sell_bps) {
  BacktestResult out = trades;
  double acc = 0;
  for (auto& rec : out.daily) price_day(rec, buy_bps, sell_bps, acc);
  out.metrics = summarize(out.daily);
  return out;
}

std::vector<SweepRow> cost_sweep(const std::vector<CrossSection>& days, const BacktestConfig& cfg) {
  const BacktestResult base = run_backtest(days, cfg);
  std::vector<SweepRow> rows;
  for (const auto& regime : cost_regimes()) {
    rows.push_back({regime.name, regime.buy_bps, regime.sell_bps, cfg.n_drop,
                    reprice(base, regime.buy_bps, regime.sell_bps).metrics});
  }
  return rows;
}

std::vector<SweepRow> ndrop_sweep(const std::vector<CrossSection>& days, const BacktestConfig& cfg,
                                  const std::vector<std::size_t>& n_values) {
  std::vector<SweepRow> rows;
  for (std::size_t n : n_values) {
    BacktestConfig c = cfg;
    c.n_drop = std::min(n, cfg.portfolio_size);
    if (c.n_drop != n) {
      log::warn("backtest: N_drop " + std::to_string(n) + " exceeds K; using " + std::to_string(c.n_drop));
    }
    rows.push_back({"N" + std::to_string(n), c.cost_buy_bps, c.cost_sell_bps, c.n_drop, run_backtest(days, c).metrics});
  }
  return rows;
}

std::vector<CrossSection> cross_sections(const eval::ScoreTable& scores, const data::Panel& panel) {
  std::unordered_map<std::string, std::size_t> date_index, ticker_index;
  for (std::size_t d = 0; d < panel.dates.size(); ++d) date_index.emplace(panel.dates[d], d);
  for (std::size_t i = 0; i < panel.tickers.size(); ++i) ticker_index.emplace(panel.tickers[i], i);
  std::vector<CrossSection> out;
  for (const auto& row : scores.rows) {
    if (out.empty() || out.back().date != row.date) out.push_back({row.date, {}, {}, {}});
    auto& cs = out.back();
    double r = kNaN;
    auto d = date_index.find(row.date);
    auto i = ticker_index.find(row.ticker);
    if (d != date_index.end() && i != ticker_index.end() && d->second + 1 < panel.num_dates()) {
      const std::size_t a = panel.cell(d->second, i->second), b = panel.cell(d->second + 1, i->second);
      if (panel.member[a] && panel.member[b] && panel.close[a] > 0) r = panel.close[b] / panel.close[a] - 1.0;
    }
    cs.tickers.push_back(row.ticker);
    cs.scores.push_back(row.score);
    cs.returns.push_back(r);
  }
  return out;
}

std::uint64_t holdings_hash(const std::vector<std::string>& holdings) {
  std::uint64_t h = 1469598103934665603ull;
  auto feed = [&h](unsigned char c) {
    h ^= c;
    h *= 1099511628211ull;
  };
  const auto names = sorted(holdings);
  for (std::size_t k = 0; k < names.size(); ++k) {
    if (k) feed('|');
    for (unsigned char c : names[k]) feed(c);
  }
  return h;
}

void write_daily(const std::string& path, const BacktestResult& result) {
  csv::Writer w(path, {"date", "holdings_hash", "n_holdings", "buys", "sells", "gross", "cost", "log_return",
                       "turnover", "wealth"});
  for (const auto& d : result.daily) {
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(holdings_hash(d.holdings)));
    w.cell(d.date).cell(std::string_view(hex)).cell(d.holdings.size()).cell(d.buys).cell(d.sells);
    w.cell(d.gross).cell(d.cost).cell(d.log_return).cell(d.turnover).cell(d.wealth);
    w.end_row();
  }
  w.close();
}

void write_summary(const std::string& path, const Metrics& m) {
  csv::Writer w(path, {"metric", "value"});
  w.cell("annual_return").cell(m.annual_return).end_row();
  w.cell("max_drawdown").cell(m.max_drawdown).end_row();
  w.cell("sharpe").cell(m.sharpe).end_row();
  w.cell("cumulative_return").cell(m.cumulative).end_row();
  w.cell("mean_turnover").cell(m.mean_turnover).end_row();
  w.cell("days").cell(m.days).end_row();
  w.close();
}

void write_sweep(const std::string& path, const std::vector<SweepRow>& rows) {
  csv::Writer w(path, {"label", "buy_bps", "sell_bps", "n_drop", "annual_return", "sharpe", "max_drawdown",
                       "cumulative", "mean_turnover"});
  for (const auto& r : rows) {
    w.cell(r.label).cell(r.buy_bps).cell(r.sell_bps).cell(r.n_drop);
    w.cell(r.metrics.annual_return).cell(r.metrics.sharpe).cell(r.metrics.max_drawdown);
    w.cell(r.metrics.cumulative).cell(r.metrics.mean_turnover);
    w.end_row();
  }
  w.close();
}

}  // namespace prism::bt
