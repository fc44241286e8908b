#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "prism/datapanel/panel.hpp"
#include "prism/evaluation/scores.hpp"

namespace prism::bt {

struct CostRegime {
  std::string name;
  double buy_bps = 0;
  double sell_bps = 0;
};

// No, Low, Default, High, VeryHigh, Extreme.
const std::vector<CostRegime>& cost_regimes();

struct BacktestConfig {
  std::size_t portfolio_size = 30;  // K
  std::size_t n_drop = 5;
  double cost_buy_bps = 5;
  double cost_sell_bps = 15;

  // Throws a config error unless 1 <= n_drop <= portfolio_size and costs >= 0.
  void validate() const;
};

// One trading date. `returns[k]` is the simple return earned by holding
// tickers[k] from this date's close to the next close; NaN removes the
// ticker from the date's universe.
struct CrossSection {
  std::string date;
  std::vector<std::string> tickers;
  std::vector<double> scores;
  std::vector<double> returns;
};

struct Rebalance {
  std::vector<std::string> holdings;  // sorted by ticker
  std::vector<std::string> sells;     // previous holdings not kept
  std::vector<std::string> buys;      // new holdings not held before
};

// One TopK-DropN step. Names of `previous` outside the universe are removed
// first; the N lowest-scored survivors are sold; the best unheld names of
// the top K replace them; the book is then topped up to K from the top K by
// score. Score ties rank by ticker, smaller first. A universe smaller than K
// is held in full. Reported sells and buys are net of names sold and bought
// back on the same day.
Rebalance topk_dropn(const std::vector<std::string>& universe, const std::vector<double>& scores,
                     const std::vector<std::string>& previous, std::size_t k, std::size_t n_drop);

struct DailyRecord {
  std::string date;
  std::vector<std::string> holdings;
  std::size_t buys = 0, sells = 0;
  double gross = 0;     // equal-weight simple return of the book
  double cost = 0;      // fraction of wealth paid in costs
  double log_return = 0;
  double turnover = 0;
  double wealth = 0;    // exp of the cumulative log return
};

struct Metrics {
  double annual_return = 0;
  double max_drawdown = 0;
  double sharpe = 0;  // NaN when the log returns have zero variance
  double cumulative = 0;
  double mean_turnover = 0;
  std::size_t days = 0;
};

struct BacktestResult {
  std::vector<DailyRecord> daily;
  Metrics metrics;
};

// log(1 + gross - cost), with cost = buy_bps * bought weight + sell_bps *
// sold weight measured against the post-rebalance equal weights. Throws a
// numeric error when gross - cost <= -1.
double daily_log_return(double gross, double bought_weight, double sold_weight, double buy_bps, double sell_bps,
                        const std::string& date);

// Half the l1 distance between two equal-weight books.
double turnover(const std::vector<std::string>& previous, const std::vector<std::string>& current);

// AR = exp(252 mean g) - 1, MDD over wealth starting at 1, SR = sqrt(252)
// mean g / sample std g, cumulative = exp(sum g) - 1. Throws on an empty series.
Metrics portfolio_metrics(const std::vector<double>& log_returns);
double max_drawdown(const std::vector<double>& wealth);

BacktestResult run_backtest(const std::vector<CrossSection>& days, const BacktestConfig& cfg);

// Re-prices a fixed trade sequence under other costs.
BacktestResult reprice(const BacktestResult& trades, double buy_bps, double sell_bps);

struct SweepRow {
  std::string label;
  double buy_bps = 0, sell_bps = 0;
  std::size_t n_drop = 0;
  Metrics metrics;
};

// Six cost regimes on one trade sequence.
std::vector<SweepRow> cost_sweep(const std::vector<CrossSection>& days, const BacktestConfig& cfg);
// One re-simulation per N_drop value.
std::vector<SweepRow> ndrop_sweep(const std::vector<CrossSection>& days, const BacktestConfig& cfg,
                                  const std::vector<std::size_t>& n_values);

// Joins scores with next-day close-to-close returns from the panel. Dates
// without a next close and tickers unknown to the panel get NaN returns.
std::vector<CrossSection> cross_sections(const eval::ScoreTable& scores, const data::Panel& panel);

// FNV-1a over the sorted tickers joined with '|'.
std::uint64_t holdings_hash(const std::vector<std::string>& holdings);

// daily.csv: date,holdings_hash,n_holdings,buys,sells,gross,cost,log_return,turnover,wealth
void write_daily(const std::string& path, const BacktestResult& result);
// summary.csv: metric,value
void write_summary(const std::string& path, const Metrics& metrics);
// sweep.csv: label,buy_bps,sell_bps,n_drop,annual_return,sharpe,max_drawdown,cumulative,mean_turnover
void write_sweep(const std::string& path, const std::vector<SweepRow>& rows);

}  // namespace prism::bt
