#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "prism/backtest/backtest.hpp"
#include "prism/common/csv.hpp"
#include "prism/common/error.hpp"
#include "prism/common/rng.hpp"

namespace {

using namespace prism;
using namespace prism::bt;
using Book = std::vector<std::string>;

// Written from the algorithm text alone: a literal transcription with
// sorted vectors and no shared helpers.
Book brute_step(const std::map<std::string, double>& universe, const Book& prev, std::size_t K, std::size_t N) {
  std::vector<std::pair<double, std::string>> order;  // (-score, ticker) ascending = best first
  for (const auto& [t, s] : universe) order.push_back({-s, t});
  std::sort(order.begin(), order.end());
  Book top;
  for (std::size_t j = 0; j < order.size() && j < K; ++j) top.push_back(order[j].second);

  std::vector<std::pair<double, std::string>> held;
  for (const auto& t : prev) {
    if (universe.count(t)) held.push_back({-universe.at(t), t});
  }
  std::sort(held.begin(), held.end());
  std::size_t n_sell = std::min(N, held.size());
  Book keep, held_names;
  for (const auto& h : held) held_names.push_back(h.second);
  for (std::size_t j = 0; j + n_sell < held.size(); ++j) keep.push_back(held[j].second);

  Book fresh;
  for (const auto& t : top) {
    if (std::find(held_names.begin(), held_names.end(), t) == held_names.end()) fresh.push_back(t);
  }
  Book book = keep;
  for (std::size_t j = 0; j < fresh.size() && j < n_sell; ++j) book.push_back(fresh[j]);
  for (const auto& t : top) {
    if (book.size() >= K) break;
    if (std::find(book.begin(), book.end(), t) == book.end()) book.push_back(t);
  }
  std::sort(book.begin(), book.end());
  return book;
}

std::vector<std::string> tickers(std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(std::string(1, static_cast<char>('A' + i)));
  return out;
}

TEST(TopkDropn, HandTraceSellsBBuysC) {
  // Score order C > A > D > B > E.
  const Book u = {"A", "B", "C", "D", "E"};
  const std::vector<double> s = {4, 2, 5, 3, 1};
  const auto r = topk_dropn(u, s, {"A", "B"}, 2, 1);
  EXPECT_EQ(r.holdings, (Book{"A", "C"}));
  EXPECT_EQ(r.sells, (Book{"B"}));
  EXPECT_EQ(r.buys, (Book{"C"}));
}

TEST(TopkDropn, FixedPointTradesNothing) {
  const Book u = tickers(6);
  const std::vector<double> s = {6, 5, 4, 3, 2, 1};
  const auto r = topk_dropn(u, s, {"A", "B", "C"}, 3, 2);
  EXPECT_EQ(r.holdings, (Book{"A", "B", "C"}));
  EXPECT_TRUE(r.sells.empty());
  EXPECT_TRUE(r.buys.empty());
}

TEST(TopkDropn, UniverseExitIsReplacedFromTheTopK) {
  // B leaves; the remaining held name A is the sole drop candidate.
  const Book u = {"A", "C", "D", "E"};
  const std::vector<double> s = {3, 4, 2, 1};
  const auto r = topk_dropn(u, s, {"A", "B"}, 2, 1);
  EXPECT_EQ(r.holdings, (Book{"A", "C"}));
  EXPECT_EQ(r.sells, (Book{"B"}));
  EXPECT_EQ(r.buys, (Book{"C"}));
}

TEST(TopkDropn, FirstDayBuysTheTopK) {
  const auto r = topk_dropn(tickers(5), {1, 5, 3, 4, 2}, {}, 3, 1);
  EXPECT_EQ(r.holdings, (Book{"B", "C", "D"}));
  EXPECT_EQ(r.buys.size(), 3u);
}

TEST(TopkDropn, TiesBreakBySmallerTicker) {
  const auto r = topk_dropn({"D", "B", "C", "A"}, {1, 1, 1, 1}, {}, 2, 1);
  EXPECT_EQ(r.holdings, (Book{"A", "B"}));
  // Among tied holdings the larger ticker is dropped first.
  const auto r2 = topk_dropn({"A", "B", "C", "D"}, {1, 1, 1, 2}, {"A", "B"}, 2, 1);
  EXPECT_EQ(r2.holdings, (Book{"A", "D"}));
}

TEST(TopkDropn, SmallUniverseIsHeldInFull) {
  const auto r = topk_dropn({"A", "B"}, {1, 2}, {}, 5, 1);
  EXPECT_EQ(r.holdings, (Book{"A", "B"}));
}

TEST(TopkDropn, MatchesBruteForceOnRandomPanels) {
  Rng rng(17);
  const auto names = tickers(10);
  for (int panel = 0; panel < 200; ++panel) {
    const std::size_t K = std::vector<std::size_t>{2, 3, 5}[panel % 3];
    const std::size_t N = 1 + static_cast<std::size_t>(panel / 3) % 2;
    Book engine_book, brute_book;
    for (int day = 0; day < 50; ++day) {
      std::map<std::string, double> universe;
      Book u;
      std::vector<double> s;
      for (const auto& t : names) {
        if (rng.uniform() < 0.1) continue;  // occasional universe exits
        // Coarse scores so ties are common.
        const double score = std::floor(rng.uniform() * 6.0);
        universe[t] = score;
        u.push_back(t);
        s.push_back(score);
      }
      engine_book = topk_dropn(u, s, engine_book, K, N).holdings;
      brute_book = brute_step(universe, brute_book, K, N);
      ASSERT_EQ(engine_book, brute_book) << "panel " << panel << " day " << day;
      ASSERT_LE(engine_book.size(), K);
    }
  }
}

TEST(DailyReturn, ClosedForms) {
  EXPECT_EQ(daily_log_return(0.0, 0, 0, 5, 15, "d"), 0.0);
  EXPECT_NEAR(daily_log_return(0.05, 0, 0, 0, 0, "d"), 0.048790164169432, 1e-12);
  const double g = daily_log_return(0.0, 1.0 / 30, 1.0 / 30, 5, 15, "d");
  EXPECT_NEAR(g, std::log1p(-(1.0 / 30) * (0.0005 + 0.0015)), 1e-15);
}

TEST(DailyReturn, WipeoutIsANumericError) {
  try {
    daily_log_return(-1.0, 0, 0, 0, 0, "2024-03-01");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::numeric);
    EXPECT_NE(std::string(e.what()).find("2024-03-01"), std::string::npos);
  }
}

TEST(Turnover, ClosedForms) {
  EXPECT_EQ(turnover({"A", "B"}, {"A", "B"}), 0.0);
  EXPECT_NEAR(turnover({"A", "B"}, {"C", "D"}), 1.0, 1e-15);
  Book prev = tickers(26), cur = prev;
  for (int k = 0; k < 4; ++k) {
    prev.push_back("Z" + std::to_string(k));
    cur.push_back("Z" + std::to_string(k));
  }
  cur[0] = "NEW";
  EXPECT_NEAR(turnover(prev, cur), 1.0 / 30, 1e-15);
}

TEST(Metrics, ClosedForms) {
  const auto zero = portfolio_metrics(std::vector<double>(20, 0.0));
  EXPECT_EQ(zero.annual_return, 0.0);
  EXPECT_EQ(zero.max_drawdown, 0.0);
  EXPECT_EQ(zero.cumulative, 0.0);
  const auto steady = portfolio_metrics(std::vector<double>(100, 0.001));
  EXPECT_NEAR(steady.annual_return, std::exp(0.252) - 1, 1e-9);
  EXPECT_TRUE(std::isnan(steady.sharpe));
  EXPECT_NEAR(max_drawdown({1, 1.1, 0.99, 1.2}), 0.1, 1e-12);
}

TEST(Metrics, SharpeMatchesDirectComputation) {
  const std::vector<double> g = {0.01, -0.02, 0.005, 0.0, 0.015};
  double mean = 0;
  for (double x : g) mean += x / 5;
  double ss = 0;
  for (double x : g) ss += (x - mean) * (x - mean);
  EXPECT_NEAR(portfolio_metrics(g).sharpe, std::sqrt(252.0) * mean / std::sqrt(ss / 4), 1e-12);
}

std::vector<CrossSection> random_days(Rng& rng, std::size_t stocks, std::size_t dates) {
  const auto names = tickers(stocks);
  std::vector<CrossSection> days;
  for (std::size_t d = 0; d < dates; ++d) {
    CrossSection cs;
    cs.date = "2024-01-" + std::to_string(10 + d);
    for (const auto& t : names) {
      cs.tickers.push_back(t);
      cs.scores.push_back(rng.normal());
      cs.returns.push_back(rng.normal(0.0005, 0.02));
    }
    days.push_back(cs);
  }
  return days;
}

TEST(Backtest, InvariantsOnRandomPanels) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto days = random_days(rng, 10, 40);
    BacktestConfig cfg;
    cfg.portfolio_size = 3;
    cfg.n_drop = 1 + trial % 3;
    const auto res = run_backtest(days, cfg);
    double acc = 0, wealth = 1;
    for (const auto& d : res.daily) {
      EXPECT_LE(d.holdings.size(), cfg.portfolio_size);
      acc += d.log_return;
      wealth *= std::exp(d.log_return);
    }
    EXPECT_NEAR(wealth, res.daily.back().wealth, 1e-12);
    EXPECT_NEAR(std::expm1(acc), res.metrics.cumulative, 1e-12);
  }
}

TEST(Backtest, CostsOnlySubtract) {
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const auto days = random_days(rng, 12, 30);
    BacktestConfig cfg;
    cfg.portfolio_size = 4;
    cfg.n_drop = 2;
    const auto base = run_backtest(days, cfg);
    const auto& regimes = cost_regimes();
    for (std::size_t a = 0; a + 1 < regimes.size(); ++a) {
      const auto lo = reprice(base, regimes[a].buy_bps, regimes[a].sell_bps);
      const auto hi = reprice(base, regimes[a + 1].buy_bps, regimes[a + 1].sell_bps);
      for (std::size_t d = 0; d < lo.daily.size(); ++d) {
        EXPECT_GE(lo.daily[d].log_return, hi.daily[d].log_return);
        EXPECT_EQ(lo.daily[d].holdings, hi.daily[d].holdings);
      }
    }
    const auto sweep = cost_sweep(days, cfg);
    ASSERT_EQ(sweep.size(), 6u);
    for (const auto& row : sweep) EXPECT_LE(row.metrics.annual_return, sweep.front().metrics.annual_return);
  }
}

TEST(Backtest, ZeroTradeSequenceIsFlatAcrossRegimes) {
  // Fixed scores: after the opening purchase the book never changes.
  std::vector<CrossSection> days;
  for (int d = 0; d < 10; ++d) {
    days.push_back({"2024-02-" + std::to_string(10 + d), {"A", "B", "C", "D"}, {4, 3, 2, 1}, {0.01, -0.01, 0.002, 0.0}});
  }
  BacktestConfig cfg;
  cfg.portfolio_size = 2;
  cfg.n_drop = 1;
  auto res = run_backtest(days, cfg);
  res.daily.erase(res.daily.begin());
  for (const auto& d : res.daily) {
    EXPECT_EQ(d.buys + d.sells, 0u);
    EXPECT_EQ(d.turnover, 0.0);
  }
  const auto ref = reprice(res, 0, 0).metrics;
  for (const auto& regime : cost_regimes()) {
    const auto m = reprice(res, regime.buy_bps, regime.sell_bps).metrics;
    EXPECT_EQ(m.annual_return, ref.annual_return) << regime.name;
    EXPECT_EQ(m.max_drawdown, ref.max_drawdown) << regime.name;
    EXPECT_EQ(m.cumulative, ref.cumulative) << regime.name;
  }
}

TEST(Backtest, NdropTurnoverIsNonDecreasing) {
  Rng rng(9);
  const auto days = random_days(rng, 40, 60);
  BacktestConfig cfg;
  cfg.portfolio_size = 15;
  const auto rows = ndrop_sweep(days, cfg, {1, 3, 5, 7, 10, 15});
  ASSERT_EQ(rows.size(), 6u);
  for (std::size_t k = 1; k < rows.size(); ++k) {
    EXPECT_GE(rows[k].metrics.mean_turnover + 1e-12, rows[k - 1].metrics.mean_turnover) << rows[k].label;
  }
}

TEST(Backtest, ConfigValidation) {
  BacktestConfig cfg;
  cfg.n_drop = 0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg.n_drop = 31;
  EXPECT_THROW(cfg.validate(), Error);
  cfg.n_drop = 5;
  cfg.cost_sell_bps = -1;
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(Backtest, CrossSectionsUseNextDayCloses) {
  data::Panel p;
  p.dates = {"2024-01-02", "2024-01-03", "2024-01-04"};
  p.tickers = {"A", "B"};
  p.close = {10, 20, 11, 19, 12, 20};
  p.open = p.close;
  p.member = {1, 1, 1, 1, 1, 1};
  eval::ScoreTable t;
  t.rows = {{"2024-01-02", "A", 1.0}, {"2024-01-02", "B", 2.0}, {"2024-01-04", "A", 0.5}};
  const auto cs = cross_sections(t, p);
  ASSERT_EQ(cs.size(), 2u);
  EXPECT_NEAR(cs[0].returns[0], 0.1, 1e-15);
  EXPECT_NEAR(cs[0].returns[1], -0.05, 1e-15);
  EXPECT_TRUE(std::isnan(cs[1].returns[0]));  // no next close
}

TEST(Backtest, OutputFiles) {
  Rng rng(10);
  const auto days = random_days(rng, 8, 12);
  BacktestConfig cfg;
  cfg.portfolio_size = 3;
  cfg.n_drop = 1;
  const auto res = run_backtest(days, cfg);
  const auto dir = std::filesystem::temp_directory_path();
  write_daily((dir / "prism_bt_daily.csv").string(), res);
  write_summary((dir / "prism_bt_summary.csv").string(), res.metrics);
  write_sweep((dir / "prism_bt_sweep.csv").string(), cost_sweep(days, cfg));
  const auto daily = csv::read((dir / "prism_bt_daily.csv").string());
  EXPECT_EQ(daily.rows.size(), res.daily.size());
  EXPECT_EQ(daily.header[1], "holdings_hash");
  EXPECT_EQ(csv::read((dir / "prism_bt_sweep.csv").string()).rows.size(), 6u);
  EXPECT_EQ(holdings_hash({"B", "A"}), holdings_hash({"A", "B"}));
  EXPECT_NE(holdings_hash({"A", "B"}), holdings_hash({"AB"}));
}

}  // namespace
