#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cmath>
#include <limits>
#include <memory>

#include "prism/analysis/analysis.hpp"
#include "prism/backtest/backtest.hpp"
#include "prism/common/error.hpp"
#include "prism/datapanel/dataset.hpp"
#include "prism/datapanel/synthetic.hpp"
#include "prism/evaluation/metrics.hpp"
#include "prism/training/config.hpp"
#include "prism/training/trainer.hpp"

namespace py = pybind11;
using namespace prism;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_array(const std::vector<double>& v, std::vector<py::ssize_t> shape) {
  Array out(shape);
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

std::vector<double> to_vector(const Array& a) { return {a.data(), a.data() + a.size()}; }

// Checks that `a` is 2-D with the given shape and returns its rows.
void require_matrix(const Array& a, std::size_t rows, std::size_t cols, const char* name) {
  if (a.ndim() != 2 || static_cast<std::size_t>(a.shape(0)) != rows || static_cast<std::size_t>(a.shape(1)) != cols)
    throw Error(ErrorCategory::usage, std::string(name) + " must have shape (" + std::to_string(rows) + ", " +
                                          std::to_string(cols) + ")");
}

py::dict metrics_dict(const bt::Metrics& m) {
  py::dict d;
  d["annual_return"] = m.annual_return;
  d["max_drawdown"] = m.max_drawdown;
  d["sharpe"] = m.sharpe;
  d["cumulative"] = m.cumulative;
  d["mean_turnover"] = m.mean_turnover;
  d["days"] = m.days;
  return d;
}

// Date-major cross-sections over a [D, N] score/return pair; NaN scores drop
// the cell.
std::vector<bt::CrossSection> backtest_days(const std::vector<std::string>& dates,
                                            const std::vector<std::string>& tickers, const Array& scores,
                                            const Array& returns) {
  require_matrix(scores, dates.size(), tickers.size(), "scores");
  require_matrix(returns, dates.size(), tickers.size(), "returns");
  std::vector<bt::CrossSection> days(dates.size());
  const double* s = scores.data();
  const double* r = returns.data();
  for (std::size_t t = 0; t < dates.size(); ++t) {
    days[t].date = dates[t];
    for (std::size_t i = 0; i < tickers.size(); ++i) {
      const std::size_t k = t * tickers.size() + i;
      if (std::isnan(s[k])) continue;
      days[t].tickers.push_back(tickers[i]);
      days[t].scores.push_back(s[k]);
      days[t].returns.push_back(r[k]);
    }
  }
  return days;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Two-stage vector-quantized stock ranking: data, training, evaluation and backtest.";

  static py::exception<Error> prism_error(m, "PrismError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object err = prism_error;
      py::object inst = err(std::string(category_name(e.category())) + ": " + e.what());
      inst.attr("category") = category_name(e.category());
      PyErr_SetObject(prism_error.ptr(), inst.ptr());
    }
  });

  py::class_<data::SyntheticMarket, std::shared_ptr<data::SyntheticMarket>>(m, "SyntheticMarket")
      .def_property_readonly("dates", [](const data::SyntheticMarket& s) { return s.panel.dates; })
      .def_property_readonly("tickers", [](const data::SyntheticMarket& s) { return s.panel.tickers; })
      .def_property_readonly("feature_names", [](const data::SyntheticMarket& s) { return s.panel.feature_names; })
      .def_property_readonly("prior_names", [](const data::SyntheticMarket& s) { return s.panel.prior_names; })
      .def_property_readonly("features",
                             [](const data::SyntheticMarket& s) {
                               const auto& p = s.panel;
                               return to_array(p.features, {static_cast<py::ssize_t>(p.num_dates()),
                                                            static_cast<py::ssize_t>(p.num_stocks()),
                                                            static_cast<py::ssize_t>(p.num_features())});
                             })
      .def_property_readonly("close",
                             [](const data::SyntheticMarket& s) {
                               return to_array(s.panel.close, {static_cast<py::ssize_t>(s.panel.num_dates()),
                                                               static_cast<py::ssize_t>(s.panel.num_stocks())});
                             })
      .def_property_readonly("factor_returns",
                             [](const data::SyntheticMarket& s) {
                               return to_array(s.panel.factor_returns,
                                               {static_cast<py::ssize_t>(s.panel.num_dates()),
                                                static_cast<py::ssize_t>(s.panel.num_priors())});
                             })
      .def_property_readonly("next_returns",
                             [](const data::SyntheticMarket& s) {
                               // Close-to-next-close return held from each date; NaN on the last.
                               const auto& p = s.panel;
                               const std::size_t D = p.num_dates(), N = p.num_stocks();
                               std::vector<double> r(D * N, std::numeric_limits<double>::quiet_NaN());
                               for (std::size_t t = 0; t + 1 < D; ++t)
                                 for (std::size_t i = 0; i < N; ++i)
                                   r[t * N + i] = p.close[(t + 1) * N + i] / p.close[t * N + i] - 1.0;
                               return to_array(r, {static_cast<py::ssize_t>(D), static_cast<py::ssize_t>(N)});
                             })
      .def_property_readonly("cluster", [](const data::SyntheticMarket& s) { return s.truth.cluster; })
      .def_property_readonly("achievable_ic",
                             [](const data::SyntheticMarket& s) {
                               return to_array(s.truth.achievable_ic,
                                               {static_cast<py::ssize_t>(s.truth.achievable_ic.size())});
                             })
      .def_property_readonly("mean_achievable_ic", [](const data::SyntheticMarket& s) {
        return s.truth.mean_achievable_ic;
      });

  m.def(
      "synthetic_market",
      [](std::size_t n_stocks, std::size_t n_dates, std::size_t n_clusters, double snr, std::size_t n_factors,
         std::size_t n_features, std::uint64_t seed) {
        data::SyntheticConfig cfg;
        cfg.n_stocks = n_stocks;
        cfg.n_dates = n_dates;
        cfg.n_clusters = n_clusters;
        cfg.snr = snr;
        cfg.n_factors = n_factors;
        cfg.n_features = n_features;
        cfg.seed = seed;
        return std::make_shared<data::SyntheticMarket>(data::synthetic_generate(cfg));
      },
      py::arg("n_stocks") = 200, py::arg("n_dates") = 500, py::arg("n_clusters") = 4, py::arg("snr") = 1.0,
      py::arg("n_factors") = 5, py::arg("n_features") = 8, py::arg("seed") = 0,
      "Planted-structure market with known clusters and an achievable-IC oracle.");

  m.def("config_keys", &train::RunConfig::keys, "Every key accepted in a run configuration.");
  m.def(
      "config_text", [](const std::string& text) { return train::parse_config(text).to_text(); },
      py::arg("text") = "", "Canonical text of a configuration after applying `text` over the defaults.");

  m.def(
      "fit_predict",
      [](const data::SyntheticMarket& market, const std::string& config_text, std::uint64_t seed) {
        const auto cfg = train::parse_config(config_text, "<python>");
        std::vector<train::PredictionRow> rows;
        double valid_ic = 0, test_ic = 0;
        std::size_t codes_used = 0;
        {
          py::gil_scoped_release release;
          const auto split = data::split_by_fraction(market.panel.num_dates(), cfg.train_fraction, cfg.valid_fraction);
          const data::Dataset ds(market.panel, split, cfg.dataset_options());
          auto s1 = train::train_stage1(ds, cfg, seed);
          const auto codes = train::assign_codes(ds, s1.model);
          auto s2 = train::train_stage2(ds, s1.model, cfg, seed);
          valid_ic = train::prediction_rank_ic(ds, train::predict(ds, s1.model, s2.model, codes, split.valid));
          rows = train::predict(ds, s1.model, s2.model, codes, split.test);
          test_ic = train::prediction_rank_ic(ds, rows);
          for (auto u : s1.model.codebook.usage) codes_used += u > 0;
        }
        const std::size_t D = market.panel.num_dates(), N = market.panel.num_stocks();
        std::vector<double> scores(D * N, std::numeric_limits<double>::quiet_NaN());
        std::vector<double> code(D * N, -1);
        for (const auto& r : rows) {
          scores[r.date * N + r.stock] = r.score;
          code[r.date * N + r.stock] = r.code;
        }
        py::dict out;
        out["scores"] = to_array(scores, {static_cast<py::ssize_t>(D), static_cast<py::ssize_t>(N)});
        out["codes"] = to_array(code, {static_cast<py::ssize_t>(D), static_cast<py::ssize_t>(N)});
        out["valid_ic"] = valid_ic;
        out["test_ic"] = test_ic;
        out["codes_used"] = codes_used;
        return out;
      },
      py::arg("market"), py::arg("config") = "", py::arg("seed") = 0,
      "Trains both stages on the market and returns test-range scores and codes as (dates, stocks) arrays "
      "with NaN / -1 outside the test range.");

  m.def(
      "spearman", [](const Array& a, const Array& b) { return eval::spearman(to_vector(a), to_vector(b)); },
      py::arg("a"), py::arg("b"), "Spearman correlation with average ranks for ties; NaN when undefined.");

  m.def(
      "rank_ic",
      [](const Array& scores, const Array& returns) {
        if (scores.ndim() != 2) throw Error(ErrorCategory::usage, "scores must be a (dates, stocks) array");
        const std::size_t D = scores.shape(0), N = scores.shape(1);
        require_matrix(returns, D, N, "returns");
        std::vector<eval::CrossSection> days(D);
        for (std::size_t t = 0; t < D; ++t) {
          days[t].date = std::to_string(t);
          for (std::size_t i = 0; i < N; ++i) {
            const double s = scores.data()[t * N + i];
            if (std::isnan(s)) continue;
            days[t].scores.push_back(s);
            days[t].returns.push_back(returns.data()[t * N + i]);
          }
        }
        const auto series = eval::rank_ic(days);
        const auto summary = eval::summarize(series);
        py::dict out;
        out["mean"] = summary.mean;
        out["std"] = summary.stddev;
        out["icir"] = summary.icir;
        out["days"] = summary.days;
        out["series"] = to_array(series.values, {static_cast<py::ssize_t>(series.values.size())});
        return out;
      },
      py::arg("scores"), py::arg("returns"), "Daily rank IC of a (dates, stocks) score panel and its summary.");

  m.def(
      "topk_dropn",
      [](const std::vector<std::string>& universe, const std::vector<double>& scores,
         const std::vector<std::string>& previous, std::size_t k, std::size_t n_drop) {
        const auto r = bt::topk_dropn(universe, scores, previous, k, n_drop);
        py::dict out;
        out["holdings"] = r.holdings;
        out["sells"] = r.sells;
        out["buys"] = r.buys;
        return out;
      },
      py::arg("universe"), py::arg("scores"), py::arg("previous"), py::arg("k"), py::arg("n_drop"),
      "One TopK-DropN rebalance step.");

  m.def(
      "backtest",
      [](const std::vector<std::string>& dates, const std::vector<std::string>& tickers, const Array& scores,
         const Array& returns, std::size_t portfolio_size, std::size_t n_drop, double buy_bps, double sell_bps) {
        bt::BacktestConfig cfg;
        cfg.portfolio_size = portfolio_size;
        cfg.n_drop = n_drop;
        cfg.cost_buy_bps = buy_bps;
        cfg.cost_sell_bps = sell_bps;
        const auto result = bt::run_backtest(backtest_days(dates, tickers, scores, returns), cfg);
        std::vector<double> log_returns, wealth;
        for (const auto& d : result.daily) {
          log_returns.push_back(d.log_return);
          wealth.push_back(d.wealth);
        }
        py::dict out = metrics_dict(result.metrics);
        out["log_returns"] = to_array(log_returns, {static_cast<py::ssize_t>(log_returns.size())});
        out["wealth"] = to_array(wealth, {static_cast<py::ssize_t>(wealth.size())});
        return out;
      },
      py::arg("dates"), py::arg("tickers"), py::arg("scores"), py::arg("returns"), py::arg("portfolio_size") = 30,
      py::arg("n_drop") = 5, py::arg("buy_bps") = 5.0, py::arg("sell_bps") = 15.0,
      "TopK-DropN backtest over (dates, stocks) scores and next-day returns; NaN scores drop a cell.");

  m.def(
      "portfolio_metrics",
      [](const std::vector<double>& log_returns) { return metrics_dict(bt::portfolio_metrics(log_returns)); },
      py::arg("log_returns"), "Annualized return, Sharpe ratio and drawdown of daily log returns.");
  m.def("max_drawdown", &bt::max_drawdown, py::arg("wealth"));

  m.def(
      "wilcoxon",
      [](const std::vector<double>& a, const std::vector<double>& b) {
        const auto r = analysis::wilcoxon_signed_rank(a, b);
        py::dict out;
        out["n"] = r.n;
        out["statistic"] = r.statistic;
        out["p_value"] = r.p_value;
        out["exact"] = r.exact;
        return out;
      },
      py::arg("a"), py::arg("b"), "Two-sided Wilcoxon signed-rank test on paired samples.");
}
