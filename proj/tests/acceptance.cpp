// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit when any
// criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "prism/analysis/analysis.hpp"
#include "prism/backtest/backtest.hpp"
#include "prism/common/log.hpp"
#include "prism/common/rng.hpp"
#include "prism/datapanel/synthetic.hpp"
#include "prism/datapanel/transforms.hpp"
#include "prism/evaluation/metrics.hpp"
#include "prism/training/trainer.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

namespace fs = std::filesystem;
using namespace prism;
using ad::Real;
using ad::Tensor;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// Accumulates sub-checks; the first failure's message is kept.
struct Checks {
  Outcome out;
  void require(bool ok, const std::string& what) {
    if (!ok && out.pass) {
      out.pass = false;
      out.detail = what;
    }
  }
  void note(const std::string& s) {
    if (out.pass) out.detail += (out.detail.empty() ? "" : "; ") + s;
  }
};

Tensor random_tensor(const ad::Shape& shape, Rng& rng, double scale = 1.0) {
  std::vector<Real> v(ad::shape_numel(shape));
  for (auto& x : v) x = static_cast<Real>(rng.normal(0, scale));
  return Tensor::from(shape, std::move(v));
}

// ------------------------------------------------------------------ 1

Outcome gradient_fidelity() {
  Checks c;
  c.require(sizeof(Real) == 8, "built with 32-bit reals; the tolerances apply to 64-bit builds");
  const auto prim = testing::primitive_fidelity(11);
  c.require(prim.max_rel_error <= 1e-5, "primitive " + prim.worst + fmt(" rel err %.3g", prim.max_rel_error));

  spatial::SpatialConfig scfg;
  scfg.features = 3;
  scfg.lookback = 8;
  scfg.priors = 2;
  scfg.horizons = 3;
  scfg.latent_dim = 4;
  scfg.heads = 2;
  scfg.ffn_dim = 6;
  scfg.dropout = 0.0;
  scfg.codebook_size = 5;
  scfg.decoder_hidden = 8;
  scfg.decoder_base = 2;
  scfg.lambda_pred = 0.5;
  Rng rng(27);
  spatial::SpatialModel smodel(scfg, rng);
  for (auto& v : smodel.codebook.codewords.mutable_values()) v = static_cast<Real>(rng.normal(0, 0.8));
  const auto sp = testing::spatial_objective_fidelity(smodel, testing::toy_spatial_batch(scfg, 4, 28));
  c.require(sp.max_rel_error <= 1e-4, "spatial objective " + sp.worst + fmt(" rel err %.3g", sp.max_rel_error));

  temporal::TemporalConfig tcfg;
  tcfg.features = 3;
  tcfg.lookback = 6;
  tcfg.priors = 2;
  tcfg.latent_dim = 4;
  tcfg.model_dim = 8;
  tcfg.heads = 2;
  tcfg.ffn_dim = 6;
  tcfg.dropout = 0.1;
  tcfg.experts = 2;
  tcfg.top_k = 1;
  tcfg.expert_hidden = 5;
  tcfg.trend_window = 3;
  tcfg.lambda_balance = 0.3;
  tcfg.lambda_reg = 0.2;
  Rng trng(34);
  temporal::TemporalModel tmodel(tcfg, trng);
  const auto tp = testing::temporal_objective_fidelity(tmodel, testing::toy_temporal_batch(tcfg, 4, 35), 36);
  c.require(tp.max_rel_error <= 1e-4, "temporal objective " + tp.worst + fmt(" rel err %.3g", tp.max_rel_error));
  c.note("max rel err primitives " + fmt("%.2e", prim.max_rel_error) + ", spatial " +
         fmt("%.2e", sp.max_rel_error) + ", temporal " + fmt("%.2e", tp.max_rel_error));
  return c.out;
}

// ------------------------------------------------------------------ 2

Outcome vq_contract() {
  Checks c;
  const std::size_t K = 64, d = 8, Q = 10000;
  Rng rng(5);
  spatial::Codebook cb(K, d, rng);
  for (auto& v : cb.codewords.mutable_values()) v = static_cast<Real>(rng.normal());
  const Tensor z = random_tensor({Q, d}, rng);
  const auto a = spatial::quantize(z, cb);
  const auto zv = z.values();
  const auto cv = cb.codewords.values();
  std::size_t mismatches = 0;
  for (std::size_t i = 0; i < Q; ++i) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) {
      double dist = 0;
      for (std::size_t j = 0; j < d; ++j) dist += (zv[i * d + j] - cv[k * d + j]) * (zv[i * d + j] - cv[k * d + j]);
      if (dist < best_d) best_d = dist, best = k;
    }
    if (a.index[i] != best) ++mismatches;
  }
  c.require(mismatches == 0, std::to_string(mismatches) + " of 10^4 queries disagree with the exhaustive search");

  const auto self = spatial::quantize(cb.codewords.detach(), cb);
  bool identity = true;
  for (std::size_t k = 0; k < K; ++k) identity = identity && self.index[k] == k;
  c.require(identity, "a codebook row is not assigned to itself");
  const double zero = spatial::vq_loss(cb.codewords.detach(), self.quantized.detach(), 0.25).item();
  c.require(zero == 0.0, "vq_loss on codebook rows is " + fmt("%.3g", zero));

  // Composite check: head(st(z, zq)) + ||sg(z) - zq||^2 + lambda ||z - sg(zq)||^2
  // has dz = head'(zq) + 2 lambda (z - zq).
  ad::Tape::current().clear();
  const double lambda = 0.25;
  Rng r2(3);
  Tensor zz = random_tensor({2, 3}, r2), zq = random_tensor({2, 3}, r2);
  nn::Linear head(3, 1, true, r2);
  zz.set_requires_grad(true);
  auto head_loss = [&](const Tensor& in) { return ad::sum(ad::square(ad::tanh(head.forward(in)))); };
  Tensor loss = ad::add(head_loss(ad::straight_through(zz, zq)),
                        ad::add(ad::sum(ad::square(ad::sub(zz.detach(), zq))),
                                ad::scale(ad::sum(ad::square(ad::sub(zz, zq.detach()))), lambda)));
  ad::backward(loss);
  std::vector<double> analytic(zz.grad().begin(), zz.grad().end());
  ad::Tape::current().clear();
  double worst = 0;
  {
    ad::NoGradGuard guard;
    Tensor probe = zq.clone();
    auto values = probe.mutable_values();
    for (std::size_t i = 0; i < probe.numel(); ++i) {
      const Real saved = values[i];
      values[i] = saved + 1e-5;
      const double up = head_loss(probe).item();
      values[i] = saved - 1e-5;
      const double down = head_loss(probe).item();
      values[i] = saved;
      const double expected = (up - down) / 2e-5 + 2 * lambda * (zz[i] - zq[i]);
      worst = std::max(worst, testing::relative_error(analytic[i], expected));
    }
  }
  c.require(worst <= 1e-5, "straight-through composite rel err " + fmt("%.3g", worst));
  c.note("10^4 queries exact, codebook rows loss 0, straight-through rel err " + fmt("%.2e", worst));
  return c.out;
}

// ------------------------------------------------------------------ 3

temporal::GatingOutput manual_gating(std::size_t experts, const std::vector<std::vector<std::size_t>>& selected) {
  temporal::GatingOutput g;
  g.selected = selected;
  std::vector<Real> w(selected.size() * experts, 0);
  for (std::size_t i = 0; i < selected.size(); ++i)
    for (std::size_t j : selected[i]) w[i * experts + j] = Real(1) / static_cast<Real>(selected[i].size());
  g.weights = Tensor::from({selected.size(), experts}, std::move(w));
  return g;
}

Outcome load_balance() {
  Checks c;
  double worst = 0;
  for (std::size_t experts : {2u, 4u, 8u}) {
    for (std::size_t k = 1; k <= experts; ++k) {
      std::vector<std::vector<std::size_t>> sel(experts);
      for (std::size_t i = 0; i < experts; ++i)
        for (std::size_t o = 0; o < k; ++o) sel[i].push_back((i + o) % experts);
      const double got = temporal::load_balance_loss(manual_gating(experts, sel)).item();
      worst = std::max(worst, std::abs(got - static_cast<double>(k)));
    }
    std::vector<std::vector<std::size_t>> conc(9, std::vector<std::size_t>{0});
    const double got = temporal::load_balance_loss(manual_gating(experts, conc)).item();
    worst = std::max(worst, std::abs(got - static_cast<double>(experts)));
  }
  c.require(worst <= 1e-12, "closed-form deviation " + fmt("%.3g", worst));
  c.note("max deviation " + fmt("%.1e", worst) + " over M_e in {2,4,8}");
  return c.out;
}

// ------------------------------------------------------------------ 4

Outcome spearman_oracle() {
  Checks c;
  Rng rng(13);
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.index(40);
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = std::floor(rng.uniform() * 6);  // frequent ties
      b[i] = trial % 2 ? rng.normal() : std::floor(rng.uniform() * 4);
    }
    const double got = eval::spearman(a, b), want = testing::brute_spearman(a, b);
    if (std::isnan(want)) {
      c.require(std::isnan(got), "defined Spearman where the oracle is undefined");
      continue;
    }
    worst = std::max(worst, std::abs(got - want));
  }
  c.require(worst <= 1e-12, "max deviation " + fmt("%.3g", worst));
  const double hand = eval::spearman(std::vector<double>{1, 2, 3, 4}, std::vector<double>{1, 3, 2, 4});
  c.require(std::abs(hand - 0.8) <= 1e-12, "hand example gives " + fmt("%.17g", hand));
  c.note("1000 pairs max deviation " + fmt("%.1e", worst) + ", hand example " + fmt("%.15g", hand));
  return c.out;
}

// ------------------------------------------------------------------ 5

using Book = std::vector<std::string>;

Book brute_step(const std::map<std::string, double>& universe, const Book& prev, std::size_t K, std::size_t N) {
  std::vector<std::pair<double, std::string>> order;
  for (const auto& [t, s] : universe) order.push_back({-s, t});
  std::sort(order.begin(), order.end());
  Book top;
  for (std::size_t j = 0; j < order.size() && j < K; ++j) top.push_back(order[j].second);
  std::vector<std::pair<double, std::string>> held;
  for (const auto& t : prev)
    if (universe.count(t)) held.push_back({-universe.at(t), t});
  std::sort(held.begin(), held.end());
  const std::size_t n_sell = std::min(N, held.size());
  Book keep, held_names;
  for (const auto& h : held) held_names.push_back(h.second);
  for (std::size_t j = 0; j + n_sell < held.size(); ++j) keep.push_back(held[j].second);
  Book fresh;
  for (const auto& t : top)
    if (std::find(held_names.begin(), held_names.end(), t) == held_names.end()) fresh.push_back(t);
  Book book = keep;
  for (std::size_t j = 0; j < fresh.size() && j < n_sell; ++j) book.push_back(fresh[j]);
  for (const auto& t : top) {
    if (book.size() >= K) break;
    if (std::find(book.begin(), book.end(), t) == book.end()) book.push_back(t);
  }
  std::sort(book.begin(), book.end());
  return book;
}

Outcome backtest_equivalence() {
  Checks c;
  Book names;
  for (char ch = 'A'; ch < 'A' + 10; ++ch) names.push_back(std::string(1, ch));
  Rng rng(17);
  std::size_t days_checked = 0;
  for (int panel = 0; panel < 200 && c.out.pass; ++panel) {
    const std::size_t K = std::vector<std::size_t>{2, 3, 5}[panel % 3];
    const std::size_t N = 1 + static_cast<std::size_t>(panel / 3) % 2;
    Book engine, brute;
    for (int day = 0; day < 50; ++day) {
      std::map<std::string, double> universe;
      Book u;
      std::vector<double> s;
      for (const auto& t : names) {
        if (rng.uniform() < 0.1) continue;
        const double score = std::floor(rng.uniform() * 6.0);
        universe[t] = score;
        u.push_back(t);
        s.push_back(score);
      }
      engine = bt::topk_dropn(u, s, engine, K, N).holdings;
      brute = brute_step(universe, brute, K, N);
      ++days_checked;
      if (engine != brute) {
        c.require(false, "panel " + std::to_string(panel) + " day " + std::to_string(day) + " differs");
        break;
      }
    }
  }
  const auto r = bt::topk_dropn({"A", "B", "C", "D", "E"}, {4, 2, 5, 3, 1}, {"A", "B"}, 2, 1);
  c.require(r.sells == Book{"B"} && r.buys == Book{"C"}, "hand trace does not sell {B} and buy {C}");
  c.note(std::to_string(days_checked) + " panel-days identical; hand trace sells {B}, buys {C}");
  return c.out;
}

// ------------------------------------------------------------------ 6

Outcome metric_closed_forms() {
  Checks c;
  const auto m = bt::portfolio_metrics(std::vector<double>(252, 0.001));
  const double ar_err = std::abs(m.annual_return - (std::exp(0.252) - 1));
  c.require(ar_err <= 1e-9, "AR deviation " + fmt("%.3g", ar_err));
  const double mdd = bt::max_drawdown({1, 1.1, 0.99, 1.2});
  c.require(std::abs(mdd - 0.1) <= 1e-12, "MDD gives " + fmt("%.17g", mdd));

  Rng rng(21);
  std::size_t sequences = 0;
  for (int trial = 0; trial < 50 && c.out.pass; ++trial) {
    std::vector<bt::CrossSection> days;
    for (int d = 0; d < 60; ++d) {
      bt::CrossSection cs;
      cs.date = "d" + std::to_string(1000 + d);
      for (int i = 0; i < 12; ++i) {
        cs.tickers.push_back("S" + std::to_string(10 + i));
        cs.scores.push_back(rng.normal());
        cs.returns.push_back(rng.normal(0.0005, 0.02));
      }
      days.push_back(cs);
    }
    bt::BacktestConfig cfg;
    cfg.portfolio_size = 4;
    cfg.n_drop = 1 + static_cast<std::size_t>(trial % 3);
    const auto trades = bt::run_backtest(days, cfg);
    std::vector<bt::BacktestResult> priced;
    for (const auto& regime : bt::cost_regimes()) priced.push_back(bt::reprice(trades, regime.buy_bps, regime.sell_bps));
    for (std::size_t k = 1; k < priced.size(); ++k) {
      for (std::size_t d = 0; d < trades.daily.size(); ++d)
        c.require(priced[k].daily[d].log_return <= priced[k - 1].daily[d].log_return,
                  "daily return rises with costs in trial " + std::to_string(trial));
      c.require(priced[k].metrics.cumulative <= priced[k - 1].metrics.cumulative,
                "cumulative return rises with costs in trial " + std::to_string(trial));
    }
    ++sequences;
  }
  c.note("AR deviation " + fmt("%.1e", ar_err) + ", MDD " + fmt("%.12g", mdd) + ", monotone over " +
         std::to_string(sequences) + " trade sequences x 6 regimes");
  return c.out;
}

// ------------------------------------------------------------------ 7

Outcome prior_factors() {
  Checks c;
  data::Panel p;
  for (int d = 0; d < 21; ++d) p.dates.push_back("2020-01-" + std::to_string(10 + d));
  p.prior_names = {"p01"};
  p.factor_returns.assign(21, 0.01);
  const double v = data::prior_factor_window(p, 20, 20)[0];
  // 1.01^20 - 1 = 0.22019003996..., so 0.220190 is that value to six places.
  c.require(std::abs(v - (std::pow(1.01, 20) - 1)) <= 1e-9, "window value " + fmt("%.12g", v));
  c.require(std::abs(v - 0.220190) <= 5e-7, "window value " + fmt("%.12g", v) + " does not round to 0.220190");

  Rng rng(12);
  data::Panel q;
  for (int d = 0; d < 30; ++d) q.dates.push_back("2020-02-" + std::to_string(10 + d));
  q.prior_names = {"p01", "p02"};
  for (int k = 0; k < 60; ++k) q.factor_returns.push_back(rng.normal(0, 0.01));
  for (std::size_t t = 20; t < 30; ++t) {
    auto moved = q;
    for (std::size_t s = t; s < 30; ++s) moved.factor_returns[s * 2] = 0.5, moved.factor_returns[s * 2 + 1] = -0.5;
    c.require(data::prior_factor_window(moved, t, 20) == data::prior_factor_window(q, t, 20),
              "prior window at " + std::to_string(t) + " reads day t or later");
  }

  const std::size_t D = 20, N = 3;
  std::vector<double> open(D * N), close(D * N);
  for (auto& x : open) x = rng.uniform(10, 20);
  for (auto& x : close) x = rng.uniform(10, 20);
  for (std::size_t t = 0; t < D; ++t)
    for (std::size_t h = 1; h <= 9; ++h) {
      const auto base = data::forward_returns(open, close, D, N, h);
      auto o2 = open, c2 = close;
      for (std::size_t s = 0; s <= t; ++s)
        for (std::size_t i = 0; i < N; ++i) o2[s * N + i] *= 1.7, c2[s * N + i] *= 0.6;
      const auto moved = data::forward_returns(o2, c2, D, N, h);
      for (std::size_t i = 0; i < N; ++i) {
        const double a = base[t * N + i], b = moved[t * N + i];
        c.require((std::isnan(a) && std::isnan(b)) || a == b, "target at " + std::to_string(t) + " reads day t prices");
      }
    }

  // Model inputs at a test date ignore every later panel value.
  data::SyntheticConfig sc;
  sc.n_stocks = 20;
  sc.n_dates = 120;
  sc.n_factors = 3;
  sc.n_features = 5;
  const auto market = data::synthetic_generate(sc);
  const auto split = data::split_by_fraction(sc.n_dates, 0.6, 0.2);
  const data::DatasetOptions opts;
  const std::size_t t = split.test.begin + 5;
  data::Panel later = market.panel;
  for (std::size_t s = t + 1; s < later.num_dates(); ++s) {
    for (std::size_t k = 0; k < later.num_stocks() * later.num_features(); ++k)
      later.features[s * later.num_stocks() * later.num_features() + k] += 3.0;
    for (std::size_t k = 0; k < later.num_priors(); ++k) later.factor_returns[s * later.num_priors() + k] = 0.2;
  }
  const data::Dataset a(market.panel, split, opts), b(later, split, opts);
  const auto stocks = a.stocks_at(t, false);
  c.require(a.window(t, stocks) == b.window(t, stocks), "feature window reads later dates");
  c.require(a.priors(t) == b.priors(t), "prior factors read later dates");
  c.note("window value " + fmt("%.9f", v) + "; targets, prior windows and model inputs unchanged by perturbation");
  return c.out;
}

// ------------------------------------------------------------------ 8

std::uint64_t bytes_hash(const std::vector<double>& v) {
  std::uint64_t h = 1469598103934665603ull;
  const auto* p = reinterpret_cast<const unsigned char*>(v.data());
  for (std::size_t k = 0; k < v.size() * sizeof(double); ++k) h = (h ^ p[k]) * 1099511628211ull;
  return h;
}

Outcome freeze_contract() {
  Checks c;
  data::SyntheticConfig sc;
  sc.n_stocks = 16;
  sc.n_dates = 100;
  sc.n_clusters = 2;
  sc.n_features = 5;
  sc.n_factors = 3;
  const auto market = data::synthetic_generate(sc);
  const auto cfg = train::parse_config(
      "latent_dim = 8\nspatial_ffn = 16\ncodebook_size = 8\ndecoder_hidden = 8\n"
      "model_dim = 8\ntemporal_ffn = 16\nexpert_hidden = 8\n"
      "stage1_epochs = 2\nstage2_epochs = 3\npatience = 3\nlearning_rate = 1e-3\n",
      "acceptance");
  const data::Dataset ds(market.panel, data::split_by_fraction(sc.n_dates, 0.6, 0.2), cfg.dataset_options());
  auto s1 = train::train_stage1(ds, cfg, 0);
  const auto params = train::parameter_hash(s1.model.parameters());
  const auto codewords = bytes_hash(std::vector<double>(s1.model.codebook.codewords.values().begin(),
                                                        s1.model.codebook.codewords.values().end()));
  const auto usage = bytes_hash(s1.model.codebook.usage);
  const auto s2 = train::train_stage2(ds, s1.model, cfg, 0);
  c.require(train::parameter_hash(s1.model.parameters()) == params, "Stage-1 parameter bytes changed");
  c.require(bytes_hash(std::vector<double>(s1.model.codebook.codewords.values().begin(),
                                           s1.model.codebook.codewords.values().end())) == codewords,
            "codebook bytes changed");
  c.require(bytes_hash(s1.model.codebook.usage) == usage, "codebook usage changed");
  char buf[80];
  std::snprintf(buf, sizeof buf, "parameter hash %016llx unchanged after %zu stage-2 epochs",
                static_cast<unsigned long long>(params), s2.log.rows.empty() ? std::size_t{0} : s2.log.rows.back().epoch);
  c.note(buf);
  return c.out;
}

// ------------------------------------------------------------------ 9

double mean_sharpe_of_random_scores(const eval::ScoreTable& model_scores, const data::Panel& panel,
                                    const bt::BacktestConfig& cfg, std::size_t draws) {
  double sum = 0;
  for (std::size_t k = 0; k < draws; ++k) {
    Rng rng(1000 + k);
    eval::ScoreTable random = model_scores;
    for (auto& row : random.rows) row.score = rng.uniform();
    sum += bt::run_backtest(bt::cross_sections(random, panel), cfg).metrics.sharpe;
  }
  return sum / static_cast<double>(draws);
}

Outcome synthetic_recovery(const std::string& config_path) {
  Checks c;
  const auto t0 = std::chrono::steady_clock::now();
  data::SyntheticConfig sc;  // 200 stocks, 500 dates, 4 clusters, SNR 1, seed 0
  const auto market = data::synthetic_generate(sc);
  const auto cfg = train::load_config(config_path);
  const auto split = data::split_by_fraction(sc.n_dates, cfg.train_fraction, cfg.valid_fraction);
  const data::Dataset ds(market.panel, split, cfg.dataset_options());
  const std::uint64_t seed = cfg.seeds.front();

  auto s1 = train::train_stage1(ds, cfg, seed);
  const auto codes = train::assign_codes(ds, s1.model);
  std::map<int, std::vector<std::size_t>> votes;
  for (std::size_t t = split.test.begin; t < split.test.end; ++t)
    for (std::size_t i = 0; i < ds.num_stocks(); ++i) {
      const int code = codes.at(t, i);
      if (code < 0) continue;
      auto& v = votes[code];
      v.resize(sc.n_clusters, 0);
      ++v[market.truth.cluster[i]];
    }
  double agree = 0, total = 0;
  for (const auto& [code, v] : votes) {
    agree += static_cast<double>(*std::max_element(v.begin(), v.end()));
    for (auto x : v) total += static_cast<double>(x);
  }
  const double purity = total > 0 ? agree / total : 0.0;

  auto s2 = train::train_stage2(ds, s1.model, cfg, seed);
  const auto rows = train::predict(ds, s1.model, s2.model, codes, split.test);
  const double ic = train::prediction_rank_ic(ds, rows);
  double achievable = 0;
  std::size_t n = 0;
  for (std::size_t t = split.test.begin; t < split.test.end; ++t)
    if (std::isfinite(market.truth.achievable_ic[t])) achievable += market.truth.achievable_ic[t], ++n;
  achievable /= static_cast<double>(std::max<std::size_t>(n, 1));

  eval::ScoreTable scores;
  for (const auto& r : rows) scores.rows.push_back({market.panel.dates[r.date], market.panel.tickers[r.stock], r.score});
  bt::BacktestConfig bcfg;
  bcfg.portfolio_size = 2;
  bcfg.n_drop = 1;
  const double sharpe = bt::run_backtest(bt::cross_sections(scores, market.panel), bcfg).metrics.sharpe;
  const double random_sharpe = mean_sharpe_of_random_scores(scores, market.panel, bcfg, 20);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  c.require(ic >= 0.5 * achievable, "test RankIC " + fmt("%.4f", ic) + " below half of achievable " + fmt("%.4f", achievable));
  c.require(purity >= 0.6, "cluster purity " + fmt("%.3f", purity));
  c.require(sharpe > random_sharpe, "Top2-Drop1 SR " + fmt("%.3f", sharpe) + " vs random " + fmt("%.3f", random_sharpe));
  c.require(seconds <= 600, "took " + fmt("%.0f s", seconds));
  c.note("RankIC " + fmt("%.4f", ic) + " vs achievable " + fmt("%.4f", achievable) + ", purity " +
         fmt("%.3f", purity) + ", SR " + fmt("%.3f", sharpe) + " vs random " + fmt("%.3f", random_sharpe) + ", " +
         fmt("%.0f s", seconds));
  return c.out;
}

// ------------------------------------------------------------------ 10

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

bool run_cli(const std::string& exe, const std::string& args, const fs::path& log) {
  const std::string cmd = "PRISM_VQ_THREADS=1 '" + exe + "' " + args + " --quiet >> '" + log.string() + "' 2>&1";
  return std::system(cmd.c_str()) == 0;
}

// Runs the full command sequence into `dir`; returns "" or the failing step.
std::string cli_pipeline(const std::string& exe, const fs::path& dir, const fs::path& conf) {
  const std::string d = dir.string(), c = "--config '" + conf.string() + "'";
  const fs::path log = dir / "cli.log";
  fs::create_directories(dir);
  const std::vector<std::string> steps = {
      "gen-data " + c + " --seed 0 --out '" + d + "/data'",
      "train --stage 1 " + c + " --seed 0 --data '" + d + "/data' --out '" + d + "'",
      "train --stage 2 " + c + " --seed 0 --data '" + d + "/data' --out '" + d + "'",
      "predict " + c + " --seed 0 --data '" + d + "/data' --out '" + d + "'",
      "ensemble " + c + " --seed 0 --out '" + d + "'",
      "evaluate " + c + " --data '" + d + "/data' --scores '" + d + "/ensemble.csv' --out '" + d + "/eval'",
      "backtest " + c + " --data '" + d + "/data' --scores '" + d + "/ensemble.csv' --out '" + d + "/backtest'",
      "sweep --mode costs " + c + " --data '" + d + "/data' --scores '" + d + "/ensemble.csv' --out '" + d +
          "/sweep_costs'",
      "analyze --what codes " + c + " --predictions '" + d + "/seed_0/predictions.csv' --out '" + d + "/analysis'",
      "analyze --what experts " + c + " --predictions '" + d + "/seed_0/predictions.csv' --out '" + d + "/analysis'",
  };
  for (const auto& s : steps)
    if (!run_cli(exe, s, log)) return s.substr(0, s.find(' '));
  return "";
}

Outcome cli_determinism(const std::string& exe) {
  Checks c;
  if (exe.empty() || !fs::exists(exe)) {
    c.require(false, "the prism_vq executable was not built");
    return c.out;
  }
  const fs::path root = fs::temp_directory_path() / "prism_vq_acceptance_cli";
  fs::remove_all(root);
  fs::create_directories(root);
  const fs::path conf = root / "tiny.conf";
  std::ofstream(conf) << "n_stocks = 40\nn_dates = 160\nn_clusters = 2\nn_factors = 3\nn_features = 6\n"
                         "latent_dim = 8\nspatial_ffn = 16\ncodebook_size = 8\ndecoder_hidden = 8\n"
                         "model_dim = 8\ntemporal_ffn = 16\nexpert_hidden = 8\nlearning_rate = 1e-3\n"
                         "stage1_epochs = 2\nstage2_epochs = 2\npatience = 2\nseeds = 0\n"
                         "portfolio_size = 5\nn_drop = 1\ntransition_codes = 8\n";
  for (const char* run : {"a", "b"}) {
    const auto failed = cli_pipeline(exe, root / run, conf);
    c.require(failed.empty(), "run " + std::string(run) + " failed at '" + failed + "'; see " +
                                  (root / run / "cli.log").string());
  }
  if (!c.out.pass) return c.out;

  const std::vector<std::string> metric_files = {
      "data/features.csv",    "data/prices.csv",          "data/priors.csv",      "seed_0/predictions.csv",
      "ensemble.csv",         "eval/metrics.csv",         "eval/ic_series.csv",   "backtest/daily.csv",
      "backtest/summary.csv", "sweep_costs/sweep.csv",    "analysis/persistence.csv", "analysis/spikes.csv",
      "analysis/wilcoxon.csv", "seed_0/stage1_log.csv",   "seed_0/stage2_log.csv"};
  for (const auto& f : metric_files) {
    const fs::path a = root / "a" / f, b = root / "b" / f;
    c.require(fs::exists(a) && fs::exists(b), f + " missing");
    if (fs::exists(a) && fs::exists(b)) c.require(slurp(a) == slurp(b), f + " differs between runs");
  }
  const std::string sweep = slurp(root / "a/sweep_costs/sweep.csv");
  const auto sweep_rows = static_cast<std::size_t>(std::count(sweep.begin(), sweep.end(), '\n'));
  c.require(sweep_rows == 7, "cost sweep has " + std::to_string(sweep_rows - 1) + " rows");
  c.note(std::to_string(metric_files.size()) + " files byte-identical across two single-threaded runs");
  fs::remove_all(root);
  return c.out;
}

// ------------------------------------------------------------------ 11

Outcome analysis_sanity() {
  Checks c;
  Rng rng(3);
  analysis::AssignmentHistory h;
  for (int d = 0; d < 150; ++d) h.dates.push_back("d" + std::to_string(1000 + d));
  for (int i = 0; i < 50; ++i) h.tickers.push_back("S" + std::to_string(100 + i));
  h.codes.resize(h.dates.size() * h.tickers.size());
  for (auto& code : h.codes) code = static_cast<int>(rng.index(20));
  for (std::size_t horizon : {21u, 63u}) {
    const auto t = analysis::code_transitions(h, horizon, 12);
    const std::size_t k = t.codes.size();
    for (std::size_t a = 0; a < k; ++a) {
      if (t.row_count[a] == 0) continue;
      double s = 0;
      for (std::size_t b = 0; b < k; ++b) s += t.probability[a * k + b];
      c.require(std::abs(s - 1.0) <= 1e-12, "transition row sums to " + fmt("%.17g", s));
    }
  }
  for (std::size_t d = 0; d < h.dates.size(); ++d)
    for (std::size_t i = 0; i < h.tickers.size(); ++i) h.codes[d * h.tickers.size() + i] = static_cast<int>(i % 7);
  const auto constant = analysis::code_transitions(h, 21, 100);
  c.require(constant.persistence == 1.0, "constant assignment persistence " + fmt("%.17g", constant.persistence));

  analysis::ActivationPanel panel;
  panel.experts = 1;
  for (std::size_t d = 0; d < 100000; ++d) {
    panel.dates.push_back(std::to_string(d));
    panel.values.push_back(rng.normal());
  }
  const auto spikes = analysis::expert_spikes(panel, 1.5);
  const double rate = static_cast<double>(spikes.spikes[0].size()) / 100000.0;
  c.require(std::abs(rate - 0.0668) <= 0.015, "spike rate " + fmt("%.4f", rate));

  // Exact signed-rank p at n = 8 against enumeration of all 2^8 sign patterns.
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> a(8), b(8), diff(8);
    for (std::size_t i = 0; i < 8; ++i) {
      a[i] = rng.normal() + 0.4 * (trial % 3);
      b[i] = rng.normal();
      diff[i] = a[i] - b[i];
    }
    std::vector<std::size_t> order(8);
    for (std::size_t i = 0; i < 8; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](auto x, auto y) { return std::abs(diff[x]) < std::abs(diff[y]); });
    double wp = 0, wm = 0;
    for (std::size_t r = 0; r < 8; ++r) (diff[order[r]] > 0 ? wp : wm) += static_cast<double>(r + 1);
    const double w = std::min(wp, wm);
    std::size_t hits = 0;
    for (unsigned mask = 0; mask < 256; ++mask) {
      double p = 0, m = 0;
      for (std::size_t r = 0; r < 8; ++r) ((mask >> r) & 1 ? p : m) += static_cast<double>(r + 1);
      if (std::min(p, m) <= w) ++hits;
    }
    const auto res = analysis::wilcoxon_signed_rank(a, b);
    worst = std::max(worst, std::abs(res.p_value - static_cast<double>(hits) / 256.0));
  }
  c.require(worst <= 1e-12, "signed-rank p deviates from enumeration by " + fmt("%.3g", worst));
  c.note("rows stochastic, constant persistence 1, spike rate " + fmt("%.4f", rate) +
         ", exact p deviation " + fmt("%.1e", worst));
  return c.out;
}

}  // namespace

int main(int argc, char** argv) {
  log::set_level(log::Level::quiet);
  const std::string exe = argc > 1 ? argv[1] : "";
  const std::string config = argc > 2 ? argv[2] : "configs/desk.conf";

  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "gradient fidelity", gradient_fidelity},
      {2, "VQ contract", vq_contract},
      {3, "load-balance closed forms", load_balance},
      {4, "Spearman oracle", spearman_oracle},
      {5, "backtest engine equivalence", backtest_equivalence},
      {6, "metric closed forms", metric_closed_forms},
      {7, "prior-factor correctness", prior_factors},
      {8, "freeze contract", freeze_contract},
      {9, "synthetic recovery", [&] { return synthetic_recovery(config); }},
      {10, "CLI determinism", [&] { return cli_determinism(exe); }},
      {11, "analysis sanity", analysis_sanity},
  };

  int failed = 0;
  for (const auto& crit : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = crit.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s %2d %s (%.1f s): %s\n", o.pass ? "PASS" : "FAIL", crit.id, crit.name, s, o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failed;
  }
  return failed == 0 ? 0 : 1;
}
