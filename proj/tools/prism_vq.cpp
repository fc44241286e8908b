#include <CLI11.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <nlohmann/json.hpp>
#include <string>
#include <unordered_map>
#include <vector>

#include "prism/analysis/analysis.hpp"
#include "prism/backtest/backtest.hpp"
#include "prism/common/csv.hpp"
#include "prism/common/error.hpp"
#include "prism/common/log.hpp"
#include "prism/common/parallel.hpp"
#include "prism/datapanel/synthetic.hpp"
#include "prism/evaluation/metrics.hpp"
#include "prism/evaluation/scores.hpp"
#include "prism/training/trainer.hpp"

namespace fs = std::filesystem;
using namespace prism;

namespace {

Error usage_error(const std::string& m) { return Error(ErrorCategory::usage, m); }

int exit_code(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::usage: return 2;
    case ErrorCategory::config: return 3;
    case ErrorCategory::data: return 4;
    case ErrorCategory::io: return 5;
    case ErrorCategory::numeric: return 6;
    case ErrorCategory::state: return 7;
  }
  return 1;
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot read " + path.string() + " for hashing");
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in.read(buf.data(), static_cast<std::streamsize>(buf.size())) || in.gcount() > 0)
    EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::string hex;
  char byte[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(byte, sizeof byte, "%02x", md[i]);
    hex += byte;
  }
  return hex;
}

// Options shared by every subcommand.
struct Common {
  std::string config;
  std::string seeds;
  std::string out;
  std::string market;
  std::vector<std::string> overrides;
  bool quiet = false;
};

struct Inputs {
  std::string data;
  std::string scores;
  std::string predictions;
  std::string baseline;
  std::string checkpoint;
  std::vector<std::string> files;
  std::string range = "test";
  std::string mode;
  std::string what;
  std::vector<std::size_t> n_values{1, 3, 5, 7, 10, 15};
  int stage = 0;
};

// One command invocation: resolved config, output directory, and the
// provenance record written as the run manifest.
class Run {
 public:
  Run(std::string name, const Common& common, std::string command_line)
      : name_(std::move(name)), command_line_(std::move(command_line)), start_(std::chrono::steady_clock::now()) {
    config_path_ = common.config;
    cfg = common.config.empty() ? train::RunConfig{} : train::load_config(common.config);
    if (!common.market.empty()) cfg.set("market", common.market);
    for (const auto& kv : common.overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw usage_error("--set expects KEY=VALUE, got '" + kv + "'");
      cfg.set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
    }
    if (!common.seeds.empty()) cfg.set("seeds", common.seeds);
    cfg.validate();
    if (common.out.empty()) throw usage_error("--out DIR is required");
    out = common.out;
    fs::create_directories(out);
  }

  train::RunConfig cfg;
  fs::path out;

  void input(const fs::path& p) {
    if (!fs::exists(p)) throw usage_error("input file " + p.string() + " does not exist; check the path or create it first");
    inputs_.push_back(p);
  }
  void output(const fs::path& p) { outputs_.push_back(p); }

  fs::path seed_dir(std::uint64_t seed) const {
    fs::path d = out / ("seed_" + std::to_string(seed));
    fs::create_directories(d);
    return d;
  }

  void finish() const {
    nlohmann::ordered_json m;
    m["command"] = name_;
    m["command_line"] = command_line_;
    m["config_path"] = config_path_;
    m["config"] = cfg.to_text();
    m["seeds"] = cfg.seeds;
    m["threads"] = worker_threads();
    auto files = [](const std::vector<fs::path>& list) {
      nlohmann::ordered_json arr = nlohmann::ordered_json::array();
      for (const auto& p : list) arr.push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});
      return arr;
    };
    m["inputs"] = files(inputs_);
    m["outputs"] = files(outputs_);
    m["wall_clock_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    const fs::path path = out / ("manifest_" + name_ + ".json");
    std::ofstream f(path);
    if (!f) throw io_error("cannot write " + path.string());
    f << m.dump(2) << "\n";
    if (!f) throw io_error("failed writing " + path.string());
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t") - b + 1);
  }

  std::string name_, command_line_, config_path_;
  std::chrono::steady_clock::time_point start_;
  std::vector<fs::path> inputs_, outputs_;
};

data::Panel load_data(Run& run, const std::string& dir) {
  if (dir.empty()) throw usage_error("--data DIR is required; create one with 'prism_vq gen-data --out DIR'");
  const auto files = data::panel_files(dir);
  for (const auto& f : {files.features, files.prices, files.priors}) {
    if (!fs::exists(f))
      throw usage_error("missing panel file " + f + "; create the panel with 'prism_vq gen-data --out " + dir + "'");
    run.input(f);
  }
  return data::load_panel(files);
}

data::SplitSpec make_split(const train::RunConfig& cfg, const data::Panel& panel) {
  if (!cfg.train_end.empty() && !cfg.valid_end.empty()) return data::split_by_dates(panel, cfg.train_end, cfg.valid_end);
  return data::split_by_fraction(panel.num_dates(), cfg.train_fraction, cfg.valid_fraction);
}

data::DateRange pick_range(const data::SplitSpec& split, const std::string& name, std::size_t n_dates) {
  if (name == "train") return split.train;
  if (name == "valid") return split.valid;
  if (name == "test") return split.test;
  if (name == "all") return {0, n_dates};
  throw usage_error("unknown --range '" + name + "'; use train, valid, test or all");
}

void check_dims(const train::Checkpoint& ckpt, const data::Dataset& ds, const std::string& path) {
  if (ckpt.features != ds.num_features() || ckpt.priors != ds.num_priors())
    throw data_error("checkpoint " + path + " was trained on " + std::to_string(ckpt.features) + " features and " +
                     std::to_string(ckpt.priors) + " priors but the panel has " + std::to_string(ds.num_features()) +
                     " and " + std::to_string(ds.num_priors()));
}

eval::ScoreTable load_scores(Run& run, const std::string& path) {
  if (path.empty()) throw usage_error("--scores FILE is required; produce one with 'prism_vq predict' or 'ensemble'");
  run.input(path);
  return eval::read_scores(path);
}

bt::BacktestConfig backtest_config(const train::RunConfig& cfg) {
  bt::BacktestConfig b;
  b.portfolio_size = cfg.portfolio_size;
  b.n_drop = cfg.n_drop;
  b.cost_buy_bps = cfg.cost_buy_bps;
  b.cost_sell_bps = cfg.cost_sell_bps;
  b.validate();
  return b;
}

// --seed, when given, replaces data_seed.
void cmd_gen_data(Run& run, const Common& common) {
  data::SyntheticConfig sc = run.cfg.synthetic;
  if (!common.seeds.empty()) {
    if (run.cfg.seeds.size() > 1) throw usage_error("gen-data takes a single --seed");
    sc.seed = run.cfg.seeds.front();
  }
  sc.validate();
  const auto market = data::synthetic_generate(sc);
  const auto files = data::panel_files(run.out.string());
  data::write_panel(market.panel, files);
  data::write_truth(market, run.out.string());
  for (const auto& f : {files.features, files.prices, files.priors}) run.output(f);
  run.output(run.out / "truth.csv");
  run.output(run.out / "truth_ic.csv");
  log::info("gen-data: " + std::to_string(sc.n_stocks) + " stocks x " + std::to_string(sc.n_dates) +
            " dates, mean achievable RankIC " + std::to_string(market.truth.mean_achievable_ic));
}

void cmd_train(Run& run, const Inputs& in) {
  const auto panel = load_data(run, in.data);
  const auto split = make_split(run.cfg, panel);
  const data::Dataset ds(panel, split, run.cfg.dataset_options());
  if (!in.checkpoint.empty() && run.cfg.seeds.size() > 1)
    throw usage_error("--checkpoint applies to a single seed; pass one --seed");
  for (auto seed : run.cfg.seeds) {
    const fs::path dir = run.seed_dir(seed);
    if (in.stage == 1) {
      log::info("stage 1, seed " + std::to_string(seed));
      const auto result = train::train_stage1(ds, run.cfg, seed);
      train::save_checkpoint((dir / "stage1.ckpt").string(), result.checkpoint);
      train::write_train_log((dir / "stage1_log.csv").string(), result.log);
      run.output(dir / "stage1.ckpt");
      run.output(dir / "stage1_log.csv");
      continue;
    }
    const fs::path ckpt_path = in.checkpoint.empty() ? dir / "stage1.ckpt" : fs::path(in.checkpoint);
    if (!fs::exists(ckpt_path))
      throw usage_error("no stage-1 checkpoint at " + ckpt_path.string() + "; run 'prism_vq train --stage 1 --out " +
                        run.out.string() + " --seed " + std::to_string(seed) + "' first");
    run.input(ckpt_path);
    const auto ckpt = train::load_checkpoint(ckpt_path.string());
    if (ckpt.stage != 1)
      throw usage_error(ckpt_path.string() + " is a stage-" + std::to_string(ckpt.stage) +
                        " checkpoint; stage 2 starts from a stage-1 checkpoint");
    check_dims(ckpt, ds, ckpt_path.string());
    auto spatial = train::spatial_from_checkpoint(ckpt);
    log::info("stage 2, seed " + std::to_string(seed));
    const auto result = train::train_stage2(ds, spatial, run.cfg, seed);
    train::save_checkpoint((dir / "stage2.ckpt").string(), result.checkpoint);
    train::write_train_log((dir / "stage2_log.csv").string(), result.log);
    run.output(dir / "stage2.ckpt");
    run.output(dir / "stage2_log.csv");
  }
}

void cmd_predict(Run& run, const Inputs& in) {
  const auto panel = load_data(run, in.data);
  const auto split = make_split(run.cfg, panel);
  const data::Dataset ds(panel, split, run.cfg.dataset_options());
  const auto range = pick_range(split, in.range, panel.num_dates());
  for (auto seed : run.cfg.seeds) {
    const fs::path dir = run.seed_dir(seed);
    const fs::path ckpt_path = dir / "stage2.ckpt";
    if (!fs::exists(ckpt_path))
      throw usage_error("no stage-2 checkpoint at " + ckpt_path.string() + "; run 'prism_vq train --stage 2 --out " +
                        run.out.string() + " --seed " + std::to_string(seed) + "' first");
    run.input(ckpt_path);
    const auto ckpt = train::load_checkpoint(ckpt_path.string());
    check_dims(ckpt, ds, ckpt_path.string());
    const auto spatial = train::spatial_from_checkpoint(ckpt);
    const auto temporal = train::temporal_from_checkpoint(ckpt);
    const auto codes = train::assign_codes(ds, spatial);
    const auto rows = train::predict(ds, spatial, temporal, codes, range);
    const auto top_k = train::parse_config(ckpt.config_text, ckpt_path.string()).top_k;
    train::write_predictions((dir / "predictions.csv").string(), panel, rows, top_k);
    run.output(dir / "predictions.csv");
    log::info("predict: seed " + std::to_string(seed) + ", " + std::to_string(rows.size()) + " rows");
  }
}

void cmd_ensemble(Run& run, const Inputs& in) {
  std::vector<std::string> paths = in.files;
  if (paths.empty())
    for (auto seed : run.cfg.seeds) paths.push_back((run.out / ("seed_" + std::to_string(seed)) / "predictions.csv").string());
  std::vector<eval::ScoreTable> tables;
  for (const auto& p : paths) {
    if (!fs::exists(p))
      throw usage_error("missing predictions " + p + "; run 'prism_vq predict' for every seed first");
    run.input(p);
    tables.push_back(eval::read_scores(p));
  }
  const auto merged = train::seed_ensemble(tables);
  eval::write_scores((run.out / "ensemble.csv").string(), merged);
  run.output(run.out / "ensemble.csv");
}

std::vector<eval::CrossSection> ic_sections(const eval::ScoreTable& scores, const data::Dataset& ds) {
  const auto& panel = ds.panel();
  std::unordered_map<std::string, std::size_t> date_index, ticker_index;
  for (std::size_t d = 0; d < panel.num_dates(); ++d) date_index.emplace(panel.dates[d], d);
  for (std::size_t i = 0; i < panel.num_stocks(); ++i) ticker_index.emplace(panel.tickers[i], i);
  std::vector<eval::CrossSection> out;
  for (const auto& row : scores.rows) {
    if (out.empty() || out.back().date != row.date) out.push_back({row.date, {}, {}});
    double r = std::numeric_limits<double>::quiet_NaN();
    const auto d = date_index.find(row.date);
    const auto i = ticker_index.find(row.ticker);
    if (d != date_index.end() && i != ticker_index.end())
      r = ds.target(d->second, i->second, ds.options().main_horizon);
    out.back().scores.push_back(row.score);
    out.back().returns.push_back(r);
  }
  const std::size_t before = out.size();
  std::erase_if(out, [](const eval::CrossSection& d) {
    return std::none_of(d.returns.begin(), d.returns.end(), [](double v) { return std::isfinite(v); });
  });
  if (out.size() < before)
    log::info("evaluate: " + std::to_string(before - out.size()) + " dates have no realized target yet and are left out");
  return out;
}

void cmd_evaluate(Run& run, const Inputs& in) {
  const auto panel = load_data(run, in.data);
  const data::Dataset ds(panel, make_split(run.cfg, panel), run.cfg.dataset_options());
  const auto scores = load_scores(run, in.scores);
  const auto series = eval::rank_ic(ic_sections(scores, ds));
  eval::write_ic_metrics((run.out / "metrics.csv").string(), eval::summarize(series));
  eval::write_ic_series((run.out / "ic_series.csv").string(), series);
  run.output(run.out / "metrics.csv");
  run.output(run.out / "ic_series.csv");
  if (in.baseline.empty()) return;

  run.input(in.baseline);
  const auto base = eval::rank_ic(ic_sections(eval::read_scores(in.baseline), ds));
  std::unordered_map<std::string, double> base_by_date;
  for (std::size_t k = 0; k < base.dates.size(); ++k) base_by_date.emplace(base.dates[k], base.values[k]);
  std::vector<double> a, b;
  for (std::size_t k = 0; k < series.dates.size(); ++k) {
    const auto it = base_by_date.find(series.dates[k]);
    if (it == base_by_date.end()) continue;
    a.push_back(series.values[k]);
    b.push_back(it->second);
  }
  if (a.empty()) throw data_error("scores and baseline share no evaluable dates");
  const double p = eval::block_bootstrap_pvalue(a, b, run.cfg.bootstrap_block, run.cfg.bootstrap_resamples,
                                                run.cfg.seeds.front());
  double diff = 0;
  for (std::size_t k = 0; k < a.size(); ++k) diff += a[k] - b[k];
  csv::Writer w((run.out / "significance.csv").string(), {"metric", "value"});
  w.cell("mean_rank_ic_difference").cell(diff / static_cast<double>(a.size())).end_row();
  w.cell("p_value").cell(p).end_row();
  w.cell("days").cell(a.size()).end_row();
  w.close();
  run.output(run.out / "significance.csv");
}

void cmd_backtest(Run& run, const Inputs& in) {
  const auto cfg = backtest_config(run.cfg);
  const auto panel = load_data(run, in.data);
  const auto days = bt::cross_sections(load_scores(run, in.scores), panel);
  const auto result = bt::run_backtest(days, cfg);
  bt::write_daily((run.out / "daily.csv").string(), result);
  bt::write_summary((run.out / "summary.csv").string(), result.metrics);
  run.output(run.out / "daily.csv");
  run.output(run.out / "summary.csv");
}

void cmd_sweep(Run& run, const Inputs& in) {
  const auto cfg = backtest_config(run.cfg);
  const auto panel = load_data(run, in.data);
  const auto days = bt::cross_sections(load_scores(run, in.scores), panel);
  const auto rows = in.mode == "costs" ? bt::cost_sweep(days, cfg) : bt::ndrop_sweep(days, cfg, in.n_values);
  bt::write_sweep((run.out / "sweep.csv").string(), rows);
  run.output(run.out / "sweep.csv");
}

void cmd_analyze(Run& run, const Inputs& in) {
  if (in.predictions.empty())
    throw usage_error("--predictions FILE is required; produce one with 'prism_vq predict'");
  run.input(in.predictions);
  const auto pred = analysis::read_prediction_file(in.predictions);
  const auto& cfg = run.cfg;

  if (in.what == "codes") {
    std::vector<analysis::TransitionResult> results;
    for (std::size_t h : {21u, 63u}) {
      results.push_back(analysis::code_transitions(pred.history, h, cfg.transition_codes));
      const fs::path p = run.out / ("transitions_" + std::to_string(h) + ".csv");
      analysis::write_transitions(p.string(), results.back());
      run.output(p);
    }
    analysis::write_persistence((run.out / "persistence.csv").string(), results);
    run.output(run.out / "persistence.csv");
  } else if (in.what == "exposures") {
    const auto panel = load_data(run, in.data);
    std::vector<double> next, factors;
    analysis::next_day_series(pred.history, panel, next, factors);
    const auto report =
        analysis::code_factor_exposures(pred.history, next, factors, panel.num_priors(), cfg.exposure_min_obs);
    if (report.skipped > 0)
      log::info("exposures: skipped " + std::to_string(report.skipped) + " codes with fewer than " +
                std::to_string(cfg.exposure_min_obs) + " observations");
    analysis::write_exposures((run.out / "exposures.csv").string(), report, panel.prior_names);
    run.output(run.out / "exposures.csv");
  } else {
    std::size_t experts = cfg.experts;
    for (const auto& g : pred.gates)
      for (auto e : g.experts) experts = std::max(experts, e + 1);
    const auto activation = analysis::expert_activation(pred.gates, experts);
    const auto spikes = analysis::expert_spikes(activation, cfg.spike_sigma);
    std::vector<std::size_t> counts;
    for (const auto& s : spikes.spikes) counts.push_back(s.size());
    const double null_j =
        analysis::simulated_null_jaccard(counts, activation.dates.size(), 1000, cfg.seeds.front());
    analysis::write_activation((run.out / "expert_activation.csv").string(), activation);
    analysis::write_spikes((run.out / "spikes.csv").string(), spikes, activation);
    analysis::write_jaccard((run.out / "jaccard.csv").string(), spikes, null_j);
    analysis::write_wilcoxon((run.out / "wilcoxon.csv").string(), activation);
    for (const char* f : {"expert_activation.csv", "spikes.csv", "jaccard.csv", "wilcoxon.csv"})
      run.output(run.out / f);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage codebook and mixture-of-experts stock ranking: data, training, evaluation, backtests."};
  app.require_subcommand(1);
  app.set_version_flag("--version", "prism_vq 1.0");

  Common common;
  Inputs in;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "Config file (key = value lines); defaults apply otherwise");
    sub->add_option("--seed", common.seeds, "Seed or comma-separated seed list");
    sub->add_option("--out", common.out, "Output directory")->required();
    sub->add_option("--market", common.market, "Per-market hyperparameter preset")
        ->check(CLI::IsMember({"csi-style", "sp-style"}));
    sub->add_option("--set", common.overrides, "Override a config key, KEY=VALUE (repeatable)");
    sub->add_flag("--quiet", common.quiet, "Only print warnings and errors");
  };
  auto add_data = [&](CLI::App* sub) { sub->add_option("--data", in.data, "Panel directory (features/prices/priors CSVs)"); };
  auto add_scores = [&](CLI::App* sub) { sub->add_option("--scores", in.scores, "Score file: date,ticker,score,..."); };

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic panel with planted structure");
  add_common(gen);

  auto* tr = app.add_subcommand("train", "Train stage 1 (codebook) or stage 2 (temporal model)");
  add_common(tr);
  add_data(tr);
  tr->add_option("--stage", in.stage, "Training stage")->required()->check(CLI::IsMember({1, 2}));
  tr->add_option("--checkpoint", in.checkpoint, "Stage-1 checkpoint for stage 2 (default <out>/seed_<s>/stage1.ckpt)");

  auto* pr = app.add_subcommand("predict", "Score every usable stock with a stage-2 checkpoint");
  add_common(pr);
  add_data(pr);
  pr->add_option("--range", in.range, "Date range to score")->check(CLI::IsMember({"train", "valid", "test", "all"}));

  auto* en = app.add_subcommand("ensemble", "Average per-seed predictions into <out>/ensemble.csv");
  add_common(en);
  en->add_option("--inputs", in.files, "Prediction files (default <out>/seed_<s>/predictions.csv)");

  auto* ev = app.add_subcommand("evaluate", "Daily RankIC of a score file");
  add_common(ev);
  add_data(ev);
  add_scores(ev);
  ev->add_option("--baseline", in.baseline, "Second score file for a block-bootstrap significance test");

  auto* bk = app.add_subcommand("backtest", "TopK-DropN backtest with transaction costs");
  add_common(bk);
  add_data(bk);
  add_scores(bk);

  auto* sw = app.add_subcommand("sweep", "Backtest across cost regimes or N_drop values");
  add_common(sw);
  add_data(sw);
  add_scores(sw);
  sw->add_option("--mode", in.mode, "Sweep dimension")->required()->check(CLI::IsMember({"costs", "ndrop"}));
  sw->add_option("--n-values", in.n_values, "N_drop values for --mode ndrop")->delimiter(',');

  auto* an = app.add_subcommand("analyze", "Code dynamics, factor exposures, or expert activation");
  add_common(an);
  add_data(an);
  an->add_option("--predictions", in.predictions, "Prediction file from 'predict'");
  an->add_option("--what", in.what, "Analysis to run")->required()->check(CLI::IsMember({"codes", "exposures", "experts"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << "; see 'prism_vq --help'\n";
    return exit_code(ErrorCategory::usage);
  }

  log::set_level(common.quiet ? log::Level::warn : log::Level::info);
  std::string command_line;
  for (int i = 0; i < argc; ++i) command_line += (i ? " " : "") + std::string(argv[i]);

  try {
    CLI::App* sub = app.get_subcommands().front();
    std::string name = sub->get_name();
    if (name == "train") name += "_stage" + std::to_string(in.stage);
    if (name == "sweep") name += "_" + in.mode;
    if (name == "analyze") name += "_" + in.what;
    Run run(name, common, command_line);
    if (sub == gen) cmd_gen_data(run, common);
    else if (sub == tr) cmd_train(run, in);
    else if (sub == pr) cmd_predict(run, in);
    else if (sub == en) cmd_ensemble(run, in);
    else if (sub == ev) cmd_evaluate(run, in);
    else if (sub == bk) cmd_backtest(run, in);
    else if (sub == sw) cmd_sweep(run, in);
    else cmd_analyze(run, in);
    run.finish();
  } catch (const Error& e) {
    std::cerr << "error: " << category_name(e.category()) << ": " << e.what() << "\n";
    return exit_code(e.category());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: io: " << e.what() << "\n";
    return exit_code(ErrorCategory::io);
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
