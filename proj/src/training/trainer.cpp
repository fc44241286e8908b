#include "prism/training/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "prism/common/csv.hpp"
#include "prism/common/error.hpp"
#include "prism/common/log.hpp"
#include "prism/evaluation/metrics.hpp"
#include "prism/training/optimizer.hpp"

namespace prism::train {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

Rng training_rng(std::uint64_t seed) { return Rng(seed ^ 0x9E3779B97F4A7C15ull); }

void check_dates(const std::vector<std::size_t>& dates, const char* what) {
  if (dates.empty()) throw data_error(std::string("no usable dates in the ") + what + " range");
}

}  // namespace

void write_train_log(const std::string& path, const TrainLog& log) {
  std::vector<std::string> header = {"epoch", "split", "loss_total"};
  header.insert(header.end(), log.component_names.begin(), log.component_names.end());
  header.push_back(log.metric_name);
  csv::Writer w(path, header);
  for (const auto& r : log.rows) {
    w.cell(r.epoch).cell(r.split).cell(r.total);
    for (double c : r.components) w.cell(c);
    w.cell(r.metric).end_row();
  }
  w.close();
}

spatial::SpatialBatch stage1_batch(const data::Dataset& ds, std::size_t t, const std::vector<std::size_t>& stocks) {
  spatial::SpatialBatch b;
  b.stocks = stocks.size();
  b.x = ds.window(t, stocks);
  b.priors = ds.priors(t);
  const std::size_t H = ds.options().horizons;
  b.targets.resize(stocks.size() * H);
  for (std::size_t k = 0; k < stocks.size(); ++k)
    for (std::size_t h = 1; h <= H; ++h) b.targets[k * H + h - 1] = ds.ranked_target(t, stocks[k], h);
  return b;
}

CodeMap assign_codes(const data::Dataset& ds, const spatial::SpatialModel& model) {
  CodeMap out;
  out.dates = ds.num_dates();
  out.stocks = ds.num_stocks();
  out.codes.assign(out.dates * out.stocks, -1);
  for (std::size_t t = 0; t < out.dates; ++t) {
    if (!ds.date_ready(t)) continue;
    const auto stocks = ds.stocks_at(t, false);
    if (stocks.empty()) continue;
    const auto a = model.assign(stage1_batch(ds, t, stocks));
    for (std::size_t k = 0; k < stocks.size(); ++k) out.codes[t * out.stocks + stocks[k]] = static_cast<int>(a.index[k]);
  }
  return out;
}

temporal::TemporalBatch stage2_batch(const data::Dataset& ds, const spatial::Codebook& codebook, const CodeMap& codes,
                                     std::size_t t, const std::vector<std::size_t>& stocks) {
  temporal::TemporalBatch b;
  b.stocks = stocks.size();
  b.x = ds.window(t, stocks);
  b.priors = ds.priors(t);
  const std::size_t d = codebook.dim();
  const auto cw = codebook.codewords.values();
  b.quantized.resize(stocks.size() * d);
  b.codes.resize(stocks.size());
  b.targets.resize(stocks.size());
  for (std::size_t k = 0; k < stocks.size(); ++k) {
    const int code = codes.at(t, stocks[k]);
    if (code < 0) throw Error(ErrorCategory::state, "stage2_batch: stock without a code at date " + std::to_string(t));
    b.codes[k] = static_cast<std::size_t>(code);
    for (std::size_t j = 0; j < d; ++j) b.quantized[k * d + j] = cw[static_cast<std::size_t>(code) * d + j];
    b.targets[k] = ds.ranked_target(t, stocks[k], ds.options().main_horizon);
  }
  return b;
}

double spatial_validation_loss(const data::Dataset& ds, const spatial::SpatialModel& model,
                               const std::vector<std::size_t>& dates) {
  ad::NoGradGuard guard;
  double total = 0;
  for (std::size_t t : dates) total += model.loss(stage1_batch(ds, t, ds.stocks_at(t, false)), {}).total.item();
  return total / static_cast<double>(dates.size());
}

Stage1Result train_stage1(const data::Dataset& ds, const RunConfig& cfg, std::uint64_t seed) {
  const auto scfg = cfg.spatial_config(ds.num_features(), ds.num_priors());
  Rng init(seed);
  Stage1Result out{spatial::SpatialModel(scfg, init), {}, {}};
  auto& model = out.model;
  Rng rng = training_rng(seed);

  auto train_dates = ds.dates_in(ds.split().train, false);
  const auto valid_dates = ds.dates_in(ds.split().valid, false);
  check_dates(train_dates, "train");
  check_dates(valid_dates, "validation");

  const auto params = model.parameters();
  AdamW opt(params, {0.9, 0.999, 1e-8, cfg.weight_decay});
  const spatial::EmaSettings ema{scfg.ema_decay, scfg.dead_threshold, scfg.dead_patience};
  EarlyStopping stopper(cfg.patience, EarlyStopping::Mode::minimize);
  out.log.component_names = {"recon", "vq", "contra", "pred"};
  out.log.metric_name = "perplexity";

  Checkpoint best;
  for (std::size_t epoch = 0; epoch < cfg.stage1_epochs; ++epoch) {
    rng.shuffle(train_dates);
    const double lr = cfg.learning_rate * lr_multiplier(epoch, cfg.stage1_epochs, cfg.lr_floor);
    LogRow row{epoch, "train", 0, {0, 0, 0, 0}, 0};
    std::vector<std::size_t> seen;
    for (std::size_t t : train_dates) {
      const auto batch = stage1_batch(ds, t, ds.stocks_at(t, false));
      opt.zero_grad();
      auto loss = model.loss(batch, {true, &rng});
      ad::backward(loss.total);
      ad::Tape::current().clear();
      clip_global_norm(params, cfg.clip_norm);
      opt.step(lr);
      spatial::ema_update(model.codebook, loss.assignment.index, loss.z.detach(), ema, rng);
      row.total += loss.total.item();
      row.components[0] += loss.recon;
      row.components[1] += loss.vq;
      row.components[2] += loss.contra;
      row.components[3] += loss.pred;
      seen.insert(seen.end(), loss.assignment.index.begin(), loss.assignment.index.end());
    }
    const double n = static_cast<double>(train_dates.size());
    row.total /= n;
    for (auto& c : row.components) c /= n;
    row.metric = spatial::perplexity(seen, scfg.codebook_size);
    out.log.rows.push_back(row);

    const double valid = spatial_validation_loss(ds, model, valid_dates);
    out.log.rows.push_back({epoch, "valid", valid, {kNaN, kNaN, kNaN, kNaN}, kNaN});
    out.checkpoint.history.push_back(valid);
    log::info("stage 1 epoch " + std::to_string(epoch) + " train " + csv::format(row.total) + " valid " +
              csv::format(valid) + " perplexity " + csv::format(row.metric));
    if (stopper.update(valid)) {
      best.tensors = capture(params);
      best.codebook_usage = model.codebook.usage;
      best.codebook_streak = model.codebook.low_streak;
      best.epoch = static_cast<std::uint32_t>(epoch);
      best.rng_state = rng.serialize();
    }
    if (stopper.should_stop()) break;
  }
  restore(best.tensors, params);
  model.codebook.usage = best.codebook_usage;
  model.codebook.low_streak = best.codebook_streak;

  auto& ck = out.checkpoint;
  ck.stage = 1;
  ck.epoch = best.epoch;
  ck.seed = seed;
  ck.features = ds.num_features();
  ck.priors = ds.num_priors();
  ck.config_text = cfg.to_text();
  ck.rng_state = best.rng_state;
  ck.tensors = std::move(best.tensors);
  ck.codebook_usage = model.codebook.usage;
  ck.codebook_streak = model.codebook.low_streak;
  return out;
}

std::vector<PredictionRow> predict(const data::Dataset& ds, const spatial::SpatialModel& spatial,
                                   const temporal::TemporalModel& model, const CodeMap& codes, data::DateRange range) {
  ad::NoGradGuard guard;
  std::vector<PredictionRow> rows;
  for (std::size_t t : ds.dates_in(range, false, 1)) {
    const auto stocks = ds.stocks_at(t, false);
    const auto batch = stage2_batch(ds, spatial.codebook, codes, t, stocks);
    const auto out = model.forward(batch, {});
    const std::size_t M = out.gating.weights.size(1);
    for (std::size_t k = 0; k < stocks.size(); ++k) {
      PredictionRow r;
      r.date = t;
      r.stock = stocks[k];
      r.score = out.prediction[k];
      r.alpha = out.alpha[k];
      r.prior_term = out.prior_term[k];
      r.latent_term = out.latent_term[k];
      r.code = static_cast<int>(batch.codes[k]);
      r.experts = out.gating.selected[k];
      for (std::size_t j : r.experts) r.gate_weights.push_back(out.gating.weights[k * M + j]);
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

double prediction_rank_ic(const data::Dataset& ds, const std::vector<PredictionRow>& rows) {
  std::vector<eval::CrossSection> days;
  for (const auto& r : rows) {
    if (days.empty() || days.back().date != ds.panel().dates[r.date]) days.push_back({ds.panel().dates[r.date], {}, {}});
    days.back().scores.push_back(r.score);
    days.back().returns.push_back(ds.target(r.date, r.stock, ds.options().main_horizon));
  }
  // Dates near the panel end have no realized target yet.
  std::erase_if(days, [](const eval::CrossSection& d) {
    return std::none_of(d.returns.begin(), d.returns.end(), [](double v) { return std::isfinite(v); });
  });
  return eval::summarize(eval::rank_ic(days)).mean;
}

Stage2Result train_stage2(const data::Dataset& ds, spatial::SpatialModel& spatial, const RunConfig& cfg,
                          std::uint64_t seed) {
  spatial.freeze();
  const auto tcfg = cfg.temporal_config(ds.num_features(), ds.num_priors());
  if (tcfg.latent_dim != spatial.config().latent_dim) {
    throw config_error("stage 2: latent_dim does not match the Stage-1 checkpoint");
  }
  Rng init(seed + 1);
  Stage2Result out{temporal::TemporalModel(tcfg, init), {}, {}};
  auto& model = out.model;
  Rng rng = training_rng(seed + 1);

  const CodeMap codes = assign_codes(ds, spatial);
  auto train_dates = ds.dates_in(ds.split().train, true);
  check_dates(train_dates, "train");
  check_dates(ds.dates_in(ds.split().valid, true), "validation");

  const auto params = model.parameters();
  AdamW opt(params, {0.9, 0.999, 1e-8, cfg.weight_decay});
  EarlyStopping stopper(cfg.patience, EarlyStopping::Mode::maximize);
  out.log.component_names = {"mse", "balance", "reg"};
  out.log.metric_name = "rank_ic";

  std::vector<TensorRecord> best;
  std::uint32_t best_epoch = 0;
  std::string best_rng;
  for (std::size_t epoch = 0; epoch < cfg.stage2_epochs; ++epoch) {
    rng.shuffle(train_dates);
    const double lr = cfg.learning_rate * lr_multiplier(epoch, cfg.stage2_epochs, cfg.lr_floor);
    LogRow row{epoch, "train", 0, {0, 0, 0}, kNaN};
    for (std::size_t t : train_dates) {
      const auto batch = stage2_batch(ds, spatial.codebook, codes, t, ds.stocks_at(t, true));
      opt.zero_grad();
      auto loss = model.loss(batch, {true, &rng});
      ad::backward(loss.total);
      ad::Tape::current().clear();
      clip_global_norm(params, cfg.clip_norm);
      opt.step(lr);
      row.total += loss.total.item();
      row.components[0] += loss.mse;
      row.components[1] += loss.balance;
      row.components[2] += loss.reg;
    }
    const double n = static_cast<double>(train_dates.size());
    row.total /= n;
    for (auto& c : row.components) c /= n;
    out.log.rows.push_back(row);

    const double ic = prediction_rank_ic(ds, predict(ds, spatial, model, codes, ds.split().valid));
    out.log.rows.push_back({epoch, "valid", kNaN, {kNaN, kNaN, kNaN}, ic});
    out.checkpoint.history.push_back(ic);
    log::info("stage 2 epoch " + std::to_string(epoch) + " train " + csv::format(row.total) + " valid rank_ic " +
              csv::format(ic));
    if (stopper.update(ic)) {
      best = capture(params);
      best_epoch = static_cast<std::uint32_t>(epoch);
      best_rng = rng.serialize();
    }
    if (stopper.should_stop()) break;
  }
  restore(best, params);

  auto& ck = out.checkpoint;
  ck.stage = 2;
  ck.epoch = best_epoch;
  ck.seed = seed;
  ck.features = ds.num_features();
  ck.priors = ds.num_priors();
  ck.config_text = cfg.to_text();
  ck.rng_state = best_rng;
  ck.tensors = capture(spatial.parameters());
  ck.tensors.insert(ck.tensors.end(), best.begin(), best.end());
  ck.codebook_usage = spatial.codebook.usage;
  ck.codebook_streak = spatial.codebook.low_streak;
  return out;
}

void write_predictions(const std::string& path, const data::Panel& panel, const std::vector<PredictionRow>& rows,
                       std::size_t top_k) {
  std::vector<std::string> header = {"date", "ticker", "score", "alpha", "prior_term", "latent_term", "code_index"};
  for (std::size_t j = 1; j <= top_k; ++j) header.push_back("expert_top" + std::to_string(j));
  for (std::size_t j = 1; j <= top_k; ++j) header.push_back("gate_w" + std::to_string(j));
  csv::Writer w(path, header);
  for (const auto& r : rows) {
    if (r.experts.size() != top_k) throw std::invalid_argument("write_predictions: row has the wrong expert count");
    w.cell(panel.dates[r.date]).cell(panel.tickers[r.stock]).cell(r.score).cell(r.alpha).cell(r.prior_term);
    w.cell(r.latent_term).cell(static_cast<long long>(r.code));
    for (auto e : r.experts) w.cell(e);
    for (auto g : r.gate_weights) w.cell(g);
    w.end_row();
  }
  w.close();
}

eval::ScoreTable seed_ensemble(const std::vector<eval::ScoreTable>& tables) {
  if (tables.empty()) throw std::invalid_argument("seed_ensemble: no inputs");
  using Key = std::pair<std::string, std::string>;
  std::map<Key, std::size_t> index;
  const auto& first = tables.front().rows;
  for (std::size_t k = 0; k < first.size(); ++k) index[{first[k].date, first[k].ticker}] = k;
  std::vector<double> total(first.size(), 0.0);
  for (std::size_t s = 0; s < tables.size(); ++s) {
    std::vector<char> hit(first.size(), 0);
    std::vector<std::string> problems;
    for (const auto& r : tables[s].rows) {
      auto it = index.find({r.date, r.ticker});
      if (it == index.end()) {
        problems.push_back(r.date + "/" + r.ticker + " missing from input 0");
        continue;
      }
      total[it->second] += r.score;
      hit[it->second] = 1;
    }
    for (std::size_t k = 0; k < first.size(); ++k) {
      if (!hit[k]) problems.push_back(first[k].date + "/" + first[k].ticker + " missing from input " + std::to_string(s));
    }
    if (!problems.empty()) {
      std::string msg = "seed_ensemble: keys differ between inputs:";
      for (std::size_t k = 0; k < std::min<std::size_t>(problems.size(), 10); ++k) msg += " " + problems[k];
      if (problems.size() > 10) msg += " ... (" + std::to_string(problems.size()) + " total)";
      throw data_error(msg);
    }
  }
  eval::ScoreTable out;
  out.rows = first;
  for (std::size_t k = 0; k < first.size(); ++k) out.rows[k].score = total[k] / static_cast<double>(tables.size());
  return out;
}

spatial::SpatialModel spatial_from_checkpoint(const Checkpoint& ckpt) {
  const RunConfig cfg = parse_config(ckpt.config_text, "checkpoint");
  Rng rng(ckpt.seed);
  spatial::SpatialModel model(cfg.spatial_config(ckpt.features, ckpt.priors), rng);
  restore(ckpt.tensors, model.parameters());
  if (ckpt.codebook_usage.size() == model.codebook.size()) model.codebook.usage = ckpt.codebook_usage;
  if (ckpt.codebook_streak.size() == model.codebook.size()) model.codebook.low_streak = ckpt.codebook_streak;
  return model;
}

temporal::TemporalModel temporal_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.stage != 2) throw Error(ErrorCategory::usage, "checkpoint is from stage " + std::to_string(ckpt.stage) +
                                                             "; a stage-2 checkpoint is required");
  const RunConfig cfg = parse_config(ckpt.config_text, "checkpoint");
  Rng rng(ckpt.seed + 1);
  temporal::TemporalModel model(cfg.temporal_config(ckpt.features, ckpt.priors), rng);
  restore(ckpt.tensors, model.parameters());
  return model;
}

}  // namespace prism::train
