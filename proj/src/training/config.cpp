#include "prism/training/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "prism/common/csv.hpp"
#include "prism/common/error.hpp"

namespace prism::train {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw config_error("key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw config_error("key '" + key + "': expected a number, got '" + v + "'");
  }
  return out;
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field size_field(T RunConfig::*member) {
  return {[member](RunConfig& c, const std::string& k, const std::string& v) { c.*member = parse_size(k, v); },
          [member](const RunConfig& c) { return std::to_string(c.*member); }};
}
Field real_field(double RunConfig::*member) {
  return {[member](RunConfig& c, const std::string& k, const std::string& v) { c.*member = parse_real(k, v); },
          [member](const RunConfig& c) { return csv::format(c.*member); }};
}
Field text_field(std::string RunConfig::*member) {
  return {[member](RunConfig& c, const std::string&, const std::string& v) { c.*member = v; },
          [member](const RunConfig& c) { return c.*member; }};
}
template <typename T>
Field synthetic_size(T data::SyntheticConfig::*member) {
  return {[member](RunConfig& c, const std::string& k, const std::string& v) {
            c.synthetic.*member = static_cast<T>(parse_size(k, v));
          },
          [member](const RunConfig& c) { return std::to_string(c.synthetic.*member); }};
}

using Table = std::vector<std::pair<std::string, Field>>;

const Table& table() {
  static const Table t = [] {
    Table t;
    t.emplace_back("n_stocks", synthetic_size(&data::SyntheticConfig::n_stocks));
    t.emplace_back("n_dates", synthetic_size(&data::SyntheticConfig::n_dates));
    t.emplace_back("n_clusters", synthetic_size(&data::SyntheticConfig::n_clusters));
    t.emplace_back("snr", Field{[](RunConfig& c, const std::string& k, const std::string& v) {
                                  c.synthetic.snr = parse_real(k, v);
                                },
                                [](const RunConfig& c) { return csv::format(c.synthetic.snr); }});
    t.emplace_back("n_factors", synthetic_size(&data::SyntheticConfig::n_factors));
    t.emplace_back("n_features", synthetic_size(&data::SyntheticConfig::n_features));
    t.emplace_back("data_seed", synthetic_size(&data::SyntheticConfig::seed));

    t.emplace_back("lookback", size_field(&RunConfig::lookback));
    t.emplace_back("horizons", size_field(&RunConfig::horizons));
    t.emplace_back("main_horizon", size_field(&RunConfig::main_horizon));
    t.emplace_back("prior_window", size_field(&RunConfig::prior_window));
    t.emplace_back("train_fraction", real_field(&RunConfig::train_fraction));
    t.emplace_back("valid_fraction", real_field(&RunConfig::valid_fraction));
    t.emplace_back("train_end", text_field(&RunConfig::train_end));
    t.emplace_back("valid_end", text_field(&RunConfig::valid_end));

    t.emplace_back("latent_dim", size_field(&RunConfig::latent_dim));
    t.emplace_back("spatial_heads", size_field(&RunConfig::spatial_heads));
    t.emplace_back("spatial_ffn", size_field(&RunConfig::spatial_ffn));
    t.emplace_back("spatial_dropout", real_field(&RunConfig::spatial_dropout));
    t.emplace_back("codebook_size", size_field(&RunConfig::codebook_size));
    t.emplace_back("decoder_hidden", size_field(&RunConfig::decoder_hidden));
    t.emplace_back("decoder_base", size_field(&RunConfig::decoder_base));
    t.emplace_back("lambda_commit", real_field(&RunConfig::lambda_commit));
    t.emplace_back("lambda_contra", real_field(&RunConfig::lambda_contra));
    t.emplace_back("lambda_pred", real_field(&RunConfig::lambda_pred));
    t.emplace_back("temperature", real_field(&RunConfig::temperature));
    t.emplace_back("ema_decay", real_field(&RunConfig::ema_decay));
    t.emplace_back("dead_threshold", real_field(&RunConfig::dead_threshold));
    t.emplace_back("dead_patience", size_field(&RunConfig::dead_patience));

    t.emplace_back("market", Field{[](RunConfig& c, const std::string&, const std::string& v) { apply_market(c, v); },
                                   [](const RunConfig& c) { return c.market; }});
    t.emplace_back("model_dim", size_field(&RunConfig::model_dim));
    t.emplace_back("temporal_heads", size_field(&RunConfig::temporal_heads));
    t.emplace_back("temporal_ffn", size_field(&RunConfig::temporal_ffn));
    t.emplace_back("temporal_dropout", real_field(&RunConfig::temporal_dropout));
    t.emplace_back("experts", size_field(&RunConfig::experts));
    t.emplace_back("top_k", size_field(&RunConfig::top_k));
    t.emplace_back("expert_hidden", size_field(&RunConfig::expert_hidden));
    t.emplace_back("trend_window", size_field(&RunConfig::trend_window));
    t.emplace_back("lambda_balance", real_field(&RunConfig::lambda_balance));
    t.emplace_back("lambda_reg", real_field(&RunConfig::lambda_reg));

    t.emplace_back("learning_rate", real_field(&RunConfig::learning_rate));
    t.emplace_back("weight_decay", real_field(&RunConfig::weight_decay));
    t.emplace_back("clip_norm", real_field(&RunConfig::clip_norm));
    t.emplace_back("lr_floor", real_field(&RunConfig::lr_floor));
    t.emplace_back("stage1_epochs", size_field(&RunConfig::stage1_epochs));
    t.emplace_back("stage2_epochs", size_field(&RunConfig::stage2_epochs));
    t.emplace_back("patience", size_field(&RunConfig::patience));
    t.emplace_back("seeds", Field{[](RunConfig& c, const std::string& k, const std::string& v) {
                                    c.seeds.clear();
                                    for (const auto& part : csv::split(v)) {
                                      c.seeds.push_back(parse_size(k, trim(part)));
                                    }
                                    if (c.seeds.empty()) throw config_error("key 'seeds': empty list");
                                  },
                                  [](const RunConfig& c) {
                                    std::string out;
                                    for (std::size_t i = 0; i < c.seeds.size(); ++i)
                                      out += (i ? "," : "") + std::to_string(c.seeds[i]);
                                    return out;
                                  }});

    t.emplace_back("portfolio_size", size_field(&RunConfig::portfolio_size));
    t.emplace_back("n_drop", size_field(&RunConfig::n_drop));
    t.emplace_back("cost_buy_bps", real_field(&RunConfig::cost_buy_bps));
    t.emplace_back("cost_sell_bps", real_field(&RunConfig::cost_sell_bps));
    t.emplace_back("bootstrap_block", size_field(&RunConfig::bootstrap_block));
    t.emplace_back("bootstrap_resamples", size_field(&RunConfig::bootstrap_resamples));

    t.emplace_back("transition_codes", size_field(&RunConfig::transition_codes));
    t.emplace_back("exposure_min_obs", size_field(&RunConfig::exposure_min_obs));
    t.emplace_back("spike_sigma", real_field(&RunConfig::spike_sigma));
    return t;
  }();
  return t;
}

const Field& field(const std::string& key) {
  for (const auto& [name, f] : table()) {
    if (name == key) return f;
  }
  throw Error(ErrorCategory::usage,
              "unknown key '" + key + "'; configs/defaults.conf lists every valid key");
}

}  // namespace

void apply_market(RunConfig& cfg, const std::string& market) {
  if (market == "csi-style") {
    cfg.temporal_heads = 2;
    cfg.experts = 2;
    cfg.top_k = 1;
    cfg.lambda_balance = 1e-2;
  } else if (market == "sp-style") {
    cfg.temporal_heads = 4;
    cfg.experts = 8;
    cfg.top_k = 4;
    cfg.lambda_balance = 1e-3;
  } else {
    throw config_error("market must be csi-style or sp-style, got '" + market + "'");
  }
  cfg.market = market;
}

void RunConfig::set(const std::string& key, const std::string& value) { field(key).set(*this, key, value); }

std::string RunConfig::get(const std::string& key) const { return field(key).get(*this); }

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& [name, f] : table()) out.push_back(name);
    return out;
  }();
  return names;
}

void RunConfig::validate() const {
  synthetic.validate();
  if (lookback == 0 || horizons == 0 || main_horizon == 0 || main_horizon > horizons) {
    throw config_error("main_horizon must lie in [1, horizons] and lookback must be positive");
  }
  if (!(train_fraction > 0) || !(valid_fraction > 0) || train_fraction + valid_fraction >= 1) {
    throw config_error("train_fraction and valid_fraction must be positive and sum to < 1");
  }
  if (train_end.empty() != valid_end.empty()) throw config_error("train_end and valid_end must be set together");
  if (!(learning_rate > 0) || !(clip_norm > 0) || weight_decay < 0) {
    throw config_error("learning_rate and clip_norm must be > 0, weight_decay >= 0");
  }
  if (!(lr_floor > 0) || lr_floor > 1) throw config_error("lr_floor must lie in (0, 1]");
  if (stage1_epochs == 0 || stage2_epochs == 0 || patience == 0) {
    throw config_error("epochs and patience must be >= 1");
  }
  if (patience > std::max(stage1_epochs, stage2_epochs)) {
    throw config_error("patience must not exceed the epoch limits");
  }
  if (portfolio_size == 0 || n_drop == 0 || n_drop > portfolio_size) {
    throw config_error("n_drop must lie in [1, portfolio_size]");
  }
  if (cost_buy_bps < 0 || cost_sell_bps < 0) throw config_error("costs must be >= 0");
  if (bootstrap_block == 0 || bootstrap_resamples == 0) throw config_error("bootstrap settings must be >= 1");
  if (transition_codes == 0) throw config_error("transition_codes must be >= 1");
  spatial_config(1, 1).validate();
  temporal_config(1, 1).validate();
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& [name, f] : table()) out += name + " = " + f.get(*this) + "\n";
  return out;
}

data::DatasetOptions RunConfig::dataset_options() const {
  return {lookback, horizons, main_horizon, prior_window};
}

spatial::SpatialConfig RunConfig::spatial_config(std::size_t features, std::size_t priors) const {
  spatial::SpatialConfig c;
  c.features = features;
  c.lookback = lookback;
  c.priors = priors;
  c.horizons = horizons;
  c.latent_dim = latent_dim;
  c.heads = spatial_heads;
  c.ffn_dim = spatial_ffn;
  c.dropout = spatial_dropout;
  c.codebook_size = codebook_size;
  c.decoder_hidden = decoder_hidden;
  c.decoder_base = decoder_base;
  c.lambda_commit = lambda_commit;
  c.lambda_contra = lambda_contra;
  c.lambda_pred = lambda_pred;
  c.temperature = temperature;
  c.ema_decay = ema_decay;
  c.dead_threshold = dead_threshold;
  c.dead_patience = dead_patience;
  return c;
}

temporal::TemporalConfig RunConfig::temporal_config(std::size_t features, std::size_t priors) const {
  temporal::TemporalConfig c;
  c.features = features;
  c.lookback = lookback;
  c.priors = priors;
  c.latent_dim = latent_dim;
  c.model_dim = model_dim;
  c.heads = temporal_heads;
  c.ffn_dim = temporal_ffn;
  c.dropout = temporal_dropout;
  c.experts = experts;
  c.top_k = top_k;
  c.expert_hidden = expert_hidden;
  c.trend_window = trend_window;
  c.lambda_balance = lambda_balance;
  c.lambda_reg = lambda_reg;
  return c;
}

RunConfig parse_config(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw config_error(origin + ":" + std::to_string(number) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    try {
      cfg.set(key, value);
    } catch (const Error& e) {
      throw Error(e.category(), origin + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) {
    throw Error(ErrorCategory::usage, "config file " + path +
                                          " not found; pass an existing --config or omit it to use the defaults");
  }
  std::stringstream buf;
  buf << f.rdbuf();
  return parse_config(buf.str(), path);
}

}  // namespace prism::train
