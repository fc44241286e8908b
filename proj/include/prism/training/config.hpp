#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "prism/datapanel/dataset.hpp"
#include "prism/datapanel/synthetic.hpp"
#include "prism/spatial/spatial.hpp"
#include "prism/temporal/temporal.hpp"

namespace prism::train {

// Every tunable of a run. The text form is one `key = value` per line with
// '#' comments; see configs/defaults.conf for the full key list.
struct RunConfig {
  // synthetic generator
  data::SyntheticConfig synthetic;

  // dataset and split
  std::size_t lookback = 20;
  std::size_t horizons = 9;
  std::size_t main_horizon = 5;
  std::size_t prior_window = 20;
  double train_fraction = 0.6;
  double valid_fraction = 0.2;
  std::string train_end;  // ISO dates; override the fractions when both set
  std::string valid_end;

  // stage 1
  std::size_t latent_dim = 128;
  std::size_t spatial_heads = 2;
  std::size_t spatial_ffn = 256;
  double spatial_dropout = 0.1;
  std::size_t codebook_size = 512;
  std::size_t decoder_hidden = 128;
  std::size_t decoder_base = 5;
  double lambda_commit = 0.25;
  double lambda_contra = 1.0;
  double lambda_pred = 1e-4;
  double temperature = 0.07;
  double ema_decay = 0.99;
  double dead_threshold = 1.0;
  std::size_t dead_patience = 100;

  // stage 2
  std::string market = "csi-style";
  std::size_t model_dim = 64;
  std::size_t temporal_heads = 2;
  std::size_t temporal_ffn = 128;
  double temporal_dropout = 0.1;
  std::size_t experts = 2;
  std::size_t top_k = 1;
  std::size_t expert_hidden = 64;
  std::size_t trend_window = 5;
  double lambda_balance = 1e-2;
  double lambda_reg = 1e-4;

  // optimization
  double learning_rate = 1e-4;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  double lr_floor = 0.1;
  std::size_t stage1_epochs = 50;
  std::size_t stage2_epochs = 50;
  std::size_t patience = 15;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};

  // backtest and evaluation
  std::size_t portfolio_size = 30;  // K
  std::size_t n_drop = 5;
  double cost_buy_bps = 5;
  double cost_sell_bps = 15;
  std::size_t bootstrap_block = 20;
  std::size_t bootstrap_resamples = 10000;

  // analysis
  std::size_t transition_codes = 100;
  std::size_t exposure_min_obs = 30;
  double spike_sigma = 1.5;

  // Sets one key from its text form. Throws a config error on an unknown key
  // or a malformed value. `market` also applies the market preset.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  // Cross-field checks; throws a config error.
  void validate() const;
  // Canonical text with every key, in keys() order.
  std::string to_text() const;

  data::DatasetOptions dataset_options() const;
  spatial::SpatialConfig spatial_config(std::size_t features, std::size_t priors) const;
  temporal::TemporalConfig temporal_config(std::size_t features, std::size_t priors) const;
};

// Applies the per-market pairs: heads 2/4, experts 2/8, top-k 1/4, lambda_balance 1e-2/1e-3.
void apply_market(RunConfig& cfg, const std::string& market);

RunConfig parse_config(const std::string& text, const std::string& origin = "<text>");
RunConfig load_config(const std::string& path);

}  // namespace prism::train
