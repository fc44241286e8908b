#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "prism/datapanel/dataset.hpp"
#include "prism/evaluation/scores.hpp"
#include "prism/spatial/spatial.hpp"
#include "prism/temporal/temporal.hpp"
#include "prism/training/checkpoint.hpp"
#include "prism/training/config.hpp"

namespace prism::train {

struct LogRow {
  std::size_t epoch = 0;
  std::string split;  // "train" or "valid"
  double total = 0;
  std::vector<double> components;
  double metric = 0;
};

struct TrainLog {
  std::vector<std::string> component_names;
  std::string metric_name;
  std::vector<LogRow> rows;
};

// `epoch,split,loss_total,<components>,metric`
void write_train_log(const std::string& path, const TrainLog& log);

// Whole-date Stage-1 batch: every usable stock, rank-normalized targets at
// all horizons (NaN where undefined).
spatial::SpatialBatch stage1_batch(const data::Dataset& ds, std::size_t t,
                                   const std::vector<std::size_t>& stocks);

// Frozen code of every usable (date, stock) cell, -1 elsewhere. [D, N].
struct CodeMap {
  std::size_t dates = 0, stocks = 0;
  std::vector<int> codes;
  int at(std::size_t t, std::size_t i) const { return codes[t * stocks + i]; }
};
CodeMap assign_codes(const data::Dataset& ds, const spatial::SpatialModel& model);

// Stage-2 batch: features, frozen codewords, priors, and rank-normalized
// main-horizon targets (NaN where undefined).
temporal::TemporalBatch stage2_batch(const data::Dataset& ds, const spatial::Codebook& codebook,
                                     const CodeMap& codes, std::size_t t,
                                     const std::vector<std::size_t>& stocks);

struct Stage1Result {
  spatial::SpatialModel model;
  Checkpoint checkpoint;
  TrainLog log;
};

struct Stage2Result {
  temporal::TemporalModel model;
  Checkpoint checkpoint;  // holds the Stage-1 tensors as well
  TrainLog log;
};

// Whole-date batches in shuffled order, early stopping on the validation
// objective, best epoch restored.
Stage1Result train_stage1(const data::Dataset& ds, const RunConfig& cfg, std::uint64_t seed);

// Freezes `spatial` and trains the temporal model on its codes, early
// stopping on validation mean daily RankIC.
Stage2Result train_stage2(const data::Dataset& ds, spatial::SpatialModel& spatial, const RunConfig& cfg,
                          std::uint64_t seed);

// Mean spatial objective over dates in inference mode.
double spatial_validation_loss(const data::Dataset& ds, const spatial::SpatialModel& model,
                               const std::vector<std::size_t>& dates);

struct PredictionRow {
  std::size_t date = 0, stock = 0;
  double score = 0, alpha = 0, prior_term = 0, latent_term = 0;
  int code = -1;
  std::vector<std::size_t> experts;  // selected, best first
  std::vector<double> gate_weights;  // weight of each selected expert
};

// Inference-mode predictions for every usable stock on every ready date of
// the range.
std::vector<PredictionRow> predict(const data::Dataset& ds, const spatial::SpatialModel& spatial,
                                   const temporal::TemporalModel& model, const CodeMap& codes,
                                   data::DateRange range);

// Mean daily RankIC of predictions against raw main-horizon returns.
double prediction_rank_ic(const data::Dataset& ds, const std::vector<PredictionRow>& rows);

// `date,ticker,score,alpha,prior_term,latent_term,code_index,expert_top1..k,gate_w1..k`
void write_predictions(const std::string& path, const data::Panel& panel, const std::vector<PredictionRow>& rows,
                       std::size_t top_k);

// Mean score per (date, ticker). Every table must carry the same keys;
// otherwise a data error lists the missing ones.
eval::ScoreTable seed_ensemble(const std::vector<eval::ScoreTable>& tables);

// Rebuilds models from a checkpoint against the given dataset dimensions.
spatial::SpatialModel spatial_from_checkpoint(const Checkpoint& ckpt);
temporal::TemporalModel temporal_from_checkpoint(const Checkpoint& ckpt);

}  // namespace prism::train
