#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "prism/diffcore/nn.hpp"
#include "prism/spatial/spatial.hpp"

namespace prism::train {

struct TensorRecord {
  std::string name;
  ad::Shape shape;
  std::vector<double> values;
};

// Everything needed to rebuild a trained model. The on-disk layout is
// described in docs/checkpoint.md.
struct Checkpoint {
  std::uint32_t stage = 0;  // 1 or 2
  std::uint32_t epoch = 0;  // best epoch
  std::uint64_t seed = 0;
  std::uint64_t features = 0;
  std::uint64_t priors = 0;
  std::string config_text;
  std::string rng_state;
  std::vector<double> history;  // validation criterion per epoch
  std::vector<TensorRecord> tensors;
  std::vector<double> codebook_usage;
  std::vector<std::uint32_t> codebook_streak;

  const TensorRecord* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
// Throws an io error on a missing file and a data error on a malformed one.
Checkpoint load_checkpoint(const std::string& path);

// Copies parameter values into records, and back. restore() throws a data
// error when a name is missing or a shape differs.
std::vector<TensorRecord> capture(const nn::Params& params);
void restore(const std::vector<TensorRecord>& records, const nn::Params& params);

// Order-sensitive FNV-1a digest over names, shapes, and value bytes.
std::uint64_t parameter_hash(const nn::Params& params);

}  // namespace prism::train
