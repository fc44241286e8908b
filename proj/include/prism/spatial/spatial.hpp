#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "prism/common/rng.hpp"
#include "prism/diffcore/nn.hpp"

namespace prism::spatial {

using ad::Real;
using ad::Tensor;

struct SpatialConfig {
  std::size_t features = 158;  // C
  std::size_t lookback = 20;   // T
  std::size_t priors = 13;     // P
  std::size_t horizons = 9;    // N_h
  std::size_t latent_dim = 128;  // d_s
  std::size_t heads = 2;
  std::size_t ffn_dim = 256;
  double dropout = 0.1;
  std::size_t codebook_size = 512;  // K
  std::size_t decoder_hidden = 128;  // H
  std::size_t decoder_base = 5;      // T_0
  double lambda_commit = 0.25;
  double lambda_contra = 1.0;
  double lambda_pred = 1e-4;
  double temperature = 0.07;
  double ema_decay = 0.99;
  double dead_threshold = 1.0;
  std::size_t dead_patience = 100;

  // Throws a config error on inconsistent sizes, negative weights, tau <= 0,
  // or a lookback that is not decoder_base times a power of two.
  void validate() const;
  // log2(T / T_0)
  std::size_t upsampling_blocks() const;
};

// ------------------------------------------------------------------ RevIN

inline constexpr double kRevinFloor = 1e-5;

// Per-sample, per-channel temporal statistics of x[N, T, C].
struct RevinStats {
  std::size_t samples = 0, channels = 0;
  std::vector<double> mean;  // [N, C]
  std::vector<double> std;   // [N, C], floored at kRevinFloor
};

std::vector<double> revin_normalize(std::span<const double> x, std::size_t n, std::size_t t,
                                    std::size_t c, RevinStats& stats);
std::vector<double> revin_denormalize(std::span<const double> x, std::size_t t,
                                      const RevinStats& stats);

// --------------------------------------------------------------- codebook

class Codebook {
 public:
  Codebook() = default;
  // Codewords uniform(-1/K, 1/K); EMA usage starts at 1.
  Codebook(std::size_t size, std::size_t dim, Rng& rng);

  std::size_t size() const { return codewords.size(0); }
  std::size_t dim() const { return codewords.size(1); }
  bool frozen() const { return codewords.frozen(); }
  void freeze() { codewords.set_frozen(true); }

  Tensor codewords;                    // [K, d_s]
  std::vector<double> usage;           // [K]
  std::vector<std::uint32_t> low_streak;  // consecutive batches below the threshold
};

struct CodeAssignment {
  std::vector<std::size_t> index;  // k_i
  std::vector<double> distance;    // ||z_i - c_{k_i}||
  Tensor quantized;                // rows of the codebook, [N, d_s]; carries codebook gradient
};

// Nearest codeword by squared distance, ties to the lowest index.
CodeAssignment quantize(const Tensor& z, const Codebook& codebook);

// mean_i ||sg(z_i) - zq_i||^2 + lambda_commit ||z_i - sg(zq_i)||^2
Tensor vq_loss(const Tensor& z, const Tensor& quantized, double lambda_commit);

// mean_i -log softmax_k(-||z_i - c_k|| / tau)[k_i]
Tensor contrastive_loss(const Tensor& z, const Tensor& codewords,
                        const std::vector<std::size_t>& index, double tau);

struct EmaSettings {
  double decay = 0.99;
  double threshold = 1.0;
  std::size_t patience = 100;
};

// usage_k <- decay * usage_k + (1 - decay) * count_k. A code whose usage has
// stayed below the threshold for `patience` consecutive batches is reset to a
// uniformly drawn row of z, with usage back at 1. Returns the number of
// codes reset. Throws a state error on a frozen codebook.
std::size_t ema_update(Codebook& codebook, const std::vector<std::size_t>& index, const Tensor& z,
                       const EmaSettings& settings, Rng& rng);

// exp of the entropy of the empirical code distribution.
double perplexity(const std::vector<std::size_t>& index, std::size_t codebook_size);

// ---------------------------------------------------------------- decoder

// z_q -> H x T_0, then per block: channel expansion H -> 2H with GELU,
// depth-to-length shuffle (L, 2H) -> (2L, H), FiLM from the priors, plus a
// transposed-convolution skip (kernel 4, stride 2, padding 1) from the
// block input. A final 1x1 projection maps H -> C.
class Decoder {
 public:
  Decoder() = default;
  Decoder(const SpatialConfig& cfg, Rng& rng);

  // quantized [N, d_s], priors [P] -> [N, T, C]
  Tensor forward(const Tensor& quantized, const Tensor& priors) const;
  void collect(nn::Params& out, const std::string& prefix) const;

  struct Block {
    nn::Linear expand;  // H -> 2H
    nn::Linear film;    // P -> 2H (gamma, beta)
    Tensor skip_weight;  // [4, H, H]
    Tensor skip_bias;    // [H]
  };

  nn::Linear project;  // d_s -> H * T_0
  std::vector<Block> blocks;
  nn::Linear output;   // H -> C

 private:
  std::size_t hidden_ = 0, base_ = 0;
};

// Sum over T x C of squared error, averaged over samples.
Tensor reconstruction_loss(const Tensor& target, const Tensor& reconstruction);

// Autoregressive multi-horizon head: h0 = tanh(W [z_q; f_p] + b); step 1
// feeds a learnable start token, later steps feed an embedding of the
// previous prediction; each hidden state maps to one scalar.
class MultiHorizonHead {
 public:
  MultiHorizonHead() = default;
  MultiHorizonHead(const SpatialConfig& cfg, Rng& rng);

  // quantized [N, d_s], priors [P] -> [N, N_h]
  Tensor forward(const Tensor& quantized, const Tensor& priors) const;
  void collect(nn::Params& out, const std::string& prefix) const;

  nn::Linear init;      // d_s + P -> d_s
  Tensor start_token;   // [d_s], zero-initialized
  nn::GruCell cell;     // d_s -> d_s
  nn::Linear feedback;  // 1 -> d_s
  nn::Linear output;    // d_s -> 1

 private:
  std::size_t horizons_ = 0;
};

// Mean squared error over entries whose target is finite.
Tensor masked_mse(const Tensor& prediction, std::span<const double> target);

// -------------------------------------------------------------- the model

struct SpatialBatch {
  std::size_t stocks = 0;
  std::vector<double> x;        // [N, T, C] normalized features
  std::vector<double> priors;   // [P]
  std::vector<double> targets;  // [N, N_h], NaN where undefined
};

struct SpatialLoss {
  Tensor total;
  double recon = 0, vq = 0, contra = 0, pred = 0;
  CodeAssignment assignment;
  Tensor z;
};

class SpatialModel {
 public:
  SpatialModel() = default;
  SpatialModel(const SpatialConfig& cfg, Rng& rng);

  const SpatialConfig& config() const { return cfg_; }

  // RevIN-normalized x[N, T, C] -> z[N, d_s]
  Tensor encode(const Tensor& x_revin, const nn::Context& ctx) const;
  // Raw batch features -> z (applies RevIN internally).
  Tensor encode_batch(const SpatialBatch& batch, const nn::Context& ctx) const;
  // Frozen inference: code assignment of every stock in the batch.
  CodeAssignment assign(const SpatialBatch& batch) const;

  // recon + vq + lambda_contra * contra + lambda_pred * pred
  SpatialLoss loss(const SpatialBatch& batch, const nn::Context& ctx) const;

  // Every Stage-1 parameter, codebook included, with stable names.
  nn::Params parameters() const;
  void freeze();

  nn::GruCell gru;
  nn::EncoderBlock encoder;
  Codebook codebook;
  Decoder decoder;
  MultiHorizonHead head;

 private:
  SpatialConfig cfg_;
};

}  // namespace prism::spatial
