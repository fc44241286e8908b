#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "prism/common/rng.hpp"
#include "prism/diffcore/nn.hpp"

namespace prism::temporal {

using ad::Real;
using ad::Tensor;

struct TemporalConfig {
  std::size_t features = 158;    // C
  std::size_t lookback = 20;     // T
  std::size_t priors = 13;       // P
  std::size_t latent_dim = 128;  // d_s
  std::size_t model_dim = 64;    // d_t
  std::size_t heads = 2;
  std::size_t ffn_dim = 128;
  double dropout = 0.1;
  std::size_t experts = 2;       // M_e
  std::size_t top_k = 1;         // k
  std::size_t expert_hidden = 64;  // d_moe
  std::size_t trend_window = 5;
  double lambda_balance = 1e-2;
  double lambda_reg = 1e-4;

  void validate() const;
};

// Trend = centered moving average over edge-replicated padding, seasonal =
// x - trend. x is [N, T, C] row-major; both outputs have the same layout.
struct Decomposition {
  std::vector<double> trend, seasonal;
};
Decomposition trend_seasonal_decompose(std::span<const double> x, std::size_t n, std::size_t t,
                                       std::size_t c, std::size_t window);

// Indices of the k largest entries of each row of logits[N, M], ties to the
// lower index, listed in descending order of logit.
std::vector<std::vector<std::size_t>> top_k_indices(const Tensor& logits, std::size_t k);

struct GatingOutput {
  std::vector<std::vector<std::size_t>> selected;  // K_i, size k, best first
  Tensor weights;  // G [N, M_e], exactly k nonzeros per row summing to 1
  Tensor mu;       // [N, M_e]
  Tensor sigma;    // [N, M_e]
  Tensor logits;   // [N, M_e]
};

// Code-conditioned stochastic router. Training adds eps * sigma to mu;
// inference routes on mu alone. The logit map is the identity.
class Gate {
 public:
  Gate() = default;
  Gate(std::size_t latent_dim, std::size_t experts, std::size_t top_k, Rng& rng);

  GatingOutput forward(const Tensor& quantized, const nn::Context& ctx) const;
  void collect(nn::Params& out, const std::string& prefix) const;

  nn::LayerNorm norm;
  nn::Linear mu;     // d_s -> M_e
  nn::Linear sigma;  // d_s -> M_e, softplus

 private:
  std::size_t top_k_ = 1;
};

// xi(u) = W2 GELU(W1 u + b1) + b2
struct Expert {
  nn::Linear inner;  // d_t -> d_moe
  nn::Linear outer;  // d_moe -> d_moe
  Tensor forward(const Tensor& u) const { return outer.forward(ad::gelu(inner.forward(u))); }
};

// m_i = sum_j G_ij xi_j(u_i); expert j only runs on the rows that selected it.
Tensor experts_forward(const std::vector<Expert>& experts, const Tensor& u, const GatingOutput& gate);

// M_e * sum_j f_j P_j with f_j the fraction of rows selecting j (constant)
// and P_j the mean gate weight.
Tensor load_balance_loss(const GatingOutput& gate);

// u = block(phi_proj([LN(h); LN(z_q)])), block(v) = v + W_o(W_a v * GELU(W_b v)).
class Fusion {
 public:
  Fusion() = default;
  Fusion(std::size_t model_dim, std::size_t latent_dim, double dropout, Rng& rng);

  Tensor forward(const Tensor& h, const Tensor& quantized, const nn::Context& ctx) const;
  void collect(nn::Params& out, const std::string& prefix) const;

  nn::LayerNorm norm_h, norm_z;
  nn::Linear project;  // d_t + d_s -> d_t
  nn::Linear value, gate, out;  // d_t -> d_t, no biases

 private:
  double dropout_ = 0.0;
};

struct Loadings {
  Tensor alpha;   // [N]
  Tensor beta_p;  // [N, P]
  Tensor beta_l;  // [N, d_s]
};

// beta = gamma * (W_base h) + delta with (gamma, delta) read from the expert
// mixture; alpha = w_alpha^T m. The gamma half of each modulation bias
// starts at 1 so the head begins at its base loadings.
class LoadingHead {
 public:
  LoadingHead() = default;
  LoadingHead(std::size_t model_dim, std::size_t expert_hidden, std::size_t priors,
              std::size_t latent_dim, Rng& rng);

  Loadings forward(const Tensor& h, const Tensor& m) const;
  void collect(nn::Params& out, const std::string& prefix) const;

  nn::Linear base_p, base_l;  // d_t -> P, d_t -> d_s (no bias)
  nn::Linear mod_p, mod_l;    // d_moe -> 2P, d_moe -> 2 d_s
  nn::Linear alpha;           // d_moe -> 1 (no bias)
};

struct PricingTerms {
  Tensor alpha, prior_term, latent_term, prediction;  // each [N]
};

// y = alpha + beta_p . f_p + beta_l . f_l, with f_p [P] shared by every stock
// and f_l [N, d_s].
PricingTerms price(const Loadings& loadings, const Tensor& prior_factors, const Tensor& latent_factors);

struct TemporalBatch {
  std::size_t stocks = 0;
  std::vector<double> x;          // [N, T, C] normalized features
  std::vector<double> quantized;  // [N, d_s] frozen codewords
  std::vector<std::size_t> codes; // [N]
  std::vector<double> priors;     // [P]
  std::vector<double> targets;    // [N], NaN where undefined
};

struct TemporalOutput {
  Tensor prediction;   // [N]
  Tensor alpha;        // [N]
  Tensor prior_term;   // [N]
  Tensor latent_term;  // [N]
  Loadings loadings;
  GatingOutput gating;
};

struct TemporalLoss {
  Tensor total;
  double mse = 0, balance = 0, reg = 0;
  TemporalOutput output;
};

class TemporalModel {
 public:
  TemporalModel() = default;
  TemporalModel(const TemporalConfig& cfg, Rng& rng);

  const TemporalConfig& config() const { return cfg_; }

  // Structure-token encoder output h_temp [N, d_t].
  Tensor encode(const TemporalBatch& batch, const Tensor& quantized, const nn::Context& ctx) const;
  TemporalOutput forward(const TemporalBatch& batch, const nn::Context& ctx) const;
  // MSE + lambda_balance * LB + lambda_reg * mean(|beta_p| + |beta_l|)
  TemporalLoss loss(const TemporalBatch& batch, const nn::Context& ctx) const;

  nn::Params parameters() const;

  nn::Linear seasonal, trend;  // C -> d_t
  nn::Linear structure;        // d_s -> d_t
  nn::EncoderBlock encoder;    // with RoPE, structure token at position 0
  Fusion fusion;
  Gate gate;
  std::vector<Expert> experts;
  LoadingHead head;
  nn::Linear factor;  // psi_factor: d_s -> d_s (no bias)

 private:
  TemporalConfig cfg_;
};

}  // namespace prism::temporal
