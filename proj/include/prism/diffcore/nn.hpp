#pragma once

#include <string>
#include <vector>

#include "prism/common/rng.hpp"
#include "prism/diffcore/ops.hpp"
#include "prism/diffcore/tensor.hpp"

namespace prism::nn {

using ad::Real;
using ad::Shape;
using ad::Tensor;

struct NamedParam {
  std::string name;
  Tensor tensor;
};
using Params = std::vector<NamedParam>;

// Forward-pass mode. Dropout and stochastic gating read `rng` only when
// `training` is set.
struct Context {
  bool training = false;
  Rng* rng = nullptr;
};

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Tensor uniform_init(const Shape& shape, std::size_t fan_in, Rng& rng);

class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, bool bias, Rng& rng);

  // x[..., in] -> [..., out]
  Tensor forward(const Tensor& x) const;
  void collect(Params& out, const std::string& prefix) const;

  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }

  Tensor weight;  // [in, out]
  Tensor bias;    // [out], undefined when built without bias

 private:
  std::size_t in_ = 0;
  std::size_t out_ = 0;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim);

  Tensor forward(const Tensor& x) const;
  void collect(Params& out, const std::string& prefix) const;

  Tensor gain;
  Tensor bias;
};

// Single-layer gated recurrent unit, PyTorch gate layout (r, z, n):
//   r = sigmoid(x Wir + bir + h Whr + bhr)
//   z = sigmoid(x Wiz + biz + h Whz + bhz)
//   n = tanh(x Win + bin + r * (h Whn + bhn))
//   h' = (1 - z) * n + z * h
class GruCell {
 public:
  GruCell() = default;
  GruCell(std::size_t input, std::size_t hidden, Rng& rng);

  // x[N, input], h[N, hidden] -> [N, hidden]
  Tensor step(const Tensor& x, const Tensor& h) const;
  void collect(Params& out, const std::string& prefix) const;

  std::size_t input_size() const { return input_; }
  std::size_t hidden_size() const { return hidden_; }

  Tensor w_input;   // [input, 3H]
  Tensor w_hidden;  // [H, 3H]
  Tensor b_input;   // [3H]
  Tensor b_hidden;  // [3H]

 private:
  std::size_t input_ = 0;
  std::size_t hidden_ = 0;
};

// Runs the cell left to right over x[N, T, C] from h_0 = 0; returns h_T [N, H].
Tensor gru_encode(const GruCell& cell, const Tensor& x);

struct AttentionConfig {
  std::size_t model_dim = 64;
  std::size_t heads = 2;
  std::size_t ffn_dim = 128;
  double dropout = 0.0;
  bool rope = false;

  std::size_t head_dim() const { return model_dim / heads; }
  // Throws std::invalid_argument on d % heads != 0 or odd head_dim with rope.
  void validate() const;
};

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(const AttentionConfig& cfg, Rng& rng);

  // X[B, L, d] (or [L, d]) -> same shape. With rope, queries and keys are
  // rotated by their token index before scoring.
  Tensor forward(const Tensor& x) const;
  void collect(Params& out, const std::string& prefix) const;

  const AttentionConfig& config() const { return cfg_; }

  Tensor w_query, w_key, w_value, w_out;  // [d, d] each, no biases

 private:
  AttentionConfig cfg_;
};

class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(std::size_t dim, std::size_t hidden, Rng& rng);

  Tensor forward(const Tensor& x) const;  // W2 GELU(W1 x + b1) + b2
  void collect(Params& out, const std::string& prefix) const;

  Linear inner;
  Linear outer;
};

// Post-norm encoder block:
//   X~ = LN(X + Dropout(MHA(X)))
//   X' = LN(X~ + Dropout(FFN(X~)))
class EncoderBlock {
 public:
  EncoderBlock() = default;
  EncoderBlock(const AttentionConfig& cfg, Rng& rng);

  Tensor forward(const Tensor& x, const Context& ctx) const;
  void collect(Params& out, const std::string& prefix) const;

  const AttentionConfig& config() const { return cfg_; }

  MultiHeadAttention attention;
  LayerNorm norm1;
  FeedForward ffn;
  LayerNorm norm2;

 private:
  AttentionConfig cfg_;
};

// mu + eps * sigma with eps ~ N(0, I) drawn from rng; eps carries no gradient.
Tensor gaussian_reparameterize(const Tensor& mu, const Tensor& sigma, Rng& rng);

}  // namespace prism::nn
