#include "prism/diffcore/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace prism::nn {

Tensor uniform_init(const Shape& shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<Real> v(ad::shape_numel(shape));
  for (auto& x : v) x = static_cast<Real>(rng.uniform(-bound, bound));
  return Tensor::from(shape, std::move(v), true);
}

Linear::Linear(std::size_t in, std::size_t out, bool bias, Rng& rng) : in_(in), out_(out) {
  weight = uniform_init({in, out}, in, rng);
  if (bias) this->bias = Tensor::zeros({out}, true);
}

Tensor Linear::forward(const Tensor& x) const {
  Tensor y = ad::matmul(x, weight);
  return bias.defined() ? ad::add_bias(y, bias) : y;
}

void Linear::collect(Params& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

LayerNorm::LayerNorm(std::size_t dim)
    : gain(Tensor::full({dim}, Real(1), true)), bias(Tensor::zeros({dim}, true)) {}

Tensor LayerNorm::forward(const Tensor& x) const { return ad::layer_norm(x, gain, bias); }

void LayerNorm::collect(Params& out, const std::string& prefix) const {
  out.push_back({prefix + ".gain", gain});
  out.push_back({prefix + ".bias", bias});
}

GruCell::GruCell(std::size_t input, std::size_t hidden, Rng& rng) : input_(input), hidden_(hidden) {
  w_input = uniform_init({input, 3 * hidden}, input, rng);
  w_hidden = uniform_init({hidden, 3 * hidden}, hidden, rng);
  b_input = Tensor::zeros({3 * hidden}, true);
  b_hidden = Tensor::zeros({3 * hidden}, true);
}

Tensor GruCell::step(const Tensor& x, const Tensor& h) const {
  const std::size_t H = hidden_;
  Tensor gi = ad::add_bias(ad::matmul(x, w_input), b_input);
  Tensor gh = ad::add_bias(ad::matmul(h, w_hidden), b_hidden);
  Tensor r = ad::sigmoid(ad::add(ad::narrow(gi, 1, 0, H), ad::narrow(gh, 1, 0, H)));
  Tensor z = ad::sigmoid(ad::add(ad::narrow(gi, 1, H, H), ad::narrow(gh, 1, H, H)));
  Tensor n = ad::tanh(ad::add(ad::narrow(gi, 1, 2 * H, H), ad::mul(r, ad::narrow(gh, 1, 2 * H, H))));
  // (1 - z) * n + z * h  ==  n + z * (h - n)
  return ad::add(n, ad::mul(z, ad::sub(h, n)));
}

void GruCell::collect(Params& out, const std::string& prefix) const {
  out.push_back({prefix + ".w_input", w_input});
  out.push_back({prefix + ".w_hidden", w_hidden});
  out.push_back({prefix + ".b_input", b_input});
  out.push_back({prefix + ".b_hidden", b_hidden});
}

Tensor gru_encode(const GruCell& cell, const Tensor& x) {
  if (x.dim() != 3 || x.size(2) != cell.input_size() || x.size(1) == 0) {
    throw std::invalid_argument("gru_encode: expected [N, T>=1, " +
                                std::to_string(cell.input_size()) + "], got " +
                                ad::shape_to_string(x.shape()));
  }
  const std::size_t N = x.size(0), T = x.size(1), C = x.size(2);
  Tensor h = Tensor::zeros({N, cell.hidden_size()});
  for (std::size_t t = 0; t < T; ++t) {
    Tensor xt = ad::reshape(ad::narrow(x, 1, t, 1), {N, C});
    h = cell.step(xt, h);
  }
  return h;
}

void AttentionConfig::validate() const {
  if (heads == 0 || model_dim % heads != 0) {
    throw std::invalid_argument("AttentionConfig: model_dim " + std::to_string(model_dim) +
                                " not divisible by heads " + std::to_string(heads));
  }
  if (rope && head_dim() % 2 != 0) {
    throw std::invalid_argument("AttentionConfig: rope needs an even head_dim, got " +
                                std::to_string(head_dim()));
  }
  if (dropout < 0.0 || dropout >= 1.0) {
    throw std::invalid_argument("AttentionConfig: dropout must be in [0, 1)");
  }
}

MultiHeadAttention::MultiHeadAttention(const AttentionConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t d = cfg.model_dim;
  w_query = uniform_init({d, d}, d, rng);
  w_key = uniform_init({d, d}, d, rng);
  w_value = uniform_init({d, d}, d, rng);
  w_out = uniform_init({d, d}, d, rng);
}

Tensor MultiHeadAttention::forward(const Tensor& x) const {
  const bool unbatched = x.dim() == 2;
  const Tensor in = unbatched ? ad::reshape(x, {1, x.size(0), x.size(1)}) : x;
  const std::size_t B = in.size(0), L = in.size(1), d = in.size(2);
  const std::size_t h = cfg_.heads, dh = cfg_.head_dim();
  if (d != cfg_.model_dim) {
    throw std::invalid_argument("MultiHeadAttention: model dim mismatch");
  }
  auto split = [&](const Tensor& t) {
    return ad::reshape(ad::permute(ad::reshape(t, {B, L, h, dh}), {0, 2, 1, 3}), {B * h, L, dh});
  };
  Tensor q = split(ad::matmul(in, w_query));
  Tensor k = split(ad::matmul(in, w_key));
  Tensor v = split(ad::matmul(in, w_value));
  if (cfg_.rope) {
    q = ad::rope(q);
    k = ad::rope(k);
  }
  Tensor scores = ad::scale(ad::bmm_nt(q, k), Real(1) / std::sqrt(static_cast<Real>(dh)));
  Tensor heads = ad::bmm(ad::softmax(scores), v);  // [B*h, L, dh]
  Tensor merged = ad::reshape(ad::permute(ad::reshape(heads, {B, h, L, dh}), {0, 2, 1, 3}), {B, L, d});
  Tensor out = ad::matmul(merged, w_out);
  return unbatched ? ad::reshape(out, {L, d}) : out;
}

void MultiHeadAttention::collect(Params& out, const std::string& prefix) const {
  out.push_back({prefix + ".w_query", w_query});
  out.push_back({prefix + ".w_key", w_key});
  out.push_back({prefix + ".w_value", w_value});
  out.push_back({prefix + ".w_out", w_out});
}

FeedForward::FeedForward(std::size_t dim, std::size_t hidden, Rng& rng)
    : inner(dim, hidden, true, rng), outer(hidden, dim, true, rng) {}

Tensor FeedForward::forward(const Tensor& x) const {
  return outer.forward(ad::gelu(inner.forward(x)));
}

void FeedForward::collect(Params& out, const std::string& prefix) const {
  inner.collect(out, prefix + ".inner");
  outer.collect(out, prefix + ".outer");
}

EncoderBlock::EncoderBlock(const AttentionConfig& cfg, Rng& rng)
    : attention(cfg, rng),
      norm1(cfg.model_dim),
      ffn(cfg.model_dim, cfg.ffn_dim, rng),
      norm2(cfg.model_dim),
      cfg_(cfg) {}

Tensor EncoderBlock::forward(const Tensor& x, const Context& ctx) const {
  const bool drop = ctx.training && cfg_.dropout > 0.0;
  if (drop && ctx.rng == nullptr) throw std::invalid_argument("EncoderBlock: training needs an rng");
  Tensor attn = attention.forward(x);
  if (drop) attn = ad::dropout(attn, cfg_.dropout, *ctx.rng, true);
  Tensor mid = norm1.forward(ad::add(x, attn));
  Tensor ff = ffn.forward(mid);
  if (drop) ff = ad::dropout(ff, cfg_.dropout, *ctx.rng, true);
  return norm2.forward(ad::add(mid, ff));
}

void EncoderBlock::collect(Params& out, const std::string& prefix) const {
  attention.collect(out, prefix + ".attention");
  norm1.collect(out, prefix + ".norm1");
  ffn.collect(out, prefix + ".ffn");
  norm2.collect(out, prefix + ".norm2");
}

Tensor gaussian_reparameterize(const Tensor& mu, const Tensor& sigma, Rng& rng) {
  if (mu.shape() != sigma.shape()) {
    throw std::invalid_argument("gaussian_reparameterize: shape mismatch");
  }
  std::vector<Real> eps(mu.numel());
  for (auto& e : eps) e = static_cast<Real>(rng.normal());
  Tensor noise = Tensor::from(mu.shape(), std::move(eps));
  return ad::add(mu, ad::mul(noise, sigma));
}

}  // namespace prism::nn
