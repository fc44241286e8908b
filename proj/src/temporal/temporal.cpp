#include "prism/temporal/temporal.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "prism/common/error.hpp"
#include "prism/spatial/spatial.hpp"

namespace prism::temporal {

void TemporalConfig::validate() const {
  if (features == 0 || lookback == 0 || priors == 0 || latent_dim == 0 || model_dim == 0 ||
      ffn_dim == 0 || expert_hidden == 0 || experts == 0) {
    throw config_error("temporal: dimensions must be positive");
  }
  if (heads == 0 || model_dim % heads != 0 || (model_dim / heads) % 2 != 0) {
    throw config_error("temporal: model_dim / heads must be a positive even integer");
  }
  if (top_k < 1 || top_k > experts) {
    throw config_error("temporal: top_k " + std::to_string(top_k) + " must lie in [1, experts = " +
                       std::to_string(experts) + "]");
  }
  if (trend_window == 0 || trend_window % 2 == 0) throw config_error("temporal: trend_window must be odd");
  if (lambda_balance < 0 || lambda_reg < 0) throw config_error("temporal: loss weights must be >= 0");
  if (dropout < 0 || dropout >= 1) throw config_error("temporal: dropout must lie in [0, 1)");
}

Decomposition trend_seasonal_decompose(std::span<const double> x, std::size_t n, std::size_t t,
                                       std::size_t c, std::size_t window) {
  if (window == 0 || window % 2 == 0) throw std::invalid_argument("trend_seasonal_decompose: window must be odd");
  if (x.size() != n * t * c) throw std::invalid_argument("trend_seasonal_decompose: bad shape");
  Decomposition out;
  out.trend.resize(x.size());
  out.seasonal.resize(x.size());
  const long half = static_cast<long>(window / 2);
  const long last = static_cast<long>(t) - 1;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (long s = 0; s <= last; ++s) {
        double acc = 0;
        for (long o = -half; o <= half; ++o) {
          const long src = std::clamp(s + o, 0L, last);
          acc += x[(i * t + static_cast<std::size_t>(src)) * c + ch];
        }
        const std::size_t k = (i * t + static_cast<std::size_t>(s)) * c + ch;
        out.trend[k] = acc / static_cast<double>(window);
        out.seasonal[k] = x[k] - out.trend[k];
      }
  return out;
}

std::vector<std::vector<std::size_t>> top_k_indices(const Tensor& logits, std::size_t k) {
  const std::size_t N = logits.size(0), M = logits.size(1);
  if (k < 1 || k > M) throw config_error("top_k: k must lie in [1, " + std::to_string(M) + "]");
  std::vector<std::vector<std::size_t>> out(N);
  std::vector<std::size_t> order(M);
  for (std::size_t i = 0; i < N; ++i) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return logits[i * M + a] > logits[i * M + b]; });
    out[i].assign(order.begin(), order.begin() + static_cast<long>(k));
  }
  return out;
}

// ------------------------------------------------------------------- gate

Gate::Gate(std::size_t latent_dim, std::size_t experts, std::size_t top_k, Rng& rng)
    : norm(latent_dim), mu(latent_dim, experts, true, rng), sigma(latent_dim, experts, true, rng), top_k_(top_k) {}

GatingOutput Gate::forward(const Tensor& quantized, const nn::Context& ctx) const {
  GatingOutput out;
  Tensor normed = norm.forward(quantized);
  out.mu = mu.forward(normed);
  out.sigma = ad::softplus(sigma.forward(normed));
  if (ctx.training) {
    if (ctx.rng == nullptr) throw std::invalid_argument("Gate: training mode needs an rng");
    out.logits = nn::gaussian_reparameterize(out.mu, out.sigma, *ctx.rng);
  } else {
    out.logits = out.mu;
  }
  out.selected = top_k_indices(out.logits, top_k_);
  const std::size_t M = out.logits.size(1);
  std::vector<std::uint8_t> mask(out.logits.numel(), 0);
  for (std::size_t i = 0; i < out.selected.size(); ++i)
    for (std::size_t j : out.selected[i]) mask[i * M + j] = 1;
  out.weights = ad::masked_softmax(out.logits, mask);
  return out;
}

void Gate::collect(nn::Params& out, const std::string& prefix) const {
  norm.collect(out, prefix + ".norm");
  mu.collect(out, prefix + ".mu");
  sigma.collect(out, prefix + ".sigma");
}

Tensor experts_forward(const std::vector<Expert>& experts, const Tensor& u, const GatingOutput& gate) {
  const std::size_t N = u.size(0);
  Tensor total;
  for (std::size_t j = 0; j < experts.size(); ++j) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < N; ++i) {
      const auto& sel = gate.selected[i];
      if (std::find(sel.begin(), sel.end(), j) != sel.end()) rows.push_back(i);
    }
    if (rows.empty()) continue;
    Tensor y = experts[j].forward(ad::gather_rows(u, rows));
    Tensor w = ad::pick(ad::gather_rows(gate.weights, rows), std::vector<std::size_t>(rows.size(), j));
    Tensor placed = ad::scatter_rows(ad::mul_rows(y, w), rows, N);
    total = total.defined() ? ad::add(total, placed) : placed;
  }
  if (!total.defined()) throw std::invalid_argument("experts_forward: no expert selected");
  return total;
}

Tensor load_balance_loss(const GatingOutput& gate) {
  const std::size_t N = gate.weights.size(0), M = gate.weights.size(1);
  if (N == 0) throw std::invalid_argument("load_balance_loss: empty batch");
  std::vector<Real> fraction(M, Real(0));
  for (const auto& sel : gate.selected)
    for (std::size_t j : sel) fraction[j] += Real(1) / static_cast<Real>(N);
  Tensor f = Tensor::from({M}, std::move(fraction));
  return ad::scale(ad::sum(ad::mul(f, ad::mean_rows(gate.weights))), static_cast<Real>(M));
}

// ----------------------------------------------------------------- fusion

Fusion::Fusion(std::size_t model_dim, std::size_t latent_dim, double dropout, Rng& rng)
    : norm_h(model_dim),
      norm_z(latent_dim),
      project(model_dim + latent_dim, model_dim, true, rng),
      value(model_dim, model_dim, false, rng),
      gate(model_dim, model_dim, false, rng),
      out(model_dim, model_dim, false, rng),
      dropout_(dropout) {}

Tensor Fusion::forward(const Tensor& h, const Tensor& quantized, const nn::Context& ctx) const {
  Tensor v = project.forward(ad::concat({norm_h.forward(h), norm_z.forward(quantized)}, 1));
  Tensor branch = out.forward(ad::mul(value.forward(v), ad::gelu(gate.forward(v))));
  if (ctx.training && dropout_ > 0) {
    if (ctx.rng == nullptr) throw std::invalid_argument("Fusion: training mode needs an rng");
    branch = ad::dropout(branch, dropout_, *ctx.rng, true);
  }
  return ad::add(v, branch);
}

void Fusion::collect(nn::Params& out_params, const std::string& prefix) const {
  norm_h.collect(out_params, prefix + ".norm_h");
  norm_z.collect(out_params, prefix + ".norm_z");
  project.collect(out_params, prefix + ".project");
  value.collect(out_params, prefix + ".value");
  gate.collect(out_params, prefix + ".gate");
  out.collect(out_params, prefix + ".out");
}

// ----------------------------------------------------------- loading head

LoadingHead::LoadingHead(std::size_t model_dim, std::size_t expert_hidden, std::size_t priors,
                         std::size_t latent_dim, Rng& rng)
    : base_p(model_dim, priors, false, rng),
      base_l(model_dim, latent_dim, false, rng),
      mod_p(expert_hidden, 2 * priors, true, rng),
      mod_l(expert_hidden, 2 * latent_dim, true, rng),
      alpha(expert_hidden, 1, false, rng) {
  for (auto* mod : {&mod_p, &mod_l}) {
    auto b = mod->bias.mutable_values();
    std::fill(b.begin(), b.begin() + static_cast<long>(b.size() / 2), Real(1));
  }
}

Loadings LoadingHead::forward(const Tensor& h, const Tensor& m) const {
  const std::size_t N = h.size(0);
  auto modulate = [&](const nn::Linear& base, const nn::Linear& mod) {
    const std::size_t width = base.out_features();
    Tensor gd = mod.forward(m);
    return ad::add(ad::mul(ad::narrow(gd, 1, 0, width), base.forward(h)), ad::narrow(gd, 1, width, width));
  };
  Loadings out;
  out.beta_p = modulate(base_p, mod_p);
  out.beta_l = modulate(base_l, mod_l);
  out.alpha = ad::reshape(alpha.forward(m), {N});
  return out;
}

void LoadingHead::collect(nn::Params& out, const std::string& prefix) const {
  base_p.collect(out, prefix + ".base_p");
  base_l.collect(out, prefix + ".base_l");
  mod_p.collect(out, prefix + ".mod_p");
  mod_l.collect(out, prefix + ".mod_l");
  alpha.collect(out, prefix + ".alpha");
}

PricingTerms price(const Loadings& loadings, const Tensor& prior_factors, const Tensor& latent_factors) {
  const std::size_t N = loadings.alpha.numel();
  PricingTerms out;
  out.alpha = loadings.alpha;
  out.prior_term = ad::reshape(ad::matmul(loadings.beta_p, ad::reshape(prior_factors, {prior_factors.numel(), 1})), {N});
  out.latent_term = ad::sum_last(ad::mul(loadings.beta_l, latent_factors));
  out.prediction = ad::add(ad::add(out.alpha, out.prior_term), out.latent_term);
  return out;
}

// ------------------------------------------------------------------ model

TemporalModel::TemporalModel(const TemporalConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg.validate();
  const std::size_t dt = cfg.model_dim;
  seasonal = nn::Linear(cfg.features, dt, true, rng);
  trend = nn::Linear(cfg.features, dt, true, rng);
  structure = nn::Linear(cfg.latent_dim, dt, true, rng);
  encoder = nn::EncoderBlock({dt, cfg.heads, cfg.ffn_dim, cfg.dropout, true}, rng);
  fusion = Fusion(dt, cfg.latent_dim, cfg.dropout, rng);
  gate = Gate(cfg.latent_dim, cfg.experts, cfg.top_k, rng);
  for (std::size_t j = 0; j < cfg.experts; ++j) {
    experts.push_back({nn::Linear(dt, cfg.expert_hidden, true, rng),
                       nn::Linear(cfg.expert_hidden, cfg.expert_hidden, true, rng)});
  }
  head = LoadingHead(dt, cfg.expert_hidden, cfg.priors, cfg.latent_dim, rng);
  factor = nn::Linear(cfg.latent_dim, cfg.latent_dim, false, rng);
}

namespace {

Tensor to_tensor(const ad::Shape& shape, std::span<const double> v) {
  return Tensor::from(shape, std::vector<Real>(v.begin(), v.end()));
}

void check_batch(const TemporalBatch& b, const TemporalConfig& cfg) {
  if (b.stocks == 0) throw std::invalid_argument("temporal: empty batch");
  if (b.x.size() != b.stocks * cfg.lookback * cfg.features || b.quantized.size() != b.stocks * cfg.latent_dim ||
      b.priors.size() != cfg.priors) {
    throw std::invalid_argument("temporal: batch does not match the configuration");
  }
}

}  // namespace

Tensor TemporalModel::encode(const TemporalBatch& batch, const Tensor& quantized, const nn::Context& ctx) const {
  const std::size_t N = batch.stocks, T = cfg_.lookback, C = cfg_.features, dt = cfg_.model_dim;
  auto parts = trend_seasonal_decompose(batch.x, N, T, C, cfg_.trend_window);
  Tensor tokens = ad::add(seasonal.forward(to_tensor({N, T, C}, parts.seasonal)),
                          trend.forward(to_tensor({N, T, C}, parts.trend)));
  Tensor token0 = ad::reshape(structure.forward(quantized), {N, 1, dt});
  Tensor encoded = encoder.forward(ad::concat({token0, tokens}, 1), ctx);
  return ad::reshape(ad::narrow(encoded, 1, 0, 1), {N, dt});
}

TemporalOutput TemporalModel::forward(const TemporalBatch& batch, const nn::Context& ctx) const {
  check_batch(batch, cfg_);
  const std::size_t N = batch.stocks;
  Tensor zq = to_tensor({N, cfg_.latent_dim}, batch.quantized);
  Tensor fp = to_tensor({cfg_.priors}, batch.priors);

  TemporalOutput out;
  Tensor h = encode(batch, zq, ctx);
  Tensor u = fusion.forward(h, zq, ctx);
  out.gating = gate.forward(zq, ctx);
  Tensor m = experts_forward(experts, u, out.gating);
  out.loadings = head.forward(h, m);
  auto terms = price(out.loadings, fp, factor.forward(zq));
  out.alpha = terms.alpha;
  out.prior_term = terms.prior_term;
  out.latent_term = terms.latent_term;
  out.prediction = terms.prediction;
  return out;
}

TemporalLoss TemporalModel::loss(const TemporalBatch& batch, const nn::Context& ctx) const {
  if (batch.targets.size() != batch.stocks) throw std::invalid_argument("temporal: targets must be [N]");
  TemporalLoss out;
  out.output = forward(batch, ctx);
  const auto& o = out.output;
  Tensor mse = spatial::masked_mse(o.prediction, batch.targets);
  Tensor balance = load_balance_loss(o.gating);
  Tensor reg = ad::mean(ad::add(ad::row_norm(o.loadings.beta_p), ad::row_norm(o.loadings.beta_l)));
  out.mse = mse.item();
  out.balance = balance.item();
  out.reg = reg.item();
  out.total = ad::add(mse, ad::add(ad::scale(balance, static_cast<Real>(cfg_.lambda_balance)),
                                   ad::scale(reg, static_cast<Real>(cfg_.lambda_reg))));
  return out;
}

nn::Params TemporalModel::parameters() const {
  nn::Params out;
  seasonal.collect(out, "temporal.seasonal");
  trend.collect(out, "temporal.trend");
  structure.collect(out, "temporal.structure");
  encoder.collect(out, "temporal.encoder");
  fusion.collect(out, "temporal.fusion");
  gate.collect(out, "temporal.gate");
  for (std::size_t j = 0; j < experts.size(); ++j) {
    experts[j].inner.collect(out, "temporal.expert" + std::to_string(j) + ".inner");
    experts[j].outer.collect(out, "temporal.expert" + std::to_string(j) + ".outer");
  }
  head.collect(out, "temporal.head");
  factor.collect(out, "temporal.factor");
  return out;
}

}  // namespace prism::temporal
