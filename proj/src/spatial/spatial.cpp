#include "prism/spatial/spatial.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "prism/common/error.hpp"

namespace prism::spatial {

namespace {

bool is_power_of_two(std::size_t v) { return v != 0 && (v & (v - 1)) == 0; }

}  // namespace

void SpatialConfig::validate() const {
  if (features == 0 || priors == 0 || horizons == 0 || latent_dim == 0 || codebook_size == 0 ||
      decoder_hidden == 0 || ffn_dim == 0) {
    throw config_error("spatial: dimensions must be positive");
  }
  if (decoder_base == 0 || lookback % decoder_base != 0 || !is_power_of_two(lookback / decoder_base)) {
    throw config_error("spatial: lookback " + std::to_string(lookback) + " / decoder_base " +
                       std::to_string(decoder_base) + " must be a power of two");
  }
  if (heads == 0 || latent_dim % heads != 0) {
    throw config_error("spatial: latent_dim must be divisible by heads");
  }
  if (lambda_commit < 0 || lambda_contra < 0 || lambda_pred < 0) {
    throw config_error("spatial: loss weights must be >= 0");
  }
  if (!(temperature > 0)) throw config_error("spatial: temperature must be > 0");
  if (dropout < 0 || dropout >= 1) throw config_error("spatial: dropout must lie in [0, 1)");
  if (ema_decay < 0 || ema_decay > 1) throw config_error("spatial: ema_decay must lie in [0, 1]");
  if (dead_patience == 0) throw config_error("spatial: dead_patience must be >= 1");
}

std::size_t SpatialConfig::upsampling_blocks() const {
  std::size_t blocks = 0;
  for (std::size_t r = lookback / decoder_base; r > 1; r >>= 1) ++blocks;
  return blocks;
}

// ------------------------------------------------------------------ RevIN

std::vector<double> revin_normalize(std::span<const double> x, std::size_t n, std::size_t t,
                                    std::size_t c, RevinStats& stats) {
  if (x.size() != n * t * c || t == 0) throw std::invalid_argument("revin_normalize: bad shape");
  stats.samples = n;
  stats.channels = c;
  stats.mean.assign(n * c, 0.0);
  stats.std.assign(n * c, 0.0);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double m = 0;
      for (std::size_t s = 0; s < t; ++s) m += x[(i * t + s) * c + ch];
      m /= static_cast<double>(t);
      double v = 0;
      for (std::size_t s = 0; s < t; ++s) {
        const double d = x[(i * t + s) * c + ch] - m;
        v += d * d;
      }
      const double sd = std::max(std::sqrt(v / static_cast<double>(t)), kRevinFloor);
      stats.mean[i * c + ch] = m;
      stats.std[i * c + ch] = sd;
      for (std::size_t s = 0; s < t; ++s) {
        const std::size_t k = (i * t + s) * c + ch;
        out[k] = (x[k] - m) / sd;
      }
    }
  }
  return out;
}

std::vector<double> revin_denormalize(std::span<const double> x, std::size_t t, const RevinStats& stats) {
  const std::size_t n = stats.samples, c = stats.channels;
  if (x.size() != n * t * c) throw std::invalid_argument("revin_denormalize: bad shape");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t s = 0; s < t; ++s)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t k = (i * t + s) * c + ch;
        out[k] = x[k] * stats.std[i * c + ch] + stats.mean[i * c + ch];
      }
  return out;
}

// --------------------------------------------------------------- codebook

Codebook::Codebook(std::size_t size, std::size_t dim, Rng& rng) {
  const double bound = 1.0 / static_cast<double>(size);
  std::vector<Real> v(size * dim);
  for (auto& x : v) x = static_cast<Real>(rng.uniform(-bound, bound));
  codewords = Tensor::from({size, dim}, std::move(v), true);
  usage.assign(size, 1.0);
  low_streak.assign(size, 0);
}

CodeAssignment quantize(const Tensor& z, const Codebook& codebook) {
  const std::size_t K = codebook.size(), d = codebook.dim();
  if (K == 0) throw std::invalid_argument("quantize: empty codebook");
  if (z.dim() != 2 || z.size(1) != d) throw std::invalid_argument("quantize: z must be [N, d_s]");
  const std::size_t N = z.size(0);
  CodeAssignment out;
  out.index.resize(N);
  out.distance.resize(N);
  const auto zv = z.values();
  const auto cv = codebook.codewords.values();
  for (std::size_t i = 0; i < N; ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t k = 0; k < K; ++k) {
      double acc = 0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = static_cast<double>(zv[i * d + j]) - static_cast<double>(cv[k * d + j]);
        acc += diff * diff;
      }
      if (acc < best) {
        best = acc;
        arg = k;
      }
    }
    out.index[i] = arg;
    out.distance[i] = std::sqrt(best);
  }
  out.quantized = ad::gather_rows(codebook.codewords, out.index);
  return out;
}

Tensor vq_loss(const Tensor& z, const Tensor& quantized, double lambda_commit) {
  if (z.shape() != quantized.shape()) throw std::invalid_argument("vq_loss: shape mismatch");
  const Real inv_n = Real(1) / static_cast<Real>(z.size(0));
  Tensor codebook_term = ad::sum(ad::square(ad::sub(z.detach(), quantized)));
  Tensor commit_term = ad::sum(ad::square(ad::sub(z, quantized.detach())));
  return ad::scale(ad::add(codebook_term, ad::scale(commit_term, static_cast<Real>(lambda_commit))), inv_n);
}

Tensor contrastive_loss(const Tensor& z, const Tensor& codewords, const std::vector<std::size_t>& index,
                        double tau) {
  if (!(tau > 0)) throw std::invalid_argument("contrastive_loss: tau must be > 0");
  Tensor distance = ad::sqrt(ad::pairwise_sqdist(z, codewords));
  Tensor log_probs = ad::log_softmax(ad::scale(distance, static_cast<Real>(-1.0 / tau)));
  return ad::scale(ad::mean(ad::pick(log_probs, index)), Real(-1));
}

std::size_t ema_update(Codebook& codebook, const std::vector<std::size_t>& index, const Tensor& z,
                       const EmaSettings& settings, Rng& rng) {
  if (codebook.frozen()) throw Error(ErrorCategory::state, "ema_update: codebook is frozen");
  const std::size_t K = codebook.size(), d = codebook.dim();
  std::vector<double> counts(K, 0.0);
  for (std::size_t k : index) counts.at(k) += 1.0;
  std::size_t resets = 0;
  auto cw = codebook.codewords.mutable_values();
  const auto zv = z.values();
  const std::size_t N = z.size(0);
  for (std::size_t k = 0; k < K; ++k) {
    codebook.usage[k] = settings.decay * codebook.usage[k] + (1.0 - settings.decay) * counts[k];
    codebook.low_streak[k] = codebook.usage[k] < settings.threshold ? codebook.low_streak[k] + 1 : 0;
    if (codebook.low_streak[k] >= settings.patience && N > 0) {
      const std::size_t row = rng.index(N);
      std::copy(zv.begin() + static_cast<long>(row * d), zv.begin() + static_cast<long>((row + 1) * d),
                cw.begin() + static_cast<long>(k * d));
      codebook.usage[k] = 1.0;
      codebook.low_streak[k] = 0;
      ++resets;
    }
  }
  return resets;
}

double perplexity(const std::vector<std::size_t>& index, std::size_t codebook_size) {
  if (index.empty()) return 0.0;
  std::vector<double> counts(codebook_size, 0.0);
  for (std::size_t k : index) counts.at(k) += 1.0;
  double entropy = 0;
  const double n = static_cast<double>(index.size());
  for (double c : counts) {
    if (c > 0) entropy -= c / n * std::log(c / n);
  }
  return std::exp(entropy);
}

// ---------------------------------------------------------------- decoder

Decoder::Decoder(const SpatialConfig& cfg, Rng& rng)
    : hidden_(cfg.decoder_hidden), base_(cfg.decoder_base) {
  cfg.validate();
  const std::size_t H = cfg.decoder_hidden;
  project = nn::Linear(cfg.latent_dim, H * cfg.decoder_base, true, rng);
  for (std::size_t b = 0; b < cfg.upsampling_blocks(); ++b) {
    Block block;
    block.expand = nn::Linear(H, 2 * H, true, rng);
    block.film = nn::Linear(cfg.priors, 2 * H, true, rng);
    block.skip_weight = nn::uniform_init({4, H, H}, 4 * H, rng);
    block.skip_bias = Tensor::zeros({H}, true);
    blocks.push_back(std::move(block));
  }
  output = nn::Linear(H, cfg.features, true, rng);
}

Tensor Decoder::forward(const Tensor& quantized, const Tensor& priors) const {
  const std::size_t N = quantized.size(0), H = hidden_;
  Tensor conditioning = ad::broadcast_rows(priors, N);
  Tensor x = ad::reshape(project.forward(quantized), {N, base_, H});
  for (const auto& block : blocks) {
    const std::size_t L = x.size(1);
    Tensor expanded = ad::reshape(ad::gelu(block.expand.forward(x)), {N, 2 * L, H});
    Tensor modulation = block.film.forward(conditioning);
    Tensor y = ad::film(expanded, ad::narrow(modulation, 1, 0, H), ad::narrow(modulation, 1, H, H));
    x = ad::add(y, ad::conv_transpose1d(x, block.skip_weight, block.skip_bias, 2, 1));
  }
  return output.forward(x);
}

void Decoder::collect(nn::Params& out, const std::string& prefix) const {
  project.collect(out, prefix + ".project");
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string p = prefix + ".block" + std::to_string(b);
    blocks[b].expand.collect(out, p + ".expand");
    blocks[b].film.collect(out, p + ".film");
    out.push_back({p + ".skip.weight", blocks[b].skip_weight});
    out.push_back({p + ".skip.bias", blocks[b].skip_bias});
  }
  output.collect(out, prefix + ".output");
}

Tensor reconstruction_loss(const Tensor& target, const Tensor& reconstruction) {
  if (target.shape() != reconstruction.shape()) {
    throw std::invalid_argument("reconstruction_loss: shape mismatch");
  }
  return ad::scale(ad::sum(ad::square(ad::sub(target, reconstruction))),
                   Real(1) / static_cast<Real>(target.size(0)));
}

MultiHorizonHead::MultiHorizonHead(const SpatialConfig& cfg, Rng& rng) : horizons_(cfg.horizons) {
  const std::size_t d = cfg.latent_dim;
  init = nn::Linear(d + cfg.priors, d, true, rng);
  start_token = Tensor::zeros({d}, true);
  cell = nn::GruCell(d, d, rng);
  feedback = nn::Linear(1, d, true, rng);
  output = nn::Linear(d, 1, true, rng);
}

Tensor MultiHorizonHead::forward(const Tensor& quantized, const Tensor& priors) const {
  const std::size_t N = quantized.size(0);
  Tensor h = ad::tanh(init.forward(ad::concat({quantized, ad::broadcast_rows(priors, N)}, 1)));
  Tensor input = ad::broadcast_rows(start_token, N);
  std::vector<Tensor> steps;
  for (std::size_t k = 0; k < horizons_; ++k) {
    h = cell.step(input, h);
    Tensor y = output.forward(h);
    steps.push_back(y);
    if (k + 1 < horizons_) input = feedback.forward(y);
  }
  return ad::concat(steps, 1);
}

void MultiHorizonHead::collect(nn::Params& out, const std::string& prefix) const {
  init.collect(out, prefix + ".init");
  out.push_back({prefix + ".start_token", start_token});
  cell.collect(out, prefix + ".cell");
  feedback.collect(out, prefix + ".feedback");
  output.collect(out, prefix + ".output");
}

Tensor masked_mse(const Tensor& prediction, std::span<const double> target) {
  if (prediction.numel() != target.size()) throw std::invalid_argument("masked_mse: size mismatch");
  std::vector<Real> filled(target.size()), mask(target.size());
  std::size_t count = 0;
  for (std::size_t k = 0; k < target.size(); ++k) {
    const bool ok = std::isfinite(target[k]);
    filled[k] = ok ? static_cast<Real>(target[k]) : Real(0);
    mask[k] = ok ? Real(1) : Real(0);
    count += ok;
  }
  if (count == 0) return Tensor::scalar(0);
  Tensor diff = ad::sub(prediction, Tensor::from(prediction.shape(), std::move(filled)));
  Tensor masked = ad::mul(ad::square(diff), Tensor::from(prediction.shape(), std::move(mask)));
  return ad::scale(ad::sum(masked), Real(1) / static_cast<Real>(count));
}

// -------------------------------------------------------------- the model

SpatialModel::SpatialModel(const SpatialConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg.validate();
  gru = nn::GruCell(cfg.features, cfg.latent_dim, rng);
  encoder = nn::EncoderBlock({cfg.latent_dim, cfg.heads, cfg.ffn_dim, cfg.dropout, false}, rng);
  codebook = Codebook(cfg.codebook_size, cfg.latent_dim, rng);
  decoder = Decoder(cfg, rng);
  head = MultiHorizonHead(cfg, rng);
}

Tensor SpatialModel::encode(const Tensor& x_revin, const nn::Context& ctx) const {
  return encoder.forward(nn::gru_encode(gru, x_revin), ctx);
}

namespace {
Tensor revin_tensor(const SpatialBatch& batch, const SpatialConfig& cfg) {
  RevinStats stats;
  auto xr = revin_normalize(batch.x, batch.stocks, cfg.lookback, cfg.features, stats);
  return Tensor::from({batch.stocks, cfg.lookback, cfg.features}, std::vector<Real>(xr.begin(), xr.end()));
}
}  // namespace

Tensor SpatialModel::encode_batch(const SpatialBatch& batch, const nn::Context& ctx) const {
  return encode(revin_tensor(batch, cfg_), ctx);
}

CodeAssignment SpatialModel::assign(const SpatialBatch& batch) const {
  ad::NoGradGuard guard;
  return quantize(encode_batch(batch, {}), codebook);
}

SpatialLoss SpatialModel::loss(const SpatialBatch& batch, const nn::Context& ctx) const {
  if (batch.stocks == 0) throw std::invalid_argument("SpatialModel::loss: empty batch");
  if (batch.priors.size() != cfg_.priors || batch.targets.size() != batch.stocks * cfg_.horizons) {
    throw std::invalid_argument("SpatialModel::loss: batch does not match the configuration");
  }
  SpatialLoss out;
  Tensor x = revin_tensor(batch, cfg_);
  out.z = encode(x, ctx);
  out.assignment = quantize(out.z, codebook);
  Tensor passthrough = ad::straight_through(out.z, out.assignment.quantized);
  Tensor priors = Tensor::from({cfg_.priors}, std::vector<Real>(batch.priors.begin(), batch.priors.end()));

  Tensor recon = reconstruction_loss(x, decoder.forward(passthrough, priors));
  Tensor vq = vq_loss(out.z, out.assignment.quantized, cfg_.lambda_commit);
  Tensor contra = contrastive_loss(out.z, codebook.codewords, out.assignment.index, cfg_.temperature);
  Tensor pred = masked_mse(head.forward(passthrough, priors), batch.targets);
  out.recon = recon.item();
  out.vq = vq.item();
  out.contra = contra.item();
  out.pred = pred.item();
  out.total = ad::add(ad::add(recon, vq),
                      ad::add(ad::scale(contra, static_cast<Real>(cfg_.lambda_contra)),
                              ad::scale(pred, static_cast<Real>(cfg_.lambda_pred))));
  return out;
}

nn::Params SpatialModel::parameters() const {
  nn::Params out;
  gru.collect(out, "spatial.gru");
  encoder.collect(out, "spatial.encoder");
  out.push_back({"spatial.codebook", codebook.codewords});
  decoder.collect(out, "spatial.decoder");
  head.collect(out, "spatial.head");
  return out;
}

void SpatialModel::freeze() {
  for (auto& p : parameters()) p.tensor.set_frozen(true);
}

}  // namespace prism::spatial
