#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "prism/common/rng.hpp"
#include "prism/diffcore/nn.hpp"
#include "prism/diffcore/ops.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

namespace {

using prism::Rng;
using prism::ad::Real;
using prism::ad::Shape;
using prism::ad::Tensor;
namespace ad = prism::ad;
namespace nn = prism::nn;
using prism::testing::grad_check;

Tensor random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
  std::vector<Real> v(ad::shape_numel(shape));
  for (auto& x : v) x = static_cast<Real>(rng.normal(0.0, scale));
  return Tensor::from(shape, std::move(v));
}

void zero_fill(Tensor& t) {
  for (auto& v : t.mutable_values()) v = 0;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// ---------------------------------------------------------------- backward

TEST(Backward, SumOfSquares) {
  ad::Tape::current().clear();
  Tensor x = Tensor::from({2}, {1, 2}, true);
  ad::backward(ad::sum(ad::mul(x, x)));
  ASSERT_TRUE(x.has_grad());
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
}

TEST(Backward, ConstantLossLeavesGradsZero) {
  ad::Tape::current().clear();
  Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  Tensor c = Tensor::scalar(4.0);
  ad::backward(ad::add_scalar(c, 1.0));
  for (Real g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, NonScalarLossThrows) {
  ad::Tape::current().clear();
  Tensor x = Tensor::from({2}, {1, 2}, true);
  EXPECT_THROW(ad::backward(ad::mul(x, x)), std::invalid_argument);
}

TEST(Backward, DetachedTensorIsConstant) {
  ad::Tape::current().clear();
  Tensor x = Tensor::from({2}, {3, -1}, true);
  ad::backward(ad::sum(ad::mul(x, x.detach())));
  EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -1.0);
}

TEST(Backward, RepeatedCallsAccumulate) {
  ad::Tape::current().clear();
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor loss = ad::sum(ad::mul(x, x));
  ad::backward(loss);
  ad::backward(loss);
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 8.0);
  x.zero_grad();
  EXPECT_EQ(x.grad()[0], 0.0);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  ad::Tape::current().clear();
  Tensor x = Tensor::from({2}, {1, 2}, true);
  {
    ad::NoGradGuard guard;
    Tensor y = ad::sum(ad::mul(x, x));
    EXPECT_EQ(ad::Tape::current().size(), 0u);
  }
  EXPECT_TRUE(ad::grad_enabled());
}

TEST(Backward, FrozenTensorReceivesNoGradient) {
  ad::Tape::current().clear();
  Tensor x = Tensor::from({2}, {1, 2}, true);
  x.set_frozen(true);
  EXPECT_FALSE(x.requires_grad());
  Tensor w = Tensor::from({2}, {3, 4}, true);
  ad::backward(ad::sum(ad::mul(x, w)));
  EXPECT_FALSE(x.has_grad() && (x.grad()[0] != 0 || x.grad()[1] != 0));
  EXPECT_DOUBLE_EQ(w.grad()[1], 2.0);
}

TEST(Backward, ThreeLayerMlpMatchesFiniteDifferences) {
  Rng rng(7);
  nn::Linear l1(4, 6, true, rng), l2(6, 5, true, rng), l3(5, 1, true, rng);
  for (auto* l : {&l1, &l2, &l3}) {
    for (auto& b : l->bias.mutable_values()) b = static_cast<Real>(rng.normal(0, 0.3));
  }
  Tensor x = random_tensor({3, 4}, rng);
  auto loss = [&] {
    Tensor h = ad::tanh(l1.forward(x));
    h = ad::gelu(l2.forward(h));
    return ad::sum(ad::square(l3.forward(h)));
  };
  auto r = grad_check(loss, {l1.weight, l1.bias, l2.weight, l2.bias, l3.weight, l3.bias, x});
  EXPECT_LE(r.max_rel_error, 1e-5) << r.worst;
}

// ------------------------------------------------------------- primitives

using prism::testing::PrimitiveCase;

class PrimitiveGradient : public ::testing::TestWithParam<PrimitiveCase> {};

TEST_P(PrimitiveGradient, MatchesFiniteDifferences) {
  auto r = prism::testing::check_primitive(GetParam(), 11);
  EXPECT_LE(r.max_rel_error, 1e-5) << GetParam().name << " worst " << r.worst;
}

INSTANTIATE_TEST_SUITE_P(AllPrimitives, PrimitiveGradient, ::testing::ValuesIn(prism::testing::primitive_cases()),
                         [](const auto& info) { return std::string(info.param.name); });

// ------------------------------------------------------------ activations

TEST(Activations, ClosedForms) {
  Tensor z = Tensor::from({1}, {0});
  EXPECT_EQ(ad::gelu(z)[0], 0.0);
  EXPECT_NEAR(ad::softplus(z)[0], std::log(2.0), 1e-15);
  Tensor s = ad::softmax(Tensor::from({2}, {0, 0}));
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_DOUBLE_EQ(s[1], 0.5);
  Tensor ln = ad::layer_norm(Tensor::from({3}, {5, 5, 5}), Tensor::full({3}, 1), Tensor::zeros({3}));
  for (Real v : ln.values()) EXPECT_EQ(v, 0.0);
}

TEST(Activations, GeluIsExactErfForm) {
  for (double x : {-2.5, -0.3, 0.7, 1.9}) {
    const double expected = x * 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
    EXPECT_NEAR(ad::gelu(Tensor::from({1}, {x}))[0], expected, 1e-15);
  }
}

TEST(Activations, SoftmaxRowsSumToOne) {
  Rng rng(3);
  Tensor x = random_tensor({20, 9}, rng, 5.0);
  Tensor s = ad::softmax(x);
  for (std::size_t r = 0; r < 20; ++r) {
    double total = 0;
    for (std::size_t c = 0; c < 9; ++c) total += s[r * 9 + c];
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Activations, MaskedSoftmaxZerosOutsideMask) {
  Tensor s = ad::masked_softmax(Tensor::from({4}, {2, 1, 0, -1}), {1, 1, 0, 0});
  EXPECT_NEAR(s[0], std::exp(1.0) / (1.0 + std::exp(1.0)), 1e-12);
  EXPECT_NEAR(s[1], 1.0 / (1.0 + std::exp(1.0)), 1e-12);
  EXPECT_EQ(s[2], 0.0);
  EXPECT_EQ(s[3], 0.0);
}

TEST(Activations, LayerNormMoments) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.index(30);
    Tensor x = random_tensor({n}, rng, 3.0);
    Tensor y = ad::layer_norm(x, Tensor::full({n}, 1), Tensor::zeros({n}));
    double m = 0, v = 0;
    for (Real e : y.values()) m += e;
    m /= static_cast<double>(n);
    for (Real e : y.values()) v += (e - m) * (e - m);
    v /= static_cast<double>(n);
    EXPECT_LE(std::abs(m), 1e-10);
    EXPECT_NEAR(v, 1.0, 1e-6);
  }
}

// -------------------------------------------------------------------- GRU

TEST(Gru, ZeroWeightsGiveZeroOutput) {
  Rng rng(1);
  nn::GruCell cell(3, 4, rng);
  zero_fill(cell.w_input);
  zero_fill(cell.w_hidden);
  Tensor out = nn::gru_encode(cell, random_tensor({2, 5, 3}, rng));
  for (Real v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(Gru, SingleStepIsOneCellStep) {
  Rng rng(2);
  nn::GruCell cell(3, 4, rng);
  Tensor x = random_tensor({2, 1, 3}, rng);
  Tensor a = nn::gru_encode(cell, x);
  Tensor b = cell.step(ad::reshape(x, {2, 3}), Tensor::zeros({2, 4}));
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
}

// Plain-double GRU, gate order (r, z, n).
std::vector<double> gru_reference(const nn::GruCell& cell, const std::vector<double>& seq,
                                  std::size_t T, std::size_t C) {
  const std::size_t H = cell.hidden_size();
  std::vector<double> h(H, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<double> gi(3 * H), gh(3 * H);
    for (std::size_t j = 0; j < 3 * H; ++j) {
      gi[j] = cell.b_input[j];
      gh[j] = cell.b_hidden[j];
      for (std::size_t c = 0; c < C; ++c) gi[j] += seq[t * C + c] * cell.w_input[c * 3 * H + j];
      for (std::size_t k = 0; k < H; ++k) gh[j] += h[k] * cell.w_hidden[k * 3 * H + j];
    }
    std::vector<double> next(H);
    for (std::size_t j = 0; j < H; ++j) {
      const double r = sigmoid(gi[j] + gh[j]);
      const double z = sigmoid(gi[H + j] + gh[H + j]);
      const double n = std::tanh(gi[2 * H + j] + r * gh[2 * H + j]);
      next[j] = (1 - z) * n + z * h[j];
    }
    h = next;
  }
  return h;
}

TEST(Gru, ThreeStepsMatchUnrolledOracle) {
  Rng rng(4);
  nn::GruCell cell(3, 5, rng);
  for (auto& b : cell.b_input.mutable_values()) b = static_cast<Real>(rng.normal(0, 0.4));
  for (auto& b : cell.b_hidden.mutable_values()) b = static_cast<Real>(rng.normal(0, 0.4));
  Tensor x = random_tensor({2, 3, 3}, rng);
  Tensor out = nn::gru_encode(cell, x);
  for (std::size_t i = 0; i < 2; ++i) {
    std::vector<double> seq(x.vec().begin() + static_cast<long>(i * 9),
                            x.vec().begin() + static_cast<long>((i + 1) * 9));
    auto ref = gru_reference(cell, seq, 3, 3);
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(out[i * 5 + j], ref[j], 1e-14);
  }
}

TEST(Gru, RejectsBadShape) {
  Rng rng(0);
  nn::GruCell cell(3, 4, rng);
  EXPECT_THROW(nn::gru_encode(cell, Tensor::zeros({2, 5, 2})), std::invalid_argument);
  EXPECT_THROW(nn::gru_encode(cell, Tensor::zeros({2, 0, 3})), std::invalid_argument);
}

TEST(Gru, GradientMatchesFiniteDifferences) {
  Rng rng(8);
  nn::GruCell cell(2, 3, rng);
  Tensor x = random_tensor({2, 3, 2}, rng);
  auto loss = [&] { return ad::sum(ad::square(nn::gru_encode(cell, x))); };
  auto r = grad_check(loss, {cell.w_input, cell.w_hidden, cell.b_input, cell.b_hidden, x});
  EXPECT_LE(r.max_rel_error, 1e-5) << r.worst;
}

// ------------------------------------------------------------------- RoPE

double dot(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

TEST(Rope, ZeroPositionIsIdentity) {
  Rng rng(1);
  Tensor u = random_tensor({1, 8}, rng);
  Tensor r = ad::rope(u, 0);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(r[i], u[i]);
}

TEST(Rope, PreservesNorm) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor u = random_tensor({1, 16}, rng);
    Tensor r = ad::rope(u, rng.index(500));
    EXPECT_NEAR(std::sqrt(dot(r, r)), std::sqrt(dot(u, u)), 1e-12);
  }
}

TEST(Rope, InnerProductDependsOnRelativePosition) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor q = random_tensor({1, 8}, rng), k = random_tensor({1, 8}, rng);
    const std::size_t m = rng.index(50), n = rng.index(50), s = rng.index(200);
    const double base = dot(ad::rope(q, m), ad::rope(k, n));
    const double shifted = dot(ad::rope(q, m + s), ad::rope(k, n + s));
    EXPECT_NEAR(base, shifted, 1e-10);
  }
}

TEST(Rope, RowsUseTheirOwnPosition) {
  Rng rng(4);
  Tensor x = random_tensor({3, 4}, rng);
  Tensor all = ad::rope(x);
  for (std::size_t l = 0; l < 3; ++l) {
    Tensor row = ad::rope(ad::narrow(x, 0, l, 1), l);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(all[l * 4 + j], row[j]);
  }
}

TEST(Rope, PairRotationAngles) {
  Tensor u = Tensor::from({1, 4}, {1, 0, 1, 0});
  Tensor r = ad::rope(u, 3);
  const double t1 = std::pow(10000.0, -2.0 / 4.0);
  EXPECT_NEAR(r[0], std::cos(3.0), 1e-15);
  EXPECT_NEAR(r[1], std::sin(3.0), 1e-15);
  EXPECT_NEAR(r[2], std::cos(3.0 * t1), 1e-15);
  EXPECT_NEAR(r[3], std::sin(3.0 * t1), 1e-15);
}

TEST(Rope, OddHeadDimIsConfigurationError) {
  nn::AttentionConfig cfg{6, 2, 8, 0.0, true};
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  nn::AttentionConfig bad{5, 2, 8, 0.0, false};
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

// -------------------------------------------------------------- attention

std::vector<double> matvec_rows(const std::vector<double>& x, std::size_t rows, std::size_t k,
                                const Tensor& w, std::size_t m) {
  std::vector<double> out(rows * m, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t i = 0; i < k; ++i) out[r * m + j] += x[r * k + i] * w[i * m + j];
  return out;
}

// Loop-based multi-head attention without positions.
std::vector<double> attention_reference(const nn::MultiHeadAttention& mha, const Tensor& x) {
  const std::size_t N = x.size(0), d = x.size(1);
  const std::size_t h = mha.config().heads, dh = d / h;
  std::vector<double> xv(x.vec().begin(), x.vec().end());
  auto Q = matvec_rows(xv, N, d, mha.w_query, d);
  auto K = matvec_rows(xv, N, d, mha.w_key, d);
  auto V = matvec_rows(xv, N, d, mha.w_value, d);
  std::vector<double> concat(N * d, 0.0);
  for (std::size_t hd = 0; hd < h; ++hd) {
    for (std::size_t i = 0; i < N; ++i) {
      std::vector<double> s(N);
      double mx = -1e300;
      for (std::size_t j = 0; j < N; ++j) {
        double acc = 0;
        for (std::size_t c = 0; c < dh; ++c) acc += Q[i * d + hd * dh + c] * K[j * d + hd * dh + c];
        s[j] = acc / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (auto& e : s) z += (e = std::exp(e - mx));
      for (std::size_t j = 0; j < N; ++j)
        for (std::size_t c = 0; c < dh; ++c)
          concat[i * d + hd * dh + c] += s[j] / z * V[j * d + hd * dh + c];
    }
  }
  return matvec_rows(concat, N, d, mha.w_out, d);
}

TEST(Attention, SingleTokenIsValueThenOutput) {
  Rng rng(1);
  nn::MultiHeadAttention mha({4, 2, 8, 0.0, false}, rng);
  Tensor x = random_tensor({1, 4}, rng);
  Tensor out = mha.forward(x);
  Tensor expected = ad::matmul(ad::matmul(x, mha.w_value), mha.w_out);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(out[i], expected[i], 1e-14);
}

TEST(Attention, ZeroQueryKeyGivesMeanPooledValues) {
  Rng rng(2);
  nn::MultiHeadAttention mha({4, 2, 8, 0.0, false}, rng);
  zero_fill(mha.w_query);
  zero_fill(mha.w_key);
  Tensor x = random_tensor({5, 4}, rng);
  Tensor out = mha.forward(x);
  Tensor pooled = ad::matmul(ad::matmul(ad::reshape(ad::mean_rows(x), {1, 4}), mha.w_value), mha.w_out);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out[i * 4 + j], pooled[j], 1e-14);
}

TEST(Attention, MatchesLoopReference) {
  Rng rng(3);
  nn::MultiHeadAttention mha({4, 2, 8, 0.0, false}, rng);
  Tensor x = random_tensor({3, 4}, rng);
  Tensor out = mha.forward(x);
  auto ref = attention_reference(mha, x);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(out[i], ref[i], 1e-13);
}

TEST(Attention, BatchedEqualsPerSample) {
  Rng rng(4);
  nn::MultiHeadAttention mha({4, 2, 8, 0.0, true}, rng);
  Tensor x = random_tensor({2, 3, 4}, rng);
  Tensor out = mha.forward(x);
  for (std::size_t b = 0; b < 2; ++b) {
    Tensor single = mha.forward(ad::reshape(ad::narrow(x, 0, b, 1), {3, 4}));
    for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(out[b * 12 + i], single[i], 1e-14);
  }
}

TEST(Attention, WithoutPositionsIsPermutationEquivariant) {
  Rng rng(5);
  nn::MultiHeadAttention mha({4, 2, 8, 0.0, false}, rng);
  Tensor x = random_tensor({3, 4}, rng);
  Tensor px = ad::gather_rows(x, {2, 0, 1});
  Tensor a = ad::gather_rows(mha.forward(x), {2, 0, 1});
  Tensor b = mha.forward(px);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(a[i], b[i], 1e-14);
}

TEST(Attention, GradientMatchesFiniteDifferences) {
  Rng rng(6);
  nn::MultiHeadAttention mha({4, 2, 8, 0.0, true}, rng);
  Tensor x = random_tensor({3, 4}, rng);
  auto loss = [&] { return ad::sum(ad::square(mha.forward(x))); };
  auto r = grad_check(loss, {mha.w_query, mha.w_key, mha.w_value, mha.w_out, x});
  EXPECT_LE(r.max_rel_error, 1e-5) << r.worst;
}

// ---------------------------------------------------------- encoder block

TEST(EncoderBlock, ZeroWeightsGiveDoubleLayerNorm) {
  Rng rng(1);
  nn::EncoderBlock block({4, 2, 8, 0.0, false}, rng);
  nn::Params params;
  block.collect(params, "b");
  for (auto& p : params) {
    if (p.name.find("norm") == std::string::npos) zero_fill(p.tensor);
  }
  Tensor x = random_tensor({3, 4}, rng);
  Tensor out = block.forward(x, {});
  Tensor one = Tensor::full({4}, 1), zero = Tensor::zeros({4});
  Tensor ref = ad::layer_norm(ad::layer_norm(x, one, zero), one, zero);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(out[i], ref[i], 1e-14);
}

TEST(EncoderBlock, InferenceIsBitDeterministic) {
  Rng rng(2);
  nn::EncoderBlock block({4, 2, 8, 0.1, true}, rng);
  Tensor x = random_tensor({5, 4}, rng);
  Tensor a = block.forward(x, {});
  Tensor b = block.forward(x, {});
  EXPECT_EQ(a.vec(), b.vec());
}

TEST(EncoderBlock, TrainingDropoutNeedsRng) {
  Rng rng(3);
  nn::EncoderBlock block({4, 2, 8, 0.1, false}, rng);
  Tensor x = random_tensor({2, 4}, rng);
  EXPECT_THROW(block.forward(x, {true, nullptr}), std::invalid_argument);
  Rng a(9), b(9);
  EXPECT_EQ(block.forward(x, {true, &a}).vec(), block.forward(x, {true, &b}).vec());
}

TEST(EncoderBlock, GradientMatchesFiniteDifferences) {
  Rng rng(4);
  nn::EncoderBlock block({4, 2, 6, 0.0, true}, rng);
  nn::Params params;
  block.collect(params, "b");
  for (auto& p : params) {
    if (p.name.find("bias") != std::string::npos || p.name.find("gain") != std::string::npos) {
      for (auto& v : p.tensor.mutable_values()) v += static_cast<Real>(rng.normal(0, 0.2));
    }
  }
  Tensor x = random_tensor({3, 4}, rng);
  Rng prng(5);
  Tensor probe = random_tensor({3, 4}, prng);
  std::vector<Tensor> tensors{x};
  for (auto& p : params) tensors.push_back(p.tensor);
  auto loss = [&] { return ad::sum(ad::mul(block.forward(x, {}), probe)); };
  auto r = grad_check(loss, tensors);
  EXPECT_LE(r.max_rel_error, 1e-5) << r.worst;
}

// ------------------------------------------------------------------- FiLM

TEST(Film, ZeroModulationIsIdentity) {
  Rng rng(1);
  Tensor x = random_tensor({2, 3, 4}, rng);
  Tensor y = ad::film(x, Tensor::zeros({2, 4}), Tensor::zeros({2, 4}));
  EXPECT_EQ(x.vec(), y.vec());
}

TEST(Film, MinusOneGammaLeavesBeta) {
  Rng rng(2);
  Tensor x = random_tensor({2, 3, 4}, rng);
  Tensor beta = random_tensor({2, 4}, rng);
  Tensor y = ad::film(x, Tensor::full({2, 4}, -1), beta);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t l = 0; l < 3; ++l)
      for (std::size_t h = 0; h < 4; ++h) EXPECT_EQ(y[(b * 3 + l) * 4 + h], beta[b * 4 + h]);
}

TEST(Film, MatchesElementwiseOracle) {
  Rng rng(3);
  Tensor x = random_tensor({2, 3, 4}, rng);
  Tensor g = random_tensor({2, 4}, rng), be = random_tensor({2, 4}, rng);
  Tensor y = ad::film(x, g, be);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t l = 0; l < 3; ++l)
      for (std::size_t h = 0; h < 4; ++h) {
        const std::size_t i = (b * 3 + l) * 4 + h;
        EXPECT_NEAR(y[i], x[i] * (1 + g[b * 4 + h]) + be[b * 4 + h], 1e-15);
      }
}

// ------------------------------------------------------ transposed conv

TEST(ConvTranspose, MatchesScatterOracle) {
  Rng rng(4);
  Tensor x = random_tensor({1, 3, 2}, rng), w = random_tensor({4, 2, 3}, rng), b = random_tensor({3}, rng);
  Tensor y = ad::conv_transpose1d(x, w, b, 2, 1);
  ASSERT_EQ(y.shape(), (Shape{1, 6, 3}));
  std::vector<double> ref(18);
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t o = 0; o < 3; ++o) ref[t * 3 + o] = b[o];
  for (std::size_t l = 0; l < 3; ++l)
    for (std::size_t k = 0; k < 4; ++k) {
      const long t = static_cast<long>(l * 2 + k) - 1;
      if (t < 0 || t >= 6) continue;
      for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t o = 0; o < 3; ++o)
          ref[static_cast<std::size_t>(t) * 3 + o] += x[l * 2 + c] * w[(k * 2 + c) * 3 + o];
    }
  for (std::size_t i = 0; i < 18; ++i) EXPECT_NEAR(y[i], ref[i], 1e-14);
}

// ------------------------------------------------------- straight-through

TEST(StraightThrough, ForwardIsQuantized) {
  Rng rng(1);
  Tensor z = random_tensor({2, 3}, rng), zq = random_tensor({2, 3}, rng);
  EXPECT_EQ(ad::straight_through(z, zq).vec(), zq.vec());
}

TEST(StraightThrough, GradientPassesToInputOnly) {
  ad::Tape::current().clear();
  Rng rng(2);
  Tensor z = random_tensor({2, 3}, rng), zq = random_tensor({2, 3}, rng);
  z.set_requires_grad(true);
  zq.set_requires_grad(true);
  ad::backward(ad::sum(ad::straight_through(z, zq)));
  for (Real g : z.grad()) EXPECT_EQ(g, 1.0);
  for (std::size_t i = 0; i < zq.numel(); ++i) EXPECT_EQ(zq.has_grad() ? zq.grad()[i] : 0.0, 0.0);
}

TEST(StraightThrough, CompositeCommitmentGradient) {
  // loss = head(st(z, zq)) + ||sg(z) - zq||^2 + lambda ||z - sg(zq)||^2
  // d loss / dz = head'(zq) + 2 lambda (z - zq).
  ad::Tape::current().clear();
  Rng rng(3);
  const double lambda = 0.25;
  Tensor z = random_tensor({2, 3}, rng), zq = random_tensor({2, 3}, rng);
  nn::Linear head(3, 1, true, rng);
  z.set_requires_grad(true);
  auto head_loss = [&](const Tensor& in) { return ad::sum(ad::square(ad::tanh(head.forward(in)))); };
  Tensor loss = ad::add(
      head_loss(ad::straight_through(z, zq)),
      ad::add(ad::sum(ad::square(ad::sub(z.detach(), zq))),
              ad::scale(ad::sum(ad::square(ad::sub(z, zq.detach()))), lambda)));
  ad::backward(loss);
  std::vector<double> analytic(z.grad().begin(), z.grad().end());

  ad::NoGradGuard guard;
  Tensor probe = zq.clone();
  auto values = probe.mutable_values();
  for (std::size_t i = 0; i < probe.numel(); ++i) {
    const Real saved = values[i];
    values[i] = saved + 1e-5;
    const double up = head_loss(probe).item();
    values[i] = saved - 1e-5;
    const double down = head_loss(probe).item();
    values[i] = saved;
    const double expected = (up - down) / 2e-5 + 2 * lambda * (z[i] - zq[i]);
    EXPECT_LE(prism::testing::relative_error(analytic[i], expected), 1e-5);
  }
}

// ------------------------------------------------------ reparameterization

TEST(Reparameterize, ZeroSigmaReturnsMu) {
  Rng rng(1);
  Tensor mu = random_tensor({5}, rng);
  Tensor out = nn::gaussian_reparameterize(mu, Tensor::zeros({5}), rng);
  EXPECT_EQ(out.vec(), mu.vec());
}

TEST(Reparameterize, MonteCarloMeanWithinFourStandardErrors) {
  Rng rng(2);
  Tensor mu = Tensor::from({2}, {0.3, -1.2});
  Tensor sigma = Tensor::from({2}, {0.5, 2.0});
  const int draws = 100000;
  double s0 = 0, s1 = 0;
  ad::NoGradGuard guard;
  for (int i = 0; i < draws; ++i) {
    Tensor o = nn::gaussian_reparameterize(mu, sigma, rng);
    s0 += o[0];
    s1 += o[1];
  }
  EXPECT_LE(std::abs(s0 / draws - 0.3), 4 * 0.5 / std::sqrt(draws));
  EXPECT_LE(std::abs(s1 / draws + 1.2), 4 * 2.0 / std::sqrt(draws));
}

TEST(Reparameterize, SeededDrawsReproduce) {
  Tensor mu = Tensor::from({3}, {0, 1, 2}), sigma = Tensor::full({3}, 1);
  Rng a(42), b(42);
  EXPECT_EQ(nn::gaussian_reparameterize(mu, sigma, a).vec(),
            nn::gaussian_reparameterize(mu, sigma, b).vec());
}

TEST(Reparameterize, GradientFlowsToMuAndSigma) {
  Rng rng(3);
  Tensor mu = random_tensor({4}, rng), sigma = random_tensor({4}, rng);
  auto loss = [&] {
    Rng draw(17);
    return ad::sum(ad::square(nn::gaussian_reparameterize(mu, sigma, draw)));
  };
  auto r = grad_check(loss, {mu, sigma});
  EXPECT_LE(r.max_rel_error, 1e-5) << r.worst;
}

TEST(Dropout, InvertedScalingAndIdentityInInference) {
  Rng rng(1);
  Tensor x = Tensor::full({10000}, 1);
  Tensor eval = ad::dropout(x, 0.3, rng, false);
  EXPECT_EQ(eval.vec(), x.vec());
  Tensor train = ad::dropout(x, 0.3, rng, true);
  double total = 0;
  for (Real v : train.values()) {
    EXPECT_TRUE(v == 0.0 || std::abs(v - 1.0 / 0.7) < 1e-12);
    total += v;
  }
  EXPECT_NEAR(total / 10000.0, 1.0, 0.05);
}

}  // namespace
