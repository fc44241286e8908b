#pragma once

#include <cstdint>
#include <vector>

#include "prism/common/rng.hpp"
#include "prism/diffcore/tensor.hpp"

// Differentiable primitives. Every function records a backward closure on the
// current thread's tape when grad mode is on and any input requires grad.
// "Last axis" ops treat a tensor of shape [..., n] as a stack of rows of n.
namespace prism::ad {

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, Real c);
Tensor add_scalar(const Tensor& x, Real c);

// x[..., n] + bias[n].
Tensor add_bias(const Tensor& x, const Tensor& bias);
// Scales each last-axis row of x by the matching entry of w (numel = rows).
Tensor mul_rows(const Tensor& x, const Tensor& w);
// v[n] -> [rows, n].
Tensor broadcast_rows(const Tensor& v, std::size_t rows);

// x[..., k] @ w[k, m] -> [..., m].
Tensor matmul(const Tensor& x, const Tensor& w);
// Batched: a[B, n, k] @ b[B, k, m] -> [B, n, m].
Tensor bmm(const Tensor& a, const Tensor& b);
// Batched with transposed right operand: a[B, n, k] @ b[B, m, k]^T -> [B, n, m].
Tensor bmm_nt(const Tensor& a, const Tensor& b);

Tensor gelu(const Tensor& x);  // x * Phi(x), exact erf form
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor square(const Tensor& x);
// sqrt with zero gradient at 0.
Tensor sqrt(const Tensor& x);

Tensor softmax(const Tensor& x);      // last axis
Tensor log_softmax(const Tensor& x);  // last axis
// Softmax restricted to entries with mask != 0 (last axis); zeros elsewhere.
Tensor masked_softmax(const Tensor& x, const std::vector<std::uint8_t>& mask);

inline constexpr Real kLayerNormEps = Real(1e-5);
// (x - mean) / sqrt(max(var, eps)) * gain + bias over the last axis.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  Real eps = kLayerNormEps);

Tensor sum(const Tensor& x);   // -> [1]
Tensor mean(const Tensor& x);  // -> [1]
Tensor sum_last(const Tensor& x);  // [..., n] -> [...]
// Mean over all leading axes: [..., n] -> [n].
Tensor mean_rows(const Tensor& x);
// Euclidean norm of every last-axis row: [..., n] -> [...].
Tensor row_norm(const Tensor& x);

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);

// table[K, d] rows at idx -> [idx.size(), d].
Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& idx);
// Inverse of gather_rows: places x[n, d] rows at idx of a [rows, d] zero tensor
// (duplicates add).
Tensor scatter_rows(const Tensor& x, const std::vector<std::size_t>& idx, std::size_t rows);
// x[N, K], picks x[i, idx[i]] -> [N].
Tensor pick(const Tensor& x, const std::vector<std::size_t>& idx);

// a[N, d], b[K, d] -> squared Euclidean distances [N, K].
Tensor pairwise_sqdist(const Tensor& a, const Tensor& b);

// Forward value of quantized; gradient passes to z unchanged, none to quantized.
Tensor straight_through(const Tensor& z, const Tensor& quantized);

// Inverted dropout; identity when !training or p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng, bool training);

// Rotates consecutive pairs of the last axis of x[..., L, dh] by position
// offset + l for row l, theta_j = base^(-2j/dh), j = 0 .. dh/2 - 1.
Tensor rope(const Tensor& x, std::size_t offset = 0, Real base = Real(10000));

// Residual feature-wise modulation x * (1 + gamma) + beta.
// x[B, L, H], gamma/beta [B, H].
Tensor film(const Tensor& x, const Tensor& gamma, const Tensor& beta);

// 1-D transposed convolution over x[B, L, Cin] with w[k, Cin, Cout], bias[Cout].
// Output length (L - 1) * stride - 2 * padding + k.
Tensor conv_transpose1d(const Tensor& x, const Tensor& w, const Tensor& bias,
                        std::size_t stride, std::size_t padding);

}  // namespace prism::ad
