#include "prism/diffcore/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace prism::ad {

namespace {

using Impl = std::shared_ptr<TensorImpl>;
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

Tensor make(const Shape& shape, std::vector<Real> values, bool track) {
  Tensor out = Tensor::from(shape, std::move(values));
  out.set_requires_grad(track);
  return out;
}

std::vector<Real>& grad_of(const Impl& impl) {
  impl->ensure_grad();
  return impl->grad;
}

[[noreturn]] void fail(const char* op, const std::string& what) {
  throw std::invalid_argument(std::string(op) + ": " + what);
}

// The message is only built when the check fails.
#define PRISM_REQUIRE(cond, op, what) \
  do {                                \
    if (!(cond)) fail(op, what);      \
  } while (false)

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  PRISM_REQUIRE(a.shape() == b.shape(), op,
          "shape mismatch " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
}

std::size_t last_dim(const Tensor& x, const char* op) {
  PRISM_REQUIRE(x.dim() >= 1, op, "rank-0 tensor");
  return x.shape().back();
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto& xv = x.vec();
  std::vector<Real> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  const bool track = tracking({&x});
  Tensor result = make(x.shape(), std::move(out), track);
  if (track) {
    Impl xi = x.shared(), oi = result.shared();
    Tape::current().record(result, [xi, oi, deriv]() {
      auto& gx = grad_of(xi);
      for (std::size_t i = 0; i < gx.size(); ++i) {
        gx[i] += oi->grad[i] * deriv(xi->value[i], oi->value[i]);
      }
    });
  }
  return result;
}

Real normal_cdf(Real x) { return Real(0.5) * (Real(1) + std::erf(x / std::numbers::sqrt2_v<Real>)); }
Real normal_pdf(Real x) {
  return std::exp(Real(-0.5) * x * x) / std::sqrt(Real(2) * std::numbers::pi_v<Real>);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<Real> out(a.numel());
  const Real* av = a.vec().data();
  const Real* bv = b.vec().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const bool track = tracking({&a, &b});
  Tensor result = make(a.shape(), std::move(out), track);
  if (track) {
    Impl ai = a.shared(), bi = b.shared(), oi = result.shared();
    Tape::current().record(result, [ai, bi, oi]() {
      for (const Impl& in : {ai, bi}) {
        if (!in->requires_grad) continue;
        auto& g = grad_of(in);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
      }
    });
  }
  return result;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<Real> out(a.numel());
  const Real* av = a.vec().data();
  const Real* bv = b.vec().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  const bool track = tracking({&a, &b});
  Tensor result = make(a.shape(), std::move(out), track);
  if (track) {
    Impl ai = a.shared(), bi = b.shared(), oi = result.shared();
    Tape::current().record(result, [ai, bi, oi]() {
      if (ai->requires_grad) {
        auto& g = grad_of(ai);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
      }
      if (bi->requires_grad) {
        auto& g = grad_of(bi);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= oi->grad[i];
      }
    });
  }
  return result;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<Real> out(a.numel());
  const Real* av = a.vec().data();
  const Real* bv = b.vec().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const bool track = tracking({&a, &b});
  Tensor result = make(a.shape(), std::move(out), track);
  if (track) {
    Impl ai = a.shared(), bi = b.shared(), oi = result.shared();
    Tape::current().record(result, [ai, bi, oi]() {
      if (ai->requires_grad) {
        auto& g = grad_of(ai);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i] * bi->value[i];
      }
      if (bi->requires_grad) {
        auto& g = grad_of(bi);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i] * ai->value[i];
      }
    });
  }
  return result;
}

Tensor scale(const Tensor& x, Real c) {
  return unary(x, [c](Real v) { return c * v; }, [c](Real, Real) { return c; });
}

Tensor add_scalar(const Tensor& x, Real c) {
  return unary(x, [c](Real v) { return v + c; }, [](Real, Real) { return Real(1); });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t n = last_dim(x, "add_bias");
  PRISM_REQUIRE(bias.numel() == n, "add_bias", "bias size " + std::to_string(bias.numel()) +
                                             " vs last axis " + std::to_string(n));
  std::vector<Real> out(x.vec());
  const Real* bv = bias.vec().data();
  for (std::size_t r = 0; r < out.size(); r += n) {
    for (std::size_t j = 0; j < n; ++j) out[r + j] += bv[j];
  }
  const bool track = tracking({&x, &bias});
  Tensor result = make(x.shape(), std::move(out), track);
  if (track) {
    Impl xi = x.shared(), bi = bias.shared(), oi = result.shared();
    Tape::current().record(result, [xi, bi, oi, n]() {
      if (xi->requires_grad) {
        auto& g = grad_of(xi);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
      }
      if (bi->requires_grad) {
        auto& g = grad_of(bi);
        const std::vector<Real>& go = oi->grad;
        for (std::size_t r = 0; r < go.size(); r += n) {
          for (std::size_t j = 0; j < n; ++j) g[j] += go[r + j];
        }
      }
    });
  }
  return result;
}

Tensor mul_rows(const Tensor& x, const Tensor& w) {
  const std::size_t n = last_dim(x, "mul_rows");
  const std::size_t rows = x.numel() / n;
  PRISM_REQUIRE(w.numel() == rows, "mul_rows", "weight count " + std::to_string(w.numel()) +
                                             " vs rows " + std::to_string(rows));
  std::vector<Real> out(x.vec());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] *= w[r];
  }
  const bool track = tracking({&x, &w});
  Tensor result = make(x.shape(), std::move(out), track);
  if (track) {
    Impl xi = x.shared(), wi = w.shared(), oi = result.shared();
    Tape::current().record(result, [xi, wi, oi, n, rows]() {
      if (xi->requires_grad) {
        auto& g = grad_of(xi);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) g[r * n + j] += oi->grad[r * n + j] * wi->value[r];
      }
      if (wi->requires_grad) {
        auto& g = grad_of(wi);
        for (std::size_t r = 0; r < rows; ++r) {
          Real acc = 0;
          for (std::size_t j = 0; j < n; ++j) acc += oi->grad[r * n + j] * xi->value[r * n + j];
          g[r] += acc;
        }
      }
    });
  }
  return result;
}

Tensor broadcast_rows(const Tensor& v, std::size_t rows) {
  const std::size_t n = v.numel();
  std::vector<Real> out(rows * n);
  for (std::size_t r = 0; r < rows; ++r) std::copy(v.vec().begin(), v.vec().end(), out.begin() + r * n);
  const bool track = tracking({&v});
  Tensor result = make(Shape{rows, n}, std::move(out), track);
  if (track) {
    Impl vi = v.shared(), oi = result.shared();
    Tape::current().record(result, [vi, oi, n, rows]() {
      auto& g = grad_of(vi);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) g[j] += oi->grad[r * n + j];
    });
  }
  return result;
}

Tensor matmul(const Tensor& x, const Tensor& w) {
  const std::size_t k = last_dim(x, "matmul");
  PRISM_REQUIRE(w.dim() == 2 && w.size(0) == k, "matmul",
          "x " + shape_to_string(x.shape()) + " w " + shape_to_string(w.shape()));
  const std::size_t m = w.size(1);
  const std::size_t rows = x.numel() / k;
  Shape shape = x.shape();
  shape.back() = m;
  std::vector<Real> out(rows * m);
  MatMap(out.data(), rows, m).noalias() =
      ConstMatMap(x.vec().data(), rows, k) * ConstMatMap(w.vec().data(), k, m);
  const bool track = tracking({&x, &w});
  Tensor result = make(shape, std::move(out), track);
  if (track) {
    Impl xi = x.shared(), wi = w.shared(), oi = result.shared();
    Tape::current().record(result, [xi, wi, oi, rows, k, m]() {
      ConstMatMap go(oi->grad.data(), rows, m);
      if (xi->requires_grad) {
        MatMap(grad_of(xi).data(), rows, k).noalias() +=
            go * ConstMatMap(wi->value.data(), k, m).transpose();
      }
      if (wi->requires_grad) {
        MatMap(grad_of(wi).data(), k, m).noalias() +=
            ConstMatMap(xi->value.data(), rows, k).transpose() * go;
      }
    });
  }
  return result;
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  PRISM_REQUIRE(a.dim() == 3 && b.dim() == 3 && a.size(0) == b.size(0) && a.size(2) == b.size(1), "bmm",
          shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()));
  const std::size_t B = a.size(0), n = a.size(1), k = a.size(2), m = b.size(2);
  std::vector<Real> out(B * n * m);
  for (std::size_t s = 0; s < B; ++s) {
    MatMap(out.data() + s * n * m, n, m).noalias() =
        ConstMatMap(a.vec().data() + s * n * k, n, k) * ConstMatMap(b.vec().data() + s * k * m, k, m);
  }
  const bool track = tracking({&a, &b});
  Tensor result = make(Shape{B, n, m}, std::move(out), track);
  if (track) {
    Impl ai = a.shared(), bi = b.shared(), oi = result.shared();
    Tape::current().record(result, [ai, bi, oi, B, n, k, m]() {
      for (std::size_t s = 0; s < B; ++s) {
        ConstMatMap go(oi->grad.data() + s * n * m, n, m);
        if (ai->requires_grad) {
          MatMap(grad_of(ai).data() + s * n * k, n, k).noalias() +=
              go * ConstMatMap(bi->value.data() + s * k * m, k, m).transpose();
        }
        if (bi->requires_grad) {
          MatMap(grad_of(bi).data() + s * k * m, k, m).noalias() +=
              ConstMatMap(ai->value.data() + s * n * k, n, k).transpose() * go;
        }
      }
    });
  }
  return result;
}

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
  PRISM_REQUIRE(a.dim() == 3 && b.dim() == 3 && a.size(0) == b.size(0) && a.size(2) == b.size(2),
          "bmm_nt", shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()) + "^T");
  const std::size_t B = a.size(0), n = a.size(1), k = a.size(2), m = b.size(1);
  std::vector<Real> out(B * n * m);
  for (std::size_t s = 0; s < B; ++s) {
    MatMap(out.data() + s * n * m, n, m).noalias() =
        ConstMatMap(a.vec().data() + s * n * k, n, k) *
        ConstMatMap(b.vec().data() + s * m * k, m, k).transpose();
  }
  const bool track = tracking({&a, &b});
  Tensor result = make(Shape{B, n, m}, std::move(out), track);
  if (track) {
    Impl ai = a.shared(), bi = b.shared(), oi = result.shared();
    Tape::current().record(result, [ai, bi, oi, B, n, k, m]() {
      for (std::size_t s = 0; s < B; ++s) {
        ConstMatMap go(oi->grad.data() + s * n * m, n, m);
        if (ai->requires_grad) {
          MatMap(grad_of(ai).data() + s * n * k, n, k).noalias() +=
              go * ConstMatMap(bi->value.data() + s * m * k, m, k);
        }
        if (bi->requires_grad) {
          MatMap(grad_of(bi).data() + s * m * k, m, k).noalias() +=
              go.transpose() * ConstMatMap(ai->value.data() + s * n * k, n, k);
        }
      }
    });
  }
  return result;
}

Tensor gelu(const Tensor& x) {
  return unary(
      x, [](Real v) { return v * normal_cdf(v); },
      [](Real v, Real) { return normal_cdf(v) + v * normal_pdf(v); });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, [](Real v) { return std::tanh(v); }, [](Real, Real y) { return Real(1) - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, [](Real v) { return Real(1) / (Real(1) + std::exp(-v)); },
      [](Real, Real y) { return y * (Real(1) - y); });
}

Tensor softplus(const Tensor& x) {
  return unary(
      x,
      [](Real v) { return v > Real(30) ? v : std::log1p(std::exp(v)); },
      [](Real v, Real) { return Real(1) / (Real(1) + std::exp(-v)); });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      x, [](Real v) { return std::log(v); }, [](Real v, Real) { return Real(1) / v; });
}

Tensor square(const Tensor& x) {
  return unary(
      x, [](Real v) { return v * v; }, [](Real v, Real) { return Real(2) * v; });
}

Tensor sqrt(const Tensor& x) {
  return unary(
      x, [](Real v) { return std::sqrt(v); },
      [](Real, Real y) { return y > Real(0) ? Real(0.5) / y : Real(0); });
}

Tensor softmax(const Tensor& x) {
  return masked_softmax(x, {});
}

Tensor masked_softmax(const Tensor& x, const std::vector<std::uint8_t>& mask) {
  const std::size_t n = last_dim(x, "softmax");
  const std::size_t rows = x.numel() / n;
  PRISM_REQUIRE(mask.empty() || mask.size() == x.numel(), "masked_softmax", "mask size mismatch");
  auto keep = [&mask](std::size_t i) { return mask.empty() || mask[i] != 0; };
  std::vector<Real> out(x.numel(), Real(0));
  for (std::size_t r = 0; r < rows; ++r) {
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (keep(r * n + j)) mx = std::max(mx, x[r * n + j]);
    Real total = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!keep(r * n + j)) continue;
      out[r * n + j] = std::exp(x[r * n + j] - mx);
      total += out[r * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] /= total;
  }
  const bool track = tracking({&x});
  Tensor result = make(x.shape(), std::move(out), track);
  if (track) {
    Impl xi = x.shared(), oi = result.shared();
    Tape::current().record(result, [xi, oi, n, rows]() {
      auto& gx = grad_of(xi);
      for (std::size_t r = 0; r < rows; ++r) {
        Real dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += oi->grad[r * n + j] * oi->value[r * n + j];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t i = r * n + j;
          gx[i] += oi->value[i] * (oi->grad[i] - dot);
        }
      }
    });
  }
  return result;
}

Tensor log_softmax(const Tensor& x) {
  const std::size_t n = last_dim(x, "log_softmax");
  const std::size_t rows = x.numel() / n;
  std::vector<Real> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    Real mx = x[r * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[r * n + j]);
    Real total = 0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(x[r * n + j] - mx);
    const Real lse = mx + std::log(total);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[r * n + j] - lse;
  }
  const bool track = tracking({&x});
  Tensor result = make(x.shape(), std::move(out), track);
  if (track) {
    Impl xi = x.shared(), oi = result.shared();
    Tape::current().record(result, [xi, oi, n, rows]() {
      auto& gx = grad_of(xi);
      for (std::size_t r = 0; r < rows; ++r) {
        Real gsum = 0;
        for (std::size_t j = 0; j < n; ++j) gsum += oi->grad[r * n + j];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t i = r * n + j;
          gx[i] += oi->grad[i] - std::exp(oi->value[i]) * gsum;
        }
      }
    });
  }
  return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps) {
  const std::size_t n = last_dim(x, "layer_norm");
  PRISM_REQUIRE(gain.numel() == n && bias.numel() == n, "layer_norm", "affine size mismatch");
  const std::size_t rows = x.numel() / n;
  std::vector<Real> xhat(x.numel());
  std::vector<Real> inv_std(rows);
  std::vector<std::uint8_t> floored(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    Real mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += x[r * n + j];
    mu /= static_cast<Real>(n);
    Real var = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const Real d = x[r * n + j] - mu;
      var += d * d;
    }
    var /= static_cast<Real>(n);
    floored[r] = var < eps;
    inv_std[r] = Real(1) / std::sqrt(std::max(var, eps));
    for (std::size_t j = 0; j < n; ++j) xhat[r * n + j] = (x[r * n + j] - mu) * inv_std[r];
  }
  std::vector<Real> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xhat[i] * gain[i % n] + bias[i % n];
  const bool track = tracking({&x, &gain, &bias});
  Tensor result = make(x.shape(), std::move(out), track);
  if (track) {
    Impl xi = x.shared(), gi = gain.shared(), bi = bias.shared(), oi = result.shared();
    Tape::current().record(result, [xi, gi, bi, oi, n, rows, xhat = std::move(xhat),
                                     inv_std = std::move(inv_std), floored = std::move(floored)]() {
      const auto& go = oi->grad;
      if (gi->requires_grad) {
        auto& g = grad_of(gi);
        for (std::size_t i = 0; i < go.size(); ++i) g[i % n] += go[i] * xhat[i];
      }
      if (bi->requires_grad) {
        auto& g = grad_of(bi);
        for (std::size_t i = 0; i < go.size(); ++i) g[i % n] += go[i];
      }
      if (!xi->requires_grad) return;
      auto& gx = grad_of(xi);
      std::vector<Real> gxh(n);
      for (std::size_t r = 0; r < rows; ++r) {
        Real m1 = 0, m2 = 0;
        for (std::size_t j = 0; j < n; ++j) {
          gxh[j] = go[r * n + j] * gi->value[j];
          m1 += gxh[j];
          m2 += gxh[j] * xhat[r * n + j];
        }
        m1 /= static_cast<Real>(n);
        m2 /= static_cast<Real>(n);
        if (floored[r]) m2 = 0;  // denominator is the constant floor
        for (std::size_t j = 0; j < n; ++j) {
          gx[r * n + j] += inv_std[r] * (gxh[j] - m1 - xhat[r * n + j] * m2);
        }
      }
    });
  }
  return result;
}

Tensor sum(const Tensor& x) {
  Real total = 0;
  for (Real v : x.vec()) total += v;
  const bool track = tracking({&x});
  Tensor result = make(Shape{1}, {total}, track);
  if (track) {
    Impl xi = x.shared(), oi = result.shared();
    Tape::current().record(result, [xi, oi]() {
      auto& g = grad_of(xi);
      for (auto& v : g) v += oi->grad[0];
    });
  }
  return result;
}

Tensor mean(const Tensor& x) {
  PRISM_REQUIRE(x.numel() > 0, "mean", "empty tensor");
  return scale(sum(x), Real(1) / static_cast<Real>(x.numel()));
}

Tensor sum_last(const Tensor& x) {
  const std::size_t n = last_dim(x, "sum_last");
  const std::size_t rows = x.numel() / n;
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  if (shape.empty()) shape = {1};
  std::vector<Real> out(rows, Real(0));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r] += x[r * n + j];
  const bool track = tracking({&x});
  Tensor result = make(shape, std::move(out), track);
  if (track) {
    Impl xi = x.shared(), oi = result.shared();
    Tape::current().record(result, [xi, oi, n, rows]() {
      auto& g = grad_of(xi);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) g[r * n + j] += oi->grad[r];
    });
  }
  return result;
}

Tensor mean_rows(const Tensor& x) {
  const std::size_t n = last_dim(x, "mean_rows");
  const std::size_t rows = x.numel() / n;
  PRISM_REQUIRE(rows > 0, "mean_rows", "no rows");
  std::vector<Real> out(n, Real(0));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[j] += x[r * n + j];
  for (auto& v : out) v /= static_cast<Real>(rows);
  const bool track = tracking({&x});
  Tensor result = make(Shape{n}, std::move(out), track);
  if (track) {
    Impl xi = x.shared(), oi = result.shared();
    Tape::current().record(result, [xi, oi, n, rows]() {
      auto& g = grad_of(xi);
      const Real inv = Real(1) / static_cast<Real>(rows);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) g[r * n + j] += oi->grad[j] * inv;
    });
  }
  return result;
}

Tensor row_norm(const Tensor& x) {
  const std::size_t n = last_dim(x, "row_norm");
  const std::size_t rows = x.numel() / n;
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  if (shape.empty()) shape = {1};
  std::vector<Real> out(rows, Real(0));
  for (std::size_t r = 0; r < rows; ++r) {
    Real acc = 0;
    for (std::size_t j = 0; j < n; ++j) acc += x[r * n + j] * x[r * n + j];
    out[r] = std::sqrt(acc);
  }
  const bool track = tracking({&x});
  Tensor result = make(shape, std::move(out), track);
  if (track) {
    Impl xi = x.shared(), oi = result.shared();
    Tape::current().record(result, [xi, oi, n, rows]() {
      auto& g = grad_of(xi);
      for (std::size_t r = 0; r < rows; ++r) {
        if (oi->value[r] <= Real(0)) continue;
        const Real s = oi->grad[r] / oi->value[r];
        for (std::size_t j = 0; j < n; ++j) g[r * n + j] += s * xi->value[r * n + j];
      }
    });
  }
  return result;
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  PRISM_REQUIRE(shape_numel(shape) == x.numel(), "reshape",
          shape_to_string(x.shape()) + " -> " + shape_to_string(shape));
  const bool track = tracking({&x});
  Tensor result = make(shape, x.vec(), track);
  if (track) {
    Impl xi = x.shared(), oi = result.shared();
    Tape::current().record(result, [xi, oi]() {
      auto& g = grad_of(xi);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
    });
  }
  return result;
}

Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  PRISM_REQUIRE(axis < x.dim() && start + length <= x.size(axis), "narrow",
          "axis " + std::to_string(axis) + " range [" + std::to_string(start) + ", " +
              std::to_string(start + length) + ") of " + shape_to_string(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= x.size(d);
  for (std::size_t d = axis + 1; d < x.dim(); ++d) inner *= x.size(d);
  const std::size_t extent = x.size(axis);
  Shape shape = x.shape();
  shape[axis] = length;
  std::vector<Real> out(outer * length * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    const Real* src = x.vec().data() + (o * extent + start) * inner;
    std::copy(src, src + length * inner, out.begin() + o * length * inner);
  }
  const bool track = tracking({&x});
  Tensor result = make(shape, std::move(out), track);
  if (track) {
    Impl xi = x.shared(), oi = result.shared();
    Tape::current().record(result, [xi, oi, outer, inner, extent, start, length]() {
      auto& g = grad_of(xi);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < length * inner; ++i)
          g[(o * extent + start) * inner + i] += oi->grad[o * length * inner + i];
    });
  }
  return result;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  PRISM_REQUIRE(!parts.empty(), "concat", "no inputs");
  const Shape& ref = parts.front().shape();
  PRISM_REQUIRE(axis < ref.size(), "concat", "axis out of range");
  std::size_t outer = 1, inner = 1, total = 0;
  for (std::size_t d = 0; d < axis; ++d) outer *= ref[d];
  for (std::size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];
  std::vector<std::size_t> extents;
  bool track = false;
  for (const Tensor& p : parts) {
    Shape s = p.shape();
    PRISM_REQUIRE(s.size() == ref.size(), "concat", "rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis) PRISM_REQUIRE(s[d] == ref[d], "concat", "shape mismatch off-axis");
    }
    extents.push_back(s[axis]);
    total += s[axis];
    track = track || tracking({&p});
  }
  Shape shape = ref;
  shape[axis] = total;
  std::vector<Real> out(outer * total * inner);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const std::size_t len = extents[p] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      const Real* src = parts[p].vec().data() + o * len;
      std::copy(src, src + len, out.begin() + (o * total + offset) * inner);
    }
    offset += extents[p];
  }
  Tensor result = make(shape, std::move(out), track);
  if (track) {
    std::vector<Impl> impls;
    for (const Tensor& p : parts) impls.push_back(p.shared());
    Impl oi = result.shared();
    Tape::current().record(result, [impls, oi, extents, outer, inner, total]() {
      std::size_t off = 0;
      for (std::size_t p = 0; p < impls.size(); ++p) {
        const std::size_t len = extents[p] * inner;
        if (impls[p]->requires_grad) {
          auto& g = grad_of(impls[p]);
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < len; ++i) g[o * len + i] += oi->grad[(o * total + off) * inner + i];
        }
        off += extents[p];
      }
    });
  }
  return result;
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const std::size_t rank = x.dim();
  PRISM_REQUIRE(order.size() == rank, "permute", "order rank mismatch");
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t d = rank; d-- > 1;) in_stride[d - 1] = in_stride[d] * x.size(d);
  Shape shape(rank);
  std::vector<std::size_t> src_stride(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    shape[d] = x.size(order[d]);
    src_stride[d] = in_stride[order[d]];
  }
  // Map every output position to its source offset.
  std::vector<std::size_t> src(x.numel());
  std::vector<std::size_t> counter(rank, 0);
  for (std::size_t i = 0; i < src.size(); ++i) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < rank; ++d) off += counter[d] * src_stride[d];
    src[i] = off;
    for (std::size_t d = rank; d-- > 0;) {
      if (++counter[d] < shape[d]) break;
      counter[d] = 0;
    }
  }
  std::vector<Real> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[src[i]];
  const bool track = tracking({&x});
  Tensor result = make(shape, std::move(out), track);
  if (track) {
    Impl xi = x.shared(), oi = result.shared();
    Tape::current().record(result, [xi, oi, src = std::move(src)]() {
      auto& g = grad_of(xi);
      for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += oi->grad[i];
    });
  }
  return result;
}

Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& idx) {
  PRISM_REQUIRE(table.dim() == 2, "gather_rows", "table must be rank 2");
  const std::size_t K = table.size(0), d = table.size(1);
  std::vector<Real> out(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    PRISM_REQUIRE(idx[i] < K, "gather_rows", "index out of range");
    std::copy_n(table.vec().begin() + idx[i] * d, d, out.begin() + i * d);
  }
  const bool track = tracking({&table});
  Tensor result = make(Shape{idx.size(), d}, std::move(out), track);
  if (track) {
    Impl ti = table.shared(), oi = result.shared();
    Tape::current().record(result, [ti, oi, idx, d]() {
      auto& g = grad_of(ti);
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) g[idx[i] * d + j] += oi->grad[i * d + j];
    });
  }
  return result;
}

Tensor scatter_rows(const Tensor& x, const std::vector<std::size_t>& idx, std::size_t rows) {
  PRISM_REQUIRE(x.dim() == 2 && x.size(0) == idx.size(), "scatter_rows", "row count mismatch");
  const std::size_t d = x.size(1);
  std::vector<Real> out(rows * d, Real(0));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    PRISM_REQUIRE(idx[i] < rows, "scatter_rows", "index out of range");
    for (std::size_t j = 0; j < d; ++j) out[idx[i] * d + j] += x[i * d + j];
  }
  const bool track = tracking({&x});
  Tensor result = make(Shape{rows, d}, std::move(out), track);
  if (track) {
    Impl xi = x.shared(), oi = result.shared();
    Tape::current().record(result, [xi, oi, idx, d]() {
      auto& g = grad_of(xi);
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) g[i * d + j] += oi->grad[idx[i] * d + j];
    });
  }
  return result;
}

Tensor pick(const Tensor& x, const std::vector<std::size_t>& idx) {
  PRISM_REQUIRE(x.dim() == 2 && x.size(0) == idx.size(), "pick", "row count mismatch");
  const std::size_t K = x.size(1);
  std::vector<Real> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    PRISM_REQUIRE(idx[i] < K, "pick", "index out of range");
    out[i] = x[i * K + idx[i]];
  }
  const bool track = tracking({&x});
  Tensor result = make(Shape{idx.size()}, std::move(out), track);
  if (track) {
    Impl xi = x.shared(), oi = result.shared();
    Tape::current().record(result, [xi, oi, idx, K]() {
      auto& g = grad_of(xi);
      for (std::size_t i = 0; i < idx.size(); ++i) g[i * K + idx[i]] += oi->grad[i];
    });
  }
  return result;
}

Tensor pairwise_sqdist(const Tensor& a, const Tensor& b) {
  PRISM_REQUIRE(a.dim() == 2 && b.dim() == 2 && a.size(1) == b.size(1), "pairwise_sqdist",
          shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  const std::size_t N = a.size(0), K = b.size(0), d = a.size(1);
  std::vector<Real> out(N * K);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t k = 0; k < K; ++k) {
      Real acc = 0;
      for (std::size_t j = 0; j < d; ++j) {
        const Real diff = a[i * d + j] - b[k * d + j];
        acc += diff * diff;
      }
      out[i * K + k] = acc;
    }
  }
  const bool track = tracking({&a, &b});
  Tensor result = make(Shape{N, K}, std::move(out), track);
  if (track) {
    Impl ai = a.shared(), bi = b.shared(), oi = result.shared();
    Tape::current().record(result, [ai, bi, oi, N, K, d]() {
      std::vector<Real>* ga = ai->requires_grad ? &grad_of(ai) : nullptr;
      std::vector<Real>* gb = bi->requires_grad ? &grad_of(bi) : nullptr;
      for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t k = 0; k < K; ++k) {
          const Real g2 = Real(2) * oi->grad[i * K + k];
          if (g2 == Real(0)) continue;
          for (std::size_t j = 0; j < d; ++j) {
            const Real diff = ai->value[i * d + j] - bi->value[k * d + j];
            if (ga) (*ga)[i * d + j] += g2 * diff;
            if (gb) (*gb)[k * d + j] -= g2 * diff;
          }
        }
      }
    });
  }
  return result;
}

Tensor straight_through(const Tensor& z, const Tensor& quantized) {
  require_same_shape(z, quantized, "straight_through");
  const bool track = tracking({&z});
  Tensor result = make(quantized.shape(), quantized.vec(), track);
  if (track) {
    Impl zi = z.shared(), oi = result.shared();
    Tape::current().record(result, [zi, oi]() {
      auto& g = grad_of(zi);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
    });
  }
  return result;
}

Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
  if (!training || p <= 0.0) return x;
  PRISM_REQUIRE(p < 1.0, "dropout", "rate must be in [0, 1)");
  const Real keep_scale = Real(1) / static_cast<Real>(1.0 - p);
  std::vector<Real> mask(x.numel());
  for (auto& m : mask) m = rng.uniform() < p ? Real(0) : keep_scale;
  std::vector<Real> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * mask[i];
  const bool track = tracking({&x});
  Tensor result = make(x.shape(), std::move(out), track);
  if (track) {
    Impl xi = x.shared(), oi = result.shared();
    Tape::current().record(result, [xi, oi, mask = std::move(mask)]() {
      auto& g = grad_of(xi);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i] * mask[i];
    });
  }
  return result;
}

Tensor rope(const Tensor& x, std::size_t offset, Real base) {
  PRISM_REQUIRE(x.dim() >= 2, "rope", "need [..., L, dh]");
  const std::size_t dh = x.shape().back();
  const std::size_t L = x.shape()[x.dim() - 2];
  PRISM_REQUIRE(dh % 2 == 0, "rope", "per-head dimension must be even, got " + std::to_string(dh));
  const std::size_t groups = x.numel() / (L * dh);
  const std::size_t half = dh / 2;
  std::vector<Real> cosv(L * half), sinv(L * half);
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t j = 0; j < half; ++j) {
      const Real theta = std::pow(base, -Real(2) * static_cast<Real>(j) / static_cast<Real>(dh));
      const Real angle = static_cast<Real>(offset + l) * theta;
      cosv[l * half + j] = std::cos(angle);
      sinv[l * half + j] = std::sin(angle);
    }
  }
  std::vector<Real> out(x.numel());
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t l = 0; l < L; ++l) {
      const std::size_t row = (g * L + l) * dh;
      for (std::size_t j = 0; j < half; ++j) {
        const Real c = cosv[l * half + j], s = sinv[l * half + j];
        const Real a = x[row + 2 * j], b = x[row + 2 * j + 1];
        out[row + 2 * j] = a * c - b * s;
        out[row + 2 * j + 1] = a * s + b * c;
      }
    }
  }
  const bool track = tracking({&x});
  Tensor result = make(x.shape(), std::move(out), track);
  if (track) {
    Impl xi = x.shared(), oi = result.shared();
    Tape::current().record(result, [xi, oi, groups, L, dh, half, cosv = std::move(cosv),
                                     sinv = std::move(sinv)]() {
      auto& gx = grad_of(xi);
      for (std::size_t g = 0; g < groups; ++g) {
        for (std::size_t l = 0; l < L; ++l) {
          const std::size_t row = (g * L + l) * dh;
          for (std::size_t j = 0; j < half; ++j) {
            const Real c = cosv[l * half + j], s = sinv[l * half + j];
            const Real ga = oi->grad[row + 2 * j], gb = oi->grad[row + 2 * j + 1];
            gx[row + 2 * j] += ga * c + gb * s;
            gx[row + 2 * j + 1] += -ga * s + gb * c;
          }
        }
      }
    });
  }
  return result;
}

Tensor film(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  PRISM_REQUIRE(x.dim() == 3, "film", "x must be [B, L, H]");
  const std::size_t B = x.size(0), L = x.size(1), H = x.size(2);
  PRISM_REQUIRE(gamma.numel() == B * H && beta.numel() == B * H, "film",
          "gamma/beta must be [B, H] for x " + shape_to_string(x.shape()));
  std::vector<Real> out(x.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t i = (b * L + l) * H + h;
        out[i] = x[i] * (Real(1) + gamma[b * H + h]) + beta[b * H + h];
      }
  const bool track = tracking({&x, &gamma, &beta});
  Tensor result = make(x.shape(), std::move(out), track);
  if (track) {
    Impl xi = x.shared(), gi = gamma.shared(), bi = beta.shared(), oi = result.shared();
    Tape::current().record(result, [xi, gi, bi, oi, B, L, H]() {
      std::vector<Real>* gx = xi->requires_grad ? &grad_of(xi) : nullptr;
      std::vector<Real>* gg = gi->requires_grad ? &grad_of(gi) : nullptr;
      std::vector<Real>* gb = bi->requires_grad ? &grad_of(bi) : nullptr;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t l = 0; l < L; ++l)
          for (std::size_t h = 0; h < H; ++h) {
            const std::size_t i = (b * L + l) * H + h;
            const Real go = oi->grad[i];
            if (gx) (*gx)[i] += go * (Real(1) + gi->value[b * H + h]);
            if (gg) (*gg)[b * H + h] += go * xi->value[i];
            if (gb) (*gb)[b * H + h] += go;
          }
    });
  }
  return result;
}

Tensor conv_transpose1d(const Tensor& x, const Tensor& w, const Tensor& bias,
                        std::size_t stride, std::size_t padding) {
  PRISM_REQUIRE(x.dim() == 3 && w.dim() == 3 && w.size(1) == x.size(2), "conv_transpose1d",
          "x " + shape_to_string(x.shape()) + " w " + shape_to_string(w.shape()));
  const std::size_t B = x.size(0), L = x.size(1), Cin = x.size(2);
  const std::size_t k = w.size(0), Cout = w.size(2);
  PRISM_REQUIRE(bias.numel() == Cout, "conv_transpose1d", "bias size mismatch");
  const long long full = static_cast<long long>((L - 1) * stride + k);
  const long long Lout = full - 2 * static_cast<long long>(padding);
  PRISM_REQUIRE(Lout > 0, "conv_transpose1d", "non-positive output length");
  const std::size_t lout = static_cast<std::size_t>(Lout);
  std::vector<Real> out(B * lout * Cout);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < lout; ++p)
      for (std::size_t c = 0; c < Cout; ++c) out[(b * lout + p) * Cout + c] = bias[c];
  // contrib[kk] = X (B*L x Cin) @ W_kk (Cin x Cout), scattered to position l*stride+kk-padding.
  RowMat contrib(B * L, Cout);
  ConstMatMap X(x.vec().data(), B * L, Cin);
  for (std::size_t kk = 0; kk < k; ++kk) {
    contrib.noalias() = X * ConstMatMap(w.vec().data() + kk * Cin * Cout, Cin, Cout);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t l = 0; l < L; ++l) {
        const long long p = static_cast<long long>(l * stride + kk) - static_cast<long long>(padding);
        if (p < 0 || p >= Lout) continue;
        for (std::size_t c = 0; c < Cout; ++c)
          out[(b * lout + static_cast<std::size_t>(p)) * Cout + c] += contrib(b * L + l, c);
      }
  }
  const bool track = tracking({&x, &w, &bias});
  Tensor result = make(Shape{B, lout, Cout}, std::move(out), track);
  if (track) {
    Impl xi = x.shared(), wi = w.shared(), bi = bias.shared(), oi = result.shared();
    Tape::current().record(result, [xi, wi, bi, oi, B, L, Cin, Cout, k, lout, stride, padding]() {
      if (bi->requires_grad) {
        auto& g = grad_of(bi);
        for (std::size_t i = 0; i < oi->grad.size(); ++i) g[i % Cout] += oi->grad[i];
      }
      // Gather the output gradient aligned with each input position per tap.
      RowMat gslice(B * L, Cout);
      for (std::size_t kk = 0; kk < k; ++kk) {
        gslice.setZero();
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t l = 0; l < L; ++l) {
            const long long p =
                static_cast<long long>(l * stride + kk) - static_cast<long long>(padding);
            if (p < 0 || p >= static_cast<long long>(lout)) continue;
            for (std::size_t c = 0; c < Cout; ++c)
              gslice(b * L + l, c) = oi->grad[(b * lout + static_cast<std::size_t>(p)) * Cout + c];
          }
        if (xi->requires_grad) {
          MatMap(grad_of(xi).data(), B * L, Cin).noalias() +=
              gslice * ConstMatMap(wi->value.data() + kk * Cin * Cout, Cin, Cout).transpose();
        }
        if (wi->requires_grad) {
          MatMap(grad_of(wi).data() + kk * Cin * Cout, Cin, Cout).noalias() +=
              ConstMatMap(xi->value.data(), B * L, Cin).transpose() * gslice;
        }
      }
    });
  }
  return result;
}

}  // namespace prism::ad
