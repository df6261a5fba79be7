#pragma once

// Plain tensor kernels. Everything here is pure: inputs are never modified.
// The differentiable wrappers in autograd.hpp build on these.

#include <cmath>
#include <limits>
#include <numbers>
#include <optional>

#include "promptlab/tensor.hpp"

namespace promptlab::kernels {

template <std::floating_point T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(detail::concat(op, ": shape mismatch ", shape_str(a.shape()),
                                    " vs ", shape_str(b.shape())));
  }
}

template <std::floating_point T>
void require_matrix(const Tensor<T>& a, const char* op) {
  if (a.rank() != 2) {
    throw ShapeError(detail::concat(op, ": expected a matrix, got ",
                                    shape_str(a.shape())));
  }
}

template <std::floating_point T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  if (b.extent(0) != k) {
    throw ShapeError(detail::concat("matmul: inner extents differ, ",
                                    shape_str(a.shape()), " x ",
                                    shape_str(b.shape())));
  }
  Tensor<T> c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = &c(i, 0);
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a(i, p);
      const T* brow = &b(p, 0);
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return c;
}

// a * b^T without materializing the transpose.
template <std::floating_point T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(0);
  if (b.extent(1) != k) {
    throw ShapeError(detail::concat("matmul_nt: inner extents differ, ",
                                    shape_str(a.shape()), " x ",
                                    shape_str(b.shape()), "^T"));
  }
  Tensor<T> c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = &a(i, 0);
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = &b(j, 0);
      T s{0};
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c(i, j) = s;
    }
  }
  return c;
}

// a^T * b.
template <std::floating_point T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  const std::size_t k = a.extent(0), m = a.extent(1), n = b.extent(1);
  if (b.extent(0) != k) {
    throw ShapeError(detail::concat("matmul_tn: inner extents differ, ",
                                    shape_str(a.shape()), "^T x ",
                                    shape_str(b.shape())));
  }
  Tensor<T> c({m, n});
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = &a(p, 0);
    const T* brow = &b(p, 0);
    for (std::size_t i = 0; i < m; ++i) {
      const T api = arow[i];
      T* crow = &c(i, 0);
      for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
    }
  }
  return c;
}

template <std::floating_point T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_matrix(a, "transpose");
  Tensor<T> t({a.extent(1), a.extent(0)});
  for (std::size_t i = 0; i < a.extent(0); ++i)
    for (std::size_t j = 0; j < a.extent(1); ++j) t(j, i) = a(i, j);
  return t;
}

/// Row-wise softmax over the last axis with an optional additive mask of
/// {0, -inf}. Masked positions come out exactly 0.
template <std::floating_point T>
Tensor<T> masked_softmax(const Tensor<T>& logits, const Tensor<T>* mask = nullptr) {
  if (logits.rank() == 0) throw ShapeError("masked_softmax: scalar input");
  const std::size_t n = logits.shape().back();
  const std::size_t rows = logits.size() / n;
  if (mask) {
    if (mask->shape().back() != n || (mask->size() != n && mask->size() != logits.size())) {
      throw ShapeError("masked_softmax: mask " + shape_str(mask->shape()) +
                       " not broadcastable to " + shape_str(logits.shape()));
    }
  }
  Tensor<T> out(logits.shape());
  std::vector<T> z(n);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* lr = logits.flat().data() + r * n;
    const T* mr = mask ? mask->flat().data() + (mask->size() == n ? 0 : r * n) : nullptr;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      z[j] = mr ? lr[j] + mr[j] : lr[j];
      mx = std::max(mx, z[j]);
    }
    if (!std::isfinite(mx)) {
      throw NumericError(detail::concat("masked_softmax: row ", r,
                                        " is fully masked or non-finite"));
    }
    T sum{0};
    T* orow = out.flat().data() + r * n;
    for (std::size_t j = 0; j < n; ++j) {
      orow[j] = std::exp(z[j] - mx);
      sum += orow[j];
    }
    for (std::size_t j = 0; j < n; ++j) orow[j] /= sum;
  }
  return out;
}

/// Per-row normalization statistics kept for the backward pass.
template <std::floating_point T>
struct LayerNormStats {
  Tensor<T> normalized;         // (x - mean) * inv_std
  std::vector<T> inv_std;       // one per row
};

template <std::floating_point T>
LayerNormStats<T> layer_norm_stats(const Tensor<T>& x, T eps) {
  if (eps <= T{0}) throw ConfigError("layer_norm: eps must be > 0");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  LayerNormStats<T> st{Tensor<T>(x.shape()), std::vector<T>(rows)};
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.flat().data() + r * d;
    T mean{0};
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<T>(d);
    T var{0};
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<T>(d);
    const T inv = T{1} / std::sqrt(var + eps);
    st.inv_std[r] = inv;
    T* nr = st.normalized.flat().data() + r * d;
    for (std::size_t j = 0; j < d; ++j) nr[j] = (xr[j] - mean) * inv;
  }
  return st;
}

template <std::floating_point T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps) {
  const std::size_t d = x.shape().back();
  if (gamma.size() != d || beta.size() != d) {
    throw ShapeError(detail::concat("layer_norm: affine width ", gamma.size(), "/",
                                    beta.size(), " does not match ", d));
  }
  auto st = layer_norm_stats(x, eps);
  Tensor<T> y = std::move(st.normalized);
  for (std::size_t i = 0; i < y.size(); ++i) {
    const std::size_t j = i % d;
    y[i] = y[i] * gamma[j] + beta[j];
  }
  return y;
}

// Exact (erf-based) GELU.
template <std::floating_point T>
T gelu(T x) {
  return T{0.5} * x * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <std::floating_point T>
T gelu_grad(T x) {
  const T cdf = T{0.5} * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T{-0.5} * x * x) / std::sqrt(T{2} * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

template <std::floating_point T>
Tensor<T> causal_mask(std::size_t n) {
  Tensor<T> m({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) m(i, j) = -std::numeric_limits<T>::infinity();
  return m;
}

template <std::floating_point T>
T l2_norm(std::span<const T> v) {
  T s{0};
  for (T x : v) s += x * x;
  return std::sqrt(s);
}

template <std::floating_point T>
T cosine(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) {
    throw ShapeError(detail::concat("cosine: widths ", a.size(), " vs ", b.size()));
  }
  const T na = l2_norm(a), nb = l2_norm(b);
  if (na == T{0} || nb == T{0}) {
    throw NumericError("cosine similarity undefined for a zero-norm vector");
  }
  T dot{0};
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  return dot / (na * nb);
}

}  // namespace promptlab::kernels
