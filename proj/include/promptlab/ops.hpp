#pragma once

// Differentiable operations over Var. Each one computes its value with the
// plain kernels and records a closure producing input gradients.

#include <memory>

#include "promptlab/autograd.hpp"

namespace promptlab {

namespace detail {

template <std::floating_point T>
Tape<T>& same_tape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.tape() == nullptr || a.tape() != b.tape()) {
    throw ConfigError(std::string(op) + ": operands live on different tapes");
  }
  return *a.tape();
}

}  // namespace detail

template <std::floating_point T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  auto& tape = detail::same_tape(a, b, "add");
  kernels::require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const auto ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, [ia, ib](const Tensor<T>& g, GradSink<T>& s) {
    s.add(ia, g);
    s.add(ib, g);
  });
}

template <std::floating_point T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  auto& tape = detail::same_tape(a, b, "sub");
  kernels::require_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const auto ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, [ia, ib](const Tensor<T>& g, GradSink<T>& s) {
    s.add(ia, g);
    if (s.wants(ib)) {
      Tensor<T> n = g;
      for (auto& v : n.flat()) v = -v;
      s.add(ib, std::move(n));
    }
  });
}

// Elementwise product.
template <std::floating_point T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  auto& tape = detail::same_tape(a, b, "mul");
  kernels::require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const auto ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, [ia, ib](const Tensor<T>& g, GradSink<T>& s) {
    if (s.wants(ia)) {
      Tensor<T> ga = g;
      const auto& bv = s.value(ib);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= bv[i];
      s.add(ia, std::move(ga));
    }
    if (s.wants(ib)) {
      Tensor<T> gb = g;
      const auto& av = s.value(ia);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= av[i];
      s.add(ib, std::move(gb));
    }
  });
}

template <std::floating_point T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.flat()) v *= factor;
  const auto ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia, factor](const Tensor<T>& g, GradSink<T>& s) {
    Tensor<T> ga = g;
    for (auto& v : ga.flat()) v *= factor;
    s.add(ia, std::move(ga));
  });
}

/// x[N x D] + b broadcast over rows; b is [D] or [1 x D].
template <std::floating_point T>
Var<T> add_rowvec(const Var<T>& x, const Var<T>& b) {
  auto& tape = detail::same_tape(x, b, "add_rowvec");
  const std::size_t d = x.value().cols();
  if (b.value().size() != d) {
    throw ShapeError(detail::concat("add_rowvec: row vector ", shape_str(b.shape()),
                                    " does not match width of ", shape_str(x.shape())));
  }
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i % d];
  const auto ix = x.id(), ib = b.id();
  return tape.record(std::move(out), {x, b}, [ix, ib, d](const Tensor<T>& g, GradSink<T>& s) {
    s.add(ix, g);
    if (s.wants(ib)) {
      Tensor<T> gb(s.value(ib).shape());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
      s.add(ib, std::move(gb));
    }
  });
}

template <std::floating_point T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  auto& tape = detail::same_tape(a, b, "matmul");
  Tensor<T> out = kernels::matmul(a.value(), b.value());
  const auto ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, [ia, ib](const Tensor<T>& g, GradSink<T>& s) {
    if (s.wants(ia)) s.add(ia, kernels::matmul_nt(g, s.value(ib)));
    if (s.wants(ib)) s.add(ib, kernels::matmul_tn(s.value(ia), g));
  });
}

/// a * b^T.
template <std::floating_point T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  auto& tape = detail::same_tape(a, b, "matmul_nt");
  Tensor<T> out = kernels::matmul_nt(a.value(), b.value());
  const auto ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, [ia, ib](const Tensor<T>& g, GradSink<T>& s) {
    if (s.wants(ia)) s.add(ia, kernels::matmul(g, s.value(ib)));
    if (s.wants(ib)) s.add(ib, kernels::matmul_tn(g, s.value(ia)));
  });
}

template <std::floating_point T>
Var<T> transpose(const Var<T>& a) {
  const auto ia = a.id();
  return a.tape()->record(kernels::transpose(a.value()), {a},
                          [ia](const Tensor<T>& g, GradSink<T>& s) {
                            s.add(ia, kernels::transpose(g));
                          });
}

template <std::floating_point T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  const auto ia = a.id();
  Shape original = a.shape();
  return a.tape()->record(a.value().reshaped(std::move(shape)), {a},
                          [ia, original](const Tensor<T>& g, GradSink<T>& s) {
                            s.add(ia, g.reshaped(original));
                          });
}

/// Softmax over the last axis. `mask` is an additive {0, -inf} constant,
/// either one row (broadcast) or the full logits shape; may be null.
template <std::floating_point T>
Var<T> masked_softmax(const Var<T>& logits, const Tensor<T>* mask = nullptr) {
  Tensor<T> y = kernels::masked_softmax(logits.value(), mask);
  const auto il = logits.id();
  auto& tape = *logits.tape();
  if (!logits.requires_grad()) return tape.constant(std::move(y));
  const std::size_t self = tape.size();
  return tape.record(std::move(y), {logits}, [il, self](const Tensor<T>& g, GradSink<T>& s) {
    const Tensor<T>& y = s.value(self);
    const std::size_t n = y.shape().back();
    Tensor<T> gx(y.shape());
    for (std::size_t r = 0; r < y.size() / n; ++r) {
      T dot{0};
      for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j)
        gx[r * n + j] = y[r * n + j] * (g[r * n + j] - dot);
    }
    s.add(il, std::move(gx));
  });
}

template <std::floating_point T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  auto& tape = detail::same_tape(x, gamma, "layer_norm");
  detail::same_tape(x, beta, "layer_norm");
  const std::size_t d = x.shape().back();
  if (gamma.value().size() != d || beta.value().size() != d) {
    throw ShapeError(detail::concat("layer_norm: affine ", shape_str(gamma.shape()), "/",
                                    shape_str(beta.shape()), " does not match width ", d));
  }
  auto st = std::make_shared<kernels::LayerNormStats<T>>(kernels::layer_norm_stats(x.value(), eps));
  Tensor<T> y = st->normalized;
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = y[i] * gv[i % d] + bv[i % d];
  const auto ix = x.id(), ig = gamma.id(), ib = beta.id();
  return tape.record(std::move(y), {x, gamma, beta},
                     [ix, ig, ib, st, d](const Tensor<T>& g, GradSink<T>& s) {
    const Tensor<T>& xhat = st->normalized;
    const std::size_t rows = g.size() / d;
    if (s.wants(ig) || s.wants(ib)) {
      Tensor<T> gg(s.value(ig).shape()), gb(s.value(ib).shape());
      for (std::size_t i = 0; i < g.size(); ++i) {
        gg[i % d] += g[i] * xhat[i];
        gb[i % d] += g[i];
      }
      s.add(ig, std::move(gg));
      s.add(ib, std::move(gb));
    }
    if (s.wants(ix)) {
      const auto& gamma_v = s.value(ig);
      Tensor<T> gx(xhat.shape());
      const T inv_d = T{1} / static_cast<T>(d);
      for (std::size_t r = 0; r < rows; ++r) {
        T sum_dy{0}, sum_dy_xhat{0};
        for (std::size_t j = 0; j < d; ++j) {
          const T dy = g[r * d + j] * gamma_v[j];
          sum_dy += dy;
          sum_dy_xhat += dy * xhat[r * d + j];
        }
        for (std::size_t j = 0; j < d; ++j) {
          const T dy = g[r * d + j] * gamma_v[j];
          gx[r * d + j] = st->inv_std[r] * inv_d *
                          (static_cast<T>(d) * dy - sum_dy - xhat[r * d + j] * sum_dy_xhat);
        }
      }
      s.add(ix, std::move(gx));
    }
  });
}

template <std::floating_point T>
Var<T> gelu(const Var<T>& x) {
  Tensor<T> y = x.value();
  for (auto& v : y.flat()) v = kernels::gelu(v);
  const auto ix = x.id();
  return x.tape()->record(std::move(y), {x}, [ix](const Tensor<T>& g, GradSink<T>& s) {
    const auto& xv = s.value(ix);
    Tensor<T> gx = g;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= kernels::gelu_grad(xv[i]);
    s.add(ix, std::move(gx));
  });
}

/// Rows [begin, end) of a matrix.
template <std::floating_point T>
Var<T> slice_rows(const Var<T>& x, std::size_t begin, std::size_t end) {
  const auto& xv = x.value();
  kernels::require_matrix(xv, "slice_rows");
  if (begin >= end || end > xv.rows()) {
    throw ShapeError(detail::concat("slice_rows: [", begin, ", ", end, ") out of ",
                                    shape_str(xv.shape())));
  }
  const std::size_t d = xv.cols();
  std::vector<T> data(xv.flat().begin() + begin * d, xv.flat().begin() + end * d);
  const auto ix = x.id();
  Shape full = xv.shape();
  return x.tape()->record(Tensor<T>({end - begin, d}, std::move(data)), {x},
                          [ix, begin, d, full](const Tensor<T>& g, GradSink<T>& s) {
                            Tensor<T> gx(full);
                            std::copy(g.flat().begin(), g.flat().end(),
                                      gx.flat().begin() + begin * d);
                            s.add(ix, std::move(gx));
                          });
}

/// Columns [begin, end) of a matrix.
template <std::floating_point T>
Var<T> slice_cols(const Var<T>& x, std::size_t begin, std::size_t end) {
  const auto& xv = x.value();
  kernels::require_matrix(xv, "slice_cols");
  if (begin >= end || end > xv.cols()) {
    throw ShapeError(detail::concat("slice_cols: [", begin, ", ", end, ") out of ",
                                    shape_str(xv.shape())));
  }
  const std::size_t n = xv.rows(), w = end - begin;
  Tensor<T> out({n, w});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) out(i, j) = xv(i, begin + j);
  const auto ix = x.id();
  Shape full = xv.shape();
  return x.tape()->record(std::move(out), {x},
                          [ix, begin, w, full](const Tensor<T>& g, GradSink<T>& s) {
                            Tensor<T> gx(full);
                            for (std::size_t i = 0; i < g.rows(); ++i)
                              for (std::size_t j = 0; j < w; ++j) gx(i, begin + j) = g(i, j);
                            s.add(ix, std::move(gx));
                          });
}

template <std::floating_point T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t d = parts[0].value().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    kernels::require_matrix(p.value(), "concat_rows");
    if (p.value().cols() != d) {
      throw ShapeError(detail::concat("concat_rows: width ", p.value().cols(),
                                      " differs from ", d));
    }
    detail::same_tape(parts[0], p, "concat_rows");
    total += p.value().rows();
  }
  std::vector<T> data;
  data.reserve(total * d);
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // (id, rows)
  for (const auto& p : parts) {
    data.insert(data.end(), p.value().flat().begin(), p.value().flat().end());
    spans.emplace_back(p.id(), p.value().rows());
  }
  return parts[0].tape()->record(Tensor<T>({total, d}, std::move(data)), parts,
                                 [spans, d](const Tensor<T>& g, GradSink<T>& s) {
    std::size_t off = 0;
    for (auto [id, rows] : spans) {
      if (s.wants(id)) {
        std::vector<T> part(g.flat().begin() + off * d, g.flat().begin() + (off + rows) * d);
        s.add(id, Tensor<T>({rows, d}, std::move(part)));
      }
      off += rows;
    }
  });
}

template <std::floating_point T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t n = parts[0].value().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    kernels::require_matrix(p.value(), "concat_cols");
    if (p.value().rows() != n) {
      throw ShapeError(detail::concat("concat_cols: rows ", p.value().rows(),
                                      " differ from ", n));
    }
    detail::same_tape(parts[0], p, "concat_cols");
    total += p.value().cols();
  }
  Tensor<T> out({n, total});
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // (id, cols)
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < v.cols(); ++j) out(i, off + j) = v(i, j);
    spans.emplace_back(p.id(), v.cols());
    off += v.cols();
  }
  return parts[0].tape()->record(std::move(out), parts,
                                 [spans, n](const Tensor<T>& g, GradSink<T>& s) {
    std::size_t o = 0;
    for (auto [id, w] : spans) {
      if (s.wants(id)) {
        Tensor<T> part({n, w});
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < w; ++j) part(i, j) = g(i, o + j);
        s.add(id, std::move(part));
      }
      o += w;
    }
  });
}

/// Embedding lookup: out[i] = table[ids[i]].
template <std::floating_point T>
Var<T> gather_rows(const Var<T>& table, const std::vector<std::size_t>& ids) {
  const auto& tv = table.value();
  kernels::require_matrix(tv, "gather_rows");
  if (ids.empty()) throw ShapeError("gather_rows: empty id list");
  const std::size_t d = tv.cols();
  Tensor<T> out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= tv.rows()) {
      throw ConfigError(detail::concat("gather_rows: id ", ids[i], " outside table of ",
                                       tv.rows(), " rows"));
    }
    std::copy(tv.row(ids[i]).begin(), tv.row(ids[i]).end(), out.row(i).begin());
  }
  const auto it = table.id();
  Shape full = tv.shape();
  return table.tape()->record(std::move(out), {table},
                              [it, ids, d, full](const Tensor<T>& g, GradSink<T>& s) {
    Tensor<T> gt(full);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) gt(ids[i], j) += g(i, j);
    s.add(it, std::move(gt));
  });
}

/// Each row divided by its Euclidean norm.
template <std::floating_point T>
Var<T> l2_normalize_rows(const Var<T>& x) {
  const auto& xv = x.value();
  const std::size_t d = xv.cols(), n = xv.rows();
  auto norms = std::make_shared<std::vector<T>>(n);
  Tensor<T> y = xv;
  for (std::size_t r = 0; r < n; ++r) {
    const T nr = kernels::l2_norm<T>(xv.row(r));
    if (nr == T{0} || !std::isfinite(nr)) {
      throw NumericError(detail::concat("l2_normalize_rows: row ", r,
                                        " has zero or non-finite norm"));
    }
    (*norms)[r] = nr;
    for (auto& v : y.row(r)) v /= nr;
  }
  const auto ix = x.id();
  const std::size_t self = x.tape()->size();
  return x.tape()->record(std::move(y), {x}, [ix, self, norms, d, n](const Tensor<T>& g, GradSink<T>& s) {
    const Tensor<T>& yv = s.value(self);
    Tensor<T> gx(yv.shape());
    for (std::size_t r = 0; r < n; ++r) {
      T dot{0};
      for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * yv[r * d + j];
      for (std::size_t j = 0; j < d; ++j)
        gx[r * d + j] = (g[r * d + j] - yv[r * d + j] * dot) / (*norms)[r];
    }
    s.add(ix, std::move(gx));
  });
}

/// Mean over rows of -log softmax(logits)[label].
template <std::floating_point T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<std::size_t>& labels) {
  const auto& lv = logits.value();
  kernels::require_matrix(lv, "cross_entropy");
  const std::size_t b = lv.rows(), c = lv.cols();
  if (labels.size() != b) {
    throw ShapeError(detail::concat("cross_entropy: ", labels.size(), " labels for ", b,
                                    " rows"));
  }
  for (auto y : labels) {
    if (y >= c) {
      throw ConfigError(detail::concat("cross_entropy: label ", y, " out of range for ",
                                       c, " classes"));
    }
  }
  auto probs = std::make_shared<Tensor<T>>(kernels::masked_softmax(lv));
  T loss{0};
  for (std::size_t r = 0; r < b; ++r) {
    // log-sum-exp form keeps the value exact when the label mass underflows.
    T mx = lv(r, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, lv(r, j));
    T se{0};
    for (std::size_t j = 0; j < c; ++j) se += std::exp(lv(r, j) - mx);
    loss += mx + std::log(se) - lv(r, labels[r]);
  }
  loss /= static_cast<T>(b);
  const auto il = logits.id();
  return logits.tape()->record(Tensor<T>::scalar(loss), {logits},
                               [il, probs, labels, b, c](const Tensor<T>& g, GradSink<T>& s) {
    Tensor<T> gl = *probs;
    for (std::size_t r = 0; r < b; ++r) gl(r, labels[r]) -= T{1};
    const T k = g.item() / static_cast<T>(b);
    for (auto& v : gl.flat()) v *= k;
    s.add(il, std::move(gl));
  });
}

template <std::floating_point T>
Var<T> sum(const Var<T>& x) {
  T total{0};
  for (T v : x.value().flat()) total += v;
  const auto ix = x.id();
  Shape sh = x.shape();
  return x.tape()->record(Tensor<T>::scalar(total), {x},
                          [ix, sh](const Tensor<T>& g, GradSink<T>& s) {
                            s.add(ix, Tensor<T>(sh, g.item()));
                          });
}

template <std::floating_point T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.value().size()));
}

}  // namespace promptlab
