// Copyright (c) 2026 The grainmoe Authors.
// SPDX-License-Identifier: Apache-2.0

// Differentiable tensor operations. Every op checks shapes eagerly and
// records a backward closure through make_result(). Broadcasting is limited
// to the explicit row-wise forms (scale_rows, layer_norm gains).

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "grainmoe/autodiff.hpp"
#include "grainmoe/tensor.hpp"

namespace grainmoe {

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

inline void require_matrix(const Shape& s, const char* op) {
  if (s.size() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(s));
}

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T{0}) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
             std::size_t n) {
  std::vector<T> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(a, bt.data(), c, m, k, n);
}

// C[k,n] += A[m,k]^T * B[m,n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T{0}) continue;
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                     shape_str(s));
  }
  AxisSplit out{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) out.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) out.inner *= s[i];
  return out;
}

template <typename T>
T sigmoid(T x) {
  return T{1} / (T{1} + std::exp(-x));
}

// Uniform in [0,1) from the top 53 bits; identical on every platform.
inline double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto* g = self.input_grad(k)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (auto* g = self.input_grad(0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = self.input_grad(1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.input_value(0);
    const auto& bv = self.input_value(1);
    if (auto* g = self.input_grad(0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    }
    if (auto* g = self.input_grad(1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.vec()) v *= factor;
  return make_result<T>(std::move(out), {a}, [factor](Node<T>& self) {
    if (auto* g = self.input_grad(0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * factor;
    }
  });
}

/// x * sigmoid(x)
template <typename T>
Var<T> silu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.vec()) v = v * detail::sigmoid(v);
  return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
    if (auto* g = self.input_grad(0)) {
      const auto& xv = self.input_value(0);
      for (std::size_t i = 0; i < g->size(); ++i) {
        const T s = detail::sigmoid(xv[i]);
        (*g)[i] += self.grad[i] * (s * (T{1} + xv[i] * (T{1} - s)));
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
    if (auto* g = self.input_grad(0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> transpose(const Var<T>& x) {
  detail::require_matrix(x.shape(), "transpose");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  Tensor<T> out(Shape{n, m});
  const auto& xv = x.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = xv.at(i, j);
  return make_result<T>(std::move(out), {x}, [m, n](Node<T>& self) {
    if (auto* g = self.input_grad(0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g->at(i, j) += self.grad.at(j, i);
    }
  });
}

/// Rows of `table` selected by `ids` (embedding lookup, expert gather).
template <typename T>
Var<T> gather_rows(const Var<T>& table, std::vector<std::size_t> ids) {
  detail::require_matrix(table.shape(), "gather_rows");
  if (ids.empty()) throw ShapeError("gather_rows: empty index list");
  const std::size_t rows = table.shape()[0], d = table.shape()[1];
  Tensor<T> out(Shape{ids.size(), d});
  const auto& tv = table.value();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (!(ids[r] < rows)) {
      throw ShapeError("gather_rows: index " + std::to_string(ids[r]) + " out of range " +
                       std::to_string(rows));
    }
    std::copy_n(tv.data().begin() + ids[r] * d, d, out.data().begin() + r * d);
  }
  return make_result<T>(std::move(out), {table},
                        [ids = std::move(ids), d](Node<T>& self) {
                          if (auto* g = self.input_grad(0)) {
                            for (std::size_t r = 0; r < ids.size(); ++r) {
                              T* dst = g->data().data() + ids[r] * d;
                              const T* src = self.grad.data().data() + r * d;
                              for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                            }
                          }
                        });
}

/// out[ids[s][r], :] += sources[s][r, :] for every source s. The sum order is
/// fixed by the order of `sources`.
template <typename T>
Var<T> index_add_rows(std::size_t n_rows, std::size_t d,
                      const std::vector<Var<T>>& sources,
                      std::vector<std::vector<std::size_t>> ids) {
  if (!(sources.size() == ids.size())) throw ShapeError("index_add_rows: sources/ids mismatch");
  Tensor<T> out(Shape{n_rows, d});
  for (std::size_t s = 0; s < sources.size(); ++s) {
    const auto& sv = sources[s].value();
    if (!(sv.rank() == 2 && sv.shape()[1] == d && sv.shape()[0] == ids[s].size())) {
      throw ShapeError("index_add_rows: source " + std::to_string(s) + " has shape " +
                       shape_str(sv.shape()));
    }
    for (std::size_t r = 0; r < ids[s].size(); ++r) {
      if (!(ids[s][r] < n_rows)) throw ShapeError("index_add_rows: row index out of range");
      T* dst = out.data().data() + ids[s][r] * d;
      const T* src = sv.data().data() + r * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  }
  return make_result<T>(std::move(out), sources,
                        [ids = std::move(ids), d](Node<T>& self) {
                          for (std::size_t s = 0; s < ids.size(); ++s) {
                            auto* g = self.input_grad(s);
                            if (!g) continue;
                            for (std::size_t r = 0; r < ids[s].size(); ++r) {
                              const T* src = self.grad.data().data() + ids[s][r] * d;
                              T* dst = g->data().data() + r * d;
                              for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                            }
                          }
                        });
}

/// Flat-indexed gather into a rank-1 result.
template <typename T>
Var<T> gather_elements(const Var<T>& x, std::vector<std::size_t> flat_ids) {
  if (flat_ids.empty()) throw ShapeError("gather_elements: empty index list");
  Tensor<T> out(Shape{flat_ids.size()});
  const auto& xv = x.value();
  for (std::size_t i = 0; i < flat_ids.size(); ++i) {
    if (!(flat_ids[i] < xv.size())) throw ShapeError("gather_elements: index out of range");
    out[i] = xv[flat_ids[i]];
  }
  return make_result<T>(std::move(out), {x},
                        [ids = std::move(flat_ids)](Node<T>& self) {
                          if (auto* g = self.input_grad(0)) {
                            for (std::size_t i = 0; i < ids.size(); ++i)
                              (*g)[ids[i]] += self.grad[i];
                          }
                        });
}

/// out[i, :] = x[i, :] * w[i]
template <typename T>
Var<T> scale_rows(const Var<T>& x, const Var<T>& w) {
  detail::require_matrix(x.shape(), "scale_rows");
  const std::size_t m = x.shape()[0], d = x.shape()[1];
  if (!(w.size() == m)) {
    throw ShapeError("scale_rows: weight length " + std::to_string(w.size()) + " vs rows " +
                     std::to_string(m));
  }
  Tensor<T> out = x.value();
  const auto& wv = w.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) *= wv[i];
  return make_result<T>(std::move(out), {x, w}, [m, d](Node<T>& self) {
    const auto& xv = self.input_value(0);
    const auto& wv = self.input_value(1);
    if (auto* g = self.input_grad(0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) g->at(i, j) += self.grad.at(i, j) * wv[i];
    }
    if (auto* g = self.input_grad(1)) {
      for (std::size_t i = 0; i < m; ++i) {
        T acc{0};
        for (std::size_t j = 0; j < d; ++j) acc += self.grad.at(i, j) * xv.at(i, j);
        (*g)[i] += acc;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and reductions

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::require_matrix(a.shape(), "matmul");
  detail::require_matrix(b.shape(), "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (!(b.shape()[0] == k)) {
    throw ShapeError("matmul: inner dimensions " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Tensor<T> out(Shape{m, n});
  detail::gemm_nn(a.value().data().data(), b.value().data().data(), out.data().data(), m,
                  k, n);
  return make_result<T>(std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    const T* dc = self.grad.data().data();
    if (auto* g = self.input_grad(0)) {
      detail::gemm_nt(dc, self.input_value(1).data().data(), g->data().data(), m, n, k);
    }
    if (auto* g = self.input_grad(1)) {
      detail::gemm_tn(self.input_value(0).data().data(), dc, g->data().data(), m, k, n);
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  const auto& xv = x.value();
  T acc{0};
  for (auto v : xv.data()) acc += v;
  return make_result<T>(Tensor<T>::scalar(acc), {x}, [](Node<T>& self) {
    if (auto* g = self.input_grad(0)) {
      const T dy = self.grad[0];
      for (auto& v : g->vec()) v += dy;
    }
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.size()));
}

/// Column means of a matrix: [m x n] -> [n].
template <typename T>
Var<T> mean_rows(const Var<T>& x) {
  detail::require_matrix(x.shape(), "mean_rows");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  Tensor<T> out(Shape{n});
  const auto& xv = x.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += xv.at(i, j);
  const T inv = T{1} / static_cast<T>(m);
  for (auto& v : out.vec()) v *= inv;
  return make_result<T>(std::move(out), {x}, [m, n, inv](Node<T>& self) {
    if (auto* g = self.input_grad(0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g->at(i, j) += self.grad[j] * inv;
    }
  });
}

template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  const auto sp = detail::split_axis(x.shape(), axis, "softmax");
  const auto& xv = x.value();
  if (!xv.all_finite()) throw NumericError("non-finite logits");
  Tensor<T> out(x.shape());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.n * sp.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < sp.n; ++j) mx = std::max(mx, xv[base + j * sp.inner]);
      T z{0};
      for (std::size_t j = 0; j < sp.n; ++j) {
        const T e = std::exp(xv[base + j * sp.inner] - mx);
        out[base + j * sp.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < sp.n; ++j) out[base + j * sp.inner] /= z;
    }
  }
  return make_result<T>(std::move(out), {x}, [sp](Node<T>& self) {
    auto* g = self.input_grad(0);
    if (!g) return;
    const auto& y = self.value;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.n * sp.inner + in;
        T dot{0};
        for (std::size_t j = 0; j < sp.n; ++j) {
          const std::size_t idx = base + j * sp.inner;
          dot += self.grad[idx] * y[idx];
        }
        for (std::size_t j = 0; j < sp.n; ++j) {
          const std::size_t idx = base + j * sp.inner;
          (*g)[idx] += y[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
}

/// log(sum(exp(x))) along `axis`; the axis is removed from the shape.
template <typename T>
Var<T> log_sum_exp(const Var<T>& x, std::size_t axis) {
  const auto sp = detail::split_axis(x.shape(), axis, "log_sum_exp");
  const auto& xv = x.value();
  if (!xv.all_finite()) throw NumericError("non-finite logits");
  Shape out_shape;
  for (std::size_t i = 0; i < x.shape().size(); ++i)
    if (i != axis) out_shape.push_back(x.shape()[i]);
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.n * sp.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < sp.n; ++j) mx = std::max(mx, xv[base + j * sp.inner]);
      T z{0};
      for (std::size_t j = 0; j < sp.n; ++j) z += std::exp(xv[base + j * sp.inner] - mx);
      out[o * sp.inner + in] = mx + std::log(z);
    }
  }
  return make_result<T>(std::move(out), {x}, [sp](Node<T>& self) {
    auto* g = self.input_grad(0);
    if (!g) return;
    const auto& xv = self.input_value(0);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.n * sp.inner + in;
        const T lse = self.value[o * sp.inner + in];
        const T dy = self.grad[o * sp.inner + in];
        for (std::size_t j = 0; j < sp.n; ++j) {
          const std::size_t idx = base + j * sp.inner;
          (*g)[idx] += dy * std::exp(xv[idx] - lse);
        }
      }
    }
  });
}

/// Row-wise layer normalization with learned gain and bias of length n.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias,
                  T eps = T(1e-5)) {
  detail::require_matrix(x.shape(), "layer_norm");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (!(gain.size() == n && bias.size() == n)) {
    throw ShapeError("layer_norm: gain/bias length must equal " + std::to_string(n));
  }
  const auto& xv = x.value();
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  Tensor<T> out(x.shape());
  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    T mu{0};
    for (std::size_t j = 0; j < n; ++j) mu += xv.at(i, j);
    mu /= static_cast<T>(n);
    T var{0};
    for (std::size_t j = 0; j < n; ++j) {
      const T c = xv.at(i, j) - mu;
      var += c * c;
    }
    var /= static_cast<T>(n);
    inv_std[i] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat.at(i, j) = (xv.at(i, j) - mu) * inv_std[i];
      out.at(i, j) = xhat.at(i, j) * gv[j] + bv[j];
    }
  }
  return make_result<T>(
      std::move(out), {x, gain, bias},
      [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        const auto& gv = self.input_value(1);
        if (auto* g = self.input_grad(0)) {
          std::vector<T> dxhat(n);
          for (std::size_t i = 0; i < m; ++i) {
            T mean_d{0}, mean_dx{0};
            for (std::size_t j = 0; j < n; ++j) {
              dxhat[j] = self.grad.at(i, j) * gv[j];
              mean_d += dxhat[j];
              mean_dx += dxhat[j] * xhat.at(i, j);
            }
            mean_d /= static_cast<T>(n);
            mean_dx /= static_cast<T>(n);
            for (std::size_t j = 0; j < n; ++j) {
              g->at(i, j) += inv_std[i] * (dxhat[j] - mean_d - xhat.at(i, j) * mean_dx);
            }
          }
        }
        if (auto* g = self.input_grad(1)) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) (*g)[j] += self.grad.at(i, j) * xhat.at(i, j);
        }
        if (auto* g = self.input_grad(2)) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) (*g)[j] += self.grad.at(i, j);
        }
      });
}

/// Mean negative log-likelihood of `targets` under row-wise softmax(logits).
template <typename T>
Var<T> cross_entropy_from_logits(const Var<T>& logits, const std::vector<std::size_t>& targets) {
  detail::require_matrix(logits.shape(), "cross_entropy_from_logits");
  const std::size_t m = logits.shape()[0], n = logits.shape()[1];
  if (!(targets.size() == m)) {
    throw ShapeError("cross_entropy_from_logits: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(m) + " rows");
  }
  const auto& xv = logits.value();
  if (!xv.all_finite()) throw NumericError("non-finite logits");
  Tensor<T> probs(logits.shape());
  T loss{0};
  for (std::size_t i = 0; i < m; ++i) {
    if (!(targets[i] < n)) throw ShapeError("cross_entropy_from_logits: target out of range");
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xv.at(i, j));
    T z{0};
    for (std::size_t j = 0; j < n; ++j) {
      probs.at(i, j) = std::exp(xv.at(i, j) - mx);
      z += probs.at(i, j);
    }
    for (std::size_t j = 0; j < n; ++j) probs.at(i, j) /= z;
    loss += mx + std::log(z) - xv.at(i, targets[i]);
  }
  loss /= static_cast<T>(m);
  return make_result<T>(Tensor<T>::scalar(loss), {logits},
                        [m, n, targets, probs = std::move(probs)](Node<T>& self) {
                          auto* g = self.input_grad(0);
                          if (!g) return;
                          const T s = self.grad[0] / static_cast<T>(m);
                          for (std::size_t i = 0; i < m; ++i) {
                            for (std::size_t j = 0; j < n; ++j) g->at(i, j) += s * probs.at(i, j);
                            g->at(i, targets[i]) -= s;
                          }
                        });
}

/// Inverted dropout: kept entries are scaled by 1/(1-p). p == 0 is identity.
template <typename T>
Var<T> dropout(const Var<T>& x, double p, std::uint64_t seed) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout: p must be in [0, 1)");
  if (p == 0.0) return x;
  std::mt19937_64 rng(seed);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  Tensor<T> mask(x.shape());
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = detail::unit_uniform(rng) < p ? T{0} : keep_scale;
    out[i] *= mask[i];
  }
  return make_result<T>(std::move(out), {x}, [mask = std::move(mask)](Node<T>& self) {
    if (auto* g = self.input_grad(0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * mask[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Transformer pieces

/// Gated feed-forward: (silu(x Wg) * (x Wu)) Wd, applied row-wise.
template <typename T>
Var<T> swiglu(const Var<T>& x, const Var<T>& w_gate, const Var<T>& w_up,
              const Var<T>& w_down) {
  if (!(w_gate.shape() == w_up.shape())) throw ShapeError("swiglu: gate/up shapes differ");
  detail::require_matrix(w_down.shape(), "swiglu");
  if (!(w_down.shape()[0] == w_gate.shape()[1] && w_down.shape()[1] == w_gate.shape()[0])) {
    throw ShapeError("swiglu: down projection shape " + shape_str(w_down.shape()));
  }
  return matmul(mul(silu(matmul(x, w_gate)), matmul(x, w_up)), w_down);
}

/// Rotary embedding on the leading `rotary_pct` fraction of every head.
/// x is [T x n_heads*d_head]; adjacent pairs (2j, 2j+1) rotate by p * base^(-2j/r).
template <typename T>
Var<T> apply_rope(const Var<T>& x, const std::vector<std::size_t>& positions,
                  std::size_t n_heads, double rotary_pct, double base = 10000.0) {
  detail::require_matrix(x.shape(), "apply_rope");
  const std::size_t rows = x.shape()[0], width = x.shape()[1];
  if (!(n_heads > 0 && width % n_heads == 0)) {
    throw ShapeError("apply_rope: width not divisible by heads");
  }
  if (!(positions.size() == rows)) throw ShapeError("apply_rope: one position per row required");
  const std::size_t d_head = width / n_heads;
  const double span_f = rotary_pct * static_cast<double>(d_head);
  const auto span = static_cast<std::size_t>(std::llround(span_f));
  if (std::abs(span_f - static_cast<double>(span)) > 1e-9 || span % 2 != 0 || span > d_head) {
    throw ConfigError("rotary span must be an even number of dims, got " +
                      std::to_string(span_f));
  }
  const std::size_t pairs = span / 2;
  // cos/sin table per (row, pair)
  std::vector<T> cs(rows * pairs), sn(rows * pairs);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < pairs; ++j) {
      const double theta = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(span));
      const double angle = static_cast<double>(positions[r]) * theta;
      cs[r * pairs + j] = static_cast<T>(std::cos(angle));
      sn[r * pairs + j] = static_cast<T>(std::sin(angle));
    }
  }
  Tensor<T> out = x.value();
  const auto& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t off = r * width + h * d_head;
      for (std::size_t j = 0; j < pairs; ++j) {
        const T a = xv[off + 2 * j], b = xv[off + 2 * j + 1];
        const T c = cs[r * pairs + j], s = sn[r * pairs + j];
        out[off + 2 * j] = a * c - b * s;
        out[off + 2 * j + 1] = a * s + b * c;
      }
    }
  }
  return make_result<T>(std::move(out), {x},
                        [rows, width, n_heads, d_head, pairs, cs = std::move(cs),
                         sn = std::move(sn)](Node<T>& self) {
                          auto* g = self.input_grad(0);
                          if (!g) return;
                          const auto& dy = self.grad;
                          for (std::size_t r = 0; r < rows; ++r) {
                            for (std::size_t h = 0; h < n_heads; ++h) {
                              const std::size_t off = r * width + h * d_head;
                              for (std::size_t j = 0; j < pairs; ++j) {
                                const T da = dy[off + 2 * j], db = dy[off + 2 * j + 1];
                                const T c = cs[r * pairs + j], s = sn[r * pairs + j];
                                (*g)[off + 2 * j] += da * c + db * s;
                                (*g)[off + 2 * j + 1] += -da * s + db * c;
                              }
                              for (std::size_t j = 2 * pairs; j < d_head; ++j)
                                (*g)[off + j] += dy[off + j];
                            }
                          }
                        });
}

/// Multi-head scaled dot-product attention with a strict causal mask.
/// Rows are packed sequences of `seq_len` tokens; attention never crosses a
/// sequence boundary. Attention probabilities get inverted dropout when
/// dropout_p > 0.
template <typename T>
Var<T> causal_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v,
                        std::size_t n_heads, std::size_t seq_len, double dropout_p,
                        std::uint64_t seed) {
  detail::require_matrix(q.shape(), "causal_attention");
  if (!(q.shape() == k.shape() && q.shape() == v.shape())) {
    throw ShapeError("causal_attention: q/k/v shapes differ");
  }
  const std::size_t rows = q.shape()[0], width = q.shape()[1];
  if (!(n_heads > 0 && width % n_heads == 0)) {
    throw ShapeError("causal_attention: width not divisible by heads");
  }
  if (!(seq_len > 0 && rows % seq_len == 0)) {
    throw ShapeError("causal_attention: rows must be a multiple of seq_len");
  }
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("dropout: p must be in [0, 1)");
  const std::size_t d_head = width / n_heads;
  const std::size_t n_seq = rows / seq_len;
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(d_head));
  const T keep_scale = static_cast<T>(1.0 / (1.0 - dropout_p));

  // probs[s][h][i][j] for j <= i, stored densely as L x L blocks.
  const std::size_t block = seq_len * seq_len;
  Tensor<T> probs(Shape{n_seq * n_heads * block});
  Tensor<T> mask;
  if (dropout_p > 0.0) mask = Tensor<T>(Shape{n_seq * n_heads * block});
  std::mt19937_64 rng(seed);

  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  Tensor<T> out(q.shape());
  std::vector<T> row(seq_len);
  for (std::size_t s = 0; s < n_seq; ++s) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      T* pb = probs.data().data() + (s * n_heads + h) * block;
      T* mb = mask.empty() ? nullptr : mask.data().data() + (s * n_heads + h) * block;
      for (std::size_t i = 0; i < seq_len; ++i) {
        const T* qi = qv.data().data() + (s * seq_len + i) * width + h * d_head;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const T* kj = kv.data().data() + (s * seq_len + j) * width + h * d_head;
          T acc{0};
          for (std::size_t c = 0; c < d_head; ++c) acc += qi[c] * kj[c];
          row[j] = acc * inv_sqrt;
          mx = std::max(mx, row[j]);
        }
        if (!std::isfinite(mx)) throw NumericError("non-finite logits");
        T z{0};
        for (std::size_t j = 0; j <= i; ++j) {
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        T* oi = out.data().data() + (s * seq_len + i) * width + h * d_head;
        for (std::size_t j = 0; j <= i; ++j) {
          const T p = row[j] / z;
          pb[i * seq_len + j] = p;
          T w = p;
          if (mb) {
            mb[i * seq_len + j] = detail::unit_uniform(rng) < dropout_p ? T{0} : keep_scale;
            w *= mb[i * seq_len + j];
          }
          const T* vj = vv.data().data() + (s * seq_len + j) * width + h * d_head;
          for (std::size_t c = 0; c < d_head; ++c) oi[c] += w * vj[c];
        }
      }
    }
  }

  return make_result<T>(
      std::move(out), {q, k, v},
      [=, probs = std::move(probs), mask = std::move(mask)](Node<T>& self) {
        auto* gq = self.input_grad(0);
        auto* gk = self.input_grad(1);
        auto* gv = self.input_grad(2);
        const auto& qv = self.input_value(0);
        const auto& kv = self.input_value(1);
        const auto& vv = self.input_value(2);
        const T* dout = self.grad.data().data();
        std::vector<T> dp(seq_len);
        for (std::size_t s = 0; s < n_seq; ++s) {
          for (std::size_t h = 0; h < n_heads; ++h) {
            const T* pb = probs.data().data() + (s * n_heads + h) * block;
            const T* mb = mask.empty() ? nullptr : mask.data().data() + (s * n_heads + h) * block;
            for (std::size_t i = 0; i < seq_len; ++i) {
              const std::size_t ri = (s * seq_len + i) * width + h * d_head;
              const T* doi = dout + ri;
              // dP (pre-dropout) and dV
              T dot{0};
              for (std::size_t j = 0; j <= i; ++j) {
                const std::size_t rj = (s * seq_len + j) * width + h * d_head;
                const T m = mb ? mb[i * seq_len + j] : T{1};
                T acc{0};
                for (std::size_t c = 0; c < d_head; ++c) acc += doi[c] * vv[rj + c];
                dp[j] = acc * m;
                dot += dp[j] * pb[i * seq_len + j];
                if (gv) {
                  const T w = pb[i * seq_len + j] * m;
                  for (std::size_t c = 0; c < d_head; ++c) (*gv)[rj + c] += w * doi[c];
                }
              }
              for (std::size_t j = 0; j <= i; ++j) {
                const std::size_t rj = (s * seq_len + j) * width + h * d_head;
                const T ds = pb[i * seq_len + j] * (dp[j] - dot) * inv_sqrt;
                if (ds == T{0}) continue;
                if (gq) {
                  for (std::size_t c = 0; c < d_head; ++c) (*gq)[ri + c] += ds * kv[rj + c];
                }
                if (gk) {
                  for (std::size_t c = 0; c < d_head; ++c) (*gk)[rj + c] += ds * qv[ri + c];
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Non-differentiable selection

struct TopK {
  std::vector<std::size_t> indices;
  std::vector<double> values;
};

/// The k largest scores, descending; equal scores keep the lower index first.
template <typename T>
TopK topk_select(std::span<const T> scores, std::size_t k) {
  if (k > scores.size()) throw ConfigError("k exceeds expert count");
  if (k == 0) throw ConfigError("k must be at least 1");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return a < b;
                    });
  TopK out;
  out.indices.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
  for (auto i : out.indices) out.values.push_back(static_cast<double>(scores[i]));
  return out;
}

}  // namespace grainmoe
