#pragma once

// Differentiable operations. Every op returns a fresh tensor; it records a
// backward closure only when at least one input requires a gradient.
// Reductions accumulate in double regardless of the storage type.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "forenvit/numerics/functional.hpp"
#include "forenvit/numerics/rng.hpp"
#include "forenvit/numerics/tensor.hpp"

namespace forenvit::ops {

namespace detail {

template <typename T>
using NodeT = forenvit::detail::Node<T>;

template <typename T>
using NodePtr = std::shared_ptr<NodeT<T>>;

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::vector<NodePtr<T>> inputs,
                      std::function<void(NodeT<T>&)> bw) {
  auto n = std::make_shared<NodeT<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->leaf = false;
  const bool rg = std::any_of(inputs.begin(), inputs.end(), [](const auto& p) { return p->requires_grad; });
  if (rg) {
    n->requires_grad = true;
    n->inputs = std::move(inputs);
    n->backward = std::move(bw);
  }
  return Tensor<T>::from_node(std::move(n));
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t r, const char* op) {
  if (t.rank() != r)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(t.shape()));
}

// out[m,n] (double) += A[m,k] * B[k,n]
template <typename A, typename B>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const A* a, const B* b, double* out) {
  for (std::size_t i = 0; i < m; ++i) {
    double* o = out + i * n;
    const A* ar = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = static_cast<double>(ar[p]);
      const B* br = b + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * static_cast<double>(br[j]);
    }
  }
}

// out[m,k] += G[m,n] * B[k,n]^T
template <typename G, typename B>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const G* g, const B* b, double* out) {
  for (std::size_t i = 0; i < m; ++i) {
    const G* gr = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const B* br = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += static_cast<double>(gr[j]) * static_cast<double>(br[j]);
      out[i * k + p] += acc;
    }
  }
}

// out[k,n] += A[m,k]^T * G[m,n]
template <typename A, typename G>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const A* a, const G* g, double* out) {
  for (std::size_t i = 0; i < m; ++i) {
    const A* ar = a + i * k;
    const G* gr = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = static_cast<double>(ar[p]);
      double* o = out + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * static_cast<double>(gr[j]);
    }
  }
}

template <typename T>
void add_into(T* dst, const double* src, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dst[i] += static_cast<T>(src[i]);
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> acc(m * n, 0.0);
  detail::gemm_nn(m, k, n, a.ptr(), b.ptr(), acc.data());
  std::vector<T> out(acc.begin(), acc.end());
  return detail::make_result<T>({m, n}, std::move(out), {a.node(), b.node()}, [m, k, n](detail::NodeT<T>& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    if (na.requires_grad) {
      std::vector<double> g(m * k, 0.0);
      detail::gemm_nt(m, n, k, self.grad.data(), nb.value.data(), g.data());
      detail::add_into(na.grad_buffer(), g.data(), g.size());
    }
    if (nb.requires_grad) {
      std::vector<double> g(k * n, 0.0);
      detail::gemm_tn(m, k, n, na.value.data(), self.grad.data(), g.data());
      detail::add_into(nb.grad_buffer(), g.data(), g.size());
    }
  });
}

/// x[m,in] * w[in,out] + b[out]; `b` may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require_rank(x, 2, "linear");
  detail::require_rank(w, 2, "linear");
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  if (w.dim(0) != k) throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  const bool has_bias = b.defined();
  if (has_bias && b.numel() != n) throw ShapeError("linear: bias " + shape_str(b.shape()) + " for width " + std::to_string(n));
  std::vector<double> acc(m * n, 0.0);
  detail::gemm_nn(m, k, n, x.ptr(), w.ptr(), acc.data());
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out[i * n + j] = static_cast<T>(acc[i * n + j] + (has_bias ? static_cast<double>(b[j]) : 0.0));
  std::vector<detail::NodePtr<T>> inputs{x.node(), w.node()};
  if (has_bias) inputs.push_back(b.node());
  return detail::make_result<T>({m, n}, std::move(out), std::move(inputs), [m, k, n, has_bias](detail::NodeT<T>& self) {
    auto& nx = *self.inputs[0];
    auto& nw = *self.inputs[1];
    if (nx.requires_grad) {
      std::vector<double> g(m * k, 0.0);
      detail::gemm_nt(m, n, k, self.grad.data(), nw.value.data(), g.data());
      detail::add_into(nx.grad_buffer(), g.data(), g.size());
    }
    if (nw.requires_grad) {
      std::vector<double> g(k * n, 0.0);
      detail::gemm_tn(m, k, n, nx.value.data(), self.grad.data(), g.data());
      detail::add_into(nw.grad_buffer(), g.data(), g.size());
    }
    if (has_bias && self.inputs[2]->requires_grad) {
      std::vector<double> g(n, 0.0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
      detail::add_into(self.inputs[2]->grad_buffer(), g.data(), n);
    }
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a.node(), b.node()}, [](detail::NodeT<T>& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      T* g = in->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a.node(), b.node()}, [](detail::NodeT<T>& self) {
    for (std::size_t s = 0; s < 2; ++s) {
      auto& in = self.inputs[s];
      if (!in->requires_grad) continue;
      T* g = in->grad_buffer();
      const T sign = s == 0 ? T(1) : T(-1);
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += sign * self.grad[i];
    }
  });
}

/// Elementwise product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a.node(), b.node()}, [](detail::NodeT<T>& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    if (na.requires_grad) {
      T* g = na.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * nb.value[i];
    }
    if (nb.requires_grad) {
      T* g = nb.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * na.value[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double s) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(x[i] * s);
  return detail::make_result<T>(x.shape(), std::move(out), {x.node()}, [s](detail::NodeT<T>& self) {
    T* g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += static_cast<T>(self.grad[i] * s);
  });
}

/// x[m,n] + y[r,n] where y's rows repeat down x (m divisible by r).
/// A rank-1 y of length n is treated as a single row.
template <typename T>
Tensor<T> add_tiled(const Tensor<T>& x, const Tensor<T>& y) {
  detail::require_rank(x, 2, "add_tiled");
  const std::size_t m = x.dim(0), n = x.dim(1);
  const std::size_t r = y.numel() / n;
  if (r == 0 || r * n != y.numel() || m % r != 0)
    throw ShapeError("add_tiled: " + shape_str(x.shape()) + " + " + shape_str(y.shape()));
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + y[(i % r) * n + j];
  return detail::make_result<T>(x.shape(), std::move(out), {x.node(), y.node()}, [m, n, r](detail::NodeT<T>& self) {
    auto& nx = *self.inputs[0];
    auto& ny = *self.inputs[1];
    if (nx.requires_grad) {
      T* g = nx.grad_buffer();
      for (std::size_t i = 0; i < m * n; ++i) g[i] += self.grad[i];
    }
    if (ny.requires_grad) {
      std::vector<double> acc(r * n, 0.0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) acc[(i % r) * n + j] += self.grad[i * n + j];
      detail::add_into(ny.grad_buffer(), acc.data(), acc.size());
    }
  });
}

/// Row-wise layer normalisation of x[m,d] with population variance.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps = 1e-6) {
  detail::require_rank(x, 2, "layer_norm");
  const std::size_t m = x.dim(0), d = x.dim(1);
  if (gain.numel() != d || bias.numel() != d)
    throw ShapeError("layer_norm: gain/bias length must equal row width " + std::to_string(d));
  std::vector<T> out(m * d);
  std::vector<double> xhat(m * d), rstd(m);
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = x.ptr() + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (row[j] - mean) * rstd[i];
      out[i * d + j] = static_cast<T>(gain[j] * xhat[i * d + j] + bias[j]);
    }
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {x.node(), gain.node(), bias.node()},
      [m, d, xhat = std::move(xhat), rstd = std::move(rstd)](detail::NodeT<T>& self) {
        auto& nx = *self.inputs[0];
        auto& ng = *self.inputs[1];
        auto& nb = *self.inputs[2];
        const T* dy = self.grad.data();
        if (nx.requires_grad) {
          T* gx = nx.grad_buffer();
          std::vector<double> dxhat(d);
          for (std::size_t i = 0; i < m; ++i) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              dxhat[j] = static_cast<double>(dy[i * d + j]) * ng.value[j];
              s1 += dxhat[j];
              s2 += dxhat[j] * xhat[i * d + j];
            }
            s1 /= static_cast<double>(d);
            s2 /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j)
              gx[i * d + j] += static_cast<T>(rstd[i] * (dxhat[j] - s1 - xhat[i * d + j] * s2));
          }
        }
        if (ng.requires_grad || nb.requires_grad) {
          std::vector<double> gg(d, 0.0), gb(d, 0.0);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < d; ++j) {
              gg[j] += dy[i * d + j] * xhat[i * d + j];
              gb[j] += dy[i * d + j];
            }
          if (ng.requires_grad) detail::add_into(ng.grad_buffer(), gg.data(), d);
          if (nb.requires_grad) detail::add_into(nb.grad_buffer(), gb.data(), d);
        }
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(forenvit::gelu(x[i]));
  return detail::make_result<T>(x.shape(), std::move(out), {x.node()}, [](detail::NodeT<T>& self) {
    auto& nx = *self.inputs[0];
    T* g = nx.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      g[i] += static_cast<T>(self.grad[i] * gelu_grad(nx.value[i]));
  });
}

enum class Mode { train, eval };

/// Inverted dropout. Eval mode and rate 0 return the input unchanged.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Mode mode, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  if (mode == Mode::eval || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<T> mask(x.numel());
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = rng.uniform() < rate ? T(0) : static_cast<T>(keep_scale);
    out[i] = x[i] * mask[i];
  }
  return detail::make_result<T>(x.shape(), std::move(out), {x.node()}, [mask = std::move(mask)](detail::NodeT<T>& self) {
    T* g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

/// Multi-head self-attention core. `qkv` is [B*tokens, 3d] laid out as
/// [q | k | v]; returns [B*tokens, d]. When `probs_out` is non-null it
/// receives the post-softmax weights as B x heads x tokens x tokens.
template <typename T>
Tensor<T> attention(const Tensor<T>& qkv, std::size_t heads, std::size_t tokens, std::vector<T>* probs_out = nullptr) {
  detail::require_rank(qkv, 2, "attention");
  const std::size_t rows = qkv.dim(0), width3 = qkv.dim(1);
  if (width3 % 3 != 0 || rows % tokens != 0) throw ShapeError("attention: bad qkv shape " + shape_str(qkv.shape()));
  const std::size_t d = width3 / 3;
  if (heads == 0 || d % heads != 0) throw ShapeError("attention: width not divisible by heads");
  const std::size_t batch = rows / tokens, hd = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const T* src = qkv.ptr();

  std::vector<T> probs(batch * heads * tokens * tokens);
  std::vector<T> out(rows * d);
  std::vector<double> logits(tokens), acc(hd);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      T* p = probs.data() + ((b * heads + h) * tokens) * tokens;
      for (std::size_t i = 0; i < tokens; ++i) {
        const T* q = src + (b * tokens + i) * width3 + h * hd;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < tokens; ++j) {
          const T* k = src + (b * tokens + j) * width3 + d + h * hd;
          double s = 0.0;
          for (std::size_t c = 0; c < hd; ++c) s += static_cast<double>(q[c]) * k[c];
          logits[j] = s * inv_sqrt;
          mx = std::max(mx, logits[j]);
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < tokens; ++j) sum += logits[j] = std::exp(logits[j] - mx);
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t j = 0; j < tokens; ++j) {
          const double w = logits[j] / sum;
          p[i * tokens + j] = static_cast<T>(w);
          const T* v = src + (b * tokens + j) * width3 + 2 * d + h * hd;
          for (std::size_t c = 0; c < hd; ++c) acc[c] += w * v[c];
        }
        T* o = out.data() + (b * tokens + i) * d + h * hd;
        for (std::size_t c = 0; c < hd; ++c) o[c] = static_cast<T>(acc[c]);
      }
    }
  }
  if (probs_out) *probs_out = probs;

  return detail::make_result<T>(
      {rows, d}, std::move(out), {qkv.node()},
      [batch, heads, tokens, d, hd, width3, inv_sqrt, probs = std::move(probs)](detail::NodeT<T>& self) {
        auto& nin = *self.inputs[0];
        const T* src = nin.value.data();
        T* gsrc = nin.grad_buffer();
        const T* gout = self.grad.data();
        std::vector<double> dp(tokens), gq(hd);
        std::vector<double> gk(tokens * hd), gv(tokens * hd);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const T* p = probs.data() + ((b * heads + h) * tokens) * tokens;
            std::fill(gk.begin(), gk.end(), 0.0);
            std::fill(gv.begin(), gv.end(), 0.0);
            for (std::size_t i = 0; i < tokens; ++i) {
              const T* go = gout + (b * tokens + i) * d + h * hd;
              const T* q = src + (b * tokens + i) * width3 + h * hd;
              double dot = 0.0;
              for (std::size_t j = 0; j < tokens; ++j) {
                const T* v = src + (b * tokens + j) * width3 + 2 * d + h * hd;
                double s = 0.0;
                for (std::size_t c = 0; c < hd; ++c) s += static_cast<double>(go[c]) * v[c];
                dp[j] = s;
                dot += s * p[i * tokens + j];
                const double pij = p[i * tokens + j];
                for (std::size_t c = 0; c < hd; ++c) gv[j * hd + c] += pij * go[c];
              }
              std::fill(gq.begin(), gq.end(), 0.0);
              for (std::size_t j = 0; j < tokens; ++j) {
                const double ds = p[i * tokens + j] * (dp[j] - dot) * inv_sqrt;
                const T* k = src + (b * tokens + j) * width3 + d + h * hd;
                for (std::size_t c = 0; c < hd; ++c) {
                  gq[c] += ds * k[c];
                  gk[j * hd + c] += ds * q[c];
                }
              }
              T* dq = gsrc + (b * tokens + i) * width3 + h * hd;
              for (std::size_t c = 0; c < hd; ++c) dq[c] += static_cast<T>(gq[c]);
            }
            for (std::size_t j = 0; j < tokens; ++j) {
              T* dk = gsrc + (b * tokens + j) * width3 + d + h * hd;
              T* dv = gsrc + (b * tokens + j) * width3 + 2 * d + h * hd;
              for (std::size_t c = 0; c < hd; ++c) {
                dk[c] += static_cast<T>(gk[j * hd + c]);
                dv[c] += static_cast<T>(gv[j * hd + c]);
              }
            }
          }
        }
      });
}

/// Stacks rank-2 tensors with equal column counts.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t n = parts[0].dim(1);
  std::size_t m = 0;
  std::vector<T> out;
  std::vector<detail::NodePtr<T>> inputs;
  for (const auto& p : parts) {
    detail::require_rank(p, 2, "concat_rows");
    if (p.dim(1) != n) throw ShapeError("concat_rows: column mismatch");
    m += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
    inputs.push_back(p.node());
  }
  return detail::make_result<T>({m, n}, std::move(out), std::move(inputs), [](detail::NodeT<T>& self) {
    std::size_t offset = 0;
    for (auto& in : self.inputs) {
      const std::size_t len = in->value.size();
      if (in->requires_grad) {
        T* g = in->grad_buffer();
        for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[offset + i];
      }
      offset += len;
    }
  });
}

/// Joins rank-2 tensors with equal row counts side by side.
template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t m = parts[0].dim(0);
  std::size_t n = 0;
  std::vector<std::size_t> widths;
  std::vector<detail::NodePtr<T>> inputs;
  for (const auto& p : parts) {
    detail::require_rank(p, 2, "concat_cols");
    if (p.dim(0) != m) throw ShapeError("concat_cols: row mismatch");
    widths.push_back(p.dim(1));
    n += p.dim(1);
    inputs.push_back(p.node());
  }
  std::vector<T> out(m * n);
  std::size_t col = 0;
  for (std::size_t s = 0; s < parts.size(); ++s) {
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(parts[s].ptr() + i * widths[s], widths[s], out.data() + i * n + col);
    col += widths[s];
  }
  return detail::make_result<T>({m, n}, std::move(out), std::move(inputs), [m, n, widths](detail::NodeT<T>& self) {
    std::size_t col = 0;
    for (std::size_t s = 0; s < self.inputs.size(); ++s) {
      auto& in = *self.inputs[s];
      if (in.requires_grad) {
        T* g = in.grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < widths[s]; ++j) g[i * widths[s] + j] += self.grad[i * n + col + j];
      }
      col += widths[s];
    }
  });
}

/// Picks rows of x[m,n] by index (repeats allowed); backward scatter-adds.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::vector<std::size_t> index) {
  detail::require_rank(x, 2, "gather_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (index.empty()) throw ShapeError("gather_rows: empty index");
  std::vector<T> out(index.size() * n);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= m) throw ShapeError("gather_rows: index " + std::to_string(index[r]) + " out of range");
    std::copy_n(x.ptr() + index[r] * n, n, out.data() + r * n);
  }
  const std::size_t rows = index.size();
  return detail::make_result<T>({rows, n}, std::move(out), {x.node()}, [n, index = std::move(index)](detail::NodeT<T>& self) {
    T* g = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < index.size(); ++r)
      for (std::size_t j = 0; j < n; ++j) g[index[r] * n + j] += self.grad[r * n + j];
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<T> out(x.data().begin(), x.data().end());
  return detail::make_result<T>(std::move(shape), std::move(out), {x.node()}, [](detail::NodeT<T>& self) {
    T* g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

/// Row-wise softmax over the last dimension of a rank-1 or rank-2 tensor.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  const std::size_t n = x.shape().back();
  const std::size_t m = x.numel() / n;
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<double> row(x.data().begin() + i * n, x.data().begin() + (i + 1) * n);
    const auto p = forenvit::softmax(row);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = static_cast<T>(p[j]);
  }
  return detail::make_result<T>(x.shape(), out, {x.node()}, [m, n](detail::NodeT<T>& self) {
    T* g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(self.grad[i * n + j]) * self.value[i * n + j];
      for (std::size_t j = 0; j < n; ++j)
        g[i * n + j] += static_cast<T>(self.value[i * n + j] * (self.grad[i * n + j] - dot));
    }
  });
}

/// sum_i softmax(logits)_i * parts_i over equally shaped parts.
template <typename T>
Tensor<T> weighted_sum(const std::vector<Tensor<T>>& parts, const Tensor<T>& logits) {
  if (parts.empty() || parts.size() != logits.numel())
    throw ShapeError("weighted_sum: need one logit per part");
  std::vector<double> lg(logits.data().begin(), logits.data().end());
  const auto w = forenvit::softmax(lg);
  const Shape shape = parts[0].shape();
  const std::size_t len = parts[0].numel();
  std::vector<double> acc(len, 0.0);
  std::vector<detail::NodePtr<T>> inputs{logits.node()};
  for (std::size_t s = 0; s < parts.size(); ++s) {
    if (parts[s].shape() != shape) throw ShapeError("weighted_sum: parts differ in shape");
    for (std::size_t i = 0; i < len; ++i) acc[i] += w[s] * parts[s][i];
    inputs.push_back(parts[s].node());
  }
  std::vector<T> out(acc.begin(), acc.end());
  return detail::make_result<T>(shape, std::move(out), std::move(inputs), [w, len](detail::NodeT<T>& self) {
    const std::size_t k = w.size();
    std::vector<double> dw(k, 0.0);
    for (std::size_t s = 0; s < k; ++s) {
      auto& part = *self.inputs[s + 1];
      for (std::size_t i = 0; i < len; ++i) dw[s] += static_cast<double>(self.grad[i]) * part.value[i];
      if (part.requires_grad) {
        T* g = part.grad_buffer();
        for (std::size_t i = 0; i < len; ++i) g[i] += static_cast<T>(w[s] * self.grad[i]);
      }
    }
    auto& nl = *self.inputs[0];
    if (nl.requires_grad) {
      double dot = 0.0;
      for (std::size_t s = 0; s < k; ++s) dot += w[s] * dw[s];
      T* g = nl.grad_buffer();
      for (std::size_t s = 0; s < k; ++s) g[s] += static_cast<T>(w[s] * (dw[s] - dot));
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += v;
  return detail::make_result<T>({}, {static_cast<T>(acc)}, {x.node()}, [](detail::NodeT<T>& self) {
    T* g = self.inputs[0]->grad_buffer();
    const std::size_t n = self.inputs[0]->value.size();
    for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

/// Mean binary cross-entropy over B logits.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, std::span<const int> labels) {
  const std::size_t n = logits.numel();
  if (labels.size() != n) throw ShapeError("bce_with_logits: label count mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += forenvit::bce_with_logit(logits[i], labels[i]);
  std::vector<int> y(labels.begin(), labels.end());
  return detail::make_result<T>({}, {static_cast<T>(acc / n)}, {logits.node()}, [n, y = std::move(y)](detail::NodeT<T>& self) {
    auto& nl = *self.inputs[0];
    T* g = nl.grad_buffer();
    const double scale = static_cast<double>(self.grad[0]) / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) g[i] += static_cast<T>((sigmoid(nl.value[i]) - y[i]) * scale);
  });
}

/// Mean softmax cross-entropy of logits[B,C] against integer classes.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  detail::require_rank(logits, 2, "cross_entropy");
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  if (labels.size() != b) throw ShapeError("cross_entropy: label count mismatch");
  std::vector<double> probs(b * c);
  double acc = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) throw DataError("cross_entropy: class out of range");
    std::vector<double> row(logits.data().begin() + i * c, logits.data().begin() + (i + 1) * c);
    const auto p = forenvit::softmax(row);
    std::copy(p.begin(), p.end(), probs.begin() + i * c);
    acc -= std::log(std::max(p[labels[i]], 1e-300));
  }
  std::vector<int> y(labels.begin(), labels.end());
  return detail::make_result<T>({}, {static_cast<T>(acc / b)}, {logits.node()},
                                [b, c, y = std::move(y), probs = std::move(probs)](detail::NodeT<T>& self) {
                                  T* g = self.inputs[0]->grad_buffer();
                                  const double s = static_cast<double>(self.grad[0]) / static_cast<double>(b);
                                  for (std::size_t i = 0; i < b; ++i)
                                    for (std::size_t j = 0; j < c; ++j)
                                      g[i * c + j] += static_cast<T>((probs[i * c + j] - (static_cast<int>(j) == y[i])) * s);
                                });
}

/// Mean squared error against a constant target.
template <typename T>
Tensor<T> mse(const Tensor<T>& pred, std::span<const T> target) {
  const std::size_t n = pred.numel();
  if (target.size() != n) throw ShapeError("mse: target size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += (static_cast<double>(pred[i]) - target[i]) * (static_cast<double>(pred[i]) - target[i]);
  std::vector<T> t(target.begin(), target.end());
  return detail::make_result<T>({}, {static_cast<T>(acc / n)}, {pred.node()}, [n, t = std::move(t)](detail::NodeT<T>& self) {
    auto& np = *self.inputs[0];
    T* g = np.grad_buffer();
    const double s = 2.0 * static_cast<double>(self.grad[0]) / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) g[i] += static_cast<T>((static_cast<double>(np.value[i]) - t[i]) * s);
  });
}

}  // namespace forenvit::ops
