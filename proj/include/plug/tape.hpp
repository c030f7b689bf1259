#pragma once

// Eager reverse-mode tape. Values are computed as ops are recorded; backward()
// walks the record in reverse. One tape per training step.
//
// Gradients flow into ParamStore entries only when the entry is trainable;
// frozen parameters act as constants and their grads stay exactly zero.

#include "plug/kernels.hpp"
#include "plug/params.hpp"
#include "plug/tensor.hpp"

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

namespace plug {

template <typename T>
class Tape {
 public:
  using Var = int;

  explicit Tape(ParamStore<T>* ps = nullptr) : ps_(ps) {}

  const Tensor<T>& val(Var v) const { return nodes_[v].val; }
  Tensor<T>& grad(Var v) { return nodes_[v].grad; }

  Var input(Tensor<T> v) { return push(std::move(v), nullptr, -1); }

  Var param(const std::string& name) {
    int pi = ps_->index(name);
    Tensor<T> v = ps_->at(pi).value;  // copy; store may be perturbed between tapes
    return push(std::move(v), nullptr, pi);
  }

  // ---- elementwise / shape ----

  Var add(Var a, Var b) {
    check_same(a, b);
    Tensor<T> out = nodes_[a].val;
    const auto& bv = nodes_[b].val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
    return push(std::move(out), [this, a, b](Node& n) {
      axpy(nodes_[a].grad, n.grad, T(1));
      axpy(nodes_[b].grad, n.grad, T(1));
    });
  }

  Var sub(Var a, Var b) {
    check_same(a, b);
    Tensor<T> out = nodes_[a].val;
    const auto& bv = nodes_[b].val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
    return push(std::move(out), [this, a, b](Node& n) {
      axpy(nodes_[a].grad, n.grad, T(1));
      axpy(nodes_[b].grad, n.grad, T(-1));
    });
  }

  Var mul(Var a, Var b) {
    check_same(a, b);
    Tensor<T> out = nodes_[a].val;
    const auto& bv = nodes_[b].val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
    return push(std::move(out), [this, a, b](Node& n) {
      auto& ga = nodes_[a].grad;
      auto& gb = nodes_[b].grad;
      const auto& av = nodes_[a].val;
      const auto& bv2 = nodes_[b].val;
      for (int64_t i = 0; i < n.grad.numel(); ++i) {
        ga[i] += n.grad[i] * bv2[i];
        gb[i] += n.grad[i] * av[i];
      }
    });
  }

  Var scale(Var a, T c) {
    Tensor<T> out = nodes_[a].val;
    for (auto& v : out.data) v *= c;
    return push(std::move(out), [this, a, c](Node& n) {
      axpy(nodes_[a].grad, n.grad, c);
    });
  }

  Var reshape(Var a, std::vector<int> shape) {
    Tensor<T> out(std::move(shape), nodes_[a].val.data);
    if (out.numel() != nodes_[a].val.numel()) throw std::runtime_error("reshape numel");
    return push(std::move(out), [this, a](Node& n) {
      axpy(nodes_[a].grad, n.grad, T(1));
    });
  }

  Var detach(Var a) { return input(nodes_[a].val); }

  // ---- linear algebra ----

  // out = x * w^T (+bias); x [..., K], w [N, K], bias [N] param-or-var or -1
  Var linear(Var x, Var w, Var bias = -1) {
    const auto& xv = nodes_[x].val;
    const auto& wv = nodes_[w].val;
    int k = xv.shape.back();
    int n = wv.shape[0];
    if (wv.shape[1] != k) throw std::runtime_error("linear shape");
    int64_t rows = xv.numel() / k;
    std::vector<int> oshape = xv.shape;
    oshape.back() = n;
    Tensor<T> out(oshape);
    kern::gemm<T>(false, true, (int)rows, n, k, T(1), xv.ptr(), k, wv.ptr(), k,
                  T(0), out.ptr(), n);
    if (bias >= 0) {
      const auto& bv = nodes_[bias].val;
      for (int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < n; ++j) out[r * n + j] += bv[j];
    }
    return push(std::move(out), [this, x, w, bias, rows, n, k](Node& nd) {
      // gx += go * w ; gw += go^T * x
      kern::gemm<T>(false, false, (int)rows, k, n, T(1), nd.grad.ptr(), n,
                    nodes_[w].val.ptr(), k, T(1), nodes_[x].grad.ptr(), k);
      kern::gemm<T>(true, false, n, k, (int)rows, T(1), nd.grad.ptr(), n,
                    nodes_[x].val.ptr(), k, T(1), nodes_[w].grad.ptr(), k);
      if (bias >= 0) {
        auto& gb = nodes_[bias].grad;
        for (int64_t r = 0; r < rows; ++r)
          for (int j = 0; j < n; ++j) gb[j] += nd.grad[r * n + j];
      }
    });
  }

  // batched matmul: a [B,M,K] x b [B,K,N] -> [B,M,N]; optional transposes on
  // the per-batch matrices (shapes given pre-transpose).
  Var bmm(Var a, Var b, bool ta = false, bool tb = false, T alpha = T(1)) {
    const auto& av = nodes_[a].val;
    const auto& bv = nodes_[b].val;
    int B = av.shape[0];
    int m = ta ? av.shape[2] : av.shape[1];
    int k = ta ? av.shape[1] : av.shape[2];
    int kb = tb ? bv.shape[2] : bv.shape[1];
    int n = tb ? bv.shape[1] : bv.shape[2];
    if (bv.shape[0] != B || kb != k) throw std::runtime_error("bmm shape");
    Tensor<T> out({B, m, n});
    int64_t sa = (int64_t)av.shape[1] * av.shape[2];
    int64_t sb = (int64_t)bv.shape[1] * bv.shape[2];
    for (int i = 0; i < B; ++i)
      kern::gemm<T>(ta, tb, m, n, k, alpha, av.ptr() + i * sa, av.shape[2],
                    bv.ptr() + i * sb, bv.shape[2], T(0), out.ptr() + (int64_t)i * m * n, n);
    return push(std::move(out), [this, a, b, ta, tb, alpha, B, m, n, k, sa, sb](Node& nd) {
      const auto& av2 = nodes_[a].val;
      const auto& bv2 = nodes_[b].val;
      auto& ga = nodes_[a].grad;
      auto& gb = nodes_[b].grad;
      for (int i = 0; i < B; ++i) {
        const T* go = nd.grad.ptr() + (int64_t)i * m * n;
        const T* ap = av2.ptr() + i * sa;
        const T* bp = bv2.ptr() + i * sb;
        T* gap = ga.ptr() + i * sa;
        T* gbp = gb.ptr() + i * sb;
        int ldb = bv2.shape[2], lda = av2.shape[2];
        // dA: go (m,n); dA = go * B^T (m,k) with transposes handled per flag
        if (!ta) {
          kern::gemm<T>(false, !tb, m, k, n, alpha, go, n, bp, ldb, T(1), gap, lda);
        } else {
          kern::gemm<T>(tb, true, k, m, n, alpha, bp, ldb, go, n, T(1), gap, lda);
        }
        if (!tb) {
          kern::gemm<T>(!ta, false, k, n, m, alpha, ap, lda, go, n, T(1), gbp, ldb);
        } else {
          kern::gemm<T>(true, ta, n, k, m, alpha, go, n, ap, lda, T(1), gbp, ldb);
        }
      }
    });
  }

  // [B, Tok, H*D] -> [B*H, Tok, D]
  Var split_heads(Var x, int heads) {
    const auto& xv = nodes_[x].val;
    int B = xv.shape[0], t = xv.shape[1], d = xv.shape[2] / heads;
    Tensor<T> out({B * heads, t, d});
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < t; ++i)
        for (int h = 0; h < heads; ++h)
          std::memcpy(out.ptr() + (((int64_t)(b * heads + h) * t) + i) * d,
                      xv.ptr() + (((int64_t)b * t + i) * heads + h) * d,
                      sizeof(T) * d);
    return push(std::move(out), [this, x, heads, B, t, d](Node& nd) {
      auto& gx = nodes_[x].grad;
      for (int b = 0; b < B; ++b)
        for (int i = 0; i < t; ++i)
          for (int h = 0; h < heads; ++h) {
            const T* src = nd.grad.ptr() + (((int64_t)(b * heads + h) * t) + i) * d;
            T* dst = gx.ptr() + (((int64_t)b * t + i) * heads + h) * d;
            for (int j = 0; j < d; ++j) dst[j] += src[j];
          }
    });
  }

  Var merge_heads(Var x, int heads) {
    const auto& xv = nodes_[x].val;
    int BH = xv.shape[0], t = xv.shape[1], d = xv.shape[2];
    int B = BH / heads;
    Tensor<T> out({B, t, heads * d});
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < t; ++i)
        for (int h = 0; h < heads; ++h)
          std::memcpy(out.ptr() + (((int64_t)b * t + i) * heads + h) * d,
                      xv.ptr() + (((int64_t)(b * heads + h) * t) + i) * d,
                      sizeof(T) * d);
    return push(std::move(out), [this, x, heads, B, t, d](Node& nd) {
      auto& gx = nodes_[x].grad;
      for (int b = 0; b < B; ++b)
        for (int i = 0; i < t; ++i)
          for (int h = 0; h < heads; ++h) {
            const T* src = nd.grad.ptr() + (((int64_t)b * t + i) * heads + h) * d;
            T* dst = gx.ptr() + (((int64_t)(b * heads + h) * t) + i) * d;
            for (int j = 0; j < d; ++j) dst[j] += src[j];
          }
    });
  }

  // broadcast [T,D] over batch -> [B,T,D]
  Var broadcast_rows(Var e, int B) {
    const auto& ev = nodes_[e].val;
    int t = ev.shape[0], d = ev.shape[1];
    Tensor<T> out({B, t, d});
    for (int b = 0; b < B; ++b)
      std::memcpy(out.ptr() + (int64_t)b * t * d, ev.ptr(), sizeof(T) * t * d);
    return push(std::move(out), [this, e, B, t, d](Node& nd) {
      auto& ge = nodes_[e].grad;
      for (int b = 0; b < B; ++b)
        for (int64_t i = 0; i < (int64_t)t * d; ++i)
          ge[i] += nd.grad[(int64_t)b * t * d + i];
    });
  }

  // x [B,T,D] + e [T,D] broadcast over batch
  Var add_rows_broadcast(Var x, Var e) {
    const auto& xv = nodes_[x].val;
    const auto& ev = nodes_[e].val;
    int B = xv.shape[0];
    int64_t td = ev.numel();
    Tensor<T> out = xv;
    for (int b = 0; b < B; ++b)
      for (int64_t i = 0; i < td; ++i) out[(int64_t)b * td + i] += ev[i];
    return push(std::move(out), [this, x, e, B, td](Node& nd) {
      axpy(nodes_[x].grad, nd.grad, T(1));
      auto& ge = nodes_[e].grad;
      for (int b = 0; b < B; ++b)
        for (int64_t i = 0; i < td; ++i) ge[i] += nd.grad[(int64_t)b * td + i];
    });
  }

  Var slice_tokens(Var x, int t0, int t1) {
    const auto& xv = nodes_[x].val;
    int B = xv.shape[0], t = xv.shape[1], d = xv.shape[2];
    int nt = t1 - t0;
    Tensor<T> out({B, nt, d});
    for (int b = 0; b < B; ++b)
      std::memcpy(out.ptr() + (int64_t)b * nt * d,
                  xv.ptr() + ((int64_t)b * t + t0) * d, sizeof(T) * nt * d);
    return push(std::move(out), [this, x, t0, nt, B, t, d](Node& nd) {
      auto& gx = nodes_[x].grad;
      for (int b = 0; b < B; ++b) {
        const T* src = nd.grad.ptr() + (int64_t)b * nt * d;
        T* dst = gx.ptr() + ((int64_t)b * t + t0) * d;
        for (int64_t i = 0; i < (int64_t)nt * d; ++i) dst[i] += src[i];
      }
    });
  }

  Var concat_tokens(Var a, Var b) {
    const auto& av = nodes_[a].val;
    const auto& bv = nodes_[b].val;
    int B = av.shape[0], ta = av.shape[1], tb = bv.shape[1], d = av.shape[2];
    Tensor<T> out({B, ta + tb, d});
    for (int i = 0; i < B; ++i) {
      std::memcpy(out.ptr() + (int64_t)i * (ta + tb) * d,
                  av.ptr() + (int64_t)i * ta * d, sizeof(T) * ta * d);
      std::memcpy(out.ptr() + ((int64_t)i * (ta + tb) + ta) * d,
                  bv.ptr() + (int64_t)i * tb * d, sizeof(T) * tb * d);
    }
    return push(std::move(out), [this, a, b, B, ta, tb, d](Node& nd) {
      auto& ga = nodes_[a].grad;
      auto& gb = nodes_[b].grad;
      for (int i = 0; i < B; ++i) {
        const T* s1 = nd.grad.ptr() + (int64_t)i * (ta + tb) * d;
        const T* s2 = s1 + (int64_t)ta * d;
        T* d1 = ga.ptr() + (int64_t)i * ta * d;
        T* d2 = gb.ptr() + (int64_t)i * tb * d;
        for (int64_t j = 0; j < (int64_t)ta * d; ++j) d1[j] += s1[j];
        for (int64_t j = 0; j < (int64_t)tb * d; ++j) d2[j] += s2[j];
      }
    });
  }

  // concat along last (channel) dim; all same leading dims
  Var concat_lastdim(const std::vector<Var>& xs) {
    int64_t rows = nodes_[xs[0]].val.numel() / nodes_[xs[0]].val.shape.back();
    int ctot = 0;
    for (Var x : xs) ctot += nodes_[x].val.shape.back();
    std::vector<int> oshape = nodes_[xs[0]].val.shape;
    oshape.back() = ctot;
    Tensor<T> out(oshape);
    int off = 0;
    for (Var x : xs) {
      int c = nodes_[x].val.shape.back();
      const auto& xv = nodes_[x].val;
      for (int64_t r = 0; r < rows; ++r)
        std::memcpy(out.ptr() + r * ctot + off, xv.ptr() + r * c, sizeof(T) * c);
      off += c;
    }
    auto xs_copy = xs;
    return push(std::move(out), [this, xs_copy, rows, ctot](Node& nd) {
      int off2 = 0;
      for (Var x : xs_copy) {
        int c = nodes_[x].val.shape.back();
        auto& gx = nodes_[x].grad;
        for (int64_t r = 0; r < rows; ++r)
          for (int j = 0; j < c; ++j)
            gx[r * c + j] += nd.grad[r * ctot + off2 + j];
        off2 += c;
      }
    });
  }

  // ---- normalization / activations ----

  Var layernorm(Var x, Var gamma, Var beta, T eps = T(1e-5)) {
    const auto& xv = nodes_[x].val;
    int d = xv.shape.back();
    int64_t rows = xv.numel() / d;
    Tensor<T> out(xv.shape);
    Tensor<T> xhat(xv.shape);
    std::vector<T> inv_std((size_t)rows);
    const auto& gv = nodes_[gamma].val;
    const auto& bv = nodes_[beta].val;
    for (int64_t r = 0; r < rows; ++r) {
      const T* xp = xv.ptr() + r * d;
      T mean = 0;
      for (int j = 0; j < d; ++j) mean += xp[j];
      mean /= (T)d;
      T var = 0;
      for (int j = 0; j < d; ++j) var += (xp[j] - mean) * (xp[j] - mean);
      var /= (T)d;
      T is = T(1) / std::sqrt(var + eps);
      inv_std[(size_t)r] = is;
      T* hp = xhat.ptr() + r * d;
      T* op = out.ptr() + r * d;
      for (int j = 0; j < d; ++j) {
        hp[j] = (xp[j] - mean) * is;
        op[j] = hp[j] * gv[j] + bv[j];
      }
    }
    auto xhat_p = std::make_shared<Tensor<T>>(std::move(xhat));
    auto is_p = std::make_shared<std::vector<T>>(std::move(inv_std));
    return push(std::move(out), [this, x, gamma, beta, d, rows, xhat_p, is_p](Node& nd) {
      auto& gx = nodes_[x].grad;
      auto& gg = nodes_[gamma].grad;
      auto& gb = nodes_[beta].grad;
      const auto& gv2 = nodes_[gamma].val;
      for (int64_t r = 0; r < rows; ++r) {
        const T* go = nd.grad.ptr() + r * d;
        const T* hp = xhat_p->ptr() + r * d;
        T is = (*is_p)[(size_t)r];
        T sum_g = 0, sum_gh = 0;
        for (int j = 0; j < d; ++j) {
          T gj = go[j] * gv2[j];
          sum_g += gj;
          sum_gh += gj * hp[j];
          gg[j] += go[j] * hp[j];
          gb[j] += go[j];
        }
        T* gxp = gx.ptr() + r * d;
        for (int j = 0; j < d; ++j) {
          T gj = go[j] * gv2[j];
          gxp[j] += is * (gj - sum_g / (T)d - hp[j] * sum_gh / (T)d);
        }
      }
    });
  }

  Var softmax_lastdim(Var x) {
    const auto& xv = nodes_[x].val;
    int d = xv.shape.back();
    int64_t rows = xv.numel() / d;
    Tensor<T> out(xv.shape);
    for (int64_t r = 0; r < rows; ++r) {
      const T* xp = xv.ptr() + r * d;
      T* op = out.ptr() + r * d;
      T mx = xp[0];
      for (int j = 1; j < d; ++j) mx = std::max(mx, xp[j]);
      T sum = 0;
      for (int j = 0; j < d; ++j) {
        op[j] = std::exp(xp[j] - mx);
        sum += op[j];
      }
      for (int j = 0; j < d; ++j) op[j] /= sum;
    }
    return push(std::move(out), [this, x, d, rows](Node& nd) {
      auto& gx = nodes_[x].grad;
      for (int64_t r = 0; r < rows; ++r) {
        const T* p = nd.val.ptr() + r * d;
        const T* go = nd.grad.ptr() + r * d;
        T dot = 0;
        for (int j = 0; j < d; ++j) dot += p[j] * go[j];
        T* gxp = gx.ptr() + r * d;
        for (int j = 0; j < d; ++j) gxp[j] += p[j] * (go[j] - dot);
      }
    });
  }

  Var gelu(Var x) {
    const auto& xv = nodes_[x].val;
    Tensor<T> out(xv.shape);
    for (int64_t i = 0; i < xv.numel(); ++i) {
      T v = xv[i];
      out[i] = (T)(0.5 * (double)v * (1.0 + std::erf((double)v * M_SQRT1_2)));
    }
    return push(std::move(out), [this, x](Node& nd) {
      auto& gx = nodes_[x].grad;
      const auto& xv2 = nodes_[x].val;
      for (int64_t i = 0; i < xv2.numel(); ++i) {
        double v = (double)xv2[i];
        double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
        double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * M_PI);
        gx[i] += nd.grad[i] * (T)(cdf + v * pdf);
      }
    });
  }

  Var relu(Var x) {
    const auto& xv = nodes_[x].val;
    Tensor<T> out(xv.shape);
    for (int64_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
    return push(std::move(out), [this, x](Node& nd) {
      auto& gx = nodes_[x].grad;
      const auto& xv2 = nodes_[x].val;
      for (int64_t i = 0; i < xv2.numel(); ++i)
        if (xv2[i] > T(0)) gx[i] += nd.grad[i];
    });
  }

  // sigmoid followed by clamp to [lo, 1-lo]; zero gradient where clamped
  Var sigmoid_clamp(Var x, T lo) {
    const auto& xv = nodes_[x].val;
    Tensor<T> out(xv.shape);
    for (int64_t i = 0; i < xv.numel(); ++i) {
      T p = T(1) / (T(1) + std::exp(-xv[i]));
      out[i] = std::min(std::max(p, lo), T(1) - lo);
    }
    return push(std::move(out), [this, x, lo](Node& nd) {
      auto& gx = nodes_[x].grad;
      const auto& xv2 = nodes_[x].val;
      for (int64_t i = 0; i < xv2.numel(); ++i) {
        T p = T(1) / (T(1) + std::exp(-xv2[i]));
        if (p > lo && p < T(1) - lo) gx[i] += nd.grad[i] * p * (T(1) - p);
      }
    });
  }

  // -[p ln p + (1-p) ln(1-p)] elementwise; input assumed clamped away from {0,1}
  Var self_bce(Var p) {
    const auto& pv = nodes_[p].val;
    Tensor<T> out(pv.shape);
    for (int64_t i = 0; i < pv.numel(); ++i) {
      double q = (double)pv[i];
      out[i] = (T)(-(q * std::log(q) + (1.0 - q) * std::log(1.0 - q)));
    }
    return push(std::move(out), [this, p](Node& nd) {
      auto& gp = nodes_[p].grad;
      const auto& pv2 = nodes_[p].val;
      for (int64_t i = 0; i < pv2.numel(); ++i) {
        double q = (double)pv2[i];
        gp[i] += nd.grad[i] * (T)std::log((1.0 - q) / q);
      }
    });
  }

  // -[t ln p + (1-t) ln(1-p)] with constant target
  Var bce(Var p, const Tensor<T>& target) {
    const auto& pv = nodes_[p].val;
    Tensor<T> out(pv.shape);
    for (int64_t i = 0; i < pv.numel(); ++i) {
      double q = (double)pv[i], t = (double)target[i];
      out[i] = (T)(-(t * std::log(q) + (1.0 - t) * std::log(1.0 - q)));
    }
    auto tgt = std::make_shared<Tensor<T>>(target);
    return push(std::move(out), [this, p, tgt](Node& nd) {
      auto& gp = nodes_[p].grad;
      const auto& pv2 = nodes_[p].val;
      for (int64_t i = 0; i < pv2.numel(); ++i) {
        double q = (double)pv2[i], t = (double)(*tgt)[i];
        gp[i] += nd.grad[i] * (T)(-(t / q) + (1.0 - t) / (1.0 - q));
      }
    });
  }

  Var mean_all(Var x) {
    const auto& xv = nodes_[x].val;
    double acc = 0;
    for (int64_t i = 0; i < xv.numel(); ++i) acc += (double)xv[i];
    Tensor<T> out({1});
    out[0] = (T)(acc / (double)xv.numel());
    int64_t n = xv.numel();
    return push(std::move(out), [this, x, n](Node& nd) {
      T g = nd.grad[0] / (T)n;
      auto& gx = nodes_[x].grad;
      for (int64_t i = 0; i < n; ++i) gx[i] += g;
    });
  }

  // ---- conv / resampling ----

  // x [B,H,W,Ci], w [9*Ci,Co], bias [Co]
  Var conv3x3(Var x, Var w, Var bias) {
    const auto& xv = nodes_[x].val;
    const auto& wv = nodes_[w].val;
    int B = xv.shape[0], h = xv.shape[1], wd = xv.shape[2], ci = xv.shape[3];
    int co = wv.shape[1];
    Tensor<T> out({B, h, wd, co});
    std::vector<T> scratch;
    for (int b = 0; b < B; ++b)
      kern::conv3x3<T>(xv.ptr() + (int64_t)b * h * wd * ci, h, wd, ci, wv.ptr(),
                       bias >= 0 ? nodes_[bias].val.ptr() : nullptr, co,
                       out.ptr() + (int64_t)b * h * wd * co, scratch);
    return push(std::move(out), [this, x, w, bias, B, h, wd, ci, co](Node& nd) {
      std::vector<T> s1, s2;
      for (int b = 0; b < B; ++b)
        kern::conv3x3_backward<T>(
            nodes_[x].val.ptr() + (int64_t)b * h * wd * ci,
            nd.grad.ptr() + (int64_t)b * h * wd * co, h, wd, ci, co,
            nodes_[w].val.ptr(), nodes_[x].grad.ptr() + (int64_t)b * h * wd * ci,
            nodes_[w].grad.ptr(),
            bias >= 0 ? nodes_[bias].grad.ptr() : nullptr, s1, s2);
    });
  }

  // x [B,H,W,Ci], w [Ci,4*Co], bias [Co] -> [B,2H,2W,Co]
  Var conv_transpose2x2(Var x, Var w, Var bias) {
    const auto& xv = nodes_[x].val;
    const auto& wv = nodes_[w].val;
    int B = xv.shape[0], h = xv.shape[1], wd = xv.shape[2], ci = xv.shape[3];
    int co = wv.shape[1] / 4;
    Tensor<T> out({B, 2 * h, 2 * wd, co});
    std::vector<T> scratch;
    for (int b = 0; b < B; ++b)
      kern::conv_transpose2x2<T>(xv.ptr() + (int64_t)b * h * wd * ci, h, wd, ci,
                                 wv.ptr(),
                                 bias >= 0 ? nodes_[bias].val.ptr() : nullptr,
                                 co, out.ptr() + (int64_t)b * 4 * h * wd * co, scratch);
    return push(std::move(out), [this, x, w, bias, B, h, wd, ci, co](Node& nd) {
      std::vector<T> s;
      for (int b = 0; b < B; ++b)
        kern::conv_transpose2x2_backward<T>(
            nodes_[x].val.ptr() + (int64_t)b * h * wd * ci,
            nd.grad.ptr() + (int64_t)b * 4 * h * wd * co, h, wd, ci, co,
            nodes_[w].val.ptr(), nodes_[x].grad.ptr() + (int64_t)b * h * wd * ci,
            nodes_[w].grad.ptr(),
            bias >= 0 ? nodes_[bias].grad.ptr() : nullptr, s);
    });
  }

  Var bilinear_up2(Var x) {
    const auto& xv = nodes_[x].val;
    int B = xv.shape[0], h = xv.shape[1], wd = xv.shape[2], c = xv.shape[3];
    Tensor<T> out({B, 2 * h, 2 * wd, c});
    for (int b = 0; b < B; ++b)
      kern::bilinear_up2<T>(xv.ptr() + (int64_t)b * h * wd * c, h, wd, c,
                            out.ptr() + (int64_t)b * 4 * h * wd * c);
    return push(std::move(out), [this, x, B, h, wd, c](Node& nd) {
      for (int b = 0; b < B; ++b)
        kern::bilinear_up2_backward<T>(nd.grad.ptr() + (int64_t)b * 4 * h * wd * c,
                                       h, wd, c,
                                       nodes_[x].grad.ptr() + (int64_t)b * h * wd * c);
    });
  }

  // x [B,H,W,1] (or [B,H,W]); per-sample clipped-window mean
  Var box_mean(Var x, int h, int w, int eps) {
    const auto& xv = nodes_[x].val;
    int B = xv.shape[0];
    Tensor<T> out(xv.shape);
    for (int b = 0; b < B; ++b)
      kern::box_mean<T>(xv.ptr() + (int64_t)b * h * w, h, w, eps,
                        out.ptr() + (int64_t)b * h * w);
    return push(std::move(out), [this, x, B, h, w, eps](Node& nd) {
      for (int b = 0; b < B; ++b)
        kern::box_mean_backward<T>(nd.grad.ptr() + (int64_t)b * h * w, h, w, eps,
                                   nodes_[x].grad.ptr() + (int64_t)b * h * w);
    });
  }

  // feat [B,H,W,C] . vec [B,C] -> [B,H,W,1]
  Var channel_dot(Var feat, Var vec) {
    const auto& fv = nodes_[feat].val;
    const auto& vv = nodes_[vec].val;
    int B = fv.shape[0], h = fv.shape[1], w = fv.shape[2], c = fv.shape[3];
    Tensor<T> out({B, h, w, 1});
    for (int b = 0; b < B; ++b) {
      const T* vp = vv.ptr() + (int64_t)b * c;
      for (int p = 0; p < h * w; ++p) {
        const T* fp = fv.ptr() + ((int64_t)b * h * w + p) * c;
        T acc = 0;
        for (int j = 0; j < c; ++j) acc += fp[j] * vp[j];
        out[(int64_t)b * h * w + p] = acc;
      }
    }
    return push(std::move(out), [this, feat, vec, B, h, w, c](Node& nd) {
      auto& gf = nodes_[feat].grad;
      auto& gv = nodes_[vec].grad;
      const auto& fv2 = nodes_[feat].val;
      const auto& vv2 = nodes_[vec].val;
      for (int b = 0; b < B; ++b) {
        const T* vp = vv2.ptr() + (int64_t)b * c;
        T* gvp = gv.ptr() + (int64_t)b * c;
        for (int p = 0; p < h * w; ++p) {
          T g = nd.grad[(int64_t)b * h * w + p];
          const T* fp = fv2.ptr() + ((int64_t)b * h * w + p) * c;
          T* gfp = gf.ptr() + ((int64_t)b * h * w + p) * c;
          for (int j = 0; j < c; ++j) {
            gfp[j] += g * vp[j];
            gvp[j] += g * fp[j];
          }
        }
      }
    });
  }

  // gather per-sample flat pixel indices: x [B,H,W,1] -> [B,K]
  Var gather_points(Var x, const std::vector<std::vector<int>>& idx) {
    const auto& xv = nodes_[x].val;
    int B = xv.shape[0];
    int64_t hw = (int64_t)xv.shape[1] * xv.shape[2];
    int K = (int)idx[0].size();
    Tensor<T> out({B, K});
    for (int b = 0; b < B; ++b)
      for (int k = 0; k < K; ++k) out[(int64_t)b * K + k] = xv[b * hw + idx[b][k]];
    auto idx_p = std::make_shared<std::vector<std::vector<int>>>(idx);
    return push(std::move(out), [this, x, idx_p, B, hw, K](Node& nd) {
      auto& gx = nodes_[x].grad;
      for (int b = 0; b < B; ++b)
        for (int k = 0; k < K; ++k)
          gx[b * hw + (*idx_p)[b][k]] += nd.grad[(int64_t)b * K + k];
    });
  }

  void backward(Var loss) {
    if (nodes_[loss].val.numel() != 1) throw std::runtime_error("loss not scalar");
    nodes_[loss].grad[0] = T(1);
    for (int i = loss; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.back) n.back(n);
      if (n.pidx >= 0 && ps_ && ps_->at(n.pidx).trainable)
        axpy(ps_->at(n.pidx).grad, n.grad, T(1));
    }
  }

  size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> val;
    Tensor<T> grad;
    std::function<void(Node&)> back;
    int pidx = -1;
  };

  Var push(Tensor<T> v, std::function<void(Node&)> back, int pidx = -1) {
    Node n;
    n.grad = Tensor<T>(v.shape);
    n.val = std::move(v);
    n.back = std::move(back);
    n.pidx = pidx;
    nodes_.push_back(std::move(n));
    return (Var)nodes_.size() - 1;
  }

  void check_same(Var a, Var b) {
    if (nodes_[a].val.numel() != nodes_[b].val.numel())
      throw std::runtime_error("shape mismatch");
  }

  static void axpy(Tensor<T>& y, const Tensor<T>& x, T a) {
    for (int64_t i = 0; i < y.numel(); ++i) y[i] += a * x[i];
  }

  ParamStore<T>* ps_;
  std::vector<Node> nodes_;
};

}  // namespace plug
