#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <limits>
#include <stdexcept>
#include <vector>

#include "erlab/tensor.hpp"

namespace erlab::ad {

namespace detail {

using erlab::detail::TensorImpl;
using erlab::detail::ensure_grad;

// c[m,n] (+)= a[m,k] @ b[k,n]
inline void gemm_nn(const float* a, const float* b, float* c, int m, int k, int n, bool acc) {
  for (int i = 0; i < m; ++i) {
    float* crow = c + size_t(i) * n;
    if (!acc) std::fill(crow, crow + n, 0.f);
    const float* arow = a + size_t(i) * k;
    for (int l = 0; l < k; ++l) {
      const float av = arow[l];
      const float* brow = b + size_t(l) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,n] (+)= a[m,k] @ b[n,k]^T
inline void gemm_nt(const float* a, const float* b, float* c, int m, int k, int n, bool acc) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + size_t(i) * k;
    float* crow = c + size_t(i) * n;
    for (int j = 0; j < n; ++j) {
      const float* brow = b + size_t(j) * k;
      float s = 0.f;
#pragma omp simd reduction(+ : s)
      for (int l = 0; l < k; ++l) s += arow[l] * brow[l];
      crow[j] = acc ? crow[j] + s : s;
    }
  }
}

// c[m,n] (+)= a[k,m]^T @ b[k,n]
inline void gemm_tn(const float* a, const float* b, float* c, int m, int k, int n, bool acc) {
  if (!acc) std::fill(c, c + size_t(m) * n, 0.f);
  for (int l = 0; l < k; ++l) {
    const float* arow = a + size_t(l) * m;
    const float* brow = b + size_t(l) * n;
    for (int i = 0; i < m; ++i) {
      const float av = arow[i];
      float* crow = c + size_t(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// Records one backward rule per forward op, in execution order. A tape and
// the tensors recorded on it are confined to a single thread.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::shared_ptr<detail::TensorImpl> output, std::function<void()> backward_fn) {
    entries_.push_back({std::move(output), std::move(backward_fn)});
  }

  // Fills grad of every requires_grad tensor reachable from `loss` with
  // d loss / d tensor. Leaf grads accumulate across calls until zeroed;
  // grads of tensors produced on this tape are reset each call.
  void backward(const Tensor& loss) {
    if (loss.numel() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                  shape_str(loss.shape()));
    if (entries_.empty()) throw std::logic_error("backward: tape is empty");
    bool found = false;
    for (auto& e : entries_) {
      detail::ensure_grad(*e.output);
      std::fill(e.output->grad.begin(), e.output->grad.end(), 0.f);
      if (e.output == loss.impl()) found = true;
    }
    if (!found) throw std::logic_error("backward: loss was not produced on this tape");
    loss.impl()->grad[0] = 1.f;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->fn();
  }

  size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  void clear() { entries_.clear(); }

 private:
  struct Entry {
    std::shared_ptr<detail::TensorImpl> output;
    std::function<void()> fn;
  };
  std::vector<Entry> entries_;
};

namespace detail {

inline bool tracked(Tape* tape, std::initializer_list<const Tensor*> inputs) {
  if (!tape) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

inline Tensor finish(Tape* tape, Tensor out, std::initializer_list<const Tensor*> inputs,
                     std::function<void()> backward_fn) {
  if (tracked(tape, inputs)) {
    out.set_requires_grad(true);
    tape->record(out.impl(), std::move(backward_fn));
  }
  return out;
}

[[noreturn]] inline void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) +
                              " and " + shape_str(b.shape()));
}

inline void require_rank2(const char* op, const Tensor& t) {
  if (t.rank() != 2)
    throw std::invalid_argument(std::string(op) + ": expected a matrix, got shape " +
                                shape_str(t.shape()));
}

}  // namespace detail

inline Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
  detail::require_rank2("matmul", a);
  detail::require_rank2("matmul", b);
  if (a.dim(1) != b.dim(0)) detail::shape_error("matmul", a, b);
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  detail::gemm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n, false);
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  return detail::finish(tape, out, {&a, &b}, [ai, bi, oi, m, k, n] {
    const float* g = oi->grad.data();
    if (ai->requires_grad) {
      detail::ensure_grad(*ai);
      detail::gemm_nt(g, bi->data.data(), ai->grad.data(), m, n, k, true);
    }
    if (bi->requires_grad) {
      detail::ensure_grad(*bi);
      detail::gemm_tn(ai->data.data(), g, bi->grad.data(), k, m, n, true);
    }
  });
}

// a @ b^T for b stored row-major [n, k]
inline Tensor matmul_nt(Tape* tape, const Tensor& a, const Tensor& b) {
  detail::require_rank2("matmul_nt", a);
  detail::require_rank2("matmul_nt", b);
  if (a.dim(1) != b.dim(1)) detail::shape_error("matmul_nt", a, b);
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor out = Tensor::zeros({m, n});
  detail::gemm_nt(a.data().data(), b.data().data(), out.data().data(), m, k, n, false);
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  return detail::finish(tape, out, {&a, &b}, [ai, bi, oi, m, k, n] {
    const float* g = oi->grad.data();
    if (ai->requires_grad) {
      detail::ensure_grad(*ai);
      detail::gemm_nn(g, bi->data.data(), ai->grad.data(), m, n, k, true);
    }
    if (bi->requires_grad) {
      detail::ensure_grad(*bi);
      detail::gemm_tn(g, ai->data.data(), bi->grad.data(), n, m, k, true);
    }
  });
}

namespace detail {

enum class Broadcast { none, scalar_rhs, scalar_lhs, row_rhs };

inline Broadcast broadcast_mode(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Broadcast::none;
  if (b.numel() == 1) return Broadcast::scalar_rhs;
  if (a.numel() == 1) return Broadcast::scalar_lhs;
  if (a.rank() == 2 && b.rank() == 1 && b.dim(0) == a.dim(1)) return Broadcast::row_rhs;
  shape_error(op, a, b);
}

}  // namespace detail

inline Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
  const auto mode = detail::broadcast_mode("add", a, b);
  const bool swap = mode == detail::Broadcast::scalar_lhs;
  const Tensor& big = swap ? b : a;
  const Tensor& small = swap ? a : b;
  Tensor out = Tensor::zeros(big.shape());
  auto od = out.data();
  auto xd = big.data();
  if (mode == detail::Broadcast::none) {
    auto yd = small.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = xd[i] + yd[i];
  } else if (mode == detail::Broadcast::row_rhs) {
    const int m = big.dim(0), n = big.dim(1);
    auto yd = small.data();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) od[size_t(i) * n + j] = xd[size_t(i) * n + j] + yd[size_t(j)];
  } else {
    const float s = small.data()[0];
    for (size_t i = 0; i < od.size(); ++i) od[i] = xd[i] + s;
  }
  auto bigi = big.impl(), smalli = small.impl(), oi = out.impl();
  return detail::finish(tape, out, {&a, &b}, [bigi, smalli, oi, mode] {
    const auto& g = oi->grad;
    if (bigi->requires_grad) {
      detail::ensure_grad(*bigi);
      for (size_t i = 0; i < g.size(); ++i) bigi->grad[i] += g[i];
    }
    if (smalli->requires_grad) {
      detail::ensure_grad(*smalli);
      if (mode == detail::Broadcast::none) {
        for (size_t i = 0; i < g.size(); ++i) smalli->grad[i] += g[i];
      } else if (mode == detail::Broadcast::row_rhs) {
        const size_t n = smalli->data.size();
        for (size_t i = 0; i < g.size(); ++i) smalli->grad[i % n] += g[i];
      } else {
        float s = 0.f;
        for (float v : g) s += v;
        smalli->grad[0] += s;
      }
    }
  });
}

inline Tensor sub(Tape* tape, const Tensor& a, const Tensor& b) {
  const auto mode = detail::broadcast_mode("sub", a, b);
  if (mode == detail::Broadcast::scalar_lhs)
    throw std::invalid_argument("sub: scalar minuend with tensor subtrahend is not supported, shapes " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
  Tensor out = Tensor::zeros(a.shape());
  auto od = out.data();
  auto xd = a.data();
  auto yd = b.data();
  if (mode == detail::Broadcast::none) {
    for (size_t i = 0; i < od.size(); ++i) od[i] = xd[i] - yd[i];
  } else if (mode == detail::Broadcast::row_rhs) {
    const int m = a.dim(0), n = a.dim(1);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) od[size_t(i) * n + j] = xd[size_t(i) * n + j] - yd[size_t(j)];
  } else {
    const float s = yd[0];
    for (size_t i = 0; i < od.size(); ++i) od[i] = xd[i] - s;
  }
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  return detail::finish(tape, out, {&a, &b}, [ai, bi, oi, mode] {
    const auto& g = oi->grad;
    if (ai->requires_grad) {
      detail::ensure_grad(*ai);
      for (size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i];
    }
    if (bi->requires_grad) {
      detail::ensure_grad(*bi);
      if (mode == detail::Broadcast::none) {
        for (size_t i = 0; i < g.size(); ++i) bi->grad[i] -= g[i];
      } else if (mode == detail::Broadcast::row_rhs) {
        const size_t n = bi->data.size();
        for (size_t i = 0; i < g.size(); ++i) bi->grad[i % n] -= g[i];
      } else {
        float s = 0.f;
        for (float v : g) s += v;
        bi->grad[0] -= s;
      }
    }
  });
}

// Elementwise product; either side may be a scalar.
inline Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
  const auto mode = detail::broadcast_mode("mul", a, b);
  if (mode == detail::Broadcast::row_rhs) detail::shape_error("mul", a, b);
  const bool swap = mode == detail::Broadcast::scalar_lhs;
  const Tensor& big = swap ? b : a;
  const Tensor& small = swap ? a : b;
  Tensor out = Tensor::zeros(big.shape());
  auto od = out.data();
  auto xd = big.data();
  if (mode == detail::Broadcast::none) {
    auto yd = small.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = xd[i] * yd[i];
  } else {
    const float s = small.data()[0];
    for (size_t i = 0; i < od.size(); ++i) od[i] = xd[i] * s;
  }
  auto bigi = big.impl(), smalli = small.impl(), oi = out.impl();
  const bool elementwise = mode == detail::Broadcast::none;
  return detail::finish(tape, out, {&a, &b}, [bigi, smalli, oi, elementwise] {
    const auto& g = oi->grad;
    if (bigi->requires_grad) {
      detail::ensure_grad(*bigi);
      if (elementwise)
        for (size_t i = 0; i < g.size(); ++i) bigi->grad[i] += g[i] * smalli->data[i];
      else {
        const float s = smalli->data[0];
        for (size_t i = 0; i < g.size(); ++i) bigi->grad[i] += g[i] * s;
      }
    }
    if (smalli->requires_grad) {
      detail::ensure_grad(*smalli);
      if (elementwise)
        for (size_t i = 0; i < g.size(); ++i) smalli->grad[i] += g[i] * bigi->data[i];
      else {
        float s = 0.f;
        for (size_t i = 0; i < g.size(); ++i) s += g[i] * bigi->data[i];
        smalli->grad[0] += s;
      }
    }
  });
}

inline Tensor scale(Tape* tape, const Tensor& a, float c) {
  Tensor out = Tensor::zeros(a.shape());
  auto od = out.data();
  auto xd = a.data();
  for (size_t i = 0; i < od.size(); ++i) od[i] = xd[i] * c;
  auto ai = a.impl(), oi = out.impl();
  return detail::finish(tape, out, {&a}, [ai, oi, c] {
    if (!ai->requires_grad) return;
    detail::ensure_grad(*ai);
    for (size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i] * c;
  });
}

inline Tensor neg(Tape* tape, const Tensor& a) { return scale(tape, a, -1.f); }

namespace detail {

template <class Fwd, class Bwd>
Tensor unary_op(Tape* tape, const Tensor& a, Fwd fwd, Bwd dydx_from_in_out) {
  Tensor out = Tensor::zeros(a.shape());
  auto od = out.data();
  auto xd = a.data();
  for (size_t i = 0; i < od.size(); ++i) od[i] = fwd(xd[i]);
  auto ai = a.impl(), oi = out.impl();
  return finish(tape, out, {&a}, [ai, oi, dydx_from_in_out] {
    if (!ai->requires_grad) return;
    ensure_grad(*ai);
    for (size_t i = 0; i < oi->grad.size(); ++i)
      ai->grad[i] += oi->grad[i] * dydx_from_in_out(ai->data[i], oi->data[i]);
  });
}

}  // namespace detail

inline Tensor sigmoid(Tape* tape, const Tensor& a) {
  return detail::unary_op(
      tape, a, [](float x) { return x >= 0.f ? 1.f / (1.f + std::exp(-x)) : std::exp(x) / (1.f + std::exp(x)); },
      [](float, float y) { return y * (1.f - y); });
}

inline Tensor tanh_op(Tape* tape, const Tensor& a) {
  return detail::unary_op(tape, a, [](float x) { return std::tanh(x); },
                          [](float, float y) { return 1.f - y * y; });
}

inline Tensor exp_op(Tape* tape, const Tensor& a) {
  return detail::unary_op(tape, a, [](float x) { return std::exp(x); },
                          [](float, float y) { return y; });
}

inline Tensor log_op(Tape* tape, const Tensor& a) {
  return detail::unary_op(tape, a, [](float x) { return std::log(x); },
                          [](float x, float) { return 1.f / x; });
}

// log(1 + e^x), evaluated without overflow
inline Tensor softplus(Tape* tape, const Tensor& a) {
  return detail::unary_op(
      tape, a,
      [](float x) { return x > 0.f ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](float x, float) { return x >= 0.f ? 1.f / (1.f + std::exp(-x)) : std::exp(x) / (1.f + std::exp(x)); });
}

namespace detail {
constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
}

// tanh-approximation GELU
inline Tensor gelu(Tape* tape, const Tensor& a) {
  return detail::unary_op(
      tape, a,
      [](float x) {
        const float t = std::tanh(detail::kGeluC * (x + 0.044715f * x * x * x));
        return 0.5f * x * (1.f + t);
      },
      [](float x, float) {
        const float u = detail::kGeluC * (x + 0.044715f * x * x * x);
        const float t = std::tanh(u);
        const float du = detail::kGeluC * (1.f + 3.f * 0.044715f * x * x);
        return 0.5f * (1.f + t) + 0.5f * x * (1.f - t * t) * du;
      });
}

namespace detail {

// rows of `x` softmaxed over columns [0, limit(i)]; entries past the limit are zero
template <class Limit>
Tensor softmax_impl(Tape* tape, const Tensor& x, Limit limit) {
  require_rank2("softmax", x);
  const int m = x.dim(0), n = x.dim(1);
  Tensor out = Tensor::zeros({m, n});
  auto od = out.data();
  auto xd = x.data();
  for (int i = 0; i < m; ++i) {
    const int hi = limit(i);
    const float* row = xd.data() + size_t(i) * n;
    float* orow = od.data() + size_t(i) * n;
    float mx = -std::numeric_limits<float>::infinity();
    for (int j = 0; j <= hi; ++j) mx = std::max(mx, row[j]);
    float sum = 0.f;
    for (int j = 0; j <= hi; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    const float inv = 1.f / sum;
    for (int j = 0; j <= hi; ++j) orow[j] *= inv;
  }
  auto xi = x.impl(), oi = out.impl();
  return finish(tape, out, {&x}, [xi, oi, m, n, limit] {
    if (!xi->requires_grad) return;
    ensure_grad(*xi);
    for (int i = 0; i < m; ++i) {
      const int hi = limit(i);
      const float* y = oi->data.data() + size_t(i) * n;
      const float* gy = oi->grad.data() + size_t(i) * n;
      float* gx = xi->grad.data() + size_t(i) * n;
      float dot = 0.f;
      for (int j = 0; j <= hi; ++j) dot += gy[j] * y[j];
      for (int j = 0; j <= hi; ++j) gx[j] += y[j] * (gy[j] - dot);
    }
  });
}

}  // namespace detail

inline Tensor softmax_rows(Tape* tape, const Tensor& x) {
  const int n = x.rank() == 2 ? x.dim(1) : 0;
  return detail::softmax_impl(tape, x, [n](int) { return n - 1; });
}

// row i attends to columns <= i
inline Tensor causal_softmax(Tape* tape, const Tensor& x) {
  detail::require_rank2("causal_softmax", x);
  if (x.dim(0) != x.dim(1))
    throw std::invalid_argument("causal_softmax: expected square scores, got shape " +
                                shape_str(x.shape()));
  return detail::softmax_impl(tape, x, [](int i) { return i; });
}

inline Tensor log_softmax_rows(Tape* tape, const Tensor& x) {
  detail::require_rank2("log_softmax", x);
  const int m = x.dim(0), n = x.dim(1);
  Tensor out = Tensor::zeros({m, n});
  auto od = out.data();
  auto xd = x.data();
  for (int i = 0; i < m; ++i) {
    const float* row = xd.data() + size_t(i) * n;
    float* orow = od.data() + size_t(i) * n;
    float mx = -std::numeric_limits<float>::infinity();
    for (int j = 0; j < n; ++j) mx = std::max(mx, row[j]);
    float sum = 0.f;
    for (int j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
    const float lse = mx + std::log(sum);
    for (int j = 0; j < n; ++j) orow[j] = row[j] - lse;
  }
  auto xi = x.impl(), oi = out.impl();
  return detail::finish(tape, out, {&x}, [xi, oi, m, n] {
    if (!xi->requires_grad) return;
    detail::ensure_grad(*xi);
    for (int i = 0; i < m; ++i) {
      const float* y = oi->data.data() + size_t(i) * n;
      const float* gy = oi->grad.data() + size_t(i) * n;
      float* gx = xi->grad.data() + size_t(i) * n;
      float gsum = 0.f;
      for (int j = 0; j < n; ++j) gsum += gy[j];
      for (int j = 0; j < n; ++j) gx[j] += gy[j] - std::exp(y[j]) * gsum;
    }
  });
}

// row-wise layernorm with learned gain/bias
inline Tensor layernorm(Tape* tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        float eps = 1e-5f) {
  detail::require_rank2("layernorm", x);
  const int m = x.dim(0), n = x.dim(1);
  if (gamma.rank() != 1 || gamma.dim(0) != n) detail::shape_error("layernorm", x, gamma);
  if (beta.rank() != 1 || beta.dim(0) != n) detail::shape_error("layernorm", x, beta);
  Tensor out = Tensor::zeros({m, n});
  std::vector<float> xhat(size_t(m) * n, 0.f);
  std::vector<float> rstd(size_t(m), 0.f);
  auto od = out.data();
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  for (int i = 0; i < m; ++i) {
    const float* row = xd.data() + size_t(i) * n;
    float mean = 0.f;
    for (int j = 0; j < n; ++j) mean += row[j];
    mean /= float(n);
    float var = 0.f;
    for (int j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= float(n);
    const float rs = 1.f / std::sqrt(var + eps);
    rstd[size_t(i)] = rs;
    for (int j = 0; j < n; ++j) {
      const float xh = (row[j] - mean) * rs;
      xhat[size_t(i) * n + j] = xh;
      od[size_t(i) * n + j] = xh * gd[size_t(j)] + bd[size_t(j)];
    }
  }
  auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl();
  return detail::finish(tape, out, {&x, &gamma, &beta},
                        [xi, gi, bi, oi, m, n, xhat = std::move(xhat), rstd = std::move(rstd)] {
    for (int i = 0; i < m; ++i) {
      const float* gy = oi->grad.data() + size_t(i) * n;
      const float* xh = xhat.data() + size_t(i) * n;
      if (gi->requires_grad) {
        detail::ensure_grad(*gi);
        for (int j = 0; j < n; ++j) gi->grad[size_t(j)] += gy[j] * xh[j];
      }
      if (bi->requires_grad) {
        detail::ensure_grad(*bi);
        for (int j = 0; j < n; ++j) bi->grad[size_t(j)] += gy[j];
      }
      if (xi->requires_grad) {
        detail::ensure_grad(*xi);
        float* gx = xi->grad.data() + size_t(i) * n;
        float sum_dxhat = 0.f, sum_dxhat_xhat = 0.f;
        for (int j = 0; j < n; ++j) {
          const float dxh = gy[j] * gi->data[size_t(j)];
          sum_dxhat += dxh;
          sum_dxhat_xhat += dxh * xh[j];
        }
        const float inv_n = 1.f / float(n);
        for (int j = 0; j < n; ++j) {
          const float dxh = gy[j] * gi->data[size_t(j)];
          gx[j] += rstd[size_t(i)] * (dxh - inv_n * sum_dxhat - xh[j] * inv_n * sum_dxhat_xhat);
        }
      }
    }
  });
}

// rows of `table` selected by token id
inline Tensor embedding(Tape* tape, const Tensor& table, std::span<const int> ids) {
  detail::require_rank2("embedding", table);
  const int v = table.dim(0), d = table.dim(1);
  const int t = int(ids.size());
  if (t == 0) throw std::invalid_argument("embedding: empty id sequence");
  for (int id : ids)
    if (id < 0 || id >= v)
      throw std::invalid_argument("embedding: id " + std::to_string(id) +
                                  " out of range for table " + shape_str(table.shape()));
  Tensor out = Tensor::zeros({t, d});
  auto od = out.data();
  auto td = table.data();
  for (int i = 0; i < t; ++i)
    std::memcpy(od.data() + size_t(i) * d, td.data() + size_t(ids[size_t(i)]) * d,
                size_t(d) * sizeof(float));
  auto ti = table.impl(), oi = out.impl();
  std::vector<int> ids_copy(ids.begin(), ids.end());
  return detail::finish(tape, out, {&table}, [ti, oi, d, ids_copy = std::move(ids_copy)] {
    if (!ti->requires_grad) return;
    detail::ensure_grad(*ti);
    for (size_t i = 0; i < ids_copy.size(); ++i) {
      const float* g = oi->grad.data() + i * size_t(d);
      float* dst = ti->grad.data() + size_t(ids_copy[i]) * d;
      for (int j = 0; j < d; ++j) dst[j] += g[j];
    }
  });
}

inline Tensor gather_rows(Tape* tape, const Tensor& x, std::span<const int> rows) {
  return embedding(tape, x, rows);
}

// y[i] = x[i, cols[i]]
inline Tensor gather_elems(Tape* tape, const Tensor& x, std::span<const int> cols) {
  detail::require_rank2("gather_elems", x);
  const int m = x.dim(0), n = x.dim(1);
  if (int(cols.size()) != m)
    throw std::invalid_argument("gather_elems: need one column per row, got " +
                                std::to_string(cols.size()) + " for " + shape_str(x.shape()));
  for (int c : cols)
    if (c < 0 || c >= n)
      throw std::invalid_argument("gather_elems: column " + std::to_string(c) +
                                  " out of range for " + shape_str(x.shape()));
  Tensor out = Tensor::zeros({m});
  auto od = out.data();
  auto xd = x.data();
  for (int i = 0; i < m; ++i) od[size_t(i)] = xd[size_t(i) * n + cols[size_t(i)]];
  auto xi = x.impl(), oi = out.impl();
  std::vector<int> cols_copy(cols.begin(), cols.end());
  return detail::finish(tape, out, {&x}, [xi, oi, n, cols_copy = std::move(cols_copy)] {
    if (!xi->requires_grad) return;
    detail::ensure_grad(*xi);
    for (size_t i = 0; i < cols_copy.size(); ++i)
      xi->grad[i * size_t(n) + size_t(cols_copy[i])] += oi->grad[i];
  });
}

inline Tensor slice_cols(Tape* tape, const Tensor& x, int c0, int c1) {
  detail::require_rank2("slice_cols", x);
  const int m = x.dim(0), n = x.dim(1);
  if (c0 < 0 || c1 > n || c0 >= c1)
    throw std::invalid_argument("slice_cols: range [" + std::to_string(c0) + ", " +
                                std::to_string(c1) + ") invalid for " + shape_str(x.shape()));
  const int w = c1 - c0;
  Tensor out = Tensor::zeros({m, w});
  auto od = out.data();
  auto xd = x.data();
  for (int i = 0; i < m; ++i)
    std::memcpy(od.data() + size_t(i) * w, xd.data() + size_t(i) * n + c0, size_t(w) * sizeof(float));
  auto xi = x.impl(), oi = out.impl();
  return detail::finish(tape, out, {&x}, [xi, oi, m, n, c0, w] {
    if (!xi->requires_grad) return;
    detail::ensure_grad(*xi);
    for (int i = 0; i < m; ++i) {
      const float* g = oi->grad.data() + size_t(i) * w;
      float* dst = xi->grad.data() + size_t(i) * n + c0;
      for (int j = 0; j < w; ++j) dst[j] += g[j];
    }
  });
}

inline Tensor concat_cols(Tape* tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const int m = parts[0].dim(0);
  int n = 0;
  for (const Tensor& p : parts) {
    detail::require_rank2("concat_cols", p);
    if (p.dim(0) != m) detail::shape_error("concat_cols", parts[0], p);
    n += p.dim(1);
  }
  Tensor out = Tensor::zeros({m, n});
  auto od = out.data();
  int off = 0;
  for (const Tensor& p : parts) {
    const int w = p.dim(1);
    auto pd = p.data();
    for (int i = 0; i < m; ++i)
      std::memcpy(od.data() + size_t(i) * n + off, pd.data() + size_t(i) * w,
                  size_t(w) * sizeof(float));
    off += w;
  }
  bool any = false;
  for (const Tensor& p : parts) any = any || p.requires_grad();
  if (!tape || !any) return out;
  out.set_requires_grad(true);
  std::vector<std::shared_ptr<detail::TensorImpl>> impls;
  impls.reserve(parts.size());
  for (const Tensor& p : parts) impls.push_back(p.impl());
  auto oi = out.impl();
  tape->record(oi, [impls = std::move(impls), oi, m, n] {
    int off = 0;
    for (auto& pi : impls) {
      const int w = pi->shape[1];
      if (pi->requires_grad) {
        detail::ensure_grad(*pi);
        for (int i = 0; i < m; ++i) {
          const float* g = oi->grad.data() + size_t(i) * n + off;
          float* dst = pi->grad.data() + size_t(i) * w;
          for (int j = 0; j < w; ++j) dst[j] += g[j];
        }
      }
      off += w;
    }
  });
  return out;
}

inline Tensor sum_all(Tape* tape, const Tensor& x) {
  float s = 0.f;
  for (float v : x.data()) s += v;
  Tensor out = Tensor::scalar(s);
  auto xi = x.impl(), oi = out.impl();
  return detail::finish(tape, out, {&x}, [xi, oi] {
    if (!xi->requires_grad) return;
    detail::ensure_grad(*xi);
    const float g = oi->grad[0];
    for (float& v : xi->grad) v += g;
  });
}

inline Tensor mean_all(Tape* tape, const Tensor& x) {
  const float inv = 1.f / float(x.numel());
  float s = 0.f;
  for (float v : x.data()) s += v;
  Tensor out = Tensor::scalar(s * inv);
  auto xi = x.impl(), oi = out.impl();
  return detail::finish(tape, out, {&x}, [xi, oi, inv] {
    if (!xi->requires_grad) return;
    detail::ensure_grad(*xi);
    const float g = oi->grad[0] * inv;
    for (float& v : xi->grad) v += g;
  });
}

// population standard deviation over all elements; zero-spread inputs get zero grad
inline Tensor std_all(Tape* tape, const Tensor& x) {
  const int64_t n = x.numel();
  const float inv = 1.f / float(n);
  float mean = 0.f;
  for (float v : x.data()) mean += v;
  mean *= inv;
  float var = 0.f;
  for (float v : x.data()) var += (v - mean) * (v - mean);
  var *= inv;
  const float sd = std::sqrt(var);
  Tensor out = Tensor::scalar(sd);
  auto xi = x.impl(), oi = out.impl();
  return detail::finish(tape, out, {&x}, [xi, oi, mean, sd, inv] {
    if (!xi->requires_grad || sd == 0.f) return;
    detail::ensure_grad(*xi);
    const float g = oi->grad[0] * inv / sd;
    for (size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += g * (xi->data[i] - mean);
  });
}

inline Tensor minimum(Tape* tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) detail::shape_error("minimum", a, b);
  Tensor out = Tensor::zeros(a.shape());
  auto od = out.data();
  auto xd = a.data();
  auto yd = b.data();
  for (size_t i = 0; i < od.size(); ++i) od[i] = std::min(xd[i], yd[i]);
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  return detail::finish(tape, out, {&a, &b}, [ai, bi, oi] {
    // ties route to the first argument
    for (size_t i = 0; i < oi->grad.size(); ++i) {
      const bool first = ai->data[i] <= bi->data[i];
      auto& t = first ? *ai : *bi;
      if (t.requires_grad) {
        detail::ensure_grad(t);
        t.grad[i] += oi->grad[i];
      }
    }
  });
}

inline Tensor clamp(Tape* tape, const Tensor& x, float lo, float hi) {
  Tensor out = Tensor::zeros(x.shape());
  auto od = out.data();
  auto xd = x.data();
  for (size_t i = 0; i < od.size(); ++i) od[i] = std::min(std::max(xd[i], lo), hi);
  auto xi = x.impl(), oi = out.impl();
  return detail::finish(tape, out, {&x}, [xi, oi, lo, hi] {
    if (!xi->requires_grad) return;
    detail::ensure_grad(*xi);
    for (size_t i = 0; i < oi->grad.size(); ++i)
      if (xi->data[i] > lo && xi->data[i] < hi) xi->grad[i] += oi->grad[i];
  });
}

// Max over coordinates of |analytic - numeric| / (|analytic| + |numeric| + eps),
// with numeric gradients from central differences of step h.
inline double grad_check(const std::function<Tensor(Tape*, const Tensor&)>& f, Tensor x, float h,
                         double eps = 1e-8) {
  if (h <= 0.f) throw std::invalid_argument("grad_check: step must be positive");
  x.set_requires_grad(true);
  x.zero_grad();
  Tape tape;
  Tensor loss = f(&tape, x);
  tape.backward(loss);
  std::vector<float> analytic(x.grad().begin(), x.grad().end());

  double worst = 0.0;
  auto xd = x.data();
  for (size_t i = 0; i < xd.size(); ++i) {
    const float saved = xd[i];
    const float xp = saved + h;
    const float xm = saved - h;
    xd[i] = xp;
    const double fp = f(nullptr, x).item();
    xd[i] = xm;
    const double fm = f(nullptr, x).item();
    xd[i] = saved;
    // divide by the step actually realized after f32 rounding of x +- h
    const double numeric = (fp - fm) / (double(xp) - double(xm));
    const double a = double(analytic[i]);
    const double err = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + eps);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace erlab::ad
