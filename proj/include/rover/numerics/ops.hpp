#pragma once

// Differentiable operations recorded on a Tape. Shapes are explicit: the only
// broadcast is a row vector added to every row of a matrix (add_row).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rover/numerics/kernels.hpp"
#include "rover/numerics/tape.hpp"
#include "rover/numerics/tensor.hpp"

namespace rover::ops {

namespace detail {

inline void require_same(const Var& a, const Var& b, const char* op) {
  if (a.value().shape() != b.value().shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

inline void require_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw ContractError("operands live on different tapes");
}

inline void axpy(std::span<double> dst, std::span<const double> src, double alpha = 1.0) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += alpha * src[i];
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  detail::require_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (B.rank() != 2 || A.cols() != B.rows())
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(A.shape()) + " x " +
                         shape_str(B.shape()));
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  Tensor C({m, n});
  kernels::matmul(A.data().data(), B.data().data(), C.data().data(), m, k, n);
  return a.tape()->record(std::move(C), {a, b}, [a, b, m, k, n](Tape& t, const Tensor& g) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (Tensor* ga = t.grad_sink(a)) {
      // ga += g * B^T, through a transposed copy so the inner loop is contiguous.
      std::vector<double> bt(n * k);
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = B[p * n + j];
      double* gap = ga->data().data();
      const double* gp = g.data().data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double gv = gp[i * n + j];
          const double* brow = bt.data() + j * k;
          double* dst = gap + i * k;
          for (std::size_t p = 0; p < k; ++p) dst[p] += gv * brow[p];
        }
    }
    if (Tensor* gb = t.grad_sink(b)) {
      double* gbp = gb->data().data();
      const double* gp = g.data().data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          double* dst = gbp + p * n;
          const double* src = gp + i * n;
          for (std::size_t j = 0; j < n; ++j) dst[j] += av * src[j];
        }
    }
  });
}

// a (m x k) times b^T where b is (n x k).
inline Var matmul_nt(const Var& a, const Var& b) {
  detail::require_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.cols() != B.cols())
    throw DimensionError("matmul_nt: inner dimensions disagree, " + shape_str(A.shape()) + " x " +
                         shape_str(B.shape()) + "^T");
  const std::size_t m = A.rows(), k = A.cols(), n = B.rows();
  Tensor C({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += A[i * k + p] * B[j * k + p];
      C[i * n + j] = s;
    }
  return a.tape()->record(std::move(C), {a, b}, [a, b, m, k, n](Tape& t, const Tensor& g) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (Tensor* ga = t.grad_sink(a))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double gv = g[i * n + j];
          for (std::size_t p = 0; p < k; ++p) (*ga)[i * k + p] += gv * B[j * k + p];
        }
    if (Tensor* gb = t.grad_sink(b))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double gv = g[i * n + j];
          for (std::size_t p = 0; p < k; ++p) (*gb)[j * k + p] += gv * A[i * k + p];
        }
  });
}

inline Var add(const Var& a, const Var& b) {
  detail::require_tape(a, b);
  detail::require_same(a, b, "add");
  Tensor out = a.value();
  detail::axpy(out.data(), b.value().data());
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_sink(a)) detail::axpy(ga->data(), g.data());
    if (Tensor* gb = t.grad_sink(b)) detail::axpy(gb->data(), g.data());
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_tape(a, b);
  detail::require_same(a, b, "sub");
  Tensor out = a.value();
  detail::axpy(out.data(), b.value().data(), -1.0);
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_sink(a)) detail::axpy(ga->data(), g.data());
    if (Tensor* gb = t.grad_sink(b)) detail::axpy(gb->data(), g.data(), -1.0);
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_tape(a, b);
  detail::require_same(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * b.value()[i];
    if (Tensor* gb = t.grad_sink(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * a.value()[i];
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= s;
  return a.tape()->record(std::move(out), {a}, [a, s](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_sink(a)) detail::axpy(ga->data(), g.data(), s);
  });
}

inline Var add_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.data()) v += s;
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_sink(a)) detail::axpy(ga->data(), g.data());
  });
}

// a * s where s is a single-element Var.
inline Var scale_by(const Var& a, const Var& s) {
  detail::require_tape(a, s);
  if (s.value().size() != 1) throw DimensionError("scale_by: scalar expected, got " + shape_str(s.shape()));
  const double sv = s.value()[0];
  Tensor out = a.value();
  for (double& v : out.data()) v *= sv;
  return a.tape()->record(std::move(out), {a, s}, [a, s](Tape& t, const Tensor& g) {
    const double sv = s.value()[0];
    if (Tensor* ga = t.grad_sink(a)) detail::axpy(ga->data(), g.data(), sv);
    if (Tensor* gs = t.grad_sink(s)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * a.value()[i];
      (*gs)[0] += acc;
    }
  });
}

// matrix (m x n) + row (n) broadcast over rows.
inline Var add_row(const Var& a, const Var& row) {
  detail::require_tape(a, row);
  const std::size_t m = a.rows(), n = a.cols();
  if (row.value().size() != n)
    throw DimensionError("add_row: row " + shape_str(row.shape()) + " does not match " + shape_str(a.shape()));
  Tensor out = a.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += row.value()[j];
  return a.tape()->record(std::move(out), {a, row}, [a, row, m, n](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_sink(a)) detail::axpy(ga->data(), g.data());
    if (Tensor* gr = t.grad_sink(row))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*gr)[j] += g[i * n + j];
  });
}

inline Var row_softmax(const Var& x) {
  const std::size_t m = x.rows(), n = x.cols();
  auto y = std::make_shared<Tensor>(x.value().shape());
  for (std::size_t i = 0; i < m; ++i) kernels::softmax_row(x.value().row(i), y->row(i));
  Tensor out = *y;
  return x.tape()->record(std::move(out), {x}, [x, y, m, n](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_sink(x);
    if (!gx) return;
    const Tensor& Y = *y;
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * Y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) (*gx)[i * n + j] += Y[i * n + j] * (g[i * n + j] - dot);
    }
  });
}

// Mean of the selected rows, returned as a rank-1 tensor of width cols.
inline Var avg_pool_rows(const Var& x, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("avg_pool_rows: empty index set");
  const std::size_t n = x.rows(), d = x.cols();
  for (std::size_t r : indices)
    if (r >= n) throw ContractError("avg_pool_rows: index " + std::to_string(r) + " out of range " + std::to_string(n));
  Tensor out({d});
  for (std::size_t r : indices)
    for (std::size_t j = 0; j < d; ++j) out[j] += x.value()[r * d + j];
  const double inv = 1.0 / static_cast<double>(indices.size());
  for (double& v : out.data()) v *= inv;
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return x.tape()->record(std::move(out), {x}, [x, idx = std::move(idx), d, inv](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_sink(x))
      for (std::size_t r : idx)
        for (std::size_t j = 0; j < d; ++j) (*gx)[r * d + j] += inv * g[j];
  });
}

inline Var gather_rows(const Var& x, std::span<const std::size_t> indices) {
  const std::size_t n = x.rows(), d = x.cols();
  Tensor out({indices.size(), d});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= n) throw ContractError("gather_rows: index out of range");
    std::copy_n(x.value().data().data() + indices[i] * d, d, out.data().data() + i * d);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return x.tape()->record(std::move(out), {x}, [x, idx = std::move(idx), d](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_sink(x))
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) (*gx)[idx[i] * d + j] += g[i * d + j];
  });
}

struct RowRef {
  Var source;
  std::size_t row = 0;
};

// Builds a matrix whose i-th row is rows[i].source's row rows[i].row.
inline Var stack_rows(const std::vector<RowRef>& rows) {
  if (rows.empty()) throw ContractError("stack_rows: no rows");
  const std::size_t d = rows.front().source.cols();
  Tensor out({rows.size(), d});
  std::vector<Var> parents;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const RowRef& r = rows[i];
    if (r.source.cols() != d) throw DimensionError("stack_rows: width mismatch");
    if (r.row >= r.source.rows()) throw ContractError("stack_rows: row out of range");
    std::copy_n(r.source.value().data().data() + r.row * d, d, out.data().data() + i * d);
    if (std::none_of(parents.begin(), parents.end(), [&](const Var& p) { return p.id() == r.source.id(); }))
      parents.push_back(r.source);
  }
  Tape& tape = *rows.front().source.tape();
  return tape.record_many(std::move(out), parents, [rows, d](Tape& t, const Tensor& g) {
    for (std::size_t i = 0; i < rows.size(); ++i)
      if (Tensor* gs = t.grad_sink(rows[i].source))
        for (std::size_t j = 0; j < d; ++j) (*gs)[rows[i].row * d + j] += g[i * d + j];
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  std::vector<RowRef> rows;
  for (const Var& p : parts)
    for (std::size_t r = 0; r < p.rows(); ++r) rows.push_back({p, r});
  return stack_rows(rows);
}

inline Var slice_cols(const Var& x, std::size_t begin, std::size_t end) {
  const std::size_t m = x.rows(), n = x.cols();
  if (begin >= end || end > n) throw DimensionError("slice_cols: bad range");
  const std::size_t w = end - begin;
  Tensor out({m, w});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x.value()[i * n + begin + j];
  return x.tape()->record(std::move(out), {x}, [x, m, n, begin, w](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_sink(x))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) (*gx)[i * n + begin + j] += g[i * w + j];
  });
}

inline Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape()->record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_sink(x)) detail::axpy(gx->data(), g.data());
  });
}

inline Var gelu(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = kernels::gelu(v);
  return x.tape()->record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_sink(x))
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * kernels::gelu_grad(x.value()[i]);
  });
}

inline Var exp(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = std::exp(v);
  return x.tape()->record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_sink(x))
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * std::exp(x.value()[i]);
  });
}

inline Var log(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = std::log(v);
  return x.tape()->record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_sink(x))
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] / x.value()[i];
  });
}

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape()->record(Tensor({1}, s), {x}, [x](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_sink(x))
      for (double& v : gx->data()) v += g[0];
  });
}

inline Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

// Row-wise layer normalization with per-column gain and bias.
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias) {
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.value().size() != n || bias.value().size() != n)
    throw DimensionError("layer_norm: gain/bias width does not match " + shape_str(x.shape()));
  Tensor out(x.value().shape());
  std::vector<kernels::LayerNormStats> stats(m);
  for (std::size_t i = 0; i < m; ++i)
    stats[i] = kernels::layer_norm_row(x.value().row(i), gain.value().data(), bias.value().data(), out.row(i));
  Tape& tape = *x.tape();
  std::vector<Var> parents{x, gain, bias};
  return tape.record_many(std::move(out), parents, [x, gain, bias, m, n, stats = std::move(stats)](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_sink(x);
    Tensor* gg = t.grad_sink(gain);
    Tensor* gb = t.grad_sink(bias);
    std::vector<double> xhat(n), dxhat(n);
    for (std::size_t i = 0; i < m; ++i) {
      const auto& st = stats[i];
      double mean_d = 0.0, mean_dx = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        xhat[j] = (x.value()[i * n + j] - st.mean) * st.rstd;
        const double gj = g[i * n + j];
        if (gg) (*gg)[j] += gj * xhat[j];
        if (gb) (*gb)[j] += gj;
        dxhat[j] = gj * gain.value()[j];
        mean_d += dxhat[j];
        mean_dx += dxhat[j] * xhat[j];
      }
      if (!gx) continue;
      mean_d /= static_cast<double>(n);
      mean_dx /= static_cast<double>(n);
      for (std::size_t j = 0; j < n; ++j) (*gx)[i * n + j] += st.rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
    }
  });
}

// Fused causal multi-head self-attention over T positions. q, k, v are
// T x d; head h uses columns [h*d/heads, (h+1)*d/heads). Position i attends
// to positions 0..i.
inline Var causal_attention(const Var& q, const Var& k, const Var& v, std::size_t heads) {
  const std::size_t T = q.rows(), d = q.cols();
  if (k.value().shape() != q.value().shape() || v.value().shape() != q.value().shape())
    throw DimensionError("causal_attention: q/k/v shapes differ");
  if (heads == 0 || d % heads != 0) throw DimensionError("causal_attention: width not divisible by heads");
  const std::size_t w = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(w));
  Tensor out({T, d});
  // probs[h][i][j] for j <= i, stored densely as T x T per head.
  auto probs = std::make_shared<std::vector<double>>(heads * T * T, 0.0);
  const double* Q = q.value().data().data();
  const double* K = k.value().data().data();
  const double* V = v.value().data().data();
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < T; ++i) {
      std::span<double> wrow(probs->data() + (h * T + i) * T, T);
      kernels::attend_row({Q + i * d + h * w, w}, K, V, d, h * w, w, i + 1, scale, wrow,
                          {out.data().data() + i * d + h * w, w});
    }
  Tape& tape = *q.tape();
  std::vector<Var> parents{q, k, v};
  return tape.record_many(std::move(out), parents, [q, k, v, T, d, w, heads, scale, probs](Tape& t, const Tensor& g) {
    Tensor* gq = t.grad_sink(q);
    Tensor* gk = t.grad_sink(k);
    Tensor* gv = t.grad_sink(v);
    const Tensor& Q = q.value();
    const Tensor& K = k.value();
    const Tensor& V = v.value();
    std::vector<double> dp(T);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t c0 = h * w;
      for (std::size_t i = 0; i < T; ++i) {
        const double* P = probs->data() + (h * T + i) * T;
        const double* gi = g.data().data() + i * d + c0;
        double dot = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          double s = 0.0;
          const double* vj = V.data().data() + j * d + c0;
          for (std::size_t c = 0; c < w; ++c) s += gi[c] * vj[c];
          dp[j] = s;
          dot += P[j] * s;
          if (gv)
            for (std::size_t c = 0; c < w; ++c) (*gv)[j * d + c0 + c] += P[j] * gi[c];
        }
        for (std::size_t j = 0; j <= i; ++j) {
          const double ds = P[j] * (dp[j] - dot) * scale;
          if (ds == 0.0) continue;
          if (gq)
            for (std::size_t c = 0; c < w; ++c) (*gq)[i * d + c0 + c] += ds * K[j * d + c0 + c];
          if (gk)
            for (std::size_t c = 0; c < w; ++c) (*gk)[j * d + c0 + c] += ds * Q[i * d + c0 + c];
        }
      }
    }
  });
}

// Per-row log-probability of targets[i] under softmax(logits row i).
// Returns a rank-1 tensor of length rows.
inline Var log_softmax_pick(const Var& logits, std::span<const std::size_t> targets) {
  const std::size_t m = logits.rows(), n = logits.cols();
  if (targets.size() != m) throw DimensionError("log_softmax_pick: target count does not match rows");
  Tensor out({m});
  std::vector<double> lse(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] >= n) throw ContractError("log_softmax_pick: target id out of range");
    lse[i] = kernels::logsumexp_row(logits.value().row(i));
    out[i] = logits.value()[i * n + targets[i]] - lse[i];
  }
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  return logits.tape()->record(std::move(out), {logits},
                               [logits, tg = std::move(tg), lse = std::move(lse), m, n](Tape& t, const Tensor& g) {
                                 Tensor* gl = t.grad_sink(logits);
                                 if (!gl) return;
                                 for (std::size_t i = 0; i < m; ++i) {
                                   const double gi = g[i];
                                   if (gi == 0.0) continue;
                                   for (std::size_t j = 0; j < n; ++j)
                                     (*gl)[i * n + j] -= gi * std::exp(logits.value()[i * n + j] - lse[i]);
                                   (*gl)[i * n + tg[i]] += gi;
                                 }
                               });
}

}  // namespace rover::ops
