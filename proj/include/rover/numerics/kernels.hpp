#pragma once

// Row-level numeric kernels. The tape ops and the incremental decoder both
// call these so that a full-sequence pass and a one-row-at-a-time pass run
// the exact same floating-point operations in the same order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>

namespace rover::kernels {

inline constexpr double kLayerNormEps = 1e-5;

// out[0..n) = a[0..k) * B (k x n, row-major). Accumulates in ascending k.
inline void vec_mat(std::span<const double> a, const double* b, std::size_t n, std::span<double> out) {
  std::fill(out.begin(), out.end(), 0.0);
  const std::size_t k = a.size();
  for (std::size_t p = 0; p < k; ++p) {
    const double av = a[p];
    const double* brow = b + p * n;
    for (std::size_t j = 0; j < n; ++j) out[j] += av * brow[j];
  }
}

// C (m x n) = A (m x k) * B (k x n), row by row through vec_mat.
inline void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    vec_mat({a + i * k, k}, b, n, {c + i * n, n});
}

// Numerically stable softmax of one row.
inline void softmax_row(std::span<const double> x, std::span<double> out) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : x) mx = std::max(mx, v);
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - mx);
    sum += out[i];
  }
  const double inv = 1.0 / sum;
  for (std::size_t i = 0; i < x.size(); ++i) out[i] *= inv;
}

// log-sum-exp of a row (max-shifted).
inline double logsumexp_row(std::span<const double> x) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : x) mx = std::max(mx, v);
  double sum = 0.0;
  for (double v : x) sum += std::exp(v - mx);
  return mx + std::log(sum);
}

inline double log_softmax_at(std::span<const double> logits, std::size_t index) {
  return logits[index] - logsumexp_row(logits);
}

struct LayerNormStats {
  double mean = 0.0;
  double rstd = 0.0;
};

inline LayerNormStats layer_norm_row(std::span<const double> x, std::span<const double> gain,
                                     std::span<const double> bias, std::span<double> out) {
  const std::size_t n = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
  for (std::size_t i = 0; i < n; ++i) out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
  return {mean, rstd};
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

// One causal attention row for one head: query q attends to keys/values at
// rows [0, count) of K and V. Head columns are [col, col + width) with row
// stride `stride`. `weights` receives the softmax row (length count).
inline void attend_row(std::span<const double> q, const double* k, const double* v, std::size_t stride,
                       std::size_t col, std::size_t width, std::size_t count, double scale,
                       std::span<double> weights, std::span<double> out) {
  for (std::size_t j = 0; j < count; ++j) {
    const double* kr = k + j * stride + col;
    double s = 0.0;
    for (std::size_t c = 0; c < width; ++c) s += q[c] * kr[c];
    weights[j] = s * scale;
  }
  softmax_row(weights.first(count), weights.first(count));
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t j = 0; j < count; ++j) {
    const double w = weights[j];
    const double* vr = v + j * stride + col;
    for (std::size_t c = 0; c < width; ++c) out[c] += w * vr[c];
  }
}

}  // namespace rover::kernels
