#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "pepo/errors.hpp"

// Scalar kernels shared by the shaping and analysis code. All inputs are
// plain spans of doubles; outputs are freshly allocated vectors.
namespace pepo::numerics {

namespace detail {
inline void require_finite(std::span<const double> x, const char* who) {
  for (double v : x) {
    if (!std::isfinite(v)) throw std::invalid_argument(std::string(who) + ": non-finite input");
  }
}
inline void require_nonempty(std::span<const double> x, const char* who) {
  if (x.empty()) throw std::invalid_argument(std::string(who) + ": empty input");
}
}  // namespace detail

inline double dot(std::span<const double> u, std::span<const double> v) {
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
  return s;
}

inline double norm2(std::span<const double> u) { return std::sqrt(dot(u, u)); }

/// <u,v> / (|u| |v|). Throws DegenerateInputError when either norm is zero.
inline double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size() || u.empty()) {
    throw std::invalid_argument("cosine_similarity: vectors must have equal nonzero length");
  }
  const double nu = norm2(u);
  const double nv = norm2(v);
  if (!(nu > 0.0) || !(nv > 0.0)) {
    throw DegenerateInputError("cosine_similarity: zero-norm input");
  }
  const double c = dot(u, v) / (nu * nv);
  return std::clamp(c, -1.0, 1.0);
}

inline double l1_distance(std::span<const double> u, std::span<const double> v) {
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) s += std::abs(u[i] - v[i]);
  return s;
}

inline double l2_distance(std::span<const double> u, std::span<const double> v) {
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double d = u[i] - v[i];
    s += d * d;
  }
  return std::sqrt(s);
}

inline double max_value(std::span<const double> x) { return *std::max_element(x.begin(), x.end()); }
inline double min_value(std::span<const double> x) { return *std::min_element(x.begin(), x.end()); }

inline double mean(std::span<const double> x) {
  detail::require_nonempty(x, "mean");
  double s = 0.0;
  for (double v : x) s += v;
  return s / static_cast<double>(x.size());
}

inline double log_sum_exp(std::span<const double> x) {
  detail::require_nonempty(x, "log_sum_exp");
  const double m = max_value(x);
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

/// Softmax with max subtraction. Shift-invariant bit for bit: the shift is
/// removed before exponentiation.
inline std::vector<double> stable_softmax(std::span<const double> x) {
  detail::require_nonempty(x, "stable_softmax");
  detail::require_finite(x, "stable_softmax");
  const double m = max_value(x);
  std::vector<double> out(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - m);
    s += out[i];
  }
  for (double& v : out) v /= s;
  return out;
}

inline std::vector<double> log_softmax(std::span<const double> x) {
  const double lse = log_sum_exp(x);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - lse;
  return out;
}

/// Shannon entropy in nats with 0 log 0 = 0.
inline double entropy(std::span<const double> p) {
  detail::require_nonempty(p, "entropy");
  double total = 0.0;
  for (double v : p) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("entropy: negative or non-finite probability");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("entropy: probabilities do not sum to 1");
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

/// Maps x affinely onto [0, 1]; a constant input maps to 0.5 everywhere.
inline std::vector<double> minmax_normalize(std::span<const double> x) {
  detail::require_nonempty(x, "minmax_normalize");
  detail::require_finite(x, "minmax_normalize");
  const double lo = min_value(x);
  const double hi = max_value(x);
  std::vector<double> out(x.size(), 0.5);
  if (hi > lo) {
    const double range = hi - lo;
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::clamp((x[i] - lo) / range, 0.0, 1.0);
  }
  return out;
}

inline std::vector<double> mean_center(std::span<const double> x) {
  detail::require_finite(x, "mean_center");
  const double m = mean(x);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - m;
  return out;
}

}  // namespace pepo::numerics
