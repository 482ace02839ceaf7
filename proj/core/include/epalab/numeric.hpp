#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

namespace epalab {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();
inline constexpr double kPosInf = std::numeric_limits<double>::infinity();

// The -inf reward sentinel marks responses outside the finite support.
inline bool is_neg_inf(double v) noexcept { return std::isinf(v) && v < 0; }

// log(sum(exp(v))). Returns -inf for an empty input or when every entry is -inf.
inline double log_sum_exp(std::span<const double> v) noexcept {
  double m = kNegInf;
  for (double x : v) m = std::max(m, x);
  if (is_neg_inf(m)) return kNegInf;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline std::vector<double> log_softmax(std::span<const double> v) {
  const double lse = log_sum_exp(v);
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    out[i] = is_neg_inf(v[i]) ? kNegInf : v[i] - lse;
  return out;
}

inline std::vector<double> softmax(std::span<const double> v) {
  auto out = log_softmax(v);
  for (double& x : out) x = is_neg_inf(x) ? 0.0 : std::exp(x);
  return out;
}

inline double sigmoid(double x) noexcept {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(sigmoid(x)) without overflow for large |x|.
inline double log_sigmoid(double x) noexcept {
  if (x >= 0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

inline double max_abs(std::span<const double> v) noexcept {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

}  // namespace epalab
