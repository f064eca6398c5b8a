// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

// Welch's unequal-variance t-test with a hand-rolled Student-t tail.

#pragma once

#include <limits>

#include "tirnu/tensor.hpp"

namespace tirnu {

namespace detail {

/// Continued fraction for the incomplete beta function (modified Lentz).
inline double beta_continued_fraction(double a, double b, double x) {
  constexpr double tiny = 1e-300;
  constexpr double tol = 1e-12;
  constexpr int max_iter = 10000;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= max_iter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < tol) return h;
  }
  throw ConvergenceError("incomplete beta continued fraction did not converge");
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw Error("incomplete_beta: a and b must be positive");
  if (!(x >= 0.0 && x <= 1.0)) throw Error("incomplete_beta: x must be in [0, 1]");
  if (x == 0.0 || x == 1.0) return x;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                           b * std::log1p(-x);
  // The fraction converges fast for x below the mean; use the symmetry
  // relation above it.
  if (x < (a + 1.0) / (a + b + 2.0)) return std::exp(log_front) * detail::beta_continued_fraction(a, b, x) / a;
  return 1.0 - std::exp(log_front) * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

/// P(T > t) for Student's t with `df` degrees of freedom.
inline double student_t_sf(double t, double df) {
  if (!(df > 0.0)) throw Error("student_t_sf: df must be positive");
  if (std::isnan(t)) throw NumericError("student_t_sf: t is NaN");
  if (std::isinf(t)) return t > 0 ? 0.0 : 1.0;
  const double tail = 0.5 * incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
  return t > 0.0 ? tail : 1.0 - tail;
}

/// Direction of the one-sided alternative: `greater` tests mean_a > mean_b.
enum class Alternative { greater, less };

struct SampleSummary {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation (n - 1 denominator)
  std::size_t n = 0;
};

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p = 0.0;  // one-sided
};

inline SampleSummary summarize(std::span<const double> xs) {
  SampleSummary s;
  s.n = xs.size();
  if (s.n == 0) return s;
  s.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(s.n);
  if (s.n > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.sd = std::sqrt(ss / static_cast<double>(s.n - 1));
  }
  return s;
}

inline WelchResult welch_t_test(const SampleSummary& a, const SampleSummary& b,
                                Alternative alt = Alternative::greater) {
  if (a.n < 2 || b.n < 2) throw Error("welch_t_test: each sample needs at least 2 observations");
  if (!(a.sd >= 0.0) || !(b.sd >= 0.0)) throw Error("welch_t_test: standard deviations must be >= 0");
  const double na = static_cast<double>(a.n), nb = static_cast<double>(b.n);
  const double va = a.sd * a.sd / na, vb = b.sd * b.sd / nb;
  const double se2 = va + vb;
  const double sign = alt == Alternative::greater ? 1.0 : -1.0;
  const double diff = sign * (a.mean - b.mean);
  WelchResult r;
  if (se2 == 0.0) {
    // No spread at all: the direction of the difference decides outright.
    r.df = na + nb - 2.0;
    if (diff == 0.0) {
      r.t = 0.0;
      r.p = 0.5;
    } else {
      r.t = sign * std::copysign(std::numeric_limits<double>::infinity(), diff);
      r.p = diff > 0.0 ? 0.0 : 1.0;
    }
    return r;
  }
  r.t = (a.mean - b.mean) / std::sqrt(se2);
  r.df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
  r.p = student_t_sf(sign * r.t, r.df);
  return r;
}

inline WelchResult welch_t_test(std::span<const double> a, std::span<const double> b,
                                Alternative alt = Alternative::greater) {
  return welch_t_test(summarize(a), summarize(b), alt);
}

}  // namespace tirnu
