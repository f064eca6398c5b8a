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

#pragma once

#include "tirnu/tensor.hpp"

namespace tirnu {

struct JacobiOptions {
  int max_sweeps = 100;
  double rel_tolerance = 1e-12;     // on the off-diagonal Frobenius norm
  double symmetry_tolerance = 1e-10;
  double negative_clamp = 1e-10;    // |lambda| below this is rounding noise
  std::size_t max_dim = 1024;
};

/// Eigen-decomposition A = V diag(values) V^T. Values are sorted descending
/// and column j of `vectors` pairs with values[j].
struct SymEigen {
  std::vector<double> values;
  Tensor vectors;
};

namespace detail {

inline double frobenius(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return std::sqrt(s);
}

inline double off_diagonal_norm(const Tensor& a) {
  double s = 0.0;
  const std::size_t n = a.rows();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) s += a(i, j) * a(i, j);
  return std::sqrt(s);
}

}  // namespace detail

/// Cyclic Jacobi rotations for a symmetric matrix. Small negative
/// eigenvalues (|lambda| < negative_clamp) are clamped to zero; larger ones
/// are reported as an error since only PSD Gram matrices are expected.
inline SymEigen sym_eigen(const Tensor& input, const JacobiOptions& opt = {}) {
  if (input.rank() != 2 || input.rows() != input.cols())
    throw ShapeError("sym_eigen needs a square matrix, got " + to_string(input.shape()));
  const std::size_t n = input.rows();
  if (n > opt.max_dim) throw ShapeError("sym_eigen: matrix larger than supported size");
  require_finite(input, "sym_eigen input");

  const double norm = detail::frobenius(input);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(input(i, j) - input(j, i)) > opt.symmetry_tolerance * std::max(1.0, norm))
        throw Error("sym_eigen: matrix is not symmetric");

  Tensor a = input;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) a(i, j) = a(j, i) = 0.5 * (input(i, j) + input(j, i));
  Tensor v = Tensor::identity(n);

  const double target = opt.rel_tolerance * norm;
  bool converged = detail::off_diagonal_norm(a) <= target;
  for (int sweep = 0; sweep < opt.max_sweeps && !converged; ++sweep) {
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = a(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
    converged = detail::off_diagonal_norm(a) <= target;
  }
  if (!converged) throw ConvergenceError("sym_eigen: Jacobi sweeps did not converge");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });

  SymEigen out{std::vector<double>(n), Tensor(Shape{n, n})};
  for (std::size_t j = 0; j < n; ++j) {
    double lambda = a(order[j], order[j]);
    if (lambda < 0.0) {
      if (-lambda >= opt.negative_clamp)
        throw NumericError("sym_eigen: negative eigenvalue " + std::to_string(lambda) +
                           " in a matrix expected to be PSD");
      lambda = 0.0;
    }
    out.values[j] = lambda;
    for (std::size_t k = 0; k < n; ++k) out.vectors(k, j) = v(k, order[j]);
  }
  return out;
}

inline std::vector<double> sym_eigenvalues(const Tensor& a, const JacobiOptions& opt = {}) {
  return sym_eigen(a, opt).values;
}

}  // namespace tirnu
