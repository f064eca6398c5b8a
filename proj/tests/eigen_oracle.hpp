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

// Entropy oracles computed with Eigen's self-adjoint solver, independent of
// the Jacobi path used by the library.

#pragma once

#include <Eigen/Dense>

#include "tirnu/tensor.hpp"

namespace tirnu::testing {

inline Eigen::MatrixXd to_eigen(const Tensor& a) {
  Eigen::MatrixXd m(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) m(i, j) = a(i, j);
  return m;
}

inline Eigen::VectorXd oracle_eigenvalues(const Tensor& a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(to_eigen(a), Eigen::EigenvaluesOnly);
  return solver.eigenvalues();
}

inline double oracle_renyi(const Tensor& a, double alpha) {
  const Eigen::VectorXd ev = oracle_eigenvalues(a);
  double s = 0.0;
  for (double l : ev)
    if (l > 1e-13) s += std::pow(l, alpha);
  return std::log2(s) / (1.0 - alpha);
}

inline double oracle_shannon(const Tensor& a) {
  const Eigen::VectorXd ev = oracle_eigenvalues(a);
  double h = 0.0;
  for (double l : ev)
    if (l > 1e-13) h -= l * std::log2(l);
  return h;
}

/// exp(-d^2 / (2 sigma2)) Gram normalized by its trace, built directly.
inline Tensor oracle_normalized_gram(const Tensor& z, double sigma2) {
  const std::size_t b = z.rows();
  Tensor k(Shape{b, b});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) {
      double d2 = 0.0;
      for (std::size_t c = 0; c < z.cols(); ++c) d2 += (z(i, c) - z(j, c)) * (z(i, c) - z(j, c));
      k(i, j) = std::exp(-d2 / (2.0 * sigma2)) / static_cast<double>(b);
    }
  return k;
}

inline Tensor hadamard_normalized(const Tensor& a, const Tensor& b) {
  Tensor h = a;
  double tr = 0.0;
  for (std::size_t i = 0; i < h.size(); ++i) h[i] *= b[i];
  for (std::size_t i = 0; i < h.rows(); ++i) tr += h(i, i);
  for (double& v : h.data()) v /= tr;
  return h;
}

}  // namespace tirnu::testing
