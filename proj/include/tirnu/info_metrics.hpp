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

// Matrix-based Renyi alpha-order entropy functionals on Gaussian Gram
// matrices of a mini-batch, and the mutual information built from them.
// Entropies are in bits.

#pragma once

#include <limits>
#include <numbers>

#include "tirnu/linalg.hpp"
#include "tirnu/ops.hpp"

namespace tirnu {

struct EntropyConfig {
  double alpha = 1.01;
  int k = 10;
  double sigma2_floor = 1e-8;

  void validate() const {
    if (!(alpha > 0.0) || alpha == 1.0) throw Error("entropy alpha must be > 0 and != 1");
    if (k < 1) throw Error("entropy k must be a positive integer");
    if (!(sigma2_floor > 0.0)) throw Error("sigma2_floor must be positive");
  }
};

/// Mean over rows of the average of the k smallest squared distances to the
/// other rows, floored. Returned as a plain number: the width is never
/// differentiated.
inline double kernel_width(const Tensor& z, int k, double floor = 1e-8) {
  const std::size_t b = z.rows(), d = z.cols();
  if (k < 1) throw Error("kernel_width: k must be >= 1");
  if (b <= static_cast<std::size_t>(k))
    throw ShapeError("kernel_width: batch of " + std::to_string(b) + " rows needs more than k=" +
                     std::to_string(k) + " samples");
  const auto kk = static_cast<std::size_t>(k);
  std::vector<double> dist(b - 1);
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t n = 0;
    for (std::size_t j = 0; j < b; ++j) {
      if (j == i) continue;
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = z(i, c) - z(j, c);
        s += diff * diff;
      }
      dist[n++] = s;
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(kk), dist.end());
    double row = 0.0;
    for (std::size_t m = 0; m < kk; ++m) row += dist[m];
    total += row / static_cast<double>(kk);
  }
  return std::max(total / static_cast<double>(b), floor);
}

/// K(i,j) = exp(-|z_i - z_j|^2 / (2 sigma2)); diagonal is exactly 1.
inline Var gaussian_gram(Var z, double sigma2) {
  if (!(sigma2 > 0.0)) throw Error("gaussian_gram: sigma2 must be positive");
  const Tensor& zv = z.value();
  require_finite(zv, "gram features");
  const std::size_t b = zv.rows(), d = zv.cols();
  Tensor k(Shape{b, b});
  for (std::size_t i = 0; i < b; ++i) {
    k(i, i) = 1.0;
    for (std::size_t j = i + 1; j < b; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = zv(i, c) - zv(j, c);
        s += diff * diff;
      }
      k(i, j) = k(j, i) = std::exp(-s / (2.0 * sigma2));
    }
  }
  const std::size_t iz = z.id();
  return z.tape()->record(std::move(k), {z}, [iz, sigma2](Tape& t, std::size_t self) {
    if (!t.needs_grad(iz)) return;
    const Tensor& zv = t.value(iz);
    const Tensor& kv = t.value(self);
    auto g = t.adjoint(self);
    auto gz = t.accumulator(iz);
    const std::size_t b = zv.rows(), d = zv.cols();
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < b; ++j) {
        if (i == j) continue;
        const double w = (g[i * b + j] + g[j * b + i]) * kv(i, j) / sigma2;
        if (w == 0.0) continue;
        for (std::size_t c = 0; c < d; ++c) gz[i * d + c] -= w * (zv(i, c) - zv(j, c));
      }
  }, "gaussian_gram");
}

/// X / trace(X).
inline Var trace_normalize(Var x) {
  const Tensor& xv = x.value();
  const double tr = trace(xv);
  if (!(tr > 0.0)) throw NumericError("trace_normalize: non-positive trace");
  Tensor out = xv;
  for (double& v : out.data()) v /= tr;
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(out), {x}, [ix, tr](Tape& t, std::size_t self) {
    if (!t.needs_grad(ix)) return;
    const Tensor& xv = t.value(ix);
    auto g = t.adjoint(self);
    auto gx = t.accumulator(ix);
    double inner = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) inner += g[i] * xv[i];
    const std::size_t n = xv.rows();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / tr;
    for (std::size_t i = 0; i < n; ++i) gx[i * n + i] -= inner / (tr * tr);
  }, "trace_normalize");
}

namespace detail {

/// Eigenvalues at or below this fraction of the largest one are rounding
/// noise of a PSD matrix and are treated as exact zeros.
inline double eigen_noise_floor(const std::vector<double>& values) {
  const double top = values.empty() ? 0.0 : values.front();
  return static_cast<double>(values.size()) * 4.0 * std::numeric_limits<double>::epsilon() * top;
}

}  // namespace detail

/// H_alpha(A) = log2(sum_j lambda_j^alpha) / (1 - alpha) for a unit-trace
/// PSD matrix. The gradient is alpha A^(alpha-1) / ((1-alpha) ln2 tr(A^alpha)),
/// with A^(alpha-1) rebuilt from the eigendecomposition.
inline Var renyi_entropy(Var a, double alpha) {
  if (!(alpha > 0.0) || alpha == 1.0) throw Error("renyi_entropy: alpha must be > 0 and != 1");
  const Tensor& av = a.value();
  if (av.rank() != 2 || av.rows() != av.cols()) throw ShapeError("renyi_entropy: square matrix");
  if (std::abs(trace(av) - 1.0) > 1e-9)
    throw Error("renyi_entropy: matrix trace must be 1, got " + std::to_string(trace(av)));

  SymEigen eig = sym_eigen(av);
  const double noise = detail::eigen_noise_floor(eig.values);
  // tr(A^alpha) - 1 = sum_j lambda_j (lambda_j^(alpha-1) - 1) + (tr(A) - 1).
  // Summing the small differences keeps precision when alpha is near 1,
  // where 1/(1-alpha) magnifies any rounding in tr(A^alpha).
  double excess = trace(av) - 1.0;
  for (double& l : eig.values) {
    if (l <= noise) l = 0.0;
    if (l > 0.0) excess += l * std::expm1((alpha - 1.0) * std::log(l));
  }
  const double s = 1.0 + excess;
  const double h = std::log1p(excess) / ((1.0 - alpha) * std::numbers::ln2);
  const std::size_t ia = a.id();
  return a.tape()->record(
      Tensor::scalar(h), {a},
      [ia, alpha, s, eig = std::move(eig)](Tape& t, std::size_t self) {
        if (!t.needs_grad(ia)) return;
        const double factor =
            t.adjoint(self)[0] * alpha / ((1.0 - alpha) * std::numbers::ln2 * s);
        const std::size_t n = eig.vectors.rows();
        std::vector<double> w(n);
        for (std::size_t j = 0; j < n; ++j)
          w[j] = eig.values[j] > 0.0 ? factor * std::pow(eig.values[j], alpha - 1.0) : 0.0;
        auto ga = t.accumulator(ia);
        const Tensor& v = eig.vectors;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k < n; ++k) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += v(i, j) * w[j] * v(k, j);
            ga[i * n + k] += acc;
          }
      },
      "renyi_entropy");
}

/// H_alpha of the trace-normalized Hadamard product of two normalized Grams.
inline Var joint_entropy(Var a_z, Var a_n, double alpha) {
  if (a_z.shape() != a_n.shape()) throw ShapeError("joint_entropy: Gram size mismatch");
  return renyi_entropy(trace_normalize(mul(a_z, a_n)), alpha);
}

struct GramMatrix {
  Tensor kernel;
  double sigma2 = 0.0;
  Tensor normalized;
};

inline GramMatrix gram(const Tensor& z, double sigma2) {
  Tape tape;
  Var k = gaussian_gram(tape.constant(z), sigma2);
  Var a = trace_normalize(k);
  return GramMatrix{k.value(), sigma2, a.value()};
}

inline double renyi_entropy(const Tensor& a, double alpha) {
  Tape tape;
  return renyi_entropy(tape.constant(a), alpha).value().item();
}

inline double joint_entropy(const Tensor& a_z, const Tensor& a_n, double alpha) {
  Tape tape;
  return joint_entropy(tape.constant(a_z), tape.constant(a_n), alpha).value().item();
}

/// I_alpha(z; n) together with its parts. `value` carries the gradient.
struct MutualInformation {
  Var value;
  double h_z = 0.0;
  double h_n = 0.0;
  double h_joint = 0.0;
  double sigma2_z = 0.0;
  double sigma2_n = 0.0;
};

/// Kernel widths for the two variables. Computing them once and passing them
/// back in lets callers evaluate the objective at perturbed inputs with the
/// widths held fixed.
struct KernelWidths {
  double z = 0.0;
  double n = 0.0;
};

namespace detail {

inline bool all_ones(const Tensor& k) {
  return std::all_of(k.data().begin(), k.data().end(), [](double v) { return v == 1.0; });
}

}  // namespace detail

/// I_alpha(z; n) = H(A_z) + H(A_n) - H(A_z, A_n); rows of z and n are paired.
/// When either Gram is constant (all rows identical) the variable carries no
/// information, and the estimate is exactly 0 with zero gradient.
inline MutualInformation mutual_information(Var z, Var n, const EntropyConfig& cfg,
                                            std::optional<KernelWidths> widths = std::nullopt) {
  cfg.validate();
  if (z.value().rows() != n.value().rows())
    throw ShapeError("mutual_information: z and n must have the same number of rows");
  MutualInformation mi;
  if (widths) {
    mi.sigma2_z = widths->z;
    mi.sigma2_n = widths->n;
  } else {
    mi.sigma2_z = kernel_width(z.value(), cfg.k, cfg.sigma2_floor);
    mi.sigma2_n = kernel_width(n.value(), cfg.k, cfg.sigma2_floor);
  }
  Var k_z = gaussian_gram(z, mi.sigma2_z);
  Var k_n = gaussian_gram(n, mi.sigma2_n);
  Var a_z = trace_normalize(k_z);
  Var a_n = trace_normalize(k_n);
  Var h_z = renyi_entropy(a_z, cfg.alpha);
  Var h_n = renyi_entropy(a_n, cfg.alpha);
  Var h_joint = joint_entropy(a_z, a_n, cfg.alpha);
  mi.h_z = h_z.value().item();
  mi.h_n = h_n.value().item();
  mi.h_joint = h_joint.value().item();
  if (detail::all_ones(k_z.value()) || detail::all_ones(k_n.value())) {
    mi.value = z.tape()->constant(Tensor::scalar(0.0));
  } else {
    mi.value = sub(add(h_z, h_n), h_joint);
  }
  return mi;
}

inline double mutual_information(const Tensor& z, const Tensor& n, const EntropyConfig& cfg) {
  Tape tape;
  return mutual_information(tape.constant(z), tape.constant(n), cfg).value.value().item();
}

/// n_i = z_i - (1/M) sum_j z'_j,i, accumulated as the mean of the per-replica
/// differences so identical replicas give exactly zero.
inline Var nuisance_vectors(Var z, std::span<const Var> z_aug) {
  if (z_aug.empty()) throw ShapeError("nuisance_vectors: need at least one augmented replica");
  Var acc;
  for (const Var& za : z_aug) {
    if (za.shape() != z.shape()) throw ShapeError("nuisance_vectors: replica shape mismatch");
    Var diff = sub(z, za);
    acc = acc.valid() ? add(acc, diff) : diff;
  }
  return scale(acc, 1.0 / static_cast<double>(z_aug.size()));
}

/// Plain version with z_aug of shape M x B x d.
inline Tensor nuisance_vectors(const Tensor& z, const Tensor& z_aug) {
  z.require_rank(2);
  z_aug.require_rank(3);
  const std::size_t m = z_aug.dim(0), b = z.rows(), d = z.cols();
  if (z_aug.dim(1) != b || z_aug.dim(2) != d)
    throw ShapeError("nuisance_vectors: expected replicas of shape " + to_string(z.shape()));
  Tape tape;
  std::vector<Var> reps;
  reps.reserve(m);
  for (std::size_t j = 0; j < m; ++j) {
    std::vector<double> slice(z_aug.data().begin() + static_cast<std::ptrdiff_t>(j * b * d),
                              z_aug.data().begin() + static_cast<std::ptrdiff_t>((j + 1) * b * d));
    reps.push_back(tape.constant(Tensor(Shape{b, d}, std::move(slice))));
  }
  return nuisance_vectors(tape.constant(z), reps).value();
}

}  // namespace tirnu
