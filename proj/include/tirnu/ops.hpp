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

// Differentiable operations recorded on a Tape. Matrices are B x d with one
// sample per row.

#pragma once

#include "tirnu/autodiff.hpp"

namespace tirnu {

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kProbFloor = 1e-12;

inline Var matmul(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  Tensor out = matmul(a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& av = t.value(ia);
    const Tensor& bv = t.value(ib);
    const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    auto g = t.adjoint(self);
    if (t.needs_grad(ia)) {
      auto ga = t.accumulator(ia);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bv(p, j);
          ga[i * k + p] += s;
        }
    }
    if (t.needs_grad(ib)) {
      auto gb = t.accumulator(ib);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av(i, p);
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
        }
    }
  }, "matmul");
}

/// x (B x n) + b (n) broadcast over rows.
inline Var add_bias(Var x, Var b) {
  Tape& tape = detail::same_tape(x, b);
  const Tensor& xv = x.value();
  const std::size_t n = xv.cols();
  if (b.value().size() != n) throw ShapeError("add_bias: bias length mismatch");
  Tensor out = xv;
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) += b.value()[j];
  const std::size_t ix = x.id(), ib = b.id();
  return tape.record(std::move(out), {x, b}, [ix, ib, n](Tape& t, std::size_t self) {
    auto g = t.adjoint(self);
    detail::add_into(t, ix, g);
    if (t.needs_grad(ib)) {
      auto gb = t.accumulator(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
    }
  }, "add_bias");
}

inline Var add(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    auto g = t.adjoint(self);
    detail::add_into(t, ia, g);
    detail::add_into(t, ib, g);
  }, "add");
}

inline Var sub(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    auto g = t.adjoint(self);
    detail::add_into(t, ia, g);
    if (t.needs_grad(ib)) {
      auto gb = t.accumulator(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  }, "sub");
}

/// Elementwise (Hadamard) product.
inline Var mul(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    auto g = t.adjoint(self);
    if (t.needs_grad(ia)) {
      auto ga = t.accumulator(ia);
      const Tensor& bv = t.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs_grad(ib)) {
      auto gb = t.accumulator(ib);
      const Tensor& av = t.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  }, "mul");
}

inline Var scale(Var a, double c) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= c;
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia, c](Tape& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    auto g = t.adjoint(self);
    auto ga = t.accumulator(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  }, "scale");
}

inline Var sum(Var a) {
  const auto& v = a.value().values();
  double s = 0.0;
  for (double x : v) s += x;
  const std::size_t ia = a.id();
  return a.tape()->record(Tensor::scalar(s), {a}, [ia](Tape& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    const double g = t.adjoint(self)[0];
    for (double& x : t.accumulator(ia)) x += g;
  }, "sum");
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Weighted sum of scalars; used to assemble composite objectives.
inline Var weighted_sum(std::initializer_list<std::pair<double, Var>> terms) {
  if (terms.size() == 0) throw Error("weighted_sum of no terms");
  Var acc;
  for (const auto& [w, v] : terms) {
    Var term = scale(v, w);
    acc = acc.valid() ? add(acc, term) : term;
  }
  return acc;
}

/// relu'(0) is taken as 0.
inline Var relu(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia](Tape& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    auto g = t.adjoint(self);
    const Tensor& x = t.value(ia);
    auto ga = t.accumulator(ia);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > 0.0) ga[i] += g[i];
  }, "relu");
}

/// Per-column moments, with the biased (1/B) variance used by batch norm.
struct ColumnMoments {
  std::vector<double> mean;
  std::vector<double> var;
};

inline ColumnMoments column_moments(const Tensor& x) {
  const std::size_t b = x.rows(), d = x.cols();
  ColumnMoments m{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < d; ++j) m.mean[j] += x(i, j);
  for (double& v : m.mean) v /= static_cast<double>(b);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double c = x(i, j) - m.mean[j];
      m.var[j] += c * c;
    }
  for (double& v : m.var) v /= static_cast<double>(b);
  return m;
}

/// Batch normalization using the statistics of the current batch.
inline Var batch_norm(Var x, Var gamma, Var beta, double eps = kBatchNormEps) {
  Tape& tape = detail::same_tape(x, gamma);
  const Tensor& xv = x.value();
  const std::size_t b = xv.rows(), d = xv.cols();
  if (b < 2) throw ShapeError("batch_norm needs at least 2 rows, got " + std::to_string(b));
  if (gamma.value().size() != d || beta.value().size() != d)
    throw ShapeError("batch_norm: affine parameter length mismatch");

  const ColumnMoments m = column_moments(xv);
  std::vector<double> inv_std(d);
  for (std::size_t j = 0; j < d; ++j) inv_std[j] = 1.0 / std::sqrt(m.var[j] + eps);
  Tensor xhat(xv.shape());
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      xhat(i, j) = (xv(i, j) - m.mean[j]) * inv_std[j];
      out(i, j) = gamma.value()[j] * xhat(i, j) + beta.value()[j];
    }

  const std::size_t ix = x.id(), ig = gamma.id(), ibeta = beta.id();
  return tape.record(
      std::move(out), {x, gamma, beta},
      [ix, ig, ibeta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t,
                                                                           std::size_t self) {
        auto g = t.adjoint(self);
        const std::size_t rows = xhat.rows(), cols = xhat.cols();
        std::vector<double> sum_g(cols, 0.0), sum_gx(cols, 0.0);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) {
            sum_g[j] += g[i * cols + j];
            sum_gx[j] += g[i * cols + j] * xhat(i, j);
          }
        if (t.needs_grad(ig)) {
          auto gg = t.accumulator(ig);
          for (std::size_t j = 0; j < cols; ++j) gg[j] += sum_gx[j];
        }
        if (t.needs_grad(ibeta)) {
          auto gb = t.accumulator(ibeta);
          for (std::size_t j = 0; j < cols; ++j) gb[j] += sum_g[j];
        }
        if (t.needs_grad(ix)) {
          const Tensor& gamma_v = t.value(ig);
          auto gx = t.accumulator(ix);
          const double n = static_cast<double>(rows);
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j)
              gx[i * cols + j] += gamma_v[j] * inv_std[j] / n *
                                  (n * g[i * cols + j] - sum_g[j] - xhat(i, j) * sum_gx[j]);
        }
      },
      "batch_norm");
}

/// Batch normalization with fixed (stored) statistics.
inline Var batch_norm_fixed(Var x, Var gamma, Var beta, std::span<const double> mean,
                            std::span<const double> var, double eps = kBatchNormEps) {
  Tape& tape = detail::same_tape(x, gamma);
  const Tensor& xv = x.value();
  const std::size_t b = xv.rows(), d = xv.cols();
  if (mean.size() != d || var.size() != d || gamma.value().size() != d)
    throw ShapeError("batch_norm_fixed: statistics length mismatch");
  std::vector<double> inv_std(d);
  for (std::size_t j = 0; j < d; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + eps);
  Tensor xhat(xv.shape()), out(xv.shape());
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      xhat(i, j) = (xv(i, j) - mean[j]) * inv_std[j];
      out(i, j) = gamma.value()[j] * xhat(i, j) + beta.value()[j];
    }
  const std::size_t ix = x.id(), ig = gamma.id(), ibeta = beta.id();
  return tape.record(
      std::move(out), {x, gamma, beta},
      [ix, ig, ibeta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t,
                                                                           std::size_t self) {
        auto g = t.adjoint(self);
        const std::size_t cols = xhat.cols();
        const Tensor& gamma_v = t.value(ig);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const std::size_t j = i % cols;
          if (t.needs_grad(ig)) t.accumulator(ig)[j] += g[i] * xhat[i];
          if (t.needs_grad(ibeta)) t.accumulator(ibeta)[j] += g[i];
          if (t.needs_grad(ix)) t.accumulator(ix)[i] += g[i] * gamma_v[j] * inv_std[j];
        }
      },
      "batch_norm_fixed");
}

inline Tensor softmax(const Tensor& logits) {
  const std::size_t b = logits.rows(), k = logits.cols();
  Tensor p(logits.shape());
  for (std::size_t i = 0; i < b; ++i) {
    double mx = logits(i, 0);
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, logits(i, c));
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += (p(i, c) = std::exp(logits(i, c) - mx));
    for (std::size_t c = 0; c < k; ++c) p(i, c) /= z;
  }
  return p;
}

/// Row-wise softmax with max-shift.
inline Var softmax(Var logits) {
  require_finite(logits.value(), "softmax input");
  Tensor p = softmax(logits.value());
  const std::size_t il = logits.id();
  return logits.tape()->record(std::move(p), {logits}, [il](Tape& t, std::size_t self) {
    if (!t.needs_grad(il)) return;
    const Tensor& y = t.value(self);
    auto g = t.adjoint(self);
    auto gl = t.accumulator(il);
    const std::size_t k = y.cols();
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t c = 0; c < k; ++c) dot += g[i * k + c] * y(i, c);
      for (std::size_t c = 0; c < k; ++c) gl[i * k + c] += y(i, c) * (g[i * k + c] - dot);
    }
  }, "softmax");
}

/// mean over rows of -sum_c p_c log(max(q_c, floor)), in nats. With p == q
/// this is the mean prediction entropy.
inline Var mean_cross_entropy(Var p, Var q) {
  Tape& tape = detail::same_tape(p, q);
  detail::require_same_shape(p, q, "mean_cross_entropy");
  const Tensor& pv = p.value();
  const Tensor& qv = q.value();
  const double inv_b = 1.0 / static_cast<double>(pv.rows());
  double s = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) s -= pv[i] * std::log(std::max(qv[i], kProbFloor));
  const std::size_t ip = p.id(), iq = q.id();
  return tape.record(Tensor::scalar(s * inv_b), {p, q}, [ip, iq, inv_b](Tape& t, std::size_t self) {
    const double g = t.adjoint(self)[0] * inv_b;
    const Tensor& pv = t.value(ip);
    const Tensor& qv = t.value(iq);
    if (t.needs_grad(ip)) {
      auto gp = t.accumulator(ip);
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] -= g * std::log(std::max(qv[i], kProbFloor));
    }
    if (t.needs_grad(iq)) {
      auto gq = t.accumulator(iq);
      for (std::size_t i = 0; i < gq.size(); ++i)
        if (qv[i] > kProbFloor) gq[i] -= g * pv[i] / qv[i];
    }
  }, "mean_cross_entropy");
}

inline Var mean_entropy(Var p) { return mean_cross_entropy(p, p); }

/// Mean cross-entropy of logits against integer class labels, computed via
/// log-softmax.
inline Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& lv = logits.value();
  const std::size_t b = lv.rows(), k = lv.cols();
  if (labels.size() != b) throw ShapeError("softmax_cross_entropy: label count mismatch");
  Tensor p = softmax(lv);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    if (labels[i] < 0 || y >= k) throw Error("label out of range");
    double mx = lv(i, 0);
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, lv(i, c));
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += std::exp(lv(i, c) - mx);
    loss += mx + std::log(z) - lv(i, y);
  }
  const std::size_t il = logits.id();
  std::vector<int> owned(labels.begin(), labels.end());
  return logits.tape()->record(
      Tensor::scalar(loss / static_cast<double>(b)), {logits},
      [il, p = std::move(p), owned = std::move(owned)](Tape& t, std::size_t self) {
        if (!t.needs_grad(il)) return;
        const double g = t.adjoint(self)[0] / static_cast<double>(p.rows());
        auto gl = t.accumulator(il);
        const std::size_t k = p.cols();
        for (std::size_t i = 0; i < p.rows(); ++i)
          for (std::size_t c = 0; c < k; ++c)
            gl[i * k + c] +=
                g * (p(i, c) - (static_cast<std::size_t>(owned[i]) == c ? 1.0 : 0.0));
      },
      "softmax_cross_entropy");
}

}  // namespace tirnu
