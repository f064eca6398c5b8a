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

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "tirnu/linalg.hpp"
#include "tirnu/ops.hpp"
#include "tirnu/random.hpp"

using namespace tirnu;
using tirnu::testing::gradcheck;

namespace {

Tensor random_psd(Rng& rng, std::size_t n) {
  Tensor x = rng.normal_tensor({n, n});
  return matmul(x, transpose(x));
}

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor(Shape{2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tensor(Shape{0, 3}), ShapeError);
  Tensor t(Shape{2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_FALSE(t.requires_grad());
  t.set_requires_grad(true);
  EXPECT_EQ(t.grad().size(), t.size());
}

TEST(Grad, SquareOfScalar) {
  Tensor x = Tensor::vector({3.0});
  x.set_requires_grad(true);
  Tape tape;
  Var v = tape.leaf(x);
  auto g = tape.grad(sum(mul(v, v)), {&x});
  EXPECT_DOUBLE_EQ(g[0][0], 6.0);
  EXPECT_EQ(tape.size(), 0u) << "tape must be cleared after grad";
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Grad, ReluSubgradient) {
  Tensor x = Tensor::vector({-1.0, 2.0, 0.0});
  x.set_requires_grad(true);
  Tape tape;
  auto g = tape.grad(sum(relu(tape.leaf(x))), {&x});
  EXPECT_EQ(g[0][0], 0.0);
  EXPECT_EQ(g[0][1], 1.0);
  EXPECT_EQ(g[0][2], 0.0);
}

TEST(Grad, MatmulChainMatchesFiniteDifferences) {
  Rng rng(7);
  auto f = [](Tape&, const std::vector<Var>& in) {
    Var c = matmul(in[0], in[1]);
    return sum(mul(c, c));
  };
  auto r = gradcheck(f, {rng.normal_tensor({3, 4}), rng.normal_tensor({4, 2})});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Grad, FanOutAccumulatesBothPaths) {
  Tensor x = Tensor::vector({1.5, -2.0});
  x.set_requires_grad(true);
  Tape tape;
  Var v = tape.leaf(x);
  Var loss = add(sum(mul(v, v)), sum(v));
  auto g = tape.grad(loss, {&x});
  EXPECT_DOUBLE_EQ(g[0][0], 2 * 1.5 + 1);
  EXPECT_DOUBLE_EQ(g[0][1], 2 * -2.0 + 1);
}

TEST(Grad, SharedLeafAcrossForwardPasses) {
  Tensor w = Tensor::vector({2.0});
  w.set_requires_grad(true);
  Tape tape;
  Var a = tape.leaf(w);
  Var b = tape.leaf(w);
  EXPECT_EQ(a.id(), b.id());
  auto g = tape.grad(add(sum(a), sum(scale(b, 3.0))), {&w});
  EXPECT_DOUBLE_EQ(g[0][0], 4.0);
}

TEST(Grad, Errors) {
  Tensor x = Tensor::vector({1.0, 2.0});
  Tensor other = Tensor::vector({1.0});
  x.set_requires_grad(true);
  other.set_requires_grad(true);
  {
    Tape tape;
    Var v = tape.leaf(x);
    EXPECT_THROW(tape.grad(v, {&x}), ShapeError);
  }
  {
    Tape tape;
    Var v = tape.leaf(x);
    EXPECT_THROW(tape.grad(sum(v), {&other}), Error);
  }
  {
    Tape tape;
    Var v = tape.leaf(x);
    EXPECT_THROW(scale(v, 1e308 * 10), NumericError);
  }
  {
    // Each path is finite; their accumulated sum overflows.
    Tensor tiny = Tensor::vector({1e-308});
    tiny.set_requires_grad(true);
    Tape tape;
    Var v = tape.leaf(tiny);
    Var loss = add(sum(scale(v, 1.5e308)), sum(scale(v, 1.5e308)));
    EXPECT_THROW(tape.grad(loss, {&tiny}), NumericError);
  }
}

TEST(BatchNorm, IdentityOnStandardizedInput) {
  Tensor x = Tensor::matrix(4, 2, {1, -1, -1, 1, 1, 1, -1, -1});
  auto run = [&](double eps) {
    Tape tape;
    return batch_norm(tape.constant(x), tape.constant(Tensor(Shape{2}, 1.0)),
                      tape.constant(Tensor(Shape{2}, 0.0)), eps)
        .value();
  };
  // With the default variance floor the only deviation is the 1/sqrt(1+eps) shrink.
  const double shrink = 1.0 - 1.0 / std::sqrt(1.0 + kBatchNormEps);
  EXPECT_NEAR(max_abs_diff(run(kBatchNormEps), x), shrink, 1e-12);
  EXPECT_LT(max_abs_diff(run(1e-8), x), 1e-6);
}

TEST(BatchNorm, AffineCollapse) {
  Rng rng(1);
  Tape tape;
  Var y = batch_norm(tape.constant(rng.normal_tensor({6, 3})), tape.constant(Tensor(Shape{3}, 0.0)),
                     tape.constant(Tensor(Shape{3}, 2.5)));
  for (double v : y.value().data()) EXPECT_EQ(v, 2.5);
}

TEST(BatchNorm, OutputMoments) {
  Rng rng(2);
  Tensor x = rng.normal_tensor({32, 5}, 3.0);
  for (std::size_t i = 0; i < 32; ++i) x(i, 2) += 10.0;
  const ColumnMoments in = column_moments(x);
  Tape tape;
  Var y = batch_norm(tape.constant(x), tape.constant(Tensor(Shape{5}, 1.0)),
                     tape.constant(Tensor(Shape{5}, 0.0)));
  const ColumnMoments out = column_moments(y.value());
  for (std::size_t j = 0; j < 5; ++j) {
    EXPECT_LT(std::abs(out.mean[j]), 1e-9);
    EXPECT_NEAR(out.var[j], in.var[j] / (in.var[j] + kBatchNormEps), 1e-6);
  }
}

TEST(BatchNorm, RequiresTwoRows) {
  Tape tape;
  EXPECT_THROW(batch_norm(tape.constant(Tensor(Shape{1, 3})), tape.constant(Tensor(Shape{3}, 1.0)),
                          tape.constant(Tensor(Shape{3}, 0.0))),
               ShapeError);
}

TEST(BatchNorm, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  auto f = [](Tape&, const std::vector<Var>& in) {
    Var y = batch_norm(in[0], in[1], in[2]);
    return sum(mul(y, in[3]));
  };
  for (int trial = 0; trial < 20; ++trial) {
    auto r = gradcheck(f, {rng.normal_tensor({5, 3}), rng.normal_tensor({3}),
                           rng.normal_tensor({3}), rng.normal_tensor({5, 3})});
    EXPECT_LT(r.max_rel_error, 1e-4);
  }
}

TEST(Softmax, Examples) {
  Tape tape;
  Var p = softmax(tape.constant(Tensor(Shape{1, 4}, 0.7)));
  for (double v : p.value().data()) EXPECT_DOUBLE_EQ(v, 0.25);

  Var q = softmax(tape.constant(Tensor::matrix(1, 2, {0.0, std::log(3.0)})));
  EXPECT_NEAR(q.value()[0], 0.25, 1e-15);
  EXPECT_NEAR(q.value()[1], 0.75, 1e-15);

  Rng rng(4);
  Tensor logits = rng.normal_tensor({5, 6});
  Tensor shifted = logits;
  for (double& v : shifted.data()) v += 123.0;
  EXPECT_LT(max_abs_diff(softmax(logits), softmax(shifted)), 1e-12);
  Tensor s = softmax(logits);
  for (std::size_t i = 0; i < 5; ++i) {
    double t = 0.0;
    for (double v : s.row(i)) t += v;
    EXPECT_NEAR(t, 1.0, 1e-14);
  }
}

TEST(Softmax, RejectsNonFiniteInput) {
  Tape tape;
  EXPECT_THROW(tape.constant(Tensor::matrix(1, 2, {0.0, std::numeric_limits<double>::infinity()})),
               NumericError);
}

TEST(SymEigen, Examples) {
  auto id = sym_eigenvalues(Tensor::identity(4));
  for (double v : id) EXPECT_NEAR(v, 1.0, 1e-15);
  auto two = sym_eigenvalues(Tensor::matrix(2, 2, {2, 1, 1, 2}));
  ASSERT_EQ(two.size(), 2u);
  EXPECT_NEAR(two[0], 3.0, 1e-14);
  EXPECT_NEAR(two[1], 1.0, 1e-14);
}

TEST(SymEigen, TraceIdentityAndReconstruction) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.index(30);
    Tensor a = random_psd(rng, n);
    SymEigen e = sym_eigen(a);
    double s = 0.0;
    for (double v : e.values) s += v;
    EXPECT_NEAR(s, trace(a), 1e-10 * std::max(1.0, trace(a)));
    EXPECT_TRUE(std::is_sorted(e.values.rbegin(), e.values.rend()));
    Tensor rebuilt(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t j = 0; j < n; ++j)
          rebuilt(i, k) += e.vectors(i, j) * e.values[j] * e.vectors(k, j);
    EXPECT_LT(max_abs_diff(rebuilt, a), 1e-10 * std::max(1.0, trace(a)));
  }
}

TEST(SymEigen, Errors) {
  EXPECT_THROW(sym_eigenvalues(Tensor::matrix(2, 2, {1, 0.5, 0.2, 1})), Error);
  EXPECT_THROW(sym_eigenvalues(Tensor::matrix(2, 2, {0, 1, 1, 0})), NumericError);
  EXPECT_THROW(sym_eigenvalues(Tensor(Shape{2, 3})), ShapeError);
  // Rounding-level negative eigenvalues are clamped.
  auto ev = sym_eigenvalues(Tensor::matrix(2, 2, {1, 1, 1, 1 - 1e-13}));
  EXPECT_GE(ev[1], 0.0);
}

TEST(Properties, CompositeGradientsAtRandomPoints) {
  Rng rng(11);
  const std::vector<int> labels = {0, 2, 1, 2};
  std::vector<std::pair<const char*, tirnu::testing::LossBuilder>> composites = {
      {"dense-bn-relu-softmax-entropy",
       [](Tape&, const std::vector<Var>& in) {
         Var h = add_bias(matmul(in[0], in[1]), in[2]);
         Var y = relu(batch_norm(h, in[3], in[4]));
         return mean_entropy(softmax(matmul(y, in[5])));
       }},
      {"softmax-cross-entropy-labels",
       [&labels](Tape&, const std::vector<Var>& in) {
         return softmax_cross_entropy(add_bias(matmul(in[0], in[1]), in[2]), labels);
       }},
      {"frozen-bn-cross-entropy",
       [](Tape&, const std::vector<Var>& in) {
         const std::vector<double> mu = {0.1, -0.2, 0.3}, var = {1.5, 0.7, 2.0};
         Var y = batch_norm_fixed(matmul(in[0], in[1]), in[3], in[4], mu, var);
         Var p = softmax(y);
         return mean_cross_entropy(p, softmax(scale(y, 0.5)));
       }},
  };
  for (const auto& [name, f] : composites) {
    double worst = 0.0;
    for (int point = 0; point < 100; ++point) {
      std::vector<Tensor> inputs = {rng.normal_tensor({4, 3}), rng.normal_tensor({3, 3}),
                                    rng.normal_tensor({3}),    rng.normal_tensor({3}),
                                    rng.normal_tensor({3}),    rng.normal_tensor({3, 3})};
      worst = std::max(worst, gradcheck(f, inputs).max_rel_error);
    }
    EXPECT_LT(worst, 1e-4) << name;
  }
}

TEST(Properties, Determinism) {
  auto run = [] {
    Rng rng(99);
    Tensor x = rng.normal_tensor({8, 4});
    Tensor w = rng.normal_tensor({4, 4});
    w.set_requires_grad(true);
    Tape tape;
    Var y = batch_norm(matmul(tape.constant(x), tape.leaf(w)), tape.constant(Tensor(Shape{4}, 1.0)),
                       tape.constant(Tensor(Shape{4}, 0.0)));
    return tape.grad(mean_entropy(softmax(y)), {&w})[0];
  };
  EXPECT_TRUE(bitwise_equal(run(), run()));
}
