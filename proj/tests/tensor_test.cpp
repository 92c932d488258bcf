//
// Copyright 2026 The FedPrompt Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "fedprompt/autodiff.hpp"
#include "fedprompt/finite_diff.hpp"
#include "fedprompt/tensor.hpp"
#include "gtest/gtest.h"

namespace fedprompt {
namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

// sum_ij y_ij * w_ij, built from matmuls so it stays on the tape.
Var contract(Tape& t, Var y, const Tensor& w) {
  Var total = t.constant(Tensor({1, 1}));
  for (std::size_t i = 0; i < w.rows(); ++i) {
    Tensor col({w.cols(), 1});
    for (std::size_t j = 0; j < w.cols(); ++j) col[j] = w.at(i, j);
    total = add(total, matmul(slice_rows(y, i, 1), t.constant(std::move(col))));
  }
  return total;
}

using Op = std::function<Var(Tape&, Var)>;

// Max relative error between the tape gradient of <op(x), w> and central
// differences, for random weights w.
double op_gradient_error(const Op& op, const Tensor& x0, std::mt19937_64& rng) {
  Tensor w;
  {
    Tape t;
    w = random_tensor(op(t, t.constant(x0)).value().shape(), rng);
  }
  auto f = [&](const Tensor& p) {
    Tape t;
    double s = 0.0;
    const Tensor& y = op(t, t.constant(p)).value();
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * w[i];
    return s;
  };
  Tensor x = x0;
  x.set_requires_grad(true);
  Tape tape;
  tape.backward(contract(tape, op(tape, tape.parameter(x)), w));
  const Tensor numeric = finite_diff_grad(f, x0, 1e-5);
  return max_relative_error(x.grad(), numeric.data());
}

TEST(TensorTest, ShapeAndDataAgree) {
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_THROW(Tensor({2, 0}), DimensionError);
  EXPECT_THROW(Tensor({1, 1, 1, 1}), DimensionError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
}

TEST(TensorTest, GradSlotPresentOnlyWhenRequested) {
  Tensor t({2, 2});
  EXPECT_FALSE(t.has_grad());
  EXPECT_TRUE(t.grad().empty());
  t.set_requires_grad(true);
  ASSERT_EQ(t.grad().size(), 4u);
  t.set_requires_grad(false);
  EXPECT_TRUE(t.grad().empty());
}

TEST(TensorTest, EqualityIgnoresGrad) {
  Tensor a({2}, std::vector<double>{1, 2});
  Tensor b = a;
  b.set_requires_grad(true);
  EXPECT_EQ(a, b);
  b[1] = 3;
  EXPECT_FALSE(a == b);
}

TEST(TensorTest, ChecksumIsDeterministicAndSensitive) {
  std::vector<double> v{1.0, 2.0, 3.0};
  const auto c = checksum(v, 0);
  EXPECT_EQ(c, checksum(v, 0));
  v[2] = std::nextafter(3.0, 4.0);
  EXPECT_NE(c, checksum(v, 0));
}

TEST(MatmulTest, OneByOne) {
  Tape t;
  Var y = matmul(t.constant(Tensor({1, 1}, 2.0)), t.constant(Tensor({1, 1}, 3.0)));
  EXPECT_EQ(y.value()[0], 6.0);
}

TEST(MatmulTest, IdentityLeavesInputUnchanged) {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({3, 5}, rng);
  Tape t;
  EXPECT_EQ(matmul(t.constant(Tensor::identity(3)), t.constant(x)).value(), x);
}

TEST(MatmulTest, ShapeMismatchThrows) {
  Tape t;
  EXPECT_THROW(matmul(t.constant(Tensor({2, 3})), t.constant(Tensor({2, 3}))), DimensionError);
}

TEST(MatmulTest, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(17);
  const Tensor a0 = random_tensor({3, 4}, rng);
  const Tensor b0 = random_tensor({4, 2}, rng);
  const Tensor w = random_tensor({3, 2}, rng);
  Tensor a = a0, b = b0;
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  Tape tape;
  tape.backward(contract(tape, matmul(tape.parameter(a), tape.parameter(b)), w));
  auto loss = [&](const Tensor& x, const Tensor& y) {
    double s = 0.0;
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        double acc = 0.0;
        for (std::size_t p = 0; p < 4; ++p) acc += x.at(i, p) * y.at(p, j);
        s += acc * w.at(i, j);
      }
    return s;
  };
  const Tensor ga = finite_diff_grad([&](const Tensor& x) { return loss(x, b0); }, a0, 1e-5);
  const Tensor gb = finite_diff_grad([&](const Tensor& y) { return loss(a0, y); }, b0, 1e-5);
  EXPECT_LT(max_relative_error(a.grad(), ga.data()), 1e-6);
  EXPECT_LT(max_relative_error(b.grad(), gb.data()), 1e-6);
}

TEST(MatmulTest, FaultInjectionCorruptsLeftGradient) {
  std::mt19937_64 rng(2);
  Tensor a = random_tensor({2, 2}, rng);
  a.set_requires_grad(true);
  Tape tape;
  tape.set_matmul_fault(2.0);
  tape.backward(sum(matmul(tape.parameter(a), tape.constant(Tensor::identity(2)))));
  for (double g : a.grad()) EXPECT_EQ(g, 2.0);
}

TEST(SoftmaxTest, UniformRow) {
  Tape t;
  const Tensor& y = softmax_rows(t.constant(Tensor({1, 3}))).value();
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(SoftmaxTest, LargeLogitsDoNotOverflow) {
  Tape t;
  const Tensor& y = softmax_rows(t.constant(Tensor({1, 2}, std::vector<double>{1000, 0}))).value();
  EXPECT_TRUE(y.all_finite());
  EXPECT_NEAR(y[0], 1.0, 1e-15);
  EXPECT_NEAR(y[1], 0.0, 1e-15);
}

TEST(SoftmaxTest, RowsAreDistributions) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    Tape t;
    const Tensor& y = softmax_rows(t.constant(random_tensor({4, 7}, rng, 10.0))).value();
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (double v : y.row_span(r)) {
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(SoftmaxTest, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  EXPECT_LT(op_gradient_error([](Tape&, Var x) { return softmax_rows(x); },
                              random_tensor({1, 6}, rng), rng),
            1e-6);
}

TEST(LayerNormTest, ConstantTokenMapsToZero) {
  Tape t;
  const Tensor& y = layer_norm(t.constant(Tensor({1, 4}, 3.0)), t.constant(Tensor({1, 4}, 1.0)),
                               t.constant(Tensor({1, 4}, 0.0)))
                        .value();
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNormTest, TwoEntryToken) {
  Tape t;
  const Tensor& y = layer_norm(t.constant(Tensor({1, 2}, std::vector<double>{1, -1})),
                               t.constant(Tensor({1, 2}, 1.0)), t.constant(Tensor({1, 2}, 0.0)))
                        .value();
  // variance 1, so y = x / sqrt(1 + eps)
  EXPECT_NEAR(y[0], 1.0 / std::sqrt(1.0 + kLayerNormEps), 1e-15);
  EXPECT_NEAR(y[1], -1.0 / std::sqrt(1.0 + kLayerNormEps), 1e-15);
}

TEST(LayerNormTest, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(21);
  const Tensor x = random_tensor({3, 5}, rng);
  const Tensor gain = random_tensor({1, 5}, rng);
  const Tensor bias = random_tensor({1, 5}, rng);
  EXPECT_LT(op_gradient_error(
                [&](Tape& t, Var v) { return layer_norm(v, t.constant(gain), t.constant(bias)); },
                x, rng),
            1e-5);
  EXPECT_LT(op_gradient_error(
                [&](Tape& t, Var g) { return layer_norm(t.constant(x), g, t.constant(bias)); },
                gain, rng),
            1e-5);
  EXPECT_LT(op_gradient_error(
                [&](Tape& t, Var b) { return layer_norm(t.constant(x), t.constant(gain), b); },
                bias, rng),
            1e-5);
}

TEST(CrossEntropyTest, UniformLogits) {
  Tape t;
  EXPECT_NEAR(cross_entropy(t.constant(Tensor({1, 4})), 2).value()[0], std::log(4.0), 1e-15);
}

TEST(CrossEntropyTest, ConfidentCorrectIsNearZero) {
  Tape t;
  const double l =
      cross_entropy(t.constant(Tensor({1, 3}, std::vector<double>{100, 0, 0})), 0).value()[0];
  EXPECT_GE(l, 0.0);
  EXPECT_LT(l, 1e-40);
}

TEST(CrossEntropyTest, GradientIsSoftmaxMinusOneHot) {
  std::mt19937_64 rng(12);
  Tensor logits = random_tensor({1, 5}, rng);
  logits.set_requires_grad(true);
  Tape tape;
  tape.backward(cross_entropy(tape.parameter(logits), 3));
  double z = 0.0;
  for (double v : logits.data()) z += std::exp(v);
  for (std::size_t c = 0; c < 5; ++c) {
    const double expect = std::exp(logits[c]) / z - (c == 3 ? 1.0 : 0.0);
    EXPECT_NEAR(logits.grad()[c], expect, 1e-15);
  }
  auto f = [](const Tensor& x) {
    Tape t;
    return cross_entropy(t.constant(x), 3).value()[0];
  };
  EXPECT_LT(max_relative_error(logits.grad(), finite_diff_grad(f, logits, 1e-5).data()), 1e-6);
}

TEST(CrossEntropyTest, LabelOutOfRange) {
  Tape t;
  EXPECT_THROW(cross_entropy(t.constant(Tensor({1, 3})), 3), IndexError);
}

TEST(FiniteDiffTest, Quadratic) {
  const Tensor g = finite_diff_grad([](const Tensor& x) { return x[0] * x[0]; },
                                    Tensor({1}, 3.0), 1e-4);
  EXPECT_NEAR(g[0], 6.0, 1e-9);
}

TEST(FiniteDiffTest, LinearGivesOnes) {
  std::mt19937_64 rng(1);
  const Tensor g = finite_diff_grad(
      [](const Tensor& x) { return std::accumulate(x.data().begin(), x.data().end(), 0.0); },
      random_tensor({2, 3}, rng), 1e-5);
  for (double v : g.data()) EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(FiniteDiffTest, NonFiniteFunctionIsAnOracleError) {
  EXPECT_THROW(finite_diff_grad([](const Tensor& x) { return std::log(x[0]); }, Tensor({1}, 0.0),
                                1e-5),
               OracleError);
  EXPECT_THROW(finite_diff_grad([](const Tensor&) { return 0.0; }, Tensor({1}), 0.0), OracleError);
}

TEST(TapeTest, FrozenParameterGetsNoGradient) {
  Tensor frozen({2, 2}, 1.0);
  Tensor live({2, 2}, 2.0);
  live.set_requires_grad(true);
  Tape tape;
  tape.backward(sum(matmul(tape.parameter(frozen), tape.parameter(live))));
  EXPECT_FALSE(frozen.has_grad());
  for (double g : live.grad()) EXPECT_EQ(g, 2.0);
}

TEST(TapeTest, ConstantsNeedNoGradient) {
  Tape tape;
  Var y = gelu(matmul(tape.constant(Tensor({2, 2}, 1.0)), tape.constant(Tensor({2, 2}, 1.0))));
  EXPECT_FALSE(tape.needs_grad(y));
  EXPECT_TRUE(tape.grad_of(y).empty());
}

TEST(TapeTest, BackwardNeedsScalarAndRunsOnce) {
  Tensor p({1, 2}, 1.0);
  p.set_requires_grad(true);
  Tape tape;
  Var x = tape.parameter(p);
  EXPECT_THROW(tape.backward(x), DimensionError);
  Var l = sum(x);
  tape.backward(l);
  EXPECT_THROW(tape.backward(l), Error);
}

TEST(TapeTest, SharedInputAccumulates) {
  Tensor p({1, 1}, 3.0);
  p.set_requires_grad(true);
  Tape tape;
  Var x = tape.parameter(p);
  tape.backward(sum(matmul(x, x)));  // x^2
  EXPECT_EQ(p.grad()[0], 6.0);
}

// Every differentiable primitive against central differences (h = 1e-5) on
// 100 random seeds.
struct OpCase {
  const char* name;
  Shape shape;
  std::function<Var(Tape&, Var, std::mt19937_64&)> op;
};

class OpPropertyTest : public ::testing::TestWithParam<OpCase> {};

TEST_P(OpPropertyTest, GradientMatchesFiniteDifferencesOn100Seeds) {
  const OpCase& c = GetParam();
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed * 7919 + 1);
    const Tensor x = random_tensor(c.shape, rng);
    // The op may draw fixed side inputs; give it a stream that repeats per call.
    const std::uint64_t side = rng();
    const double err = op_gradient_error(
        [&](Tape& t, Var v) {
          std::mt19937_64 srng(side);
          return c.op(t, v, srng);
        },
        x, rng);
    worst = std::max(worst, err);
  }
  EXPECT_LT(worst, 1e-4) << c.name;
}

INSTANTIATE_TEST_SUITE_P(
    AllOps, OpPropertyTest,
    ::testing::Values(
        OpCase{"matmul_left", {3, 4},
               [](Tape& t, Var x, auto& r) { return matmul(x, t.constant(random_tensor({4, 2}, r))); }},
        OpCase{"matmul_right", {4, 2},
               [](Tape& t, Var x, auto& r) { return matmul(t.constant(random_tensor({3, 4}, r)), x); }},
        OpCase{"transpose", {3, 2}, [](Tape&, Var x, auto&) { return transpose(x); }},
        OpCase{"add", {2, 3},
               [](Tape& t, Var x, auto& r) { return add(x, t.constant(random_tensor({2, 3}, r))); }},
        OpCase{"add_row", {1, 3},
               [](Tape& t, Var x, auto& r) { return add_row(t.constant(random_tensor({4, 3}, r)), x); }},
        OpCase{"scale", {2, 2}, [](Tape&, Var x, auto&) { return scale(x, -1.7); }},
        OpCase{"sum", {3, 3}, [](Tape&, Var x, auto&) { return sum(x); }},
        OpCase{"gelu", {2, 5}, [](Tape&, Var x, auto&) { return gelu(x); }},
        OpCase{"softmax_rows", {3, 4}, [](Tape&, Var x, auto&) { return softmax_rows(x); }},
        OpCase{"layer_norm", {3, 6},
               [](Tape& t, Var x, auto& r) {
                 return layer_norm(x, t.constant(random_tensor({1, 6}, r)),
                                   t.constant(random_tensor({1, 6}, r)));
               }},
        OpCase{"cross_entropy", {1, 5}, [](Tape&, Var x, auto&) { return cross_entropy(x, 2); }},
        OpCase{"slice_rows", {4, 3}, [](Tape&, Var x, auto&) { return slice_rows(x, 1, 2); }},
        OpCase{"slice_cols", {3, 4}, [](Tape&, Var x, auto&) { return slice_cols(x, 1, 2); }},
        OpCase{"concat_rows", {2, 3},
               [](Tape& t, Var x, auto& r) {
                 return concat_rows({t.constant(random_tensor({1, 3}, r)), x, x});
               }},
        OpCase{"concat_cols", {3, 2},
               [](Tape& t, Var x, auto& r) {
                 const std::vector<Var> parts{x, t.constant(random_tensor({3, 1}, r))};
                 return concat_cols(parts);
               }},
        OpCase{"attention_block", {4, 6},
               [](Tape& t, Var x, auto& r) {
                 Var q = matmul(x, t.constant(random_tensor({6, 6}, r, 0.5)));
                 Var k = matmul(x, t.constant(random_tensor({6, 6}, r, 0.5)));
                 Var a = softmax_rows(scale(matmul(q, transpose(k)), 0.4));
                 return gelu(matmul(a, x));
               }}),
    [](const ::testing::TestParamInfo<OpCase>& info) { return std::string(info.param.name); });

TEST(DetachTest, BlocksGradient) {
  Tensor p({1, 2}, 1.0);
  p.set_requires_grad(true);
  Tape tape;
  Var x = tape.parameter(p);
  tape.backward(sum(add(x, detach(x))));
  for (double g : p.grad()) EXPECT_EQ(g, 1.0);
}

}  // namespace
}  // namespace fedprompt
