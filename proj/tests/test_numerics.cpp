#include <gtest/gtest.h>

#include <cmath>

#include "mg3d/numerics.hpp"
#include "test_util.hpp"

namespace mg3d {
namespace {

using testing::random_tensor;

TEST(Matmul, IdentityAndDot) {
  const Tensor a = matmul(Tensor::matrix({{1, 0}, {0, 1}}), Tensor::matrix({{2, 3}, {4, 5}}));
  EXPECT_EQ(a.values(), (std::vector<double>{2, 3, 4, 5}));
  EXPECT_DOUBLE_EQ(matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}})).item(), 11.0);
}

TEST(Matmul, GradientOfSum) {
  Tensor a = Tensor::matrix({{1, 1}}, true);
  Tensor b = Tensor::matrix({{1}, {1}});
  backward(sum(matmul(a, b)));
  EXPECT_EQ(std::vector<double>(a.grad().begin(), a.grad().end()), (std::vector<double>{1, 1}));
  const FdReport r = fd_check([&] { return sum(matmul(a, b)); }, {a}, 1e-6);
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL();
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
  }
}

TEST(Softmax, Examples) {
  const Tensor s = softmax_rows(Tensor::row({0, 0, 0}));
  for (double v : s.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  const Tensor t = softmax_rows(Tensor::row({std::log(2.0), 0.0}));
  EXPECT_NEAR(t.at(0), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(t.at(1), 1.0 / 3.0, 1e-15);
}

TEST(Softmax, NanIsNumericError) { EXPECT_THROW(softmax_rows(Tensor::row({0, NAN})), NumericError); }

TEST(Softmax, RowsSumToOneProperty) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = 1 + rng.below(5), n = 1 + rng.below(7);
    const Tensor s = softmax_rows(random_tensor({m, n}, rng, 1.0 + 50.0 * rng.uniform()));
    for (std::size_t i = 0; i < m; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        EXPECT_GE(s.at(i, j), 0.0);
        row += s.at(i, j);
      }
      EXPECT_NEAR(row, 1.0, 1e-9);
    }
  }
}

TEST(Cosine, Examples) {
  EXPECT_DOUBLE_EQ(cosine_sim(Tensor::row({1, 0}), Tensor::row({1, 0})).item(), 1.0);
  EXPECT_DOUBLE_EQ(cosine_sim(Tensor::row({1, 0}), Tensor::row({0, 1})).item(), 0.0);
  EXPECT_NEAR(cosine_sim(Tensor::row({1, 1}), Tensor::row({1, 0})).item(), 0.70710678, 1e-8);
  EXPECT_THROW(cosine_sim(Tensor::row({0, 0}), Tensor::row({1, 0})), DegenerateVectorError);
}

TEST(Cosine, SelfAndNegationProperty) {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor a = random_tensor({1, 1 + rng.below(9)}, rng);
    EXPECT_NEAR(cosine_sim(a, a).item(), 1.0, 1e-12);
    EXPECT_NEAR(cosine_sim(a, scale(a, -1.0)).item(), -1.0, 1e-12);
  }
}

TEST(Mse, Examples) {
  const Tensor a = Tensor::row({0.5, -2.0, 3.0});
  EXPECT_EQ(mse(a, a).item(), 0.0);
  EXPECT_DOUBLE_EQ(mse(Tensor::row({1, 1}), Tensor::row({0, 0})).item(), 1.0);
  EXPECT_THROW(mse(Tensor::row({1, 1}), Tensor::row({1, 1, 1})), DimensionError);
}

TEST(CrossEntropy, Examples) {
  EXPECT_NEAR(cross_entropy(Tensor::zeros({1, 4}), {2}).item(), std::log(4.0), 1e-12);
  EXPECT_LT(cross_entropy(Tensor::row({0, 1e6, 0}), {1}).item(), 1e-12);
  EXPECT_THROW(cross_entropy(Tensor::zeros({1, 4}), {4}), IndexError);
}

TEST(Backward, AnalyticCases) {
  Tensor x = Tensor::scalar(3.0, true);
  backward(mul(x, x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);

  Tensor y = Tensor::row({0.3, -1.2, 2.0}, true);
  backward(sum(softmax_rows(y)));
  for (double g : y.grad()) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(Backward, SecondCallIsStateError) {
  Tensor x = Tensor::scalar(2.0, true);
  const Tensor l = mul(x, x);
  backward(l);
  EXPECT_THROW(backward(l), StateError);
  ScalarLoss s(mul(x, x));
  s.backward();
  EXPECT_THROW(s.backward(), StateError);
}

TEST(Backward, LeafGradientsAccumulate) {
  Tensor x = Tensor::scalar(2.0, true);
  backward(mul(x, x));
  backward(scale(x, 3.0));
  EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

TEST(Backward, Linearity) {
  Rng rng(13);
  Tensor x = random_tensor({3, 4}, rng, 1.0, true);
  Tensor w = random_tensor({4, 2}, rng, 1.0, true);
  auto l1 = [&] { return sum(mul(softmax_rows(matmul(x, w)), matmul(x, w))); };
  auto l2 = [&] { return mean(exp(scale(matmul(x, w), 0.3))); };
  const double alpha = 0.7, beta = -1.9;

  backward(l1());
  const std::vector<double> g1(x.grad().begin(), x.grad().end());
  x.zero_grad();
  backward(l2());
  const std::vector<double> g2(x.grad().begin(), x.grad().end());
  x.zero_grad();
  backward(add(scale(l1(), alpha), scale(l2(), beta)));
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_NEAR(x.grad()[i], alpha * g1[i] + beta * g2[i], 1e-10);
}

TEST(FdCheck, QuadraticIsExact) {
  Rng rng(14);
  Tensor a = random_tensor({2, 3}, rng, 1.0, true);
  const FdReport r = fd_check([&] { return sum(mul(a, a)); }, {a}, 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-9);
  EXPECT_EQ(r.checked, 6u);
}

TEST(FdCheck, FrozenParametersSkipped) {
  Tensor a = Tensor::row({1.0, 2.0}, true);
  Tensor frozen = Tensor::row({3.0, 4.0}, false);
  const FdReport r = fd_check([&] { return sum(mul(a, frozen)); }, {a, frozen}, 1e-6);
  EXPECT_EQ(r.checked, 2u);
  EXPECT_FALSE(frozen.has_grad());
}

TEST(FdCheck, StepOutsideRangeRejected) {
  Tensor a = Tensor::row({1.0}, true);
  EXPECT_THROW(fd_check([&] { return sum(a); }, {a}, 1e-3), ConfigError);
}

// Every differentiable operation checked against central differences.
TEST(FdCheck, EveryOperation) {
  Rng rng(15);
  Tensor a = random_tensor({3, 4}, rng, 1.0, true);
  Tensor b = random_tensor({3, 4}, rng, 1.0, true);
  Tensor c = random_tensor({4, 2}, rng, 1.0, true);
  Tensor r = random_tensor({4}, rng, 1.0, true);
  Tensor col = random_tensor({3}, rng, 1.0, true);
  Tensor pos = Tensor::zeros({3, 4}, true);
  for (double& v : pos.mutable_data()) v = 0.5 + rng.uniform();
  Tensor wsum = random_tensor({3, 4}, rng);
  Tensor w2 = random_tensor({3, 2}, rng);
  Tensor w43 = random_tensor({4, 3}, rng);
  Tensor w14 = random_tensor({1, 4}, rng);
  Tensor w33 = random_tensor({3, 3}, rng);
  Tensor w24 = random_tensor({2, 4}, rng);
  auto weigh = [](const Tensor& x, const Tensor& w) { return sum(mul(x, w)); };

  const std::vector<std::pair<const char*, std::function<Tensor()>>> cases = {
      {"add", [&] { return weigh(add(a, b), wsum); }},
      {"sub", [&] { return weigh(sub(a, b), wsum); }},
      {"mul", [&] { return weigh(mul(a, b), wsum); }},
      {"scale", [&] { return weigh(scale(a, -2.5), wsum); }},
      {"abs", [&] { return weigh(abs(a), wsum); }},
      {"exp", [&] { return weigh(exp(a), wsum); }},
      {"log", [&] { return weigh(log(pos), wsum); }},
      {"gelu", [&] { return weigh(gelu(a), wsum); }},
      {"mean", [&] { return mean(mul(a, b)); }},
      {"mean_rows", [&] { return weigh(mean_rows(mul(a, b)), w14); }},
      {"matmul", [&] { return weigh(matmul(a, c), w2); }},
      {"matmul_nt", [&] { return weigh(matmul_nt(a, b), w33); }},
      {"transpose", [&] { return weigh(transpose(a), w43); }},
      {"add_row", [&] { return weigh(add_row(a, r), wsum); }},
      {"mul_rows", [&] { return weigh(mul_rows(a, col), wsum); }},
      {"softmax_rows", [&] { return weigh(softmax_rows(a), wsum); }},
      {"l2_normalize_rows", [&] { return weigh(l2_normalize_rows(a), wsum); }},
      {"layer_norm_rows", [&] { return weigh(layer_norm_rows(a, add_row(Tensor::zeros({1, 4}), r), mean_rows(b)), wsum); }},
      {"take_rows", [&] { return weigh(take_rows(a, {2, 0, 2}), wsum); }},
      {"slice_rows", [&] { return weigh(concat_rows({slice_rows(a, 1, 3), slice_rows(b, 0, 1)}), wsum); }},
      {"slice_cols", [&] { return weigh(concat_cols({slice_cols(a, 0, 1), slice_cols(b, 1, 4)}), wsum); }},
      {"replace_rows", [&] { return weigh(replace_rows(a, mean_rows(b), {true, false, true}), wsum); }},
      {"segment_mean_rows", [&] { return weigh(segment_mean_rows(a, {{0, 2}, {2, 3}}), w24); }},
      {"mse", [&] { return mse(a, b); }},
      {"cross_entropy", [&] { return cross_entropy(a, {3, 0, 1}); }},
      {"cosine_sim", [&] { return cosine_sim(slice_rows(a, 0, 1), slice_rows(b, 1, 2)); }},
      {"cosine_matrix", [&] { return weigh(cosine_matrix(a, b), w33); }},
  };
  for (const auto& [name, f] : cases) {
    const FdReport rep = fd_check(f, {a, b, c, r, col, pos}, 1e-6);
    EXPECT_LT(rep.max_rel_error, 1e-6) << name << " worst analytic " << rep.worst_analytic << " numeric "
                                       << rep.worst_numeric;
  }
}

TEST(FdCheck, CrossEntropyRandomLogits) {
  Rng rng(16);
  Tensor logits = random_tensor({2, 5}, rng, 1.0, true);
  EXPECT_LT(fd_check([&] { return cross_entropy(logits, {1, 4}); }, {logits}, 1e-6).max_rel_error, 1e-6);
}

TEST(FdCheck, SoftmaxRandom3x4) {
  Rng rng(17);
  Tensor x = random_tensor({3, 4}, rng, 1.0, true);
  Tensor w = random_tensor({3, 4}, rng);
  EXPECT_LT(fd_check([&] { return sum(mul(softmax_rows(x), w)); }, {x}, 1e-6).max_rel_error, 1e-6);
}

TEST(Tensor, ShapeInvariants) {
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
  Tensor a = Tensor::zeros({2, 3}, true);
  backward(sum(scale(a, 2.0)));
  ASSERT_TRUE(a.has_grad());
  EXPECT_EQ(a.grad().size(), a.size());
}

}  // namespace
}  // namespace mg3d
