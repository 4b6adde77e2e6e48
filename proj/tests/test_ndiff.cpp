#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <vector>

#include "kelixpq/ndiff.hpp"
#include "kelixpq/rng.hpp"

using namespace kelixpq;
using namespace kelixpq::ndiff;
using G = Graph<double>;
using V = Var<double>;

namespace {

std::vector<double> random_values(std::size_t n, Rng& rng, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

/// Analytic vs. central-difference gradients of `expr` for every parameter.
template <class F>
double grad_check(F&& expr, ParamSet<double>& ps) {
  const auto ana = value_and_grad(expr, ps);
  const auto num = finite_diff_grad(expr, ps, 1e-5);
  double worst = 0.0;
  for (const auto& [name, g] : ana.grads)
    worst = std::max(worst, max_rel_error<double>(g, num.at(name)));
  return worst;
}

}  // namespace

TEST(Ndiff, MatmulMatchesHandComputation) {
  G g;
  auto a = g.constant({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = g.constant({3, 2}, {7, 8, 9, 10, 11, 12});
  auto c = matmul(a, b);
  EXPECT_EQ(g.shape(c), (Shape{2, 2}));
  const auto v = g.value(c);
  EXPECT_EQ(std::vector<double>(v.begin(), v.end()), (std::vector<double>{58, 64, 139, 154}));
}

TEST(Ndiff, ElementwiseGradientsMatchFiniteDifferences) {
  Rng rng(1);
  ParamSet<double> ps;
  ps.add("a", {3, 4}, random_values(12, rng));
  ps.add("b", {3, 4}, random_values(12, rng));
  ps.add("bias", {4}, random_values(4, rng));
  auto expr = [&](G& g) {
    auto a = g.param(ps, "a"), b = g.param(ps, "b");
    auto x = add_rowwise(a * b - scale(a, 0.3), g.param(ps, "bias"));
    return sum(tanh(x)) + mean(gelu(x)) + sum_squares(x) * 0.01;
  };
  EXPECT_LT(grad_check(expr, ps), 1e-6);
}

TEST(Ndiff, MatrixOpGradientsMatchFiniteDifferences) {
  Rng rng(2);
  ParamSet<double> ps;
  ps.add("x", {4, 3}, random_values(12, rng));
  ps.add("w", {3, 5}, random_values(15, rng));
  ps.add("g", {5}, random_values(5, rng));
  ps.add("b", {5}, random_values(5, rng));
  auto expr = [&](G& g) {
    auto h = matmul(g.param(ps, "x"), g.param(ps, "w"));
    h = layer_norm_rows(h, g.param(ps, "g"), g.param(ps, "b"));
    auto t = transpose(h);
    auto s = concat_cols<double>({slice_cols(h, 0, 2), slice_cols(h, 2, 3)});
    auto r = concat_rows<double>({slice_rows(s, 1, 2), slice_rows(s, 0, 1)});
    return sum_squares(r) + sum(matmul(h, t)) * 0.1;
  };
  EXPECT_LT(grad_check(expr, ps), 1e-5);
}

TEST(Ndiff, MaskedSoftmaxAndCrossEntropyGradients) {
  Rng rng(3);
  ParamSet<double> ps;
  ps.add("s", {3, 3}, random_values(9, rng));
  ps.add("t", {3, 3}, random_values(9, rng));
  auto mask = std::make_shared<std::vector<std::uint8_t>>(std::vector<std::uint8_t>{1, 0, 0, 1, 1, 0, 1, 1, 1});
  auto expr = [&](G& g) {
    auto p = softmax_rows(g.param(ps, "s"), mask);
    auto mixed = matmul(p, g.param(ps, "t"));
    return cross_entropy_rows(mixed, std::vector<std::int32_t>{0, 2, 1}, std::vector<double>{1.0, 0.0, 2.0});
  };
  EXPECT_LT(grad_check(expr, ps), 1e-6);
}

TEST(Ndiff, MaskedEntriesAreExactlyZero) {
  G g;
  auto mask = std::make_shared<std::vector<std::uint8_t>>(std::vector<std::uint8_t>{1, 0, 1, 1});
  auto p = softmax_rows(g.constant({2, 2}, {5.0, 100.0, 1.0, 2.0}), mask);
  const auto v = g.value(p);
  EXPECT_EQ(v[0], 1.0);
  EXPECT_EQ(v[1], 0.0);
  EXPECT_NEAR(v[2] + v[3], 1.0, 1e-15);
}

TEST(Ndiff, FullyMaskedRowThrows) {
  G g;
  auto mask = std::make_shared<std::vector<std::uint8_t>>(std::vector<std::uint8_t>{0, 0});
  EXPECT_THROW(softmax_rows(g.constant({1, 2}, {1.0, 2.0}), mask), Error);
}

TEST(Ndiff, GatherSumGradientAndEmptyGroups) {
  Rng rng(4);
  ParamSet<double> ps;
  ps.add("table", {5, 3}, random_values(15, rng));
  auto expr = [&](G& g) {
    auto out = gather_sum(g.param(ps, "table"), {{0, 2, 2}, {}, {4}}, {1.0, 1.0, 0.5});
    return sum_squares(out);
  };
  EXPECT_LT(grad_check(expr, ps), 1e-6);
  G g;
  auto out = gather_sum(g.param(ps, "table"), {{}});
  for (double x : g.value(out)) EXPECT_EQ(x, 0.0);
}

TEST(Ndiff, StopGradientBlocksFlow) {
  ParamSet<double> ps;
  ps.add("x", {2}, {1.5, -2.0});
  auto r = value_and_grad([&](G& g) { return sum_squares(stop_gradient(g.param(ps, "x"))); }, ps);
  EXPECT_EQ(r.grads.at("x"), (std::vector<double>{0.0, 0.0}));
  EXPECT_DOUBLE_EQ(r.value, 1.5 * 1.5 + 4.0);
}

TEST(Ndiff, ParamReusedTwiceAccumulatesOnce) {
  ParamSet<double> ps;
  ps.add("x", {1}, {3.0});
  auto r = value_and_grad([&](G& g) { return sum(g.param(ps, "x") * g.param(ps, "x")); }, ps);
  EXPECT_DOUBLE_EQ(r.grads.at("x")[0], 6.0);
}

TEST(Ndiff, NoGradModeRecordsNothing) {
  ParamSet<double> ps;
  ps.add("x", {2}, {1.0, 2.0});
  G g(GradMode::kNoGrad);
  auto y = sum_squares(g.param(ps, "x"));
  g.backward(y);
  EXPECT_EQ(g.param_grad(ps.at("x")), nullptr);
  EXPECT_DOUBLE_EQ(g.item(y), 5.0);
}

TEST(Ndiff, NonFiniteValuesRaiseNumericError) {
  G g;
  auto x = g.constant({1}, {1e308});
  EXPECT_THROW(scale(x, 1e10), NumericError);
  const double nan = std::nan("");
  EXPECT_THROW(g.constant({1}, {nan}), NumericError);
}

TEST(Ndiff, ShapeMismatchIsUsageError) {
  G g;
  auto a = g.constant({2, 3}, std::vector<double>(6, 1.0));
  auto b = g.constant({2, 3}, std::vector<double>(6, 1.0));
  EXPECT_THROW(matmul(a, b), UsageError);
  EXPECT_THROW(add(a, transpose(b)), UsageError);
}

TEST(Ndiff, BackwardOnNonScalarThrows) {
  G g;
  auto a = g.constant({2}, {1.0, 2.0});
  EXPECT_THROW(g.backward(a), NumericError);
}

TEST(Ndiff, LogSoftmaxRowsNormalizes) {
  const std::vector<double> x{1.0, 2.0, 3.0, -1.0, 0.0, 1000.0};
  const auto lp = log_softmax_rows<double>(x, 2, 3);
  for (int r = 0; r < 2; ++r) {
    double s = 0.0;
    for (int c = 0; c < 3; ++c) s += std::exp(lp[r * 3 + c]);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_NEAR(lp[5], 0.0, 1e-12);
}

TEST(Ndiff, FiniteDiffSliceAgreesWithAnalytic) {
  Rng rng(5);
  ParamSet<double> ps;
  ps.add("w", {4, 4}, random_values(16, rng));
  auto expr = [&](G& g) { return sum(tanh(matmul(g.param(ps, "w"), g.param(ps, "w")))); };
  const auto ana = value_and_grad(expr, ps);
  const std::vector<std::size_t> coords{0, 5, 11, 15};
  const auto num = finite_diff_slice<double>(expr, ps.at("w"), coords, 1e-5);
  for (std::size_t k = 0; k < coords.size(); ++k)
    EXPECT_NEAR(ana.grads.at("w")[coords[k]], num[k], 1e-7);
}

TEST(Ndiff, ParamSetRejectsDuplicatesAndUnknownNames) {
  ParamSet<double> ps;
  ps.add("a", {1}, {1.0});
  EXPECT_THROW(ps.add("a", {1}, {2.0}), UsageError);
  EXPECT_THROW(ps.at("missing"), UsageError);
  EXPECT_THROW(DiffArray<double>({2, 2}, {1.0}), UsageError);
}
