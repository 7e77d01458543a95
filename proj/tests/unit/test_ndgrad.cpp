#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include "unionret/errors.hpp"
#include "unionret/gradcheck.hpp"
#include "unionret/ndgrad.hpp"
#include "unionret/rng.hpp"

using namespace unionret;
using namespace unionret::nd;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, bool requires_grad = true) {
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = rng.normal();
    return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// erf by its Maclaurin series; converges quickly for |x| <= 3.
double erf_series(double x) {
    double term = x, sum = x;
    for (int n = 1; n < 60; ++n) {
        term *= -x * x / n;
        sum += term / (2 * n + 1);
    }
    return 2.0 / std::sqrt(std::numbers::pi) * sum;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

} // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
    Tape tape;
    auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    auto m = Tensor::from({2, 2}, {1, 2, 3, 4});
    EXPECT_EQ(values(matmul(tape, eye, m)), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, RowTimesColumn) {
    Tape tape;
    auto out = matmul(tape, Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4}));
    EXPECT_EQ(out.shape(), (Shape{1, 1}));
    EXPECT_EQ(out.item(), 11.0);
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
    Rng rng(1);
    auto a = random_tensor(rng, {4, 5});
    auto b = random_tensor(rng, {5, 3});
    auto w = random_tensor(rng, {4, 3}, false);
    auto report = grad_check([&](Tape& t) { return reduce_sum(t, mul(t, matmul(t, a, b), w)); },
                             {{"a", a}, {"b", b}}, 1e-5, 1e-6);
    EXPECT_TRUE(report.passed) << format_report(report);
}

TEST(Matmul, BatchBroadcastMatchesPerBatchProducts) {
    Rng rng(2);
    auto a = random_tensor(rng, {3, 2, 4}, false);
    auto b = random_tensor(rng, {4, 5}, false);
    Tape tape;
    auto out = matmul(tape, a, b);
    ASSERT_EQ(out.shape(), (Shape{3, 2, 5}));
    for (std::size_t bt = 0; bt < 3; ++bt)
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t j = 0; j < 5; ++j) {
                double s = 0.0;
                for (std::size_t k = 0; k < 4; ++k) s += a.data()[bt * 8 + i * 4 + k] * b.data()[k * 5 + j];
                EXPECT_NEAR(out.data()[bt * 10 + i * 5 + j], s, 1e-12);
            }
}

TEST(Matmul, ShapeMismatchRejected) {
    Tape tape;
    EXPECT_THROW(matmul(tape, Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ValidationError);
    EXPECT_THROW(matmul(tape, Tensor::zeros({2, 2, 3}), Tensor::zeros({3, 3, 1})), ValidationError);
}

TEST(Elementwise, GeluAndSigmoidAtZero) {
    Tape tape;
    EXPECT_EQ(gelu(tape, Tensor::scalar(0.0)).item(), 0.0);
    EXPECT_EQ(sigmoid(tape, Tensor::scalar(0.0)).item(), 0.5);
}

TEST(Elementwise, GeluOneMatchesErfOracle) {
    Tape tape;
    const double expected = 0.5 * (1.0 + erf_series(1.0 / std::numbers::sqrt2));
    EXPECT_NEAR(gelu(tape, Tensor::scalar(1.0)).item(), expected, 1e-12);
    EXPECT_NEAR(gelu(tape, Tensor::scalar(1.0)).item(), 0.841345, 1e-6);
    for (double x : {-2.5, -0.3, 0.7, 2.2}) {
        EXPECT_NEAR(gelu(tape, Tensor::scalar(x)).item(), x * 0.5 * (1.0 + erf_series(x / std::numbers::sqrt2)),
                    1e-12);
    }
}

TEST(Elementwise, SigmoidIsStableAtExtremes) {
    Tape tape;
    auto out = sigmoid(tape, Tensor::from({2}, {-800.0, 800.0}));
    EXPECT_EQ(out.data()[0], 0.0);
    EXPECT_EQ(out.data()[1], 1.0);
}

TEST(Elementwise, BinaryOpsAndScalarForms) {
    Tape tape;
    auto x = Tensor::from({2}, {1.5, -2.0});
    auto y = Tensor::from({2}, {0.5, 4.0});
    EXPECT_EQ(values(add(tape, x, y)), (std::vector<double>{2.0, 2.0}));
    EXPECT_EQ(values(sub(tape, x, y)), (std::vector<double>{1.0, -6.0}));
    EXPECT_EQ(values(mul(tape, x, y)), (std::vector<double>{0.75, -8.0}));
    EXPECT_EQ(values(scale(tape, x, 2.0)), (std::vector<double>{3.0, -4.0}));
    EXPECT_EQ(values(add(tape, x, 1.0)), (std::vector<double>{2.5, -1.0}));
    EXPECT_THROW(add(tape, x, Tensor::zeros({3})), ValidationError);
}

TEST(Elementwise, LerpIsExactForEqualEndpoints) {
    Tape tape;
    auto a = Tensor::from({3}, {0.1, -7.3, 1e-9});
    auto w = Tensor::from({3}, {0.3, 0.999, 1e-4});
    EXPECT_EQ(values(lerp(tape, a, a, w)), values(a));
}

TEST(Softmax, UniformRow) {
    Tape tape;
    auto out = softmax_lastdim(tape, Tensor::from({3}, {0, 0, 0}));
    for (double p : out.data()) EXPECT_NEAR(p, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
    Tape tape;
    auto out = softmax_lastdim(tape, Tensor::from({2}, {1000, 0}));
    EXPECT_EQ(out.data()[0], 1.0);
    EXPECT_LT(out.data()[1], 1e-300);
    EXPECT_TRUE(std::isfinite(out.data()[1]));
}

TEST(Softmax, RandomRowSumsToOneAndGradientMatches) {
    Rng rng(4);
    auto x = random_tensor(rng, {8});
    {
        Tape tape;
        auto p = softmax_lastdim(tape, x);
        double s = 0.0;
        for (double v : p.data()) {
            EXPECT_GE(v, 0.0);
            s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-9);
    }
    auto w = random_tensor(rng, {8}, false);
    auto report =
        grad_check([&](Tape& t) { return reduce_sum(t, mul(t, softmax_lastdim(t, x), w)); }, {{"x", x}}, 1e-5, 1e-6);
    EXPECT_TRUE(report.passed) << format_report(report);
}

TEST(LayerNorm, ConstantRowMapsToZero) {
    Tape tape;
    auto out = layer_norm(tape, Tensor::from({4}, {5, 5, 5, 5}), Tensor::from({4}, {1, 1, 1, 1}),
                          Tensor::zeros({4}), 1e-5);
    for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, ZeroGainYieldsBeta) {
    Rng rng(5);
    Tape tape;
    auto beta = Tensor::from({3}, {0.1, -0.2, 0.3});
    auto out = layer_norm(tape, random_tensor(rng, {2, 3}, false), Tensor::zeros({3}), beta, 1e-5);
    EXPECT_EQ(values(out), (std::vector<double>{0.1, -0.2, 0.3, 0.1, -0.2, 0.3}));
}

TEST(LayerNorm, RowsAreStandardized) {
    Rng rng(6);
    Tape tape;
    auto out = layer_norm(tape, random_tensor(rng, {3, 16}, false), Tensor::from({16}, std::vector<double>(16, 1.0)),
                          Tensor::zeros({16}), 1e-12);
    for (std::size_t r = 0; r < 3; ++r) {
        double mean = 0.0, var = 0.0;
        for (std::size_t d = 0; d < 16; ++d) mean += out.data()[r * 16 + d];
        mean /= 16;
        for (std::size_t d = 0; d < 16; ++d) var += std::pow(out.data()[r * 16 + d] - mean, 2);
        var /= 16;
        EXPECT_NEAR(mean, 0.0, 1e-7);
        EXPECT_NEAR(var, 1.0, 1e-7);
    }
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
    Rng rng(7);
    auto x = random_tensor(rng, {5});
    auto g = random_tensor(rng, {5});
    auto b = random_tensor(rng, {5});
    auto w = random_tensor(rng, {5}, false);
    auto report = grad_check([&](Tape& t) { return reduce_sum(t, mul(t, layer_norm(t, x, g, b, 1e-5), w)); },
                             {{"x", x}, {"gamma", g}, {"beta", b}}, 1e-5, 1e-6);
    EXPECT_TRUE(report.passed) << format_report(report);
}

TEST(ReduceMean, LengthOneAxisIsIdentity) {
    Tape tape;
    auto x = Tensor::from({2, 1, 3}, {1, 2, 3, 4, 5, 6});
    auto out = reduce_mean(tape, x, 1);
    EXPECT_EQ(out.shape(), (Shape{2, 3}));
    EXPECT_EQ(values(out), values(x));
}

TEST(ReduceMean, TokenAxisHandArithmetic) {
    Tape tape;
    auto out = reduce_mean(tape, Tensor::from({2, 2}, {1, 3, 5, 7}), 0);
    EXPECT_EQ(values(out), (std::vector<double>{3, 5}));
}

TEST(ReduceMean, GradientIsUniform) {
    auto x = Tensor::from({4}, {1, 2, 3, 4}, true);
    Tape tape;
    tape.backward(reduce_mean(tape, x, 0));
    for (double g : x.grad()) EXPECT_EQ(g, 0.25);
}

TEST(ReduceMean, InvalidAxisRejected) {
    Tape tape;
    EXPECT_THROW(reduce_mean(tape, Tensor::zeros({2, 2}), 2), ValidationError);
}

TEST(Backward, SumGivesOnes) {
    auto x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    Tape tape;
    tape.backward(reduce_sum(tape, x));
    EXPECT_EQ(x.grad_or_zeros(), std::vector<double>(6, 1.0));
}

TEST(Backward, CosineOfVectorWithItselfIsStationaryAlongIt) {
    Rng rng(8);
    auto a = random_tensor(rng, {1, 6});
    Tape tape;
    auto n = l2_normalize_rows(tape, a);
    auto sim = reduce_sum(tape, mul(tape, n, n));
    EXPECT_NEAR(sim.item(), 1.0, 1e-14);
    tape.backward(sim);
    double dot = 0.0;
    for (std::size_t i = 0; i < 6; ++i) dot += a.grad()[i] * a.data()[i];
    EXPECT_NEAR(dot, 0.0, 1e-12);
}

TEST(Backward, RepeatedCallsAccumulateLeafGradients) {
    auto x = Tensor::from({3}, {1, 2, 3}, true);
    Tape tape;
    auto loss = reduce_sum(tape, mul(tape, x, x));
    tape.backward(loss);
    tape.backward(loss);
    EXPECT_EQ(x.grad_or_zeros(), (std::vector<double>{4, 8, 12}));
    x.zero_grad();
    tape.backward(loss);
    EXPECT_EQ(x.grad_or_zeros(), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, SharedIntermediateAccumulatesBothPaths) {
    auto x = Tensor::from({2}, {0.5, -1.5}, true);
    Tape tape;
    auto s = sigmoid(tape, x);
    auto loss = reduce_sum(tape, add(tape, mul(tape, s, s), s));
    tape.backward(loss);
    for (std::size_t i = 0; i < 2; ++i) {
        const double sv = 1.0 / (1.0 + std::exp(-x.data()[i]));
        EXPECT_NEAR(x.grad()[i], (2 * sv + 1) * sv * (1 - sv), 1e-14);
    }
}

TEST(Backward, RejectsNonScalarLossAndEmptyTape) {
    auto x = Tensor::from({2}, {1, 2}, true);
    Tape tape;
    auto y = scale(tape, x, 2.0);
    EXPECT_THROW(tape.backward(y), ValidationError);
    Tape empty;
    EXPECT_THROW(empty.backward(Tensor::scalar(1.0, true)), ValidationError);
}

TEST(Backward, ReplayIsDeterministic) {
    auto run = [] {
        Rng rng(9);
        auto a = random_tensor(rng, {3, 4});
        auto b = random_tensor(rng, {4, 2});
        Tape tape;
        tape.backward(reduce_sum(tape, gelu(tape, matmul(tape, a, b))));
        return std::make_pair(a.grad_or_zeros(), b.grad_or_zeros());
    };
    EXPECT_EQ(run(), run());
}

TEST(Tape, NonRecordingTapeKeepsNothing) {
    auto x = Tensor::from({2}, {1, 2}, true);
    Tape tape(false);
    auto y = mul(tape, x, x);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_EQ(tape.size(), 0u);
}

TEST(Shapes, StackSelectSliceConcatTranspose) {
    Tape tape;
    auto a = Tensor::from({2, 2}, {1, 2, 3, 4});
    auto b = Tensor::from({2, 2}, {5, 6, 7, 8});
    const std::array<Tensor, 2> rows{a, b};
    auto s = stack_tokens(tape, rows);
    EXPECT_EQ(s.shape(), (Shape{2, 2, 2}));
    EXPECT_EQ(values(s), (std::vector<double>{1, 2, 5, 6, 3, 4, 7, 8}));
    EXPECT_EQ(values(select_token(tape, s, 1)), values(b));
    EXPECT_EQ(values(slice_lastdim(tape, a, 1, 1)), (std::vector<double>{2, 4}));
    EXPECT_EQ(values(concat_lastdim(tape, rows)), (std::vector<double>{1, 2, 5, 6, 3, 4, 7, 8}));
    EXPECT_EQ(values(transpose_last2(tape, a)), (std::vector<double>{1, 3, 2, 4}));
    EXPECT_EQ(values(add_trailing(tape, s, a)), (std::vector<double>{2, 4, 8, 10, 4, 6, 10, 12}));
    EXPECT_THROW(select_token(tape, s, 2), ValidationError);
    EXPECT_THROW(slice_lastdim(tape, a, 1, 2), ValidationError);
}

TEST(Tensors, RankAndSizeInvariants) {
    EXPECT_THROW(Tensor::zeros({}), ValidationError);
    EXPECT_THROW(Tensor::zeros({1, 2, 3, 4}), ValidationError);
    EXPECT_THROW(Tensor::zeros({2, 0}), ValidationError);
    EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), ValidationError);
}

TEST(CrossEntropy, MatchesLogSumExpFormula) {
    Tape tape;
    auto logits = Tensor::from({2, 3}, {1, 2, 3, 0, 0, 5});
    const std::array<std::size_t, 2> labels{2, 0};
    const double l0 = std::log(std::exp(1) + std::exp(2) + std::exp(3)) - 3;
    const double l1 = std::log(2 + std::exp(5)) - 0;
    EXPECT_NEAR(softmax_cross_entropy(tape, logits, labels).item(), (l0 + l1) / 2, 1e-14);
}

TEST(NormalizeRows, ZeroRowRejected) {
    Tape tape;
    EXPECT_THROW(l2_normalize_rows(tape, Tensor::from({2, 2}, {1, 0, 0, 0})), ValidationError);
}
