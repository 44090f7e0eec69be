#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cpdae/gradcheck.hpp"
#include "cpdae/rng.hpp"
#include "cpdae/tensor.hpp"

using namespace cpdae;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, bool rg = false) {
    return Tensor<T>::randn(std::move(shape), rng, T(1), rg);
}

// Naive triple-loop reference multiply, double accumulation.
std::vector<double> naive_matmul(const std::vector<float>& a, const std::vector<float>& b,
                                 std::size_t m, std::size_t k, std::size_t n) {
    std::vector<double> c(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t kk = 0; kk < k; ++kk)
                c[i * n + j] += static_cast<double>(a[i * k + kk]) * b[kk * n + j];
    return c;
}

}  // namespace

TEST(Matmul, IdentityTimesMatrix) {
    auto eye = Tensor<float>::from_data({2, 2}, {1, 0, 0, 1});
    auto a = Tensor<float>::from_data({2, 2}, {3, -1, 2, 5});
    auto c = matmul<float>(nullptr, eye, a);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(c.data()[i], a.data()[i]);
}

TEST(Matmul, HandComputed) {
    auto a = Tensor<float>::from_data({2, 2}, {1, 2, 3, 4});
    auto b = Tensor<float>::from_data({2, 1}, {0, 1});
    auto c = matmul<float>(nullptr, a, b);
    ASSERT_EQ(c.shape(), (Shape{2, 1}));
    EXPECT_FLOAT_EQ(c.data()[0], 2.0f);
    EXPECT_FLOAT_EQ(c.data()[1], 4.0f);
}

TEST(Matmul, MatchesNaiveOracle) {
    Rng rng(7);
    auto a = random_tensor<float>({8, 8}, rng);
    auto b = random_tensor<float>({8, 8}, rng);
    auto c = matmul<float>(nullptr, a, b);
    auto ref = naive_matmul(a.values(), b.values(), 8, 8, 8);
    for (std::size_t i = 0; i < 64; ++i)
        EXPECT_NEAR(c.data()[i], ref[i], 1e-6) << "at " << i;
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    auto a = Tensor<float>::zeros({2, 3});
    auto b = Tensor<float>::zeros({4, 5});
    try {
        matmul<float>(nullptr, a, b);
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("(2x3)"), std::string::npos) << msg;
        EXPECT_NE(msg.find("(4x5)"), std::string::npos) << msg;
    }
}

TEST(Matmul, ThreadedMatchesSingleThread) {
    Rng rng(11);
    auto a = random_tensor<float>({64, 96}, rng);
    auto b = random_tensor<float>({96, 128}, rng);
    set_num_threads(1);
    auto c1 = matmul<float>(nullptr, a, b);
    set_num_threads(2);
    auto c2 = matmul<float>(nullptr, a, b);
    set_num_threads(1);
    for (std::size_t i = 0; i < c1.numel(); ++i)
        ASSERT_EQ(c1.data()[i], c2.data()[i]) << "thread count changed bits at " << i;
}

TEST(Pointwise, SigmoidFixedPoints) {
    auto x = Tensor<float>::from_data({2}, {0.0f, std::log(3.0f)});
    auto y = sigmoid<float>(nullptr, x);
    EXPECT_NEAR(y.data()[0], 0.5f, 1e-7);
    EXPECT_NEAR(y.data()[1], 0.75f, 1e-6);
}

TEST(Pointwise, GeluMatchesHighPrecisionFormula) {
    // Long-double evaluation of the tanh approximation as the oracle.
    auto oracle = [](long double v) {
        const long double alpha = 0.7978845608028653558798921198687L;
        const long double u = alpha * (v + 0.044715L * v * v * v);
        return 0.5L * v * (1.0L + std::tanh(u));
    };
    std::vector<float> pts = {-2, -1, 0, 1, 2};
    auto x = Tensor<float>::from_data({5}, pts);
    auto y = gelu<float>(nullptr, x);
    for (std::size_t i = 0; i < pts.size(); ++i)
        EXPECT_NEAR(y.data()[i], static_cast<double>(oracle(pts[i])), 1e-6);
}

TEST(Pointwise, AddMulAndScalarBroadcast) {
    auto a = Tensor<float>::from_data({2}, {1, 2});
    auto b = Tensor<float>::from_data({2}, {10, 20});
    EXPECT_FLOAT_EQ(add<float>(nullptr, a, b).data()[1], 22.0f);
    EXPECT_FLOAT_EQ(mul<float>(nullptr, a, b).data()[1], 40.0f);
    EXPECT_FLOAT_EQ(add_scalar<float>(nullptr, a, 5.0f).data()[0], 6.0f);
    EXPECT_FLOAT_EQ(scale<float>(nullptr, a, 3.0f).data()[1], 6.0f);
    auto c = Tensor<float>::zeros({3});
    EXPECT_THROW(add<float>(nullptr, a, c), DimensionError);
}

TEST(LayerNorm, ConstantRowMapsToBias) {
    auto x = Tensor<float>::full({1, 4}, 2.5f);
    auto gain = Tensor<float>::full({4}, 1.0f);
    auto bias = Tensor<float>::zeros({4});
    auto y = layer_norm<float>(nullptr, x, gain, bias);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(y.data()[j], 0.0f, 1e-5);
}

TEST(LayerNorm, AlreadyNormalizedRow) {
    auto x = Tensor<float>::from_data({1, 2}, {1, -1});
    auto gain = Tensor<float>::full({2}, 1.0f);
    auto bias = Tensor<float>::zeros({2});
    auto y = layer_norm<float>(nullptr, x, gain, bias, 1e-12f);
    EXPECT_NEAR(y.data()[0], 1.0f, 1e-4);
    EXPECT_NEAR(y.data()[1], -1.0f, 1e-4);
}

TEST(LayerNorm, MatchesDirectFormula) {
    Rng rng(3);
    auto x = random_tensor<float>({4, 8}, rng);
    auto gain = random_tensor<float>({8}, rng);
    auto bias = random_tensor<float>({8}, rng);
    const float eps = 1e-5f;
    auto y = layer_norm<float>(nullptr, x, gain, bias, eps);
    for (std::size_t i = 0; i < 4; ++i) {
        double mean = 0, var = 0;
        for (std::size_t j = 0; j < 8; ++j) mean += x.data()[i * 8 + j];
        mean /= 8;
        for (std::size_t j = 0; j < 8; ++j) {
            double d = x.data()[i * 8 + j] - mean;
            var += d * d;
        }
        var /= 8;
        for (std::size_t j = 0; j < 8; ++j) {
            double expect =
                (x.data()[i * 8 + j] - mean) / std::sqrt(var + eps) * gain.data()[j] +
                bias.data()[j];
            EXPECT_NEAR(y.data()[i * 8 + j], expect, 1e-6);
        }
    }
}

TEST(LayerNorm, WidthMismatchThrows) {
    auto x = Tensor<float>::zeros({2, 4});
    auto gain = Tensor<float>::zeros({3});
    auto bias = Tensor<float>::zeros({4});
    EXPECT_THROW(layer_norm<float>(nullptr, x, gain, bias), DimensionError);
}

TEST(Backward, SumGivesOnes) {
    Tape<float> tape;
    auto x = Tensor<float>::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    auto loss = sum_all(&tape, x);
    tape.backward(loss);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_FLOAT_EQ(x.grad()[i], 1.0f);
}

TEST(Backward, SigmoidAtZero) {
    Tape<float> tape;
    auto x = Tensor<float>::scalar(0.0f, true);
    auto loss = sigmoid(&tape, x);
    tape.backward(loss);
    EXPECT_NEAR(x.grad()[0], 0.25f, 1e-7);
}

TEST(Backward, NonScalarLossIsContractError) {
    Tape<float> tape;
    auto x = Tensor<float>::zeros({2}, true);
    auto y = scale(&tape, x, 2.0f);
    EXPECT_THROW(tape.backward(y), ContractError);
}

TEST(Backward, EmptyTapeIsContractError) {
    Tape<float> tape;
    auto x = Tensor<float>::scalar(1.0f, true);
    EXPECT_THROW(tape.backward(x), ContractError);
}

TEST(Backward, CompositeMatchesFiniteDifferences) {
    // matmul -> gelu -> sum against central differences in 64-bit.
    Rng rng(5);
    auto a = random_tensor<double>({3, 4}, rng);
    auto b = random_tensor<double>({4, 2}, rng);
    a.set_name("a");
    b.set_name("b");
    auto f = [&](Tape<double>& tape) {
        auto c = matmul(&tape, a, b);
        auto g = gelu(&tape, c);
        return sum_all(&tape, g);
    };
    auto report = grad_check({a, b}, f, 1e-4);
    EXPECT_LT(report.max_rel_err, 1e-4) << report.summary();
}

TEST(Backward, GradientAccumulatesAcrossReuse) {
    Tape<float> tape;
    auto x = Tensor<float>::scalar(3.0f, true);
    auto y = mul(&tape, x, x);  // x used twice -> dy/dx = 2x
    tape.backward(y);
    EXPECT_FLOAT_EQ(x.grad()[0], 6.0f);
}

TEST(Backward, LinearityOfGradients) {
    // grad of (a*f + b*g) == a*grad(f) + b*grad(g)
    Rng rng(9);
    const float ca = 2.5f, cb = -1.25f;
    auto make_x = [&](std::vector<float> vals) {
        return Tensor<float>::from_data({4}, std::move(vals), true);
    };
    std::vector<float> vals = {0.3f, -0.7f, 1.1f, 0.2f};

    auto run = [&](bool with_f, bool with_g, float wf, float wg) {
        Tape<float> tape;
        auto x = make_x(vals);
        Tensor<float> total;
        if (with_f) {
            auto f = sum_all(&tape, sigmoid(&tape, x));
            total = scale(&tape, f, wf);
        }
        if (with_g) {
            auto g = sum_all(&tape, gelu(&tape, x));
            auto sg = scale(&tape, g, wg);
            total = with_f ? add(&tape, total, sg) : sg;
        }
        tape.backward(total);
        return x.grad();
    };

    auto gf = run(true, false, 1.0f, 0.0f);
    auto gg = run(false, true, 0.0f, 1.0f);
    auto gboth = run(true, true, ca, cb);
    for (std::size_t i = 0; i < 4; ++i)
        EXPECT_NEAR(gboth[i], ca * gf[i] + cb * gg[i], 1e-6);
}

TEST(Backward, DeterministicBitIdentical) {
    auto run = [] {
        Rng rng(123);
        Tape<float> tape;
        auto a = Tensor<float>::randn({16, 16}, rng, 1.0f, true);
        auto b = Tensor<float>::randn({16, 16}, rng, 1.0f, true);
        auto c = matmul(&tape, a, b);
        auto g = gelu(&tape, c);
        auto loss = mean_all(&tape, g);
        tape.backward(loss);
        return std::make_tuple(loss.item(), a.grad(), b.grad());
    };
    auto r1 = run();
    auto r2 = run();
    EXPECT_EQ(std::get<0>(r1), std::get<0>(r2));
    EXPECT_EQ(std::get<1>(r1), std::get<1>(r2));
    EXPECT_EQ(std::get<2>(r1), std::get<2>(r2));
}

TEST(Tape, TopologicalAndSingleVisit) {
    Tape<float> tape;
    auto x = Tensor<float>::scalar(1.0f, true);
    auto y = sigmoid(&tape, x);
    auto z = scale(&tape, y, 2.0f);
    auto loss = sum_all(&tape, z);
    // inputs recorded before consumers
    const auto& entries = tape.entries();
    ASSERT_EQ(entries.size(), 3u);
    for (std::size_t i = 1; i < entries.size(); ++i)
        for (auto in : entries[i].inputs) {
            bool found_before = in == x.id();
            for (std::size_t j = 0; j < i; ++j) found_before |= entries[j].output == in;
            EXPECT_TRUE(found_before);
        }
    tape.backward(loss);
    EXPECT_EQ(tape.last_visit_count(), entries.size());
}

TEST(CheckedMode, ReportsNonFinite) {
    set_checked_mode(true);
    Tape<float> tape;
    auto x = Tensor<float>::from_data({2}, {1e30f, 1e30f}, true);
    auto y = mul(&tape, x, x);  // overflows to inf in float
    (void)y;
    auto bad = [&] { auto z = mul(&tape, y, y); };
    EXPECT_THROW(bad(), NumericalError);
    set_checked_mode(false);
}

TEST(GradCheck, PolynomialIsExact) {
    auto x = Tensor<double>::scalar(3.0, true).set_name("x");
    auto f = [&](Tape<double>& tape) { return mul(&tape, x, x); };
    auto report = grad_check({x}, f, 1e-4);
    ASSERT_EQ(report.per_param.size(), 1u);
    EXPECT_NEAR(report.per_param[0].analytic, 6.0, 1e-12);
    EXPECT_NEAR(report.per_param[0].numeric, 6.0, 1e-8);
    EXPECT_LT(report.max_rel_err, 1e-8);
}

TEST(GradCheck, NonFiniteProbeNamesParameter) {
    auto x = Tensor<double>::scalar(0.0, true).set_name("edge_param");
    auto f = [&](Tape<double>& tape) {
        // log of a negative number once perturbed below zero
        auto shifted = add_scalar(&tape, x, -1e-9);
        auto v = std::log(shifted.item());
        auto out = Tensor<double>::scalar(v);
        auto xi = shifted.impl();
        auto oi = out.impl();
        tape.record("log_probe", {shifted}, out, [xi, oi] {
            xi->grad[0] += oi->grad[0] / xi->values[0];
        });
        return out;
    };
    try {
        grad_check({x}, f, 1e-4);
        FAIL() << "expected ProbeError";
    } catch (const ProbeError& e) {
        EXPECT_NE(std::string(e.what()).find("edge_param"), std::string::npos);
    }
}

TEST(Ops, SoftmaxRowsMasked) {
    auto x = Tensor<float>::from_data({1, 4}, {1, 1, 100, 100});
    auto p = softmax_rows<float>(nullptr, x, 2);  // last two columns masked out
    EXPECT_NEAR(p.data()[0], 0.5f, 1e-6);
    EXPECT_NEAR(p.data()[1], 0.5f, 1e-6);
    EXPECT_FLOAT_EQ(p.data()[2], 0.0f);
    EXPECT_FLOAT_EQ(p.data()[3], 0.0f);
}

TEST(Ops, GatherRowsOutOfRange) {
    auto table = Tensor<float>::zeros({4, 2});
    EXPECT_THROW(gather_rows<float>(nullptr, table, {0, 4}), ContractError);
}

TEST(Ops, BlockAndConcatRoundTrip) {
    Rng rng(17);
    auto x = random_tensor<float>({4, 6}, rng);
    auto left = block<float>(nullptr, x, 0, 4, 0, 3);
    auto right = block<float>(nullptr, x, 0, 4, 3, 3);
    auto back = concat_cols<float>(nullptr, {left, right});
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(back.data()[i], x.data()[i]);

    auto top = block<float>(nullptr, x, 0, 2, 0, 6);
    auto bottom = block<float>(nullptr, x, 2, 2, 0, 6);
    auto back2 = concat_rows<float>(nullptr, {top, bottom});
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(back2.data()[i], x.data()[i]);
}

TEST(Ops, CompositeGradCheckThroughStructuralOps) {
    Rng rng(23);
    auto x = Tensor<double>::randn({4, 6}, rng, 1.0, true).set_name("x");
    auto v = Tensor<double>::randn({3}, rng, 1.0, true).set_name("v");
    auto s = Tensor<double>::randn({4}, rng, 0.1, true).set_name("s");
    auto f = [&](Tape<double>& tape) {
        auto left = block(&tape, x, 0, 4, 0, 3);
        auto right = block(&tape, x, 0, 4, 3, 3);
        auto cat = concat_rows(&tape, std::vector<Tensor<double>>{left, right});
        auto biased = add_rowvec(&tape, cat, v);
        auto sm = softmax_rows(&tape, biased, 2);
        auto tr = transpose(&tape, sm);
        auto shifted = add_scalar(&tape, s, 3.0);  // keep divisors positive
        auto dv = div_rows(&tape, transpose(&tape, tr), shifted);
        auto nrm = l2_normalize_rows(&tape, add_scalar(&tape, dv, 0.5));
        auto masked = fill_diagonal(&tape, nrm, 0.25);
        auto rs = row_sum(&tape, masked);
        return mean_all(&tape, sigmoid(&tape, rs));
    };
    auto report = grad_check({x, v, s}, f, 1e-5);
    EXPECT_LT(report.max_rel_err, 1e-4) << report.summary();
}

TEST(Ops, CrossEntropyUniformAndAnchors) {
    auto logits = Tensor<float>::zeros({2, 8});
    auto loss = cross_entropy_rows<float>(nullptr, logits, {3, 5});
    EXPECT_NEAR(loss.item(), std::log(8.0f), 1e-6);
    auto anchored = cross_entropy_rows<float>(nullptr, logits, {3, 5}, {0});
    EXPECT_NEAR(anchored.item(), std::log(8.0f), 1e-6);
}

TEST(Ops, CrossEntropyGradCheck) {
    Rng rng(31);
    auto logits = Tensor<double>::randn({3, 5}, rng, 1.0, true).set_name("logits");
    std::vector<int> labels = {1, 4, 0};
    auto f = [&](Tape<double>& tape) { return cross_entropy_rows(&tape, logits, labels); };
    auto report = grad_check({logits}, f, 1e-5);
    EXPECT_LT(report.max_rel_err, 1e-4) << report.summary();
}

TEST(Ops, DropoutMaskAndScale) {
    Rng rng(41);
    auto x = Tensor<float>::full({1000}, 1.0f);
    auto y = dropout<float>(nullptr, x, 0.25, rng);
    std::size_t zeros = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) {
        if (y.data()[i] == 0.0f)
            ++zeros;
        else
            EXPECT_NEAR(y.data()[i], 1.0f / 0.75f, 1e-6);
    }
    EXPECT_NEAR(static_cast<double>(zeros) / 1000.0, 0.25, 0.05);
}
