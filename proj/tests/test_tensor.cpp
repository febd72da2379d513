#include <gtest/gtest.h>

#include <cmath>

#include "clickseg/rng.hpp"
#include "clickseg/tensor.hpp"

using namespace clickseg;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(v));
}

// Independent oracle: textbook triple loop.
std::vector<double> naive_matmul(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> c(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += a.at(i, p) * b.at(p, j);
            c[i * n + j] = acc;
        }
    return c;
}

} // namespace

TEST(Matmul, IdentityAndHandCases) {
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor m({2, 2}, {5, 6, 7, 8});
    EXPECT_EQ(matmul(eye, m).values(), (std::vector<double>{5, 6, 7, 8}));

    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor ones({2, 1}, {1, 1});
    auto c = matmul(a, ones);
    EXPECT_EQ(c.shape(), (Shape{2, 1}));
    EXPECT_EQ(c.values(), (std::vector<double>{3, 7}));
}

TEST(Matmul, MatchesTripleLoopOracle) {
    Rng rng(7);
    auto a = random_tensor({7, 5}, rng);
    auto b = random_tensor({5, 3}, rng);
    auto c = matmul(a, b);
    auto ref = naive_matmul(a, b);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(c[i], ref[i], 1e-12);
}

TEST(Matmul, BitExactUpTo16) {
    Rng rng(11);
    for (std::size_t m = 1; m <= 16; m += 3)
        for (std::size_t k = 1; k <= 16; k += 5)
            for (std::size_t n = 1; n <= 16; n += 4) {
                auto a = random_tensor({m, k}, rng);
                auto b = random_tensor({k, n}, rng);
                EXPECT_EQ(matmul(a, b).values(), naive_matmul(a, b));
            }
}

TEST(Matmul, ShapeMismatchThrows) {
    EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST(Softmax, ClosedForms) {
    auto s = softmax(Tensor({2}, {0, 0}), 0);
    EXPECT_DOUBLE_EQ(s[0], 0.5);
    EXPECT_DOUBLE_EQ(s[1], 0.5);
    auto t = softmax(Tensor({2}, {std::log(3.0), std::log(1.0)}), 0);
    EXPECT_NEAR(t[0], 0.75, 1e-15);
    EXPECT_NEAR(t[1], 0.25, 1e-15);
}

TEST(Softmax, MatchesExpNormalizeOracle) {
    Rng rng(3);
    auto z = random_tensor({9}, rng, -5, 5);
    auto s = softmax(z, 0);
    double denom = 0.0;
    for (double v : z.data()) denom += std::exp(v);
    double total = 0.0;
    for (std::size_t i = 0; i < 9; ++i) {
        EXPECT_NEAR(s[i], std::exp(z[i]) / denom, 1e-15);
        total += s[i];
    }
    EXPECT_NEAR(total, 1.0, 1e-9);
}

TEST(Softmax, RowsOfAnyAxisAreStochastic) {
    Rng rng(5);
    auto z = random_tensor({3, 4, 5}, rng, -30, 30);
    for (std::size_t axis = 0; axis < 3; ++axis) {
        auto s = softmax(z, axis);
        const std::size_t len = z.dim(axis);
        std::size_t inner = 1;
        for (std::size_t d = axis + 1; d < 3; ++d) inner *= z.dim(d);
        const std::size_t outer = z.numel() / (len * inner);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t in = 0; in < inner; ++in) {
                double total = 0.0;
                for (std::size_t j = 0; j < len; ++j) {
                    const double v = s[o * len * inner + j * inner + in];
                    EXPECT_GE(v, 0.0);
                    total += v;
                }
                EXPECT_NEAR(total, 1.0, 1e-9);
            }
    }
    EXPECT_THROW(softmax(z, 3), ShapeError);
}

TEST(Softmax, StableForHugeLogits) {
    auto s = softmax(Tensor({3}, {1000, 1000, -1000}), 0);
    EXPECT_NEAR(s[0], 0.5, 1e-12);
    EXPECT_NEAR(s[2], 0.0, 1e-12);
}

TEST(Elementwise, BasicValues) {
    EXPECT_DOUBLE_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
    auto z = mul(Tensor({3}, {1, 2, 3}), Tensor({3}, {0, 0, 0}));
    EXPECT_EQ(z.values(), (std::vector<double>{0, 0, 0}));
    EXPECT_EQ(relu(Tensor({3}, {-1, 0, 2})).values(), (std::vector<double>{0, 0, 2}));
    EXPECT_EQ(clamp(Tensor({3}, {-1, 0.5, 2}), 0, 1).values(), (std::vector<double>{0, 0.5, 1}));
    EXPECT_EQ(scale(Tensor({2}, {1, -2}), 3).values(), (std::vector<double>{3, -6}));
    EXPECT_EQ(sub(Tensor({2}, {1, 2}), Tensor({2}, {3, 5})).values(), (std::vector<double>{-2, -3}));
}

TEST(Elementwise, SigmoidGradientClosedForm) {
    Tensor x({}, {2.0}, true);
    Tape tape;
    auto y = sigmoid(x);
    tape.backward(y);
    const double s = 1.0 / (1.0 + std::exp(-2.0));
    EXPECT_NEAR(x.grad()[0], s * (1 - s), 1e-10);
}

TEST(Elementwise, TrailingSingletonBroadcast) {
    Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
    auto rows = mul(a, Tensor({2, 1}, {10, 100}));
    EXPECT_EQ(rows.values(), (std::vector<double>{10, 20, 30, 400, 500, 600}));
    auto cols = add(a, Tensor({1, 3}, {1, 1, 1}));
    EXPECT_EQ(cols.values(), (std::vector<double>{2, 3, 4, 5, 6, 7}));
    EXPECT_THROW(add(a, Tensor::zeros({3, 2})), ShapeError);
    EXPECT_THROW(add(a, Tensor::zeros({3})), ShapeError);
}

TEST(Losses, HandValues) {
    Tensor x({3}, {0.3, -1, 2});
    EXPECT_DOUBLE_EQ(mse(x, x).item(), 0.0);
    EXPECT_DOUBLE_EQ(l1(Tensor({2}, {1, 3}), Tensor({2}, {0, 1})).item(), 1.5);
    EXPECT_THROW(mse(x, Tensor::zeros({2})), ShapeError);
}

TEST(Losses, BceMatchesDirectFormula) {
    Rng rng(9);
    std::vector<double> p(20), y(20);
    for (std::size_t i = 0; i < 20; ++i) {
        p[i] = rng.uniform(0.01, 0.99);
        y[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    }
    double ref = 0.0;
    for (std::size_t i = 0; i < 20; ++i) ref += y[i] * std::log(p[i]) + (1 - y[i]) * std::log(1 - p[i]);
    ref = -ref / 20.0;
    EXPECT_NEAR(bce(Tensor({20}, p), Tensor({20}, y)).item(), ref, 1e-10);
}

TEST(Losses, BceWithLogitsMatchesProbabilityForm) {
    Rng rng(17);
    std::vector<double> z(20), y(20), p(20);
    for (std::size_t i = 0; i < 20; ++i) {
        z[i] = rng.uniform(-6.0, 6.0);
        y[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
        p[i] = 1.0 / (1.0 + std::exp(-z[i]));
    }
    EXPECT_NEAR(bce_with_logits(Tensor({20}, z), Tensor({20}, y)).item(), bce(Tensor({20}, p), Tensor({20}, y)).item(),
                1e-12);
    // Saturated logits stay finite and keep a full-size gradient.
    Tensor far({2}, {-800.0, 800.0});
    far.set_requires_grad(true);
    Tape tape;
    const Tensor loss = bce_with_logits(far, Tensor({2}, {1.0, 0.0}));
    EXPECT_NEAR(loss.item(), 800.0, 1e-9);
    tape.backward(loss);
    EXPECT_NEAR(far.grad()[0], -0.5, 1e-12);
    EXPECT_NEAR(far.grad()[1], 0.5, 1e-12);
    EXPECT_THROW(bce_with_logits(Tensor({1}, {0.0}), Tensor({1}, {0.5})), DomainError);
}

TEST(Losses, BceDomainErrors) {
    EXPECT_THROW(bce(Tensor({1}, {0.0}), Tensor({1}, {1.0})), DomainError);
    EXPECT_THROW(bce(Tensor({1}, {1.0}), Tensor({1}, {0.0})), DomainError);
    EXPECT_THROW(bce(Tensor({1}, {0.5}), Tensor({1}, {0.5})), DomainError);
}

TEST(Tensor, RejectsNonFiniteAndBadShape) {
    EXPECT_THROW(Tensor({1}, {std::nan("")}), DomainError);
    EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), ShapeError);
}

TEST(Backward, SquareClosedForm) {
    Tensor x({}, {3.0}, true);
    Tape tape;
    auto loss = mul(x, x);
    tape.backward(loss);
    EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, SecondCallWithoutResetThrows) {
    Tensor x({}, {3.0}, true);
    Tape tape;
    auto loss = mul(x, x);
    tape.backward(loss);
    EXPECT_THROW(tape.backward(loss), ContractError);
    tape.reset();
    x.zero_grad();
    auto again = mul(x, x);
    tape.backward(again);
    EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, NonScalarLossThrows) {
    Tensor x({2}, {1, 2}, true);
    Tape tape;
    auto y = scale(x, 2);
    EXPECT_THROW(tape.backward(y), ShapeError);
}

TEST(Backward, NoTapeMeansNoRecording) {
    Tensor x({2}, {1, 2}, true);
    auto y = scale(x, 2);
    EXPECT_FALSE(y.requires_grad());
    Tape tape;
    {
        NoGradGuard guard;
        EXPECT_FALSE(scale(x, 2).requires_grad());
    }
    EXPECT_TRUE(scale(x, 2).requires_grad());
}

TEST(Backward, MseOfSoftmaxMatchesFiniteDifferences) {
    Rng rng(21);
    auto w = random_tensor({4, 3}, rng);
    auto x = random_tensor({1, 4}, rng);
    auto y = softmax(random_tensor({1, 3}, rng), 1);
    const double err = grad_check([&] { return mse(softmax(matmul(x, w), 1), y); }, std::vector<Tensor>{w}, 1e-5);
    EXPECT_LT(err, 1e-4);
}

TEST(Backward, DeterministicAcrossRuns) {
    auto run = [] {
        Rng rng(99);
        auto w = random_tensor({5, 5}, rng);
        w.set_requires_grad(true);
        auto x = random_tensor({3, 5}, rng);
        Tape tape;
        auto loss = mean(gelu(layer_norm(matmul(x, w))));
        tape.backward(loss);
        return std::vector<double>(w.grad().begin(), w.grad().end());
    };
    EXPECT_EQ(run(), run());
}

TEST(GradCheck, SumIsAllOnes) {
    Rng rng(1);
    auto x = random_tensor({4, 3}, rng);
    EXPECT_LT(grad_check([](const Tensor& t) { return sum(t); }, x), 1e-9);
}

TEST(GradCheck, DetectsSabotagedGradient) {
    Rng rng(2);
    auto x = random_tensor({6}, rng);
    auto wrong_square = [](const Tensor& t) {
        std::vector<double> out(t.numel());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = t[i] * t[i];
        auto tn = t;
        return sum(custom_op({t}, t.shape(), out, [tn](std::span<const double> g) {
            std::vector<double> gx(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * 3.0 * tn[i]; // should be 2x
            return std::vector<std::vector<double>>{gx};
        }));
    };
    EXPECT_GT(grad_check(wrong_square, x), 1e-2);
}

// Every differentiable op, ten random draws each.
TEST(GradCheck, EveryOpOnRandomInputs) {
    struct Case {
        const char* name;
        std::function<Tensor(const Tensor&)> fn;
    };
    Rng rng(1234);
    for (int trial = 0; trial < 10; ++trial) {
        auto other = random_tensor({3, 4}, rng);
        auto mat = random_tensor({4, 2}, rng);
        std::vector<double> labels(12);
        for (auto& v : labels) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
        Tensor y({3, 4}, labels);
        auto gmap = std::make_shared<SparseMap>(SparseMap::gather({3, 4}, {2, 3}, {0, 5, 5, 11, 2, 7}));
        const std::vector<Case> cases = {
            {"matmul_left", [&](const Tensor& t) { return sum(matmul(t, mat)); }},
            {"matmul_right", [&](const Tensor& t) { return sum(matmul(other, transpose(t))); }},
            {"add", [&](const Tensor& t) { return sum(mul(add(t, other), other)); }},
            {"add_bcast", [&](const Tensor& t) { return sum(mul(add(other, slice_cols(t, 0, 1)), other)); }},
            {"sub", [&](const Tensor& t) { return sum(mul(sub(other, t), other)); }},
            {"mul_bcast", [&](const Tensor& t) { return sum(mul(other, slice_cols(t, 1, 2))); }},
            {"sigmoid", [&](const Tensor& t) { return sum(mul(sigmoid(t), other)); }},
            {"gelu", [&](const Tensor& t) { return sum(mul(gelu(t), other)); }},
            {"relu", [&](const Tensor& t) { return sum(mul(relu(add_scalar(t, 0.0)), other)); }},
            {"clamp", [&](const Tensor& t) { return sum(mul(clamp(t, -2.0, 2.0), other)); }},
            {"softmax0", [&](const Tensor& t) { return sum(mul(softmax(t, 0), other)); }},
            {"softmax1", [&](const Tensor& t) { return sum(mul(softmax(t, 1), other)); }},
            {"layer_norm", [&](const Tensor& t) { return sum(mul(layer_norm(t), other)); }},
            {"normalize_rows", [&](const Tensor& t) { return sum(mul(normalize_rows(t), other)); }},
            {"reshape", [&](const Tensor& t) { return sum(mul(reshape(reshape(t, {12}), {3, 4}), other)); }},
            {"concat", [&](const Tensor& t) { return sum(mul(concat_cols({slice_cols(t, 2, 4), slice_cols(t, 0, 2)}), other)); }},
            {"sparse", [&](const Tensor& t) { return sum(mul(apply_map(gmap, t), apply_map(gmap, other))); }},
            {"one_minus", [&](const Tensor& t) { return mean(mul(one_minus(t), other)); }},
            {"mse", [&](const Tensor& t) { return mse(t, other); }},
            {"l1", [&](const Tensor& t) { return l1(t, add_scalar(other, 3.0)); }},
            {"bce", [&](const Tensor& t) { return bce(add_scalar(scale(sigmoid(t), 0.9), 0.05), y); }},
            {"bce_with_logits", [&](const Tensor& t) { return bce_with_logits(scale(t, 4.0), y); }},
        };
        auto x = random_tensor({3, 4}, rng);
        for (const auto& [name, fn] : cases) {
            EXPECT_LT(grad_check(fn, x), 1e-4) << name << " trial " << trial;
        }
    }
}
