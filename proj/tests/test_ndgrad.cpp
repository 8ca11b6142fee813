#include "doctest.h"

#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "kdlt/ndgrad.hpp"
#include "test_util.hpp"

using namespace kdlt;
using namespace kdlt::nd;
using kdlt::testing::all_finite;
using kdlt::testing::random_tensor;

namespace {

// Weighted sum so every output coordinate gets a distinct upstream gradient.
Tensor probe_sum(const Tensor& y, std::uint64_t seed) {
    return sum(mul(y, random_tensor(y.shape(), seed, -1.0, 1.0)));
}

}  // namespace

TEST_CASE("matmul examples") {
    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor r = matmul(a, eye);
    CHECK(std::vector<float>(r.data().begin(), r.data().end()) == std::vector<float>{1, 2, 3, 4});

    Tensor row({1, 2}, {1, 2});
    Tensor col({2, 1}, {3, 4});
    CHECK(matmul(row, col).item() == doctest::Approx(1 * 3 + 2 * 4));

    Tensor z = matmul(random_tensor({3, 4}, 1), Tensor::zeros({4, 5}));
    for (float v : z.data()) CHECK(v == 0.0f);

    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
}

TEST_CASE("matmul associativity on random chains") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Tensor a = random_tensor({3, 4}, seed * 3 + 1);
        Tensor b = random_tensor({4, 5}, seed * 3 + 2);
        Tensor c = random_tensor({5, 2}, seed * 3 + 3);
        Tensor l = matmul(matmul(a, b), c);
        Tensor r = matmul(a, matmul(b, c));
        for (std::size_t i = 0; i < l.numel(); ++i)
            CHECK(std::abs(l.at(i) - r.at(i)) <= 1e-4 * std::max(1.0f, std::abs(l.at(i))));
    }
}

TEST_CASE("softmax examples and properties") {
    Tensor s = softmax(Tensor({2}, {0, 0}), 0);
    CHECK(s.at(0) == doctest::Approx(0.5));
    CHECK(s.at(1) == doctest::Approx(0.5));

    const double e = std::exp(1.0);
    Tensor t = softmax(Tensor({2}, {1, 0}), -1);
    CHECK(t.at(0) == doctest::Approx(e / (e + 1)).epsilon(1e-6));
    CHECK(t.at(1) == doctest::Approx(1 / (e + 1)).epsilon(1e-6));
    CHECK(t.at(0) == doctest::Approx(0.7311).epsilon(1e-4));

    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        Tensor x = random_tensor({3, 7}, seed, -20, 20);
        for (int axis : {0, 1}) {
            Tensor y = softmax(x, axis);
            Tensor shifted = softmax(add_scalar(x, 13.5f), axis);
            const int rows = axis == 1 ? 3 : 7;
            for (int r = 0; r < rows; ++r) {
                double total = 0.0;
                const int len = axis == 1 ? 7 : 3;
                for (int k = 0; k < len; ++k) {
                    const std::size_t idx = axis == 1 ? r * 7 + k : k * 7 + r;
                    CHECK(y.at(idx) >= 0.0f);
                    total += y.at(idx);
                    CHECK(std::abs(y.at(idx) - shifted.at(idx)) < 1e-6);
                }
                CHECK(std::abs(total - 1.0) < 1e-6);
            }
        }
    }

    // Temperature 0.1 over cosines gives logits up to +-10; larger magnitudes must stay finite.
    Tensor big = softmax(Tensor({3}, {1000, -1000, 999}), 0);
    CHECK(all_finite(big));
    Tensor lbig = log_softmax(Tensor({3}, {1000, -1000, 999}), 0);
    CHECK(all_finite(lbig));
}

TEST_CASE("conv2d examples") {
    // 1x1 identity kernel per channel
    Tensor x = random_tensor({2, 3, 5, 6}, 11);
    std::vector<float> w(9, 0.0f);
    for (int c = 0; c < 3; ++c) w[c * 3 + c] = 1.0f;
    Tensor y = conv2d(x, Tensor({3, 3, 1, 1}, w), Tensor(), 1, 0);
    REQUIRE(y.shape() == x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == x.at(i));

    Tensor img = random_tensor({1, 1, 32, 128}, 5);
    Tensor out = conv2d(img, random_tensor({4, 1, 3, 3}, 6), Tensor(), 2, 1);
    CHECK(out.shape() == Shape{1, 4, 16, 64});
    CHECK(conv_out_extent(32, 3, 2, 1) == (32 + 2 - 3) / 2 + 1);

    Tensor zero = conv2d(img, Tensor::zeros({4, 1, 3, 3}), Tensor(), 1, 1);
    for (float v : zero.data()) CHECK(v == 0.0f);

    CHECK_THROWS_AS(conv2d(random_tensor({1, 1, 2, 2}, 1), random_tensor({1, 1, 5, 5}, 2), Tensor(), 1, 0),
                    DimensionError);
}

TEST_CASE("conv2d matches direct summation") {
    Tensor x = random_tensor({2, 2, 5, 7}, 21);
    Tensor w = random_tensor({3, 2, 3, 3}, 22);
    Tensor b = random_tensor({3}, 23);
    Tensor y = conv2d(x, w, b, 2, 1);
    const int Ho = 3, Wo = 4;
    REQUIRE(y.shape() == Shape{2, 3, Ho, Wo});
    for (int n = 0; n < 2; ++n)
        for (int co = 0; co < 3; ++co)
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    double acc = b.at(co);
                    for (int ci = 0; ci < 2; ++ci)
                        for (int ky = 0; ky < 3; ++ky)
                            for (int kx = 0; kx < 3; ++kx) {
                                const int iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
                                if (iy < 0 || iy >= 5 || ix < 0 || ix >= 7) continue;
                                acc += x.at(((n * 2 + ci) * 5 + iy) * 7 + ix) * w.at(((co * 2 + ci) * 3 + ky) * 3 + kx);
                            }
                    CHECK(y.at(((n * 3 + co) * Ho + oy) * Wo + ox) == doctest::Approx(acc).epsilon(1e-5));
                }
}

TEST_CASE("backward examples") {
    {
        Tensor x({1}, {3.0f}, true);
        GradTape tape;
        Tensor loss = sum(mul(x, x));
        tape.backward(loss);
        CHECK(x.grad()[0] == doctest::Approx(6.0));
    }
    {
        Tensor x = random_tensor({4}, 3, -1, 1, true);
        GradTape tape;
        Tensor loss = add(sum(Tensor::zeros({4})), Tensor::scalar(2.5f));
        tape.backward(loss);
        for (std::size_t i = 0; i < 4; ++i) CHECK((x.has_grad() ? x.grad()[i] : 0.0f) == 0.0f);
    }
    {
        Tensor x = random_tensor({2, 3}, 4, -5, 5, true);
        GradTape tape;
        tape.backward(sum(x));
        for (float g : x.grad()) CHECK(g == 1.0f);
    }
}

TEST_CASE("backward error paths") {
    Tensor x = random_tensor({3}, 9, -1, 1, true);
    GradTape tape;
    Tensor y = scale(x, 2.0f);
    CHECK_THROWS_AS(tape.backward(y), ContractError);
    GradTape tape2;
    Tensor loss = sum(mul(x, x));
    tape2.backward(loss);
    CHECK_THROWS_AS(tape2.backward(loss), StateError);
    CHECK_THROWS_AS(nd::backward(loss, tape2), StateError);
}

TEST_CASE("tape records parents before children") {
    Tensor x = random_tensor({2, 2}, 1, -1, 1, true);
    GradTape tape;
    Tensor a = exp(x);
    Tensor b = matmul(a, x);
    Tensor c = sum(b);
    CHECK(tape.size() == 3);
    CHECK(c.requires_grad());
}

TEST_CASE("no recording without an active tape") {
    Tensor x = random_tensor({2}, 1, -1, 1, true);
    Tensor y = exp(x);
    CHECK_FALSE(y.requires_grad());
    GradTape tape;
    {
        NoGradGuard guard;
        CHECK_FALSE(exp(x).requires_grad());
    }
    CHECK(exp(x).requires_grad());
}

TEST_CASE("grad_check examples") {
    auto square_sum = [](const Tensor& x) { return sum(mul(x, x)); };
    CHECK(grad_check(square_sum, random_tensor({6}, 77)) < 1e-3);

    Tensor w = random_tensor({5}, 78);
    auto linear = [&](const Tensor& x) { return sum(mul(x, w)); };
    CHECK(grad_check(linear, random_tensor({5}, 79)) < 1e-5);

    auto not_scalar = [](const Tensor& x) { return exp(x); };
    CHECK_THROWS_AS(grad_check(not_scalar, random_tensor({3}, 1)), ContractError);
}

TEST_CASE("every differentiable op passes central differences") {
    using Fn = std::function<Tensor(const Tensor&)>;
    struct Case {
        const char* name;
        Shape shape;
        double lo, hi;
        Fn f;
    };
    const Tensor m34 = random_tensor({3, 4}, 101);
    const Tensor b3 = random_tensor({2, 3, 4}, 102);
    const Tensor convw = random_tensor({3, 2, 3, 3}, 103);
    const Tensor convb = random_tensor({3}, 104);
    const Tensor other = random_tensor({2, 3}, 105);
    const Tensor positive = random_tensor({2, 3}, 106, 0.5, 2.0);
    const Tensor tail = random_tensor({3}, 107);
    const std::vector<int> rows{2, 0, 2};
    const std::vector<int> cols{1, 0, 2, 2, 1, 0};

    std::vector<Case> cases{
        {"matmul lhs", {2, 3}, -1, 1, [&](const Tensor& x) { return probe_sum(matmul(x, m34), 1); }},
        {"matmul rhs", {4, 2}, -1, 1, [&](const Tensor& x) { return probe_sum(matmul(m34, x), 2); }},
        {"bmm lhs", {2, 2, 3}, -1, 1, [&](const Tensor& x) { return probe_sum(bmm(x, b3), 3); }},
        {"bmm rhs", {2, 4, 3}, -1, 1, [&](const Tensor& x) { return probe_sum(bmm(b3, x), 4); }},
        {"transpose", {2, 3, 4}, -1, 1, [](const Tensor& x) { return probe_sum(transpose_last2(x), 5); }},
        {"conv input", {2, 2, 5, 6}, -1, 1,
         [&](const Tensor& x) { return probe_sum(conv2d(x, convw, convb, 2, 1), 6); }},
        {"conv weight", {3, 2, 3, 3}, -1, 1,
         [&](const Tensor& x) { return probe_sum(conv2d(random_tensor({2, 2, 5, 6}, 7), x, convb, 1, 1), 8); }},
        {"conv bias", {3}, -1, 1,
         [&](const Tensor& x) { return probe_sum(conv2d(random_tensor({1, 2, 4, 4}, 9), convw, x, 1, 0), 10); }},
        {"reshape", {2, 3}, -1, 1, [](const Tensor& x) { return probe_sum(reshape(x, {3, 2}), 11); }},
        {"concat", {2, 3}, -1, 1, [&](const Tensor& x) { return probe_sum(concat_rows(x, other), 12); }},
        {"select_rows", {3, 2}, -1, 1, [&](const Tensor& x) { return probe_sum(select_rows(x, rows), 13); }},
        {"gather_last", {3, 3}, -1, 1, [&](const Tensor& x) { return probe_sum(gather_last(x, cols, 2), 14); }},
        {"expand_last", {2, 3}, -1, 1, [](const Tensor& x) { return probe_sum(expand_last(x, 4), 15); }},
        {"add", {2, 3}, -1, 1, [&](const Tensor& x) { return probe_sum(add(x, other), 16); }},
        {"sub", {2, 3}, -1, 1, [&](const Tensor& x) { return probe_sum(sub(other, x), 17); }},
        {"mul", {2, 3}, -1, 1, [&](const Tensor& x) { return probe_sum(mul(x, x), 18); }},
        {"div num", {2, 3}, -1, 1, [&](const Tensor& x) { return probe_sum(div(x, positive), 19); }},
        {"div den", {2, 3}, 0.5, 2, [&](const Tensor& x) { return probe_sum(div(other, x), 20); }},
        {"add_broadcast", {3}, -1, 1,
         [&](const Tensor& x) { return probe_sum(add_broadcast(random_tensor({2, 3}, 21), x), 22); }},
        {"scale", {2, 3}, -1, 1, [](const Tensor& x) { return probe_sum(scale(x, -2.5f), 23); }},
        {"add_scalar", {2, 3}, -1, 1, [](const Tensor& x) { return probe_sum(add_scalar(x, 0.7f), 24); }},
        {"exp", {2, 3}, -1, 1, [](const Tensor& x) { return probe_sum(exp(x), 25); }},
        {"log", {2, 3}, 0.5, 2, [](const Tensor& x) { return probe_sum(log(x), 26); }},
        {"sqrt", {2, 3}, 0.5, 2, [](const Tensor& x) { return probe_sum(sqrt(x), 27); }},
        {"silu", {2, 3}, -2, 2, [](const Tensor& x) { return probe_sum(silu(x), 28); }},
        {"mean", {2, 3}, -1, 1, [](const Tensor& x) { return mean(mul(x, x)); }},
        {"sum_last", {2, 3}, -1, 1, [](const Tensor& x) { return probe_sum(sum_last(x), 29); }},
        {"mean_last", {2, 3}, -1, 1, [](const Tensor& x) { return probe_sum(mean_last(x), 30); }},
        {"std_last", {2, 5}, -1, 1, [](const Tensor& x) { return probe_sum(std_last(x), 31); }},
        {"softmax", {2, 4}, -2, 2, [](const Tensor& x) { return probe_sum(softmax(x, 1), 32); }},
        {"softmax axis0", {3, 2}, -2, 2, [](const Tensor& x) { return probe_sum(softmax(x, 0), 33); }},
        {"log_softmax", {2, 4}, -2, 2, [](const Tensor& x) { return probe_sum(log_softmax(x, -1), 34); }},
        {"cosine", {2, 3}, -1, 1, [&](const Tensor& x) { return probe_sum(cosine_last(x, other), 35); }},
        {"l2_normalize", {2, 3}, -1, 1, [](const Tensor& x) { return probe_sum(l2_normalize_last(x), 36); }},
    };
    for (const auto& c : cases) {
        for (std::uint64_t seed = 0; seed < 3; ++seed) {
            CAPTURE(c.name);
            const double err = grad_check(c.f, random_tensor(c.shape, 1000 + seed, c.lo, c.hi));
            CHECK(err < 1e-3);
        }
    }
}

TEST_CASE("zero-norm conventions") {
    Tensor z = Tensor::zeros({1, 3});
    Tensor v({1, 3}, {1, 2, 3});
    CHECK(cosine_last(z, v).item() == 0.0f);
    Tensor n = l2_normalize_last(z);
    for (float x : n.data()) CHECK(x == 0.0f);
    CHECK(std_last(Tensor({4}, {5, 5, 5, 5})).item() == 0.0f);
}

TEST_CASE("forward ops stay finite on finite inputs") {
    Tensor x = random_tensor({2, 3, 4}, 55, -30, 30);
    CHECK(all_finite(softmax(x, 2)));
    CHECK(all_finite(log_softmax(x, 1)));
    CHECK(all_finite(silu(x)));
    CHECK(all_finite(l2_normalize_last(x)));
    CHECK(all_finite(cosine_last(x, x)));
    CHECK(all_finite(std_last(x)));
}
