#include <doctest.h>

#include <cmath>

#include "deepatlas/gradcheck.hpp"
#include "deepatlas/ops.hpp"
#include "helpers.hpp"

using namespace deepatlas;
using deepatlas::test::random_tensor;
using deepatlas::test::values;
using deepatlas::test::vec;

TEST_CASE("elementwise ops") {
    CHECK(values(leaky_relu(vec({-1, 2}), 0.01)) == std::vector<Scalar>{-0.01, 2});
    CHECK(values(add(vec({1, 2}), vec({3, 4}))) == std::vector<Scalar>{4, 6});
    CHECK(values(mul(Tensor({2, 2}, {1, 2, 3, 4}), Tensor({1, 2}, {10, 100}))) ==
          std::vector<Scalar>{10, 200, 30, 400});
    CHECK_THROWS_AS(add(vec({1, 2}), vec({1, 2, 3})), ShapeError);
    CHECK_THROWS_AS(log(vec({-1})), NumericDomainError);
    CHECK_THROWS_AS(sqrt(vec({-1})), NumericDomainError);
}

TEST_CASE("mul gradient matches a central difference") {
    const Tensor a = vec({2}, true);
    const Tensor b = vec({5});
    GradientTape tape;
    tape.backward(sum(mul(a, b)));
    const Scalar h = 1e-5;
    const Scalar fd = ((2 + h) * 5 - (2 - h) * 5) / (2 * h);
    CHECK(a.grad()[0] == doctest::Approx(fd).epsilon(1e-9));
    CHECK(a.grad()[0] == doctest::Approx(5.0));
}

TEST_CASE("reductions") {
    const Tensor m({2, 2}, {1, 2, 3, 4});
    CHECK(sum(m).item() == 10);
    CHECK(mean(vec({2, 4})).item() == 3);
    CHECK(values(sum(m, {0})) == std::vector<Scalar>{4, 6});
    CHECK(sum(m, {1}, true).shape() == Shape{2, 1});
    CHECK(max(m).item() == 4);
    CHECK_THROWS(sum(Tensor({0}, {})));

    const Tensor a = random_tensor({3, 4}, 1, -1, 1, true);
    GradientTape tape;
    tape.backward(sum(a));
    for (auto g : a.grad()) CHECK(g == 1.0);
}

TEST_CASE("tape contract") {
    const Tensor a = vec({1, 2}, true);
    GradientTape tape;
    const Tensor loss = sum(square(a));
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), TapeError);

    GradientTape other;
    CHECK_THROWS(other.backward(square(a)));  // not a scalar

    const Tensor c = vec({3}, true);
    {
        NoGradGuard guard;
        const Tensor unused = square(c);
    }
    CHECK(other.size() == 1);  // only the earlier square(a) was recorded
}

TEST_CASE("conv matches known outputs and a direct loop") {
    CHECK(values(conv(Tensor({1, 1, 3}, {1, 2, 3}), Tensor({1, 1, 1}, {1}))) == std::vector<Scalar>{1, 2, 3});
    CHECK(values(conv(Tensor({1, 1, 4}, {1, 2, 3, 4}), Tensor({1, 1, 2}, {1, 1}), {.stride = 2})) ==
          std::vector<Scalar>{3, 7});
    CHECK_THROWS_AS(conv(Tensor({1, 1, 2}, {1, 2}), Tensor({1, 1, 5}, {1, 1, 1, 1, 1})), ShapeError);

    // Direct sliding-window oracle, 2-D, stride 2, padding 1.
    const Tensor x = random_tensor({2, 3, 7, 6}, 3);
    const Tensor w = random_tensor({4, 3, 3, 3}, 4);
    const Tensor y = conv(x, w, {.stride = 2, .padding = 1});
    REQUIRE(y.shape() == Shape{2, 4, 4, 3});
    auto at = [&](std::int64_t n, std::int64_t c, std::int64_t i, std::int64_t j) -> Scalar {
        if (i < 0 || j < 0 || i >= 7 || j >= 6) return 0;
        return x[((n * 3 + c) * 7 + i) * 6 + j];
    };
    Scalar worst = 0;
    for (std::int64_t n = 0; n < 2; ++n)
        for (std::int64_t o = 0; o < 4; ++o)
            for (std::int64_t i = 0; i < 4; ++i)
                for (std::int64_t j = 0; j < 3; ++j) {
                    Scalar acc = 0;
                    for (std::int64_t c = 0; c < 3; ++c)
                        for (std::int64_t a = 0; a < 3; ++a)
                            for (std::int64_t b = 0; b < 3; ++b)
                                acc += w[((o * 3 + c) * 3 + a) * 3 + b] * at(n, c, 2 * i - 1 + a, 2 * j - 1 + b);
                    worst = std::max(worst, std::abs(acc - y[((n * 4 + o) * 4 + i) * 3 + j]));
                }
    CHECK(worst < 1e-12);
}

TEST_CASE("conv gradient on a random 2x3x8x8 input") {
    const auto x = random_tensor({2, 3, 8, 8}, 5, -1, 1, true);
    const auto w = random_tensor({2, 3, 3, 3}, 6, -1, 1, true);
    const auto err = gradcheck([](const std::vector<Tensor>& in) { return sum(square(conv(in[0], in[1], {.padding = 1}))); },
                               {x, w}, 7);
    CHECK(err < kGradcheckTolerance);
}

TEST_CASE("max_pool") {
    CHECK(values(max_pool(Tensor({1, 1, 2, 2}, {1, 2, 3, 4}), 2, 2)) == std::vector<Scalar>{4});
    const Tensor c = Tensor::full({1, 1, 2, 2}, 7.0, true);
    GradientTape tape;
    const Tensor y = max_pool(c, 2, 2);
    CHECK(y.item() == 7.0);
    tape.backward(sum(y));
    CHECK(values(Tensor({4}, {c.grad().begin(), c.grad().end()})) == std::vector<Scalar>{1, 0, 0, 0});
    CHECK_THROWS_AS(max_pool(Tensor::zeros({1, 1, 1, 1}), 2, 2), ShapeError);

    const auto x = random_tensor({1, 2, 4, 4, 4}, 8, -1, 1, true);
    CHECK(gradcheck([](const std::vector<Tensor>& in) { return sum(square(max_pool(in[0], 2, 2))); }, {x}, 9) <
          kGradcheckTolerance);
}

TEST_CASE("upsample_nearest") {
    CHECK(values(upsample_nearest(Tensor({1, 1, 2}, {1, 2}), 2)) == std::vector<Scalar>{1, 1, 2, 2});
    CHECK(upsample_nearest(Tensor::zeros({2, 3, 4, 4}), 2).shape() == Shape{2, 3, 8, 8});

    const Tensor x = Tensor::zeros({1, 1, 2, 2}, true);
    const Tensor g = random_tensor({1, 1, 4, 4}, 10);
    GradientTape tape;
    tape.backward(sum(mul(upsample_nearest(x, 2), g)));
    for (std::int64_t i = 0; i < 2; ++i)
        for (std::int64_t j = 0; j < 2; ++j) {
            Scalar block = 0;
            for (std::int64_t a = 0; a < 2; ++a)
                for (std::int64_t b = 0; b < 2; ++b) block += g[(2 * i + a) * 4 + 2 * j + b];
            CHECK(x.grad()[static_cast<std::size_t>(i * 2 + j)] == doctest::Approx(block).epsilon(1e-12));
        }
}

TEST_CASE("softmax") {
    CHECK(values(softmax(vec({0, 0}), 0)) == std::vector<Scalar>{0.5, 0.5});
    const auto big = values(softmax(vec({1000, 0}), 0));
    CHECK(big[0] == doctest::Approx(1.0));
    CHECK(big[1] == doctest::Approx(0.0));
    CHECK(std::isfinite(big[1]));

    const auto x = random_tensor({2, 4, 3, 3}, 11, -3, 3);
    const auto s = softmax(x, 1);
    for (std::int64_t n = 0; n < 2; ++n)
        for (std::int64_t v = 0; v < 9; ++v) {
            Scalar total = 0;
            for (std::int64_t k = 0; k < 4; ++k) total += s[(n * 4 + k) * 9 + v];
            CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
        }
}

TEST_CASE("shape ops") {
    const Tensor a({2, 3}, {0, 1, 2, 3, 4, 5});
    CHECK(values(slice(a, {0, 1}, {2, 2})) == std::vector<Scalar>{1, 2, 4, 5});
    CHECK(values(concat({a, a}, 0)) == std::vector<Scalar>{0, 1, 2, 3, 4, 5, 0, 1, 2, 3, 4, 5});
    CHECK(reshape(a, {3, 2}).shape() == Shape{3, 2});
    CHECK_THROWS_AS(reshape(a, {4, 2}), ShapeError);
}
