#pragma once

#include <random>
#include <vector>

#include "deepatlas/tensor.hpp"

namespace deepatlas::test {

inline Tensor vec(std::vector<Scalar> v, bool requires_grad = false) {
    const auto n = static_cast<std::int64_t>(v.size());
    return Tensor({n}, std::move(v), requires_grad);
}

inline std::vector<Scalar> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline Tensor random_tensor(Shape shape, std::uint64_t seed, Scalar lo = -1, Scalar hi = 1, bool requires_grad = false) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<Scalar> u(lo, hi);
    std::vector<Scalar> data(static_cast<std::size_t>(numel(shape)));
    for (auto& x : data) x = u(rng);
    return Tensor(std::move(shape), std::move(data), requires_grad);
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

}  // namespace deepatlas::test
