#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "deepatlas/tensor.hpp"

// Differentiable primitives. Every function records its adjoint on the active
// GradientTape when one of its inputs requires a gradient.
namespace deepatlas {

// Binary ops broadcast singleton axes. A lower-rank operand is aligned to the
// trailing axes of the other; no other implicit expansion is performed.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, Scalar b);
Tensor mul(const Tensor& a, Scalar b);

Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);   // throws NumericDomainError on negative input
Tensor sqrt(const Tensor& a);  // throws NumericDomainError on negative input
Tensor square(const Tensor& a);
Tensor leaky_relu(const Tensor& a, Scalar alpha);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, Scalar b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, Scalar b) { return add(a, -b); }
inline Tensor operator*(const Tensor& a, Scalar b) { return mul(a, b); }
inline Tensor operator*(Scalar a, const Tensor& b) { return mul(b, a); }
inline Tensor operator-(Scalar a, const Tensor& b) { return add(neg(b), a); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// Reductions. The axis-free overloads reduce everything to shape [1].
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor max(const Tensor& a);
Tensor sum(const Tensor& a, const std::vector<std::int64_t>& axes, bool keepdims = false);
Tensor mean(const Tensor& a, const std::vector<std::int64_t>& axes, bool keepdims = false);
// Gradient flows to the lowest linear index among tied maxima.
Tensor max(const Tensor& a, const std::vector<std::int64_t>& axes, bool keepdims = false);

Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(std::span<const Tensor> parts, std::int64_t axis);
Tensor concat(std::initializer_list<Tensor> parts, std::int64_t axis);
/// Sub-block starting at `starts` with the given extents, one entry per axis.
Tensor slice(const Tensor& a, const std::vector<std::int64_t>& starts, const Shape& extents);
Tensor narrow(const Tensor& a, std::int64_t axis, std::int64_t start, std::int64_t length);

/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& a, std::int64_t axis);

struct ConvOptions {
    std::int64_t stride = 1;
    std::int64_t padding = 0;
};

/// Cross-correlation of input [N, C_in, spatial...] with kernel
/// [C_out, C_in, k...] for 1 to 3 spatial axes, zero padding. The optional
/// bias has shape [C_out].
Tensor conv(const Tensor& input, const Tensor& kernel, ConvOptions options = {});
Tensor conv(const Tensor& input, const Tensor& kernel, const Tensor& bias, ConvOptions options = {});

/// Max pooling over every spatial axis of [N, C, spatial...]. Ties resolve to
/// the lowest linear index inside the window.
Tensor max_pool(const Tensor& input, std::int64_t window, std::int64_t stride);

Tensor upsample_nearest(const Tensor& input, std::int64_t factor);

}  // namespace deepatlas
