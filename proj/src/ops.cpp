#include "deepatlas/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>

namespace deepatlas {

namespace {

using detail::should_record;

std::vector<std::int64_t> contiguous_strides(const Shape& shape) {
    std::vector<std::int64_t> strides(shape.size(), 1);
    for (std::int64_t d = static_cast<std::int64_t>(shape.size()) - 2; d >= 0; --d) {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    return strides;
}

std::int64_t normalize_axis(std::int64_t axis, std::int64_t rank) {
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
    }
    return axis;
}

// Walks every multi-index of `shape`, handing the callback the linear output
// index plus two strided offsets.
template <class F>
void for_each_index(const Shape& shape, const std::vector<std::int64_t>& sa,
                    const std::vector<std::int64_t>& sb, F&& f) {
    const auto r = static_cast<std::int64_t>(shape.size());
    const auto total = numel(shape);
    if (r == 0) {
        f(std::int64_t{0}, std::int64_t{0}, std::int64_t{0});
        return;
    }
    const auto inner = shape[r - 1];
    const auto isa = sa[r - 1];
    const auto isb = sb[r - 1];
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t oa = 0;
    std::int64_t ob = 0;
    for (std::int64_t base = 0; base < total; base += inner) {
        for (std::int64_t j = 0; j < inner; ++j) f(base + j, oa + j * isa, ob + j * isb);
        for (std::int64_t d = r - 2; d >= 0; --d) {
            ++idx[d];
            oa += sa[d];
            ob += sb[d];
            if (idx[d] < shape[d]) break;
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

struct Broadcast {
    Shape out;
    std::vector<std::int64_t> stride_a;
    std::vector<std::int64_t> stride_b;
};

std::vector<std::int64_t> broadcast_strides(const Shape& operand, const Shape& out) {
    const auto r = out.size();
    const auto offset = r - operand.size();
    Shape padded(offset, 1);
    padded.insert(padded.end(), operand.begin(), operand.end());
    auto strides = contiguous_strides(padded);
    for (std::size_t d = 0; d < r; ++d) {
        if (padded[d] == 1 && out[d] != 1) strides[d] = 0;
    }
    return strides;
}

Broadcast broadcast(const Shape& a, const Shape& b) {
    const auto r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        const std::int64_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const std::int64_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (ea != eb && ea != 1 && eb != 1) {
            throw ShapeError("cannot broadcast shapes " + to_string(a) + " and " + to_string(b));
        }
        out[i] = std::max(ea, eb);
    }
    return {out, broadcast_strides(a, out), broadcast_strides(b, out)};
}

enum class BinaryKind { add, sub, mul, div };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind) {
    const bool same = a.shape() == b.shape();
    const auto& A = a.data();
    const auto& B = b.data();
    Broadcast bc;
    if (same) {
        bc.out = a.shape();
    } else {
        bc = broadcast(a.shape(), b.shape());
    }
    std::vector<Scalar> out(static_cast<std::size_t>(numel(bc.out)));
    auto apply = [kind](Scalar x, Scalar y) {
        switch (kind) {
            case BinaryKind::add: return x + y;
            case BinaryKind::sub: return x - y;
            case BinaryKind::mul: return x * y;
            case BinaryKind::div: return x / y;
        }
        return Scalar{0};
    };
    if (same) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply(A[i], B[i]);
    } else {
        for_each_index(bc.out, bc.stride_a, bc.stride_b,
                       [&](std::int64_t i, std::int64_t ia, std::int64_t ib) { out[i] = apply(A[ia], B[ib]); });
    }
    Tensor result(bc.out, std::move(out));
    if (should_record({&a, &b})) {
        GradientTape::active()->record({a, b}, result, [a, b, kind, same, bc](std::span<const Scalar> g) {
            const auto& A = a.data();
            const auto& B = b.data();
            const bool ga_on = a.requires_grad();
            const bool gb_on = b.requires_grad();
            Scalar* ga = ga_on ? a.impl()->grad.data() : nullptr;
            Scalar* gb = gb_on ? b.impl()->grad.data() : nullptr;
            auto body = [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
                const Scalar gi = g[i];
                switch (kind) {
                    case BinaryKind::add:
                        if (ga) ga[ia] += gi;
                        if (gb) gb[ib] += gi;
                        break;
                    case BinaryKind::sub:
                        if (ga) ga[ia] += gi;
                        if (gb) gb[ib] -= gi;
                        break;
                    case BinaryKind::mul:
                        if (ga) ga[ia] += gi * B[ib];
                        if (gb) gb[ib] += gi * A[ia];
                        break;
                    case BinaryKind::div:
                        if (ga) ga[ia] += gi / B[ib];
                        if (gb) gb[ib] -= gi * A[ia] / (B[ib] * B[ib]);
                        break;
                }
            };
            if (same) {
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(g.size()); ++i) body(i, i, i);
            } else {
                for_each_index(bc.out, bc.stride_a, bc.stride_b, body);
            }
        });
    }
    return result;
}

// Unary op with derivative expressed through input x and output y.
template <class Fwd, class Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
    const auto& A = a.data();
    std::vector<Scalar> out(A.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(A[i]);
    Tensor result(a.shape(), std::move(out));
    if (should_record({&a})) {
        Tensor y = result;
        GradientTape::active()->record({a}, result, [a, y, deriv](std::span<const Scalar> g) {
            auto& ga = a.impl()->grad;
            const auto& A = a.data();
            const auto& Y = y.data();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(A[i], Y[i]);
        });
    }
    return result;
}

enum class ReduceKind { sum, mean, max };

Tensor reduce(const Tensor& a, std::vector<std::int64_t> axes, bool keepdims, ReduceKind kind) {
    const auto r = a.rank();
    if (axes.empty()) throw ShapeError("reduction over an empty axis list");
    for (auto& ax : axes) ax = normalize_axis(ax, r);
    std::sort(axes.begin(), axes.end());
    axes.erase(std::unique(axes.begin(), axes.end()), axes.end());

    Shape kept = a.shape();
    std::int64_t count = 1;
    for (auto ax : axes) {
        count *= kept[ax];
        kept[ax] = 1;
    }
    Shape out_shape;
    if (keepdims) {
        out_shape = kept;
    } else {
        for (std::int64_t d = 0; d < r; ++d) {
            if (!std::binary_search(axes.begin(), axes.end(), d)) out_shape.push_back(a.shape()[d]);
        }
        if (out_shape.empty()) out_shape = {1};
    }
    const auto in_strides = contiguous_strides(a.shape());
    const auto out_strides = broadcast_strides(kept, a.shape());
    const auto n_out = numel(kept);
    const auto& A = a.data();

    std::vector<Scalar> out(static_cast<std::size_t>(n_out),
                            kind == ReduceKind::max ? -std::numeric_limits<Scalar>::infinity() : 0.0);
    std::vector<std::int64_t> argmax;
    if (kind == ReduceKind::max) argmax.assign(static_cast<std::size_t>(n_out), -1);
    for_each_index(a.shape(), in_strides, out_strides, [&](std::int64_t i, std::int64_t, std::int64_t o) {
        if (kind == ReduceKind::max) {
            if (argmax[o] < 0 || A[i] > out[o]) {
                out[o] = A[i];
                argmax[o] = i;
            }
        } else {
            out[o] += A[i];
        }
    });
    if (kind == ReduceKind::mean) {
        for (auto& v : out) v /= static_cast<Scalar>(count);
    }
    Tensor result(out_shape, std::move(out));
    if (should_record({&a})) {
        GradientTape::active()->record(
            {a}, result,
            [a, kind, count, in_strides, out_strides, argmax = std::move(argmax)](std::span<const Scalar> g) {
                auto& ga = a.impl()->grad;
                if (kind == ReduceKind::max) {
                    for (std::size_t o = 0; o < argmax.size(); ++o) ga[argmax[o]] += g[o];
                    return;
                }
                const Scalar scale = kind == ReduceKind::mean ? 1.0 / static_cast<Scalar>(count) : 1.0;
                for_each_index(a.shape(), in_strides, out_strides,
                               [&](std::int64_t i, std::int64_t, std::int64_t o) { ga[i] += g[o] * scale; });
            });
    }
    return result;
}

std::vector<std::int64_t> all_axes(const Tensor& a) {
    std::vector<std::int64_t> axes(static_cast<std::size_t>(a.rank()));
    std::iota(axes.begin(), axes.end(), 0);
    return axes;
}

// Spatial geometry normalized to three axes; missing leading axes are size 1.
struct Geometry {
    std::int64_t batch = 0;
    std::int64_t channels = 0;
    std::array<std::int64_t, 3> in{1, 1, 1};
    std::array<std::int64_t, 3> out{1, 1, 1};
    std::array<std::int64_t, 3> kernel{1, 1, 1};
    std::array<std::int64_t, 3> stride{1, 1, 1};
    std::array<std::int64_t, 3> pad{0, 0, 0};

    std::int64_t in_size() const { return in[0] * in[1] * in[2]; }
    std::int64_t out_size() const { return out[0] * out[1] * out[2]; }
    std::int64_t kernel_size() const { return kernel[0] * kernel[1] * kernel[2]; }
};

std::int64_t spatial_rank_of(const Tensor& t, const char* op) {
    const auto s = t.rank() - 2;
    if (s < 1 || s > 3) {
        throw ShapeError(std::string(op) + " expects [N, C, spatial...] with 1 to 3 spatial axes, got " +
                         to_string(t.shape()));
    }
    return s;
}

Geometry make_geometry(const Tensor& input, const std::vector<std::int64_t>& kernel, std::int64_t stride,
                       std::int64_t pad, const char* op) {
    const auto s = spatial_rank_of(input, op);
    Geometry g;
    g.batch = input.dim(0);
    g.channels = input.dim(1);
    const auto off = 3 - s;
    for (std::int64_t i = 0; i < s; ++i) {
        g.in[off + i] = input.dim(2 + i);
        g.kernel[off + i] = kernel[i];
        g.stride[off + i] = stride;
        g.pad[off + i] = pad;
        const auto span = g.in[off + i] + 2 * pad - kernel[i];
        if (span < 0) {
            throw ShapeError(std::string(op) + ": window " + std::to_string(kernel[i]) +
                             " does not fit padded extent " + std::to_string(g.in[off + i] + 2 * pad));
        }
        g.out[off + i] = span / stride + 1;
        if (g.out[off + i] <= 0) throw ShapeError(std::string(op) + ": non-positive output extent");
    }
    return g;
}

Shape output_shape(const Tensor& input, std::int64_t channels, const Geometry& g) {
    const auto s = input.rank() - 2;
    Shape shape{g.batch, channels};
    for (std::int64_t i = 3 - s; i < 3; ++i) shape.push_back(g.out[i]);
    return shape;
}

using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

// Column buffer laid out [C * K, out_size].
void im2col(const Scalar* in, const Geometry& g, Scalar* col) {
    const auto [KD, KH, KW] = g.kernel;
    const auto [ID, IH, IW] = g.in;
    const auto [OD, OH, OW] = g.out;
    const auto [SD, SH, SW] = g.stride;
    const auto [PD, PH, PW] = g.pad;
    for (std::int64_t c = 0; c < g.channels; ++c) {
        const Scalar* plane = in + c * g.in_size();
        for (std::int64_t kz = 0; kz < KD; ++kz)
            for (std::int64_t ky = 0; ky < KH; ++ky)
                for (std::int64_t kx = 0; kx < KW; ++kx) {
                    for (std::int64_t oz = 0; oz < OD; ++oz) {
                        const auto iz = oz * SD - PD + kz;
                        for (std::int64_t oy = 0; oy < OH; ++oy) {
                            const auto iy = oy * SH - PH + ky;
                            Scalar* dst = col + (oz * OH + oy) * OW;
                            if (iz < 0 || iz >= ID || iy < 0 || iy >= IH) {
                                std::fill(dst, dst + OW, 0.0);
                                continue;
                            }
                            const Scalar* row = plane + (iz * IH + iy) * IW;
                            for (std::int64_t ox = 0; ox < OW; ++ox) {
                                const auto ix = ox * SW - PW + kx;
                                dst[ox] = (ix >= 0 && ix < IW) ? row[ix] : 0.0;
                            }
                        }
                    }
                    col += g.out_size();
                }
    }
}

void col2im(const Scalar* col, const Geometry& g, Scalar* in) {
    const auto [KD, KH, KW] = g.kernel;
    const auto [ID, IH, IW] = g.in;
    const auto [OD, OH, OW] = g.out;
    const auto [SD, SH, SW] = g.stride;
    const auto [PD, PH, PW] = g.pad;
    for (std::int64_t c = 0; c < g.channels; ++c) {
        Scalar* plane = in + c * g.in_size();
        for (std::int64_t kz = 0; kz < KD; ++kz)
            for (std::int64_t ky = 0; ky < KH; ++ky)
                for (std::int64_t kx = 0; kx < KW; ++kx) {
                    for (std::int64_t oz = 0; oz < OD; ++oz) {
                        const auto iz = oz * SD - PD + kz;
                        if (iz < 0 || iz >= ID) continue;
                        for (std::int64_t oy = 0; oy < OH; ++oy) {
                            const auto iy = oy * SH - PH + ky;
                            if (iy < 0 || iy >= IH) continue;
                            const Scalar* src = col + (oz * OH + oy) * OW;
                            Scalar* row = plane + (iz * IH + iy) * IW;
                            for (std::int64_t ox = 0; ox < OW; ++ox) {
                                const auto ix = ox * SW - PW + kx;
                                if (ix >= 0 && ix < IW) row[ix] += src[ox];
                            }
                        }
                    }
                    col += g.out_size();
                }
    }
}

Tensor conv_impl(const Tensor& input, const Tensor& kernel, const Tensor* bias, ConvOptions opt) {
    const auto s = spatial_rank_of(input, "conv");
    if (kernel.rank() != s + 2) {
        throw ShapeError("conv kernel " + to_string(kernel.shape()) + " does not match input " +
                         to_string(input.shape()));
    }
    if (kernel.dim(1) != input.dim(1)) {
        throw ShapeError("conv kernel expects " + std::to_string(kernel.dim(1)) + " input channels, got " +
                         std::to_string(input.dim(1)));
    }
    if (opt.stride < 1 || opt.padding < 0) throw ShapeError("conv stride must be >= 1 and padding >= 0");
    const auto c_out = kernel.dim(0);
    if (bias && (bias->rank() != 1 || bias->dim(0) != c_out)) {
        throw ShapeError("conv bias must have shape [" + std::to_string(c_out) + "]");
    }
    std::vector<std::int64_t> ksize(kernel.shape().begin() + 2, kernel.shape().end());
    const Geometry g = make_geometry(input, ksize, opt.stride, opt.padding, "conv");
    const auto rows = g.channels * g.kernel_size();
    const auto P = g.out_size();

    // Products run on owning Eigen matrices: their storage is always fully
    // aligned, so the vectorized summation order does not depend on where
    // the tensor buffers happen to live and results are reproducible.
    std::vector<Scalar> out(static_cast<std::size_t>(g.batch * c_out * P));
    const RowMatrix W = ConstMatrixMap(kernel.data().data(), c_out, rows);
    RowMatrix col(rows, P), Y(c_out, P);
    for (std::int64_t n = 0; n < g.batch; ++n) {
        im2col(input.data().data() + n * g.channels * g.in_size(), g, col.data());
        Y.noalias() = W * col;
        Scalar* dst = out.data() + n * c_out * P;
        for (std::int64_t c = 0; c < c_out; ++c) {
            const Scalar shift = bias ? (*bias)[c] : 0.0;
            for (std::int64_t p = 0; p < P; ++p) dst[c * P + p] = Y(c, p) + shift;
        }
    }
    Tensor result(output_shape(input, c_out, g), std::move(out));

    const bool has_bias = bias != nullptr;
    const bool rec = has_bias ? should_record({&input, &kernel, bias}) : should_record({&input, &kernel});
    if (rec) {
        std::vector<Tensor> inputs{input, kernel};
        Tensor b = has_bias ? *bias : Tensor{};
        if (has_bias) inputs.push_back(b);
        GradientTape::active()->record(std::move(inputs), result, [input, kernel, b, g, c_out](std::span<const Scalar> gy) {
            const auto rows = g.channels * g.kernel_size();
            const auto P = g.out_size();
            const RowMatrix W = ConstMatrixMap(kernel.data().data(), c_out, rows);
            RowMatrix col(rows, P), GY(c_out, P), GW(c_out, rows), GC(rows, P);
            for (std::int64_t n = 0; n < g.batch; ++n) {
                GY = ConstMatrixMap(gy.data() + n * c_out * P, c_out, P);
                if (kernel.requires_grad()) {
                    im2col(input.data().data() + n * g.channels * g.in_size(), g, col.data());
                    GW.noalias() = GY * col.transpose();
                    auto& gw = kernel.impl()->grad;
                    for (std::int64_t i = 0; i < c_out * rows; ++i) gw[i] += GW.data()[i];
                }
                if (b.defined() && b.requires_grad()) {
                    auto& gb = b.impl()->grad;
                    for (std::int64_t c = 0; c < c_out; ++c) {
                        Scalar acc = 0;
                        for (std::int64_t p = 0; p < P; ++p) acc += GY(c, p);
                        gb[c] += acc;
                    }
                }
                if (input.requires_grad()) {
                    GC.noalias() = W.transpose() * GY;
                    col2im(GC.data(), g, input.impl()->grad.data() + n * g.channels * g.in_size());
                }
            }
        });
    }
    return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::mul); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::div); }

Tensor add(const Tensor& a, Scalar b) {
    return unary(a, [b](Scalar x) { return x + b; }, [](Scalar, Scalar) { return 1.0; });
}

Tensor mul(const Tensor& a, Scalar b) {
    return unary(a, [b](Scalar x) { return x * b; }, [b](Scalar, Scalar) { return b; });
}

Tensor neg(const Tensor& a) {
    return unary(a, [](Scalar x) { return -x; }, [](Scalar, Scalar) { return -1.0; });
}

Tensor exp(const Tensor& a) {
    return unary(a, [](Scalar x) { return std::exp(x); }, [](Scalar, Scalar y) { return y; });
}

Tensor log(const Tensor& a) {
    for (auto v : a.data()) {
        if (v < 0) throw NumericDomainError("log of negative value " + std::to_string(v));
    }
    return unary(a, [](Scalar x) { return std::log(x); }, [](Scalar x, Scalar) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
    for (auto v : a.data()) {
        if (v < 0) throw NumericDomainError("sqrt of negative value " + std::to_string(v));
    }
    return unary(a, [](Scalar x) { return std::sqrt(x); }, [](Scalar, Scalar y) { return 0.5 / y; });
}

Tensor square(const Tensor& a) {
    return unary(a, [](Scalar x) { return x * x; }, [](Scalar x, Scalar) { return 2.0 * x; });
}

Tensor leaky_relu(const Tensor& a, Scalar alpha) {
    return unary(
        a, [alpha](Scalar x) { return x > 0 ? x : alpha * x; },
        [alpha](Scalar x, Scalar) { return x > 0 ? 1.0 : alpha; });
}

Tensor sum(const Tensor& a) { return reduce(a, all_axes(a), false, ReduceKind::sum); }
Tensor mean(const Tensor& a) { return reduce(a, all_axes(a), false, ReduceKind::mean); }
Tensor max(const Tensor& a) { return reduce(a, all_axes(a), false, ReduceKind::max); }

Tensor sum(const Tensor& a, const std::vector<std::int64_t>& axes, bool keepdims) {
    return reduce(a, axes, keepdims, ReduceKind::sum);
}
Tensor mean(const Tensor& a, const std::vector<std::int64_t>& axes, bool keepdims) {
    return reduce(a, axes, keepdims, ReduceKind::mean);
}
Tensor max(const Tensor& a, const std::vector<std::int64_t>& axes, bool keepdims) {
    return reduce(a, axes, keepdims, ReduceKind::max);
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.numel()) {
        throw ShapeError("cannot reshape " + to_string(a.shape()) + " to " + to_string(shape));
    }
    Tensor result(std::move(shape), std::vector<Scalar>(a.data().begin(), a.data().end()));
    if (should_record({&a})) {
        GradientTape::active()->record({a}, result, [a](std::span<const Scalar> g) { detail::accumulate_grad(a, g); });
    }
    return result;
}

Tensor concat(std::initializer_list<Tensor> parts, std::int64_t axis) {
    return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor concat(std::span<const Tensor> parts, std::int64_t axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    const auto r = parts[0].rank();
    axis = normalize_axis(axis, r);
    Shape shape = parts[0].shape();
    shape[axis] = 0;
    for (const auto& p : parts) {
        if (p.rank() != r) throw ShapeError("concat rank mismatch");
        for (std::int64_t d = 0; d < r; ++d) {
            if (d != axis && p.shape()[d] != parts[0].shape()[d]) {
                throw ShapeError("concat shape mismatch: " + to_string(p.shape()) + " vs " +
                                 to_string(parts[0].shape()));
            }
        }
        shape[axis] += p.shape()[axis];
    }
    std::int64_t outer = 1;
    for (std::int64_t d = 0; d < axis; ++d) outer *= shape[d];
    std::int64_t inner = 1;
    for (std::int64_t d = axis + 1; d < r; ++d) inner *= shape[d];
    const auto out_chunk = shape[axis] * inner;

    std::vector<Scalar> out(static_cast<std::size_t>(numel(shape)));
    std::int64_t offset = 0;
    std::vector<std::int64_t> offsets;
    bool any_grad = false;
    for (const auto& p : parts) {
        const auto chunk = p.shape()[axis] * inner;
        const auto& P = p.data();
        for (std::int64_t o = 0; o < outer; ++o) {
            std::copy_n(P.begin() + o * chunk, chunk, out.begin() + o * out_chunk + offset);
        }
        offsets.push_back(offset);
        offset += chunk;
        any_grad = any_grad || p.requires_grad();
    }
    Tensor result(shape, std::move(out));
    if (any_grad && GradientTape::active()) {
        std::vector<Tensor> inputs(parts.begin(), parts.end());
        GradientTape::active()->record(inputs, result,
                                       [inputs, offsets, outer, inner, out_chunk, axis](std::span<const Scalar> g) {
                                           for (std::size_t k = 0; k < inputs.size(); ++k) {
                                               const auto& p = inputs[k];
                                               if (!p.requires_grad()) continue;
                                               auto& gp = p.impl()->grad;
                                               const auto chunk = p.shape()[axis] * inner;
                                               for (std::int64_t o = 0; o < outer; ++o) {
                                                   const Scalar* src = g.data() + o * out_chunk + offsets[k];
                                                   Scalar* dst = gp.data() + o * chunk;
                                                   for (std::int64_t j = 0; j < chunk; ++j) dst[j] += src[j];
                                               }
                                           }
                                       });
    }
    return result;
}

Tensor slice(const Tensor& a, const std::vector<std::int64_t>& starts, const Shape& extents) {
    const auto r = a.rank();
    if (static_cast<std::int64_t>(starts.size()) != r || static_cast<std::int64_t>(extents.size()) != r) {
        throw ShapeError("slice needs one start and extent per axis of " + to_string(a.shape()));
    }
    for (std::int64_t d = 0; d < r; ++d) {
        if (starts[d] < 0 || extents[d] <= 0 || starts[d] + extents[d] > a.shape()[d]) {
            throw ShapeError("slice out of range on axis " + std::to_string(d) + " of " + to_string(a.shape()));
        }
    }
    auto in_strides = contiguous_strides(a.shape());
    std::int64_t base = 0;
    for (std::int64_t d = 0; d < r; ++d) base += starts[d] * in_strides[d];
    const auto out_strides = contiguous_strides(extents);
    std::vector<Scalar> out(static_cast<std::size_t>(numel(extents)));
    const auto& A = a.data();
    for_each_index(extents, in_strides, out_strides,
                   [&](std::int64_t i, std::int64_t ia, std::int64_t) { out[i] = A[base + ia]; });
    Tensor result(extents, std::move(out));
    if (should_record({&a})) {
        GradientTape::active()->record({a}, result, [a, base, extents, in_strides, out_strides](std::span<const Scalar> g) {
            auto& ga = a.impl()->grad;
            for_each_index(extents, in_strides, out_strides,
                           [&](std::int64_t i, std::int64_t ia, std::int64_t) { ga[base + ia] += g[i]; });
        });
    }
    return result;
}

Tensor narrow(const Tensor& a, std::int64_t axis, std::int64_t start, std::int64_t length) {
    axis = normalize_axis(axis, a.rank());
    std::vector<std::int64_t> starts(static_cast<std::size_t>(a.rank()), 0);
    Shape extents = a.shape();
    starts[axis] = start;
    extents[axis] = length;
    return slice(a, starts, extents);
}

Tensor softmax(const Tensor& a, std::int64_t axis) {
    axis = normalize_axis(axis, a.rank());
    std::int64_t outer = 1;
    for (std::int64_t d = 0; d < axis; ++d) outer *= a.shape()[d];
    std::int64_t inner = 1;
    for (std::int64_t d = axis + 1; d < a.rank(); ++d) inner *= a.shape()[d];
    const auto len = a.shape()[axis];
    const auto& A = a.data();
    std::vector<Scalar> out(A.size());
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t i = 0; i < inner; ++i) {
            const auto base = o * len * inner + i;
            Scalar m = A[base];
            for (std::int64_t k = 1; k < len; ++k) m = std::max(m, A[base + k * inner]);
            Scalar z = 0;
            for (std::int64_t k = 0; k < len; ++k) {
                const Scalar e = std::exp(A[base + k * inner] - m);
                out[base + k * inner] = e;
                z += e;
            }
            for (std::int64_t k = 0; k < len; ++k) out[base + k * inner] /= z;
        }
    }
    Tensor result(a.shape(), std::move(out));
    if (should_record({&a})) {
        Tensor y = result;
        GradientTape::active()->record({a}, result, [a, y, outer, inner, len](std::span<const Scalar> g) {
            auto& ga = a.impl()->grad;
            const auto& Y = y.data();
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t i = 0; i < inner; ++i) {
                    const auto base = o * len * inner + i;
                    Scalar dot = 0;
                    for (std::int64_t k = 0; k < len; ++k) dot += g[base + k * inner] * Y[base + k * inner];
                    for (std::int64_t k = 0; k < len; ++k) {
                        const auto idx = base + k * inner;
                        ga[idx] += Y[idx] * (g[idx] - dot);
                    }
                }
            }
        });
    }
    return result;
}

Tensor conv(const Tensor& input, const Tensor& kernel, ConvOptions options) {
    return conv_impl(input, kernel, nullptr, options);
}

Tensor conv(const Tensor& input, const Tensor& kernel, const Tensor& bias, ConvOptions options) {
    return conv_impl(input, kernel, &bias, options);
}

Tensor max_pool(const Tensor& input, std::int64_t window, std::int64_t stride) {
    const auto s = spatial_rank_of(input, "max_pool");
    if (window < 1 || stride < 1) throw ShapeError("max_pool window and stride must be >= 1");
    for (std::int64_t i = 0; i < s; ++i) {
        if (window > input.dim(2 + i)) {
            throw ShapeError("max_pool window " + std::to_string(window) + " larger than input " +
                             to_string(input.shape()));
        }
    }
    const Geometry g = make_geometry(input, std::vector<std::int64_t>(s, window), stride, 0, "max_pool");
    const auto planes = g.batch * g.channels;
    const auto [KD, KH, KW] = g.kernel;
    const auto [ID, IH, IW] = g.in;
    const auto [OD, OH, OW] = g.out;
    const auto [SD, SH, SW] = g.stride;
    std::vector<Scalar> out(static_cast<std::size_t>(planes * g.out_size()));
    std::vector<std::int64_t> argmax(out.size());
    const auto& A = input.data();
    for (std::int64_t p = 0; p < planes; ++p) {
        const auto in_base = p * g.in_size();
        for (std::int64_t oz = 0; oz < OD; ++oz)
            for (std::int64_t oy = 0; oy < OH; ++oy)
                for (std::int64_t ox = 0; ox < OW; ++ox) {
                    std::int64_t best = -1;
                    // Window traversal is in increasing linear index order.
                    for (std::int64_t kz = 0; kz < KD; ++kz)
                        for (std::int64_t ky = 0; ky < KH; ++ky)
                            for (std::int64_t kx = 0; kx < KW; ++kx) {
                                const auto idx =
                                    in_base + ((oz * SD + kz) * IH + (oy * SH + ky)) * IW + (ox * SW + kx);
                                if (best < 0 || A[idx] > A[best]) best = idx;
                            }
                    const auto o = (p * OD + oz) * OH * OW + oy * OW + ox;
                    out[o] = A[best];
                    argmax[o] = best;
                }
    }
    (void)ID;
    Tensor result(output_shape(input, g.channels, g), std::move(out));
    if (should_record({&input})) {
        GradientTape::active()->record({input}, result, [input, argmax = std::move(argmax)](std::span<const Scalar> g) {
            auto& gi = input.impl()->grad;
            for (std::size_t o = 0; o < argmax.size(); ++o) gi[argmax[o]] += g[o];
        });
    }
    return result;
}

Tensor upsample_nearest(const Tensor& input, std::int64_t factor) {
    const auto s = spatial_rank_of(input, "upsample_nearest");
    if (factor < 1) throw ShapeError("upsample factor must be >= 1");
    Geometry g;
    g.batch = input.dim(0);
    g.channels = input.dim(1);
    for (std::int64_t i = 0; i < s; ++i) {
        g.in[3 - s + i] = input.dim(2 + i);
        g.out[3 - s + i] = input.dim(2 + i) * factor;
    }
    const auto fz = s == 3 ? factor : 1;
    const auto fy = s >= 2 ? factor : 1;
    const auto fx = factor;
    const auto planes = g.batch * g.channels;
    const auto [OD, OH, OW] = g.out;
    const auto [ID, IH, IW] = g.in;
    std::vector<Scalar> out(static_cast<std::size_t>(planes * g.out_size()));
    const auto& A = input.data();
    for (std::int64_t p = 0; p < planes; ++p)
        for (std::int64_t oz = 0; oz < OD; ++oz)
            for (std::int64_t oy = 0; oy < OH; ++oy) {
                const Scalar* src = A.data() + p * g.in_size() + ((oz / fz) * IH + oy / fy) * IW;
                Scalar* dst = out.data() + p * g.out_size() + (oz * OH + oy) * OW;
                for (std::int64_t ox = 0; ox < OW; ++ox) dst[ox] = src[ox / fx];
            }
    (void)ID;
    Tensor result(output_shape(input, g.channels, g), std::move(out));
    if (should_record({&input})) {
        GradientTape::active()->record({input}, result, [input, g, fz, fy, fx](std::span<const Scalar> gy) {
            auto& gi = input.impl()->grad;
            const auto [OD, OH, OW] = g.out;
            const auto [ID, IH, IW] = g.in;
            (void)ID;
            for (std::int64_t p = 0; p < g.batch * g.channels; ++p)
                for (std::int64_t oz = 0; oz < OD; ++oz)
                    for (std::int64_t oy = 0; oy < OH; ++oy) {
                        Scalar* dst = gi.data() + p * g.in_size() + ((oz / fz) * IH + oy / fy) * IW;
                        const Scalar* src = gy.data() + p * g.out_size() + (oz * OH + oy) * OW;
                        for (std::int64_t ox = 0; ox < OW; ++ox) dst[ox / fx] += src[ox];
                    }
        });
    }
    return result;
}

}  // namespace deepatlas
