#include "deepatlas/imageops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "deepatlas/ops.hpp"

namespace deepatlas {

DisplacementField::DisplacementField(Tensor u) : u_(std::move(u)) {
    if (!u_.defined() || u_.rank() < 3 || u_.rank() > 5) {
        throw ShapeError("displacement field must be [N, d, spatial...] with 1 to 3 spatial axes");
    }
    if (u_.dim(1) != u_.rank() - 2) {
        throw ShapeError("displacement field " + to_string(u_.shape()) + " needs one channel per spatial axis");
    }
    for (auto v : u_.data()) {
        if (!std::isfinite(v)) throw NumericDomainError("displacement field contains non-finite values");
    }
}

DisplacementField DisplacementField::zeros(std::int64_t batch, const Shape& spatial_shape) {
    Shape shape{batch, static_cast<std::int64_t>(spatial_shape.size())};
    shape.insert(shape.end(), spatial_shape.begin(), spatial_shape.end());
    return DisplacementField(Tensor::zeros(shape));
}

Shape DisplacementField::spatial_shape() const { return spatial_shape_of(u_); }

Shape spatial_shape_of(const Tensor& t) { return Shape(t.shape().begin() + 2, t.shape().end()); }

Tensor identity_grid(const Shape& spatial_shape) {
    const auto d = static_cast<std::int64_t>(spatial_shape.size());
    if (d < 1) throw ShapeError("identity_grid needs at least one spatial axis");
    const auto n = numel(spatial_shape);
    Shape shape{d};
    shape.insert(shape.end(), spatial_shape.begin(), spatial_shape.end());
    std::vector<Scalar> out(static_cast<std::size_t>(d * n));
    for (std::int64_t axis = 0; axis < d; ++axis) {
        std::int64_t inner = 1;
        for (std::int64_t k = axis + 1; k < d; ++k) inner *= spatial_shape[k];
        const auto extent = spatial_shape[axis];
        for (std::int64_t v = 0; v < n; ++v) {
            const auto i = (v / inner) % extent;
            Scalar c = 0.0;
            if (extent > 1) {
                // Endpoints are exact: i = 0 gives -1, i = extent - 1 gives 1.
                c = (2.0 * static_cast<Scalar>(i) - static_cast<Scalar>(extent - 1)) /
                    static_cast<Scalar>(extent - 1);
            }
            out[axis * n + v] = c;
        }
    }
    return Tensor(shape, std::move(out));
}

Tensor deformation_map(const DisplacementField& field) {
    const auto& u = field.tensor();
    Shape grid_shape = u.shape();
    grid_shape[0] = 1;
    return add(u, reshape(identity_grid(field.spatial_shape()), grid_shape));
}

namespace {

struct WarpGeometry {
    std::int64_t batch = 0;
    std::int64_t channels = 0;
    std::int64_t rank = 0;
    std::array<std::int64_t, 3> extent{1, 1, 1};
    std::int64_t voxels = 1;
};

// Continuous index of a sample along one axis: index + u * (n - 1) / 2.
struct AxisSample {
    std::int64_t lo = 0;
    std::int64_t hi = 0;
    Scalar frac = 0;
    Scalar dfrac_du = 0;  // zero when clamped
};

AxisSample sample_axis(std::int64_t index, Scalar u, std::int64_t extent) {
    AxisSample s;
    if (extent == 1) return s;
    const Scalar scale = 0.5 * static_cast<Scalar>(extent - 1);
    Scalar p = static_cast<Scalar>(index) + u * scale;
    const Scalar top = static_cast<Scalar>(extent - 1);
    s.dfrac_du = scale;
    if (p <= 0.0) {
        if (p < 0.0) s.dfrac_du = 0.0;
        p = 0.0;
    } else if (p >= top) {
        if (p > top) s.dfrac_du = 0.0;
        p = top;
    }
    s.lo = std::min(static_cast<std::int64_t>(std::floor(p)), extent - 1);
    s.hi = std::min(s.lo + 1, extent - 1);
    s.frac = p - static_cast<Scalar>(s.lo);
    return s;
}

}  // namespace

Tensor warp(const Tensor& image, const DisplacementField& field, Interpolation mode) {
    const auto& u = field.tensor();
    if (image.rank() != u.rank()) {
        throw ShapeError("warp: image " + to_string(image.shape()) + " and field " + to_string(u.shape()) +
                         " differ in rank");
    }
    if (spatial_shape_of(image) != field.spatial_shape() || image.dim(0) != u.dim(0)) {
        throw ShapeError("warp: image " + to_string(image.shape()) + " does not match field " +
                         to_string(u.shape()));
    }
    WarpGeometry g;
    g.batch = image.dim(0);
    g.channels = image.dim(1);
    g.rank = field.spatial_rank();
    for (std::int64_t i = 0; i < g.rank; ++i) g.extent[3 - g.rank + i] = image.dim(2 + i);
    g.voxels = g.extent[0] * g.extent[1] * g.extent[2];

    const auto& I = image.data();
    const auto& U = u.data();
    std::vector<Scalar> out(I.size());
    const auto [ED, EH, EW] = g.extent;

    auto axis_u = [&](std::int64_t n, std::int64_t axis3, std::int64_t v) -> Scalar {
        const auto c = axis3 - (3 - g.rank);
        if (c < 0) return 0.0;
        return U[(n * g.rank + c) * g.voxels + v];
    };

    for (std::int64_t n = 0; n < g.batch; ++n) {
        for (std::int64_t z = 0; z < ED; ++z)
            for (std::int64_t y = 0; y < EH; ++y)
                for (std::int64_t x = 0; x < EW; ++x) {
                    const auto v = (z * EH + y) * EW + x;
                    const AxisSample sz = sample_axis(z, axis_u(n, 0, v), ED);
                    const AxisSample sy = sample_axis(y, axis_u(n, 1, v), EH);
                    const AxisSample sx = sample_axis(x, axis_u(n, 2, v), EW);
                    for (std::int64_t c = 0; c < g.channels; ++c) {
                        const Scalar* plane = I.data() + (n * g.channels + c) * g.voxels;
                        Scalar value = 0.0;
                        if (mode == Interpolation::nearest) {
                            const auto iz = sz.frac >= 0.5 ? sz.hi : sz.lo;
                            const auto iy = sy.frac >= 0.5 ? sy.hi : sy.lo;
                            const auto ix = sx.frac >= 0.5 ? sx.hi : sx.lo;
                            value = plane[(iz * EH + iy) * EW + ix];
                        } else {
                            for (int corner = 0; corner < 8; ++corner) {
                                const bool bz = corner & 4, by = corner & 2, bx = corner & 1;
                                const Scalar w = (bz ? sz.frac : 1.0 - sz.frac) * (by ? sy.frac : 1.0 - sy.frac) *
                                                 (bx ? sx.frac : 1.0 - sx.frac);
                                if (w == 0.0) continue;
                                value += w * plane[((bz ? sz.hi : sz.lo) * EH + (by ? sy.hi : sy.lo)) * EW +
                                                   (bx ? sx.hi : sx.lo)];
                            }
                        }
                        out[(n * g.channels + c) * g.voxels + v] = value;
                    }
                }
    }
    Tensor result(image.shape(), std::move(out));

    const bool field_grad = mode == Interpolation::linear && u.requires_grad();
    if (GradientTape::active() && (image.requires_grad() || field_grad)) {
        GradientTape::active()->record({image, u}, result, [image, u, g, mode, field_grad](std::span<const Scalar> gy) {
            const auto& I = image.data();
            const auto& U = u.data();
            Scalar* gi = image.requires_grad() ? image.impl()->grad.data() : nullptr;
            Scalar* gu = field_grad ? u.impl()->grad.data() : nullptr;
            const auto [ED, EH, EW] = g.extent;
            auto axis_u = [&](std::int64_t n, std::int64_t axis3, std::int64_t v) -> Scalar {
                const auto c = axis3 - (3 - g.rank);
                if (c < 0) return 0.0;
                return U[(n * g.rank + c) * g.voxels + v];
            };
            for (std::int64_t n = 0; n < g.batch; ++n) {
                for (std::int64_t z = 0; z < ED; ++z)
                    for (std::int64_t y = 0; y < EH; ++y)
                        for (std::int64_t x = 0; x < EW; ++x) {
                            const auto v = (z * EH + y) * EW + x;
                            const std::array<AxisSample, 3> s{sample_axis(z, axis_u(n, 0, v), ED),
                                                              sample_axis(y, axis_u(n, 1, v), EH),
                                                              sample_axis(x, axis_u(n, 2, v), EW)};
                            std::array<Scalar, 3> du{0, 0, 0};
                            for (std::int64_t c = 0; c < g.channels; ++c) {
                                const auto plane_off = (n * g.channels + c) * g.voxels;
                                const Scalar go = gy[plane_off + v];
                                if (go == 0.0) continue;
                                if (mode == Interpolation::nearest) {
                                    if (gi) {
                                        const auto iz = s[0].frac >= 0.5 ? s[0].hi : s[0].lo;
                                        const auto iy = s[1].frac >= 0.5 ? s[1].hi : s[1].lo;
                                        const auto ix = s[2].frac >= 0.5 ? s[2].hi : s[2].lo;
                                        gi[plane_off + (iz * EH + iy) * EW + ix] += go;
                                    }
                                    continue;
                                }
                                for (int corner = 0; corner < 8; ++corner) {
                                    const std::array<bool, 3> bit{(corner & 4) != 0, (corner & 2) != 0,
                                                                  (corner & 1) != 0};
                                    std::array<Scalar, 3> w;
                                    std::array<std::int64_t, 3> idx;
                                    for (int a = 0; a < 3; ++a) {
                                        w[a] = bit[a] ? s[a].frac : 1.0 - s[a].frac;
                                        idx[a] = bit[a] ? s[a].hi : s[a].lo;
                                    }
                                    const auto off = plane_off + (idx[0] * EH + idx[1]) * EW + idx[2];
                                    if (gi) gi[off] += go * w[0] * w[1] * w[2];
                                    if (gu) {
                                        const Scalar val = I[off] * go;
                                        du[0] += (bit[0] ? 1.0 : -1.0) * w[1] * w[2] * val;
                                        du[1] += (bit[1] ? 1.0 : -1.0) * w[0] * w[2] * val;
                                        du[2] += (bit[2] ? 1.0 : -1.0) * w[0] * w[1] * val;
                                    }
                                }
                            }
                            if (gu) {
                                for (std::int64_t c = 0; c < g.rank; ++c) {
                                    const auto a = 3 - g.rank + c;
                                    gu[(n * g.rank + c) * g.voxels + v] += du[a] * s[a].dfrac_du;
                                }
                            }
                        }
            }
        });
    }
    return result;
}

namespace {

// Interior block of the field shifted by `offsets` voxels per spatial axis.
Tensor shifted_interior(const Tensor& u, const std::vector<std::int64_t>& offsets) {
    const auto d = u.rank() - 2;
    std::vector<std::int64_t> starts{0, 0};
    Shape extents{u.dim(0), u.dim(1)};
    for (std::int64_t a = 0; a < d; ++a) {
        starts.push_back(1 + offsets[a]);
        extents.push_back(u.dim(2 + a) - 2);
    }
    return slice(u, starts, extents);
}

Tensor add_axis(const Tensor& t, std::int64_t axis) {
    Shape s = t.shape();
    s.insert(s.begin() + axis, 1);
    return reshape(t, s);
}

}  // namespace

Tensor spatial_derivatives(const DisplacementField& field, int order) {
    if (order != 1 && order != 2) throw std::invalid_argument("derivative order must be 1 or 2");
    const auto& u = field.tensor();
    const auto d = field.spatial_rank();
    std::vector<Scalar> h(static_cast<std::size_t>(d));
    for (std::int64_t a = 0; a < d; ++a) {
        const auto n = u.dim(2 + a);
        if (n < 3) {
            throw ShapeError("spatial derivatives need every spatial extent >= 3, got " + to_string(u.shape()));
        }
        h[a] = 2.0 / static_cast<Scalar>(n - 1);
    }
    auto unit = [d](std::int64_t axis, std::int64_t step) {
        std::vector<std::int64_t> o(static_cast<std::size_t>(d), 0);
        o[axis] += step;
        return o;
    };
    auto first = [&](std::int64_t j) {
        return (shifted_interior(u, unit(j, 1)) - shifted_interior(u, unit(j, -1))) * (0.5 / h[j]);
    };
    auto second = [&](std::int64_t j, std::int64_t k) {
        if (j == k) {
            const Tensor centre = shifted_interior(u, unit(j, 0));
            return (shifted_interior(u, unit(j, 1)) - centre * 2.0 + shifted_interior(u, unit(j, -1))) *
                   (1.0 / (h[j] * h[j]));
        }
        auto at = [&](std::int64_t sj, std::int64_t sk) {
            auto o = unit(j, sj);
            o[k] += sk;
            return shifted_interior(u, o);
        };
        return (at(1, 1) - at(1, -1) - at(-1, 1) + at(-1, -1)) * (0.25 / (h[j] * h[k]));
    };

    std::vector<Tensor> rows;
    for (std::int64_t j = 0; j < d; ++j) {
        if (order == 1) {
            rows.push_back(add_axis(first(j), 2));
        } else {
            std::vector<Tensor> cols;
            for (std::int64_t k = 0; k < d; ++k) cols.push_back(add_axis(second(j, k), 2));
            rows.push_back(add_axis(concat(cols, 2), 2));
        }
    }
    return concat(rows, 2);
}

Tensor jacobian_determinant(const DisplacementField& field) {
    NoGradGuard no_grad;
    const Tensor grads = spatial_derivatives(field, 1);
    const auto d = field.spatial_rank();
    const auto batch = field.batch();
    Shape out_shape{batch};
    for (std::int64_t a = 0; a < d; ++a) out_shape.push_back(field.tensor().dim(2 + a) - 2);
    const auto voxels = numel(out_shape) / batch;
    const auto& G = grads.data();
    std::vector<Scalar> out(static_cast<std::size_t>(batch * voxels));
    for (std::int64_t n = 0; n < batch; ++n) {
        for (std::int64_t v = 0; v < voxels; ++v) {
            auto J = [&](std::int64_t i, std::int64_t j) {
                return G[((n * d + i) * d + j) * voxels + v] + (i == j ? 1.0 : 0.0);
            };
            Scalar det = 0.0;
            if (d == 1) {
                det = J(0, 0);
            } else if (d == 2) {
                det = J(0, 0) * J(1, 1) - J(0, 1) * J(1, 0);
            } else {
                det = J(0, 0) * (J(1, 1) * J(2, 2) - J(1, 2) * J(2, 1)) -
                      J(0, 1) * (J(1, 0) * J(2, 2) - J(1, 2) * J(2, 0)) +
                      J(0, 2) * (J(1, 0) * J(2, 1) - J(1, 1) * J(2, 0));
            }
            out[n * voxels + v] = det;
        }
    }
    return Tensor(out_shape, std::move(out));
}

}  // namespace deepatlas
