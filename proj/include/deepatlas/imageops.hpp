#pragma once

#include <cstdint>

#include "deepatlas/tensor.hpp"

namespace deepatlas {

/// Per-voxel displacement u of shape [N, d, spatial...] in normalized
/// coordinates, where every image axis spans [-1, 1]. Channel i displaces
/// along spatial axis i in tensor order (the first spatial axis is channel 0).
class DisplacementField {
public:
    /// Throws ShapeError unless the channel count equals the spatial rank and
    /// NumericDomainError if any entry is not finite.
    explicit DisplacementField(Tensor u);

    static DisplacementField zeros(std::int64_t batch, const Shape& spatial_shape);

    const Tensor& tensor() const { return u_; }
    std::int64_t batch() const { return u_.dim(0); }
    std::int64_t spatial_rank() const { return u_.rank() - 2; }
    Shape spatial_shape() const;

    /// Same values, cut off from the gradient tape.
    DisplacementField detached() const { return DisplacementField(u_.detach()); }

private:
    Tensor u_;
};

enum class Interpolation { linear, nearest };

Shape spatial_shape_of(const Tensor& t);

/// Normalized coordinates of every voxel, shape [d, spatial...]. Axis i runs
/// linearly from -1 to 1; an axis of extent 1 sits at 0.
Tensor identity_grid(const Shape& spatial_shape);

/// Absolute sampling coordinates phi_inv = u + id, shape [N, d, spatial...].
Tensor deformation_map(const DisplacementField& field);

/// Resamples image [N, C, spatial...] at id(x) + u(x). Coordinates beyond the
/// image clamp to the border. Linear mode is differentiable in the image and
/// the field; nearest mode propagates gradients to the image only.
Tensor warp(const Tensor& image, const DisplacementField& field, Interpolation mode = Interpolation::linear);

/// Central finite differences of the field on interior voxels with spacing
/// 2 / (extent - 1) per axis. Every spatial extent must be at least 3.
///   order 1: [N, d, d, interior...] with entry (i, j) = du_i / dx_j
///   order 2: [N, d, d, d, interior...] with entry (i, j, k) = d2u_i / dx_j dx_k
/// Mixed partials use the symmetric four-point stencil.
Tensor spatial_derivatives(const DisplacementField& field, int order);

/// det(I + grad u) on interior voxels, shape [N, interior...]. Not recorded
/// on the tape.
Tensor jacobian_determinant(const DisplacementField& field);

}  // namespace deepatlas
