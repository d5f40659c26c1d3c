#include "deepatlas/losses.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "deepatlas/log.hpp"
#include "deepatlas/ops.hpp"

namespace deepatlas {

void LossWeights::validate() const {
    for (Scalar w : {lambda_r, lambda_a, lambda_sp}) {
        if (!(w >= 0.0) || !std::isfinite(w)) throw std::invalid_argument("loss weights must be finite and >= 0");
    }
}

namespace {

std::vector<std::int64_t> axes_from(std::int64_t first, std::int64_t rank) {
    std::vector<std::int64_t> axes(static_cast<std::size_t>(rank - first));
    std::iota(axes.begin(), axes.end(), first);
    return axes;
}

Tensor zero_loss() { return Tensor::scalar(0.0); }

}  // namespace

Tensor ncc_loss(const Tensor& warped, const Tensor& target) {
    if (warped.shape() != target.shape()) {
        throw ShapeError("ncc_loss: shapes " + to_string(warped.shape()) + " and " + to_string(target.shape()) +
                         " differ");
    }
    if (warped.rank() < 2) throw ShapeError("ncc_loss expects [N, ...] inputs");
    const auto axes = axes_from(1, warped.rank());
    const Tensor a = warped - mean(warped, axes, true);
    const Tensor b = target - mean(target, axes, true);
    const Tensor cross = sum(a * b, axes);
    const Tensor denom_sq = sum(square(a), axes) * sum(square(b), axes);
    for (auto v : denom_sq.data()) {
        if (v < kNccEpsilon) {
            log_warning("ncc_loss: near-constant image, correlation is ill-defined");
            break;
        }
    }
    return mean(1.0 - cross / sqrt(denom_sq + kNccEpsilon));
}

Tensor soft_dice_loss(const Tensor& s, const Tensor& s_star, DiceVariant variant) {
    if (s.rank() < 3 || s.shape() != s_star.shape()) {
        if (s.rank() >= 2 && s_star.rank() >= 2 && s.dim(1) != s_star.dim(1)) {
            throw ShapeError("soft_dice_loss: class count " + std::to_string(s.dim(1)) + " vs " +
                             std::to_string(s_star.dim(1)));
        }
        throw ShapeError("soft_dice_loss: shapes " + to_string(s.shape()) + " and " + to_string(s_star.shape()) +
                         " must match as [N, K, spatial...]");
    }
    const auto axes = axes_from(2, s.rank());
    const Tensor overlap = sum(s * s_star, axes);
    const Tensor total = sum(s, axes) + sum(s_star, axes);
    Tensor ratio;
    if (variant == DiceVariant::conventional) {
        ratio = (overlap * 2.0 + kDiceSmoothing) / (total + kDiceSmoothing);
    } else {
        ratio = (overlap + 0.5 * kDiceSmoothing) / (total + kDiceSmoothing);
    }
    // Mean over classes then batch; equal class counts per entry make this a
    // single mean over [N, K].
    return 1.0 - mean(ratio);
}

Tensor bending_energy(const DisplacementField& field) {
    const Tensor hessians = spatial_derivatives(field, 2);
    const auto d = field.spatial_rank();
    std::int64_t interior = 1;
    for (std::int64_t a = 0; a < d; ++a) interior *= field.tensor().dim(2 + a) - 2;
    return sum(square(hessians)) * (1.0 / static_cast<Scalar>(interior * field.batch()));
}

RegistrationLoss registration_objective(const Tensor& moving, const Tensor& target,
                                        const std::optional<Tensor>& moving_seg,
                                        const std::optional<Tensor>& target_seg, const DisplacementField& field,
                                        const LossWeights& weights, DiceVariant variant) {
    weights.validate();
    RegistrationLoss out;
    out.similarity = ncc_loss(warp(moving, field), target);
    out.regularization = bending_energy(field);
    out.total = out.similarity + out.regularization * weights.lambda_r;
    if (moving_seg && target_seg) {
        out.anatomy = soft_dice_loss(warp(*moving_seg, field), *target_seg, variant);
        out.total = out.total + out.anatomy * weights.lambda_a;
    }
    return out;
}

SegmentationLoss segmentation_objective(const SegmentationInputs& in, const DisplacementField& field,
                                        PairLabeling labeling, const LossWeights& weights, DiceVariant variant) {
    weights.validate();
    auto need = [](const std::optional<Tensor>& t, const char* what) -> const Tensor& {
        if (!t) throw std::invalid_argument(std::string("segmentation_objective: missing ") + what);
        return *t;
    };
    SegmentationLoss out;
    if (!labeling.any()) {
        out.total = zero_loss();
        out.anatomy = zero_loss();
        out.supervised = zero_loss();
        return out;
    }
    const DisplacementField phi = field.detached();
    if (labeling.both()) {
        const Tensor& sm = need(in.moving_manual, "moving manual segmentation");
        const Tensor& st = need(in.target_manual, "target manual segmentation");
        out.anatomy = soft_dice_loss(warp(sm.detach(), phi), st.detach(), variant);
        out.supervised = soft_dice_loss(need(in.moving_pred, "moving prediction"), sm, variant);
    } else if (labeling.moving_labeled) {
        const Tensor& sm = need(in.moving_manual, "moving manual segmentation");
        out.anatomy = soft_dice_loss(warp(sm, phi), need(in.target_pred, "target prediction"), variant);
        out.supervised = soft_dice_loss(need(in.moving_pred, "moving prediction"), sm, variant);
    } else {
        const Tensor& st = need(in.target_manual, "target manual segmentation");
        out.anatomy = soft_dice_loss(warp(need(in.moving_pred, "moving prediction"), phi), st, variant);
        out.supervised = soft_dice_loss(need(in.target_pred, "target prediction"), st, variant);
    }
    out.total = out.anatomy * weights.lambda_a + out.supervised * weights.lambda_sp;
    return out;
}

}  // namespace deepatlas
