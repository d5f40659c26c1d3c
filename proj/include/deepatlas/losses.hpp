#pragma once

#include <optional>

#include "deepatlas/imageops.hpp"
#include "deepatlas/tensor.hpp"

namespace deepatlas {

inline constexpr Scalar kDiceSmoothing = 1e-6;
inline constexpr Scalar kNccEpsilon = 1e-10;

/// Loss weights. Defaults are the knee-experiment values; use
/// lambda_r = 5000 for data that needs large deformations.
struct LossWeights {
    Scalar lambda_r = 20000.0;
    Scalar lambda_a = 3.0;
    Scalar lambda_sp = 3.0;

    /// Throws std::invalid_argument on a negative or non-finite weight.
    void validate() const;
};

/// `conventional` uses 2 * sum(S * S*) in the numerator so that perfect
/// overlap scores 0. `as_printed` omits the factor 2, so identical hard maps
/// score exactly 0.5 (its smoothing term in the numerator is halved too).
enum class DiceVariant { conventional, as_printed };

struct PairLabeling {
    bool moving_labeled = false;
    bool target_labeled = false;

    bool any() const { return moving_labeled || target_labeled; }
    bool both() const { return moving_labeled && target_labeled; }
};

/// 1 - NCC computed globally per batch entry and averaged over the batch.
/// Result lies in [0, 2]. Constant images are kept finite by kNccEpsilon and
/// reported through log_warning.
Tensor ncc_loss(const Tensor& warped, const Tensor& target);

/// Soft multi-class Dice loss on [N, K, spatial...] probability maps,
/// averaged over classes then batch.
Tensor soft_dice_loss(const Tensor& s, const Tensor& s_star, DiceVariant variant = DiceVariant::conventional);

/// Mean over interior voxels of sum_i ||H(u_i)||_F^2, averaged over the batch.
Tensor bending_energy(const DisplacementField& field);

struct RegistrationLoss {
    Tensor total;
    Tensor similarity;      // L_i
    Tensor regularization;  // L_r
    Tensor anatomy;         // L_a, undefined when a segmentation is missing
};

/// L_i(I_m o phi_inv, I_t) + lambda_r L_r(u) + lambda_a L_a(S_m o phi_inv, S_t).
/// Segmentations are K-channel maps; the anatomy term is dropped if either
/// is absent.
RegistrationLoss registration_objective(const Tensor& moving, const Tensor& target,
                                        const std::optional<Tensor>& moving_seg,
                                        const std::optional<Tensor>& target_seg, const DisplacementField& field,
                                        const LossWeights& weights,
                                        DiceVariant variant = DiceVariant::conventional);

/// Segmentation-step operands. Manual maps are one-hot; predictions are the
/// segmentation network outputs F_S(I_m) and F_S(I_t).
struct SegmentationInputs {
    std::optional<Tensor> moving_manual;
    std::optional<Tensor> target_manual;
    std::optional<Tensor> moving_pred;
    std::optional<Tensor> target_pred;
};

struct SegmentationLoss {
    Tensor total;
    Tensor anatomy;     // L_a
    Tensor supervised;  // L_sp
};

/// Semi-supervised segmentation objective. The field is used as a constant.
///   target unlabeled: la L_a(S_m o phi, F_S(I_t)) + lsp L_sp(F_S(I_m), S_m)
///   moving unlabeled: la L_a(F_S(I_m) o phi, S_t) + lsp L_sp(F_S(I_t), S_t)
///   both labeled:     la L_a(S_m o phi, S_t)      + lsp L_sp(F_S(I_m), S_m)
///   both unlabeled:   0
/// Throws std::invalid_argument when an operand the case needs is missing.
SegmentationLoss segmentation_objective(const SegmentationInputs& inputs, const DisplacementField& field,
                                        PairLabeling labeling, const LossWeights& weights,
                                        DiceVariant variant = DiceVariant::conventional);

}  // namespace deepatlas
