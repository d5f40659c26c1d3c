#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "deepatlas/data.hpp"
#include "deepatlas/imageops.hpp"
#include "deepatlas/labels.hpp"
#include "deepatlas/nets.hpp"

namespace deepatlas {

/// Views [spatial...], [1, spatial...] or [1, 1, spatial...] as a
/// single-image batch [1, 1, spatial...]. Throws ShapeError otherwise.
Tensor as_image_batch(const Tensor& image, std::int64_t spatial_rank);

/// Hard segmentation of one image, without gradient recording.
LabelMap segment_image(const SegmentationNet& net, const Tensor& image);

struct RegistrationOutput {
    Tensor field;   // [1, d, spatial...]
    Tensor warped;  // moving resampled in target space, linear interpolation
};
RegistrationOutput register_pair(const RegistrationNet& net, const Tensor& moving, const Tensor& target);

/// Per-class Dice in percent: 200 |P_k & T_k| / (|P_k| + |T_k|). A class
/// absent from both maps scores 100.
std::vector<Scalar> hard_dice(const LabelMap& pred, const LabelMap& truth, std::int64_t classes);

/// Mean of classes 1..K-1, the score used for model selection and reports.
Scalar foreground_mean(std::span<const Scalar> per_class);

struct ClassGroup {
    std::string name;
    std::vector<std::int64_t> classes;
};

struct ItemScore {
    std::string id;  // image id, or "moving->target" for a pair
    std::vector<Scalar> dice;
    Scalar mean = 0;  // foreground mean
    Scalar folding_fraction = 0;
};

struct EvalReport {
    std::string mode;  // "seg" or "reg"
    std::int64_t classes = 0;
    std::vector<ItemScore> items;
    std::vector<Scalar> class_mean;
    std::vector<Scalar> class_sd;
    Scalar mean = 0;  // mean of the per-item foreground means
    Scalar sd = 0;
    std::vector<ClassGroup> groups;
    std::vector<Scalar> group_mean;
    Scalar folding_fraction = 0;  // mean over pairs, registration only
    nlohmann::json metadata = nlohmann::json::object();
};

/// Fills the aggregate fields from `items` (population standard deviation).
void summarize(EvalReport& report);

EvalReport eval_segmentation(const SegmentationNet& net, std::span<const LabeledImage> images,
                             std::vector<ClassGroup> groups = {});

/// All ordered pairs of distinct images. Moving labels are warped with
/// nearest interpolation and compared with the target labels.
EvalReport eval_registration(const RegistrationNet& net, std::span<const LabeledImage> images,
                             std::int64_t classes, std::vector<ClassGroup> groups = {});

/// Fraction of interior voxels with a non-positive Jacobian determinant.
Scalar folding_fraction(const DisplacementField& field);

nlohmann::json to_json(const EvalReport& report);
/// Writes report.json and per_image.csv into `dir`.
void write_report(const std::filesystem::path& dir, const EvalReport& report);

/// Plain PGM (P2). Intensity tensors [.., spatial...] are min-max scaled to
/// 0-255; 3-D volumes contribute their middle slice along the first axis.
void render_slice(const Tensor& image, const std::filesystem::path& path);
/// Label maps use fixed gray levels per class.
void render_slice(const LabelMap& labels, const std::filesystem::path& path);

}  // namespace deepatlas
