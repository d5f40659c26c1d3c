#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "deepatlas/labels.hpp"
#include "deepatlas/tensor.hpp"

namespace deepatlas {

/// Parameters of the synthetic atlas population. Amplitudes are in
/// normalized coordinates (each axis spans [-1, 1]).
struct SyntheticSpec {
    Shape spatial_shape{64, 64};
    std::int64_t classes = 4;
    std::int64_t count = 60;
    std::int64_t control_points = 5;  // per axis, multilinearly interpolated
    Scalar max_amplitude = 0.12;
    Scalar intensity_noise_sd = 0.03;
    Scalar intensity_jitter = 0.1;  // per-image shift of each class intensity
    Scalar bias_field_amplitude = 0.25;
    std::uint64_t seed = 7;

    void validate() const;
    bool operator==(const SyntheticSpec&) const = default;
};

nlohmann::json to_json(const SyntheticSpec& spec);
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j);

/// One generated image with its ground truth.
struct Sample {
    std::string id;
    Tensor intensity;  // [1, 1, spatial...] in [0, 1]
    LabelMap labels;
    Tensor field;  // generating displacement [1, d, spatial...]; image = template o (id + field)
};

struct Dataset {
    SyntheticSpec spec;
    std::vector<Sample> samples;
};

/// Template class map and noise-free template intensity.
LabelMap template_labels(const SyntheticSpec& spec);
Tensor template_intensity(const SyntheticSpec& spec);
/// Nominal intensity of each class before jitter, bias and noise.
std::vector<Scalar> class_intensities(std::int64_t classes);

/// Pure function of its settings. Fields that fold (non-positive interior
/// Jacobian determinant) are regenerated at half amplitude; throws
/// std::runtime_error after 10 failed attempts.
Dataset generate_dataset(const SyntheticSpec& spec);

/// An image as seen by training code. Labels exist only for images whose
/// manual segmentation is available to training; the ground truth of masked
/// images is kept aside for evaluation behind a read counter.
class LabeledImage {
public:
    LabeledImage(std::string id, Tensor intensity, std::optional<LabelMap> labels,
                 std::optional<LabelMap> hidden_reference = std::nullopt);

    const std::string& id() const { return id_; }
    const Tensor& intensity() const { return intensity_; }  // [1, 1, spatial...]
    bool is_labeled() const { return labels_.has_value(); }
    /// Throws std::logic_error for an unlabeled image.
    const LabelMap& labels() const;
    /// Ground truth for measurement. Reading a masked image's reference is
    /// counted; training code must never do it.
    const LabelMap& reference_labels() const;
    std::int64_t hidden_reads() const { return hidden_reads_->load(); }

private:
    std::string id_;
    Tensor intensity_;
    std::optional<LabelMap> labels_;
    std::optional<LabelMap> hidden_;
    std::shared_ptr<std::atomic<std::int64_t>> hidden_reads_;
};

struct SplitSizes {
    std::int64_t train = 40;
    std::int64_t val = 8;
    std::int64_t test = 12;
};

/// Index partition of a dataset. `labeled` lists the training indices whose
/// labels are visible to training.
struct Split {
    std::vector<std::int64_t> train;
    std::vector<std::int64_t> val;
    std::vector<std::int64_t> test;
    std::vector<std::int64_t> labeled;
    std::uint64_t seed = 0;

    bool operator==(const Split&) const = default;
};

/// Deterministic: train/val/test take consecutive index ranges; `n_labeled`
/// training images are drawn without replacement from `seed`.
Split split_dataset(const Dataset& dataset, SplitSizes sizes, std::int64_t n_labeled, std::uint64_t seed);

struct Partitions {
    std::vector<LabeledImage> train;
    std::vector<LabeledImage> val;   // fully labeled
    std::vector<LabeledImage> test;  // fully labeled

    std::int64_t labeled_count() const;
    std::int64_t hidden_reads() const;
};

Partitions make_partitions(const Dataset& dataset, const Split& split);

/// Directory layout: manifest.json plus '<id>.image.npy', '<id>.labels.npy'
/// and '<id>.field.npy' per sample.
void save_dataset(const std::filesystem::path& dir, const Dataset& dataset,
                  const std::optional<Split>& split = std::nullopt);
Dataset load_dataset(const std::filesystem::path& dir);
std::optional<Split> load_split(const std::filesystem::path& dir);

nlohmann::json to_json(const Split& split);
Split split_from_json(const nlohmann::json& j);

}  // namespace deepatlas
