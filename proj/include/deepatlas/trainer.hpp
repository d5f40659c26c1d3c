#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "deepatlas/data.hpp"
#include "deepatlas/losses.hpp"
#include "deepatlas/nets.hpp"
#include "deepatlas/optim.hpp"

namespace deepatlas {

/// Invalid or inconsistent run configuration.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class Protocol { mono_seg, mono_reg, semi_da_seg, semi_da_reg, da };

std::string to_string(Protocol p);
Protocol protocol_from_string(const std::string& name);
bool is_joint(Protocol p);

inline constexpr Scalar kMonoLearningRate = 1e-3;
inline constexpr Scalar kJointRegistrationLearningRate = 5e-4;
inline constexpr Scalar kJointSegmentationLearningRate = 1e-4;

struct TrainConfig {
    Protocol protocol = Protocol::da;
    LossWeights weights;
    DiceVariant dice_variant = DiceVariant::conventional;
    /// Registration steps per segmentation step; the update sequence repeats
    /// `alt_ratio` registration steps followed by one segmentation step.
    std::int64_t alt_ratio = 20;
    Scalar lr_seg = kMonoLearningRate;
    Scalar lr_reg = kMonoLearningRate;
    /// Learning rates are multiplied by lr_decay once for every entry e of
    /// decay_epochs with e <= the zero-based epoch index.
    Scalar lr_decay = 0.2;
    std::vector<std::int64_t> decay_epochs;
    std::int64_t epochs = 10;
    /// Update steps per epoch; 0 means one step per training image.
    std::int64_t steps_per_epoch = 0;
    /// Pairs (or images, for supervised steps) averaged per update.
    std::int64_t batch_size = 1;
    std::uint64_t seed = 0;
    /// One-shot ladder: validation evaluations without improvement before
    /// the from-scratch segmentation stage hands over to alternation.
    std::int64_t patience = 5;
    /// Epoch budget of each ladder pretraining stage; 0 means `epochs`.
    std::int64_t pretrain_epochs = 0;

    void validate() const;
};

/// Learning rates of a protocol when the configuration leaves them unset.
void apply_default_learning_rates(TrainConfig& config);

struct PairSample {
    const LabeledImage* moving = nullptr;
    const LabeledImage* target = nullptr;
    PairLabeling labeling;
};

/// Uniform over ordered pairs of distinct images. Segmentation pairs reject
/// the both-unlabeled case; throws std::invalid_argument if no admissible
/// pair exists.
PairSample sample_pair(std::span<const LabeledImage> images, std::mt19937_64& rng, bool for_segmentation);

/// Component losses of one update. Absent components are NaN.
struct StepReport {
    Scalar similarity = std::numeric_limits<Scalar>::quiet_NaN();      // L_i
    Scalar regularization = std::numeric_limits<Scalar>::quiet_NaN();  // L_r
    Scalar anatomy = std::numeric_limits<Scalar>::quiet_NaN();         // L_a
    Scalar supervised = std::numeric_limits<Scalar>::quiet_NaN();      // L_sp
    Scalar total = 0;
};

/// One Adam update of the registration network on the mean objective over
/// `pairs`. With `seg` present, missing segmentations are replaced by its
/// predictions, held constant; without it the anatomy term only applies to
/// pairs where both images carry manual labels.
StepReport train_registration_step(RegistrationNet& reg, const SegmentationNet* seg,
                                   std::span<const PairSample> pairs, Adam& optimizer, Scalar lr,
                                   const TrainConfig& config, std::int64_t classes);

/// One Adam update of the segmentation network on the semi-supervised
/// objective, with the registration field held constant.
StepReport train_segmentation_step(SegmentationNet& seg, const RegistrationNet& reg,
                                   std::span<const PairSample> pairs, Adam& optimizer, Scalar lr,
                                   const TrainConfig& config);

/// Fully supervised update: mean soft Dice loss against manual labels.
StepReport train_supervised_step(SegmentationNet& seg, std::span<const LabeledImage* const> images,
                                 Adam& optimizer, Scalar lr, const TrainConfig& config);

/// Gradients of one segmentation objective evaluation, without an update,
/// returned as tensor values keyed by parameter name. Used to compare update
/// directions across protocols.
ParameterSet segmentation_gradients(SegmentationNet& seg, const RegistrationNet& reg, const PairSample& pair,
                                    const TrainConfig& config);
ParameterSet supervised_gradients(SegmentationNet& seg, const LabeledImage& image, const TrainConfig& config);

/// Line-oriented metric log. Every record is kept in memory and, when a path
/// is given, appended to the file as one JSON object per line.
class MetricLog {
public:
    MetricLog() = default;
    explicit MetricLog(const std::filesystem::path& path);

    void append(nlohmann::json record);
    const std::vector<nlohmann::json>& records() const { return records_; }
    /// Records without the wall-clock field, for run-to-run comparisons.
    std::vector<nlohmann::json> deterministic_records() const;

private:
    std::vector<nlohmann::json> records_;
    std::optional<std::ofstream> file_;
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

struct PretrainedNets {
    std::optional<SegmentationNet> seg;
    std::optional<RegistrationNet> reg;
};

/// Observes every executed update: global step index, phase ("seg", "reg"
/// or "sup") and the networks after the update.
using StepObserver = std::function<void(std::int64_t step, const std::string& phase, const SegmentationNet* seg,
                                        const RegistrationNet* reg)>;

struct ProtocolResult {
    std::optional<SegmentationNet> seg;
    std::optional<RegistrationNet> reg;
    /// Registration network of the unsupervised ladder stage, when run.
    std::optional<RegistrationNet> unsupervised_reg;
    Scalar best_val_seg = std::numeric_limits<Scalar>::quiet_NaN();
    Scalar best_val_reg = std::numeric_limits<Scalar>::quiet_NaN();
    std::int64_t steps = 0;
    bool ladder = false;
};

/// Architectures of the two networks; they share the class count and rank.
struct ModelConfig {
    NetConfig seg;
    NetConfig reg;

    void validate() const;
};

/// Runs one protocol. Networks being trained keep the parameters of their
/// best validation epoch; in the semi-DA and alternating stages the starting
/// parameters are candidates too. `da` with a single labeled image and no pretrained
/// networks runs the one-shot ladder: unsupervised registration, then
/// segmentation from scratch against the fixed registration network until
/// validation Dice plateaus, then alternation.
ProtocolResult run_protocol(const TrainConfig& config, const ModelConfig& model, const Partitions& data,
                            PretrainedNets pretrained, MetricLog& log, const StepObserver& observer = {});

}  // namespace deepatlas
