#include "deepatlas/trainer.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "deepatlas/eval.hpp"
#include "deepatlas/labels.hpp"
#include "deepatlas/log.hpp"
#include "deepatlas/ops.hpp"

namespace deepatlas {

std::string to_string(Protocol p) {
    switch (p) {
        case Protocol::mono_seg: return "mono_seg";
        case Protocol::mono_reg: return "mono_reg";
        case Protocol::semi_da_seg: return "semi_da_seg";
        case Protocol::semi_da_reg: return "semi_da_reg";
        case Protocol::da: return "da";
    }
    return "unknown";
}

Protocol protocol_from_string(const std::string& name) {
    for (auto p : {Protocol::mono_seg, Protocol::mono_reg, Protocol::semi_da_seg, Protocol::semi_da_reg, Protocol::da}) {
        if (to_string(p) == name) return p;
    }
    throw ConfigError("unknown protocol '" + name + "' (expected mono_seg, mono_reg, semi_da_seg, semi_da_reg or da)");
}

bool is_joint(Protocol p) { return p == Protocol::semi_da_seg || p == Protocol::semi_da_reg || p == Protocol::da; }

void TrainConfig::validate() const {
    try {
        weights.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (alt_ratio < 1) throw ConfigError("alt_ratio must be >= 1");
    if (!(lr_seg > 0.0) || !(lr_reg > 0.0) || !std::isfinite(lr_seg) || !std::isfinite(lr_reg)) {
        throw ConfigError("learning rates must be positive");
    }
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("lr_decay must lie in (0, 1]");
    for (auto e : decay_epochs) {
        if (e < 0) throw ConfigError("decay_epochs entries must be >= 0");
    }
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (steps_per_epoch < 0) throw ConfigError("steps_per_epoch must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (patience < 1) throw ConfigError("patience must be >= 1");
    if (pretrain_epochs < 0) throw ConfigError("pretrain_epochs must be >= 0");
}

void apply_default_learning_rates(TrainConfig& config) {
    if (is_joint(config.protocol)) {
        config.lr_reg = kJointRegistrationLearningRate;
        config.lr_seg = kJointSegmentationLearningRate;
    } else {
        config.lr_reg = kMonoLearningRate;
        config.lr_seg = kMonoLearningRate;
    }
}

PairSample sample_pair(std::span<const LabeledImage> images, std::mt19937_64& rng, bool for_segmentation) {
    const auto n = images.size();
    if (n < 2) throw std::invalid_argument("pair sampling needs at least two images");
    if (for_segmentation &&
        std::none_of(images.begin(), images.end(), [](const LabeledImage& im) { return im.is_labeled(); })) {
        throw std::invalid_argument("segmentation pairs need at least one labeled image");
    }
    std::uniform_int_distribution<std::size_t> first(0, n - 1), second(0, n - 2);
    for (;;) {
        const auto m = first(rng);
        auto t = second(rng);
        if (t >= m) ++t;
        PairSample p{&images[m], &images[t], {images[m].is_labeled(), images[t].is_labeled()}};
        if (!for_segmentation || p.labeling.any()) return p;
    }
}

namespace {

void check_finite(const StepReport& r, const char* phase) {
    for (Scalar v : {r.similarity, r.regularization, r.anatomy, r.supervised}) {
        if (std::isinf(v)) throw NumericDomainError(std::string("non-finite ") + phase + " loss");
    }
    if (!std::isfinite(r.total)) throw NumericDomainError(std::string("non-finite ") + phase + " loss");
}

void check_finite_grads(const ParameterSet& params) {
    for (const auto& [name, t] : params.entries()) {
        if (!t.has_grad()) continue;
        for (auto g : t.grad()) {
            if (!std::isfinite(g)) throw NumericDomainError("non-finite gradient in " + name);
        }
    }
}

// Running mean of a component that may be absent for some batch entries.
struct Mean {
    Scalar sum = 0;
    std::int64_t n = 0;
    void add(const Tensor& t) {
        if (!t.defined()) return;
        sum += t.item();
        ++n;
    }
    Scalar value() const { return n ? sum / static_cast<Scalar>(n) : std::numeric_limits<Scalar>::quiet_NaN(); }
};

Scalar batch_scale(std::size_t count) {
    if (count == 0) throw std::invalid_argument("empty training batch");
    return 1.0 / static_cast<Scalar>(count);
}

// Registration objective for one pair; gradients accumulate into reg.
void accumulate_registration(const RegistrationNet& reg, const SegmentationNet* seg, const PairSample& pair,
                             Scalar scale, const TrainConfig& config, std::int64_t classes, Mean& li, Mean& lr,
                             Mean& la, Scalar& total) {
    auto segmentation_of = [&](const LabeledImage& im) -> std::optional<Tensor> {
        if (im.is_labeled()) return one_hot(im.labels(), classes);
        if (seg == nullptr) return std::nullopt;
        NoGradGuard frozen;
        return seg->forward(im.intensity()).detach();
    };
    GradientTape tape;
    const Tensor& moving = pair.moving->intensity();
    const Tensor& target = pair.target->intensity();
    const DisplacementField field = reg.forward(moving, target);
    const auto moving_seg = segmentation_of(*pair.moving);
    const auto target_seg = segmentation_of(*pair.target);
    const auto loss =
        registration_objective(moving, target, moving_seg, target_seg, field, config.weights, config.dice_variant);
    li.add(loss.similarity);
    lr.add(loss.regularization);
    la.add(loss.anatomy);
    total += scale * loss.total.item();
    tape.backward(mul(loss.total, scale));
}

void accumulate_segmentation(const SegmentationNet& seg, const RegistrationNet& reg, const PairSample& pair,
                             Scalar scale, const TrainConfig& config, Mean& la, Mean& lsp, Scalar& total) {
    const auto& labeling = pair.labeling;
    const std::int64_t classes = seg.config().classes;
    const Tensor& moving = pair.moving->intensity();
    const Tensor& target = pair.target->intensity();
    DisplacementField field = [&] {
        NoGradGuard frozen;
        return reg.forward(moving, target).detached();
    }();
    GradientTape tape;
    SegmentationInputs in;
    if (labeling.moving_labeled) in.moving_manual = one_hot(pair.moving->labels(), classes);
    if (labeling.target_labeled) in.target_manual = one_hot(pair.target->labels(), classes);
    if (labeling.any()) {
        in.moving_pred = seg.forward(moving);
        if (!labeling.both()) in.target_pred = seg.forward(target);
    }
    const auto loss = segmentation_objective(in, field, labeling, config.weights, config.dice_variant);
    la.add(loss.anatomy);
    lsp.add(loss.supervised);
    total += scale * loss.total.item();
    if (loss.total.requires_grad()) tape.backward(mul(loss.total, scale));
}

void accumulate_supervised(const SegmentationNet& seg, const LabeledImage& image, Scalar scale,
                           const TrainConfig& config, Mean& lsp, Scalar& total) {
    GradientTape tape;
    const Tensor probabilities = seg.forward(image.intensity());
    const Tensor loss = soft_dice_loss(probabilities, one_hot(image.labels(), seg.config().classes),
                                       config.dice_variant);
    lsp.add(loss);
    total += scale * loss.item();
    tape.backward(mul(loss, scale));
}

void apply_update(ParameterSet& params, Adam& optimizer, Scalar lr, const StepReport& report, const char* phase) {
    check_finite(report, phase);
    check_finite_grads(params);
    optimizer.step(params, lr);
    params.zero_grad();
}

}  // namespace

StepReport train_registration_step(RegistrationNet& reg, const SegmentationNet* seg,
                                   std::span<const PairSample> pairs, Adam& optimizer, Scalar lr,
                                   const TrainConfig& config, std::int64_t classes) {
    const Scalar scale = batch_scale(pairs.size());
    reg.params().zero_grad();
    Mean li, lreg, la;
    StepReport r;
    for (const auto& p : pairs) accumulate_registration(reg, seg, p, scale, config, classes, li, lreg, la, r.total);
    r.similarity = li.value();
    r.regularization = lreg.value();
    r.anatomy = la.value();
    apply_update(reg.params(), optimizer, lr, r, "registration");
    return r;
}

StepReport train_segmentation_step(SegmentationNet& seg, const RegistrationNet& reg,
                                   std::span<const PairSample> pairs, Adam& optimizer, Scalar lr,
                                   const TrainConfig& config) {
    const Scalar scale = batch_scale(pairs.size());
    seg.params().zero_grad();
    Mean la, lsp;
    StepReport r;
    for (const auto& p : pairs) accumulate_segmentation(seg, reg, p, scale, config, la, lsp, r.total);
    r.anatomy = la.value();
    r.supervised = lsp.value();
    apply_update(seg.params(), optimizer, lr, r, "segmentation");
    return r;
}

StepReport train_supervised_step(SegmentationNet& seg, std::span<const LabeledImage* const> images,
                                 Adam& optimizer, Scalar lr, const TrainConfig& config) {
    const Scalar scale = batch_scale(images.size());
    seg.params().zero_grad();
    Mean lsp;
    StepReport r;
    for (const auto* im : images) accumulate_supervised(seg, *im, scale, config, lsp, r.total);
    r.supervised = lsp.value();
    apply_update(seg.params(), optimizer, lr, r, "supervised");
    return r;
}

namespace {
ParameterSet take_gradients(ParameterSet& params) {
    ParameterSet grads;
    for (auto& [name, t] : params.entries()) {
        std::vector<Scalar> g(static_cast<std::size_t>(t.numel()), 0.0);
        if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), g.begin());
        grads.add(name, Tensor(t.shape(), std::move(g)));
    }
    params.zero_grad();
    return grads;
}
}  // namespace

ParameterSet segmentation_gradients(SegmentationNet& seg, const RegistrationNet& reg, const PairSample& pair,
                                    const TrainConfig& config) {
    seg.params().zero_grad();
    Mean la, lsp;
    Scalar total = 0;
    accumulate_segmentation(seg, reg, pair, 1.0, config, la, lsp, total);
    return take_gradients(seg.params());
}

ParameterSet supervised_gradients(SegmentationNet& seg, const LabeledImage& image, const TrainConfig& config) {
    seg.params().zero_grad();
    Mean lsp;
    Scalar total = 0;
    accumulate_supervised(seg, image, 1.0, config, lsp, total);
    return take_gradients(seg.params());
}

MetricLog::MetricLog(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    file_.emplace(path, std::ios::out | std::ios::trunc);
    if (!*file_) throw std::runtime_error("cannot open metric log " + path.string());
}

void MetricLog::append(nlohmann::json record) {
    for (auto& [key, value] : record.items()) {
        if (value.is_number_float() && !std::isfinite(value.get<double>())) value = nullptr;
    }
    record["wall_time"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    if (file_) {
        *file_ << record.dump() << '\n';
        file_->flush();
    }
    records_.push_back(std::move(record));
}

std::vector<nlohmann::json> MetricLog::deterministic_records() const {
    std::vector<nlohmann::json> out = records_;
    for (auto& r : out) r.erase("wall_time");
    return out;
}

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint32_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream};
    std::array<std::uint32_t, 2> words{};
    seq.generate(words.begin(), words.end());
    return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

enum class StageMode { supervised, registration, segmentation, alternating };

struct Stage {
    std::string name;
    StageMode mode;
    bool use_seg_for_registration = false;  // estimate missing labels with the segmentation network
    std::int64_t epochs = 1;
    std::optional<std::int64_t> patience;
    // The starting parameters compete in best-validation selection.
    bool keep_initial = false;
    Scalar lr_seg = 0;
    Scalar lr_reg = 0;
};

class Runner {
public:
    Runner(const TrainConfig& config, const ModelConfig& model, const Partitions& data, MetricLog& log,
           const StepObserver& observer)
        : config_(config), classes_(model.seg.classes), data_(data), log_(log), observer_(observer), rng_(config.seed) {
        steps_per_epoch_ = config.steps_per_epoch > 0 ? config.steps_per_epoch
                                                      : static_cast<std::int64_t>(data.train.size());
        for (const auto& im : data.train) {
            if (im.is_labeled()) labeled_.push_back(&im);
        }
    }

    std::int64_t steps() const { return global_step_; }

    // Trains the networks selected by the stage mode and restores their best
    // validation parameters. Returns the best validation scores.
    std::pair<Scalar, Scalar> run(const Stage& stage, SegmentationNet* seg, RegistrationNet* reg) {
        const bool trains_seg = stage.mode != StageMode::registration;
        const bool trains_reg = stage.mode == StageMode::registration || stage.mode == StageMode::alternating;
        Adam seg_opt, reg_opt;
        std::optional<ParameterSet> best_seg, best_reg;
        Scalar best_seg_score = -1, best_reg_score = -1;
        std::int64_t since_improvement = 0;
        std::int64_t stage_step = 0;
        if (stage.keep_initial && !data_.val.empty()) {
            nlohmann::json record{{"stage", stage.name}, {"epoch", -1}, {"phase", "val"}};
            if (trains_seg) {
                best_seg_score = eval_segmentation(*seg, data_.val).mean;
                best_seg = seg->params().clone();
                record["val_seg_dice"] = best_seg_score;
            }
            if (trains_reg) {
                best_reg_score = eval_registration(*reg, data_.val, classes_).mean;
                best_reg = reg->params().clone();
                record["val_reg_dice"] = best_reg_score;
            }
            log_.append(record);
        }
        for (std::int64_t epoch = 0; epoch < stage.epochs; ++epoch) {
            const Scalar factor = decay_factor(epoch);
            const Scalar lr_seg = stage.lr_seg * factor;
            const Scalar lr_reg = stage.lr_reg * factor;
            for (std::int64_t s = 0; s < steps_per_epoch_; ++s, ++stage_step) {
                std::string phase;
                StepReport r;
                bool seg_turn = false;
                switch (stage.mode) {
                    case StageMode::supervised: phase = "sup"; break;
                    case StageMode::registration: phase = "reg"; break;
                    case StageMode::segmentation: phase = "seg"; break;
                    case StageMode::alternating:
                        seg_turn = stage_step % (config_.alt_ratio + 1) == config_.alt_ratio;
                        phase = seg_turn ? "seg" : "reg";
                        break;
                }
                if (phase == "sup") {
                    std::vector<const LabeledImage*> batch;
                    std::uniform_int_distribution<std::size_t> pick(0, labeled_.size() - 1);
                    for (std::int64_t b = 0; b < config_.batch_size; ++b) batch.push_back(labeled_[pick(rng_)]);
                    r = train_supervised_step(*seg, batch, seg_opt, lr_seg, config_);
                } else if (phase == "seg") {
                    const auto pairs = draw_pairs(true);
                    r = train_segmentation_step(*seg, *reg, pairs, seg_opt, lr_seg, config_);
                } else {
                    const auto pairs = draw_pairs(false);
                    const SegmentationNet* helper = stage.use_seg_for_registration ? seg : nullptr;
                    r = train_registration_step(*reg, helper, pairs, reg_opt, lr_reg, config_, classes_);
                }
                log_.append({{"stage", stage.name},
                             {"step", global_step_},
                             {"epoch", epoch},
                             {"phase", phase},
                             {"L_i", r.similarity},
                             {"L_r", r.regularization},
                             {"L_a", r.anatomy},
                             {"L_sp", r.supervised},
                             {"total", r.total},
                             {"lr", phase == "reg" ? lr_reg : lr_seg}});
                if (observer_) observer_(global_step_, phase, seg, reg);
                ++global_step_;
            }

            nlohmann::json record{{"stage", stage.name}, {"epoch", epoch}, {"phase", "val"}};
            bool improved = false;
            if (!data_.val.empty()) {
                if (trains_seg) {
                    const Scalar score = eval_segmentation(*seg, data_.val).mean;
                    record["val_seg_dice"] = score;
                    if (score > best_seg_score) {
                        best_seg_score = score;
                        best_seg = seg->params().clone();
                        improved = true;
                    }
                }
                if (trains_reg) {
                    const Scalar score = eval_registration(*reg, data_.val, classes_).mean;
                    record["val_reg_dice"] = score;
                    if (score > best_reg_score) {
                        best_reg_score = score;
                        best_reg = reg->params().clone();
                        improved = true;
                    }
                }
            }
            log_.append(record);
            log_info(record.dump());
            since_improvement = improved ? 0 : since_improvement + 1;
            if (stage.patience && since_improvement >= *stage.patience) {
                log_.append({{"stage", stage.name}, {"epoch", epoch}, {"phase", "plateau"}});
                break;
            }
        }
        if (best_seg) seg->params().assign(*best_seg);
        if (best_reg) reg->params().assign(*best_reg);
        const Scalar nan = std::numeric_limits<Scalar>::quiet_NaN();
        return {best_seg ? best_seg_score : nan, best_reg ? best_reg_score : nan};
    }

    std::int64_t labeled_count() const { return static_cast<std::int64_t>(labeled_.size()); }

private:
    Scalar decay_factor(std::int64_t epoch) const {
        Scalar f = 1;
        for (auto e : config_.decay_epochs) {
            if (e <= epoch) f *= config_.lr_decay;
        }
        return f;
    }

    std::vector<PairSample> draw_pairs(bool for_segmentation) {
        std::vector<PairSample> pairs;
        for (std::int64_t b = 0; b < config_.batch_size; ++b) {
            pairs.push_back(sample_pair(data_.train, rng_, for_segmentation));
        }
        return pairs;
    }

    const TrainConfig& config_;
    std::int64_t classes_;
    const Partitions& data_;
    MetricLog& log_;
    const StepObserver& observer_;
    std::mt19937_64 rng_;
    std::int64_t steps_per_epoch_ = 0;
    std::int64_t global_step_ = 0;
    std::vector<const LabeledImage*> labeled_;
};

}  // namespace

void ModelConfig::validate() const {
    try {
        seg.validate();
        reg.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (seg.classes != reg.classes || seg.spatial_rank != reg.spatial_rank) {
        throw ConfigError("segmentation and registration networks disagree on classes or spatial rank");
    }
}

ProtocolResult run_protocol(const TrainConfig& config, const ModelConfig& model, const Partitions& data,
                            PretrainedNets pretrained, MetricLog& log, const StepObserver& observer) {
    config.validate();
    model.validate();
    if (data.train.size() < 2) throw ConfigError("training needs at least two images");
    if (pretrained.seg && !(pretrained.seg->config() == model.seg)) {
        throw ConfigError("pretrained segmentation network does not match the model configuration");
    }
    if (pretrained.reg && !(pretrained.reg->config() == model.reg)) {
        throw ConfigError("pretrained registration network does not match the model configuration");
    }
    Runner runner(config, model, data, log, observer);
    const auto labeled = runner.labeled_count();
    ProtocolResult result;
    auto fresh_seg = [&] { return SegmentationNet(model.seg, derive_seed(config.seed, 1)); };
    auto fresh_reg = [&] { return RegistrationNet(model.reg, derive_seed(config.seed, 2)); };
    auto stage = [&](std::string name, StageMode mode, std::int64_t epochs) {
        Stage s;
        s.name = std::move(name);
        s.mode = mode;
        s.epochs = epochs;
        s.lr_seg = config.lr_seg;
        s.lr_reg = config.lr_reg;
        return s;
    };
    const bool needs_labels =
        config.protocol == Protocol::mono_seg || config.protocol == Protocol::semi_da_seg || config.protocol == Protocol::da;
    if (needs_labels && labeled == 0) {
        throw ConfigError(to_string(config.protocol) + " needs at least one labeled training image");
    }

    switch (config.protocol) {
        case Protocol::mono_seg: {
            result.seg = pretrained.seg ? std::move(*pretrained.seg) : fresh_seg();
            result.best_val_seg = runner.run(stage("mono_seg", StageMode::supervised, config.epochs), &*result.seg,
                                             nullptr).first;
            break;
        }
        case Protocol::mono_reg: {
            result.reg = pretrained.reg ? std::move(*pretrained.reg) : fresh_reg();
            result.best_val_reg = runner.run(stage("mono_reg", StageMode::registration, config.epochs), nullptr,
                                             &*result.reg).second;
            break;
        }
        case Protocol::semi_da_seg: {
            if (!pretrained.reg) throw ConfigError("semi_da_seg needs a pretrained registration network");
            result.reg = std::move(*pretrained.reg);
            result.seg = pretrained.seg ? std::move(*pretrained.seg) : fresh_seg();
            auto s = stage("semi_da_seg", StageMode::segmentation, config.epochs);
            s.keep_initial = true;
            result.best_val_seg = runner.run(s, &*result.seg, &*result.reg).first;
            break;
        }
        case Protocol::semi_da_reg: {
            if (!pretrained.seg) throw ConfigError("semi_da_reg needs a pretrained segmentation network");
            result.seg = std::move(*pretrained.seg);
            result.reg = pretrained.reg ? std::move(*pretrained.reg) : fresh_reg();
            auto s = stage("semi_da_reg", StageMode::registration, config.epochs);
            s.use_seg_for_registration = true;
            s.keep_initial = true;
            result.best_val_reg = runner.run(s, &*result.seg, &*result.reg).second;
            break;
        }
        case Protocol::da: {
            const bool have_both = pretrained.seg && pretrained.reg;
            if (!have_both) {
                if (labeled != 1 || pretrained.seg || pretrained.reg) {
                    throw ConfigError("da needs pretrained segmentation and registration networks "
                                      "(only a single labeled image runs the one-shot ladder)");
                }
                result.ladder = true;
                const auto pre = config.pretrain_epochs > 0 ? config.pretrain_epochs : config.epochs;
                auto unsup = stage("ladder_unsupervised_reg", StageMode::registration, pre);
                unsup.lr_reg = kMonoLearningRate;
                result.reg = fresh_reg();
                runner.run(unsup, nullptr, &*result.reg);
                result.unsupervised_reg.emplace(model.reg, result.reg->params().clone());

                auto scratch = stage("ladder_seg_from_scratch", StageMode::segmentation, pre);
                scratch.lr_seg = kMonoLearningRate;
                scratch.patience = config.patience;
                result.seg = fresh_seg();
                runner.run(scratch, &*result.seg, &*result.reg);
            } else {
                result.seg = std::move(*pretrained.seg);
                result.reg = std::move(*pretrained.reg);
            }
            auto alt = stage("da", StageMode::alternating, config.epochs);
            alt.use_seg_for_registration = true;
            alt.keep_initial = true;
            std::tie(result.best_val_seg, result.best_val_reg) = runner.run(alt, &*result.seg, &*result.reg);
            break;
        }
    }
    result.steps = runner.steps();
    return result;
}

}  // namespace deepatlas
