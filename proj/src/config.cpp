#include "deepatlas/config.hpp"

#include <algorithm>
#include <fstream>
#include <initializer_list>
#include <sstream>

#include "deepatlas/checkpoint.hpp"
#include "deepatlas/npy.hpp"

namespace deepatlas {

namespace {

using nlohmann::json;

// Typed access to one JSON object that rejects keys outside `allowed`.
class Section {
public:
    Section(const json& j, std::string name, std::initializer_list<const char*> allowed)
        : j_(j), name_(std::move(name)) {
        if (!j.is_object()) throw ConfigError("'" + name_ + "' must be an object");
        for (const auto& [k, v] : j.items()) {
            if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; })) {
                throw ConfigError("unknown key '" + qualified(k) + "'");
            }
        }
    }

    bool has(const char* key) const { return j_.contains(key); }

    template <typename T>
    T get(const char* key, T fallback) const {
        if (!has(key)) return fallback;
        return required<T>(key);
    }

    template <typename T>
    T required(const char* key) const {
        if (!has(key)) throw ConfigError("missing required key '" + qualified(key) + "'");
        try {
            return j_.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ConfigError("invalid value for '" + qualified(key) + "': " + e.what());
        }
    }

    const json& raw(const char* key) const { return j_.at(key); }

private:
    std::string qualified(const std::string& key) const { return name_.empty() ? key : name_ + "." + key; }

    const json& j_;
    std::string name_;
};

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
    std::filesystem::path path(p);
    if (path.is_relative() && !base.empty()) return base / path;
    return path;
}

const json& section_or_empty(const json& j, const char* key) {
    static const json empty = json::object();
    return j.contains(key) ? j.at(key) : empty;
}

DiceVariant dice_variant_from_string(const std::string& s) {
    if (s == "conventional") return DiceVariant::conventional;
    if (s == "as_printed") return DiceVariant::as_printed;
    throw ConfigError("unknown dice_variant '" + s + "'");
}

std::string to_string(DiceVariant v) { return v == DiceVariant::conventional ? "conventional" : "as_printed"; }

template <typename F>
auto rethrow_as_config_error(F&& f) {
    try {
        return f();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    } catch (const json::exception& e) {
        throw ConfigError(e.what());
    }
}

}  // namespace

DataConfig parse_data_config(const nlohmann::json& j, const std::filesystem::path& base_dir) {
    const Section s(j, "data", {"path", "synthetic", "n_labeled", "split_seed", "train_size", "val_size", "test_size"});
    DataConfig c;
    if (s.has("path") && s.has("synthetic")) throw ConfigError("data.path and data.synthetic are exclusive");
    if (s.has("path")) c.path = resolve(base_dir, s.required<std::string>("path"));
    if (s.has("synthetic")) {
        c.synthetic = rethrow_as_config_error([&] { return synthetic_spec_from_json(s.raw("synthetic")); });
    }
    if (s.has("n_labeled")) c.n_labeled = s.required<std::int64_t>("n_labeled");
    c.split_seed = s.get<std::uint64_t>("split_seed", c.split_seed);
    c.sizes.train = s.get<std::int64_t>("train_size", c.sizes.train);
    c.sizes.val = s.get<std::int64_t>("val_size", c.sizes.val);
    c.sizes.test = s.get<std::int64_t>("test_size", c.sizes.test);
    if (c.n_labeled && (*c.n_labeled < 0 || *c.n_labeled > c.sizes.train)) {
        throw ConfigError("data.n_labeled must lie in [0, train_size]");
    }
    if (c.sizes.train < 2 || c.sizes.val < 1 || c.sizes.test < 1) {
        throw ConfigError("split sizes need train >= 2, val >= 1 and test >= 1");
    }
    if (!c.path && c.sizes.train + c.sizes.val + c.sizes.test > c.synthetic.count) {
        throw ConfigError("split sizes exceed data.synthetic.count");
    }
    return c;
}

RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir) {
    const Section top(j, "", {"data", "model", "loss", "train", "output"});
    RunConfig c;
    c.data = parse_data_config(section_or_empty(j, "data"), base_dir);

    const Section m(section_or_empty(j, "model"), "model",
                    {"spatial_rank", "classes", "depth", "width", "kernel", "leaky_slope", "seg_depth", "seg_width",
                     "reg_depth", "reg_width"});
    NetConfig base;
    base.spatial_rank = m.get<std::int64_t>("spatial_rank", static_cast<std::int64_t>(c.data.synthetic.spatial_shape.size()));
    base.classes = m.get<std::int64_t>("classes", c.data.synthetic.classes);
    base.depth = m.get<std::int64_t>("depth", base.depth);
    base.width = m.get<std::int64_t>("width", base.width);
    base.kernel = m.get<std::int64_t>("kernel", base.kernel);
    base.leaky_slope = m.get<Scalar>("leaky_slope", base.leaky_slope);
    c.model.seg = base;
    c.model.reg = base;
    c.model.seg.depth = m.get<std::int64_t>("seg_depth", base.depth);
    c.model.seg.width = m.get<std::int64_t>("seg_width", base.width);
    c.model.reg.depth = m.get<std::int64_t>("reg_depth", base.depth);
    c.model.reg.width = m.get<std::int64_t>("reg_width", base.width);
    rethrow_as_config_error([&] {
        c.model.validate();
        return 0;
    });

    const Section l(section_or_empty(j, "loss"), "loss", {"lambda_r", "lambda_a", "lambda_sp", "dice_variant"});
    c.train.weights.lambda_r = l.get<Scalar>("lambda_r", c.train.weights.lambda_r);
    c.train.weights.lambda_a = l.get<Scalar>("lambda_a", c.train.weights.lambda_a);
    c.train.weights.lambda_sp = l.get<Scalar>("lambda_sp", c.train.weights.lambda_sp);
    c.train.dice_variant = dice_variant_from_string(l.get<std::string>("dice_variant", "conventional"));

    if (!j.contains("train")) throw ConfigError("missing required section 'train'");
    const Section t(j.at("train"), "train",
                    {"protocol", "epochs", "steps_per_epoch", "batch_size", "lr_seg", "lr_reg", "lr_decay",
                     "decay_epochs", "alt_ratio", "seed", "patience", "pretrain_epochs", "seg_checkpoint",
                     "reg_checkpoint"});
    c.train.protocol = rethrow_as_config_error([&] { return protocol_from_string(t.required<std::string>("protocol")); });
    apply_default_learning_rates(c.train);
    c.train.epochs = t.get<std::int64_t>("epochs", c.train.epochs);
    c.train.steps_per_epoch = t.get<std::int64_t>("steps_per_epoch", c.train.steps_per_epoch);
    c.train.batch_size = t.get<std::int64_t>("batch_size", c.train.batch_size);
    c.train.lr_seg = t.get<Scalar>("lr_seg", c.train.lr_seg);
    c.train.lr_reg = t.get<Scalar>("lr_reg", c.train.lr_reg);
    c.train.lr_decay = t.get<Scalar>("lr_decay", c.train.lr_decay);
    c.train.decay_epochs = t.get<std::vector<std::int64_t>>("decay_epochs", c.train.decay_epochs);
    c.train.alt_ratio = t.get<std::int64_t>("alt_ratio", c.train.alt_ratio);
    c.train.seed = t.get<std::uint64_t>("seed", c.train.seed);
    c.train.patience = t.get<std::int64_t>("patience", c.train.patience);
    c.train.pretrain_epochs = t.get<std::int64_t>("pretrain_epochs", c.train.pretrain_epochs);
    if (t.has("seg_checkpoint")) c.seg_checkpoint = resolve(base_dir, t.required<std::string>("seg_checkpoint"));
    if (t.has("reg_checkpoint")) c.reg_checkpoint = resolve(base_dir, t.required<std::string>("reg_checkpoint"));
    c.train.validate();

    if (!j.contains("output")) throw ConfigError("missing required section 'output'");
    const Section o(j.at("output"), "output", {"directory"});
    c.output_directory = resolve(base_dir, o.required<std::string>("directory"));
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return parse_run_config(j, path.parent_path());
}

nlohmann::json to_json(const RunConfig& c) {
    json data{{"split_seed", c.data.split_seed},
              {"train_size", c.data.sizes.train},
              {"val_size", c.data.sizes.val},
              {"test_size", c.data.sizes.test}};
    if (c.data.path) {
        data["path"] = c.data.path->string();
    } else {
        data["synthetic"] = to_json(c.data.synthetic);
    }
    if (c.data.n_labeled) data["n_labeled"] = *c.data.n_labeled;
    json train{{"protocol", to_string(c.train.protocol)},
               {"epochs", c.train.epochs},
               {"steps_per_epoch", c.train.steps_per_epoch},
               {"batch_size", c.train.batch_size},
               {"lr_seg", c.train.lr_seg},
               {"lr_reg", c.train.lr_reg},
               {"lr_decay", c.train.lr_decay},
               {"decay_epochs", c.train.decay_epochs},
               {"alt_ratio", c.train.alt_ratio},
               {"seed", c.train.seed},
               {"patience", c.train.patience},
               {"pretrain_epochs", c.train.pretrain_epochs}};
    if (c.seg_checkpoint) train["seg_checkpoint"] = c.seg_checkpoint->string();
    if (c.reg_checkpoint) train["reg_checkpoint"] = c.reg_checkpoint->string();
    return json{{"data", data},
                {"model",
                 {{"spatial_rank", c.model.seg.spatial_rank},
                  {"classes", c.model.seg.classes},
                  {"kernel", c.model.seg.kernel},
                  {"leaky_slope", c.model.seg.leaky_slope},
                  {"seg_depth", c.model.seg.depth},
                  {"seg_width", c.model.seg.width},
                  {"reg_depth", c.model.reg.depth},
                  {"reg_width", c.model.reg.width}}},
                {"loss",
                 {{"lambda_r", c.train.weights.lambda_r},
                  {"lambda_a", c.train.weights.lambda_a},
                  {"lambda_sp", c.train.weights.lambda_sp},
                  {"dice_variant", to_string(c.train.dice_variant)}}},
                {"train", train},
                {"output", {{"directory", c.output_directory.string()}}}};
}

const std::vector<ConfigKeyDoc>& config_key_docs() {
    static const std::vector<ConfigKeyDoc> docs{
        {"data.path", "(unset)", "local", "dataset directory written by gen-data; exclusive with data.synthetic"},
        {"data.synthetic.spatial_shape", "[64, 64]", "local", "image grid; 1 to 3 axes"},
        {"data.synthetic.classes", "4", "local", "label classes K including background"},
        {"data.synthetic.count", "60", "local", "images generated"},
        {"data.synthetic.control_points", "5", "local", "deformation control lattice points per axis"},
        {"data.synthetic.max_amplitude", "0.12", "local", "largest control displacement, normalized units"},
        {"data.synthetic.intensity_noise_sd", "0.03", "local", "additive Gaussian noise"},
        {"data.synthetic.intensity_jitter", "0.1", "local", "per-image shift of class intensities"},
        {"data.synthetic.bias_field_amplitude", "0.25", "local", "smooth multiplicative bias amplitude"},
        {"data.synthetic.seed", "7", "local", "generator seed"},
        {"data.n_labeled", "2 (or the stored split)", "published", "training images whose labels are visible"},
        {"data.split_seed", "11", "local", "seed of the labeled-subset draw"},
        {"data.train_size", "40", "local", "training images"},
        {"data.val_size", "8", "local", "validation images"},
        {"data.test_size", "12", "local", "test images"},
        {"model.spatial_rank", "rank of data.synthetic", "local", "1, 2 or 3"},
        {"model.classes", "data.synthetic.classes", "local", "segmentation classes K"},
        {"model.depth", "3", "local", "downsamplings L of both networks"},
        {"model.width", "16", "local", "full-resolution channels W of both networks"},
        {"model.seg_depth", "model.depth", "local", "segmentation network depth override"},
        {"model.seg_width", "model.width", "local", "segmentation network width override"},
        {"model.reg_depth", "model.depth", "local", "registration network depth override"},
        {"model.reg_width", "model.width", "local", "registration network width override"},
        {"model.kernel", "3", "published", "convolution kernel size"},
        {"model.leaky_slope", "0.2", "local", "LeakyReLU negative slope"},
        {"loss.lambda_r", "20000", "published",
         "bending energy weight; derivatives use normalized coordinates, so about 1e-3 matches the published "
         "strength on a 64-pixel grid"},
        {"loss.lambda_a", "3", "published", "anatomy similarity weight"},
        {"loss.lambda_sp", "3", "published", "supervised segmentation weight"},
        {"loss.dice_variant", "conventional", "local", "conventional | as_printed"},
        {"train.protocol", "(required)", "published", "mono_seg | mono_reg | semi_da_seg | semi_da_reg | da"},
        {"train.epochs", "10", "local", "epochs per stage"},
        {"train.steps_per_epoch", "0", "local", "updates per epoch; 0 means one per training image"},
        {"train.batch_size", "1", "local", "pairs or images averaged per update"},
        {"train.lr_seg", "1e-3 mono, 1e-4 joint", "published", "segmentation Adam learning rate"},
        {"train.lr_reg", "1e-3 mono, 5e-4 joint", "published", "registration Adam learning rate"},
        {"train.lr_decay", "0.2", "published", "factor applied at each decay epoch"},
        {"train.decay_epochs", "[]", "local", "zero-based epochs at which the decay applies"},
        {"train.alt_ratio", "20", "published", "registration steps per segmentation step in alternation"},
        {"train.seed", "0", "local", "network initialization and sampling seed"},
        {"train.patience", "5", "local", "one-shot ladder plateau window, in validation evaluations"},
        {"train.pretrain_epochs", "0", "local", "one-shot ladder stage budget; 0 means train.epochs"},
        {"train.seg_checkpoint", "(unset)", "local", "pretrained segmentation network for semi_da_reg and da"},
        {"train.reg_checkpoint", "(unset)", "local", "pretrained registration network for semi_da_seg and da"},
        {"output.directory", "(required)", "local", "checkpoints, metric log and reports"},
    };
    return docs;
}

std::string format_config_key_docs() {
    std::size_t key_w = 0, def_w = 0;
    for (const auto& d : config_key_docs()) {
        key_w = std::max(key_w, d.key.size());
        def_w = std::max(def_w, d.default_value.size());
    }
    std::ostringstream out;
    out << "Config keys (origin: published = setting of the original method, local = chosen here):\n";
    for (const auto& d : config_key_docs()) {
        out << "  " << d.key << std::string(key_w - d.key.size() + 2, ' ') << d.default_value
            << std::string(def_w - d.default_value.size() + 2, ' ') << "[" << d.origin << "] " << d.description
            << "\n";
    }
    return out.str();
}

PreparedData prepare_data(const DataConfig& config) {
    PreparedData p;
    if (config.path) {
        p.dataset = load_dataset(*config.path);
        auto stored = load_split(*config.path);
        if (stored && !config.n_labeled) {
            p.split = std::move(*stored);
            return p;
        }
    } else {
        p.dataset = generate_dataset(config.synthetic);
    }
    p.split = rethrow_as_config_error(
        [&] { return split_dataset(p.dataset, config.sizes, config.n_labeled.value_or(2), config.split_seed); });
    return p;
}

}  // namespace deepatlas
