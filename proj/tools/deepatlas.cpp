#include <cstdio>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "deepatlas/checkpoint.hpp"
#include "deepatlas/config.hpp"
#include "deepatlas/eval.hpp"
#include "deepatlas/gradcheck.hpp"
#include "deepatlas/log.hpp"
#include "deepatlas/npy.hpp"

namespace da = deepatlas;
namespace fs = std::filesystem;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfigError = 2, kNumericError = 3, kIoError = 4 };

std::string shape_string(const da::Shape& s) {
    std::ostringstream out;
    for (std::size_t i = 0; i < s.size(); ++i) out << (i ? "x" : "") << s[i];
    return out.str();
}

void ensure_directory(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw da::IoError(dir.string() + ": " + ec.message());
}

nlohmann::json read_json(const fs::path& path) {
    try {
        return nlohmann::json::parse(da::read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw da::ConfigError(path.string() + ": " + e.what());
    }
}

void check_model_matches_data(const da::RunConfig& config, const da::Dataset& dataset) {
    const auto& net = config.model.seg;
    if (net.classes != dataset.spec.classes) {
        throw da::ConfigError("model.classes does not match the dataset class count");
    }
    if (net.spatial_rank != static_cast<std::int64_t>(dataset.spec.spatial_shape.size())) {
        throw da::ConfigError("model.spatial_rank does not match the dataset");
    }
}

int gen_data(const fs::path& spec_path, const fs::path& out) {
    const auto config = da::parse_data_config(read_json(spec_path), spec_path.parent_path());
    if (config.path) throw da::ConfigError("gen-data needs data.synthetic, not data.path");
    const auto dataset = da::generate_dataset(config.synthetic);
    const auto split = da::split_dataset(dataset, config.sizes, config.n_labeled.value_or(2), config.split_seed);
    ensure_directory(out);
    da::save_dataset(out, dataset, split);

    std::vector<std::int64_t> counts(static_cast<std::size_t>(dataset.spec.classes), 0);
    for (const auto& s : dataset.samples) {
        for (auto v : s.labels.values) ++counts[v];
    }
    std::cout << "M=" << dataset.samples.size() << " K=" << dataset.spec.classes
              << " shape=" << shape_string(dataset.spec.spatial_shape) << " train/val/test=" << split.train.size()
              << "/" << split.val.size() << "/" << split.test.size() << " labeled=" << split.labeled.size() << "\n";
    std::cout << "label voxels:";
    for (std::size_t k = 0; k < counts.size(); ++k) std::cout << " " << k << ":" << counts[k];
    std::cout << "\n";
    return kOk;
}

int train(const fs::path& config_path) {
    const auto config = da::load_run_config(config_path);
    auto data = da::prepare_data(config.data);
    check_model_matches_data(config, data.dataset);
    const auto partitions = da::make_partitions(data.dataset, data.split);

    da::PretrainedNets pretrained;
    if (config.seg_checkpoint) pretrained.seg = da::load_segmentation_net(*config.seg_checkpoint);
    if (config.reg_checkpoint) pretrained.reg = da::load_registration_net(*config.reg_checkpoint);

    const auto& out = config.output_directory;
    ensure_directory(out);
    da::write_file(out / "config.json", da::to_json(config).dump(2) + "\n");
    da::write_file(out / "split.json", da::to_json(data.split).dump(2) + "\n");
    fs::remove(out / "metrics.jsonl");
    da::MetricLog log(out / "metrics.jsonl");

    da::log_info("training " + da::to_string(config.train.protocol) + " on " +
                 std::to_string(partitions.train.size()) + " images (" +
                 std::to_string(partitions.labeled_count()) + " labeled)");
    const auto result = da::run_protocol(config.train, config.model, partitions, std::move(pretrained), log);

    const nlohmann::json meta{{"protocol", da::to_string(config.train.protocol)},
                              {"seed", config.train.seed},
                              {"steps", result.steps}};
    if (result.seg) {
        da::save_checkpoint(out / "seg.npz", *result.seg, meta);
        const auto report = da::eval_segmentation(*result.seg, partitions.val);
        da::write_report(out / "val_seg", report);
        std::cout << "val segmentation Dice " << report.mean << "\n";
    }
    if (result.reg) {
        da::save_checkpoint(out / "reg.npz", *result.reg, meta);
        const auto report = da::eval_registration(*result.reg, partitions.val, config.model.reg.classes);
        da::write_report(out / "val_reg", report);
        std::cout << "val registration Dice " << report.mean << "\n";
    }
    if (result.unsupervised_reg) da::save_checkpoint(out / "reg_unsupervised.npz", *result.unsupervised_reg, meta);
    if (partitions.hidden_reads() != 0) throw std::logic_error("training read hidden labels");
    return kOk;
}

int segment(const fs::path& checkpoint, const fs::path& image, const fs::path& out) {
    const auto net = da::load_segmentation_net(checkpoint);
    da::save_npy(out, da::segment_image(net, da::load_npy_tensor(image)));
    return kOk;
}

int register_images(const fs::path& checkpoint, const fs::path& moving, const fs::path& target,
                    const fs::path& out_field, const std::string& out_warped) {
    const auto net = da::load_registration_net(checkpoint);
    const auto result = da::register_pair(net, da::load_npy_tensor(moving), da::load_npy_tensor(target));
    da::save_npy(out_field, result.field);
    if (!out_warped.empty()) da::save_npy(out_warped, result.warped);
    return kOk;
}

std::vector<da::ClassGroup> parse_groups(const std::vector<std::string>& specs) {
    std::vector<da::ClassGroup> groups;
    for (const auto& spec : specs) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos || eq == 0) throw da::ConfigError("group must read name=k,k,...: " + spec);
        da::ClassGroup g{spec.substr(0, eq), {}};
        std::istringstream in(spec.substr(eq + 1));
        for (std::string item; std::getline(in, item, ',');) {
            try {
                g.classes.push_back(std::stoll(item));
            } catch (const std::exception&) {
                throw da::ConfigError("bad class index in group: " + spec);
            }
        }
        groups.push_back(std::move(g));
    }
    return groups;
}

int evaluate(const fs::path& checkpoint, const fs::path& data_dir, const std::string& split_name,
             const std::string& mode, const fs::path& out, const std::vector<std::string>& group_specs) {
    const auto dataset = da::load_dataset(data_dir);
    auto split = da::load_split(data_dir);
    if (!split) split = da::split_dataset(dataset, da::SplitSizes{}, 0, 0);
    const auto partitions = da::make_partitions(dataset, *split);
    const auto& images = split_name == "train" ? partitions.train
                         : split_name == "val" ? partitions.val
                                               : partitions.test;
    const auto groups = parse_groups(group_specs);
    da::EvalReport report;
    if (mode == "seg") {
        report = da::eval_segmentation(da::load_segmentation_net(checkpoint), images, groups);
    } else {
        const auto net = da::load_registration_net(checkpoint);
        report = da::eval_registration(net, images, net.config().classes, groups);
    }
    report.metadata = {{"checkpoint", checkpoint.string()}, {"data", data_dir.string()}, {"split", split_name}};
    ensure_directory(out);
    da::write_report(out, report);
    std::cout << mode << " " << split_name << " Dice " << report.mean << " (sd " << report.sd << ") over "
              << report.items.size() << " items\n";
    return kOk;
}

int gradcheck(std::uint64_t seed, std::int64_t instances) {
    const auto entries = da::run_gradcheck_suite(seed, instances);
    bool ok = true;
    for (const auto& e : entries) {
        std::printf("%-40s %3lld instances  worst %.3e  max |grad| %.3e  %s\n", e.name.c_str(),
                    static_cast<long long>(e.instances), e.worst, e.largest_gradient, e.passed() ? "ok" : "FAIL");
        ok = ok && e.passed();
    }
    std::printf("%s (tolerance %.0e)\n", ok ? "all passed" : "FAILED", da::kGradcheckTolerance);
    return ok ? kOk : kFailure;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Joint segmentation and registration networks trained on synthetic atlas data."};
    app.require_subcommand(1);

    fs::path spec_path, out_dir;
    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset and its split");
    gen->add_option("--spec", spec_path, "JSON data section (synthetic, n_labeled, split keys)")->required();
    gen->add_option("--out", out_dir, "output directory")->required();

    fs::path config_path;
    auto* tr = app.add_subcommand("train", "Run one training protocol from a JSON config");
    tr->add_option("--config", config_path, "run configuration")->required()->check(CLI::ExistingFile);

    fs::path checkpoint, image, out_file;
    auto* seg = app.add_subcommand("segment", "Segment one image");
    seg->add_option("--checkpoint", checkpoint, "segmentation checkpoint")->required();
    seg->add_option("--image", image, "image .npy")->required();
    seg->add_option("--out", out_file, "label map .npy (uint8)")->required();

    fs::path moving, target, out_field;
    std::string out_warped;
    auto* reg = app.add_subcommand("register", "Register a moving image to a target image");
    reg->add_option("--checkpoint", checkpoint, "registration checkpoint")->required();
    reg->add_option("--moving", moving, "moving image .npy")->required();
    reg->add_option("--target", target, "target image .npy")->required();
    reg->add_option("--out-field", out_field, "displacement field .npy [1, d, spatial...]")->required();
    reg->add_option("--out-warped", out_warped, "warped moving image .npy");

    fs::path data_dir;
    std::string split_name = "test", mode;
    std::vector<std::string> groups;
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
    ev->add_option("--checkpoint", checkpoint, "checkpoint")->required();
    ev->add_option("--data", data_dir, "dataset directory")->required();
    ev->add_option("--split", split_name, "train | val | test")->check(CLI::IsMember({"train", "val", "test"}));
    ev->add_option("--mode", mode, "seg | reg")->required()->check(CLI::IsMember({"seg", "reg"}));
    ev->add_option("--out", out_dir, "report directory")->required();
    ev->add_option("--group", groups, "class group name=k,k,... (repeatable)");

    std::uint64_t seed = 0;
    std::int64_t instances = 5;
    auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every op, loss and objective");
    gc->add_option("--seed", seed, "instance seed");
    gc->add_option("--instances", instances, "random instances per case")->check(CLI::PositiveNumber);
    app.footer("\n" + da::format_config_key_docs() +
               "\nExit codes: 0 success, 1 other failure, 2 config or usage error, 3 non-finite value, 4 I/O error.\n"
               "DEEPATLAS_THREADS caps worker threads (default 1).");

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kConfigError;
    }

    try {
        if (*gen) return gen_data(spec_path, out_dir);
        if (*tr) return train(config_path);
        if (*seg) return segment(checkpoint, image, out_file);
        if (*reg) return register_images(checkpoint, moving, target, out_field, out_warped);
        if (*ev) return evaluate(checkpoint, data_dir, split_name, mode, out_dir, groups);
        if (*gc) return gradcheck(seed, instances);
    } catch (const da::NumericDomainError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kNumericError;
    } catch (const da::IoError& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return kIoError;
    } catch (const std::invalid_argument& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return kConfigError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kFailure;
    }
    return kFailure;
}
