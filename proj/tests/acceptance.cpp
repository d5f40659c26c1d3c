#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "deepatlas/checkpoint.hpp"
#include "deepatlas/config.hpp"
#include "deepatlas/eval.hpp"
#include "deepatlas/gradcheck.hpp"
#include "deepatlas/labels.hpp"
#include "deepatlas/log.hpp"
#include "deepatlas/losses.hpp"
#include "deepatlas/npy.hpp"
#include "deepatlas/ops.hpp"
#include "helpers.hpp"

using namespace deepatlas;
using deepatlas::test::bitwise_equal;
using deepatlas::test::random_tensor;
namespace fs = std::filesystem;

namespace {

const fs::path kConfigDir = DEEPATLAS_CONFIG_DIR;
const fs::path kCli = DEEPATLAS_CLI;

constexpr std::uint64_t kSeeds[] = {1, 2, 3};
constexpr double kRunBudgetSeconds = 600;
constexpr double kGradcheckBudgetSeconds = 120;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fixed(double v, int digits = 2) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(digits) << v;
    return out.str();
}

// Collects failed sub-checks and notes for one criterion.
class Checks {
public:
    void expect(bool ok, const std::string& what) {
        if (!ok) failures_.push_back(what);
    }
    void note(const std::string& text) { notes_.push_back(text); }
    bool passed() const { return failures_.empty(); }

    std::string summary() const {
        std::string out;
        for (const auto& n : notes_) out += (out.empty() ? "" : "; ") + n;
        for (const auto& f : failures_) out += (out.empty() ? "FAILED " : "; FAILED ") + f;
        return out;
    }

private:
    std::vector<std::string> failures_;
    std::vector<std::string> notes_;
};

fs::path scratch_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("deepatlas_acceptance_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = "\"" + kCli.string() + "\" " + args + " > \"" + log.string() + "\" 2>&1";
    return std::system(cmd.c_str());
}

std::string quoted(const fs::path& p) { return "\"" + p.string() + "\""; }

RunConfig acceptance_config(const std::string& name, std::uint64_t seed) {
    auto config = load_run_config(kConfigDir / "acceptance" / (name + ".json"));
    config.train.seed = seed;
    return config;
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

void gradient_correctness(Checks& c) {
    const auto start = Clock::now();
    const auto entries = run_gradcheck_suite(2026, 5);
    const double elapsed = seconds_since(start);
    Scalar worst = 0;
    for (const auto& e : entries) {
        worst = std::max(worst, e.worst);
        c.expect(e.passed(), e.name + " error " + std::to_string(e.worst));
        c.expect(e.instances >= 5, e.name + " ran " + std::to_string(e.instances) + " instances");
        if (e.name != "segmentation_objective_both_unlabeled")
            c.expect(e.largest_gradient > 0, e.name + " probed only zero gradients");
    }
    std::set<std::string> names;
    for (const auto& e : entries) names.insert(e.name);
    for (const char* required : {"ncc_loss", "soft_dice_loss", "soft_dice_loss_as_printed", "bending_energy"}) {
        c.expect(names.count(required) == 1, std::string("suite lacks ") + required);
    }
    c.expect(elapsed < kGradcheckBudgetSeconds, "runtime " + fixed(elapsed) + " s");
    c.note(std::to_string(entries.size()) + " checks x 5 instances, worst relative error " + fixed(worst * 1e6, 3) +
           "e-6, " + fixed(elapsed) + " s");
}

// ---------------------------------------------------------------------------
// 2. Loss invariants

Tensor hard_one_hot(const Shape& spatial, std::int64_t classes, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    LabelMap m{spatial, std::vector<std::uint8_t>(static_cast<std::size_t>(numel(spatial)))};
    for (auto& v : m.values) v = static_cast<std::uint8_t>(rng() % static_cast<std::uint64_t>(classes));
    return one_hot(m, classes);
}

void loss_invariants(Checks& c) {
    Scalar worst_affine = 0;
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
        const auto a = random_tensor({2, 1, 9, 7}, seed, -3, 3);
        const auto b = random_tensor({2, 1, 9, 7}, seed + 500, -3, 3);
        const Scalar l = ncc_loss(a, b).item();
        c.expect(l >= -1e-8 && l <= 2 + 1e-8, "ncc bound " + std::to_string(l));
        const Scalar scale = 0.25 + 0.5 * static_cast<Scalar>(seed);
        worst_affine = std::max(worst_affine, std::abs(ncc_loss(add(mul(a, scale), -1.5), b).item() - l));
        worst_affine = std::max(worst_affine, std::abs(ncc_loss(a, add(mul(b, scale), 4.0)).item() - l));
    }
    c.expect(worst_affine < 1e-8, "ncc affine invariance " + std::to_string(worst_affine));
    const auto same = random_tensor({1, 1, 12, 12}, 77, 0, 1);
    c.expect(std::abs(ncc_loss(same, same).item()) < 1e-8, "ncc of identical images");

    for (std::uint64_t seed = 0; seed < 25; ++seed) {
        const auto p = softmax(random_tensor({2, 4, 6, 5}, seed, -3, 3), 1);
        const auto q = softmax(random_tensor({2, 4, 6, 5}, seed + 900, -3, 3), 1);
        for (auto variant : {DiceVariant::conventional, DiceVariant::as_printed}) {
            const Scalar l = soft_dice_loss(p, q, variant).item();
            c.expect(l >= 0 && l <= 1, "dice bound " + std::to_string(l));
            c.expect(soft_dice_loss(q, p, variant).item() == l, "dice symmetry");
        }
    }
    Scalar worst_perfect = 0;
    bool half_exact = true;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto s = hard_one_hot({8, 9}, 4, seed);
        worst_perfect = std::max(worst_perfect, std::abs(soft_dice_loss(s, s).item()));
        half_exact = half_exact && soft_dice_loss(s, s, DiceVariant::as_printed).item() == 0.5;
    }
    c.expect(worst_perfect <= 1e-6, "conventional perfect overlap " + std::to_string(worst_perfect));
    c.expect(half_exact, "as_printed perfect hard overlap is not exactly 0.5");

    const Shape sp{7, 6, 5};
    const auto grid = identity_grid(sp);
    const auto n = numel(sp);
    std::vector<Scalar> u(static_cast<std::size_t>(3 * n));
    for (std::int64_t v = 0; v < n; ++v)
        for (std::int64_t i = 0; i < 3; ++i)
            u[i * n + v] = 0.2 * (i + 1) * grid[v] - 0.1 * grid[n + v] + 0.03 * i * grid[2 * n + v] - 0.4;
    const Scalar affine = bending_energy(DisplacementField(Tensor({1, 3, 7, 6, 5}, u))).item();
    c.expect(std::abs(affine) <= 1e-10, "bending energy on affine field " + std::to_string(affine));
    const auto x = identity_grid({9});
    std::vector<Scalar> q(9);
    for (int v = 0; v < 9; ++v) q[v] = x[v] * x[v];
    const Scalar quad = bending_energy(DisplacementField(Tensor({1, 1, 9}, q))).item();
    c.expect(std::abs(quad - 4.0) <= 1e-9, "bending energy on quadratic " + std::to_string(quad));

    const auto pm = softmax(random_tensor({1, 4, 8, 8}, 5, -2, 2), 1);
    const auto pt = softmax(random_tensor({1, 4, 8, 8}, 6, -2, 2), 1);
    const DisplacementField field(random_tensor({1, 2, 8, 8}, 7, -0.1, 0.1));
    const Scalar unlabeled =
        segmentation_objective({std::nullopt, std::nullopt, pm, pt}, field, {false, false}, LossWeights{}).total.item();
    c.expect(unlabeled == 0.0, "L_seg on an unlabeled pair " + std::to_string(unlabeled));

    c.note("ncc affine drift " + fixed(worst_affine * 1e12, 3) + "e-12, bending energy quadratic " +
           fixed(quad, 12) + ", as_printed perfect 0.5 exact");
}

// ---------------------------------------------------------------------------
// 3. Identity warp

void identity_warp(Checks& c) {
    int cases = 0;
    for (const Shape& s : {Shape{1, 1, 17}, Shape{2, 3, 32, 24}, Shape{1, 2, 9, 8, 7}}) {
        const auto image = random_tensor(s, static_cast<std::uint64_t>(s.size()), -10, 10);
        const auto zero = DisplacementField::zeros(s[0], Shape(s.begin() + 2, s.end()));
        c.expect(bitwise_equal(warp(image, zero), image), "zero field changed an image of rank " +
                                                              std::to_string(s.size() - 2));
        ++cases;
    }
    for (std::int64_t rank : {2, 3}) {
        NetConfig config;
        config.spatial_rank = rank;
        config.width = 8;
        const RegistrationNet net(config, 100 + static_cast<std::uint64_t>(rank));
        const Shape shape = rank == 2 ? Shape{2, 1, 32, 32} : Shape{1, 1, 16, 16, 16};
        const auto moving = random_tensor(shape, 3, 0, 1);
        const auto target = random_tensor(shape, 4, 0, 1);
        const auto field = net.forward(moving, target);
        bool zero = true;
        for (auto v : field.tensor().data()) zero = zero && v == 0.0;
        c.expect(zero, "fresh registration network predicts a nonzero field");
        c.expect(bitwise_equal(warp(moving, field), moving), "fresh registration network does not warp to identity");
        ++cases;
    }
    c.note(std::to_string(cases) + " cases bit-exact");
}

// ---------------------------------------------------------------------------
// 4. Synthetic-data substitutes for the quantitative results

struct SeedOutcome {
    std::uint64_t seed = 0;
    Scalar mono_seg = 0, mono_reg = 0, da_seg = 0, da_reg = 0;
    double worst_run_seconds = 0;
    bool finite = true;
};

// Step records carry the sum of the present loss components; the log writes
// non-finite values as null.
bool finite_losses(const MetricLog& log) {
    for (const auto& r : log.records()) {
        if (r.contains("total") && !r.at("total").is_number()) return false;
    }
    return true;
}

SeedOutcome run_seed(std::uint64_t seed) {
    SeedOutcome out;
    out.seed = seed;
    const auto seg_config = acceptance_config("mono_seg", seed);
    const auto reg_config = acceptance_config("mono_reg", seed);
    const auto da_config = acceptance_config("da", seed);

    auto timed = [&](const RunConfig& config, PretrainedNets pre) {
        const auto data = prepare_data(config.data);
        const auto parts = make_partitions(data.dataset, data.split);
        MetricLog log;
        const auto start = Clock::now();
        auto result = run_protocol(config.train, config.model, parts, std::move(pre), log);
        out.worst_run_seconds = std::max(out.worst_run_seconds, seconds_since(start));
        out.finite = out.finite && finite_losses(log);
        if (parts.hidden_reads() != 0) throw std::logic_error("training read hidden labels");
        return std::make_pair(std::move(result), make_partitions(data.dataset, data.split));
    };

    auto [seg, seg_parts] = timed(seg_config, {});
    out.mono_seg = eval_segmentation(*seg.seg, seg_parts.test).mean;
    auto [reg, reg_parts] = timed(reg_config, {});
    out.mono_reg = eval_registration(*reg.reg, reg_parts.test, reg_config.model.reg.classes).mean;

    PretrainedNets pre;
    pre.seg = std::move(seg.seg);
    pre.reg = std::move(reg.reg);
    auto [joint, joint_parts] = timed(da_config, std::move(pre));
    out.da_seg = eval_segmentation(*joint.seg, joint_parts.test).mean;
    out.da_reg = eval_registration(*joint.reg, joint_parts.test, da_config.model.reg.classes).mean;
    log_info("seed " + std::to_string(seed) + ": mono seg " + fixed(out.mono_seg) + ", mono reg " +
             fixed(out.mono_reg) + ", DA seg " + fixed(out.da_seg) + ", DA reg " + fixed(out.da_reg));
    return out;
}

const std::vector<SeedOutcome>& seed_outcomes() {
    static const std::vector<SeedOutcome> outcomes = [] {
        std::vector<SeedOutcome> all;
        for (auto seed : kSeeds) all.push_back(run_seed(seed));
        return all;
    }();
    return outcomes;
}

void common_run_checks(Checks& c, const SeedOutcome& o) {
    const auto tag = "seed " + std::to_string(o.seed);
    c.expect(o.worst_run_seconds <= kRunBudgetSeconds, tag + " run took " + fixed(o.worst_run_seconds) + " s");
    c.expect(o.finite, tag + " logged a non-finite loss");
}

void registration_benefit(Checks& c) {
    double worst = 0;
    for (const auto& o : seed_outcomes()) {
        common_run_checks(c, o);
        const Scalar gain = o.da_reg - o.mono_reg;
        c.expect(gain >= 1.0, "seed " + std::to_string(o.seed) + " DA reg gain " + fixed(gain));
        c.note("seed " + std::to_string(o.seed) + ": DA reg " + fixed(o.da_reg) + " vs mono N=0 " +
               fixed(o.mono_reg) + " (+" + fixed(gain) + ")");
        worst = std::max(worst, o.worst_run_seconds);
    }
    c.note("longest run " + fixed(worst, 1) + " s");
}

void segmentation_benefit(Checks& c) {
    for (const auto& o : seed_outcomes()) {
        common_run_checks(c, o);
        c.expect(o.da_seg >= o.mono_seg,
                 "seed " + std::to_string(o.seed) + " DA seg " + fixed(o.da_seg) + " < mono " + fixed(o.mono_seg));
        c.note("seed " + std::to_string(o.seed) + ": DA seg " + fixed(o.da_seg) + " vs mono " + fixed(o.mono_seg));
    }
}

void one_shot_ladder(Checks& c) {
    const auto config = acceptance_config("ladder", kSeeds[0]);
    const auto data = prepare_data(config.data);
    const auto parts = make_partitions(data.dataset, data.split);
    c.expect(parts.labeled_count() == 1, "ladder data has " + std::to_string(parts.labeled_count()) + " labels");
    MetricLog log;
    const auto start = Clock::now();
    const auto result = run_protocol(config.train, config.model, parts, {}, log);
    const double elapsed = seconds_since(start);
    c.expect(parts.hidden_reads() == 0, "training read hidden labels");
    c.expect(result.ladder && result.unsupervised_reg.has_value(), "ladder did not run");
    std::vector<std::string> stages;
    for (const auto& r : log.records()) {
        const auto s = r.at("stage").get<std::string>();
        if (stages.empty() || stages.back() != s) stages.push_back(s);
    }
    c.expect(stages == std::vector<std::string>{"ladder_unsupervised_reg", "ladder_seg_from_scratch", "da"},
             "unexpected stage sequence");
    c.expect(finite_losses(log), "non-finite loss");
    c.expect(elapsed <= kRunBudgetSeconds, "run took " + fixed(elapsed) + " s");

    const auto classes = config.model.reg.classes;
    const Scalar seg = eval_segmentation(*result.seg, parts.test).mean;
    const Scalar unsup = eval_registration(*result.unsupervised_reg, parts.test, classes).mean;
    const Scalar joint = eval_registration(*result.reg, parts.test, classes).mean;
    c.expect(seg >= 70.0, "segmentation Dice " + fixed(seg));
    c.expect(joint >= unsup, "DA reg " + fixed(joint) + " < unsupervised " + fixed(unsup));
    c.note("seg " + fixed(seg) + ", DA reg " + fixed(joint) + " vs unsupervised " + fixed(unsup) + ", " +
           fixed(elapsed, 1) + " s");
}

// ---------------------------------------------------------------------------
// 5. Protocol invariants

struct SmallSetup {
    Dataset dataset;
    ModelConfig model;

    SmallSetup() {
        SyntheticSpec s;
        s.spatial_shape = {16, 16};
        s.count = 12;
        dataset = generate_dataset(s);
        NetConfig c;
        c.depth = 2;
        c.width = 4;
        model = {c, c};
    }

    Partitions partitions(std::int64_t n_labeled) const {
        return make_partitions(dataset, split_dataset(dataset, {8, 2, 2}, n_labeled, 1));
    }

    static TrainConfig config(Protocol p, std::int64_t steps) {
        TrainConfig c;
        c.protocol = p;
        apply_default_learning_rates(c);
        c.epochs = 2;
        c.steps_per_epoch = steps;
        c.weights.lambda_r = 1e-3;
        c.seed = 5;
        return c;
    }
};

std::map<std::string, std::string> run_files(const fs::path& dir) {
    std::map<std::string, std::string> files;
    for (const char* name : {"seg.npz", "reg.npz"}) {
        if (fs::exists(dir / name)) files[name] = read_file(dir / name);
    }
    return files;
}

std::vector<nlohmann::json> metrics_without_time(const fs::path& path) {
    std::vector<nlohmann::json> records;
    std::istringstream in(read_file(path));
    for (std::string line; std::getline(in, line);) {
        auto j = nlohmann::json::parse(line);
        j.erase("wall_time");
        records.push_back(std::move(j));
    }
    return records;
}

void protocol_invariants(Checks& c) {
    const SmallSetup setup;
    const auto parts = setup.partitions(2);
    PretrainedNets pre;
    {
        MetricLog log;
        pre.seg = *run_protocol(SmallSetup::config(Protocol::mono_seg, 6), setup.model, parts, {}, log).seg;
        pre.reg = *run_protocol(SmallSetup::config(Protocol::mono_reg, 6), setup.model, parts, {}, log).reg;
    }

    // Alternation: the idle network never moves; one segmentation step in every 21.
    {
        std::optional<ParameterSet> last_seg, last_reg;
        std::vector<std::string> phases;
        int violations = 0;
        MetricLog log;
        PretrainedNets p{pre.seg, pre.reg};
        run_protocol(SmallSetup::config(Protocol::da, 63), setup.model, parts, std::move(p), log,
                     [&](std::int64_t, const std::string& phase, const SegmentationNet* seg, const RegistrationNet* reg) {
                         if (last_seg) {
                             if (phase == "reg" && !seg->params().bitwise_equal(*last_seg)) ++violations;
                             if (phase == "seg" && !reg->params().bitwise_equal(*last_reg)) ++violations;
                         }
                         last_seg = seg->params().clone();
                         last_reg = reg->params().clone();
                         phases.push_back(phase);
                     });
        c.expect(violations == 0, std::to_string(violations) + " frozen-network changes");
        int bad_windows = 0;
        for (std::size_t start = 0; start + 21 <= phases.size(); ++start) {
            bad_windows += std::count(phases.begin() + start, phases.begin() + start + 21, "seg") != 1;
        }
        c.expect(phases.size() == 126, "alternation ran " + std::to_string(phases.size()) + " steps");
        c.expect(bad_windows == 0, std::to_string(bad_windows) + " windows off the 1-in-21 ratio");
        c.note(std::to_string(phases.size()) + " alternation steps, " +
               std::to_string(phases.size() - 20) + " windows at 1-in-21");
    }
    // Semi-DA keeps its pretrained partner bitwise unchanged.
    {
        MetricLog log;
        PretrainedNets a;
        a.reg = *pre.reg;
        const auto r1 = run_protocol(SmallSetup::config(Protocol::semi_da_seg, 6), setup.model, parts, std::move(a), log);
        c.expect(r1.reg->params().bitwise_equal(pre.reg->params()), "semi_da_seg moved the registration network");
        PretrainedNets b;
        b.seg = *pre.seg;
        const auto r2 = run_protocol(SmallSetup::config(Protocol::semi_da_reg, 6), setup.model, parts, std::move(b), log);
        c.expect(r2.seg->params().bitwise_equal(pre.seg->params()), "semi_da_reg moved the segmentation network");
    }
    // With lambda_a = 0 the segmentation gradient is lambda_sp times the supervised one.
    {
        const auto labeled_parts = setup.partitions(3);
        auto config = SmallSetup::config(Protocol::semi_da_seg, 6);
        config.weights.lambda_a = 0;
        SegmentationNet seg(setup.model.seg, 8);
        Scalar phase = 0;
        for (auto& v : seg.params().at("head.weight").mutable_data()) v = 0.3 * std::sin(phase += 1.0);
        const RegistrationNet reg(setup.model.reg, 9);
        Scalar worst = 0, scale = 0;
        for (const auto& moving : labeled_parts.train) {
            if (!moving.is_labeled()) continue;
            for (const auto& target : labeled_parts.train) {
                if (target.is_labeled()) continue;
                const auto a = segmentation_gradients(seg, reg, {&moving, &target, {true, false}}, config);
                const auto b = supervised_gradients(seg, moving, config);
                for (std::size_t k = 0; k < a.size(); ++k) {
                    const auto ga = a.entries()[k].second.data();
                    const auto gb = b.entries()[k].second.data();
                    for (std::size_t i = 0; i < ga.size(); ++i) {
                        const Scalar expected = config.weights.lambda_sp * gb[i];
                        worst = std::max(worst, std::abs(ga[i] - expected));
                        scale = std::max(scale, std::abs(expected));
                    }
                }
            }
        }
        c.expect(scale > 0, "supervised gradient vanished");
        c.expect(worst <= 1e-12 * scale, "gradient mismatch " + std::to_string(worst));
        c.note("lambda_a=0 gradient gap " + fixed(worst / scale * 1e15, 3) + "e-15 relative");
    }
    // Full runs through the command line are reproducible.
    {
        auto j = nlohmann::json::parse(read_file(kConfigDir / "acceptance" / "smoke.json"));
        const auto root = scratch_dir("determinism");
        std::vector<fs::path> outs;
        for (const char* name : {"a", "b"}) {
            j["output"]["directory"] = (root / name).string();
            const auto config = root / (std::string(name) + ".json");
            write_file(config, j.dump(2));
            const int code = run_cli("train --config " + quoted(config), root / (std::string(name) + ".log"));
            c.expect(code == 0, std::string("cli train exited with ") + std::to_string(code));
            outs.push_back(root / name);
        }
        const auto fa = run_files(outs[0]);
        c.expect(!fa.empty() && fa == run_files(outs[1]), "checkpoints differ between identical runs");
        const auto ma = metrics_without_time(outs[0] / "metrics.jsonl");
        c.expect(!ma.empty() && ma == metrics_without_time(outs[1] / "metrics.jsonl"),
                 "metric logs differ between identical runs");
        c.note("two CLI runs: " + std::to_string(ma.size()) + " metric records and checkpoints identical");
        fs::remove_all(root);
    }
}

// ---------------------------------------------------------------------------
// 6. Serialization round-trips

void serialization(Checks& c) {
    const auto root = scratch_dir("serialization");
    const auto spec_path = kConfigDir / "synthetic.json";
    const auto data_dir = root / "data";
    c.expect(run_cli("gen-data --spec " + quoted(spec_path) + " --out " + quoted(data_dir), root / "gen.log") == 0,
             "cli gen-data failed");
    const auto data_config = parse_data_config(nlohmann::json::parse(read_file(spec_path)), spec_path.parent_path());
    const auto generated = generate_dataset(data_config.synthetic);
    const auto loaded = load_dataset(data_dir);
    bool same = loaded.spec == generated.spec && loaded.samples.size() == generated.samples.size();
    for (std::size_t i = 0; same && i < generated.samples.size(); ++i) {
        const auto& a = generated.samples[i];
        const auto& b = loaded.samples[i];
        same = a.id == b.id && a.labels == b.labels && bitwise_equal(a.intensity, b.intensity) &&
               bitwise_equal(a.field, b.field);
    }
    c.expect(same, "reloaded dataset differs from the generated one");
    const auto split = load_split(data_dir);
    c.expect(split.has_value(), "dataset directory has no split");
    const auto resaved = root / "data_again";
    save_dataset(resaved, loaded, split);
    std::size_t files = 0;
    for (const auto& entry : fs::directory_iterator(data_dir)) {
        ++files;
        c.expect(read_file(entry.path()) == read_file(resaved / entry.path().filename()),
                 "re-saved " + entry.path().filename().string() + " differs");
    }

    NetConfig config;
    config.width = 6;
    config.depth = 2;
    SegmentationNet seg(config, 31);
    RegistrationNet reg(config, 32);
    for (auto* set : {&seg.params(), &reg.params()}) {
        std::uint64_t k = 40;
        for (auto& [name, t] : set->entries()) {
            const auto r = random_tensor(t.shape(), ++k, -0.2, 0.2);
            std::copy(r.data().begin(), r.data().end(), t.mutable_data().begin());
        }
    }
    save_checkpoint(root / "seg.npz", seg);
    save_checkpoint(root / "reg.npz", reg);
    const auto seg2 = load_segmentation_net(root / "seg.npz");
    const auto reg2 = load_registration_net(root / "reg.npz");
    c.expect(seg2.params().bitwise_equal(seg.params()) && seg2.config() == seg.config(),
             "segmentation checkpoint round-trip");
    c.expect(reg2.params().bitwise_equal(reg.params()) && reg2.config() == reg.config(),
             "registration checkpoint round-trip");
    save_checkpoint(root / "seg_again.npz", seg2);
    c.expect(read_file(root / "seg_again.npz") == read_file(root / "seg.npz"), "re-saved checkpoint bytes differ");

    const auto& moving = loaded.samples[0];
    const auto& target = loaded.samples[1];
    const auto moving_path = data_dir / (moving.id + ".image.npy");
    const auto target_path = data_dir / (target.id + ".image.npy");
    c.expect(run_cli("segment --checkpoint " + quoted(root / "seg.npz") + " --image " + quoted(moving_path) +
                         " --out " + quoted(root / "labels.npy"),
                     root / "segment.log") == 0,
             "cli segment failed");
    c.expect(load_npy_labels(root / "labels.npy") == segment_image(seg, moving.intensity),
             "cli segmentation differs from the in-memory network");
    c.expect(run_cli("register --checkpoint " + quoted(root / "reg.npz") + " --moving " + quoted(moving_path) +
                         " --target " + quoted(target_path) + " --out-field " + quoted(root / "field.npy") +
                         " --out-warped " + quoted(root / "warped.npy"),
                     root / "register.log") == 0,
             "cli register failed");
    const auto expected = register_pair(reg, moving.intensity, target.intensity);
    c.expect(bitwise_equal(load_npy_tensor(root / "field.npy"), expected.field), "cli field differs");
    c.expect(bitwise_equal(load_npy_tensor(root / "warped.npy"), expected.warped), "cli warped image differs");
    bool nonzero = false;
    for (auto v : expected.field.data()) nonzero = nonzero || v != 0.0;
    c.expect(nonzero, "registration fixture predicts a zero field");
    c.note(std::to_string(generated.samples.size()) + " samples and " + std::to_string(files) +
           " files bitwise; checkpoints and CLI segment/register exact");
    fs::remove_all(root);
}

struct Criterion {
    std::string id;
    std::string title;
    std::function<void(Checks&)> run;
};

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> criteria{
        {"1", "gradient correctness", gradient_correctness},
        {"2", "loss invariant suite", loss_invariants},
        {"3", "identity-warp exactness", identity_warp},
        {"4a", "weak-supervision benefit for registration", registration_benefit},
        {"4b", "semi-supervised segmentation benefit", segmentation_benefit},
        {"4c", "one-shot ladder", one_shot_ladder},
        {"5", "protocol invariants", protocol_invariants},
        {"6", "serialization round-trips", serialization},
    };
    std::set<std::string> selected(argv + 1, argv + argc);
    int failed = 0;
    for (const auto& criterion : criteria) {
        if (!selected.empty() && !selected.count(criterion.id)) continue;
        Checks checks;
        const auto start = Clock::now();
        try {
            criterion.run(checks);
        } catch (const std::exception& e) {
            checks.expect(false, std::string("exception: ") + e.what());
        }
        const bool ok = checks.passed();
        failed += !ok;
        std::cout << (ok ? "[PASS] " : "[FAIL] ") << criterion.id << " " << criterion.title << " ("
                  << fixed(seconds_since(start), 1) << " s): " << checks.summary() << std::endl;
    }
    std::cout << (failed ? std::to_string(failed) + " criteria failed" : "all criteria passed") << std::endl;
    return failed ? 1 : 0;
}
