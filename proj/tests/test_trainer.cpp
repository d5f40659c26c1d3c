#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "deepatlas/npy.hpp"
#include "deepatlas/trainer.hpp"
#include "helpers.hpp"

using namespace deepatlas;

namespace {

struct Fixture {
    Dataset dataset;
    ModelConfig model;

    Fixture() {
        SyntheticSpec s;
        s.spatial_shape = {16, 16};
        s.count = 12;
        dataset = generate_dataset(s);
        NetConfig c;
        c.depth = 2;
        c.width = 4;
        model = {c, c};
    }

    Partitions partitions(std::int64_t n_labeled, std::uint64_t seed = 1) const {
        return make_partitions(dataset, split_dataset(dataset, {8, 2, 2}, n_labeled, seed));
    }
};

const Fixture& fixture() {
    static const Fixture f;
    return f;
}

TrainConfig small_config(Protocol p, std::int64_t epochs = 2) {
    TrainConfig c;
    c.protocol = p;
    apply_default_learning_rates(c);
    c.epochs = epochs;
    c.steps_per_epoch = 6;
    c.weights.lambda_r = 1e-3;
    c.seed = 3;
    return c;
}

PretrainedNets pretrained(const Partitions& parts) {
    const auto& f = fixture();
    MetricLog log;
    PretrainedNets p;
    p.seg = *run_protocol(small_config(Protocol::mono_seg), f.model, parts, {}, log).seg;
    p.reg = *run_protocol(small_config(Protocol::mono_reg), f.model, parts, {}, log).reg;
    return p;
}

}  // namespace

TEST_CASE("adam") {
    ParameterSet p;
    auto& w = p.add("w", Tensor({1}, {1.0}, true));
    Adam opt;
    opt.step(p, 0.1);  // no gradient: unchanged
    CHECK(w[0] == 1.0);

    std::vector<Scalar> g{0.0};
    detail::accumulate_grad(w, g);
    opt.step(p, 0.1);
    CHECK(w[0] == 1.0);

    ParameterSet q;
    auto& x = q.add("x", Tensor({1}, {0.0}, true));
    Adam opt2;
    std::vector<Scalar> one{1.0};
    detail::accumulate_grad(x, one);
    opt2.step(q, 0.01);
    CHECK(x[0] == doctest::Approx(-0.01).epsilon(1e-6));
}

TEST_CASE("adam on w^2 matches a direct simulation") {
    ParameterSet p;
    auto& w = p.add("w", Tensor({1}, {1.0}, true));
    Adam opt;
    Scalar m = 0, v = 0, ref = 1.0;
    std::vector<Scalar> losses{1.0};
    for (int t = 1; t <= 10; ++t) {
        w.zero_grad();
        std::vector<Scalar> g{2 * w[0]};
        detail::accumulate_grad(w, g);
        opt.step(p, 0.1);
        const Scalar gr = 2 * ref;
        m = 0.9 * m + 0.1 * gr;
        v = 0.999 * v + 0.001 * gr * gr;
        ref -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
        CHECK(w[0] == doctest::Approx(ref).epsilon(1e-12));
        losses.push_back(w[0] * w[0]);
    }
    for (std::size_t t = 2; t < losses.size(); ++t) CHECK(losses[t] < losses[t - 1]);
}

TEST_CASE("pair sampling") {
    const auto parts = fixture().partitions(0);
    std::mt19937_64 rng(4);

    SUBCASE("two images give two ordered pairs") {
        const std::vector<LabeledImage> two(parts.train.begin(), parts.train.begin() + 2);
        std::set<std::pair<std::string, std::string>> seen;
        for (int i = 0; i < 100; ++i) {
            const auto p = sample_pair(two, rng, false);
            seen.insert({p.moving->id(), p.target->id()});
        }
        CHECK(seen.size() == 2);
    }
    SUBCASE("uniform within 3 sigma over 10k draws") {
        const auto all = fixture().partitions(8);
        const std::vector<LabeledImage> imgs(all.train.begin(), all.train.begin() + 4);
        for (bool for_seg : {false, true}) {
            std::map<std::pair<std::string, std::string>, int> counts;
            const int draws = 10000;
            for (int i = 0; i < draws; ++i) {
                const auto p = sample_pair(imgs, rng, for_seg);
                CHECK(p.moving != p.target);
                ++counts[{p.moving->id(), p.target->id()}];
            }
            CHECK(counts.size() == 12);
            // Chi-square over the 12 cells has mean 11 and sd sqrt(22).
            const Scalar expected = draws / 12.0;
            Scalar chi2 = 0;
            for (const auto& [k, n] : counts) chi2 += (n - expected) * (n - expected) / expected;
            CHECK(chi2 < 11 + 3 * std::sqrt(22.0));
        }
    }
    SUBCASE("segmentation pairs reject both-unlabeled") {
        const auto one = fixture().partitions(1);
        for (int i = 0; i < 500; ++i) CHECK(sample_pair(one.train, rng, true).labeling.any());
        CHECK_THROWS_AS(sample_pair(parts.train, rng, true), std::invalid_argument);
    }
    SUBCASE("deterministic under a fixed seed") {
        std::mt19937_64 a(9), b(9);
        for (int i = 0; i < 50; ++i) CHECK(sample_pair(parts.train, a, false).moving == sample_pair(parts.train, b, false).moving);
    }
}

TEST_CASE("alternation keeps the idle network bitwise frozen and holds the 1:20 ratio") {
    const auto& f = fixture();
    const auto parts = f.partitions(2);
    auto pre = pretrained(parts);
    auto cfg = small_config(Protocol::da, 2);
    cfg.steps_per_epoch = 50;

    std::optional<ParameterSet> last_seg, last_reg;
    std::vector<std::string> phases;
    int frozen_violations = 0, moved = 0;
    MetricLog log;
    run_protocol(cfg, f.model, parts, std::move(pre), log,
                 [&](std::int64_t, const std::string& phase, const SegmentationNet* seg, const RegistrationNet* reg) {
                     if (last_seg && last_reg) {
                         const bool seg_same = seg->params().bitwise_equal(*last_seg);
                         const bool reg_same = reg->params().bitwise_equal(*last_reg);
                         if (phase == "reg" && !seg_same) ++frozen_violations;
                         if (phase == "seg" && !reg_same) ++frozen_violations;
                         if ((phase == "reg" && !reg_same) || (phase == "seg" && !seg_same)) ++moved;
                     }
                     last_seg = seg->params().clone();
                     last_reg = reg->params().clone();
                     phases.push_back(phase);
                 });
    CHECK(frozen_violations == 0);
    CHECK(moved > 0);
    REQUIRE(phases.size() == 100);
    for (std::size_t start = 0; start + 21 <= phases.size(); ++start) {
        CHECK(std::count(phases.begin() + start, phases.begin() + start + 21, "seg") == 1);
    }
}

TEST_CASE("semi-DA protocols leave the pretrained network untouched") {
    const auto& f = fixture();
    const auto parts = f.partitions(2);
    const auto pre = pretrained(parts);
    MetricLog log;

    PretrainedNets a;
    a.reg = *pre.reg;
    const auto r1 = run_protocol(small_config(Protocol::semi_da_seg), f.model, parts, std::move(a), log);
    CHECK(r1.reg->params().bitwise_equal(pre.reg->params()));

    PretrainedNets b;
    b.seg = *pre.seg;
    const auto r2 = run_protocol(small_config(Protocol::semi_da_reg), f.model, parts, std::move(b), log);
    CHECK(r2.seg->params().bitwise_equal(pre.seg->params()));
    CHECK(parts.hidden_reads() == 0);
}

TEST_CASE("with lambda_a = 0 a segmentation step follows the supervised gradient") {
    const auto& f = fixture();
    const auto parts = f.partitions(3);
    auto cfg = small_config(Protocol::semi_da_seg);
    cfg.weights.lambda_a = 0;
    cfg.weights.lambda_sp = 1;
    SegmentationNet seg(f.model.seg, 5);
    Scalar phase = 0;
    for (auto& v : seg.params().at("head.weight").mutable_data()) v = 0.3 * std::sin(phase += 1.0);
    RegistrationNet reg(f.model.reg, 6);

    const LabeledImage* labeled = nullptr;
    const LabeledImage* unlabeled = nullptr;
    for (const auto& im : parts.train) (im.is_labeled() ? labeled : unlabeled) = &im;
    REQUIRE(labeled);
    REQUIRE(unlabeled);
    const PairSample pair{labeled, unlabeled, {true, false}};
    const auto a = segmentation_gradients(seg, reg, pair, cfg);
    const auto b = supervised_gradients(seg, *labeled, cfg);
    REQUIRE(a.size() == b.size());
    Scalar worst = 0, scale = 0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        const auto ga = a.entries()[k].second.data();
        const auto gb = b.entries()[k].second.data();
        REQUIRE(ga.size() == gb.size());
        for (std::size_t i = 0; i < ga.size(); ++i) {
            worst = std::max(worst, std::abs(ga[i] - gb[i]));
            scale = std::max(scale, std::abs(gb[i]));
        }
    }
    CHECK(scale > 0);
    CHECK(worst <= 1e-12 * scale);
}

TEST_CASE("full runs are deterministic under a fixed seed") {
    const auto& f = fixture();
    const auto parts = f.partitions(2);
    MetricLog l1, l2;
    const auto a = run_protocol(small_config(Protocol::mono_reg), f.model, parts, {}, l1);
    const auto b = run_protocol(small_config(Protocol::mono_reg), f.model, parts, {}, l2);
    CHECK(a.reg->params().bitwise_equal(b.reg->params()));
    CHECK(l1.deterministic_records() == l2.deterministic_records());

    auto other = small_config(Protocol::mono_reg);
    other.seed = 4;
    MetricLog l3;
    const auto c = run_protocol(other, f.model, parts, {}, l3);
    CHECK_FALSE(c.reg->params().bitwise_equal(a.reg->params()));
}

TEST_CASE("mono registration uses the anatomy term only on manually labeled pairs") {
    const auto& f = fixture();
    for (std::int64_t n : {0, 8}) {
        MetricLog log;
        run_protocol(small_config(Protocol::mono_reg), f.model, f.partitions(n), {}, log);
        int steps = 0, with_anatomy = 0;
        for (const auto& r : log.records()) {
            if (r.at("phase") != "reg") continue;
            ++steps;
            if (!r.at("L_a").is_null()) ++with_anatomy;
        }
        CHECK(steps == 12);
        CHECK(with_anatomy == (n == 0 ? 0 : steps));
    }
}

TEST_CASE("protocol configuration errors") {
    const auto& f = fixture();
    MetricLog log;
    CHECK_THROWS_AS(run_protocol(small_config(Protocol::da), f.model, f.partitions(2), {}, log), ConfigError);
    CHECK_THROWS_AS(run_protocol(small_config(Protocol::semi_da_seg), f.model, f.partitions(2), {}, log),
                    ConfigError);
    CHECK_THROWS_AS(run_protocol(small_config(Protocol::semi_da_reg), f.model, f.partitions(2), {}, log),
                    ConfigError);
    CHECK_THROWS_AS(run_protocol(small_config(Protocol::mono_seg), f.model, f.partitions(0), {}, log), ConfigError);
    CHECK_THROWS_AS(protocol_from_string("joint"), ConfigError);
    auto bad = small_config(Protocol::mono_reg);
    bad.alt_ratio = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    auto mismatch = f.model;
    mismatch.reg.classes = 3;
    CHECK_THROWS_AS(mismatch.validate(), ConfigError);
}

TEST_CASE("one-shot ladder runs its three stages") {
    const auto& f = fixture();
    const auto parts = f.partitions(1);
    auto cfg = small_config(Protocol::da, 2);
    cfg.patience = 1;
    MetricLog log;
    const auto r = run_protocol(cfg, f.model, parts, {}, log);
    CHECK(r.ladder);
    CHECK(r.unsupervised_reg.has_value());
    std::vector<std::string> stages;
    for (const auto& rec : log.records()) {
        const auto s = rec.at("stage").get<std::string>();
        if (stages.empty() || stages.back() != s) stages.push_back(s);
    }
    CHECK(stages == std::vector<std::string>{"ladder_unsupervised_reg", "ladder_seg_from_scratch", "da"});
    CHECK(parts.hidden_reads() == 0);
}

TEST_CASE("learning-rate decay and the metric log file") {
    const auto& f = fixture();
    auto cfg = small_config(Protocol::mono_reg, 3);
    cfg.decay_epochs = {1, 2};
    const auto path = std::filesystem::temp_directory_path() / "deepatlas_trainer_log.jsonl";
    std::filesystem::remove(path);
    {
        MetricLog log(path);
        run_protocol(cfg, f.model, f.partitions(0), {}, log);
        for (const auto& r : log.records()) {
            if (r.at("phase") != "reg") continue;
            const auto e = r.at("epoch").get<int>();
            CHECK(r.at("lr").get<Scalar>() == doctest::Approx(1e-3 * std::pow(0.2, e)));
        }
    }
    const auto text = read_file(path);
    std::size_t lines = 0;
    for (char ch : text) lines += ch == '\n';
    CHECK(lines == 3 * 6 + 3);
    CHECK(nlohmann::json::parse(text.substr(0, text.find('\n'))).contains("wall_time"));
    std::filesystem::remove(path);
}

TEST_CASE("joint stages keep the starting parameters unless validation improves") {
    const auto& f = fixture();
    const auto parts = f.partitions(2);
    const auto pre = pretrained(parts);
    auto cfg = small_config(Protocol::semi_da_seg, 1);
    cfg.lr_seg = 10.0;
    MetricLog log;
    PretrainedNets p;
    p.seg = *pre.seg;
    p.reg = *pre.reg;
    const auto r = run_protocol(cfg, f.model, parts, std::move(p), log);
    const auto& first = log.records().front();
    REQUIRE(first.at("phase") == "val");
    CHECK(first.at("epoch") == -1);
    const Scalar initial = first.at("val_seg_dice").get<Scalar>();
    CHECK(r.best_val_seg >= initial);
    if (r.best_val_seg == initial) CHECK(r.seg->params().bitwise_equal(pre.seg->params()));
}
