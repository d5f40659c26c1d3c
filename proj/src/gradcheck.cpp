#include "deepatlas/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <random>

#include "deepatlas/imageops.hpp"
#include "deepatlas/labels.hpp"
#include "deepatlas/losses.hpp"
#include "deepatlas/nets.hpp"
#include "deepatlas/ops.hpp"

namespace deepatlas {

Scalar gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f, const std::vector<Tensor>& inputs,
                 std::uint64_t probe_seed, const GradcheckOptions& options) {
    return gradcheck_detailed(f, inputs, probe_seed, options).worst;
}

GradcheckResult gradcheck_detailed(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                                   const std::vector<Tensor>& inputs, std::uint64_t probe_seed,
                                   const GradcheckOptions& options) {
    for (const auto& t : inputs) {
        if (!t.requires_grad()) throw std::invalid_argument("gradcheck inputs must require gradients");
    }
    std::vector<Tensor> work = inputs;
    for (auto& t : work) t.zero_grad();
    {
        GradientTape tape;
        const Tensor loss = f(work);
        tape.backward(loss);
    }
    std::mt19937_64 rng(probe_seed);
    GradcheckResult result;
    NoGradGuard no_grad;
    for (auto& t : work) {
        std::vector<Scalar> analytic(static_cast<std::size_t>(t.numel()), 0.0);
        if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
        std::vector<std::int64_t> probes(static_cast<std::size_t>(t.numel()));
        std::iota(probes.begin(), probes.end(), 0);
        if (static_cast<std::int64_t>(probes.size()) > options.max_probes) {
            std::shuffle(probes.begin(), probes.end(), rng);
            probes.resize(static_cast<std::size_t>(options.max_probes));
        }
        auto data = t.mutable_data();
        for (auto i : probes) {
            const Scalar saved = data[i];
            const Scalar centre = f(work).item();
            data[i] = saved + options.step;
            const Scalar up = f(work).item();
            data[i] = saved - options.step;
            const Scalar down = f(work).item();
            data[i] = saved;
            const Scalar a = analytic[static_cast<std::size_t>(i)];
            result.largest_gradient = std::max({result.largest_gradient, std::abs(a),
                                                std::abs((up - down) / (2.0 * options.step))});
            // At a kink (ReLU, pooling tie, interpolation cell edge) the tape
            // returns one of the one-sided derivatives.
            Scalar error = std::numeric_limits<Scalar>::infinity();
            for (Scalar numeric : {(up - down) / (2.0 * options.step), (up - centre) / options.step,
                                   (centre - down) / options.step}) {
                const Scalar denom = std::max({std::abs(a), std::abs(numeric), options.floor});
                error = std::min(error, std::abs(a - numeric) / denom);
            }
            result.worst = std::max(result.worst, error);
        }
        t.zero_grad();
    }
    return result;
}

namespace {

using Inputs = std::vector<Tensor>;
using Fn = std::function<Tensor(const Inputs&)>;

class Instance {
public:
    explicit Instance(std::uint64_t seed) : rng_(seed) {}

    Tensor uniform(Shape shape, Scalar lo, Scalar hi, bool grad = true) {
        std::uniform_real_distribution<Scalar> d(lo, hi);
        std::vector<Scalar> v(static_cast<std::size_t>(numel(shape)));
        for (auto& x : v) x = d(rng_);
        return Tensor(std::move(shape), std::move(v), grad);
    }
    // Values bounded away from zero, for ops with a kink or pole at 0.
    Tensor away_from_zero(Shape shape, Scalar lo, Scalar hi) {
        Tensor t = uniform(std::move(shape), lo, hi);
        std::bernoulli_distribution sign(0.5);
        for (auto& x : t.mutable_data()) x = sign(rng_) ? x : -x;
        return t;
    }
    LabelMap labels(const Shape& spatial, std::int64_t classes) {
        std::uniform_int_distribution<int> d(0, static_cast<int>(classes - 1));
        LabelMap m{spatial, std::vector<std::uint8_t>(static_cast<std::size_t>(numel(spatial)))};
        for (auto& v : m.values) v = static_cast<std::uint8_t>(d(rng_));
        return m;
    }
    std::int64_t integer(std::int64_t lo, std::int64_t hi) {
        return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng_);
    }
    std::mt19937_64& rng() { return rng_; }

private:
    std::mt19937_64 rng_;
};

// Reduces any op output to a scalar with fixed random weights so every
// output element contributes a distinct gradient.
Tensor project(const Tensor& out, const Tensor& weights) { return sum(mul(out, weights)); }

struct Case {
    std::string name;
    // Builds inputs and the checked function for one random instance.
    std::function<std::pair<Inputs, Fn>(Instance&)> make;
    // Networks stack many kinks; a shorter step crosses fewer of them.
    Scalar step = GradcheckOptions{}.step;
};

Shape with_batch(std::int64_t n, std::int64_t c, const Shape& spatial) {
    Shape s{n, c};
    s.insert(s.end(), spatial.begin(), spatial.end());
    return s;
}

std::pair<Inputs, Fn> unary(Instance& in, Tensor x, Tensor (*op)(const Tensor&)) {
    const Tensor w = in.uniform(x.shape(), -1, 1, false);
    return {{x}, [w, op](const Inputs& v) { return project(op(v[0]), w); }};
}

std::vector<Case> cases() {
    std::vector<Case> c;
    auto binary = [](std::string name, Tensor (*op)(const Tensor&, const Tensor&), bool positive_rhs) {
        return Case{std::move(name), [op, positive_rhs](Instance& in) -> std::pair<Inputs, Fn> {
                        // Second operand broadcasts along a singleton axis.
                        Tensor a = in.uniform({2, 3, 4}, -1, 1);
                        Tensor b = positive_rhs ? in.uniform({2, 1, 4}, 0.5, 2.0) : in.uniform({2, 1, 4}, -1, 1);
                        const Tensor w = in.uniform({2, 3, 4}, -1, 1, false);
                        return {{a, b}, [w, op](const Inputs& v) { return project(op(v[0], v[1]), w); }};
                    }};
    };
    c.push_back(binary("add", add, false));
    c.push_back(binary("sub", sub, false));
    c.push_back(binary("mul", mul, false));
    c.push_back(binary("div", div, true));
    c.push_back({"add_scalar", [](Instance& in) -> std::pair<Inputs, Fn> {
                     const Scalar s = in.uniform({1}, -2, 2, false).item();
                     const Tensor w = in.uniform({3, 4}, -1, 1, false);
                     return {{in.uniform({3, 4}, -1, 1)}, [w, s](const Inputs& v) { return project(add(v[0], s), w); }};
                 }});
    c.push_back({"mul_scalar", [](Instance& in) -> std::pair<Inputs, Fn> {
                     const Scalar s = in.uniform({1}, -2, 2, false).item();
                     const Tensor w = in.uniform({3, 4}, -1, 1, false);
                     return {{in.uniform({3, 4}, -1, 1)}, [w, s](const Inputs& v) { return project(mul(v[0], s), w); }};
                 }});
    c.push_back({"neg", [](Instance& in) { return unary(in, in.uniform({3, 5}, -1, 1), neg); }});
    c.push_back({"exp", [](Instance& in) { return unary(in, in.uniform({3, 5}, -2, 2), exp); }});
    c.push_back({"log", [](Instance& in) { return unary(in, in.uniform({3, 5}, 0.2, 3), log); }});
    c.push_back({"sqrt", [](Instance& in) { return unary(in, in.uniform({3, 5}, 0.2, 3), sqrt); }});
    c.push_back({"square", [](Instance& in) { return unary(in, in.uniform({3, 5}, -2, 2), square); }});
    c.push_back({"leaky_relu", [](Instance& in) -> std::pair<Inputs, Fn> {
                     const Tensor w = in.uniform({4, 6}, -1, 1, false);
                     return {{in.away_from_zero({4, 6}, 0.05, 1)},
                             [w](const Inputs& v) { return project(leaky_relu(v[0], 0.2), w); }};
                 }});
    c.push_back({"sum", [](Instance& in) -> std::pair<Inputs, Fn> {
                     const Tensor w = in.uniform({2, 1, 4}, -1, 1, false);
                     return {{in.uniform({2, 3, 4}, -1, 1)}, [w](const Inputs& v) {
                                 return add(project(sum(v[0], {1}, true), w), mul(sum(v[0]), 0.3));
                             }};
                 }});
    c.push_back({"mean", [](Instance& in) -> std::pair<Inputs, Fn> {
                     const Tensor w = in.uniform({3}, -1, 1, false);
                     return {{in.uniform({2, 3, 4}, -1, 1)}, [w](const Inputs& v) {
                                 return add(project(mean(v[0], {0, 2}), w), mean(v[0]));
                             }};
                 }});
    c.push_back({"max", [](Instance& in) -> std::pair<Inputs, Fn> {
                     const Tensor w = in.uniform({2, 4}, -1, 1, false);
                     return {{in.uniform({2, 3, 4}, -1, 1)}, [w](const Inputs& v) {
                                 return add(project(max(v[0], {1}), w), max(v[0]));
                             }};
                 }});
    c.push_back({"reshape", [](Instance& in) -> std::pair<Inputs, Fn> {
                     const Tensor w = in.uniform({6, 4}, -1, 1, false);
                     return {{in.uniform({2, 3, 4}, -1, 1)},
                             [w](const Inputs& v) { return project(reshape(v[0], {6, 4}), w); }};
                 }});
    c.push_back({"concat", [](Instance& in) -> std::pair<Inputs, Fn> {
                     const Tensor w = in.uniform({2, 5, 3}, -1, 1, false);
                     return {{in.uniform({2, 2, 3}, -1, 1), in.uniform({2, 3, 3}, -1, 1)},
                             [w](const Inputs& v) { return project(concat({v[0], v[1]}, 1), w); }};
                 }});
    c.push_back({"slice", [](Instance& in) -> std::pair<Inputs, Fn> {
                     const Tensor w = in.uniform({2, 2, 3}, -1, 1, false);
                     return {{in.uniform({3, 4, 5}, -1, 1)}, [w](const Inputs& v) {
                                 return add(project(slice(v[0], {1, 1, 2}, {2, 2, 3}), w), sum(narrow(v[0], 2, 1, 2)));
                             }};
                 }});
    c.push_back({"softmax", [](Instance& in) -> std::pair<Inputs, Fn> {
                     const Tensor w = in.uniform({2, 4, 3, 3}, -1, 1, false);
                     return {{in.uniform({2, 4, 3, 3}, -3, 3)},
                             [w](const Inputs& v) { return project(softmax(v[0], 1), w); }};
                 }});
    c.push_back({"conv", [](Instance& in) -> std::pair<Inputs, Fn> {
                     // Rank, stride and padding vary across instances.
                     const std::int64_t rank = in.integer(1, 3);
                     const ConvOptions opt{in.integer(1, 2), in.integer(0, 1)};
                     const std::int64_t extent = rank == 3 ? 5 : 7;
                     Shape spatial(static_cast<std::size_t>(rank), extent);
                     Shape kshape{3, 2};
                     for (std::int64_t i = 0; i < rank; ++i) kshape.push_back(3);
                     Tensor x = in.uniform(with_batch(2, 2, spatial), -1, 1);
                     Tensor k = in.uniform(kshape, -1, 1);
                     Tensor b = in.uniform({3}, -1, 1);
                     const Tensor probe = conv(x.detach(), k.detach(), b.detach(), opt);
                     const Tensor w = in.uniform(probe.shape(), -1, 1, false);
                     return {{x, k, b}, [w, opt](const Inputs& v) { return project(conv(v[0], v[1], v[2], opt), w); }};
                 }});
    c.push_back({"max_pool", [](Instance& in) -> std::pair<Inputs, Fn> {
                     const std::int64_t rank = in.integer(1, 3);
                     Shape spatial(static_cast<std::size_t>(rank), 4);
                     Tensor x = in.uniform(with_batch(1, 2, spatial), -1, 1);
                     const Tensor w = in.uniform(max_pool(x.detach(), 2, 2).shape(), -1, 1, false);
                     return {{x}, [w](const Inputs& v) { return project(max_pool(v[0], 2, 2), w); }};
                 }});
    c.push_back({"upsample_nearest", [](Instance& in) -> std::pair<Inputs, Fn> {
                     const std::int64_t rank = in.integer(1, 3);
                     Shape spatial(static_cast<std::size_t>(rank), 3);
                     Tensor x = in.uniform(with_batch(1, 2, spatial), -1, 1);
                     const Tensor w = in.uniform(upsample_nearest(x.detach(), 2).shape(), -1, 1, false);
                     return {{x}, [w](const Inputs& v) { return project(upsample_nearest(v[0], 2), w); }};
                 }});
    c.push_back({"warp", [](Instance& in) -> std::pair<Inputs, Fn> {
                     const std::int64_t rank = in.integer(1, 3);
                     Shape spatial(static_cast<std::size_t>(rank), rank == 3 ? 4 : 6);
                     Tensor image = in.uniform(with_batch(2, 2, spatial), 0, 1);
                     Tensor u = in.uniform(with_batch(2, rank, spatial), -0.4, 0.4);
                     const Tensor w = in.uniform(image.shape(), -1, 1, false);
                     return {{image, u}, [w](const Inputs& v) {
                                 return project(warp(v[0], DisplacementField(v[1])), w);
                             }};
                 }});
    c.push_back({"spatial_derivatives", [](Instance& in) -> std::pair<Inputs, Fn> {
                     const std::int64_t rank = in.integer(1, 3);
                     Shape spatial(static_cast<std::size_t>(rank), rank == 3 ? 4 : 5);
                     Tensor u = in.uniform(with_batch(1, rank, spatial), -0.5, 0.5);
                     const DisplacementField probe(u.detach());
                     const Tensor w1 = in.uniform(spatial_derivatives(probe, 1).shape(), -1, 1, false);
                     const Tensor w2 = in.uniform(spatial_derivatives(probe, 2).shape(), -1, 1, false);
                     return {{u}, [w1, w2](const Inputs& v) {
                                 const DisplacementField f(v[0]);
                                 return add(project(spatial_derivatives(f, 1), w1), project(spatial_derivatives(f, 2), w2));
                             }};
                 }});
    c.push_back({"ncc_loss", [](Instance& in) -> std::pair<Inputs, Fn> {
                     return {{in.uniform({2, 1, 5, 6}, 0, 1), in.uniform({2, 1, 5, 6}, 0, 1)},
                             [](const Inputs& v) { return ncc_loss(v[0], v[1]); }};
                 }});
    for (auto variant : {DiceVariant::conventional, DiceVariant::as_printed}) {
        c.push_back({variant == DiceVariant::conventional ? "soft_dice_loss" : "soft_dice_loss_as_printed",
                     [variant](Instance& in) -> std::pair<Inputs, Fn> {
                         return {{in.uniform({2, 3, 4, 4}, -2, 2), in.uniform({2, 3, 4, 4}, -2, 2)},
                                 [variant](const Inputs& v) {
                                     return soft_dice_loss(softmax(v[0], 1), softmax(v[1], 1), variant);
                                 }};
                     }});
    }
    c.push_back({"bending_energy", [](Instance& in) -> std::pair<Inputs, Fn> {
                     const std::int64_t rank = in.integer(1, 3);
                     Shape spatial(static_cast<std::size_t>(rank), rank == 3 ? 4 : 6);
                     return {{in.uniform(with_batch(2, rank, spatial), -0.5, 0.5)},
                             [](const Inputs& v) { return bending_energy(DisplacementField(v[0])); }};
                 }});
    c.push_back({"registration_objective", [](Instance& in) -> std::pair<Inputs, Fn> {
                     const LossWeights weights{in.uniform({1}, 0.01, 1, false).item(), in.uniform({1}, 0.5, 3, false).item(), 3};
                     Tensor moving = in.uniform({1, 1, 6, 6}, 0, 1);
                     Tensor target = in.uniform({1, 1, 6, 6}, 0, 1);
                     Tensor sm = in.uniform({1, 3, 6, 6}, -2, 2);
                     Tensor st = in.uniform({1, 3, 6, 6}, -2, 2);
                     Tensor u = in.uniform({1, 2, 6, 6}, -0.3, 0.3);
                     return {{moving, target, sm, st, u}, [weights](const Inputs& v) {
                                 return registration_objective(v[0], v[1], softmax(v[2], 1), softmax(v[3], 1),
                                                               DisplacementField(v[4]), weights)
                                     .total;
                             }};
                 }});
    c.push_back({"registration_objective_unlabeled", [](Instance& in) -> std::pair<Inputs, Fn> {
                     const LossWeights weights{in.uniform({1}, 0.01, 1, false).item(), 3, 3};
                     return {{in.uniform({1, 1, 6, 6}, 0, 1), in.uniform({1, 1, 6, 6}, 0, 1),
                              in.uniform({1, 2, 6, 6}, -0.3, 0.3)},
                             [weights](const Inputs& v) {
                                 return registration_objective(v[0], v[1], std::nullopt, std::nullopt,
                                                               DisplacementField(v[2]), weights)
                                     .total;
                             }};
                 }});
    const std::pair<const char*, PairLabeling> labelings[] = {{"segmentation_objective_target_unlabeled", {true, false}},
                                                              {"segmentation_objective_moving_unlabeled", {false, true}},
                                                              {"segmentation_objective_both_labeled", {true, true}},
                                                              {"segmentation_objective_both_unlabeled", {false, false}}};
    for (const auto& [name, labeling] : labelings) {
        c.push_back({name, [labeling](Instance& in) -> std::pair<Inputs, Fn> {
                         const Shape spatial{6, 6};
                         const Tensor sm = one_hot(in.labels(spatial, 3), 3);
                         const Tensor st = one_hot(in.labels(spatial, 3), 3);
                         const DisplacementField field(in.uniform({1, 2, 6, 6}, -0.3, 0.3, false));
                         const LossWeights weights{20000, in.uniform({1}, 0.5, 3, false).item(),
                                                   in.uniform({1}, 0.5, 3, false).item()};
                         return {{in.uniform({1, 3, 6, 6}, -2, 2), in.uniform({1, 3, 6, 6}, -2, 2)},
                                 [=](const Inputs& v) {
                                     SegmentationInputs si;
                                     if (labeling.moving_labeled) si.moving_manual = sm;
                                     if (labeling.target_labeled) si.target_manual = st;
                                     si.moving_pred = softmax(v[0], 1);
                                     si.target_pred = softmax(v[1], 1);
                                     return segmentation_objective(si, field, labeling, weights).total;
                                 }};
                     }});
    }
    c.push_back({"segmentation_net", [](Instance& in) -> std::pair<Inputs, Fn> {
                     NetConfig cfg{2, 2, 4, 3, 3, 0.2};
                     // Shared so the probed inputs are the network's own parameters.
                     auto net = std::make_shared<SegmentationNet>(cfg, in.rng()());
                     // Replace the zero head so every layer receives gradient.
                     for (auto& v : net->params().at("head.weight").mutable_data()) v = in.uniform({1}, -0.5, 0.5, false).item();
                     const Tensor image = in.uniform({1, 1, 8, 8}, 0, 1, false);
                     const Tensor truth = one_hot(in.labels({8, 8}, 3), 3);
                     Inputs params;
                     for (auto& [name, t] : net->params().entries()) params.push_back(t);
                     return {params, [net, image, truth](const Inputs&) {
                                 return soft_dice_loss(net->forward(image), truth);
                             }};
                 },
                 1e-6});
    c.push_back({"registration_net", [](Instance& in) -> std::pair<Inputs, Fn> {
                     NetConfig cfg{2, 2, 4, 3, 3, 0.2};
                     auto net = std::make_shared<RegistrationNet>(cfg, in.rng()());
                     // A zero head sits on interpolation kinks; move it off.
                     for (auto* name : {"flow.weight", "flow.bias"}) {
                         for (auto& v : net->params().at(name).mutable_data()) v = in.uniform({1}, -0.05, 0.05, false).item();
                     }
                     const Tensor moving = in.uniform({1, 1, 8, 8}, 0, 1, false);
                     const Tensor target = in.uniform({1, 1, 8, 8}, 0, 1, false);
                     Inputs params;
                     for (auto& [name, t] : net->params().entries()) params.push_back(t);
                     return {params, [net, moving, target](const Inputs&) {
                                 return registration_objective(moving, target, std::nullopt, std::nullopt,
                                                               net->forward(moving, target), LossWeights{0.1, 3, 3})
                                     .total;
                             }};
                 },
                 1e-6});
    return c;
}

}  // namespace

std::vector<GradcheckEntry> run_gradcheck_suite(std::uint64_t seed, std::int64_t instances) {
    std::vector<GradcheckEntry> out;
    const auto all = cases();
    for (std::size_t i = 0; i < all.size(); ++i) {
        GradcheckEntry e{all[i].name, instances};
        for (std::int64_t k = 0; k < instances; ++k) {
            std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(i),
                              static_cast<std::uint32_t>(k)};
            std::uint32_t s[2];
            seq.generate(s, s + 2);
            Instance inst((static_cast<std::uint64_t>(s[0]) << 32) | s[1]);
            auto [inputs, fn] = all[i].make(inst);
            GradcheckOptions options;
            options.step = all[i].step;
            const auto r = gradcheck_detailed(fn, inputs, s[1], options);
            e.worst = std::max(e.worst, r.worst);
            e.largest_gradient = std::max(e.largest_gradient, r.largest_gradient);
        }
        out.push_back(e);
    }
    return out;
}

}  // namespace deepatlas
