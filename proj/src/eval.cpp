#include "deepatlas/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "deepatlas/imageops.hpp"
#include "deepatlas/npy.hpp"
#include "deepatlas/parallel.hpp"

namespace deepatlas {

Tensor as_image_batch(const Tensor& image, std::int64_t spatial_rank) {
    const auto r = image.rank();
    if (r < spatial_rank || r > spatial_rank + 2) {
        throw ShapeError("image rank " + std::to_string(r) + " does not fit spatial rank " +
                         std::to_string(spatial_rank));
    }
    for (std::int64_t a = 0; a < r - spatial_rank; ++a) {
        if (image.dim(a) != 1) throw ShapeError("image must hold a single channel and batch entry");
    }
    Shape shape{1, 1};
    shape.insert(shape.end(), image.shape().end() - spatial_rank, image.shape().end());
    return Tensor(shape, std::vector<Scalar>(image.data().begin(), image.data().end()));
}

LabelMap segment_image(const SegmentationNet& net, const Tensor& image) {
    NoGradGuard no_grad;
    return argmax_labels(net.forward(as_image_batch(image, net.config().spatial_rank))).at(0);
}

RegistrationOutput register_pair(const RegistrationNet& net, const Tensor& moving, const Tensor& target) {
    NoGradGuard no_grad;
    const auto rank = net.config().spatial_rank;
    const Tensor m = as_image_batch(moving, rank);
    const auto field = net.forward(m, as_image_batch(target, rank));
    return {field.tensor().detach(), warp(m, field).detach()};
}

std::vector<Scalar> hard_dice(const LabelMap& pred, const LabelMap& truth, std::int64_t classes) {
    if (pred.shape != truth.shape || pred.values.size() != truth.values.size()) {
        throw ShapeError("label maps differ in shape: " + to_string(pred.shape) + " vs " + to_string(truth.shape));
    }
    if (classes < 1) throw std::invalid_argument("classes must be positive");
    std::vector<std::int64_t> p(static_cast<std::size_t>(classes), 0), t(p), both(p);
    for (std::size_t v = 0; v < pred.values.size(); ++v) {
        const auto a = pred.values[v];
        const auto b = truth.values[v];
        if (a >= classes || b >= classes) throw std::invalid_argument("label value exceeds class count");
        ++p[a];
        ++t[b];
        if (a == b) ++both[a];
    }
    std::vector<Scalar> dice(static_cast<std::size_t>(classes));
    for (std::size_t k = 0; k < dice.size(); ++k) {
        const auto denom = p[k] + t[k];
        dice[k] = denom == 0 ? 100.0 : 200.0 * static_cast<Scalar>(both[k]) / static_cast<Scalar>(denom);
    }
    return dice;
}

Scalar foreground_mean(std::span<const Scalar> per_class) {
    if (per_class.size() < 2) return per_class.empty() ? 0.0 : per_class[0];
    return std::accumulate(per_class.begin() + 1, per_class.end(), 0.0) / static_cast<Scalar>(per_class.size() - 1);
}

namespace {

std::pair<Scalar, Scalar> mean_sd(const std::vector<Scalar>& xs) {
    if (xs.empty()) return {0.0, 0.0};
    const Scalar m = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<Scalar>(xs.size());
    Scalar ss = 0;
    for (auto x : xs) ss += (x - m) * (x - m);
    return {m, std::sqrt(ss / static_cast<Scalar>(xs.size()))};
}

}  // namespace

void summarize(EvalReport& report) {
    const auto k = static_cast<std::size_t>(report.classes);
    report.class_mean.assign(k, 0.0);
    report.class_sd.assign(k, 0.0);
    for (std::size_t c = 0; c < k; ++c) {
        std::vector<Scalar> xs;
        for (const auto& it : report.items) xs.push_back(it.dice.at(c));
        std::tie(report.class_mean[c], report.class_sd[c]) = mean_sd(xs);
    }
    std::vector<Scalar> means, folds;
    for (const auto& it : report.items) {
        means.push_back(it.mean);
        folds.push_back(it.folding_fraction);
    }
    std::tie(report.mean, report.sd) = mean_sd(means);
    report.folding_fraction = mean_sd(folds).first;
    report.group_mean.clear();
    for (const auto& g : report.groups) {
        if (g.classes.empty()) throw std::invalid_argument("class group '" + g.name + "' is empty");
        Scalar s = 0;
        for (auto c : g.classes) {
            if (c < 0 || c >= report.classes) throw std::invalid_argument("class group '" + g.name + "' out of range");
            s += report.class_mean[static_cast<std::size_t>(c)];
        }
        report.group_mean.push_back(s / static_cast<Scalar>(g.classes.size()));
    }
}

Scalar folding_fraction(const DisplacementField& field) {
    const Tensor det = jacobian_determinant(field);
    const auto folded = std::count_if(det.data().begin(), det.data().end(), [](Scalar v) { return !(v > 0.0); });
    return static_cast<Scalar>(folded) / static_cast<Scalar>(det.numel());
}

EvalReport eval_segmentation(const SegmentationNet& net, std::span<const LabeledImage> images,
                             std::vector<ClassGroup> groups) {
    NoGradGuard no_grad;
    EvalReport report;
    report.mode = "seg";
    report.classes = net.config().classes;
    report.groups = std::move(groups);
    report.items.resize(images.size());
    parallel_for(images.size(), [&](std::size_t i) {
        const auto pred = argmax_labels(net.forward(images[i].intensity())).at(0);
        auto& item = report.items[i];
        item.id = images[i].id();
        item.dice = hard_dice(pred, images[i].reference_labels(), report.classes);
        item.mean = foreground_mean(item.dice);
    });
    summarize(report);
    return report;
}

EvalReport eval_registration(const RegistrationNet& net, std::span<const LabeledImage> images, std::int64_t classes,
                             std::vector<ClassGroup> groups) {
    NoGradGuard no_grad;
    EvalReport report;
    report.mode = "reg";
    report.classes = classes;
    report.groups = std::move(groups);
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t m = 0; m < images.size(); ++m) {
        for (std::size_t t = 0; t < images.size(); ++t) {
            if (m != t) pairs.emplace_back(m, t);
        }
    }
    report.items.resize(pairs.size());
    parallel_for(pairs.size(), [&](std::size_t i) {
        const auto& moving = images[pairs[i].first];
        const auto& target = images[pairs[i].second];
        const DisplacementField field = net.forward(moving.intensity(), target.intensity());
        const Tensor warped = warp(label_tensor(moving.reference_labels()), field, Interpolation::nearest);
        auto& item = report.items[i];
        item.id = moving.id() + "->" + target.id();
        item.dice = hard_dice(labels_from_tensor(warped), target.reference_labels(), classes);
        item.mean = foreground_mean(item.dice);
        item.folding_fraction = folding_fraction(field);
    });
    summarize(report);
    return report;
}

nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json groups = nlohmann::json::array();
    for (std::size_t g = 0; g < r.groups.size(); ++g) {
        groups.push_back({{"name", r.groups[g].name},
                          {"classes", r.groups[g].classes},
                          {"mean_dice", g < r.group_mean.size() ? r.group_mean[g] : 0.0}});
    }
    nlohmann::json j{{"mode", r.mode},
                     {"classes", r.classes},
                     {"count", r.items.size()},
                     {"per_class_dice", r.class_mean},
                     {"per_class_sd", r.class_sd},
                     {"mean_dice", r.mean},
                     {"sd_dice", r.sd},
                     {"groups", groups},
                     {"metadata", r.metadata}};
    if (r.mode == "reg") j["folding_fraction"] = r.folding_fraction;
    return j;
}

void write_report(const std::filesystem::path& dir, const EvalReport& report) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    write_file(dir / "report.json", to_json(report).dump(2) + "\n");
    std::ostringstream csv;
    csv.precision(17);
    csv << "id";
    for (std::int64_t k = 0; k < report.classes; ++k) csv << ",dice_" << k;
    csv << ",mean";
    if (report.mode == "reg") csv << ",folding_fraction";
    csv << '\n';
    for (const auto& it : report.items) {
        csv << it.id;
        for (auto d : it.dice) csv << ',' << d;
        csv << ',' << it.mean;
        if (report.mode == "reg") csv << ',' << it.folding_fraction;
        csv << '\n';
    }
    write_file(dir / "per_image.csv", csv.str());
}

namespace {

// Extracts the displayed 2-D plane: the full image for 2-D data, the middle
// slice along the first spatial axis for 3-D data, a one-row strip for 1-D.
std::vector<Scalar> display_plane(std::span<const Scalar> values, const Shape& spatial, std::int64_t& rows,
                                  std::int64_t& cols) {
    if (spatial.size() == 1) {
        rows = 1;
        cols = spatial[0];
        return {values.begin(), values.begin() + cols};
    }
    rows = spatial[spatial.size() - 2];
    cols = spatial.back();
    std::int64_t offset = 0;
    if (spatial.size() == 3) offset = (spatial[0] / 2) * rows * cols;
    return {values.begin() + offset, values.begin() + offset + rows * cols};
}

void write_pgm(const std::filesystem::path& path, const std::vector<int>& pixels, std::int64_t rows,
               std::int64_t cols) {
    std::ostringstream os;
    os << "P2\n" << cols << ' ' << rows << "\n255\n";
    for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t c = 0; c < cols; ++c) {
            if (c) os << ' ';
            os << pixels[static_cast<std::size_t>(r * cols + c)];
        }
        os << '\n';
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    write_file(path, os.str());
}

}  // namespace

void render_slice(const Tensor& image, const std::filesystem::path& path) {
    if (image.rank() < 1) throw ShapeError("cannot render a rank-0 tensor");
    // Leading singleton batch/channel axes are display-irrelevant.
    Shape spatial = image.shape();
    while (spatial.size() > 1 && spatial.front() == 1) spatial.erase(spatial.begin());
    if (spatial.size() > 3) throw ShapeError("render_slice expects at most 3 spatial axes, got " + to_string(image.shape()));
    std::int64_t rows = 0, cols = 0;
    const auto plane = display_plane(image.data(), spatial, rows, cols);
    const auto [lo, hi] = std::minmax_element(plane.begin(), plane.end());
    const Scalar range = *hi - *lo;
    std::vector<int> pixels(plane.size());
    for (std::size_t i = 0; i < plane.size(); ++i) {
        pixels[i] = range > 0 ? static_cast<int>(std::lround(255.0 * (plane[i] - *lo) / range)) : 0;
    }
    write_pgm(path, pixels, rows, cols);
}

void render_slice(const LabelMap& labels, const std::filesystem::path& path) {
    static constexpr int kGray[] = {0, 96, 255, 176, 48, 224, 128, 208};
    std::vector<Scalar> values(labels.values.begin(), labels.values.end());
    std::int64_t rows = 0, cols = 0;
    const auto plane = display_plane(values, labels.shape, rows, cols);
    std::vector<int> pixels(plane.size());
    for (std::size_t i = 0; i < plane.size(); ++i) pixels[i] = kGray[static_cast<int>(plane[i]) % 8];
    write_pgm(path, pixels, rows, cols);
}

}  // namespace deepatlas
