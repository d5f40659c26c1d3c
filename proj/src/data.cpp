#include "deepatlas/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <stdexcept>

#include "deepatlas/imageops.hpp"
#include "deepatlas/npy.hpp"
#include "deepatlas/parallel.hpp"

namespace deepatlas {

void SyntheticSpec::validate() const {
    if (spatial_shape.empty() || spatial_shape.size() > 3) throw std::invalid_argument("spatial_shape needs 1-3 axes");
    for (auto e : spatial_shape) {
        if (e < 3) throw std::invalid_argument("spatial extents must be >= 3");
    }
    if (classes < 2 || classes > 6) throw std::invalid_argument("synthetic data supports 2 to 6 classes");
    if (count < 2) throw std::invalid_argument("dataset needs at least 2 images");
    if (control_points < 2) throw std::invalid_argument("control_points must be >= 2");
    for (Scalar v : {max_amplitude, intensity_noise_sd, intensity_jitter, bias_field_amplitude}) {
        if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("amplitudes must be finite and >= 0");
    }
}

nlohmann::json to_json(const SyntheticSpec& s) {
    return {{"spatial_shape", s.spatial_shape},
            {"classes", s.classes},
            {"count", s.count},
            {"control_points", s.control_points},
            {"max_amplitude", s.max_amplitude},
            {"intensity_noise_sd", s.intensity_noise_sd},
            {"intensity_jitter", s.intensity_jitter},
            {"bias_field_amplitude", s.bias_field_amplitude},
            {"seed", s.seed}};
}

SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
    static const std::array<const char*, 9> keys{"spatial_shape",      "classes",          "count",
                                                 "control_points",     "max_amplitude",    "intensity_noise_sd",
                                                 "intensity_jitter",   "bias_field_amplitude", "seed"};
    for (const auto& [k, v] : j.items()) {
        if (std::find_if(keys.begin(), keys.end(), [&](const char* name) { return k == name; }) == keys.end()) {
            throw std::invalid_argument("unknown synthetic spec key '" + k + "'");
        }
    }
    SyntheticSpec s;
    s.spatial_shape = j.value("spatial_shape", s.spatial_shape);
    s.classes = j.value("classes", s.classes);
    s.count = j.value("count", s.count);
    s.control_points = j.value("control_points", s.control_points);
    s.max_amplitude = j.value("max_amplitude", s.max_amplitude);
    s.intensity_noise_sd = j.value("intensity_noise_sd", s.intensity_noise_sd);
    s.intensity_jitter = j.value("intensity_jitter", s.intensity_jitter);
    s.bias_field_amplitude = j.value("bias_field_amplitude", s.bias_field_amplitude);
    s.seed = j.value("seed", s.seed);
    s.validate();
    return s;
}

namespace {

// Nested ellipsoids: structure k (1-based) lies inside structure k-1. The
// ring between structures 2 and 3 is thin, which makes it the hardest class
// to align.
struct Ellipsoid {
    std::array<Scalar, 3> centre;
    std::array<Scalar, 3> radius;
};

constexpr std::array<Ellipsoid, 5> kStructures{{
    {{0.00, 0.00, 0.00}, {0.72, 0.58, 0.64}},
    {{0.04, -0.03, 0.00}, {0.47, 0.41, 0.44}},
    {{0.06, -0.04, 0.00}, {0.36, 0.30, 0.33}},
    {{0.10, 0.00, 0.02}, {0.15, 0.12, 0.13}},
    {{0.10, 0.02, 0.02}, {0.06, 0.06, 0.06}},
}};

constexpr std::array<Scalar, 6> kClassIntensity{0.05, 0.35, 0.80, 0.55, 0.20, 0.65};

std::int64_t template_class(const std::array<Scalar, 3>& x, std::int64_t rank, std::int64_t classes) {
    std::int64_t cls = 0;
    for (std::int64_t k = 1; k < classes; ++k) {
        const auto& e = kStructures[k - 1];
        Scalar r2 = 0;
        for (std::int64_t a = 0; a < rank; ++a) {
            const Scalar t = (x[a] - e.centre[a]) / e.radius[a];
            r2 += t * t;
        }
        if (r2 <= 1.0) {
            cls = k;
        } else {
            break;
        }
    }
    return cls;
}

// Multilinear interpolation of a control lattice (points per axis, values
// laid out C-order) at normalized coordinate x.
Scalar lattice_value(const std::vector<Scalar>& lattice, std::int64_t points, std::int64_t rank,
                     const std::array<Scalar, 3>& x) {
    std::array<std::int64_t, 3> lo{0, 0, 0};
    std::array<Scalar, 3> f{0, 0, 0};
    for (std::int64_t a = 0; a < rank; ++a) {
        const Scalar p = std::clamp((x[a] + 1.0) * 0.5 * static_cast<Scalar>(points - 1), 0.0,
                                    static_cast<Scalar>(points - 1));
        lo[a] = std::min(static_cast<std::int64_t>(std::floor(p)), points - 2);
        f[a] = p - static_cast<Scalar>(lo[a]);
    }
    Scalar value = 0;
    for (int corner = 0; corner < (1 << rank); ++corner) {
        Scalar w = 1;
        std::int64_t idx = 0;
        for (std::int64_t a = 0; a < rank; ++a) {
            const bool hi = (corner >> (rank - 1 - a)) & 1;
            w *= hi ? f[a] : 1.0 - f[a];
            idx = idx * points + lo[a] + (hi ? 1 : 0);
        }
        value += w * lattice[idx];
    }
    return value;
}

// Normalized coordinate of every voxel, one array per voxel.
std::vector<std::array<Scalar, 3>> voxel_coordinates(const Shape& spatial) {
    const Tensor grid = identity_grid(spatial);
    const auto rank = static_cast<std::int64_t>(spatial.size());
    const auto n = numel(spatial);
    std::vector<std::array<Scalar, 3>> coords(static_cast<std::size_t>(n), {0, 0, 0});
    for (std::int64_t a = 0; a < rank; ++a) {
        for (std::int64_t v = 0; v < n; ++v) coords[v][a] = grid[a * n + v];
    }
    return coords;
}

Shape batched(const Shape& spatial, std::int64_t channels) {
    Shape s{1, channels};
    s.insert(s.end(), spatial.begin(), spatial.end());
    return s;
}

Tensor random_field(const SyntheticSpec& spec, Scalar amplitude, std::mt19937_64& rng,
                    const std::vector<std::array<Scalar, 3>>& coords) {
    const auto rank = static_cast<std::int64_t>(spec.spatial_shape.size());
    const auto points = spec.control_points;
    std::int64_t lattice_size = 1;
    for (std::int64_t a = 0; a < rank; ++a) lattice_size *= points;
    std::uniform_real_distribution<Scalar> dist(-1.0, 1.0);
    const auto n = static_cast<std::int64_t>(coords.size());
    std::vector<Scalar> u(static_cast<std::size_t>(rank * n));
    for (std::int64_t c = 0; c < rank; ++c) {
        std::vector<Scalar> lattice(static_cast<std::size_t>(lattice_size));
        for (auto& v : lattice) v = amplitude * dist(rng);
        for (std::int64_t v = 0; v < n; ++v) u[c * n + v] = lattice_value(lattice, points, rank, coords[v]);
    }
    return Tensor(batched(spec.spatial_shape, rank), std::move(u));
}

bool folds(const Tensor& field) {
    const Tensor det = jacobian_determinant(DisplacementField(field));
    return std::any_of(det.data().begin(), det.data().end(), [](Scalar v) { return !(v > 0.0); });
}

Sample generate_sample(const SyntheticSpec& spec, std::int64_t index,
                       const std::vector<std::array<Scalar, 3>>& coords) {
    std::seed_seq seq{static_cast<std::uint64_t>(spec.seed), static_cast<std::uint64_t>(index)};
    std::mt19937_64 rng(seq);
    const auto rank = static_cast<std::int64_t>(spec.spatial_shape.size());
    const auto n = static_cast<std::int64_t>(coords.size());

    Tensor field;
    Scalar amplitude = spec.max_amplitude;
    for (int attempt = 0;; ++attempt) {
        if (attempt == 10) {
            throw std::runtime_error("synthetic field generation kept folding; reduce max_amplitude");
        }
        field = random_field(spec, amplitude, rng, coords);
        if (!folds(field)) break;
        amplitude *= 0.5;
    }

    LabelMap labels{spec.spatial_shape, std::vector<std::uint8_t>(static_cast<std::size_t>(n))};
    for (std::int64_t v = 0; v < n; ++v) {
        std::array<Scalar, 3> x = coords[v];
        for (std::int64_t a = 0; a < rank; ++a) x[a] += field[a * n + v];
        labels.values[v] = static_cast<std::uint8_t>(template_class(x, rank, spec.classes));
    }

    std::uniform_real_distribution<Scalar> unit(-1.0, 1.0);
    std::vector<Scalar> level(kClassIntensity.begin(), kClassIntensity.begin() + spec.classes);
    for (auto& l : level) l += spec.intensity_jitter * unit(rng);
    std::int64_t lattice_size = 1;
    for (std::int64_t a = 0; a < rank; ++a) lattice_size *= 3;
    std::vector<Scalar> bias(static_cast<std::size_t>(lattice_size));
    for (auto& b : bias) b = spec.bias_field_amplitude * unit(rng);
    std::normal_distribution<Scalar> noise(0.0, 1.0);
    std::vector<Scalar> intensity(static_cast<std::size_t>(n));
    for (std::int64_t v = 0; v < n; ++v) {
        Scalar value = level[labels.values[v]];
        if (spec.bias_field_amplitude > 0) value *= 1.0 + lattice_value(bias, 3, rank, coords[v]);
        if (spec.intensity_noise_sd > 0) value += spec.intensity_noise_sd * noise(rng);
        intensity[v] = std::clamp(value, 0.0, 1.0);
    }

    char id[32];
    std::snprintf(id, sizeof id, "img%04lld", static_cast<long long>(index));
    return Sample{id, Tensor(batched(spec.spatial_shape, 1), std::move(intensity)), std::move(labels), field};
}

}  // namespace

std::vector<Scalar> class_intensities(std::int64_t classes) {
    if (classes < 1 || classes > static_cast<std::int64_t>(kClassIntensity.size())) {
        throw std::invalid_argument("unsupported class count");
    }
    return {kClassIntensity.begin(), kClassIntensity.begin() + classes};
}

LabelMap template_labels(const SyntheticSpec& spec) {
    spec.validate();
    const auto coords = voxel_coordinates(spec.spatial_shape);
    const auto rank = static_cast<std::int64_t>(spec.spatial_shape.size());
    LabelMap m{spec.spatial_shape, std::vector<std::uint8_t>(coords.size())};
    for (std::size_t v = 0; v < coords.size(); ++v) {
        m.values[v] = static_cast<std::uint8_t>(template_class(coords[v], rank, spec.classes));
    }
    return m;
}

Tensor template_intensity(const SyntheticSpec& spec) {
    const LabelMap m = template_labels(spec);
    const auto levels = class_intensities(spec.classes);
    std::vector<Scalar> out(m.values.size());
    for (std::size_t v = 0; v < out.size(); ++v) out[v] = levels[m.values[v]];
    return Tensor(batched(spec.spatial_shape, 1), std::move(out));
}

Dataset generate_dataset(const SyntheticSpec& spec) {
    spec.validate();
    const auto coords = voxel_coordinates(spec.spatial_shape);
    Dataset ds{spec, std::vector<Sample>(static_cast<std::size_t>(spec.count))};
    parallel_for(ds.samples.size(),
                 [&](std::size_t i) { ds.samples[i] = generate_sample(spec, static_cast<std::int64_t>(i), coords); });
    return ds;
}

LabeledImage::LabeledImage(std::string id, Tensor intensity, std::optional<LabelMap> labels,
                           std::optional<LabelMap> hidden_reference)
    : id_(std::move(id)),
      intensity_(std::move(intensity)),
      labels_(std::move(labels)),
      hidden_(std::move(hidden_reference)),
      hidden_reads_(std::make_shared<std::atomic<std::int64_t>>(0)) {
    if (labels_ && hidden_) throw std::invalid_argument("a labeled image has no hidden reference");
    for (auto v : intensity_.data()) {
        if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("intensities must be finite and in [0, 1]");
    }
}

const LabelMap& LabeledImage::labels() const {
    if (!labels_) throw std::logic_error("image " + id_ + " has no manual segmentation");
    return *labels_;
}

const LabelMap& LabeledImage::reference_labels() const {
    if (labels_) return *labels_;
    if (!hidden_) throw std::logic_error("image " + id_ + " has no reference segmentation");
    ++*hidden_reads_;
    return *hidden_;
}

Split split_dataset(const Dataset& dataset, SplitSizes sizes, std::int64_t n_labeled, std::uint64_t seed) {
    const auto total = static_cast<std::int64_t>(dataset.samples.size());
    if (sizes.train < 2 || sizes.val < 0 || sizes.test < 0 || sizes.train + sizes.val + sizes.test > total) {
        throw std::invalid_argument("split sizes do not fit a dataset of " + std::to_string(total));
    }
    if (n_labeled < 0 || n_labeled > sizes.train) throw std::invalid_argument("n_labeled out of range");
    Split s;
    s.seed = seed;
    for (std::int64_t i = 0; i < sizes.train; ++i) s.train.push_back(i);
    for (std::int64_t i = 0; i < sizes.val; ++i) s.val.push_back(sizes.train + i);
    for (std::int64_t i = 0; i < sizes.test; ++i) s.test.push_back(sizes.train + sizes.val + i);
    std::vector<std::int64_t> order = s.train;
    std::mt19937_64 rng(seed);
    // Partial Fisher-Yates with an explicit modulo draw keeps the selection
    // independent of the standard library's distribution implementation.
    for (std::int64_t i = 0; i < n_labeled; ++i) {
        const auto j = i + static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(sizes.train - i));
        std::swap(order[i], order[j]);
    }
    s.labeled.assign(order.begin(), order.begin() + n_labeled);
    std::sort(s.labeled.begin(), s.labeled.end());
    return s;
}

std::int64_t Partitions::labeled_count() const {
    return std::count_if(train.begin(), train.end(), [](const LabeledImage& im) { return im.is_labeled(); });
}

std::int64_t Partitions::hidden_reads() const {
    std::int64_t n = 0;
    for (const auto& im : train) n += im.hidden_reads();
    return n;
}

Partitions make_partitions(const Dataset& dataset, const Split& split) {
    Partitions p;
    auto at = [&](std::int64_t i) -> const Sample& {
        if (i < 0 || i >= static_cast<std::int64_t>(dataset.samples.size())) {
            throw std::out_of_range("split index out of range");
        }
        return dataset.samples[i];
    };
    for (auto i : split.train) {
        const Sample& s = at(i);
        const bool visible = std::find(split.labeled.begin(), split.labeled.end(), i) != split.labeled.end();
        if (visible) {
            p.train.emplace_back(s.id, s.intensity, s.labels);
        } else {
            p.train.emplace_back(s.id, s.intensity, std::nullopt, s.labels);
        }
    }
    for (auto i : split.val) p.val.emplace_back(at(i).id, at(i).intensity, at(i).labels);
    for (auto i : split.test) p.test.emplace_back(at(i).id, at(i).intensity, at(i).labels);
    return p;
}

nlohmann::json to_json(const Split& s) {
    return {{"train", s.train}, {"val", s.val}, {"test", s.test}, {"labeled", s.labeled}, {"seed", s.seed}};
}

Split split_from_json(const nlohmann::json& j) {
    Split s;
    s.train = j.at("train").get<std::vector<std::int64_t>>();
    s.val = j.at("val").get<std::vector<std::int64_t>>();
    s.test = j.at("test").get<std::vector<std::int64_t>>();
    s.labeled = j.at("labeled").get<std::vector<std::int64_t>>();
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& dataset, const std::optional<Split>& split) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    nlohmann::json manifest;
    manifest["format"] = "deepatlas-dataset-1";
    manifest["spec"] = to_json(dataset.spec);
    manifest["ids"] = nlohmann::json::array();
    for (const auto& s : dataset.samples) {
        manifest["ids"].push_back(s.id);
        save_npy(dir / (s.id + ".image.npy"), s.intensity);
        save_npy(dir / (s.id + ".labels.npy"), s.labels);
        save_npy(dir / (s.id + ".field.npy"), s.field);
    }
    if (split) {
        manifest["split"] = to_json(*split);
        std::vector<bool> mask(dataset.samples.size(), false);
        for (auto i : split->labeled) mask[static_cast<std::size_t>(i)] = true;
        manifest["label_mask"] = mask;
    }
    write_file(dir / "manifest.json", manifest.dump(2));
}

namespace {
nlohmann::json read_manifest(const std::filesystem::path& dir) {
    try {
        auto m = nlohmann::json::parse(read_file(dir / "manifest.json"));
        if (m.at("format") != "deepatlas-dataset-1") throw IoError("unknown dataset format in " + dir.string());
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed dataset manifest in " + dir.string() + ": " + e.what());
    }
}
}  // namespace

Dataset load_dataset(const std::filesystem::path& dir) {
    const auto manifest = read_manifest(dir);
    Dataset ds;
    ds.spec = synthetic_spec_from_json(manifest.at("spec"));
    for (const auto& id_json : manifest.at("ids")) {
        const auto id = id_json.get<std::string>();
        Sample s;
        s.id = id;
        s.intensity = load_npy_tensor(dir / (id + ".image.npy"));
        s.labels = load_npy_labels(dir / (id + ".labels.npy"));
        s.field = load_npy_tensor(dir / (id + ".field.npy"));
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

std::optional<Split> load_split(const std::filesystem::path& dir) {
    const auto manifest = read_manifest(dir);
    if (!manifest.contains("split")) return std::nullopt;
    return split_from_json(manifest.at("split"));
}

}  // namespace deepatlas
