#include "deepatlas/nets.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

#include "deepatlas/ops.hpp"

namespace deepatlas {

Tensor& ParameterSet::add(std::string name, Tensor value) {
    if (contains(name)) throw std::invalid_argument("duplicate parameter " + name);
    entries_.emplace_back(std::move(name), std::move(value));
    return entries_.back().second;
}

const Tensor& ParameterSet::at(const std::string& name) const {
    for (const auto& [n, t] : entries_) {
        if (n == name) return t;
    }
    throw std::out_of_range("no parameter named " + name);
}

Tensor& ParameterSet::at(const std::string& name) {
    return const_cast<Tensor&>(static_cast<const ParameterSet&>(*this).at(name));
}

bool ParameterSet::contains(const std::string& name) const {
    return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == name; });
}

std::int64_t ParameterSet::count() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
}

void ParameterSet::zero_grad() {
    for (auto& [name, t] : entries_) t.zero_grad();
}

ParameterSet::ParameterSet(const ParameterSet& other) {
    entries_.reserve(other.entries_.size());
    for (const auto& [name, t] : other.entries_) entries_.emplace_back(name, t.clone());
}

ParameterSet& ParameterSet::operator=(const ParameterSet& other) {
    if (this != &other) *this = ParameterSet(other);
    return *this;
}

void ParameterSet::assign(const ParameterSet& other) {
    if (other.size() != size()) throw std::invalid_argument("parameter sets differ in size");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        auto& [name, t] = entries_[i];
        const auto& [oname, ot] = other.entries_[i];
        if (name != oname || t.shape() != ot.shape()) {
            throw std::invalid_argument("parameter mismatch at " + name);
        }
        std::copy(ot.data().begin(), ot.data().end(), t.mutable_data().begin());
    }
}

bool ParameterSet::bitwise_equal(const ParameterSet& other) const {
    if (other.size() != size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        const auto& [name, t] = entries_[i];
        const auto& [oname, ot] = other.entries_[i];
        if (name != oname || t.shape() != ot.shape()) return false;
        if (std::memcmp(t.data().data(), ot.data().data(), sizeof(Scalar) * t.data().size()) != 0) return false;
    }
    return true;
}

void NetConfig::validate() const {
    if (spatial_rank < 1 || spatial_rank > 3) throw std::invalid_argument("spatial_rank must be 1, 2 or 3");
    if (depth < 1) throw std::invalid_argument("depth must be >= 1");
    if (width < 1) throw std::invalid_argument("width must be >= 1");
    if (classes < 2 || classes > 255) throw std::invalid_argument("classes must be in [2, 255]");
    if (kernel < 1 || kernel % 2 == 0) throw std::invalid_argument("kernel must be odd");
    if (!(leaky_slope >= 0.0)) throw std::invalid_argument("leaky_slope must be >= 0");
}

namespace {

// Builds conv layers with fan-in scaled uniform weights and zero biases.
class LayerFactory {
public:
    LayerFactory(ParameterSet& params, const NetConfig& config, std::uint64_t seed, bool materialize)
        : params_(params), config_(config), rng_(seed), materialize_(materialize) {}

    void conv(const std::string& name, std::int64_t in, std::int64_t out, std::int64_t k, bool zero = false) {
        Shape wshape{out, in};
        for (std::int64_t i = 0; i < config_.spatial_rank; ++i) wshape.push_back(k);
        count_ += numel(wshape) + out;
        if (!materialize_) return;
        std::vector<Scalar> w(static_cast<std::size_t>(numel(wshape)), 0.0);
        if (!zero) {
            const auto fan_in = static_cast<Scalar>(numel(wshape) / out);
            const Scalar gain = std::sqrt(2.0 / (1.0 + config_.leaky_slope * config_.leaky_slope));
            const Scalar bound = gain * std::sqrt(3.0 / fan_in);
            std::uniform_real_distribution<Scalar> dist(-bound, bound);
            for (auto& v : w) v = dist(rng_);
        }
        params_.add(name + ".weight", Tensor(wshape, std::move(w), true));
        params_.add(name + ".bias", Tensor::zeros({out}, true));
    }

    std::int64_t count() const { return count_; }

private:
    ParameterSet& params_;
    const NetConfig& config_;
    std::mt19937_64 rng_;
    bool materialize_;
    std::int64_t count_ = 0;
};

std::int64_t seg_channels(const NetConfig& c, std::int64_t level) { return c.width << level; }

// Registration encoder: full-resolution features, then 2W per level.
std::int64_t reg_channels(const NetConfig& c, std::int64_t level) { return level == 0 ? c.width : 2 * c.width; }

std::int64_t build_segmentation(ParameterSet& params, const NetConfig& c, std::uint64_t seed, bool materialize) {
    LayerFactory f(params, c, seed, materialize);
    std::int64_t in = 1;
    for (std::int64_t l = 0; l < c.depth; ++l) {
        const auto ch = seg_channels(c, l);
        f.conv("enc" + std::to_string(l) + ".conv0", in, ch, c.kernel);
        f.conv("enc" + std::to_string(l) + ".conv1", ch, ch, c.kernel);
        in = ch;
    }
    const auto bottom = seg_channels(c, c.depth);
    f.conv("bottleneck.conv0", in, bottom, c.kernel);
    f.conv("bottleneck.conv1", bottom, bottom, c.kernel);
    in = bottom;
    for (std::int64_t l = c.depth - 1; l >= 0; --l) {
        const auto ch = seg_channels(c, l);
        f.conv("dec" + std::to_string(l) + ".conv0", in + ch, ch, c.kernel);
        f.conv("dec" + std::to_string(l) + ".conv1", ch, ch, c.kernel);
        in = ch;
    }
    f.conv("head", in, c.classes, 1, /*zero=*/true);
    return f.count();
}

std::int64_t build_registration(ParameterSet& params, const NetConfig& c, std::uint64_t seed, bool materialize) {
    LayerFactory f(params, c, seed, materialize);
    f.conv("enc0", 2, reg_channels(c, 0), c.kernel);
    for (std::int64_t l = 1; l <= c.depth; ++l) {
        f.conv("enc" + std::to_string(l), reg_channels(c, l - 1), reg_channels(c, l), c.kernel);
    }
    std::int64_t in = reg_channels(c, c.depth);
    for (std::int64_t l = c.depth - 1; l >= 0; --l) {
        const auto out = 2 * c.width;
        f.conv("dec" + std::to_string(l), in, out, c.kernel);
        in = out + reg_channels(c, l);
    }
    f.conv("refine0", in, c.width, c.kernel);
    f.conv("refine1", c.width, c.width, c.kernel);
    f.conv("flow", c.width, c.spatial_rank, c.kernel, /*zero=*/true);
    return f.count();
}

void check_spatial(const Tensor& image, const NetConfig& c, const char* who) {
    if (image.rank() != c.spatial_rank + 2) {
        throw ShapeError(std::string(who) + ": expected " + std::to_string(c.spatial_rank) +
                         " spatial axes, got " + to_string(image.shape()));
    }
    const auto factor = std::int64_t{1} << c.depth;
    for (std::int64_t a = 0; a < c.spatial_rank; ++a) {
        if (image.dim(2 + a) % factor != 0) {
            throw ShapeError(std::string(who) + ": spatial extents must be divisible by " + std::to_string(factor) +
                             ", got " + to_string(image.shape()));
        }
    }
}

void check_params(const ParameterSet& params, std::int64_t expected, const char* who) {
    if (params.count() != expected) {
        throw std::invalid_argument(std::string(who) + ": parameter set does not match configuration");
    }
}

Tensor conv_layer(const ParameterSet& p, const std::string& name, const Tensor& x, std::int64_t stride,
                  std::int64_t padding) {
    return conv(x, p.at(name + ".weight"), p.at(name + ".bias"), {stride, padding});
}

std::string describe_params(const char* title, const NetConfig& c, const ParameterSet& p) {
    std::ostringstream os;
    os << title << " (rank " << c.spatial_rank << ", depth " << c.depth << ", width " << c.width;
    if (std::string(title) == "SegmentationNet") os << ", classes " << c.classes;
    os << ")\n";
    for (const auto& [name, t] : p.entries()) os << "  " << name << ' ' << to_string(t.shape()) << '\n';
    os << "  total parameters: " << p.count() << '\n';
    return os.str();
}

}  // namespace

std::int64_t segmentation_parameter_count(const NetConfig& config) {
    ParameterSet unused;
    return build_segmentation(unused, config, 0, false);
}

std::int64_t registration_parameter_count(const NetConfig& config) {
    ParameterSet unused;
    return build_registration(unused, config, 0, false);
}

SegmentationNet::SegmentationNet(NetConfig config, std::uint64_t seed) : config_(config) {
    config_.validate();
    build_segmentation(params_, config_, seed, true);
}

SegmentationNet::SegmentationNet(NetConfig config, ParameterSet params)
    : config_(config), params_(std::move(params)) {
    config_.validate();
    check_params(params_, segmentation_parameter_count(config_), "SegmentationNet");
}

Tensor SegmentationNet::forward(const Tensor& image) const {
    check_spatial(image, config_, "SegmentationNet");
    if (image.dim(1) != 1) throw ShapeError("SegmentationNet expects single-channel images");
    const auto pad = config_.kernel / 2;
    const auto slope = config_.leaky_slope;
    auto block = [&](const std::string& name, const Tensor& x) {
        Tensor y = leaky_relu(conv_layer(params_, name + ".conv0", x, 1, pad), slope);
        return leaky_relu(conv_layer(params_, name + ".conv1", y, 1, pad), slope);
    };
    std::vector<Tensor> skips;
    Tensor x = image;
    for (std::int64_t l = 0; l < config_.depth; ++l) {
        x = block("enc" + std::to_string(l), x);
        skips.push_back(x);
        x = max_pool(x, 2, 2);
    }
    x = block("bottleneck", x);
    for (std::int64_t l = config_.depth - 1; l >= 0; --l) {
        x = concat({upsample_nearest(x, 2), skips[l]}, 1);
        x = block("dec" + std::to_string(l), x);
    }
    return softmax(conv_layer(params_, "head", x, 1, 0), 1);
}

std::string SegmentationNet::describe() const { return describe_params("SegmentationNet", config_, params_); }

RegistrationNet::RegistrationNet(NetConfig config, std::uint64_t seed) : config_(config) {
    config_.validate();
    build_registration(params_, config_, seed, true);
}

RegistrationNet::RegistrationNet(NetConfig config, ParameterSet params)
    : config_(config), params_(std::move(params)) {
    config_.validate();
    check_params(params_, registration_parameter_count(config_), "RegistrationNet");
}

DisplacementField RegistrationNet::forward(const Tensor& moving, const Tensor& target) const {
    if (moving.shape() != target.shape()) {
        throw ShapeError("RegistrationNet: moving " + to_string(moving.shape()) + " and target " +
                         to_string(target.shape()) + " differ");
    }
    check_spatial(moving, config_, "RegistrationNet");
    if (moving.dim(1) != 1) throw ShapeError("RegistrationNet expects single-channel images");
    const auto pad = config_.kernel / 2;
    const auto slope = config_.leaky_slope;
    std::vector<Tensor> skips;
    Tensor x = leaky_relu(conv_layer(params_, "enc0", concat({moving, target}, 1), 1, pad), slope);
    skips.push_back(x);
    for (std::int64_t l = 1; l <= config_.depth; ++l) {
        x = leaky_relu(conv_layer(params_, "enc" + std::to_string(l), x, 2, pad), slope);
        skips.push_back(x);
    }
    for (std::int64_t l = config_.depth - 1; l >= 0; --l) {
        x = leaky_relu(conv_layer(params_, "dec" + std::to_string(l), x, 1, pad), slope);
        x = concat({upsample_nearest(x, 2), skips[l]}, 1);
    }
    x = leaky_relu(conv_layer(params_, "refine0", x, 1, pad), slope);
    x = leaky_relu(conv_layer(params_, "refine1", x, 1, pad), slope);
    return DisplacementField(conv_layer(params_, "flow", x, 1, pad));
}

std::string RegistrationNet::describe() const { return describe_params("RegistrationNet", config_, params_); }

}  // namespace deepatlas
