#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "deepatlas/imageops.hpp"
#include "deepatlas/tensor.hpp"

namespace deepatlas {

/// Ordered collection of named trainable tensors.
/// Named parameter tensors. Copies are deep, so copying a network never
/// aliases its parameters; moves transfer storage.
class ParameterSet {
public:
    ParameterSet() = default;
    ParameterSet(const ParameterSet& other);
    ParameterSet& operator=(const ParameterSet& other);
    ParameterSet(ParameterSet&&) noexcept = default;
    ParameterSet& operator=(ParameterSet&&) noexcept = default;

    Tensor& add(std::string name, Tensor value);
    const Tensor& at(const std::string& name) const;
    Tensor& at(const std::string& name);
    bool contains(const std::string& name) const;

    std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }
    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

    /// Total scalar count across all tensors.
    std::int64_t count() const;
    void zero_grad();
    ParameterSet clone() const { return *this; }
    /// Copies values from `other`, which must have the same names and shapes.
    void assign(const ParameterSet& other);
    bool bitwise_equal(const ParameterSet& other) const;

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
};

struct NetConfig {
    std::int64_t spatial_rank = 2;
    std::int64_t depth = 3;    // number of 2x downsamplings
    std::int64_t width = 16;   // channels at full resolution
    std::int64_t classes = 4;  // segmentation only
    std::int64_t kernel = 3;
    Scalar leaky_slope = 0.2;

    void validate() const;
    bool operator==(const NetConfig&) const = default;
};

/// Light U-Net: two 3x3 convolutions per level with LeakyReLU, max-pool
/// downsampling, nearest upsampling with skip concatenation, and a 1x1
/// convolution followed by a softmax over the K classes.
class SegmentationNet {
public:
    SegmentationNet(NetConfig config, std::uint64_t seed);
    SegmentationNet(NetConfig config, ParameterSet params);

    /// image [N, 1, spatial...] -> class probabilities [N, K, spatial...].
    /// Spatial extents must be divisible by 2^depth.
    Tensor forward(const Tensor& image) const;

    const NetConfig& config() const { return config_; }
    ParameterSet& params() { return params_; }
    const ParameterSet& params() const { return params_; }
    std::string describe() const;

private:
    NetConfig config_;
    ParameterSet params_;
};

/// Encoder-decoder over the channel-concatenated pair (moving, target) with
/// stride-2 convolutions in the encoder and skip connections in the decoder.
/// The displacement head starts at zero so a fresh network predicts u = 0.
class RegistrationNet {
public:
    RegistrationNet(NetConfig config, std::uint64_t seed);
    RegistrationNet(NetConfig config, ParameterSet params);

    DisplacementField forward(const Tensor& moving, const Tensor& target) const;

    const NetConfig& config() const { return config_; }
    ParameterSet& params() { return params_; }
    const ParameterSet& params() const { return params_; }
    std::string describe() const;

private:
    NetConfig config_;
    ParameterSet params_;
};

/// Scalar parameter count implied by a configuration.
std::int64_t segmentation_parameter_count(const NetConfig& config);
std::int64_t registration_parameter_count(const NetConfig& config);

}  // namespace deepatlas
