#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "deepatlas/tensor.hpp"

namespace deepatlas {

/// Hard segmentation over a spatial grid, one class index per voxel.
struct LabelMap {
    Shape shape;
    std::vector<std::uint8_t> values;

    std::int64_t voxels() const { return static_cast<std::int64_t>(values.size()); }
    bool operator==(const LabelMap&) const = default;
};

/// One-hot encoding [1, K, spatial...]. Throws if a label is >= K.
Tensor one_hot(const LabelMap& labels, std::int64_t classes);

/// Stacks one-hot encodings along the batch axis.
Tensor one_hot_batch(std::span<const LabelMap> labels, std::int64_t classes);

/// Per-voxel argmax over the channel axis of [N, K, spatial...]; ties go to
/// the lowest class index. Returns one map per batch entry.
std::vector<LabelMap> argmax_labels(const Tensor& probabilities);

/// Label map viewed as a [1, 1, spatial...] tensor of class indices.
Tensor label_tensor(const LabelMap& labels);
LabelMap labels_from_tensor(const Tensor& t);

}  // namespace deepatlas
