#include "deepatlas/labels.hpp"

#include <string>

namespace deepatlas {

Tensor one_hot(const LabelMap& labels, std::int64_t classes) {
    return one_hot_batch(std::span<const LabelMap>(&labels, 1), classes);
}

Tensor one_hot_batch(std::span<const LabelMap> labels, std::int64_t classes) {
    if (labels.empty()) throw ShapeError("one_hot_batch of zero label maps");
    if (classes < 1 || classes > 256) throw ShapeError("class count must be in [1, 256]");
    const auto& spatial = labels[0].shape;
    const auto voxels = numel(spatial);
    Shape shape{static_cast<std::int64_t>(labels.size()), classes};
    shape.insert(shape.end(), spatial.begin(), spatial.end());
    std::vector<Scalar> out(static_cast<std::size_t>(numel(shape)), 0.0);
    for (std::size_t n = 0; n < labels.size(); ++n) {
        if (labels[n].shape != spatial || labels[n].voxels() != voxels) {
            throw ShapeError("one_hot_batch: label maps differ in shape");
        }
        for (std::int64_t v = 0; v < voxels; ++v) {
            const auto k = static_cast<std::int64_t>(labels[n].values[v]);
            if (k >= classes) {
                throw ShapeError("label " + std::to_string(k) + " out of range for " + std::to_string(classes) +
                                 " classes");
            }
            out[(static_cast<std::int64_t>(n) * classes + k) * voxels + v] = 1.0;
        }
    }
    return Tensor(shape, std::move(out));
}

std::vector<LabelMap> argmax_labels(const Tensor& p) {
    if (p.rank() < 3) throw ShapeError("argmax_labels expects [N, K, spatial...]");
    const auto batch = p.dim(0);
    const auto classes = p.dim(1);
    Shape spatial(p.shape().begin() + 2, p.shape().end());
    const auto voxels = numel(spatial);
    const auto& P = p.data();
    std::vector<LabelMap> maps;
    for (std::int64_t n = 0; n < batch; ++n) {
        LabelMap m{spatial, std::vector<std::uint8_t>(static_cast<std::size_t>(voxels))};
        for (std::int64_t v = 0; v < voxels; ++v) {
            std::int64_t best = 0;
            Scalar best_value = P[(n * classes) * voxels + v];
            for (std::int64_t k = 1; k < classes; ++k) {
                const Scalar value = P[(n * classes + k) * voxels + v];
                if (value > best_value) {
                    best_value = value;
                    best = k;
                }
            }
            m.values[v] = static_cast<std::uint8_t>(best);
        }
        maps.push_back(std::move(m));
    }
    return maps;
}

Tensor label_tensor(const LabelMap& labels) {
    Shape shape{1, 1};
    shape.insert(shape.end(), labels.shape.begin(), labels.shape.end());
    return Tensor(shape, std::vector<Scalar>(labels.values.begin(), labels.values.end()));
}

LabelMap labels_from_tensor(const Tensor& t) {
    if (t.rank() < 3 || t.dim(0) != 1 || t.dim(1) != 1) throw ShapeError("expected a [1, 1, spatial...] label tensor");
    LabelMap m{Shape(t.shape().begin() + 2, t.shape().end()), {}};
    m.values.reserve(static_cast<std::size_t>(t.numel()));
    for (auto v : t.data()) m.values.push_back(static_cast<std::uint8_t>(v));
    return m;
}

}  // namespace deepatlas
