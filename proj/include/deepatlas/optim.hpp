#pragma once

#include <cstdint>
#include <vector>

#include "deepatlas/nets.hpp"

namespace deepatlas {

struct AdamOptions {
    Scalar beta1 = 0.9;
    Scalar beta2 = 0.999;
    Scalar epsilon = 1e-8;
};

/// Adam with bias correction. Moment buffers are allocated on the first step
/// and follow the parameter order of the set they were created for.
class Adam {
public:
    explicit Adam(AdamOptions options = {}) : options_(options) {}

    /// Parameters without a gradient are treated as having a zero gradient.
    void step(ParameterSet& params, Scalar lr);
    std::int64_t steps() const { return steps_; }
    void reset();

private:
    AdamOptions options_;
    std::int64_t steps_ = 0;
    std::vector<std::vector<Scalar>> m_;
    std::vector<std::vector<Scalar>> v_;
};

}  // namespace deepatlas
