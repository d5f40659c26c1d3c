#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "deepatlas/tensor.hpp"

namespace deepatlas {

inline constexpr Scalar kGradcheckTolerance = 1e-4;

struct GradcheckOptions {
    Scalar step = 1e-5;
    /// Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
    Scalar floor = 1e-5;
    /// Coordinates probed per input tensor; larger tensors are subsampled.
    std::int64_t max_probes = 24;
};

struct GradcheckResult {
    Scalar worst = 0;
    /// Largest analytic or central-difference magnitude over the probes; zero
    /// means the check never saw a gradient.
    Scalar largest_gradient = 0;
};

/// Worst relative error between tape gradients and central differences of a
/// scalar function over the given inputs. Inputs must require gradients.
Scalar gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f, const std::vector<Tensor>& inputs,
                 std::uint64_t probe_seed, const GradcheckOptions& options = {});
GradcheckResult gradcheck_detailed(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                                   const std::vector<Tensor>& inputs, std::uint64_t probe_seed,
                                   const GradcheckOptions& options = {});

struct GradcheckEntry {
    std::string name;
    std::int64_t instances = 0;
    Scalar worst = 0;
    Scalar largest_gradient = 0;
    bool passed() const { return worst < kGradcheckTolerance; }
};

/// Every primitive op, every loss, both objectives (all labeling cases) and
/// both networks end to end, each on `instances` random instances.
std::vector<GradcheckEntry> run_gradcheck_suite(std::uint64_t seed, std::int64_t instances = 5);

}  // namespace deepatlas
