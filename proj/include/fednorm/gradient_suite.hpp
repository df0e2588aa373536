#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "fednorm/serialize.hpp"

namespace fednorm {

struct GradientCase {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t coordinates = 0;
    std::size_t kinks = 0;
    std::string worst;
    bool passed = false;
};

struct GradientSuiteReport {
    std::vector<GradientCase> cases;
    double max_rel_error = 0.0;
    std::size_t coordinates = 0;
    double tolerance = 0.0;
    bool passed = false;
};

/// Reverse-mode gradients of every differentiable primitive, normalization,
/// residual block variant and whole-model forward against central
/// differences, `repeats` random instances each.
GradientSuiteReport run_gradient_suite(std::uint64_t seed, std::size_t repeats = 4, double tol = 1e-4);

Json to_json(const GradientSuiteReport& r);

}  // namespace fednorm
