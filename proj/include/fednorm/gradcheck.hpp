#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fednorm/tape.hpp"
#include "fednorm/tensor.hpp"

namespace fednorm {

struct GradCheckOptions {
    double step = 1e-5;
    /// Coordinates checked per parameter tensor; 0 checks all of them.
    std::size_t max_coords_per_param = 0;
    std::uint64_t seed = 0;
    /// Denominator floor of the relative error, so that gradients at the
    /// rounding-noise level are compared absolutely.
    double abs_floor = 1e-6;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t coordinates_checked = 0;
    /// Coordinates whose +/- step crossed a kink (activation sign flip, pool
    /// argmax change, norm floor switch); excluded from max_rel_error.
    std::size_t kinks_flagged = 0;
    std::string worst;  // "param[i]:coord" of the worst coordinate
};

/// Builds a scalar loss from parameters recorded on the given tape.
using LossBuilder = std::function<Var(Tape&, std::span<const Var>)>;

/// Compares reverse-mode gradients of `loss` against central differences.
GradCheckReport finite_diff_check(const LossBuilder& loss, std::vector<Tensor> params,
                                  const GradCheckOptions& options = {});

}  // namespace fednorm
