#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "fednorm/rng.hpp"
#include "fednorm/tensor.hpp"

namespace fednorm::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = uniform(rng, lo, hi);
    return t;
}

inline double rel_err(double a, double b, double floor = 1e-300) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace fednorm::testing
