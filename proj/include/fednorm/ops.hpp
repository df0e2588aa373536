#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "fednorm/tape.hpp"
#include "fednorm/tensor.hpp"

namespace fednorm {

/// Positively homogeneous piecewise-linear activation:
/// rho(t) = pos_slope * t for t > 0, neg_slope * t for t <= 0.
struct Activation {
    double pos_slope = 1.0;
    double neg_slope = 0.0;

    static Activation relu() { return {1.0, 0.0}; }
    static Activation leaky_relu(double pos_slope, double neg_slope) { return {pos_slope, neg_slope}; }

    double operator()(double t) const { return t > 0.0 ? pos_slope * t : neg_slope * t; }
    double slope(double t) const { return t > 0.0 ? pos_slope : neg_slope; }
    bool is_relu() const { return pos_slope == 1.0 && neg_slope == 0.0; }

    friend bool operator==(const Activation&, const Activation&) = default;
};

/// Tensor-level forward for an activation (no tape).
Tensor apply_activation(const Activation& rho, const Tensor& x);

// Differentiable primitives. Batched inputs carry a leading batch dimension;
// a rank-1 input is treated as a single sample and keeps its rank.

/// x[B x in] (trailing dims flattened), weight[out x in], bias[out] -> [B x out].
Var affine(const Var& x, const Var& weight, const std::optional<Var>& bias = std::nullopt);

Var activate(const Var& x, const Activation& rho);

/// Valid (unpadded) cross-correlation. x[B x c_in x h x w] or [c_in x h x w],
/// kernel[c_out x c_in x k x k], bias[c_out].
Var conv2d(const Var& x, const Var& kernel, std::size_t stride, const std::optional<Var>& bias = std::nullopt);

/// Max pooling; gradient routes to the first maximal element in row-major
/// order within each window.
Var maxpool2d(const Var& x, std::size_t window, std::size_t stride);

Var reshape(const Var& x, Shape shape);
/// [B x ...] -> [B x prod(...)].
Var flatten(const Var& x);
Var add(const Var& a, const Var& b);
Var scale(const Var& x, double factor);
/// Sum of squared entries, as a scalar.
Var sum_of_squares(const Var& x);

/// Per-column multiplicative factor on a [B x C] matrix (constant factors).
Var scale_columns(const Var& x, std::span<const double> factors);
/// Per-column additive offset on a [B x C] matrix (constant offsets).
Var shift_columns(const Var& x, std::span<const double> offsets);

/// Mean softmax cross-entropy over the batch. Columns flagged in `excluded`
/// are removed from the softmax (probability zero, no gradient).
Var softmax_cross_entropy(const Var& logits, std::span<const int> labels,
                          std::span<const bool> excluded = {});

/// Squared off-diagonal Frobenius norm of the batch correlation matrix of
/// features[B x d], divided by d^2. Zero for B < 2.
Var decorrelation_penalty(const Var& features, double eps = 1e-8);

/// Row-wise argmax with lowest-index tie-break.
std::vector<int> argmax_rows(const Tensor& logits);

/// Plain SGD: p <- p - lr * g. Throws NumericError on non-finite gradients.
void sgd_step(Tensor& param, const Tensor& grad, double lr);

}  // namespace fednorm
