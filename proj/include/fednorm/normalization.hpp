#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fednorm/tape.hpp"
#include "fednorm/tensor.hpp"

namespace fednorm {

/// Default stabilizer used by training-mode normalization.
inline constexpr double kDefaultEpsilon = 1e-5;

// Single-vector kernels.

/// (x - mean(x)) / sqrt(var(x) + eps^2), population variance.
/// Throws DegenerateInputError when eps == 0 and x is constant.
std::vector<double> mv_normalize(std::span<const double> x, double eps);
/// sqrt(d) * x / max(eps, ||x||). Throws DegenerateInputError for x == 0
/// with eps == 0.
std::vector<double> scale_normalize(std::span<const double> x, double eps);
/// x - mean(x), i.e. P x with P = I - (1/d) 1 1^T.
std::vector<double> mean_shift(std::span<const double> x);
/// mv_normalize applied to each of `groups` contiguous slices.
std::vector<double> group_normalize(std::span<const double> x, std::size_t groups, double eps);

// Row-wise tensor versions: every sample (leading index) is flattened and
// normalized independently. A rank-1 tensor is one sample.
Tensor mv_normalize(const Tensor& x, double eps);
Tensor scale_normalize(const Tensor& x, double eps);
Tensor mean_shift(const Tensor& x);
Tensor group_normalize(const Tensor& x, std::size_t groups, double eps);

// Differentiable versions.
Var mv_normalize(const Var& x, double eps);
Var scale_normalize(const Var& x, double eps);
Var mean_shift(const Var& x);
Var group_normalize(const Var& x, std::size_t groups, double eps);
/// gamma * mv_normalize(x) + beta with gamma, beta of the row size.
Var mv_learnable(const Var& x, const Var& gamma, const Var& beta, double eps);

/// Running statistics of one batch-norm site, one entry per channel.
struct BatchNormState {
    double momentum = 0.1;
    Tensor running_mean;
    Tensor running_var;

    /// Mean 0, variance 1.
    static BatchNormState fresh(std::size_t channels, double momentum = 0.1);
};

/// Per-channel normalization across the batch (and spatial positions for
/// [B x C x H x W] inputs). Training mode uses batch statistics and updates
/// the running ones: run <- (1 - m) run + m batch. Eval mode uses the
/// running statistics. Requires B >= 2 in training mode.
Var batch_normalize(const Var& x, BatchNormState& state, double eps, bool training);

}  // namespace fednorm
