#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fednorm/data.hpp"
#include "fednorm/model.hpp"
#include "fednorm/serialize.hpp"

namespace fednorm {

struct EquivalenceReport {
    std::string check;
    double max_abs_output_diff = 0.0;
    double argmax_agreement_rate = 1.0;
    std::size_t num_trials = 0;
    std::size_t degenerate_skips = 0;
    double tolerance = 0.0;
    bool passed = false;
    /// Human-readable description of the first failing (or witnessing) trial.
    std::optional<std::string> witness;
};

Json to_json(const EquivalenceReport& r);

/// Layer-wise scale normalization vs normalizing the last layer only, in
/// exact mode (eps = 0) with random parameters and inputs per trial. Trials
/// whose activations hit a zero vector are redrawn and counted as skips.
EquivalenceReport check_fn_reduction(const NetworkSpec& spec, std::uint64_t seed, std::size_t trials,
                                     double tol = 1e-9);

/// Layer-wise MV normalization vs mean shift on inner layers plus MV on the
/// feature. Trials with activations proportional to the all-one vector are
/// redrawn.
EquivalenceReport check_ln_reduction(const NetworkSpec& spec, std::uint64_t seed, std::size_t trials,
                                     double tol = 1e-9);

enum class ReductionKind { feature_norm, layer_norm };

/// Searches random parameters and inputs of a spec with inner biases for a
/// trial where the reduction fails by more than `threshold`. `passed` is
/// true when a witness is found.
EquivalenceReport search_reduction_counterexample(NetworkSpec spec, ReductionKind kind, std::uint64_t seed,
                                                  std::size_t max_trials = 1000, double threshold = 1e-3);

/// Argmax of W g(x) vs W n(g(x)) on random inputs with the vanilla model's
/// parameters shared by both sides. Agreement must be exact.
EquivalenceReport check_fn_prediction_equivalence(const Model& vanilla, std::uint64_t seed, std::size_t trials);

enum class LnPlacement { pre_activation, post_activation };

std::string to_string(LnPlacement p);
LnPlacement parse_ln_placement(const std::string& s);

/// P_i U_i and P_i b_i (pre-activation) or U_i P_{i-1} and W P_L
/// (post-activation), with P = I - (1/d) 1 1^T. Dense-only networks.
ParamSet project_parameters(const Model& ln_model, LnPlacement placement);

/// Vanilla network with the same predictions as the LN network.
/// Pre-activation expects norm mode ln_pre; post-activation expects
/// ln_layerwise or ln_reduced.
Model ln_to_vanilla_transform(const Model& ln_model, LnPlacement placement);

/// Argmax agreement of an LN model and its vanilla transform on random inputs.
EquivalenceReport check_ln_transform(const Model& ln_model, LnPlacement placement, std::uint64_t seed,
                                     std::size_t trials);

/// rho(lambda t) = lambda rho(t) for random t and lambda > 0; reports the
/// worst relative error in max_abs_output_diff.
EquivalenceReport check_activation_homogeneity(const Activation& rho, std::uint64_t seed, std::size_t trials,
                                               double tol = 1e-9);

/// g(lambda x) = lambda g(x) for a network without biases and without
/// normalization; reports the worst normwise relative error of the features
/// in max_abs_output_diff.
EquivalenceReport check_network_homogeneity(const NetworkSpec& spec, std::uint64_t seed, std::size_t trials,
                                            double tol = 1e-9);

struct ErrorOrderingReport {
    double vanilla_error = 0.0;
    double fn_error = 0.0;
    double ln_error = 0.0;
    double vanilla_loss = 0.0;
    double fn_loss = 0.0;
    double ln_loss = 0.0;
    /// False when some loss was still moving over the last tenth of training.
    bool converged = true;
    bool passed = false;
    std::string note;
};

Json to_json(const ErrorOrderingReport& r);

struct ErrorOrderingOptions {
    std::vector<std::size_t> hidden = {16, 16};
    std::size_t steps = 4000;
    double lr = 0.1;
    /// Allowed gap in error fraction (0.02 = 2 points).
    double slack = 0.02;
    /// Relative loss change over the last tenth of training that still
    /// counts as a plateau.
    double plateau = 0.05;
};

/// Full-batch training of a vanilla, a feature-normalized and a layer-norm
/// network on a small dataset (at most 200 samples). Passes when the vanilla
/// and feature-normalized training errors agree within the slack and the
/// vanilla error does not exceed the layer-norm error by more than it.
/// Finite training only gives evidence for an ordering of optimal errors.
ErrorOrderingReport optimal_error_ordering_check(const Dataset& d, std::uint64_t seed,
                                                 const ErrorOrderingOptions& options = {});

}  // namespace fednorm
