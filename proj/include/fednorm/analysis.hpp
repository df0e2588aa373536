#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "fednorm/data.hpp"
#include "fednorm/model.hpp"
#include "fednorm/serialize.hpp"

namespace fednorm {

/// Feature embeddings of `samples` as columns, [d_L x m].
Tensor feature_matrix(const Model& model, const Tensor& samples);

/// Singular values in descending order by one-sided Jacobi rotations.
/// Matrices up to 2048 x 2048.
std::vector<double> svd_singular_values(const Tensor& m);

struct SpectrumReport {
    std::vector<double> singular_values;
    /// sigma_1 / sigma_2; +infinity when sigma_2 is zero.
    double spectral_gap = 1.0;
    /// Number of singular values above 1% of the largest.
    std::size_t effective_rank = 0;
};

SpectrumReport spectrum_of(const Tensor& m);
/// Spectrum of the feature matrix of at least two samples.
SpectrumReport spectral_gap(const Model& model, const Tensor& samples);

/// Infinite gaps are written as the string "inf".
Json to_json(const SpectrumReport& r);

struct NormTrace {
    /// step 0 is the untrained state; one more record per local step.
    std::vector<std::vector<double>> class_norms;    // ||w_c|| per class
    std::vector<std::vector<double>> feature_norms;  // ||g(x)|| per probe sample
    std::vector<double> losses;                      // local batch loss of each step

    double max_norm(std::size_t step) const;
};

Json to_json(const NormTrace& t);

struct LocalSgdOptions {
    std::size_t steps = 5;
    double lr = 0.01;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    /// Stop early once the batch loss falls below this value (0 disables).
    double stop_loss = 0.0;
};

/// Plain minibatch SGD on one shard, recording norms on a fixed probe set
/// (at most 64 samples) before training and after every step.
NormTrace norm_trace(Model& model, const Dataset& train, const ClientShard& shard, const Tensor& probe,
                     const LocalSgdOptions& options);

/// Mean over the inputs of log sum_c exp((w_c - w_k)^T g(x)), the local loss
/// of a client that only holds class k.
double one_class_loss(const Model& model, const Tensor& inputs, std::size_t k);

struct OverfitReport {
    std::vector<double> per_class_before;
    std::vector<double> per_class_after;
    double local_acc_before = 0.0;
    double local_acc_after = 0.0;
    /// Mean accuracy over classes absent from the shard.
    double other_class_before = 0.0;
    double other_class_after = 0.0;
};

Json to_json(const OverfitReport& r);

/// Copies the global model, runs `options.steps` local SGD steps on the
/// shard and evaluates per-class accuracy on the test set before and after.
OverfitReport local_overfit_probe(const Model& global, const Dataset& train, const ClientShard& shard,
                                  const Dataset& test, const LocalSgdOptions& options);

/// Seeded probe set cycling through the classes: count indices drawn round
/// robin from per-class shuffles, ascending class order within each cycle.
std::vector<std::size_t> select_probe(const Dataset& d, std::size_t count, std::uint64_t seed);

}  // namespace fednorm
