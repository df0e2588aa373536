#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fednorm/serialize.hpp"
#include "fednorm/tensor.hpp"

namespace fednorm {

struct Dataset {
    Tensor inputs;  // [N x sample shape...]
    std::vector<int> labels;
    std::size_t num_classes = 0;

    std::size_t size() const { return labels.size(); }
    Shape sample_shape() const;
    /// Inputs of the selected samples, [m x sample shape...].
    Tensor gather_inputs(std::span<const std::size_t> indices) const;
    std::vector<int> gather_labels(std::span<const std::size_t> indices) const;
    std::vector<std::size_t> class_counts() const;
};

/// Throws FormatError when labels and inputs disagree or a label is out of range.
void validate(const Dataset& d);

struct ClientShard {
    std::size_t client_id = 0;
    std::vector<std::size_t> indices;  // ascending
    std::vector<std::size_t> label_histogram;

    std::size_t size() const { return indices.size(); }
    friend bool operator==(const ClientShard&, const ClientShard&) = default;
};

enum class PartitionScheme { n_class, dirichlet };

struct PartitionPlan {
    PartitionScheme scheme = PartitionScheme::n_class;
    std::size_t num_clients = 10;
    std::size_t n = 1;    // classes per client (n_class)
    double beta = 0.5;    // concentration (dirichlet)
    std::uint64_t seed = 0;
};

std::string to_string(PartitionScheme s);
PartitionScheme parse_partition_scheme(const std::string& s);

/// Class c ~ N(mu_c, I) with mu_c a seeded random unit direction scaled by
/// separation / sqrt(2), so that class means sit about `separation` apart.
/// Samples are stored class by class.
Dataset generate_gaussian_mixture(std::size_t num_classes, std::size_t n_per_class, std::size_t dim,
                                  double separation, std::uint64_t seed);

/// Two-class XOR: points near (+-1, +-1) with Gaussian noise, labelled 1
/// when the coordinates have opposite signs.
Dataset generate_xor(std::size_t n, double noise, std::uint64_t seed);

/// Stratified split: per class, a seeded round(test_fraction * n_c) samples
/// go to the test set. Both parts keep the original sample order.
std::pair<Dataset, Dataset> train_test_split(const Dataset& d, double test_fraction, std::uint64_t seed);

/// IDX image/label pair (big-endian, magic 0x803 / 0x801). Pixels are scaled
/// to [0, 1]; inputs have shape [N x 1 x rows x cols].
Dataset load_idx(const std::string& images_path, const std::string& labels_path, std::size_t num_classes = 10);

/// Header-less rows "label,f1,...,fd"; d is taken from the first row.
Dataset load_csv(const std::string& path, std::size_t num_classes);
Dataset parse_csv(const std::string& text, std::size_t num_classes);
/// Shortest round-trip number formatting; load_csv(write_csv(d)) == d.
void write_csv(const std::string& path, const Dataset& d);
std::string format_csv(const Dataset& d);

/// Every client holds exactly n classes (seeded class permutation, client k
/// takes perm[(k n + j) mod C]); a class held by several clients is split
/// equally with the remainder to the lowest client ids.
std::vector<ClientShard> partition_n_class(const Dataset& d, std::size_t num_clients, std::size_t n,
                                           std::uint64_t seed);

/// Per class, proportions p ~ Dir(beta 1_K) turned into counts by
/// largest-remainder rounding.
std::vector<ClientShard> partition_dirichlet(const Dataset& d, std::size_t num_clients, double beta,
                                             std::uint64_t seed);

std::vector<ClientShard> partition(const Dataset& d, const PartitionPlan& plan);

struct TestPartition {
    std::vector<ClientShard> shards;
    std::vector<std::string> warnings;
};

/// Partitions a test set with the training plan's class-to-client structure
/// (n_class) or the same per-class Dirichlet draws (dirichlet).
TestPartition partition_test_like_train(const Dataset& test, const PartitionPlan& plan);

Json to_json(const ClientShard& shard);

}  // namespace fednorm
