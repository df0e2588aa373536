#pragma once

#include <cstddef>
#include <cstdint>
#include <exception>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "fednorm/data.hpp"
#include "fednorm/federation.hpp"
#include "fednorm/model.hpp"
#include "fednorm/serialize.hpp"

namespace fednorm {

/// Version string recorded in every run manifest.
const char* version();

enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitVerification = 2, kExitNumeric = 3 };

/// 1 for configuration, format and shape errors, 3 for numeric and
/// degenerate-input failures.
int exit_code_for(const std::exception& e);

struct DatasetConfig {
    std::string source = "gaussian_mixture";  // gaussian_mixture | idx | csv
    std::size_t num_classes = 10;
    // gaussian_mixture
    std::size_t samples_per_class = 300;
    std::size_t dim = 16;
    double separation = 6.0;
    /// Held-out share when no separate test files are given.
    double test_fraction = 1.0 / 3.0;
    // idx: image and label files; csv: train_images/test_images hold the csv paths
    std::string train_images;
    std::string train_labels;
    std::string test_images;
    std::string test_labels;

    friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

struct PartitionConfig {
    PartitionScheme scheme = PartitionScheme::n_class;
    std::size_t num_clients = 10;
    std::size_t n = 1;
    double beta = 0.5;

    friend bool operator==(const PartitionConfig&, const PartitionConfig&) = default;
};

struct ModelConfig {
    std::string preset = "mlp";  // mlp | cnn | resmlp
    std::vector<std::size_t> hidden = {32, 32, 8};
    // resmlp
    std::size_t width = 32;
    std::size_t blocks = 2;
    ResidualVariant residual = ResidualVariant::plain;

    NormMode norm_mode = NormMode::fn_last;
    BiasPolicy bias_policy = BiasPolicy::first_layer_only;
    Activation activation = Activation::leaky_relu(1.0, 0.1);
    std::size_t gn_groups = 2;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct ExperimentConfig {
    DatasetConfig dataset;
    PartitionConfig partition;
    ModelConfig model;
    AlgoConfig algo = default_algo();
    std::size_t eval_every = 10;
    std::uint64_t seed = 1;
    std::string output = "runs/default";

    static AlgoConfig default_algo() {
        AlgoConfig a;
        a.rounds = 300;
        return a;
    }
    friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

Json to_json(const ExperimentConfig& c);
/// Strict: unknown keys and mistyped values raise ConfigError naming the key
/// path. Missing keys keep their defaults.
ExperimentConfig config_from_json(const Json& j);
std::string render_config(const ExperimentConfig& c);
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);

/// Sets `key.path=value` in a config tree. The value is parsed as JSON when
/// possible and taken as a plain string otherwise.
void apply_override(Json& config, const std::string& assignment);

/// Dataset, shards and network resolved from a config.
struct PreparedExperiment {
    Dataset train;
    Dataset test;
    PartitionPlan plan;
    std::vector<ClientShard> train_shards;
    TestPartition test_partition;
    NetworkSpec spec;
};

/// Train and test sets. Synthetic and single-file sources are split with
/// the config seed; mlp and resmlp presets see flattened samples.
std::pair<Dataset, Dataset> load_datasets(const ExperimentConfig& c);
NetworkSpec network_spec(const ModelConfig& m, const Shape& sample_shape, std::size_t num_classes);
PreparedExperiment prepare(const ExperimentConfig& c);
/// Initial model seeded from the config; `p` must outlive the result.
ExperimentInputs experiment_inputs(const PreparedExperiment& p, const ExperimentConfig& c, std::size_t threads = 1);

/// --threads when given, else FEDNORM_THREADS, else 1.
std::size_t resolve_threads(std::optional<std::size_t> flag);

struct CommonOptions {
    std::string config_path;  // empty: built-in defaults
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::size_t> threads;
};

/// Config file plus overrides, then --seed and --out.
ExperimentConfig resolve_config(const CommonOptions& o);

/// Writes metrics.jsonl (one record per evaluated round), summary.json,
/// manifest.json and model.json into the output directory.
int cmd_run(const CommonOptions& o, std::ostream& out, std::ostream& err);

struct VerifyOptions {
    std::string suite = "all";  // fn_reduction | ln_reduction | prop3 | gradients | all
    std::uint64_t seed = 1;
    std::size_t trials = 100;
    /// Enables inner biases in the reduction networks, which must then fail.
    bool inject_bias = false;
};

/// One JSON report per line; exit 2 when any check fails.
int cmd_verify(const VerifyOptions& o, std::ostream& out, std::ostream& err);

/// One JSON line per client with id, m_k and label histogram, to `o.out`
/// (a file) when set and to `out` otherwise.
int cmd_partition(const CommonOptions& o, std::ostream& out, std::ostream& err);

struct AnalyzeOptions {
    std::string checkpoint;
    std::string probe = "spectrum";  // spectrum | norms | overfit
    std::size_t client = 0;
    std::size_t steps = 5;
    std::optional<double> lr;  // defaults to algo.lr
    std::size_t probe_size = 20;
};

int cmd_analyze(const CommonOptions& o, const AnalyzeOptions& a, std::ostream& out, std::ostream& err);

}  // namespace fednorm
