#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fednorm/data.hpp"
#include "fednorm/model.hpp"
#include "fednorm/rng.hpp"
#include "fednorm/serialize.hpp"

namespace fednorm {

enum class Algorithm { fedavg, fedprox, scaffold, fedlc, fedrs, feddecorr, fedbn };
enum class ServerOptimizer { plain, yogi };

std::string to_string(Algorithm a);
Algorithm parse_algorithm(const std::string& s);
std::string to_string(ServerOptimizer s);
ServerOptimizer parse_server_optimizer(const std::string& s);

struct YogiConfig {
    double eta = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double tau = 1e-3;
    double v0 = 1e-6;
    friend bool operator==(const YogiConfig&, const YogiConfig&) = default;
};

struct AlgoConfig {
    Algorithm algorithm = Algorithm::fedavg;
    double prox_mu = 0.01;
    double lc_tau = 1.0;
    double rs_alpha = 0.5;
    double decorr_alpha = 0.5;
    ServerOptimizer server_opt = ServerOptimizer::plain;
    YogiConfig yogi;
    std::size_t local_steps = 10;
    double lr = 0.01;
    std::size_t batch_size = 32;
    std::size_t rounds = 100;
    double participation = 1.0;

    /// Throws ConfigError naming the offending field.
    void validate() const;
    friend bool operator==(const AlgoConfig&, const AlgoConfig&) = default;
};

Json to_json(const AlgoConfig& a);
AlgoConfig algo_from_json(const Json& j);

struct YogiState {
    ParamSet m;
    ParamSet v;
};

struct ServerState {
    ParamSet global_params;
    std::size_t round = 0;
    std::optional<ParamSet> scaffold_c;
    std::optional<YogiState> yogi;
};

/// Fresh server state for a configuration: control variate and Yogi moments
/// exist only when the algorithm or optimizer needs them.
ServerState init_server(const ParamSet& initial, const AlgoConfig& algo);

struct ClientState {
    ClientShard shard;
    std::optional<ParamSet> scaffold_c_i;
    /// Local batch-norm statistics kept by FedBN clients.
    std::optional<ParamSet> bn_local;
};

struct LocalResult {
    ParamSet params;
    double mean_loss = 0.0;
    std::optional<ParamSet> scaffold_c_i;
    std::optional<ParamSet> bn_local;
};

/// Local logit offsets used by FedLC: -tau * n_c^(-1/4) for present classes.
/// Classes absent from the shard are excluded from the softmax when tau > 0.
std::vector<double> fedlc_offsets(const std::vector<std::size_t>& histogram, double tau);

/// Minibatch index stream over one shard: a fresh seeded shuffle whenever the
/// remaining samples cannot fill a batch.
class BatchSampler {
public:
    BatchSampler(std::vector<std::size_t> indices, std::size_t batch_size, std::uint64_t seed);
    std::vector<std::size_t> next();

private:
    std::vector<std::size_t> order_;
    std::size_t batch_;
    std::size_t pos_ = 0;
    Rng rng_;
};

/// E minibatch SGD steps from the server's parameters with the algorithm's
/// local modification. `model` supplies the architecture and is not changed.
LocalResult local_train(const Model& model, const ServerState& server, const ClientState& client,
                        const Dataset& train, const AlgoConfig& algo, std::uint64_t seed);

struct ClientUpdate {
    std::size_t client_id = 0;
    std::size_t weight = 0;  // m_k
    const ParamSet* params = nullptr;
};

/// Coordinate-wise sum of (m_k / m) params_k in ascending client id order.
/// Entries whose kind is in `skip` are copied from `fallback` instead.
ParamSet aggregate(std::vector<ClientUpdate> updates, const ParamSet* fallback = nullptr,
                   const std::vector<ParamKind>& skip = {});

/// Plain replacement or a Yogi step toward the aggregate. Running statistics
/// are always replaced.
void server_update(ServerState& state, const ParamSet& aggregated, const AlgoConfig& algo);

struct EvalResult {
    double global_acc = 0.0;
    std::vector<double> per_client_acc;
    std::vector<double> per_class_acc;
    /// confusion[true][predicted] over all evaluated samples.
    std::vector<std::vector<std::size_t>> confusion;
    std::vector<std::string> warnings;
};

/// Accuracy of the model on each client's test shard. Empty shards are
/// excluded from the averages (per-client accuracy NaN) with a warning.
/// `per_client_params`, when non-empty, supplies each client's own model.
EvalResult evaluate(const Model& model, const Dataset& test, const std::vector<ClientShard>& shards,
                    const std::vector<ParamSet>& per_client_params = {});

struct RoundRecord {
    std::size_t round = 0;
    double global_acc = 0.0;
    std::vector<double> per_client_acc;
    std::vector<double> per_class_acc;
    double mean_local_loss = 0.0;
    Json diag;
};

Json to_json(const RoundRecord& r);

struct ExperimentInputs {
    Model model;  // initial global model
    const Dataset* train = nullptr;
    std::vector<ClientShard> train_shards;
    const Dataset* test = nullptr;
    std::vector<ClientShard> test_shards;
    AlgoConfig algo;
    std::uint64_t seed = 0;
    std::size_t eval_every = 10;
    std::size_t threads = 1;
    /// Called after each evaluated round, on the coordinating thread.
    std::function<void(const RoundRecord&)> on_round;
    /// Called after every round with the updated server state.
    std::function<void(const ServerState&, const std::vector<ClientState>&)> on_state;
};

struct ExperimentResult {
    ServerState server;
    std::vector<ClientState> clients;
    std::vector<RoundRecord> records;
    Model final_model;
};

/// Round loop: sample clients, train them (possibly concurrently), aggregate
/// in ascending id order, update the server, evaluate every `eval_every`
/// rounds and after the last one. A pure function of its inputs.
ExperimentResult run_experiment(const ExperimentInputs& in);

/// Seed of a client's local training stream in a given round.
std::uint64_t local_seed(std::uint64_t root, std::size_t round, std::size_t client_id);

/// Participating client ids for a round, ascending.
std::vector<std::size_t> sample_clients(std::size_t num_clients, double fraction, std::uint64_t seed,
                                        std::size_t round);

}  // namespace fednorm
