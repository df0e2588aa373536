#include "fednorm/federation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <memory>
#include <mutex>
#include <thread>

#include "fednorm/errors.hpp"
#include "fednorm/ops.hpp"

namespace fednorm {

namespace {

constexpr std::uint64_t kLocalTag = 0x6c6f63616c;   // "local"
constexpr std::uint64_t kSampleTag = 0x73616d706c;  // "sampl"

const std::pair<Algorithm, const char*> kAlgorithms[] = {
    {Algorithm::fedavg, "fedavg"}, {Algorithm::fedprox, "fedprox"},     {Algorithm::scaffold, "scaffold"},
    {Algorithm::fedlc, "fedlc"},   {Algorithm::fedrs, "fedrs"},         {Algorithm::feddecorr, "feddecorr"},
    {Algorithm::fedbn, "fedbn"},
};
const std::pair<ServerOptimizer, const char*> kServerOptimizers[] = {
    {ServerOptimizer::plain, "plain"},
    {ServerOptimizer::yogi, "yogi"},
};

bool is_running_stat(ParamKind k) { return k == ParamKind::bn_running_mean || k == ParamKind::bn_running_var; }

ParamSet running_stats_of(const ParamSet& p) {
    ParamSet out;
    for (const auto& e : p.entries)
        if (is_running_stat(e.kind)) out.entries.push_back(e);
    return out;
}

void overwrite_by_name(ParamSet& target, const ParamSet& source) {
    for (const auto& e : source.entries) {
        auto* t = target.find(e.name);
        if (!t || t->value.shape() != e.value.shape())
            throw ShapeError("local statistics '" + e.name + "' do not match the model");
        t->value = e.value;
    }
}

void require_finite(const ParamSet& p, const char* what) {
    for (const auto& e : p.entries)
        if (!e.value.all_finite()) throw NumericError(std::string(what) + ": non-finite values in " + e.name);
}

}  // namespace

std::string to_string(Algorithm a) {
    for (const auto& [v, name] : kAlgorithms)
        if (v == a) return name;
    return "?";
}

Algorithm parse_algorithm(const std::string& s) {
    for (const auto& [v, name] : kAlgorithms)
        if (s == name) return v;
    throw ConfigError("unknown algorithm '" + s + "'");
}

std::string to_string(ServerOptimizer s) {
    for (const auto& [v, name] : kServerOptimizers)
        if (v == s) return name;
    return "?";
}

ServerOptimizer parse_server_optimizer(const std::string& s) {
    for (const auto& [v, name] : kServerOptimizers)
        if (s == name) return v;
    throw ConfigError("unknown server optimizer '" + s + "'");
}

void AlgoConfig::validate() const {
    auto fail = [](const std::string& key, const std::string& rule) { throw ConfigError("algo." + key + ": " + rule); };
    if (!(prox_mu >= 0.0)) fail("prox_mu", "must be >= 0");
    if (!(lc_tau >= 0.0)) fail("lc_tau", "must be >= 0");
    if (!(rs_alpha > 0.0 && rs_alpha <= 1.0)) fail("rs_alpha", "must be in (0, 1]");
    if (!(decorr_alpha >= 0.0)) fail("decorr_alpha", "must be >= 0");
    if (local_steps < 1) fail("local_steps", "must be >= 1");
    if (!(lr > 0.0) || !std::isfinite(lr)) fail("lr", "must be a positive number");
    if (batch_size < 1) fail("batch_size", "must be >= 1");
    if (rounds < 1) fail("rounds", "must be >= 1");
    if (!(participation > 0.0 && participation <= 1.0)) fail("participation", "must be in (0, 1]");
    if (!(yogi.eta > 0.0)) fail("yogi.eta", "must be > 0");
    if (!(yogi.beta1 >= 0.0 && yogi.beta1 < 1.0)) fail("yogi.beta1", "must be in [0, 1)");
    if (!(yogi.beta2 >= 0.0 && yogi.beta2 < 1.0)) fail("yogi.beta2", "must be in [0, 1)");
    if (!(yogi.tau > 0.0)) fail("yogi.tau", "must be > 0");
    if (!(yogi.v0 >= 0.0)) fail("yogi.v0", "must be >= 0");
}

Json to_json(const AlgoConfig& a) {
    return {
        {"algorithm", to_string(a.algorithm)},
        {"prox_mu", a.prox_mu},
        {"lc_tau", a.lc_tau},
        {"rs_alpha", a.rs_alpha},
        {"decorr_alpha", a.decorr_alpha},
        {"server_opt", to_string(a.server_opt)},
        {"yogi",
         {{"eta", a.yogi.eta}, {"beta1", a.yogi.beta1}, {"beta2", a.yogi.beta2}, {"tau", a.yogi.tau}, {"v0", a.yogi.v0}}},
        {"local_steps", a.local_steps},
        {"lr", a.lr},
        {"batch_size", a.batch_size},
        {"rounds", a.rounds},
        {"participation", a.participation},
    };
}

AlgoConfig algo_from_json(const Json& j) {
    static const char* const kKeys[] = {"algorithm", "prox_mu", "lc_tau", "rs_alpha", "decorr_alpha", "server_opt",
                                        "yogi", "local_steps", "lr", "batch_size", "rounds", "participation"};
    static const char* const kYogiKeys[] = {"eta", "beta1", "beta2", "tau", "v0"};
    if (!j.is_object()) throw ConfigError("algo: expected an object");
    for (const auto& [k, v] : j.items())
        if (std::find_if(std::begin(kKeys), std::end(kKeys), [&](const char* n) { return k == n; }) == std::end(kKeys))
            throw ConfigError("algo." + k + ": unknown key");
    AlgoConfig a;
    auto read = [&](const char* key, auto& field) {
        if (!j.contains(key)) return;
        try {
            j.at(key).get_to(field);
        } catch (const Json::exception&) {
            throw ConfigError(std::string("algo.") + key + ": wrong type");
        }
    };
    std::string algorithm = to_string(a.algorithm), server = to_string(a.server_opt);
    read("algorithm", algorithm);
    read("server_opt", server);
    a.algorithm = parse_algorithm(algorithm);
    a.server_opt = parse_server_optimizer(server);
    read("prox_mu", a.prox_mu);
    read("lc_tau", a.lc_tau);
    read("rs_alpha", a.rs_alpha);
    read("decorr_alpha", a.decorr_alpha);
    read("local_steps", a.local_steps);
    read("lr", a.lr);
    read("batch_size", a.batch_size);
    read("rounds", a.rounds);
    read("participation", a.participation);
    if (j.contains("yogi")) {
        const Json& y = j["yogi"];
        if (!y.is_object()) throw ConfigError("algo.yogi: expected an object");
        for (const auto& [k, v] : y.items())
            if (std::find_if(std::begin(kYogiKeys), std::end(kYogiKeys), [&](const char* n) { return k == n; }) ==
                std::end(kYogiKeys))
                throw ConfigError("algo.yogi." + k + ": unknown key");
        auto ready = [&](const char* key, double& field) {
            if (!y.contains(key)) return;
            if (!y[key].is_number()) throw ConfigError(std::string("algo.yogi.") + key + ": wrong type");
            field = y[key].get<double>();
        };
        ready("eta", a.yogi.eta);
        ready("beta1", a.yogi.beta1);
        ready("beta2", a.yogi.beta2);
        ready("tau", a.yogi.tau);
        ready("v0", a.yogi.v0);
    }
    a.validate();
    return a;
}

ServerState init_server(const ParamSet& initial, const AlgoConfig& algo) {
    ServerState s;
    s.global_params = initial;
    if (algo.algorithm == Algorithm::scaffold) s.scaffold_c = initial.zeros_like();
    if (algo.server_opt == ServerOptimizer::yogi) {
        YogiState y{initial.zeros_like(), initial.zeros_like()};
        for (auto& e : y.v.entries) e.value.fill(algo.yogi.v0);
        s.yogi = std::move(y);
    }
    return s;
}

std::vector<double> fedlc_offsets(const std::vector<std::size_t>& histogram, double tau) {
    std::vector<double> out(histogram.size(), 0.0);
    for (std::size_t c = 0; c < histogram.size(); ++c)
        if (histogram[c] > 0) out[c] = -tau * std::pow(static_cast<double>(histogram[c]), -0.25);
    return out;
}

BatchSampler::BatchSampler(std::vector<std::size_t> indices, std::size_t batch_size, std::uint64_t seed)
    : order_(std::move(indices)), batch_(std::min(batch_size, order_.size())), pos_(order_.size()), rng_(seed) {
    if (order_.empty()) throw ConfigError("batch sampler: empty shard");
    if (batch_size == 0) throw ConfigError("batch sampler: batch size must be >= 1");
}

std::vector<std::size_t> BatchSampler::next() {
    if (pos_ + batch_ > order_.size()) {
        shuffle_in_place(order_, rng_);
        pos_ = 0;
    }
    std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(pos_ + batch_));
    pos_ += batch_;
    return out;
}

LocalResult local_train(const Model& model, const ServerState& server, const ClientState& client,
                        const Dataset& train, const AlgoConfig& algo, std::uint64_t seed) {
    if (client.shard.size() == 0)
        throw ConfigError("client " + std::to_string(client.shard.client_id) + " has an empty shard");
    const std::size_t C = train.num_classes;
    const bool scaffold = algo.algorithm == Algorithm::scaffold;
    if (scaffold && (!server.scaffold_c || !client.scaffold_c_i))
        throw ConfigError("scaffold requires server and client control variates");

    ParamSet start = server.global_params;
    if (algo.algorithm == Algorithm::fedbn && client.bn_local) overwrite_by_name(start, *client.bn_local);
    Model local(model.spec(), start);
    ParamSet& w = local.params();

    std::vector<double> offsets, factors;
    std::unique_ptr<bool[]> excluded;
    std::size_t excluded_count = 0;
    const auto& hist = client.shard.label_histogram;
    if (algo.algorithm == Algorithm::fedlc) {
        offsets = fedlc_offsets(hist, algo.lc_tau);
        if (algo.lc_tau > 0.0) {
            excluded.reset(new bool[C]);
            for (std::size_t c = 0; c < C; ++c) excluded[c] = c < hist.size() && hist[c] == 0;
            excluded_count = C;
        }
    } else if (algo.algorithm == Algorithm::fedrs) {
        factors.assign(C, 1.0);
        for (std::size_t c = 0; c < C && c < hist.size(); ++c)
            if (hist[c] == 0) factors[c] = algo.rs_alpha;
    }

    BatchSampler sampler(client.shard.indices, algo.batch_size, seed);
    ForwardOptions fwd;
    fwd.training = true;
    fwd.differentiable = true;
    double loss_sum = 0.0;
    for (std::size_t step = 0; step < algo.local_steps; ++step) {
        const auto batch = sampler.next();
        const Tensor x = train.gather_inputs(batch);
        const auto y = train.gather_labels(batch);
        Tape tape;
        auto r = local.forward(tape, x, fwd);
        Var logits = r.logits;
        if (algo.algorithm == Algorithm::fedlc) logits = shift_columns(logits, offsets);
        if (algo.algorithm == Algorithm::fedrs) logits = scale_columns(logits, factors);
        Var loss = softmax_cross_entropy(logits, y, std::span<const bool>(excluded.get(), excluded_count));
        if (algo.algorithm == Algorithm::feddecorr)
            loss = add(loss, scale(decorrelation_penalty(r.features), algo.decorr_alpha));
        double value = loss.value().item();
        tape.backward(loss);

        if (algo.algorithm == Algorithm::fedprox) {
            double prox = 0.0;
            for (std::size_t i = 0; i < w.size(); ++i) {
                if (!is_trainable(w[i].kind)) continue;
                const auto& g0 = server.global_params[i].value;
                for (std::size_t j = 0; j < g0.size(); ++j) {
                    const double d = w[i].value[j] - g0[j];
                    prox += d * d;
                }
            }
            value += 0.5 * algo.prox_mu * prox;
        }
        if (!std::isfinite(value)) throw NumericError("local loss is not finite");
        loss_sum += value;

        for (std::size_t i = 0; i < w.size(); ++i) {
            if (!is_trainable(w[i].kind)) continue;
            Tensor g = tape.grad(r.params[i]);
            if (algo.algorithm == Algorithm::fedprox) {
                const auto& g0 = server.global_params[i].value;
                for (std::size_t j = 0; j < g.size(); ++j) g[j] += algo.prox_mu * (w[i].value[j] - g0[j]);
            } else if (scaffold) {
                const auto& c = (*server.scaffold_c)[i].value;
                const auto& ci = (*client.scaffold_c_i)[i].value;
                for (std::size_t j = 0; j < g.size(); ++j) g[j] += c[j] - ci[j];
            }
            sgd_step(w[i].value, g, algo.lr);
        }
    }

    LocalResult out;
    out.mean_loss = loss_sum / static_cast<double>(algo.local_steps);
    if (scaffold) {
        ParamSet ci = *client.scaffold_c_i;
        const double inv = 1.0 / (static_cast<double>(algo.local_steps) * algo.lr);
        for (std::size_t i = 0; i < ci.size(); ++i) {
            if (!is_trainable(ci[i].kind)) continue;
            const auto& c = (*server.scaffold_c)[i].value;
            const auto& x = server.global_params[i].value;
            const auto& yi = w[i].value;
            for (std::size_t j = 0; j < ci[i].value.size(); ++j)
                ci[i].value[j] = ci[i].value[j] - c[j] + (x[j] - yi[j]) * inv;
        }
        out.scaffold_c_i = std::move(ci);
    }
    if (algo.algorithm == Algorithm::fedbn) out.bn_local = running_stats_of(w);
    require_finite(w, "local training");
    out.params = std::move(w);
    return out;
}

ParamSet aggregate(std::vector<ClientUpdate> updates, const ParamSet* fallback, const std::vector<ParamKind>& skip) {
    if (updates.empty()) throw ConfigError("aggregate: no client updates");
    std::sort(updates.begin(), updates.end(),
              [](const ClientUpdate& a, const ClientUpdate& b) { return a.client_id < b.client_id; });
    const ParamSet& first = *updates.front().params;
    double total = 0.0;
    for (const auto& u : updates) {
        if (!u.params->same_layout(first)) throw ShapeError("aggregate: client parameter layouts differ");
        total += static_cast<double>(u.weight);
    }
    if (total <= 0.0) throw ConfigError("aggregate: total sample weight is zero");
    if (fallback && !fallback->same_layout(first)) throw ShapeError("aggregate: fallback layout differs");

    ParamSet out = first.zeros_like();
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (std::find(skip.begin(), skip.end(), out[i].kind) != skip.end()) {
            if (!fallback) throw ConfigError("aggregate: skipped entries need a fallback");
            out[i].value = (*fallback)[i].value;
            continue;
        }
        auto& acc = out[i].value;
        for (const auto& u : updates) {
            const double wk = static_cast<double>(u.weight) / total;
            const auto& p = (*u.params)[i].value;
            for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += wk * p[j];
        }
    }
    return out;
}

void server_update(ServerState& state, const ParamSet& aggregated, const AlgoConfig& algo) {
    if (!aggregated.same_layout(state.global_params)) throw ShapeError("server_update: layout mismatch");
    if (algo.server_opt == ServerOptimizer::plain) {
        require_finite(aggregated, "server update");
        state.global_params = aggregated;
        ++state.round;
        return;
    }
    if (!state.yogi) throw ConfigError("server_update: yogi state missing");
    const auto& h = algo.yogi;
    ParamSet next = state.global_params;
    for (std::size_t i = 0; i < next.size(); ++i) {
        if (!is_trainable(next[i].kind)) {
            next[i].value = aggregated[i].value;
            continue;
        }
        auto& g = next[i].value;
        auto& m = state.yogi->m[i].value;
        auto& v = state.yogi->v[i].value;
        const auto& a = aggregated[i].value;
        for (std::size_t j = 0; j < g.size(); ++j) {
            const double delta = a[j] - g[j];
            const double d2 = delta * delta;
            m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * delta;
            const double diff = v[j] - d2;
            const double sign = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
            v[j] = v[j] - (1.0 - h.beta2) * d2 * sign;
            g[j] += h.eta * m[j] / (std::sqrt(v[j]) + h.tau);
        }
    }
    require_finite(next, "server update");
    state.global_params = std::move(next);
    ++state.round;
}

EvalResult evaluate(const Model& model, const Dataset& test, const std::vector<ClientShard>& shards,
                    const std::vector<ParamSet>& per_client_params) {
    if (!per_client_params.empty() && per_client_params.size() != shards.size())
        throw ConfigError("evaluate: one parameter set per shard expected");
    const std::size_t C = test.num_classes;
    EvalResult r;
    r.confusion.assign(C, std::vector<std::size_t>(C, 0));
    r.per_client_acc.assign(shards.size(), std::nan(""));

    std::vector<int> shared_pred;
    if (per_client_params.empty() && test.size() > 0) {
        shared_pred.reserve(test.size());
        constexpr std::size_t kChunk = 512;
        for (std::size_t lo = 0; lo < test.size(); lo += kChunk) {
            std::vector<std::size_t> idx;
            for (std::size_t i = lo; i < std::min(test.size(), lo + kChunk); ++i) idx.push_back(i);
            auto p = argmax_rows(model.predict(test.gather_inputs(idx)).first);
            shared_pred.insert(shared_pred.end(), p.begin(), p.end());
        }
    }

    std::size_t correct_total = 0, seen_total = 0;
    for (std::size_t k = 0; k < shards.size(); ++k) {
        const auto& s = shards[k];
        if (s.size() == 0) {
            r.warnings.push_back("client " + std::to_string(s.client_id) + " has an empty test shard");
            continue;
        }
        std::vector<int> pred;
        if (per_client_params.empty()) {
            for (auto i : s.indices) pred.push_back(shared_pred[i]);
        } else {
            Model own(model.spec(), per_client_params[k]);
            pred = argmax_rows(own.predict(test.gather_inputs(s.indices)).first);
        }
        std::size_t correct = 0;
        for (std::size_t t = 0; t < s.size(); ++t) {
            const int y = test.labels[s.indices[t]];
            ++r.confusion[static_cast<std::size_t>(y)][static_cast<std::size_t>(pred[t])];
            correct += pred[t] == y ? 1 : 0;
        }
        r.per_client_acc[k] = static_cast<double>(correct) / static_cast<double>(s.size());
        correct_total += correct;
        seen_total += s.size();
    }
    r.global_acc = seen_total ? static_cast<double>(correct_total) / static_cast<double>(seen_total) : std::nan("");
    r.per_class_acc.assign(C, std::nan(""));
    for (std::size_t c = 0; c < C; ++c) {
        std::size_t row = 0;
        for (auto v : r.confusion[c]) row += v;
        if (row) r.per_class_acc[c] = static_cast<double>(r.confusion[c][c]) / static_cast<double>(row);
    }
    return r;
}

Json to_json(const RoundRecord& r) {
    return {
        {"round", r.round},
        {"global_acc", r.global_acc},
        {"per_client_acc", r.per_client_acc},
        {"per_class_acc", r.per_class_acc},
        {"mean_local_loss", r.mean_local_loss},
        {"diag", r.diag.is_null() ? Json::object() : r.diag},
    };
}

std::uint64_t local_seed(std::uint64_t root, std::size_t round, std::size_t client_id) {
    return derive_seed(root, {kLocalTag, round, client_id});
}

std::vector<std::size_t> sample_clients(std::size_t num_clients, double fraction, std::uint64_t seed,
                                        std::size_t round) {
    std::vector<std::size_t> ids(num_clients);
    for (std::size_t i = 0; i < num_clients; ++i) ids[i] = i;
    if (fraction >= 1.0 || num_clients == 0) return ids;
    const auto count = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(fraction * static_cast<double>(num_clients))), 1, num_clients);
    Rng rng(derive_seed(seed, {kSampleTag, round}));
    shuffle_in_place(ids, rng);
    ids.resize(count);
    std::sort(ids.begin(), ids.end());
    return ids;
}

ExperimentResult run_experiment(const ExperimentInputs& in) {
    in.algo.validate();
    if (!in.train || !in.test) throw ConfigError("run_experiment: train and test datasets are required");
    if (in.train_shards.empty()) throw ConfigError("run_experiment: no clients");
    if (in.eval_every < 1) throw ConfigError("eval_every must be >= 1");
    const bool fedbn = in.algo.algorithm == Algorithm::fedbn;
    const bool scaffold = in.algo.algorithm == Algorithm::scaffold;

    ExperimentResult res;
    res.server = init_server(in.model.params(), in.algo);
    for (const auto& s : in.train_shards) {
        ClientState c;
        c.shard = s;
        if (scaffold) c.scaffold_c_i = in.model.params().zeros_like();
        res.clients.push_back(std::move(c));
    }
    std::vector<std::size_t> eligible;
    for (std::size_t k = 0; k < res.clients.size(); ++k)
        if (res.clients[k].shard.size() > 0) eligible.push_back(k);
    if (eligible.empty()) throw ConfigError("run_experiment: every client shard is empty");

    const std::size_t threads = std::max<std::size_t>(1, in.threads);
    for (std::size_t round = 1; round <= in.algo.rounds; ++round) {
        std::vector<std::size_t> chosen;
        for (auto i : sample_clients(eligible.size(), in.algo.participation, in.seed, round))
            chosen.push_back(eligible[i]);

        std::vector<LocalResult> results(chosen.size());
        std::atomic<std::size_t> next{0};
        std::exception_ptr error;
        std::mutex error_mutex;
        auto worker = [&] {
            for (std::size_t t = next++; t < chosen.size(); t = next++) {
                try {
                    const auto k = chosen[t];
                    results[t] = local_train(in.model, res.server, res.clients[k], *in.train, in.algo,
                                             local_seed(in.seed, round, res.clients[k].shard.client_id));
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        };
        if (threads == 1 || chosen.size() == 1) {
            worker();
        } else {
            std::vector<std::thread> pool;
            for (std::size_t t = 0; t < std::min(threads, chosen.size()); ++t) pool.emplace_back(worker);
            for (auto& th : pool) th.join();
        }
        if (error) std::rethrow_exception(error);

        std::vector<ClientUpdate> updates;
        double loss = 0.0;
        for (std::size_t t = 0; t < chosen.size(); ++t) {
            const auto& shard = res.clients[chosen[t]].shard;
            updates.push_back({shard.client_id, shard.size(), &results[t].params});
            loss += results[t].mean_loss;
        }
        std::vector<ParamKind> skip;
        if (fedbn) skip = {ParamKind::bn_running_mean, ParamKind::bn_running_var};
        ParamSet agg = aggregate(updates, &res.server.global_params, skip);

        if (scaffold) {
            ParamSet& c = *res.server.scaffold_c;
            const double inv_n = 1.0 / static_cast<double>(res.clients.size());
            for (std::size_t t = 0; t < chosen.size(); ++t) {
                auto& client = res.clients[chosen[t]];
                const ParamSet& updated = *results[t].scaffold_c_i;
                for (std::size_t i = 0; i < c.size(); ++i)
                    for (std::size_t j = 0; j < c[i].value.size(); ++j)
                        c[i].value[j] += inv_n * (updated[i].value[j] - (*client.scaffold_c_i)[i].value[j]);
            }
            for (std::size_t t = 0; t < chosen.size(); ++t)
                res.clients[chosen[t]].scaffold_c_i = std::move(results[t].scaffold_c_i);
        }
        if (fedbn)
            for (std::size_t t = 0; t < chosen.size(); ++t) res.clients[chosen[t]].bn_local = std::move(results[t].bn_local);

        server_update(res.server, agg, in.algo);
        if (in.on_state) in.on_state(res.server, res.clients);

        if (round % in.eval_every == 0 || round == in.algo.rounds) {
            Model global(in.model.spec(), res.server.global_params);
            std::vector<ParamSet> own;
            if (fedbn)
                for (std::size_t k = 0; k < in.test_shards.size(); ++k) {
                    ParamSet p = res.server.global_params;
                    if (k < res.clients.size() && res.clients[k].bn_local) overwrite_by_name(p, *res.clients[k].bn_local);
                    own.push_back(std::move(p));
                }
            auto ev = evaluate(global, *in.test, in.test_shards, own);
            RoundRecord rec;
            rec.round = round;
            rec.global_acc = ev.global_acc;
            rec.per_client_acc = std::move(ev.per_client_acc);
            rec.per_class_acc = std::move(ev.per_class_acc);
            rec.mean_local_loss = loss / static_cast<double>(chosen.size());
            rec.diag = Json::object();
            rec.diag["participants"] = chosen.size();
            if (!ev.warnings.empty()) rec.diag["warnings"] = ev.warnings;
            if (in.on_round) in.on_round(rec);
            res.records.push_back(std::move(rec));
        }
    }
    res.final_model = Model(in.model.spec(), res.server.global_params);
    return res;
}

}  // namespace fednorm
