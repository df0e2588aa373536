#include "fednorm/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <tuple>

#include "fednorm/analysis.hpp"
#include "fednorm/equivalence.hpp"
#include "fednorm/errors.hpp"
#include "fednorm/gradient_suite.hpp"

#ifndef FEDNORM_VERSION
#define FEDNORM_VERSION "0.0.0"
#endif

namespace fednorm {

namespace fs = std::filesystem;

const char* version() { return FEDNORM_VERSION; }

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const NumericError*>(&e) || dynamic_cast<const DegenerateInputError*>(&e)) return kExitNumeric;
    return kExitConfig;
}

namespace {

/// Strict reader over one config section.
class Section {
public:
    Section(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
    }

    void allow(std::initializer_list<const char*> keys) const {
        for (const auto& [k, v] : j_.items())
            if (std::none_of(keys.begin(), keys.end(), [&](const char* n) { return k == n; }))
                throw ConfigError(key(k) + ": unknown key");
    }

    void read(const char* k, std::size_t& out) const {
        if (!j_.contains(k)) return;
        const Json& v = j_.at(k);
        if (!v.is_number_unsigned()) throw ConfigError(key(k) + ": expected a non-negative integer");
        out = v.get<std::size_t>();
    }
    void read(const char* k, double& out) const {
        if (!j_.contains(k)) return;
        const Json& v = j_.at(k);
        if (!v.is_number()) throw ConfigError(key(k) + ": expected a number");
        out = v.get<double>();
    }
    void read(const char* k, std::string& out) const {
        if (!j_.contains(k)) return;
        const Json& v = j_.at(k);
        if (!v.is_string()) throw ConfigError(key(k) + ": expected a string");
        out = v.get<std::string>();
    }
    void read(const char* k, std::vector<std::size_t>& out) const {
        if (!j_.contains(k)) return;
        const Json& v = j_.at(k);
        if (!v.is_array()) throw ConfigError(key(k) + ": expected an array");
        out.clear();
        for (const auto& e : v) {
            if (!e.is_number_unsigned()) throw ConfigError(key(k) + ": expected non-negative integers");
            out.push_back(e.get<std::size_t>());
        }
    }
    /// Enumerations stored as strings; parse errors are re-tagged with the key.
    template <class T, class Parse>
    void read_enum(const char* k, T& out, Parse parse) const {
        if (!j_.contains(k)) return;
        std::string s;
        read(k, s);
        try {
            out = parse(s);
        } catch (const ConfigError&) {
            throw ConfigError(key(k) + ": unknown value '" + s + "'");
        }
    }

    bool has(const char* k) const { return j_.contains(k); }
    const Json& at(const char* k) const { return j_.at(k); }
    std::string key(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

private:
    const Json& j_;
    std::string path_;
};

Json to_json(const DatasetConfig& d) {
    return {{"source", d.source},
            {"num_classes", d.num_classes},
            {"samples_per_class", d.samples_per_class},
            {"dim", d.dim},
            {"separation", d.separation},
            {"test_fraction", d.test_fraction},
            {"train_images", d.train_images},
            {"train_labels", d.train_labels},
            {"test_images", d.test_images},
            {"test_labels", d.test_labels}};
}

DatasetConfig dataset_from_json(const Json& j) {
    Section s(j, "dataset");
    s.allow({"source", "num_classes", "samples_per_class", "dim", "separation", "test_fraction", "train_images",
             "train_labels", "test_images", "test_labels"});
    DatasetConfig d;
    s.read("source", d.source);
    if (d.source != "gaussian_mixture" && d.source != "idx" && d.source != "csv")
        throw ConfigError("dataset.source: unknown value '" + d.source + "'");
    s.read("num_classes", d.num_classes);
    s.read("samples_per_class", d.samples_per_class);
    s.read("dim", d.dim);
    s.read("separation", d.separation);
    s.read("test_fraction", d.test_fraction);
    s.read("train_images", d.train_images);
    s.read("train_labels", d.train_labels);
    s.read("test_images", d.test_images);
    s.read("test_labels", d.test_labels);
    if (d.num_classes < 2) throw ConfigError("dataset.num_classes: need at least 2 classes");
    if (!(d.test_fraction >= 0.0 && d.test_fraction < 1.0))
        throw ConfigError("dataset.test_fraction: must lie in [0, 1)");
    if (d.source == "gaussian_mixture" && (d.samples_per_class == 0 || d.dim == 0))
        throw ConfigError("dataset.samples_per_class: synthetic data needs samples and dimensions");
    if (d.source != "gaussian_mixture" && d.train_images.empty())
        throw ConfigError("dataset.train_images: required for source '" + d.source + "'");
    if (d.source == "idx" && d.train_labels.empty()) throw ConfigError("dataset.train_labels: required for idx");
    return d;
}

Json to_json(const PartitionConfig& p) {
    return {{"scheme", to_string(p.scheme)}, {"num_clients", p.num_clients}, {"n", p.n}, {"beta", p.beta}};
}

PartitionConfig partition_from_json(const Json& j) {
    Section s(j, "partition");
    s.allow({"scheme", "num_clients", "n", "beta"});
    PartitionConfig p;
    s.read_enum("scheme", p.scheme, parse_partition_scheme);
    s.read("num_clients", p.num_clients);
    s.read("n", p.n);
    s.read("beta", p.beta);
    if (p.num_clients == 0) throw ConfigError("partition.num_clients: must be positive");
    if (p.scheme == PartitionScheme::n_class && p.n == 0) throw ConfigError("partition.n: must be positive");
    if (p.scheme == PartitionScheme::dirichlet && !(p.beta > 0.0)) throw ConfigError("partition.beta: must be positive");
    return p;
}

Json to_json(const ModelConfig& m) {
    return {{"preset", m.preset},
            {"hidden", m.hidden},
            {"width", m.width},
            {"blocks", m.blocks},
            {"residual", to_string(m.residual)},
            {"norm_mode", to_string(m.norm_mode)},
            {"bias_policy", to_string(m.bias_policy)},
            {"activation", {{"pos_slope", m.activation.pos_slope}, {"neg_slope", m.activation.neg_slope}}},
            {"gn_groups", m.gn_groups}};
}

ModelConfig model_from_json(const Json& j) {
    Section s(j, "model");
    s.allow({"preset", "hidden", "width", "blocks", "residual", "norm_mode", "bias_policy", "activation", "gn_groups"});
    ModelConfig m;
    s.read("preset", m.preset);
    if (m.preset != "mlp" && m.preset != "cnn" && m.preset != "resmlp")
        throw ConfigError("model.preset: unknown value '" + m.preset + "'");
    s.read("hidden", m.hidden);
    s.read("width", m.width);
    s.read("blocks", m.blocks);
    s.read_enum("residual", m.residual, parse_residual_variant);
    s.read_enum("norm_mode", m.norm_mode, parse_norm_mode);
    s.read_enum("bias_policy", m.bias_policy, parse_bias_policy);
    if (s.has("activation")) {
        Section a(s.at("activation"), "model.activation");
        a.allow({"pos_slope", "neg_slope"});
        a.read("pos_slope", m.activation.pos_slope);
        a.read("neg_slope", m.activation.neg_slope);
    }
    s.read("gn_groups", m.gn_groups);
    return m;
}

Json read_json_file(const std::string& path, const char* what) {
    std::ifstream in(path);
    if (!in) throw ConfigError(std::string(what) + ": cannot open '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    try {
        return Json::parse(buf.str());
    } catch (const Json::parse_error& e) {
        throw ConfigError(std::string(what) + ": '" + path + "' is not valid JSON: " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot write '" + path.string() + "'");
    f << text;
    if (!f) throw ConfigError("write failed for '" + path.string() + "'");
}

Dataset flatten_samples(const Dataset& d) {
    if (d.inputs.rank() <= 2) return d;
    Dataset out = d;
    out.inputs = d.inputs.reshaped(Shape{d.size(), d.inputs.size() / std::max<std::size_t>(d.size(), 1)});
    return out;
}

}  // namespace

Json to_json(const ExperimentConfig& c) {
    return {{"dataset", to_json(c.dataset)}, {"partition", to_json(c.partition)}, {"model", to_json(c.model)},
            {"algo", to_json(c.algo)},       {"eval_every", c.eval_every},         {"seed", c.seed},
            {"output", c.output}};
}

ExperimentConfig config_from_json(const Json& j) {
    Section s(j, "");
    if (!j.is_object()) throw ConfigError("config: expected an object");
    s.allow({"dataset", "partition", "model", "algo", "eval_every", "seed", "output"});
    ExperimentConfig c;
    if (s.has("dataset")) c.dataset = dataset_from_json(s.at("dataset"));
    if (s.has("partition")) c.partition = partition_from_json(s.at("partition"));
    if (s.has("model")) c.model = model_from_json(s.at("model"));
    if (s.has("algo")) {
        // Missing algorithm keys fall back to the experiment defaults.
        Json merged = to_json(ExperimentConfig::default_algo());
        if (!s.at("algo").is_object()) throw ConfigError("algo: expected an object");
        merged.merge_patch(s.at("algo"));
        c.algo = algo_from_json(merged);
    }
    c.algo.validate();
    s.read("eval_every", c.eval_every);
    s.read("seed", c.seed);
    s.read("output", c.output);
    if (c.eval_every == 0) throw ConfigError("eval_every: must be positive");
    return c;
}

std::string render_config(const ExperimentConfig& c) { return to_json(c).dump(2) + "\n"; }

ExperimentConfig parse_config(const std::string& text) {
    Json j;
    try {
        j = Json::parse(text);
    } catch (const Json::parse_error& e) {
        throw ConfigError(std::string("config: not valid JSON: ") + e.what());
    }
    return config_from_json(j);
}

ExperimentConfig load_config(const std::string& path) { return config_from_json(read_json_file(path, "config")); }

void apply_override(Json& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "': expected key.path=value");
    const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
    Json value;
    try {
        value = Json::parse(text);
    } catch (const Json::parse_error&) {
        value = text;
    }
    Json* node = &config;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string part = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ConfigError("override '" + assignment + "': empty key segment");
        if (!node->is_object()) throw ConfigError(path.substr(0, start ? start - 1 : 0) + ": not an object");
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        node = &(*node)[part];
        if (node->is_null()) *node = Json::object();
        start = dot + 1;
    }
}

std::pair<Dataset, Dataset> load_datasets(const ExperimentConfig& c) {
    const DatasetConfig& d = c.dataset;
    Dataset full, test;
    bool has_test = false;
    if (d.source == "gaussian_mixture") {
        full = generate_gaussian_mixture(d.num_classes, d.samples_per_class, d.dim, d.separation, c.seed);
    } else if (d.source == "idx") {
        full = load_idx(d.train_images, d.train_labels, d.num_classes);
        if (!d.test_images.empty()) {
            if (d.test_labels.empty()) throw ConfigError("dataset.test_labels: required with test_images");
            test = load_idx(d.test_images, d.test_labels, d.num_classes);
            has_test = true;
        }
    } else {
        full = load_csv(d.train_images, d.num_classes);
        if (!d.test_images.empty()) {
            test = load_csv(d.test_images, d.num_classes);
            has_test = true;
        }
    }
    std::pair<Dataset, Dataset> out =
        has_test ? std::pair{std::move(full), std::move(test)} : train_test_split(full, d.test_fraction, c.seed);
    if (c.model.preset != "cnn") {
        out.first = flatten_samples(out.first);
        out.second = flatten_samples(out.second);
    }
    return out;
}

NetworkSpec network_spec(const ModelConfig& m, const Shape& sample_shape, std::size_t num_classes) {
    NetworkSpec spec;
    if (m.preset == "cnn") {
        if (sample_shape.size() != 3) throw ConfigError("model.preset: cnn needs [channels x height x width] samples");
        spec = cnn_spec(num_classes, m.norm_mode, m.bias_policy);
        spec.input_shape = sample_shape;
    } else {
        if (sample_shape.size() != 1) throw ConfigError("model.preset: " + m.preset + " needs flat samples");
        if (m.preset == "mlp")
            spec = mlp_spec(sample_shape[0], m.hidden, num_classes, m.norm_mode, m.bias_policy);
        else
            spec = resmlp_spec(sample_shape[0], m.width, m.blocks, m.residual, num_classes, m.norm_mode, m.bias_policy);
    }
    spec.activation = m.activation;
    spec.gn_groups = m.gn_groups;
    validate(spec);
    return spec;
}

PreparedExperiment prepare(const ExperimentConfig& c) {
    PreparedExperiment p;
    std::tie(p.train, p.test) = load_datasets(c);
    p.plan.scheme = c.partition.scheme;
    p.plan.num_clients = c.partition.num_clients;
    p.plan.n = c.partition.n;
    p.plan.beta = c.partition.beta;
    p.plan.seed = c.seed;
    p.train_shards = partition(p.train, p.plan);
    p.test_partition = partition_test_like_train(p.test, p.plan);
    p.spec = network_spec(c.model, p.train.sample_shape(), p.train.num_classes);
    return p;
}

ExperimentInputs experiment_inputs(const PreparedExperiment& p, const ExperimentConfig& c, std::size_t threads) {
    ExperimentInputs in;
    in.model = build(p.spec, c.seed);
    in.train = &p.train;
    in.test = &p.test;
    in.train_shards = p.train_shards;
    in.test_shards = p.test_partition.shards;
    in.algo = c.algo;
    in.seed = c.seed;
    in.eval_every = c.eval_every;
    in.threads = threads;
    return in;
}

std::size_t resolve_threads(std::optional<std::size_t> flag) {
    std::size_t n = 1;
    if (flag) {
        n = *flag;
    } else if (const char* env = std::getenv("FEDNORM_THREADS"); env && *env) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (*end != '\0' || v < 1) throw ConfigError(std::string("FEDNORM_THREADS: expected a positive integer, got '") + env + "'");
        n = static_cast<std::size_t>(v);
    }
    if (n == 0) throw ConfigError("--threads: must be positive");
    return n;
}

ExperimentConfig resolve_config(const CommonOptions& o) {
    Json j = o.config_path.empty() ? to_json(ExperimentConfig{}) : read_json_file(o.config_path, "config");
    for (const auto& ov : o.overrides) apply_override(j, ov);
    ExperimentConfig c = config_from_json(j);
    if (o.seed) c.seed = *o.seed;
    if (o.out) c.output = *o.out;
    return c;
}

int cmd_run(const CommonOptions& o, std::ostream& out, std::ostream& err) {
    const ExperimentConfig c = resolve_config(o);
    const std::size_t threads = resolve_threads(o.threads);
    const PreparedExperiment p = prepare(c);
    for (const auto& w : p.test_partition.warnings) err << "warning: " << w << "\n";

    const fs::path dir(c.output);
    fs::create_directories(dir);
    const Json manifest = {{"format", "fednorm-run-manifest"},
                           {"version", version()},
                           {"seed", c.seed},
                           {"config", to_json(c)}};
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");

    std::ofstream metrics(dir / "metrics.jsonl", std::ios::binary);
    if (!metrics) throw ConfigError("cannot write '" + (dir / "metrics.jsonl").string() + "'");
    ExperimentInputs in = experiment_inputs(p, c, threads);
    in.on_round = [&](const RoundRecord& r) {
        metrics << to_json(r).dump() << "\n";
        metrics.flush();
    };
    const ExperimentResult result = run_experiment(in);

    const RoundRecord& last = result.records.back();
    Json summary = to_json(last);
    summary.erase("diag");
    summary["num_clients"] = p.train_shards.size();
    summary["test_warnings"] = p.test_partition.warnings;
    write_text(dir / "summary.json", summary.dump(2) + "\n");
    save_checkpoint((dir / "model.json").string(), result.final_model);

    out << "round " << last.round << " global_acc " << last.global_acc << " -> " << dir.string() << "\n";
    return kExitOk;
}

int cmd_verify(const VerifyOptions& o, std::ostream& out, std::ostream&) {
    static const char* const kSuites[] = {"fn_reduction", "ln_reduction", "prop3", "gradients", "all"};
    if (std::find(std::begin(kSuites), std::end(kSuites), o.suite) == std::end(kSuites))
        throw ConfigError("verify: unknown suite '" + o.suite + "'");
    const bool all = o.suite == "all";
    bool ok = true;
    auto emit = [&](const Json& report) {
        ok = ok && report.at("passed").get<bool>();
        out << report.dump() << "\n";
    };

    NetworkSpec net = mlp_spec(20, {32, 16, 24}, 10);
    if (o.inject_bias) {
        net.bias_policy = BiasPolicy::all_biases;
        net.relax_bias_assumption = true;
    }
    if (all || o.suite == "fn_reduction") emit(to_json(check_fn_reduction(net, o.seed, o.trials)));
    if (all || o.suite == "ln_reduction") emit(to_json(check_ln_reduction(net, o.seed + 1, o.trials)));
    if (all || o.suite == "prop3") {
        const std::size_t inputs = std::max<std::size_t>(o.trials, 1000);
        emit(to_json(check_fn_prediction_equivalence(build(mlp_spec(20, {32, 16, 24}, 10), o.seed + 2), o.seed + 3, inputs)));
        NetworkSpec pre = mlp_spec(20, {32, 16, 24}, 10), post = pre;
        pre.norm_mode = NormMode::ln_pre;
        post.norm_mode = NormMode::ln_layerwise;
        const BuildOptions random{.randomize_all = true};
        emit(to_json(check_ln_transform(build(pre, o.seed + 4, random), LnPlacement::pre_activation, o.seed + 5, inputs)));
        emit(to_json(
            check_ln_transform(build(post, o.seed + 6, random), LnPlacement::post_activation, o.seed + 7, inputs)));
    }
    if (all || o.suite == "gradients") emit(to_json(run_gradient_suite(o.seed)));
    return ok ? kExitOk : kExitVerification;
}

int cmd_partition(const CommonOptions& o, std::ostream& out, std::ostream& err) {
    const ExperimentConfig c = resolve_config(o);
    const PreparedExperiment p = prepare(c);
    for (const auto& w : p.test_partition.warnings) err << "warning: " << w << "\n";
    std::ostringstream text;
    for (const auto& s : p.train_shards) text << to_json(s).dump() << "\n";
    if (o.out) {
        const fs::path path(*o.out);
        if (path.has_parent_path()) fs::create_directories(path.parent_path());
        write_text(path, text.str());
    } else {
        out << text.str();
    }
    return kExitOk;
}

int cmd_analyze(const CommonOptions& o, const AnalyzeOptions& a, std::ostream& out, std::ostream&) {
    if (a.checkpoint.empty()) throw ConfigError("analyze: --checkpoint is required");
    if (!fs::exists(a.checkpoint)) throw ConfigError("analyze: checkpoint '" + a.checkpoint + "' not found");
    CommonOptions data_opts = o;
    data_opts.out.reset();
    const ExperimentConfig c = resolve_config(data_opts);
    Model model = load_checkpoint(a.checkpoint);
    const PreparedExperiment p = prepare(c);
    if (model.spec().input_shape != p.train.sample_shape())
        throw ShapeError("analyze: checkpoint expects samples of shape " + shape_string(model.spec().input_shape) +
                         ", dataset has " + shape_string(p.train.sample_shape()));
    if (a.client >= p.train_shards.size()) throw ConfigError("analyze: --client out of range");

    LocalSgdOptions sgd;
    sgd.steps = a.steps;
    sgd.lr = a.lr.value_or(c.algo.lr);
    sgd.batch_size = c.algo.batch_size;
    sgd.seed = local_seed(c.seed, 0, a.client);
    const Tensor probe = p.test.gather_inputs(select_probe(p.test, a.probe_size, c.seed));

    Json report = {{"probe", a.probe}, {"checkpoint", a.checkpoint}};
    if (a.probe == "spectrum") {
        report["spectrum"] = to_json(spectral_gap(model, probe));
    } else if (a.probe == "norms") {
        report["client"] = a.client;
        report["trace"] = to_json(norm_trace(model, p.train, p.train_shards[a.client], probe, sgd));
    } else if (a.probe == "overfit") {
        report["client"] = a.client;
        report["overfit"] = to_json(local_overfit_probe(model, p.train, p.train_shards[a.client], p.test, sgd));
    } else {
        throw ConfigError("analyze: unknown probe '" + a.probe + "'");
    }
    if (o.out) {
        const fs::path path(*o.out);
        if (path.has_parent_path()) fs::create_directories(path.parent_path());
        write_text(path, report.dump(2) + "\n");
    } else {
        out << report.dump() << "\n";
    }
    return kExitOk;
}

}  // namespace fednorm
