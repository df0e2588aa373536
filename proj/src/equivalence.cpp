#include "fednorm/equivalence.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>

#include "fednorm/errors.hpp"
#include "fednorm/ops.hpp"
#include "fednorm/rng.hpp"

namespace fednorm {

namespace {

constexpr std::size_t kMaxRedraws = 1000;

Tensor random_input(const NetworkSpec& spec, Rng& rng) {
    Tensor x(spec.input_shape);
    for (auto& v : x.values()) v = uniform(rng, -2.0, 2.0);
    return x;
}

double rel_diff(double a, double b) {
    const double den = std::max({std::abs(a), std::abs(b), 1e-300});
    return std::abs(a - b) / den;
}

// Runs `trial` until it completes without a degenerate input, redrawing
// with a fresh stream each time. Returns the trial's measurement.
template <class F>
auto run_nondegenerate(std::uint64_t seed, std::size_t t, std::size_t& skips, F&& trial) {
    for (std::size_t attempt = 0; attempt < kMaxRedraws; ++attempt) {
        Rng rng(derive_seed(seed, {t, attempt}));
        try {
            return trial(rng);
        } catch (const DegenerateInputError&) {
            ++skips;
        }
    }
    throw NumericError("trial " + std::to_string(t) + ": no non-degenerate draw in " + std::to_string(kMaxRedraws) +
                       " attempts");
}

EquivalenceReport dual_forward_check(std::string name, NetworkSpec spec, NormMode layerwise, NormMode reduced,
                                     std::uint64_t seed, std::size_t trials, double tol) {
    EquivalenceReport r;
    r.check = std::move(name);
    r.tolerance = tol;
    spec.norm_mode = layerwise;
    std::size_t agree = 0;
    for (std::size_t t = 0; t < trials; ++t) {
        auto [diff, same_argmax] = run_nondegenerate(seed, t, r.degenerate_skips, [&](Rng& rng) {
            const Model a = build(spec, rng(), {.randomize_all = true});
            const Model b = a.with_norm_mode(reduced);
            const Tensor x = random_input(spec, rng);
            auto [la, fa] = a.predict(x, 0.0);
            auto [lb, fb] = b.predict(x, 0.0);
            return std::pair{max_abs_diff(fa, fb), argmax_rows(la) == argmax_rows(lb)};
        });
        agree += same_argmax ? 1 : 0;
        if (diff > r.max_abs_output_diff) {
            r.max_abs_output_diff = diff;
            if (diff > tol && !r.witness) {
                std::ostringstream os;
                os << "trial " << t << ": feature difference " << diff;
                r.witness = os.str();
            }
        }
    }
    r.num_trials = trials;
    r.argmax_agreement_rate = trials ? static_cast<double>(agree) / static_cast<double>(trials) : 1.0;
    r.passed = r.max_abs_output_diff <= tol;
    return r;
}

void require_dense_only(const NetworkSpec& spec, const char* what) {
    for (const auto& l : spec.layers)
        if (!std::holds_alternative<DenseLayer>(l))
            throw ConfigError(std::string(what) + " is defined for dense-only networks");
}

// P U: subtract the mean of every column. A vector is one column.
void project_rows(Tensor& u) {
    if (u.rank() == 1) {
        double mean = 0;
        for (double v : u.values()) mean += v;
        mean /= static_cast<double>(u.size());
        for (auto& v : u.values()) v -= mean;
        return;
    }
    const std::size_t rows = u.dim(0), cols = u.row_size();
    for (std::size_t c = 0; c < cols; ++c) {
        double mean = 0;
        for (std::size_t r = 0; r < rows; ++r) mean += u[r * cols + c];
        mean /= static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r) u[r * cols + c] -= mean;
    }
}

// U P: subtract the mean of every row.
void project_columns(Tensor& u) {
    const std::size_t rows = u.rows(), cols = u.row_size();
    for (std::size_t r = 0; r < rows; ++r) {
        auto row = u.row(r);
        double mean = 0;
        for (double v : row) mean += v;
        mean /= static_cast<double>(cols);
        for (auto& v : row) v -= mean;
    }
}

}  // namespace

Json to_json(const EquivalenceReport& r) {
    Json j = {{"check", r.check},
              {"passed", r.passed},
              {"max_abs_output_diff", r.max_abs_output_diff},
              {"argmax_agreement_rate", r.argmax_agreement_rate},
              {"num_trials", r.num_trials},
              {"degenerate_skips", r.degenerate_skips},
              {"tolerance", r.tolerance}};
    j["witness"] = r.witness ? Json(*r.witness) : Json(nullptr);
    return j;
}

EquivalenceReport check_fn_reduction(const NetworkSpec& spec, std::uint64_t seed, std::size_t trials, double tol) {
    return dual_forward_check("fn_reduction", spec, NormMode::fn_layerwise, NormMode::fn_last, seed, trials, tol);
}

EquivalenceReport check_ln_reduction(const NetworkSpec& spec, std::uint64_t seed, std::size_t trials, double tol) {
    return dual_forward_check("ln_reduction", spec, NormMode::ln_layerwise, NormMode::ln_reduced, seed, trials, tol);
}

EquivalenceReport search_reduction_counterexample(NetworkSpec spec, ReductionKind kind, std::uint64_t seed,
                                                  std::size_t max_trials, double threshold) {
    spec.bias_policy = BiasPolicy::all_biases;
    spec.relax_bias_assumption = true;
    const bool fn = kind == ReductionKind::feature_norm;
    const std::string name = fn ? "fn_counterexample" : "ln_counterexample";
    EquivalenceReport r;
    r.check = name;
    r.tolerance = threshold;
    spec.norm_mode = fn ? NormMode::fn_layerwise : NormMode::ln_layerwise;
    const NormMode reduced = fn ? NormMode::fn_last : NormMode::ln_reduced;
    for (std::size_t t = 0; t < max_trials; ++t) {
        const double diff = run_nondegenerate(seed, t, r.degenerate_skips, [&](Rng& rng) {
            const Model a = build(spec, rng(), {.randomize_all = true});
            const Model b = a.with_norm_mode(reduced);
            const Tensor x = random_input(spec, rng);
            return max_abs_diff(a.predict(x, 0.0).second, b.predict(x, 0.0).second);
        });
        r.num_trials = t + 1;
        r.max_abs_output_diff = std::max(r.max_abs_output_diff, diff);
        if (diff > threshold) {
            std::ostringstream os;
            os << "trial " << t << ": with inner biases the reduced network differs by " << diff;
            r.witness = os.str();
            r.passed = true;
            break;
        }
    }
    return r;
}

EquivalenceReport check_fn_prediction_equivalence(const Model& vanilla, std::uint64_t seed, std::size_t trials) {
    if (vanilla.spec().norm_mode != NormMode::none)
        throw ConfigError("prediction equivalence expects a model without normalization");
    NetworkSpec fs = vanilla.spec();
    fs.norm_mode = NormMode::fn_last;
    fs.relax_bias_assumption = true;
    const Model fn(fs, vanilla.params());

    EquivalenceReport r;
    r.check = "fn_prediction_equivalence";
    std::size_t agree = 0;
    for (std::size_t t = 0; t < trials; ++t) {
        const bool same = run_nondegenerate(seed, t, r.degenerate_skips, [&](Rng& rng) {
            const Tensor x = random_input(vanilla.spec(), rng);
            return argmax_rows(vanilla.predict(x, 0.0).first) == argmax_rows(fn.predict(x, 0.0).first);
        });
        if (same) ++agree;
        else if (!r.witness) r.witness = "trial " + std::to_string(t) + ": argmax differs";
    }
    r.num_trials = trials;
    r.argmax_agreement_rate = trials ? static_cast<double>(agree) / static_cast<double>(trials) : 1.0;
    r.passed = agree == trials;
    return r;
}

std::string to_string(LnPlacement p) { return p == LnPlacement::pre_activation ? "pre_activation" : "post_activation"; }

LnPlacement parse_ln_placement(const std::string& s) {
    if (s == "pre_activation" || s == "pre") return LnPlacement::pre_activation;
    if (s == "post_activation" || s == "post") return LnPlacement::post_activation;
    throw ConfigError("unknown LN placement '" + s + "'");
}

ParamSet project_parameters(const Model& ln_model, LnPlacement placement) {
    const NetworkSpec& spec = ln_model.spec();
    require_dense_only(spec, "the LN-to-vanilla transform");
    if (spec.bias_policy == BiasPolicy::all_biases)
        throw ConfigError("the LN-to-vanilla transform needs bias-free layers after the first");
    const bool pre = placement == LnPlacement::pre_activation;
    if (pre && spec.norm_mode != NormMode::ln_pre)
        throw ConfigError("pre-activation transform expects norm mode ln_pre, got " + to_string(spec.norm_mode));
    if (!pre && spec.norm_mode != NormMode::ln_layerwise && spec.norm_mode != NormMode::ln_reduced)
        throw ConfigError("post-activation transform expects norm mode ln_layerwise or ln_reduced, got " +
                          to_string(spec.norm_mode));

    ParamSet out = ln_model.params();
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const std::string p = "l" + std::to_string(i) + ".";
        if (pre) {
            project_rows(out.find(p + "weight")->value);
            if (ParamEntry* b = out.find(p + "bias")) project_rows(b->value);
        } else if (i > 0) {
            project_columns(out.find(p + "weight")->value);
        }
    }
    if (!pre) project_columns(out.find("classifier.weight")->value);
    return out;
}

Model ln_to_vanilla_transform(const Model& ln_model, LnPlacement placement) {
    ParamSet params = project_parameters(ln_model, placement);
    NetworkSpec vs = ln_model.spec();
    vs.norm_mode = NormMode::none;
    return Model(vs, std::move(params));
}

EquivalenceReport check_ln_transform(const Model& ln_model, LnPlacement placement, std::uint64_t seed,
                                     std::size_t trials) {
    const Model vanilla = ln_to_vanilla_transform(ln_model, placement);
    EquivalenceReport r;
    r.check = "ln_transform_" + to_string(placement);
    std::size_t agree = 0;
    for (std::size_t t = 0; t < trials; ++t) {
        const bool same = run_nondegenerate(seed, t, r.degenerate_skips, [&](Rng& rng) {
            const Tensor x = random_input(ln_model.spec(), rng);
            return argmax_rows(ln_model.predict(x, 0.0).first) == argmax_rows(vanilla.predict(x, 0.0).first);
        });
        if (same) ++agree;
        else if (!r.witness) r.witness = "trial " + std::to_string(t) + ": argmax differs";
    }
    r.num_trials = trials;
    r.argmax_agreement_rate = trials ? static_cast<double>(agree) / static_cast<double>(trials) : 1.0;
    r.passed = agree == trials;
    return r;
}

EquivalenceReport check_activation_homogeneity(const Activation& rho, std::uint64_t seed, std::size_t trials,
                                               double tol) {
    EquivalenceReport r;
    r.check = "activation_homogeneity";
    r.tolerance = tol;
    Rng rng(derive_seed(seed, {0x686f6dULL}));
    for (std::size_t t = 0; t < trials; ++t) {
        const double x = uniform(rng, -10.0, 10.0);
        const double lambda = std::exp(uniform(rng, std::log(1e-3), std::log(1e3)));
        r.max_abs_output_diff = std::max(r.max_abs_output_diff, rel_diff(rho(lambda * x), lambda * rho(x)));
    }
    r.num_trials = trials;
    r.passed = r.max_abs_output_diff <= tol;
    return r;
}

EquivalenceReport check_network_homogeneity(const NetworkSpec& spec, std::uint64_t seed, std::size_t trials,
                                            double tol) {
    if (spec.bias_policy != BiasPolicy::none || spec.norm_mode != NormMode::none)
        throw ConfigError("homogeneity holds for networks without biases and normalization");
    EquivalenceReport r;
    r.check = "network_homogeneity";
    r.tolerance = tol;
    for (std::size_t t = 0; t < trials; ++t) {
        Rng rng(derive_seed(seed, {t}));
        const Model m = build(spec, rng());
        const Tensor x = random_input(spec, rng);
        const double lambda = std::exp(uniform(rng, std::log(1e-2), std::log(1e2)));
        Tensor xl = x;
        for (auto& v : xl.values()) v *= lambda;
        const Tensor f = m.predict(x, 0.0).second;
        const Tensor fl = m.predict(xl, 0.0).second;
        double num = 0, den = 0;
        for (std::size_t i = 0; i < f.size(); ++i) {
            num += (fl[i] - lambda * f[i]) * (fl[i] - lambda * f[i]);
            den += lambda * f[i] * lambda * f[i];
        }
        if (den > 0) r.max_abs_output_diff = std::max(r.max_abs_output_diff, std::sqrt(num / den));
    }
    r.num_trials = trials;
    r.passed = r.max_abs_output_diff <= tol;
    return r;
}

Json to_json(const ErrorOrderingReport& r) {
    return {
        {"check", "optimal_error_ordering"},
        {"vanilla_error", r.vanilla_error},
        {"fn_error", r.fn_error},
        {"ln_error", r.ln_error},
        {"vanilla_loss", r.vanilla_loss},
        {"fn_loss", r.fn_loss},
        {"ln_loss", r.ln_loss},
        {"converged", r.converged},
        {"passed", r.passed},
        {"note", r.note},
    };
}

ErrorOrderingReport optimal_error_ordering_check(const Dataset& d, std::uint64_t seed,
                                                 const ErrorOrderingOptions& options) {
    if (d.size() == 0 || d.size() > 200) throw ConfigError("error ordering check expects 1 to 200 samples");
    if (d.inputs.rank() != 2) throw ConfigError("error ordering check expects flat feature vectors");
    if (options.steps < 10) throw ConfigError("error ordering check needs at least 10 steps");
    ErrorOrderingReport r;
    r.note = "heuristic: finite training gives evidence about, not a proof of, the ordering of optimal errors";

    auto train = [&](NormMode mode, double& error, double& final_loss) {
        Model m = build(mlp_spec(d.inputs.dim(1), options.hidden, d.num_classes, mode), seed);
        ForwardOptions fwd;
        fwd.training = true;
        fwd.differentiable = true;
        const std::size_t window = std::max<std::size_t>(1, options.steps / 10);
        double prev = 0.0, last = 0.0;
        for (std::size_t step = 0; step < options.steps; ++step) {
            Tape tape;
            auto out = m.forward(tape, d.inputs, fwd);
            Var loss = softmax_cross_entropy(out.logits, d.labels);
            tape.backward(loss);
            for (std::size_t i = 0; i < m.params().size(); ++i)
                if (is_trainable(m.params()[i].kind)) sgd_step(m.params()[i].value, tape.grad(out.params[i]), options.lr);
            const double v = loss.value().item();
            if (step >= options.steps - 2 * window && step < options.steps - window) prev += v / window;
            if (step >= options.steps - window) last += v / window;
        }
        if (std::abs(prev - last) > options.plateau * std::max(prev, 1e-3)) r.converged = false;
        const auto pred = argmax_rows(m.predict(d.inputs).first);
        std::size_t wrong = 0;
        for (std::size_t i = 0; i < d.size(); ++i) wrong += pred[i] != d.labels[i] ? 1 : 0;
        error = static_cast<double>(wrong) / static_cast<double>(d.size());
        final_loss = last;
    };
    train(NormMode::none, r.vanilla_error, r.vanilla_loss);
    train(NormMode::fn_last, r.fn_error, r.fn_loss);
    train(NormMode::ln_layerwise, r.ln_error, r.ln_loss);
    r.passed = std::abs(r.vanilla_error - r.fn_error) <= options.slack + 1e-12 &&
               r.vanilla_error <= r.ln_error + options.slack + 1e-12;
    return r;
}

}  // namespace fednorm
