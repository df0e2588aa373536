#include "fednorm/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "fednorm/errors.hpp"
#include "fednorm/federation.hpp"
#include "fednorm/ops.hpp"
#include "fednorm/rng.hpp"

namespace fednorm {

namespace {

constexpr std::uint64_t kProbeTag = 0x70726f6265;  // "probe"
constexpr double kJacobiTol = 1e-12;
constexpr std::size_t kMaxSvdDim = 2048;
constexpr std::size_t kMaxProbe = 64;

std::vector<double> row_norms(const Tensor& t) {
    std::vector<double> out(t.rows());
    for (std::size_t r = 0; r < t.rows(); ++r) out[r] = l2_norm(t.row(r));
    return out;
}

std::vector<double> per_class_accuracy(const std::vector<int>& pred, const std::vector<int>& labels, std::size_t C) {
    std::vector<double> correct(C, 0.0), total(C, 0.0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto y = static_cast<std::size_t>(labels[i]);
        total[y] += 1.0;
        correct[y] += pred[i] == labels[i] ? 1.0 : 0.0;
    }
    std::vector<double> out(C, std::nan(""));
    for (std::size_t c = 0; c < C; ++c)
        if (total[c] > 0) out[c] = correct[c] / total[c];
    return out;
}

double accuracy(const std::vector<int>& pred, const std::vector<int>& labels) {
    if (labels.empty()) return std::nan("");
    std::size_t ok = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) ok += pred[i] == labels[i] ? 1 : 0;
    return static_cast<double>(ok) / static_cast<double>(labels.size());
}

Json nan_as_null(const std::vector<double>& v) {
    Json out = Json::array();
    for (double x : v) out.push_back(std::isfinite(x) ? Json(x) : Json(nullptr));
    return out;
}

}  // namespace

Tensor feature_matrix(const Model& model, const Tensor& samples) {
    if (samples.empty()) throw ConfigError("feature_matrix: no samples");
    const Tensor f = model.predict(samples).second;
    const std::size_t m = f.rows(), d = f.row_size();
    Tensor out(Shape{d, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) out[j * m + i] = f[i * d + j];
    return out;
}

std::vector<double> svd_singular_values(const Tensor& m) {
    if (m.rank() != 2) throw ShapeError("svd: expected a matrix, got " + shape_string(m.shape()));
    if (!m.all_finite()) throw NumericError("svd: non-finite entries");
    std::size_t rows = m.dim(0), cols = m.dim(1);
    if (rows > kMaxSvdDim || cols > kMaxSvdDim) throw ShapeError("svd: matrix larger than 2048 in some dimension");

    // Columns of `a` are rotated until mutually orthogonal; work with the
    // orientation that has fewer columns.
    const bool transpose = cols > rows;
    if (transpose) std::swap(rows, cols);
    std::vector<std::vector<double>> a(cols, std::vector<double>(rows));
    for (std::size_t i = 0; i < m.dim(0); ++i)
        for (std::size_t j = 0; j < m.dim(1); ++j) {
            const double v = m[i * m.dim(1) + j];
            if (transpose) a[i][j] = v;
            else a[j][i] = v;
        }

    for (int sweep = 0; sweep < 100; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < cols; ++p)
            for (std::size_t q = p + 1; q < cols; ++q) {
                double alpha = 0, beta = 0, gamma = 0;
                for (std::size_t i = 0; i < rows; ++i) {
                    alpha += a[p][i] * a[p][i];
                    beta += a[q][i] * a[q][i];
                    gamma += a[p][i] * a[q][i];
                }
                if (gamma == 0.0 || std::abs(gamma) <= kJacobiTol * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t), s = c * t;
                for (std::size_t i = 0; i < rows; ++i) {
                    const double x = a[p][i], y = a[q][i];
                    a[p][i] = c * x - s * y;
                    a[q][i] = s * x + c * y;
                }
            }
        if (!rotated) break;
    }
    std::vector<double> sv(cols);
    for (std::size_t j = 0; j < cols; ++j) sv[j] = l2_norm(a[j]);
    std::sort(sv.begin(), sv.end(), std::greater<>());
    return sv;
}

SpectrumReport spectrum_of(const Tensor& m) {
    SpectrumReport r;
    r.singular_values = svd_singular_values(m);
    const auto& s = r.singular_values;
    if (s.size() < 2) throw ConfigError("spectral gap needs at least two singular values");
    r.spectral_gap = s[1] > 0.0 ? s[0] / s[1] : std::numeric_limits<double>::infinity();
    for (double v : s) r.effective_rank += v > 0.01 * s[0] ? 1 : 0;
    return r;
}

SpectrumReport spectral_gap(const Model& model, const Tensor& samples) {
    if (samples.rank() < 2 || samples.dim(0) < 2) throw ConfigError("spectral gap needs at least two samples");
    return spectrum_of(feature_matrix(model, samples));
}

Json to_json(const SpectrumReport& r) {
    return {
        {"singular_values", r.singular_values},
        {"spectral_gap", std::isinf(r.spectral_gap) ? Json("inf") : Json(r.spectral_gap)},
        {"effective_rank", r.effective_rank},
    };
}

double NormTrace::max_norm(std::size_t step) const {
    double m = 0.0;
    for (double v : class_norms.at(step)) m = std::max(m, v);
    for (double v : feature_norms.at(step)) m = std::max(m, v);
    return m;
}

Json to_json(const NormTrace& t) {
    return {{"class_norms", t.class_norms}, {"feature_norms", t.feature_norms}, {"losses", t.losses}};
}

NormTrace norm_trace(Model& model, const Dataset& train, const ClientShard& shard, const Tensor& probe,
                     const LocalSgdOptions& options) {
    if (probe.empty() || probe.dim(0) > kMaxProbe) throw ConfigError("norm trace: probe set must hold 1 to 64 samples");
    NormTrace trace;
    auto record = [&] {
        trace.class_norms.push_back(row_norms(model.params().find("classifier.weight")->value));
        trace.feature_norms.push_back(row_norms(model.predict(probe).second));
    };
    record();
    if (options.steps == 0) return trace;
    BatchSampler sampler(shard.indices, options.batch_size, options.seed);
    ForwardOptions fwd;
    fwd.training = true;
    fwd.differentiable = true;
    for (std::size_t step = 0; step < options.steps; ++step) {
        const auto batch = sampler.next();
        Tape tape;
        auto r = model.forward(tape, train.gather_inputs(batch), fwd);
        const auto labels = train.gather_labels(batch);
        Var loss = softmax_cross_entropy(r.logits, labels);
        tape.backward(loss);
        for (std::size_t i = 0; i < model.params().size(); ++i)
            if (is_trainable(model.params()[i].kind)) sgd_step(model.params()[i].value, tape.grad(r.params[i]), options.lr);
        trace.losses.push_back(loss.value().item());
        record();
        if (options.stop_loss > 0.0 && trace.losses.back() < options.stop_loss) break;
    }
    return trace;
}

double one_class_loss(const Model& model, const Tensor& inputs, std::size_t k) {
    const Tensor g = model.predict(inputs).second;
    const Tensor& w = model.params().find("classifier.weight")->value;
    const std::size_t C = w.dim(0), d = w.dim(1);
    if (k >= C) throw ConfigError("one_class_loss: class out of range");
    double total = 0.0;
    std::vector<double> z(C);
    for (std::size_t i = 0; i < g.rows(); ++i) {
        for (std::size_t c = 0; c < C; ++c) {
            double s = 0.0;
            for (std::size_t j = 0; j < d; ++j) s += (w[c * d + j] - w[k * d + j]) * g[i * d + j];
            z[c] = s;
        }
        const double top = *std::max_element(z.begin(), z.end());
        double acc = 0.0;
        for (double v : z) acc += std::exp(v - top);
        total += top + std::log(acc);
    }
    return total / static_cast<double>(g.rows());
}

Json to_json(const OverfitReport& r) {
    return {
        {"per_class_before", nan_as_null(r.per_class_before)},
        {"per_class_after", nan_as_null(r.per_class_after)},
        {"local_acc_before", r.local_acc_before},
        {"local_acc_after", r.local_acc_after},
        {"other_class_before", r.other_class_before},
        {"other_class_after", r.other_class_after},
    };
}

OverfitReport local_overfit_probe(const Model& global, const Dataset& train, const ClientShard& shard,
                                  const Dataset& test, const LocalSgdOptions& options) {
    if (shard.size() == 0) throw ConfigError("overfit probe: empty shard");
    const std::size_t C = test.num_classes;
    const Tensor local_x = train.gather_inputs(shard.indices);
    const auto local_y = train.gather_labels(shard.indices);

    Model model = global;
    OverfitReport r;
    auto measure = [&](std::vector<double>& per_class, double& local, double& other) {
        per_class = per_class_accuracy(argmax_rows(model.predict(test.inputs).first), test.labels, C);
        local = accuracy(argmax_rows(model.predict(local_x).first), local_y);
        double sum = 0.0;
        std::size_t n = 0;
        for (std::size_t c = 0; c < C; ++c)
            if ((c >= shard.label_histogram.size() || shard.label_histogram[c] == 0) && std::isfinite(per_class[c])) {
                sum += per_class[c];
                ++n;
            }
        other = n ? sum / static_cast<double>(n) : std::nan("");
    };
    measure(r.per_class_before, r.local_acc_before, r.other_class_before);
    if (options.steps > 0) {
        const Tensor probe =
            train.gather_inputs(std::span(shard.indices).first(std::min(kMaxProbe, shard.indices.size())));
        LocalSgdOptions o = options;
        o.stop_loss = 0.0;
        norm_trace(model, train, shard, probe, o);
    }
    measure(r.per_class_after, r.local_acc_after, r.other_class_after);
    return r;
}

std::vector<std::size_t> select_probe(const Dataset& d, std::size_t count, std::uint64_t seed) {
    std::vector<std::vector<std::size_t>> by_class(d.num_classes);
    for (std::size_t i = 0; i < d.size(); ++i) by_class[static_cast<std::size_t>(d.labels[i])].push_back(i);
    for (std::size_t c = 0; c < d.num_classes; ++c) {
        Rng rng(derive_seed(seed, {kProbeTag, c}));
        shuffle_in_place(by_class[c], rng);
    }
    std::vector<std::size_t> out;
    for (std::size_t round = 0; out.size() < count; ++round) {
        bool any = false;
        for (std::size_t c = 0; c < d.num_classes && out.size() < count; ++c)
            if (round < by_class[c].size()) {
                out.push_back(by_class[c][round]);
                any = true;
            }
        if (!any) break;
    }
    return out;
}

}  // namespace fednorm
