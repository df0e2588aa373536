#include "fednorm/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fednorm/rng.hpp"

namespace fednorm {

namespace {

struct Evaluation {
    double loss;
    std::vector<std::uint32_t> branches;
};

Evaluation evaluate(const LossBuilder& loss, const std::vector<Tensor>& params) {
    Tape tape;
    tape.set_branch_tracing(true);
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (const auto& p : params) vars.push_back(tape.constant(p));
    Var l = loss(tape, vars);
    return {l.value().item(), tape.branch_trace()};
}

std::vector<std::size_t> pick_coordinates(std::size_t n, std::size_t limit, Rng& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (limit == 0 || limit >= n) return idx;
    // Partial Fisher-Yates with our own uniform draw for portability.
    for (std::size_t i = 0; i < limit; ++i) {
        const auto j = i + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n - i));
        std::swap(idx[i], idx[std::min(j, n - 1)]);
    }
    idx.resize(limit);
    std::sort(idx.begin(), idx.end());
    return idx;
}

}  // namespace

GradCheckReport finite_diff_check(const LossBuilder& loss, std::vector<Tensor> params,
                                  const GradCheckOptions& options) {
    std::vector<Tensor> analytic;
    std::vector<std::uint32_t> base_branches;
    {
        Tape tape;
        tape.set_branch_tracing(true);
        std::vector<Var> vars;
        for (const auto& p : params) vars.push_back(tape.parameter(p));
        Var l = loss(tape, vars);
        base_branches = tape.branch_trace();
        tape.backward(l);
        for (const auto& v : vars) analytic.push_back(tape.grad(v));
    }

    GradCheckReport report;
    Rng rng(options.seed);
    const double h = options.step;
    for (std::size_t p = 0; p < params.size(); ++p) {
        for (std::size_t i : pick_coordinates(params[p].size(), options.max_coords_per_param, rng)) {
            const double orig = params[p][i];
            params[p][i] = orig + h;
            const auto plus = evaluate(loss, params);
            params[p][i] = orig - h;
            const auto minus = evaluate(loss, params);
            params[p][i] = orig;
            if (plus.branches != base_branches || minus.branches != base_branches) {
                ++report.kinks_flagged;
                continue;
            }
            const double numeric = (plus.loss - minus.loss) / (2.0 * h);
            const double a = analytic[p][i];
            const double denom = std::max({std::abs(a), std::abs(numeric), options.abs_floor});
            const double rel = std::abs(a - numeric) / denom;
            ++report.coordinates_checked;
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst = "param[" + std::to_string(p) + "]:" + std::to_string(i);
            }
        }
    }
    return report;
}

}  // namespace fednorm
