#include "fednorm/gradient_suite.hpp"

#include <algorithm>
#include <functional>

#include "fednorm/gradcheck.hpp"
#include "fednorm/model.hpp"
#include "fednorm/normalization.hpp"
#include "fednorm/ops.hpp"
#include "fednorm/rng.hpp"

namespace fednorm {

namespace {

constexpr double kEps = 1e-5;

Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.5, double hi = 1.5) {
    Tensor t(shape);
    for (auto& v : t.values()) v = uniform(rng, lo, hi);
    return t;
}

/// Random projection of a [B x ...] output onto three coordinates per row,
/// squared and summed, so that every output entry influences the loss.
Var project_loss(const Var& y, const Tensor& proj) {
    Var flat = y.shape().size() == 1 ? reshape(y, Shape{1, y.shape()[0]}) : flatten(y);
    return sum_of_squares(affine(flat, y.tape().constant(proj)));
}

struct Case {
    std::string name;
    std::vector<Tensor> params;
    std::function<Var(Tape&, std::span<const Var>)> loss;
};

std::vector<Case> make_cases(Rng& rng) {
    std::vector<Case> cases;
    auto proj_for = [&](std::size_t width) { return random_tensor(Shape{3, width}, rng); };
    auto unary = [&](std::string name, Shape shape, std::function<Var(const Var&)> op, std::size_t out_width) {
        Tensor proj = proj_for(out_width);
        cases.push_back({std::move(name), {random_tensor(shape, rng)},
                         [op, proj](Tape&, std::span<const Var> p) { return project_loss(op(p[0]), proj); }});
    };

    {
        Tensor proj = proj_for(4);
        cases.push_back({"affine",
                         {random_tensor({3, 5}, rng), random_tensor({4, 5}, rng), random_tensor({4}, rng)},
                         [proj](Tape&, std::span<const Var> p) { return project_loss(affine(p[0], p[1], p[2]), proj); }});
        cases.push_back({"affine_no_bias", {random_tensor({3, 5}, rng), random_tensor({4, 5}, rng)},
                         [proj](Tape&, std::span<const Var> p) { return project_loss(affine(p[0], p[1]), proj); }});
    }
    unary("relu", {3, 6}, [](const Var& v) { return activate(v, Activation::relu()); }, 6);
    unary("leaky_relu", {3, 6}, [](const Var& v) { return activate(v, Activation::leaky_relu(1.3, -0.2)); }, 6);
    {
        Tensor proj = proj_for(2 * 3 * 3);
        cases.push_back({"conv2d",
                         {random_tensor({2, 2, 5, 5}, rng), random_tensor({2, 2, 3, 3}, rng), random_tensor({2}, rng)},
                         [proj](Tape&, std::span<const Var> p) { return project_loss(conv2d(p[0], p[1], 1, p[2]), proj); }});
        Tensor proj2 = proj_for(2 * 2 * 2);
        cases.push_back({"conv2d_stride2", {random_tensor({2, 2, 5, 5}, rng), random_tensor({2, 2, 3, 3}, rng)},
                         [proj2](Tape&, std::span<const Var> p) { return project_loss(conv2d(p[0], p[1], 2), proj2); }});
    }
    unary("maxpool2d", {2, 2, 4, 4}, [](const Var& v) { return maxpool2d(v, 2, 2); }, 2 * 2 * 2);
    unary("reshape", {2, 6}, [](const Var& v) { return reshape(v, Shape{2, 3, 2}); }, 6);
    unary("scale", {2, 4}, [](const Var& v) { return scale(v, -1.7); }, 4);
    {
        Tensor proj = proj_for(4);
        cases.push_back({"add", {random_tensor({2, 4}, rng), random_tensor({2, 4}, rng)},
                         [proj](Tape&, std::span<const Var> p) { return project_loss(add(p[0], p[1]), proj); }});
    }
    {
        const std::vector<double> factors = {0.5, 1.0, -2.0, 3.0}, offsets = {0.1, -0.4, 0.0, 2.0};
        unary("scale_columns", {3, 4}, [factors](const Var& v) { return scale_columns(v, factors); }, 4);
        unary("shift_columns", {3, 4}, [offsets](const Var& v) { return shift_columns(v, offsets); }, 4);
    }
    {
        const std::vector<int> labels = {0, 3, 2};
        cases.push_back({"softmax_cross_entropy", {random_tensor({3, 4}, rng, -3, 3)},
                         [labels](Tape&, std::span<const Var> p) { return softmax_cross_entropy(p[0], labels); }});
        cases.push_back({"softmax_cross_entropy_excluded", {random_tensor({3, 4}, rng, -3, 3)},
                         [labels](Tape&, std::span<const Var> p) {
                             static const bool mask[] = {false, true, false, false};
                             return softmax_cross_entropy(p[0], labels, mask);
                         }});
        cases.push_back({"decorrelation_penalty", {random_tensor({6, 4}, rng)},
                         [](Tape&, std::span<const Var> p) { return decorrelation_penalty(p[0]); }});
        cases.push_back({"sum_of_squares", {random_tensor({3, 4}, rng)},
                         [](Tape&, std::span<const Var> p) { return sum_of_squares(p[0]); }});
    }
    unary("mv_normalize", {3, 8}, [](const Var& v) { return mv_normalize(v, kEps); }, 8);
    unary("scale_normalize", {3, 8}, [](const Var& v) { return scale_normalize(v, kEps); }, 8);
    unary("mean_shift", {3, 8}, [](const Var& v) { return mean_shift(v); }, 8);
    unary("group_normalize", {3, 8}, [](const Var& v) { return group_normalize(v, 2, kEps); }, 8);
    unary("batch_normalize_train", {4, 6}, [](const Var& v) {
              auto st = BatchNormState::fresh(6);
              return batch_normalize(v, st, kEps, true);
          }, 6);
    unary("batch_normalize_eval", {4, 6}, [](const Var& v) {
              BatchNormState st{0.1, Tensor(Shape{6}, 0.3), Tensor(Shape{6}, 2.0)};
              return batch_normalize(v, st, kEps, false);
          }, 6);
    {
        Tensor proj = proj_for(8);
        cases.push_back({"mv_learnable", {random_tensor({3, 8}, rng), random_tensor({8}, rng), random_tensor({8}, rng)},
                         [proj](Tape&, std::span<const Var> p) { return project_loss(mv_learnable(p[0], p[1], p[2], kEps), proj); }});
    }
    for (ResidualVariant v : {ResidualVariant::plain, ResidualVariant::ln_inner, ResidualVariant::ln_shift,
                              ResidualVariant::fn_inner_mv, ResidualVariant::fn_inner_scale}) {
        Tensor proj = proj_for(5);
        cases.push_back({"residual_block_" + to_string(v),
                         {random_tensor({3, 5}, rng), random_tensor({5, 5}, rng), random_tensor({5, 5}, rng),
                          random_tensor({5}, rng), random_tensor({5}, rng)},
                         [proj, v](Tape&, std::span<const Var> p) {
                             return project_loss(
                                 residual_block_forward(p[0], v, p[1], p[2], p[3], p[4], Activation::leaky_relu(1.0, 0.2), kEps),
                                 proj);
                         }});
    }

    for (NormMode mode : {NormMode::none, NormMode::fn_layerwise, NormMode::fn_last, NormMode::ln_layerwise,
                          NormMode::ln_reduced, NormMode::ln_pre, NormMode::ln_learnable, NormMode::gn, NormMode::bn}) {
        auto spec = mlp_spec(5, {8, 6}, 3, mode);
        spec.activation = Activation::leaky_relu(1.0, 0.2);
        const auto seed = static_cast<std::uint64_t>(rng());
        Model m = build(spec, seed, {.randomize_all = mode != NormMode::bn});
        Tensor x = random_tensor({4, 5}, rng);
        std::vector<Tensor> init;
        for (const auto& e : m.params().entries) init.push_back(e.value);
        cases.push_back({"model_" + to_string(mode), init, [m, x](Tape& t, std::span<const Var> p) {
                             Model probe = m;
                             auto r = probe.forward(t, x, p, {.training = true, .epsilon = kEps});
                             return softmax_cross_entropy(r.logits, std::vector<int>{0, 1, 2, 1});
                         }});
    }
    {
        NetworkSpec s;
        s.input_shape = {2, 6, 6};
        s.layers = {ConvLayer{3, 3, 1}, PoolLayer{2, 2}, FlattenLayer{}, DenseLayer{5}};
        s.norm_mode = NormMode::fn_last;
        s.num_classes = 3;
        Model m = build(s, static_cast<std::uint64_t>(rng()), {.randomize_all = true});
        Tensor x = random_tensor({2, 2, 6, 6}, rng);
        std::vector<Tensor> init;
        for (const auto& e : m.params().entries) init.push_back(e.value);
        cases.push_back({"model_conv_fn_last", init, [m, x](Tape& t, std::span<const Var> p) {
                             Model probe = m;
                             auto r = probe.forward(t, x, p, {.training = true, .epsilon = kEps});
                             return softmax_cross_entropy(r.logits, std::vector<int>{2, 0});
                         }});
    }
    return cases;
}

}  // namespace

GradientSuiteReport run_gradient_suite(std::uint64_t seed, std::size_t repeats, double tol) {
    GradientSuiteReport report;
    report.tolerance = tol;
    report.passed = true;
    for (std::size_t rep = 0; rep < repeats; ++rep) {
        Rng rng(derive_seed(seed, {rep}));
        for (auto& c : make_cases(rng)) {
            GradCheckOptions opt;
            opt.seed = derive_seed(seed, {rep, report.cases.size()});
            const auto r = finite_diff_check(c.loss, c.params, opt);
            GradientCase gc{c.name, r.max_rel_error, r.coordinates_checked, r.kinks_flagged, r.worst,
                            r.max_rel_error < tol && r.coordinates_checked > 0};
            report.max_rel_error = std::max(report.max_rel_error, gc.max_rel_error);
            report.coordinates += gc.coordinates;
            report.passed = report.passed && gc.passed;
            report.cases.push_back(std::move(gc));
        }
    }
    return report;
}

Json to_json(const GradientSuiteReport& r) {
    Json cases = Json::array();
    for (const auto& c : r.cases)
        cases.push_back({{"name", c.name},
                         {"max_rel_error", c.max_rel_error},
                         {"coordinates", c.coordinates},
                         {"kinks", c.kinks},
                         {"worst", c.worst},
                         {"passed", c.passed}});
    return {{"check", "gradients"},
            {"instances", r.cases.size()},
            {"coordinates", r.coordinates},
            {"max_rel_error", r.max_rel_error},
            {"tolerance", r.tolerance},
            {"passed", r.passed},
            {"cases", cases}};
}

}  // namespace fednorm
