#include <doctest.h>

#include "fednorm/equivalence.hpp"
#include "fednorm/errors.hpp"
#include "fednorm/gradient_suite.hpp"
#include "test_util.hpp"

using namespace fednorm;

namespace {

NetworkSpec three_layer(NormMode mode = NormMode::none, BiasPolicy bias = BiasPolicy::first_layer_only) {
    return mlp_spec(20, {32, 16, 24}, 10, mode, bias);
}

// Independent oracle for P U and U P on small matrices.
Tensor naive_projection(const Tensor& u, bool left) {
    const std::size_t r = u.dim(0), c = u.dim(1);
    const std::size_t d = left ? r : c;
    Tensor p(Shape{d, d});
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) p.at({i, j}) = (i == j ? 1.0 : 0.0) - 1.0 / static_cast<double>(d);
    Tensor out(Shape{r, c});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            double s = 0;
            if (left)
                for (std::size_t k = 0; k < r; ++k) s += p.at({i, k}) * u.at({k, j});
            else
                for (std::size_t k = 0; k < c; ++k) s += u.at({i, k}) * p.at({k, j});
            out.at({i, j}) = s;
        }
    return out;
}

}  // namespace

TEST_CASE("feature-norm reduction holds on bias-free networks") {
    auto single = check_fn_reduction(mlp_spec(6, {5}, 3), 1, 20);
    CHECK(single.passed);
    CHECK(single.max_abs_output_diff == 0.0);

    auto r = check_fn_reduction(three_layer(), 2, 100);
    CHECK(r.passed);
    CHECK(r.max_abs_output_diff < 1e-9);
    CHECK(r.num_trials == 100);
    CHECK(r.argmax_agreement_rate == 1.0);

    auto leaky = three_layer();
    leaky.activation = Activation::leaky_relu(0.7, 0.05);
    CHECK(check_fn_reduction(leaky, 3, 50).max_abs_output_diff < 1e-9);
}

TEST_CASE("layer-norm reduction holds on bias-free networks") {
    auto single = check_ln_reduction(mlp_spec(6, {5}, 3), 1, 20);
    CHECK(single.max_abs_output_diff == 0.0);
    auto r = check_ln_reduction(three_layer(), 4, 100);
    CHECK(r.passed);
    CHECK(r.max_abs_output_diff < 1e-9);
}

TEST_CASE("degenerate activations are redrawn and counted") {
    // Width-1 ReLU layers are zero on about half of all draws.
    auto narrow = mlp_spec(3, {1, 1}, 2, NormMode::none, BiasPolicy::none);
    auto r = check_fn_reduction(narrow, 5, 20);
    CHECK(r.passed);
    CHECK(r.degenerate_skips > 0);
}

TEST_CASE("inner biases break both reductions") {
    auto fn = search_reduction_counterexample(three_layer(), ReductionKind::feature_norm, 6);
    CHECK(fn.passed);
    CHECK(fn.max_abs_output_diff > 1e-3);
    CHECK(fn.witness.has_value());
    auto ln = search_reduction_counterexample(three_layer(), ReductionKind::layer_norm, 6);
    CHECK(ln.passed);
    CHECK(ln.num_trials <= 1000);
}

TEST_CASE("feature normalization preserves predictions") {
    Model vanilla = build(three_layer(), 7);
    auto r = check_fn_prediction_equivalence(vanilla, 8, 1000);
    CHECK(r.argmax_agreement_rate == 1.0);
    CHECK(r.passed);

    // Duplicate class vectors tie; both sides pick the lowest index.
    Model tied = build(mlp_spec(4, {5}, 3), 1);
    auto& w = tied.params().find("classifier.weight")->value;
    for (std::size_t j = 0; j < 5; ++j) w.at({2, j}) = w.at({0, j});
    CHECK(check_fn_prediction_equivalence(tied, 2, 200).passed);

    CHECK_THROWS_AS(check_fn_prediction_equivalence(build(three_layer(NormMode::fn_last), 1), 1, 1), ConfigError);
}

TEST_CASE("LN to vanilla transform") {
    SUBCASE("projection formulas match explicit matrices") {
        Model ln = build(mlp_spec(4, {5, 3}, 3, NormMode::ln_pre), 1, {.randomize_all = true});
        auto pre = project_parameters(ln, LnPlacement::pre_activation);
        CHECK(max_abs_diff(pre.find("l0.weight")->value, naive_projection(ln.params().find("l0.weight")->value, true)) <
              1e-15);
        CHECK(max_abs_diff(pre.find("l1.weight")->value, naive_projection(ln.params().find("l1.weight")->value, true)) <
              1e-15);
        CHECK(pre.find("classifier.weight")->value == ln.params().find("classifier.weight")->value);

        Model post = ln.with_norm_mode(NormMode::ln_layerwise);
        auto pp = project_parameters(post, LnPlacement::post_activation);
        CHECK(pp.find("l0.weight")->value == post.params().find("l0.weight")->value);
        CHECK(max_abs_diff(pp.find("l1.weight")->value,
                           naive_projection(post.params().find("l1.weight")->value, false)) < 1e-15);
        CHECK(max_abs_diff(pp.find("classifier.weight")->value,
                           naive_projection(post.params().find("classifier.weight")->value, false)) < 1e-15);
    }
    SUBCASE("single-layer pre-activation LN") {
        Model ln = build(mlp_spec(8, {6}, 4, NormMode::ln_pre), 2, {.randomize_all = true});
        auto r = check_ln_transform(ln, LnPlacement::pre_activation, 3, 1000);
        CHECK(r.argmax_agreement_rate == 1.0);
    }
    SUBCASE("three-layer networks, both placements") {
        Model pre = build(three_layer(NormMode::ln_pre), 4, {.randomize_all = true});
        CHECK(check_ln_transform(pre, LnPlacement::pre_activation, 5, 1000).argmax_agreement_rate == 1.0);
        for (NormMode mode : {NormMode::ln_layerwise, NormMode::ln_reduced}) {
            Model post = build(three_layer(mode), 6, {.randomize_all = true});
            CHECK(check_ln_transform(post, LnPlacement::post_activation, 7, 1000).argmax_agreement_rate == 1.0);
        }
    }
    SUBCASE("projection is idempotent") {
        for (auto [mode, placement] : {std::pair{NormMode::ln_pre, LnPlacement::pre_activation},
                                       std::pair{NormMode::ln_layerwise, LnPlacement::post_activation}}) {
            Model ln = build(three_layer(mode), 8, {.randomize_all = true});
            auto once = project_parameters(ln, placement);
            auto twice = project_parameters(Model(ln.spec(), once), placement);
            for (std::size_t i = 0; i < once.size(); ++i) CHECK(max_abs_diff(once[i].value, twice[i].value) < 1e-15);
        }
    }
    SUBCASE("placement mismatch is an error") {
        Model pre = build(three_layer(NormMode::ln_pre), 1);
        CHECK_THROWS_AS(ln_to_vanilla_transform(pre, LnPlacement::post_activation), ConfigError);
        Model post = build(three_layer(NormMode::ln_layerwise), 1);
        CHECK_THROWS_AS(ln_to_vanilla_transform(post, LnPlacement::pre_activation), ConfigError);
        CHECK_THROWS_AS(ln_to_vanilla_transform(build(cnn_spec(10, NormMode::ln_layerwise), 1),
                                                LnPlacement::post_activation),
                        ConfigError);
    }
}

TEST_CASE("homogeneity checks") {
    CHECK(check_activation_homogeneity(Activation::relu(), 1, 1000).max_abs_output_diff < 1e-12);
    CHECK(check_activation_homogeneity(Activation::leaky_relu(2.5, -0.3), 1, 1000).passed);
    auto spec = three_layer(NormMode::none, BiasPolicy::none);
    spec.activation = Activation::leaky_relu(1.0, 0.1);
    auto r = check_network_homogeneity(spec, 2, 100);
    CHECK(r.passed);
    CHECK(r.max_abs_output_diff < 1e-9);
    CHECK_THROWS_AS(check_network_homogeneity(three_layer(), 1, 1), ConfigError);
}

TEST_CASE("reports serialize with fixed keys") {
    auto j = to_json(check_fn_reduction(mlp_spec(4, {3}, 2), 1, 2));
    CHECK(j["check"] == "fn_reduction");
    CHECK(j.contains("max_abs_output_diff"));
    CHECK(j.contains("degenerate_skips"));
    CHECK(j["witness"].is_null());
}

TEST_CASE("optimal error ordering evidence") {
    SUBCASE("separable blobs: every variant reaches zero error") {
        Dataset blobs = generate_xor(100, 0.3, 1);
        for (std::size_t i = 0; i < blobs.size(); ++i) {
            blobs.labels[i] = static_cast<int>(i % 2);
            blobs.inputs[2 * i] += blobs.labels[i] ? 3.0 : -3.0;
        }
        auto r = optimal_error_ordering_check(blobs, 1, {.steps = 500});
        CHECK(r.vanilla_error == 0.0);
        CHECK(r.fn_error == 0.0);
        CHECK(r.ln_error == 0.0);
        CHECK(r.passed);
    }
    SUBCASE("xor: vanilla and feature-normalized errors agree") {
        auto r = optimal_error_ordering_check(generate_xor(120, 0.2, 3), 2);
        CAPTURE(to_json(r).dump());
        CHECK(r.passed);
        CHECK(r.converged);
        CHECK(r.vanilla_error < 0.05);
        CHECK(to_json(r)["note"].get<std::string>().find("heuristic") != std::string::npos);
    }
    SUBCASE("short training is flagged") {
        auto r = optimal_error_ordering_check(generate_xor(120, 0.2, 3), 2, {.steps = 20, .lr = 0.5});
        CHECK_FALSE(r.converged);
    }
    CHECK_THROWS_AS(optimal_error_ordering_check(generate_xor(201, 0.2, 3), 2), ConfigError);
}

TEST_CASE("gradient suite covers every primitive and passes") {
    const auto r = run_gradient_suite(11);
    CHECK(r.passed);
    CHECK(r.cases.size() >= 100);
    CHECK(r.max_rel_error < 1e-4);
    bool saw_gn = false, saw_residual = false;
    for (const auto& c : r.cases) {
        saw_gn = saw_gn || c.name == "group_normalize";
        saw_residual = saw_residual || c.name.rfind("residual_block_", 0) == 0;
        CHECK(c.coordinates > 0);
    }
    CHECK(saw_gn);
    CHECK(saw_residual);
    CHECK(to_json(r).at("instances") == r.cases.size());
}
