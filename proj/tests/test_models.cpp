#include <doctest.h>

#include <cmath>
#include <numeric>

#include "fednorm/errors.hpp"
#include "fednorm/gradcheck.hpp"
#include "fednorm/model.hpp"
#include "fednorm/serialize.hpp"
#include "test_util.hpp"

using namespace fednorm;
using fednorm::testing::random_tensor;
using fednorm::testing::rel_err;

namespace {

// Independent dense-network forward on one sample, written with plain loops.
std::vector<double> naive_mlp_features(const Model& m, std::vector<double> a, double eps) {
    const auto& spec = m.spec();
    const std::size_t sites = spec.layers.size();
    for (std::size_t i = 0; i < sites; ++i) {
        const Tensor& w = m.params().find("l" + std::to_string(i) + ".weight")->value;
        const ParamEntry* b = m.params().find("l" + std::to_string(i) + ".bias");
        std::vector<double> z(w.dim(0), 0.0);
        for (std::size_t o = 0; o < w.dim(0); ++o) {
            for (std::size_t k = 0; k < w.dim(1); ++k) z[o] += w.at({o, k}) * a[k];
            if (b) z[o] += b->value[o];
        }
        for (auto& v : z) v = v > 0 ? spec.activation.pos_slope * v : spec.activation.neg_slope * v;
        const bool last = i + 1 == sites;
        const double d = static_cast<double>(z.size());
        auto mean = std::accumulate(z.begin(), z.end(), 0.0) / d;
        auto mv = [&] {
            double var = 0;
            for (double v : z) var += (v - mean) * (v - mean);
            const double sd = std::sqrt(var / d + eps * eps);
            for (auto& v : z) v = (v - mean) / sd;
        };
        auto scale = [&] {
            double n = 0;
            for (double v : z) n += v * v;
            n = std::max(eps, std::sqrt(n));
            for (auto& v : z) v = std::sqrt(d) * v / n;
        };
        switch (spec.norm_mode) {
            case NormMode::fn_layerwise: scale(); break;
            case NormMode::fn_last:
                if (last) scale();
                break;
            case NormMode::ln_layerwise: mv(); break;
            case NormMode::ln_reduced:
                if (last) mv();
                else
                    for (auto& v : z) v -= mean;
                break;
            default: break;
        }
        a = z;
    }
    return a;
}

Tensor scaled(Tensor t, double f) {
    for (auto& v : t.values()) v *= f;
    return t;
}

}  // namespace

TEST_CASE("mlp forward matches an independent loop implementation") {
    Rng rng(1);
    for (NormMode mode : {NormMode::none, NormMode::fn_layerwise, NormMode::fn_last, NormMode::ln_layerwise,
                          NormMode::ln_reduced}) {
        auto spec = mlp_spec(6, {8, 5, 7}, 4, mode);
        spec.activation = Activation::leaky_relu(1.0, 0.1);
        Model m = build(spec, 3, {.randomize_all = true});
        auto x = random_tensor({5, 6}, rng);
        auto [logits, features] = m.predict(x, 1e-5);
        REQUIRE(logits.shape() == Shape{5, 4});
        REQUIRE(features.shape() == Shape{5, 7});
        const Tensor& w = m.params().find("classifier.weight")->value;
        for (std::size_t b = 0; b < 5; ++b) {
            auto ref = naive_mlp_features(m, {x.row(b).begin(), x.row(b).end()}, 1e-5);
            for (std::size_t j = 0; j < 7; ++j) CHECK(std::abs(features.at({b, j}) - ref[j]) < 1e-12);
            for (std::size_t c = 0; c < 4; ++c) {
                double l = 0;
                for (std::size_t j = 0; j < 7; ++j) l += w.at({c, j}) * ref[j];
                CHECK(std::abs(logits.at({b, c}) - l) < 1e-12);
            }
        }
    }
}

TEST_CASE("build examples") {
    SUBCASE("norm_mode none gives a plain network with only weights and a first bias") {
        Model m = build(mlp_spec(4, {3, 3}, 2), 0);
        std::vector<std::string> names;
        for (const auto& e : m.params().entries) names.push_back(e.name);
        CHECK(names == std::vector<std::string>{"l0.weight", "l0.bias", "l1.weight", "classifier.weight"});
    }
    SUBCASE("ln_layerwise and ln_reduced from one seed share parameters") {
        auto a = build(mlp_spec(5, {6, 6, 4}, 3, NormMode::ln_layerwise), 11);
        auto b = build(mlp_spec(5, {6, 6, 4}, 3, NormMode::ln_reduced), 11);
        CHECK(a.params() == b.params());
    }
    SUBCASE("learnable LN adds 2 d_i parameters per layer") {
        auto stat = build(mlp_spec(5, {6, 8, 4}, 3, NormMode::ln_layerwise), 1);
        auto learn = build(mlp_spec(5, {6, 8, 4}, 3, NormMode::ln_learnable), 1);
        CHECK(learn.params().trainable_count() == stat.params().trainable_count() + 2 * (6 + 8 + 4));
    }
    SUBCASE("fixed seed is deterministic and seeds differ") {
        auto spec = mlp_spec(5, {6}, 3);
        CHECK(build(spec, 4).params() == build(spec, 4).params());
        CHECK_FALSE(build(spec, 4).params() == build(spec, 5).params());
    }
    SUBCASE("init bounds") {
        Model m = build(mlp_spec(16, {9}, 3), 2);
        for (double v : m.params().find("l0.weight")->value.values()) CHECK(std::abs(v) <= 0.25);
        for (double v : m.params().find("l0.bias")->value.values()) CHECK(v == 0.0);
    }
}

TEST_CASE("spec validation") {
    CHECK_THROWS_AS(build(mlp_spec(4, {3, 3}, 2, NormMode::fn_last, BiasPolicy::all_biases), 0), ConfigError);
    CHECK_THROWS_AS(build(mlp_spec(4, {3, 3}, 2, NormMode::ln_reduced, BiasPolicy::all_biases), 0), ConfigError);
    auto relaxed = mlp_spec(4, {3, 3}, 2, NormMode::fn_last, BiasPolicy::all_biases);
    relaxed.relax_bias_assumption = true;
    CHECK_NOTHROW(build(relaxed, 0));
    CHECK_NOTHROW(build(mlp_spec(4, {3, 3}, 2, NormMode::ln_learnable, BiasPolicy::all_biases), 0));
    auto gn = mlp_spec(4, {6, 5}, 2, NormMode::gn);
    CHECK_THROWS_AS(build(gn, 0), ConfigError);
    CHECK_THROWS_AS(build(mlp_spec(4, {}, 2), 0), ConfigError);
    CHECK_THROWS_AS(build(mlp_spec(4, {3}, 1), 0), ConfigError);

    Model m = build(mlp_spec(4, {3}, 2), 0);
    CHECK_THROWS_AS(m.predict(Tensor(Shape{2, 5})), ShapeError);
    CHECK(m.predict(Tensor(Shape{4}, 1.0)).first.shape() == Shape{1, 2});
}

TEST_CASE("forward examples") {
    Rng rng(2);
    auto x = random_tensor({10, 8}, rng);
    SUBCASE("fn_last feature rows have norm sqrt(d_L)") {
        Model m = build(mlp_spec(8, {12, 9}, 3, NormMode::fn_last), 5);
        auto f = m.predict(x).second;
        for (std::size_t b = 0; b < 10; ++b) CHECK(std::abs(l2_norm(f.row(b)) - 3.0) < 1e-9);
    }
    SUBCASE("ln_reduced feature rows have mean 0") {
        Model m = build(mlp_spec(8, {12, 9}, 3, NormMode::ln_reduced), 5);
        auto f = m.predict(x).second;
        for (std::size_t b = 0; b < 10; ++b) {
            auto r = f.row(b);
            CHECK(std::abs(std::accumulate(r.begin(), r.end(), 0.0)) < 1e-12);
        }
    }
    SUBCASE("vanilla and fn_last logits differ by a positive per-sample factor") {
        Model vanilla = build(mlp_spec(8, {12, 9}, 3), 5);
        Model fn = vanilla.with_norm_mode(NormMode::fn_last);
        CHECK(fn.params() == vanilla.params());
        auto lv = vanilla.predict(x, 0.0).first;
        auto lf = fn.predict(x, 0.0).first;
        CHECK(argmax_rows(lv) == argmax_rows(lf));
        for (std::size_t b = 0; b < 10; ++b) {
            const double ratio = lf.at({b, 0}) / lv.at({b, 0});
            CHECK(ratio > 0);
            for (std::size_t c = 1; c < 3; ++c) CHECK(rel_err(lf.at({b, c}), ratio * lv.at({b, c})) < 1e-9);
        }
    }
    SUBCASE("fn_layerwise equals fn_last with shared parameters") {
        auto spec = mlp_spec(8, {12, 9, 7}, 3, NormMode::fn_layerwise, BiasPolicy::first_layer_only);
        spec.activation = Activation::leaky_relu(1.0, 0.2);
        Model a = build(spec, 9, {.randomize_all = true});
        Model b = a.with_norm_mode(NormMode::fn_last);
        CHECK(max_abs_diff(a.predict(x, 0.0).second, b.predict(x, 0.0).second) < 1e-9);
    }
}

TEST_CASE("table CNN places feature normalization on the dense output only") {
    Rng rng(3);
    auto x = random_tensor({2, 3, 32, 32}, rng);
    Model vanilla = build(cnn_spec(10), 1);
    Model fn = vanilla.with_norm_mode(NormMode::fn_last);
    CHECK(feature_dim(vanilla.spec()) == 384);
    CHECK(vanilla.params().find("l5.weight")->value.shape() == Shape{384, 1600});
    auto fv = vanilla.predict(x).second;
    auto ff = fn.predict(x).second;
    for (std::size_t b = 0; b < 2; ++b) {
        const double n = l2_norm(fv.row(b));
        for (std::size_t j = 0; j < 384; ++j) CHECK(std::abs(ff.at({b, j}) - std::sqrt(384.0) * fv.at({b, j}) / n) < 1e-9);
    }
}

TEST_CASE("residual block examples") {
    Rng rng(4);
    const std::size_t d = 6;
    auto rho = Activation::leaky_relu(1.0, 0.1);
    for (int trial = 0; trial < 20; ++trial) {
        Tape tape;
        auto x = tape.constant(random_tensor({3, d}, rng));
        auto a1 = tape.constant(random_tensor({d, d}, rng));
        auto a2 = tape.constant(random_tensor({d, d}, rng));
        const double lambda = uniform(rng, 0.1, 10);
        auto y = residual_block_forward(x, ResidualVariant::plain, a1, a2, {}, {}, rho, 0.0).value();
        auto yl = residual_block_forward(scale(x, lambda), ResidualVariant::plain, a1, a2, {}, {}, rho, 0.0).value();
        for (std::size_t i = 0; i < y.size(); ++i) CHECK(rel_err(yl[i], lambda * y[i], 1e-12) < 1e-9);

        auto zero = tape.constant(Tensor(Shape{d, d}, 0.0));
        CHECK(residual_block_forward(x, ResidualVariant::plain, zero, zero, {}, {}, rho, 0.0).value() ==
              apply_activation(rho, x.value()));

        auto inner = residual_block_forward(x, ResidualVariant::ln_inner, a1, a2, {}, {}, rho, 1e-5).value();
        auto shift = residual_block_forward(x, ResidualVariant::ln_shift, a1, a2, {}, {}, rho, 1e-5).value();
        CHECK(max_abs_diff(inner, shift) > 1e-3);
    }
    Tape tape;
    auto x = tape.constant(Tensor(Shape{2, 4}));
    auto bad = tape.constant(Tensor(Shape{4, 3}));
    CHECK_THROWS_AS(residual_block_forward(x, ResidualVariant::plain, bad, bad, {}, {}, rho, 0.0), ShapeError);
}

TEST_CASE("bias-free networks are positively homogeneous after the first layer") {
    Rng rng(5);
    auto spec = mlp_spec(7, {9, 8, 6}, 3, NormMode::none, BiasPolicy::none);
    spec.activation = Activation::leaky_relu(1.3, 0.2);
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
        Model m = build(spec, static_cast<std::uint64_t>(trial));
        auto a1 = random_tensor({7}, rng);
        const double lambda = uniform(rng, 0.01, 100);
        auto f = m.predict(a1).second;
        auto fl = m.predict(scaled(a1, lambda)).second;
        for (std::size_t i = 0; i < f.size(); ++i) worst = std::max(worst, rel_err(fl[i], lambda * f[i], 1e-300));
    }
    CHECK(worst < 1e-9);
}

TEST_CASE("batch norm model updates running statistics only in training mode") {
    Rng rng(6);
    Model m = build(mlp_spec(4, {6, 5}, 3, NormMode::bn), 2);
    auto x = random_tensor({8, 4}, rng);
    const ParamSet before = m.params();
    {
        Tape tape;
        m.forward(tape, x, {.training = false});
    }
    CHECK(m.params() == before);
    {
        Tape tape;
        m.forward(tape, x, {.training = true});
    }
    CHECK_FALSE(m.params().find("l0.running_mean")->value == before.find("l0.running_mean")->value);
    CHECK(m.params().find("l0.weight")->value == before.find("l0.weight")->value);
}

TEST_CASE("model gradients agree with finite differences") {
    Rng rng(7);
    std::vector<NetworkSpec> specs;
    for (NormMode mode : {NormMode::none, NormMode::fn_layerwise, NormMode::fn_last, NormMode::ln_layerwise,
                          NormMode::ln_reduced, NormMode::ln_pre, NormMode::ln_learnable, NormMode::gn,
                          NormMode::bn}) {
        auto s = mlp_spec(5, {6, 4}, 3, mode);
        s.activation = Activation::leaky_relu(1.0, 0.2);
        specs.push_back(s);
    }
    for (ResidualVariant v : {ResidualVariant::plain, ResidualVariant::ln_inner, ResidualVariant::ln_shift,
                              ResidualVariant::fn_inner_mv, ResidualVariant::fn_inner_scale}) {
        auto s = resmlp_spec(5, 4, 2, v, 3, NormMode::fn_last, BiasPolicy::first_layer_only);
        s.activation = Activation::leaky_relu(1.0, 0.2);
        specs.push_back(s);
    }
    {
        NetworkSpec s;
        s.input_shape = {2, 6, 6};
        s.layers = {ConvLayer{3, 3, 1}, PoolLayer{2, 2}, FlattenLayer{}, DenseLayer{5}};
        s.norm_mode = NormMode::ln_layerwise;
        s.num_classes = 3;
        specs.push_back(s);
    }
    for (const auto& spec : specs) {
        CAPTURE(to_string(spec.norm_mode));
        CAPTURE(to_json(spec).dump());
        Model m = build(spec, 3, {.randomize_all = spec.norm_mode != NormMode::bn});
        Shape xs{4};
        xs.insert(xs.end(), spec.input_shape.begin(), spec.input_shape.end());
        auto x = random_tensor(xs, rng);
        const std::vector<int> labels{0, 1, 2, 1};
        std::vector<Tensor> init;
        for (const auto& e : m.params().entries) init.push_back(e.value);
        auto report = finite_diff_check(
            [&](Tape& t, std::span<const Var> p) {
                Model probe = m;
                auto r = probe.forward(t, x, p, {.training = true, .epsilon = 1e-5});
                return softmax_cross_entropy(r.logits, labels);
            },
            init);
        CAPTURE(report.worst);
        CHECK(report.coordinates_checked > 20);
        CHECK(report.max_rel_error < 1e-4);
    }
}

TEST_CASE("checkpoint round trip") {
    auto spec = resmlp_spec(5, 4, 2, ResidualVariant::ln_shift, 3, NormMode::ln_learnable, BiasPolicy::all_biases);
    spec.activation = Activation::leaky_relu(1.0, 0.25);
    Model m = build(spec, 8, {.randomize_all = true});
    const std::string text = checkpoint_string(m);
    CHECK(text == checkpoint_string(build(spec, 8, {.randomize_all = true})));
    Model back = model_from_checkpoint_string(text);
    CHECK(back.spec() == m.spec());
    CHECK(back.params() == m.params());
    CHECK(checkpoint_string(back) == text);

    CHECK_THROWS_AS(model_from_checkpoint_string("not json"), FormatError);
    CHECK_THROWS_AS(model_from_checkpoint_string("{\"format\": \"other\"}"), FormatError);
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/model.json"), FormatError);
    auto j = Json::parse(text);
    j["params"][0]["shape"] = {99};
    CHECK_THROWS_AS(model_from_checkpoint_string(j.dump()), FormatError);
    CHECK(spec_from_json(to_json(cnn_spec(10, NormMode::gn))) == cnn_spec(10, NormMode::gn));
}
