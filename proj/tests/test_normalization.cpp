#include <doctest.h>

#include <cmath>
#include <numeric>

#include "fednorm/errors.hpp"
#include "fednorm/gradcheck.hpp"
#include "fednorm/normalization.hpp"
#include "fednorm/ops.hpp"
#include "test_util.hpp"

using namespace fednorm;
using fednorm::testing::random_tensor;

namespace {

void check_close(const std::vector<double>& a, const std::vector<double>& b, double tol) {
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) <= tol);
}

std::vector<double> random_vec(Rng& rng, std::size_t d, double lo = -2, double hi = 2) {
    std::vector<double> v(d);
    for (auto& x : v) x = uniform(rng, lo, hi);
    return v;
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

}  // namespace

TEST_CASE("mv_normalize examples") {
    check_close(mv_normalize(std::vector<double>{1, -1}, 0.0), {1, -1}, 1e-15);
    check_close(mv_normalize(std::vector<double>{0, 2}, 0.0), {-1, 1}, 1e-15);
    CHECK_THROWS_AS(mv_normalize(std::vector<double>{5, 5, 5}, 0.0), DegenerateInputError);
    check_close(mv_normalize(std::vector<double>{5, 5, 5}, 1e-5), {0, 0, 0}, 0.0);
}

TEST_CASE("mv output has zero mean and unit variance") {
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        auto y = mv_normalize(random_vec(rng, 7), 0.0);
        CHECK(std::abs(mean(y)) < 1e-9);
        double var = 0;
        for (double v : y) var += v * v;
        CHECK(std::abs(var / y.size() - 1.0) < 1e-9);
    }
}

TEST_CASE("scale_normalize examples") {
    check_close(scale_normalize(std::vector<double>{3, 4}, 0.0), {0.848528137423857, 1.131370849898476}, 1e-12);
    check_close(scale_normalize(std::vector<double>{0, 0}, 1e-5), {0, 0}, 0.0);
    CHECK_THROWS_AS(scale_normalize(std::vector<double>{0, 0}, 0.0), DegenerateInputError);
    Rng rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        auto y = scale_normalize(random_vec(rng, 9), 1e-5);
        CHECK(std::abs(l2_norm(y) - 3.0) < 3e-9);
    }
}

TEST_CASE("mean_shift examples") {
    check_close(mean_shift(std::vector<double>{1, 2, 3}), {-1, 0, 1}, 0.0);
    check_close(mean_shift(std::vector<double>{4, 4, 4, 4}), {0, 0, 0, 0}, 0.0);
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        auto x = random_vec(rng, 6);
        auto once = mean_shift(x);
        CHECK(std::abs(mean(once)) < 1e-12);
        check_close(mean_shift(once), once, 1e-15);
    }
}

TEST_CASE("mv_learnable examples") {
    Tape tape;
    auto x = Tensor::vector({0.3, -1.2, 2.0, 0.7});
    auto stat = mv_learnable(tape.constant(x), tape.constant(Tensor(Shape{4}, 1.0)),
                             tape.constant(Tensor(Shape{4}, 0.0)), 1e-5);
    CHECK(stat.value() == mv_normalize(x, 1e-5));
    auto beta = Tensor::vector({1, 2, 3, 4});
    auto shifted = mv_learnable(tape.constant(x), tape.constant(Tensor(Shape{4}, 0.0)), tape.constant(beta), 1e-5);
    CHECK(shifted.value() == beta);

    Rng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        auto xs = random_tensor({3, 6}, rng);
        auto report = finite_diff_check(
            [&](Tape& t, std::span<const Var> p) {
                auto y = mv_learnable(t.constant(xs), p[0], p[1], 1e-5);
                return sum_of_squares(activate(y, Activation::leaky_relu(1.0, 0.3)));
            },
            {random_tensor({6}, rng), random_tensor({6}, rng)});
        CHECK(report.max_rel_error < 1e-5);
    }
}

TEST_CASE("group_normalize examples") {
    Rng rng(5);
    auto x = random_vec(rng, 8);
    check_close(group_normalize(x, 1, 0.0), mv_normalize(x, 0.0), 0.0);
    check_close(group_normalize(x, 8, 1e-5), std::vector<double>(8, 0.0), 0.0);
    check_close(group_normalize(std::vector<double>{1, -1, 0, 2}, 2, 0.0), {1, -1, -1, 1}, 1e-15);
    CHECK_THROWS_AS(group_normalize(std::vector<double>{1, 2, 3}, 2, 0.0), ShapeError);
}

TEST_CASE("batch_normalize examples") {
    SUBCASE("identical rows normalize to zero") {
        Tape tape;
        auto state = BatchNormState::fresh(3);
        auto y = batch_normalize(tape.constant(Tensor::matrix(2, 3, {1, 2, 3, 1, 2, 3})), state, 1e-5, true);
        CHECK(y.value() == Tensor(Shape{2, 3}, 0.0));
    }
    SUBCASE("eval with unit running stats is pass-through up to epsilon") {
        Tape tape;
        auto state = BatchNormState::fresh(2);
        auto x = Tensor::matrix(1, 2, {0.5, -3.0});
        auto y = batch_normalize(tape.constant(x), state, 1e-5, false);
        CHECK(max_abs_diff(y.value(), x) < 1e-9);
    }
    SUBCASE("running-stat trajectory matches hand recursion") {
        Rng rng(6);
        auto state = BatchNormState::fresh(2, 0.1);
        double rm[2] = {0, 0}, rv[2] = {1, 1};
        for (int step = 0; step < 3; ++step) {
            auto x = random_tensor({4, 2}, rng);
            Tape tape;
            batch_normalize(tape.constant(x), state, 1e-5, true);
            for (std::size_t c = 0; c < 2; ++c) {
                double mu = 0, var = 0;
                for (std::size_t b = 0; b < 4; ++b) mu += x.at({b, c}) / 4;
                for (std::size_t b = 0; b < 4; ++b) var += (x.at({b, c}) - mu) * (x.at({b, c}) - mu) / 4;
                rm[c] = 0.9 * rm[c] + 0.1 * mu;
                rv[c] = 0.9 * rv[c] + 0.1 * var;
                CHECK(state.running_mean[c] == doctest::Approx(rm[c]).epsilon(1e-14));
                CHECK(state.running_var[c] == doctest::Approx(rv[c]).epsilon(1e-14));
            }
        }
    }
    SUBCASE("single-sample batch in training mode is an error") {
        Tape tape;
        auto state = BatchNormState::fresh(2);
        CHECK_THROWS(batch_normalize(tape.constant(Tensor::matrix(1, 2, {1, 2})), state, 1e-5, true));
    }
}

TEST_CASE("scale and shift invariance properties") {
    Rng rng(7);
    for (int trial = 0; trial < 100; ++trial) {
        auto x = random_vec(rng, 10);
        const double lambda = uniform(rng, 0.01, 100);
        const double c = uniform(rng, -10, 10);
        std::vector<double> scaled(x), shifted(x);
        for (auto& v : scaled) v *= lambda;
        for (auto& v : shifted) v += c;
        check_close(mv_normalize(scaled, 0.0), mv_normalize(x, 0.0), 1e-9);
        check_close(scale_normalize(scaled, 0.0), scale_normalize(x, 0.0), 1e-9);
        check_close(mv_normalize(shifted, 0.0), mv_normalize(x, 0.0), 1e-9);
    }
    // Scale normalization is not shift invariant.
    auto a = scale_normalize(std::vector<double>{1, 2}, 0.0);
    auto b = scale_normalize(std::vector<double>{2, 3}, 0.0);
    CHECK(std::abs(a[0] - b[0]) > 0.1);
}

TEST_CASE("MV decomposes into sqrt(d) * shift / ||shift||") {
    Rng rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        auto x = random_vec(rng, 12);
        auto s = mean_shift(x);
        const double n = l2_norm(s);
        std::vector<double> rhs(s.size());
        for (std::size_t i = 0; i < s.size(); ++i) rhs[i] = std::sqrt(12.0) * s[i] / n;
        check_close(mv_normalize(x, 0.0), rhs, 1e-9);
    }
}

TEST_CASE("normalization backwards agree with finite differences") {
    Rng rng(10);
    auto downstream = [](const Var& y) { return sum_of_squares(activate(y, Activation::leaky_relu(1.0, 0.2))); };
    for (int trial = 0; trial < 10; ++trial) {
        auto x = random_tensor({3, 8}, rng);
        GradCheckOptions opt;
        opt.seed = static_cast<std::uint64_t>(trial);
        auto run = [&](auto op) {
            return finite_diff_check([&](Tape&, std::span<const Var> p) { return downstream(op(p[0])); }, {x}, opt)
                .max_rel_error;
        };
        CHECK(run([](const Var& v) { return mv_normalize(v, 1e-5); }) < 1e-4);
        CHECK(run([](const Var& v) { return scale_normalize(v, 1e-5); }) < 1e-4);
        CHECK(run([](const Var& v) { return mean_shift(v); }) < 1e-4);
        CHECK(run([](const Var& v) { return group_normalize(v, 2, 1e-5); }) < 1e-4);
        CHECK(run([](const Var& v) {
                  auto st = BatchNormState::fresh(8);
                  return batch_normalize(v, st, 1e-5, true);
              }) < 1e-4);
        CHECK(run([](const Var& v) {
                  BatchNormState st{0.1, Tensor(Shape{8}, 0.3), Tensor(Shape{8}, 2.0)};
                  return batch_normalize(v, st, 1e-5, false);
              }) < 1e-4);
    }
}
