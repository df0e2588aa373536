#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "fednorm/data.hpp"
#include "fednorm/errors.hpp"
#include "fednorm/ops.hpp"
#include "fednorm/rng.hpp"

using namespace fednorm;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    auto p = fs::temp_directory_path() / "fednorm_test_data";
    fs::create_directories(p);
    return p;
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

std::vector<unsigned char> idx_images(std::uint32_t n, std::uint32_t r, std::uint32_t c) {
    std::vector<unsigned char> b;
    put_be32(b, 0x803);
    put_be32(b, n);
    put_be32(b, r);
    put_be32(b, c);
    for (std::uint32_t i = 0; i < n * r * c; ++i) b.push_back(static_cast<unsigned char>((i * 37) % 256));
    return b;
}

std::vector<unsigned char> idx_labels(const std::vector<unsigned char>& labels) {
    std::vector<unsigned char> b;
    put_be32(b, 0x801);
    put_be32(b, static_cast<std::uint32_t>(labels.size()));
    b.insert(b.end(), labels.begin(), labels.end());
    return b;
}

void check_partition_invariants(const Dataset& d, const std::vector<ClientShard>& shards) {
    std::set<std::size_t> seen;
    std::size_t total = 0;
    for (const auto& s : shards) {
        std::size_t hist = 0;
        for (auto h : s.label_histogram) hist += h;
        CHECK(hist == s.size());
        CHECK(std::is_sorted(s.indices.begin(), s.indices.end()));
        for (auto i : s.indices) CHECK(seen.insert(i).second);
        total += s.size();
    }
    CHECK(total == d.size());
}

std::size_t support(const ClientShard& s) {
    std::size_t n = 0;
    for (auto h : s.label_histogram) n += h > 0 ? 1 : 0;
    return n;
}

// Training accuracy of a softmax-linear model fit by full-batch gradient descent.
double linear_train_accuracy(const Dataset& d, int steps, double lr) {
    const std::size_t dim = d.inputs.row_size();
    Tensor w(Shape{d.num_classes, dim}, 0.0), b(Shape{d.num_classes}, 0.0);
    for (int s = 0; s < steps; ++s) {
        Tape tape;
        auto wv = tape.parameter(w), bv = tape.parameter(b);
        auto loss = softmax_cross_entropy(affine(tape.constant(d.inputs), wv, bv), d.labels);
        tape.backward(loss);
        sgd_step(w, tape.grad(wv), lr);
        sgd_step(b, tape.grad(bv), lr);
    }
    Tape tape;
    auto pred = argmax_rows(affine(tape.constant(d.inputs), tape.constant(w), tape.constant(b)).value());
    std::size_t ok = 0;
    for (std::size_t i = 0; i < d.size(); ++i) ok += pred[i] == d.labels[i] ? 1 : 0;
    return static_cast<double>(ok) / static_cast<double>(d.size());
}

}  // namespace

TEST_CASE("portable samplers have the right moments") {
    Rng rng(1);
    double s = 0, s2 = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double x = normal01(rng);
        s += x;
        s2 += x * x;
    }
    CHECK(std::abs(s / n) < 0.01);
    CHECK(std::abs(s2 / n - 1.0) < 0.02);
    for (double a : {0.1, 0.5, 1.0, 3.0}) {
        double m = 0, m2 = 0;
        for (int i = 0; i < n; ++i) {
            const double g = gamma_draw(rng, a);
            CHECK(g >= 0.0);
            m += g;
            m2 += g * g;
        }
        m /= n;
        const double var = m2 / n - m * m;
        CHECK(std::abs(m - a) < 0.03 * std::max(1.0, a));
        CHECK(std::abs(var - a) < 0.08 * std::max(1.0, a));
    }
}

TEST_CASE("gaussian mixture") {
    auto d = generate_gaussian_mixture(10, 200, 16, 6.0, 3);
    validate(d);
    CHECK(d.size() == 2000);
    CHECK(d.inputs.shape() == Shape{2000, 16});
    CHECK(d.class_counts() == std::vector<std::size_t>(10, 200));
    CHECK(generate_gaussian_mixture(10, 200, 16, 6.0, 3).inputs == d.inputs);
    CHECK_FALSE(generate_gaussian_mixture(10, 200, 16, 6.0, 4).inputs == d.inputs);
    CHECK_THROWS_AS(generate_gaussian_mixture(1, 5, 16, 6.0, 3), ConfigError);

    SUBCASE("class means sit about `separation` apart") {
        std::vector<std::vector<double>> mu(10, std::vector<double>(16, 0.0));
        for (std::size_t i = 0; i < d.size(); ++i)
            for (std::size_t j = 0; j < 16; ++j) mu[d.labels[i]][j] += d.inputs[i * 16 + j] / 200.0;
        double sum = 0;
        int pairs = 0;
        for (int a = 0; a < 10; ++a)
            for (int b = a + 1; b < 10; ++b) {
                double s = 0;
                for (int j = 0; j < 16; ++j) s += (mu[a][j] - mu[b][j]) * (mu[a][j] - mu[b][j]);
                sum += std::sqrt(s);
                ++pairs;
            }
        CHECK(std::abs(sum / pairs - 6.0) < 1.0);
    }
    SUBCASE("well separated classes are linearly separable") {
        auto easy = generate_gaussian_mixture(10, 100, 16, 10.0, 5);
        CHECK(linear_train_accuracy(easy, 300, 0.5) > 0.99);
    }
    SUBCASE("zero separation gives chance accuracy on fresh data") {
        auto train = generate_gaussian_mixture(10, 200, 16, 0.0, 6);
        auto test = generate_gaussian_mixture(10, 200, 16, 0.0, 7);
        std::vector<std::vector<double>> mu(10, std::vector<double>(16, 0.0));
        for (std::size_t i = 0; i < train.size(); ++i)
            for (std::size_t j = 0; j < 16; ++j) mu[train.labels[i]][j] += train.inputs[i * 16 + j];
        std::size_t ok = 0;
        for (std::size_t i = 0; i < test.size(); ++i) {
            int best = 0;
            double bd = 1e300;
            for (int c = 0; c < 10; ++c) {
                double s = 0;
                for (int j = 0; j < 16; ++j) {
                    const double diff = test.inputs[i * 16 + j] - mu[c][j] / 200.0;
                    s += diff * diff;
                }
                if (s < bd) bd = s, best = c;
            }
            ok += best == test.labels[i] ? 1 : 0;
        }
        CHECK(std::abs(static_cast<double>(ok) / test.size() - 0.1) < 0.04);
    }
}

TEST_CASE("IDX loading") {
    const auto dir = temp_dir();
    write_bytes(dir / "img", idx_images(3, 4, 5));
    write_bytes(dir / "lab", idx_labels({1, 9, 0}));
    auto d = load_idx((dir / "img").string(), (dir / "lab").string());
    CHECK(d.size() == 3);
    CHECK(d.inputs.shape() == Shape{3, 1, 4, 5});
    CHECK(d.labels == std::vector<int>{1, 9, 0});
    CHECK(d.inputs[1] == doctest::Approx(37.0 / 255.0));
    for (double v : d.inputs.values()) CHECK((v >= 0.0 && v <= 1.0));

    auto truncated = idx_images(3, 4, 5);
    truncated.resize(truncated.size() - 1);
    write_bytes(dir / "trunc", truncated);
    CHECK_THROWS_AS(load_idx((dir / "trunc").string(), (dir / "lab").string()), FormatError);
    write_bytes(dir / "big", idx_labels({1, 10, 0}));
    CHECK_THROWS_AS(load_idx((dir / "img").string(), (dir / "big").string()), FormatError);
    write_bytes(dir / "two", idx_labels({1, 2}));
    CHECK_THROWS_AS(load_idx((dir / "img").string(), (dir / "two").string()), FormatError);
    CHECK_THROWS_AS(load_idx((dir / "lab").string(), (dir / "lab").string()), FormatError);
    CHECK_THROWS_AS(load_idx((dir / "missing").string(), (dir / "lab").string()), FormatError);
}

TEST_CASE("CSV loading") {
    auto d = parse_csv("0,1.5,2\n2,-3,4e-2\n1,0,0\n", 3);
    CHECK(d.size() == 3);
    CHECK(d.inputs.shape() == Shape{3, 2});
    CHECK(d.labels == std::vector<int>{0, 2, 1});
    CHECK(d.inputs[3] == 0.04);
    CHECK_THROWS_AS(parse_csv("", 3), FormatError);
    CHECK_THROWS_AS(parse_csv("0,1,2\n1,2\n", 3), FormatError);
    CHECK_THROWS_AS(parse_csv("0,1,x\n", 3), FormatError);
    CHECK_THROWS_AS(parse_csv("3,1,2\n", 3), FormatError);
    CHECK_THROWS_AS(parse_csv("0.5,1,2\n", 3), FormatError);

    auto g = generate_gaussian_mixture(3, 4, 5, 2.0, 9);
    const auto path = (temp_dir() / "roundtrip.csv").string();
    write_csv(path, g);
    auto back = load_csv(path, 3);
    CHECK(back.inputs == g.inputs);
    CHECK(back.labels == g.labels);
    CHECK(format_csv(back) == format_csv(g));
}

TEST_CASE("n-class partition") {
    auto d = generate_gaussian_mixture(10, 50, 4, 3.0, 1);
    SUBCASE("one class per client, ten clients") {
        auto shards = partition_n_class(d, 10, 1, 2);
        check_partition_invariants(d, shards);
        std::set<std::size_t> classes;
        for (const auto& s : shards) {
            CHECK(support(s) == 1);
            CHECK(s.size() == 50);
            for (std::size_t c = 0; c < 10; ++c)
                if (s.label_histogram[c]) classes.insert(c);
        }
        CHECK(classes.size() == 10);
    }
    SUBCASE("two classes per client, five clients: each class at exactly one client") {
        auto shards = partition_n_class(d, 5, 2, 3);
        check_partition_invariants(d, shards);
        for (std::size_t c = 0; c < 10; ++c) {
            int holders = 0;
            for (const auto& s : shards) holders += s.label_histogram[c] ? 1 : 0;
            CHECK(holders == 1);
        }
    }
    SUBCASE("shared classes split equally, remainder to lowest id") {
        auto small = generate_gaussian_mixture(2, 7, 3, 1.0, 1);
        auto shards = partition_n_class(small, 4, 1, 5);
        check_partition_invariants(small, shards);
        for (std::size_t c = 0; c < 2; ++c) {
            std::vector<std::size_t> sizes;
            for (const auto& s : shards)
                if (s.label_histogram[c]) sizes.push_back(s.label_histogram[c]);
            CHECK(sizes == std::vector<std::size_t>{4, 3});
        }
    }
    SUBCASE("support size is n for every client and seed") {
        for (std::uint64_t seed = 0; seed < 20; ++seed)
            for (std::size_t n : {1, 2, 3})
                for (const auto& s : partition_n_class(d, 10, n, seed)) CHECK(support(s) == n);
    }
    CHECK_THROWS_AS(partition_n_class(d, 4, 2, 1), ConfigError);
    CHECK(partition_n_class(d, 10, 1, 7) == partition_n_class(d, 10, 1, 7));
}

TEST_CASE("dirichlet partition") {
    auto d = generate_gaussian_mixture(10, 200, 4, 3.0, 1);
    for (std::uint64_t seed = 0; seed < 10; ++seed)
        for (double beta : {0.05, 0.1, 1.0, 10.0}) check_partition_invariants(d, partition_dirichlet(d, 10, beta, seed));

    auto one = partition_dirichlet(d, 1, 0.1, 1);
    REQUIRE(one.size() == 1);
    CHECK(one[0].size() == d.size());

    for (std::uint64_t seed = 0; seed < 5; ++seed)
        for (const auto& s : partition_dirichlet(d, 10, 1e6, seed))
            for (auto h : s.label_histogram) CHECK(std::abs(static_cast<double>(h) / 200.0 - 0.1) <= 0.005);

    double mean_support = 0;
    for (const auto& s : partition_dirichlet(d, 10, 0.1, 3)) mean_support += static_cast<double>(support(s)) / 10.0;
    MESSAGE("beta = 0.1 mean per-client class count: " << mean_support);
    CHECK(mean_support < 6.0);

    CHECK(partition_dirichlet(d, 10, 0.5, 4) == partition_dirichlet(d, 10, 0.5, 4));
    CHECK_THROWS_AS(partition_dirichlet(d, 10, 0.0, 4), ConfigError);
    // Tiny beta underflows every gamma draw; each class still lands somewhere.
    check_partition_invariants(d, partition_dirichlet(d, 10, 1e-300, 4));
}

TEST_CASE("test partitions follow the training plan") {
    auto train = generate_gaussian_mixture(10, 50, 4, 3.0, 1);
    auto test = generate_gaussian_mixture(10, 20, 4, 3.0, 2);
    PartitionPlan plan{PartitionScheme::n_class, 10, 1, 0.5, 9};
    auto tr = partition(train, plan);
    auto te = partition_test_like_train(test, plan);
    CHECK(te.warnings.empty());
    for (std::size_t k = 0; k < 10; ++k)
        for (std::size_t c = 0; c < 10; ++c) CHECK((tr[k].label_histogram[c] > 0) == (te.shards[k].label_histogram[c] > 0));

    PartitionPlan single{PartitionScheme::n_class, 1, 10, 0.5, 9};
    CHECK(partition_test_like_train(test, single).shards[0].size() == test.size());

    PartitionPlan dir{PartitionScheme::dirichlet, 10, 1, 0.3, 4};
    CHECK(partition_test_like_train(test, dir).shards == partition_test_like_train(test, dir).shards);

    Dataset missing = test;
    for (auto& y : missing.labels)
        if (y == 3) y = 4;
    auto warn = partition_test_like_train(missing, plan);
    CHECK_FALSE(warn.warnings.empty());

    auto j = to_json(tr[0]);
    CHECK(j["m_k"] == 50);
    CHECK(j["histogram"].size() == 10);
}
