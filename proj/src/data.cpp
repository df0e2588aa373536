#include "fednorm/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "fednorm/errors.hpp"
#include "fednorm/rng.hpp"

namespace fednorm {

namespace {

constexpr std::uint64_t kClassPermTag = 0x7065726dULL;
constexpr std::uint64_t kSplitTag = 0x73706c74ULL;
constexpr std::uint64_t kDirichletTag = 0x64697269ULL;
constexpr std::uint64_t kHoldoutTag = 0x686f6c64ULL;

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

std::uint32_t read_be32(const std::string& bytes, std::size_t offset, const std::string& path) {
    if (bytes.size() < offset + 4) throw FormatError("'" + path + "' is truncated (header)");
    std::uint32_t v = 0;
    for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[offset + i]);
    return v;
}

std::vector<std::vector<std::size_t>> indices_by_class(const Dataset& d) {
    std::vector<std::vector<std::size_t>> by_class(d.num_classes);
    for (std::size_t i = 0; i < d.size(); ++i) by_class[static_cast<std::size_t>(d.labels[i])].push_back(i);
    return by_class;
}

std::vector<ClientShard> finish_shards(const Dataset& d, std::vector<std::vector<std::size_t>> per_client) {
    std::vector<ClientShard> shards(per_client.size());
    for (std::size_t k = 0; k < per_client.size(); ++k) {
        auto& s = shards[k];
        s.client_id = k;
        s.indices = std::move(per_client[k]);
        std::sort(s.indices.begin(), s.indices.end());
        s.label_histogram.assign(d.num_classes, 0);
        for (auto i : s.indices) ++s.label_histogram[static_cast<std::size_t>(d.labels[i])];
    }
    return shards;
}

// Seeded class permutation shared by train and test partitions.
std::vector<std::size_t> class_permutation(std::size_t num_classes, std::uint64_t seed) {
    std::vector<std::size_t> perm(num_classes);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng rng(derive_seed(seed, {kClassPermTag}));
    shuffle_in_place(perm, rng);
    return perm;
}

std::vector<std::vector<std::size_t>> n_class_holders(std::size_t num_classes, std::size_t num_clients,
                                                      std::size_t n, std::uint64_t seed) {
    if (n == 0 || n > num_classes) throw ConfigError("n_class: n must be in [1, C]");
    if (n * num_clients < num_classes)
        throw ConfigError("n_class: n * K = " + std::to_string(n * num_clients) + " cannot cover " +
                          std::to_string(num_classes) + " classes");
    const auto perm = class_permutation(num_classes, seed);
    std::vector<std::vector<std::size_t>> holders(num_classes);
    for (std::size_t k = 0; k < num_clients; ++k)
        for (std::size_t j = 0; j < n; ++j) holders[perm[(k * n + j) % num_classes]].push_back(k);
    return holders;
}

// Largest-remainder rounding of p * total; ties go to the lowest index.
std::vector<std::size_t> largest_remainder(const std::vector<double>& p, std::size_t total) {
    std::vector<std::size_t> counts(p.size());
    std::vector<std::pair<double, std::size_t>> rema;
    std::size_t assigned = 0;
    for (std::size_t k = 0; k < p.size(); ++k) {
        const double q = p[k] * static_cast<double>(total);
        counts[k] = static_cast<std::size_t>(std::floor(q));
        assigned += counts[k];
        rema.push_back({q - std::floor(q), k});
    }
    std::stable_sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; assigned < total; ++i, ++assigned) ++counts[rema[i % rema.size()].second];
    return counts;
}

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

}  // namespace

Shape Dataset::sample_shape() const {
    if (inputs.rank() < 2) return Shape{1};
    return Shape(inputs.shape().begin() + 1, inputs.shape().end());
}

Tensor Dataset::gather_inputs(std::span<const std::size_t> indices) const {
    Shape s = inputs.shape();
    s[0] = indices.size();
    const std::size_t row = inputs.row_size();
    if (indices.empty()) throw ShapeError("gather_inputs: no indices");
    Tensor out(s);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= size()) throw ShapeError("gather_inputs: index out of range");
        std::copy_n(inputs.data().begin() + static_cast<std::ptrdiff_t>(indices[i] * row), row,
                    out.data().begin() + static_cast<std::ptrdiff_t>(i * row));
    }
    return out;
}

std::vector<int> Dataset::gather_labels(std::span<const std::size_t> indices) const {
    std::vector<int> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back(labels.at(i));
    return out;
}

std::vector<std::size_t> Dataset::class_counts() const {
    std::vector<std::size_t> c(num_classes, 0);
    for (int y : labels) ++c[static_cast<std::size_t>(y)];
    return c;
}

void validate(const Dataset& d) {
    if (d.size() == 0) throw FormatError("dataset is empty");
    if (d.inputs.rank() < 2 || d.inputs.dim(0) != d.size())
        throw FormatError("dataset has " + std::to_string(d.size()) + " labels but inputs of shape " +
                          shape_string(d.inputs.shape()));
    for (int y : d.labels)
        if (y < 0 || static_cast<std::size_t>(y) >= d.num_classes)
            throw FormatError("label " + std::to_string(y) + " outside [0, " + std::to_string(d.num_classes) + ")");
}

std::string to_string(PartitionScheme s) { return s == PartitionScheme::n_class ? "n_class" : "dirichlet"; }

PartitionScheme parse_partition_scheme(const std::string& s) {
    if (s == "n_class") return PartitionScheme::n_class;
    if (s == "dirichlet") return PartitionScheme::dirichlet;
    throw ConfigError("unknown partition scheme '" + s + "'");
}

Dataset generate_gaussian_mixture(std::size_t num_classes, std::size_t n_per_class, std::size_t dim,
                                  double separation, std::uint64_t seed) {
    if (num_classes < 2 || dim < 2 || n_per_class == 0)
        throw ConfigError("gaussian mixture needs C >= 2, dim >= 2 and at least one sample per class");
    Rng rng(seed);
    std::vector<std::vector<double>> means(num_classes, std::vector<double>(dim));
    for (auto& mu : means) {
        double norm = 0;
        do {
            for (auto& v : mu) v = normal01(rng);
            norm = l2_norm(mu);
        } while (norm == 0.0);
        for (auto& v : mu) v *= separation / std::sqrt(2.0) / norm;
    }
    Dataset d;
    d.num_classes = num_classes;
    d.inputs = Tensor(Shape{num_classes * n_per_class, dim});
    d.labels.reserve(num_classes * n_per_class);
    std::size_t i = 0;
    for (std::size_t c = 0; c < num_classes; ++c)
        for (std::size_t s = 0; s < n_per_class; ++s, ++i) {
            for (std::size_t j = 0; j < dim; ++j) d.inputs[i * dim + j] = means[c][j] + normal01(rng);
            d.labels.push_back(static_cast<int>(c));
        }
    return d;
}

Dataset generate_xor(std::size_t n, double noise, std::uint64_t seed) {
    if (n == 0) throw ConfigError("xor dataset needs at least one sample");
    Rng rng(seed);
    Dataset d;
    d.num_classes = 2;
    d.inputs = Tensor(Shape{n, 2});
    for (std::size_t i = 0; i < n; ++i) {
        const double a = i % 2 ? 1.0 : -1.0, b = (i / 2) % 2 ? 1.0 : -1.0;
        d.inputs[2 * i] = a + noise * normal01(rng);
        d.inputs[2 * i + 1] = b + noise * normal01(rng);
        d.labels.push_back(a * b < 0 ? 1 : 0);
    }
    return d;
}

std::pair<Dataset, Dataset> train_test_split(const Dataset& d, double test_fraction, std::uint64_t seed) {
    if (!(test_fraction >= 0.0 && test_fraction <= 1.0)) throw ConfigError("test_fraction must be in [0, 1]");
    std::vector<std::vector<std::size_t>> by_class(d.num_classes);
    for (std::size_t i = 0; i < d.size(); ++i) by_class[static_cast<std::size_t>(d.labels[i])].push_back(i);
    std::vector<bool> to_test(d.size(), false);
    for (std::size_t c = 0; c < d.num_classes; ++c) {
        Rng rng(derive_seed(seed, {kHoldoutTag, c}));
        auto& idx = by_class[c];
        shuffle_in_place(idx, rng);
        const auto n = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(idx.size())));
        for (std::size_t j = 0; j < n; ++j) to_test[idx[j]] = true;
    }
    std::vector<std::size_t> tr, te;
    for (std::size_t i = 0; i < d.size(); ++i) (to_test[i] ? te : tr).push_back(i);
    auto part = [&](const std::vector<std::size_t>& idx) {
        Dataset out;
        out.num_classes = d.num_classes;
        out.inputs = d.gather_inputs(idx);
        out.labels = d.gather_labels(idx);
        return out;
    };
    return {part(tr), part(te)};
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path, std::size_t num_classes) {
    const std::string img = read_file(images_path);
    const std::string lab = read_file(labels_path);
    if (read_be32(img, 0, images_path) != 0x00000803u)
        throw FormatError("'" + images_path + "' is not an IDX image file (bad magic)");
    if (read_be32(lab, 0, labels_path) != 0x00000801u)
        throw FormatError("'" + labels_path + "' is not an IDX label file (bad magic)");
    const std::size_t n = read_be32(img, 4, images_path);
    const std::size_t rows = read_be32(img, 8, images_path);
    const std::size_t cols = read_be32(img, 12, images_path);
    const std::size_t nl = read_be32(lab, 4, labels_path);
    if (n != nl)
        throw FormatError("IDX count mismatch: " + std::to_string(n) + " images vs " + std::to_string(nl) + " labels");
    if (n == 0 || rows == 0 || cols == 0) throw FormatError("IDX file has an empty dimension");
    if (img.size() < 16 + n * rows * cols) throw FormatError("'" + images_path + "' is truncated");
    if (lab.size() < 8 + n) throw FormatError("'" + labels_path + "' is truncated");

    Dataset d;
    d.num_classes = num_classes;
    d.inputs = Tensor(Shape{n, 1, rows, cols});
    for (std::size_t i = 0; i < n * rows * cols; ++i)
        d.inputs[i] = static_cast<double>(static_cast<unsigned char>(img[16 + i])) / 255.0;
    d.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto y = static_cast<unsigned char>(lab[8 + i]);
        if (y >= num_classes)
            throw FormatError("label " + std::to_string(y) + " at index " + std::to_string(i) + " is not below " +
                              std::to_string(num_classes));
        d.labels[i] = y;
    }
    return d;
}

Dataset parse_csv(const std::string& text, std::size_t num_classes) {
    std::vector<double> values;
    std::vector<int> labels;
    std::size_t dim = 0;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<double> cells;
        std::size_t pos = 0;
        while (pos <= line.size()) {
            std::size_t end = line.find(',', pos);
            if (end == std::string::npos) end = line.size();
            std::string cell = line.substr(pos, end - pos);
            while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
            while (!cell.empty() && cell.back() == ' ') cell.pop_back();
            double v = 0;
            auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
            if (cell.empty() || res.ec != std::errc() || res.ptr != cell.data() + cell.size())
                throw FormatError("line " + std::to_string(line_no) + ": non-numeric cell '" + cell + "'");
            cells.push_back(v);
            pos = end + 1;
        }
        if (cells.size() < 2) throw FormatError("line " + std::to_string(line_no) + ": need a label and features");
        if (dim == 0) dim = cells.size() - 1;
        if (cells.size() - 1 != dim)
            throw FormatError("line " + std::to_string(line_no) + ": ragged row with " +
                              std::to_string(cells.size() - 1) + " features, expected " + std::to_string(dim));
        const double y = cells[0];
        if (y < 0 || y != std::floor(y) || y >= static_cast<double>(num_classes))
            throw FormatError("line " + std::to_string(line_no) + ": label " + format_double(y) + " not in [0, " +
                              std::to_string(num_classes) + ")");
        labels.push_back(static_cast<int>(y));
        values.insert(values.end(), cells.begin() + 1, cells.end());
    }
    if (labels.empty()) throw FormatError("CSV has no rows");
    Dataset d;
    d.num_classes = num_classes;
    d.inputs = Tensor(Shape{labels.size(), dim}, std::move(values));
    d.labels = std::move(labels);
    return d;
}

Dataset load_csv(const std::string& path, std::size_t num_classes) { return parse_csv(read_file(path), num_classes); }

std::string format_csv(const Dataset& d) {
    std::string out;
    const std::size_t row = d.inputs.row_size();
    for (std::size_t i = 0; i < d.size(); ++i) {
        out += std::to_string(d.labels[i]);
        for (std::size_t j = 0; j < row; ++j) {
            out += ',';
            out += format_double(d.inputs[i * row + j]);
        }
        out += '\n';
    }
    return out;
}

void write_csv(const std::string& path, const Dataset& d) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write '" + path + "'");
    out << format_csv(d);
}

std::vector<ClientShard> partition_n_class(const Dataset& d, std::size_t num_clients, std::size_t n,
                                           std::uint64_t seed) {
    if (num_clients == 0) throw ConfigError("partition needs at least one client");
    const auto holders = n_class_holders(d.num_classes, num_clients, n, seed);
    auto by_class = indices_by_class(d);
    std::vector<std::vector<std::size_t>> per_client(num_clients);
    for (std::size_t c = 0; c < d.num_classes; ++c) {
        auto& idx = by_class[c];
        Rng rng(derive_seed(seed, {kSplitTag, c}));
        shuffle_in_place(idx, rng);
        const std::size_t h = holders[c].size();
        const std::size_t base = idx.size() / h, extra = idx.size() % h;
        std::size_t pos = 0;
        for (std::size_t j = 0; j < h; ++j) {
            const std::size_t take = base + (j < extra ? 1 : 0);
            auto& dst = per_client[holders[c][j]];
            dst.insert(dst.end(), idx.begin() + static_cast<std::ptrdiff_t>(pos),
                       idx.begin() + static_cast<std::ptrdiff_t>(pos + take));
            pos += take;
        }
    }
    return finish_shards(d, std::move(per_client));
}

std::vector<ClientShard> partition_dirichlet(const Dataset& d, std::size_t num_clients, double beta,
                                             std::uint64_t seed) {
    if (num_clients == 0) throw ConfigError("partition needs at least one client");
    if (!(beta > 0.0)) throw ConfigError("dirichlet beta must be positive");
    auto by_class = indices_by_class(d);
    std::vector<std::vector<std::size_t>> per_client(num_clients);
    for (std::size_t c = 0; c < d.num_classes; ++c) {
        Rng rng(derive_seed(seed, {kDirichletTag, c}));
        std::vector<double> p(num_clients);
        double total = 0;
        for (auto& v : p) total += (v = gamma_draw(rng, beta));
        if (total > 0) {
            for (auto& v : p) v /= total;
        } else {
            // Every draw underflowed: the Dirichlet limit is a single vertex.
            auto k = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(num_clients));
            p.assign(num_clients, 0.0);
            p[std::min(k, num_clients - 1)] = 1.0;
        }
        auto& idx = by_class[c];
        Rng split(derive_seed(seed, {kSplitTag, c}));
        shuffle_in_place(idx, split);
        const auto counts = largest_remainder(p, idx.size());
        std::size_t pos = 0;
        for (std::size_t k = 0; k < num_clients; ++k) {
            per_client[k].insert(per_client[k].end(), idx.begin() + static_cast<std::ptrdiff_t>(pos),
                                 idx.begin() + static_cast<std::ptrdiff_t>(pos + counts[k]));
            pos += counts[k];
        }
    }
    return finish_shards(d, std::move(per_client));
}

std::vector<ClientShard> partition(const Dataset& d, const PartitionPlan& plan) {
    return plan.scheme == PartitionScheme::n_class ? partition_n_class(d, plan.num_clients, plan.n, plan.seed)
                                                   : partition_dirichlet(d, plan.num_clients, plan.beta, plan.seed);
}

TestPartition partition_test_like_train(const Dataset& test, const PartitionPlan& plan) {
    TestPartition out;
    out.shards = partition(test, plan);
    const auto counts = test.class_counts();
    if (plan.scheme == PartitionScheme::n_class) {
        const auto holders = n_class_holders(test.num_classes, plan.num_clients, plan.n, plan.seed);
        for (std::size_t c = 0; c < test.num_classes; ++c)
            if (counts[c] == 0)
                for (auto k : holders[c])
                    out.warnings.push_back("client " + std::to_string(k) + " holds class " + std::to_string(c) +
                                           " which has no test samples");
    }
    for (const auto& s : out.shards)
        if (s.size() == 0) out.warnings.push_back("client " + std::to_string(s.client_id) + " has an empty test shard");
    return out;
}

Json to_json(const ClientShard& shard) {
    return {{"client_id", shard.client_id}, {"m_k", shard.size()}, {"histogram", shard.label_histogram}};
}

}  // namespace fednorm
