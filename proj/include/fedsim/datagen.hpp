#pragma once

// Synthetic non-IID federations (cluster tasks and Dirichlet label skew),
// CSV import/export and the train/val/test split bookkeeping.

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedsim/models.hpp"
#include "fedsim/param_core.hpp"

namespace fedsim {

enum class SplitKind { train, val, test };

inline const char* split_name(SplitKind s) {
    switch (s) {
        case SplitKind::train: return "train";
        case SplitKind::val: return "val";
        default: return "test";
    }
}

struct Splits {
    std::vector<std::size_t> train, val, test;

    const std::vector<std::size_t>& of(SplitKind s) const {
        switch (s) {
            case SplitKind::train: return train;
            case SplitKind::val: return val;
            default: return test;
        }
    }

    // Disjointness and full coverage of [0, n).
    void validate(std::size_t n) const {
        std::vector<char> seen(n, 0);
        std::size_t count = 0;
        for (const auto* part : {&train, &val, &test}) {
            for (std::size_t idx : *part) {
                if (idx >= n || seen[idx]) throw std::runtime_error("splits are not a partition");
                seen[idx] = 1;
                ++count;
            }
        }
        if (count != n) throw std::runtime_error("splits do not cover the dataset");
    }
};

struct ClientDataset {
    std::vector<double> features;  // n x input_dim, row-major
    std::vector<int> labels;       // n
    std::size_t n = 0;
    std::size_t input_dim = 0;
    std::size_t num_classes = 0;
    std::optional<int> cluster_id;  // ground truth, synthetic only
    Splits split;

    std::size_t train_size() const { return split.train.size(); }

    Batch batch_from(const std::vector<std::size_t>& indices) const {
        Batch b;
        b.size = indices.size();
        b.input_dim = input_dim;
        b.features.resize(b.size * input_dim);
        b.labels.resize(b.size);
        for (std::size_t r = 0; r < indices.size(); ++r) {
            const std::size_t i = indices[r];
            std::copy(features.begin() + i * input_dim, features.begin() + (i + 1) * input_dim,
                      b.features.begin() + r * input_dim);
            b.labels[r] = labels[i];
        }
        return b;
    }

    Batch full_batch(SplitKind s) const { return batch_from(split.of(s)); }
};

inline Splits make_splits(std::size_t n, SeededRng& rng, double train_frac = 0.70,
                          double val_frac = 0.15) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    std::size_t n_train = static_cast<std::size_t>(std::floor(train_frac * double(n)));
    std::size_t n_val = static_cast<std::size_t>(std::floor(val_frac * double(n)));
    if (n >= 1 && n_train == 0) n_train = 1;
    if (n_train + n_val > n) n_val = n - n_train;
    Splits s;
    s.train.assign(order.begin(), order.begin() + n_train);
    s.val.assign(order.begin() + n_train, order.begin() + n_train + n_val);
    s.test.assign(order.begin() + n_train + n_val, order.end());
    s.validate(n);
    return s;
}

// ---------------------------------------------------------------------------
// Federation specs
// ---------------------------------------------------------------------------

enum class PartitionKind { cluster, dirichlet, iid };

struct FederationSpec {
    std::size_t m = 0;
    PartitionKind partition = PartitionKind::cluster;
    double alpha = 0.1;        // dirichlet concentration
    std::size_t K = 1;         // cluster count
    std::vector<std::size_t> sizes;  // per-client n_i; empty => uniform size
    std::size_t default_size = 200;
    std::uint64_t seed = 0;

    std::size_t size_of(std::size_t i) const {
        return sizes.empty() ? default_size : sizes.at(i);
    }

    void validate() const {
        if (m == 0) throw std::invalid_argument("FederationSpec: m must be positive");
        if (!sizes.empty() && sizes.size() != m)
            throw std::invalid_argument("FederationSpec: sizes length must equal m");
        if (partition == PartitionKind::dirichlet && alpha <= 0.0)
            throw std::invalid_argument("FederationSpec: dirichlet requires alpha > 0");
        if (partition == PartitionKind::cluster && (K < 1 || K > m))
            throw std::invalid_argument("FederationSpec: cluster requires 1 <= K <= m");
    }
};

// Ground-truth task structure for the cluster construction. Every cluster
// shares the same Gaussian class means; conflicting label permutations make
// a single global model unable to fit all clusters at once.
struct ClusterTruthSpec {
    std::size_t input_dim = 16;
    std::size_t num_classes = 4;
    double mean_scale = 3.0;
    double noise_sigma = 1.0;
    bool label_permute = true;
    bool distinct_means = false;
};

namespace detail {

inline std::vector<std::vector<double>> draw_class_means(std::size_t C, std::size_t D,
                                                         double scale, SeededRng& rng) {
    std::vector<std::vector<double>> means(C, std::vector<double>(D));
    for (auto& mu : means)
        for (auto& v : mu) v = scale * rng.normal();
    return means;
}

}  // namespace detail

inline std::vector<ClientDataset> gen_cluster_noniid(const FederationSpec& fed,
                                                     const ClusterTruthSpec& truth) {
    fed.validate();
    if (fed.K < 1) throw std::invalid_argument("gen_cluster_noniid: K must be >= 1");
    const std::size_t K = fed.K, C = truth.num_classes, D = truth.input_dim;

    SeededRng task_rng(fed.seed, mix_stream(stream_tag::datagen, 1));
    auto shared_means = detail::draw_class_means(C, D, truth.mean_scale, task_rng);
    std::vector<std::vector<std::vector<double>>> cluster_means;
    for (std::size_t k = 0; k < K; ++k) {
        if (truth.distinct_means)
            cluster_means.push_back(detail::draw_class_means(C, D, truth.mean_scale, task_rng));
        else
            cluster_means.push_back(shared_means);
    }

    std::vector<ClientDataset> clients(fed.m);
    for (std::size_t i = 0; i < fed.m; ++i) {
        // Contiguous, as-even-as-possible cluster blocks.
        const std::size_t k = i * K / fed.m;
        const std::size_t n = fed.size_of(i);
        if (n == 0) throw std::invalid_argument("gen_cluster_noniid: client size must be >= 1");

        SeededRng rng(fed.seed, mix_stream(stream_tag::datagen, 2, i));
        ClientDataset ds;
        ds.n = n;
        ds.input_dim = D;
        ds.num_classes = C;
        ds.cluster_id = static_cast<int>(k);
        ds.features.resize(n * D);
        ds.labels.resize(n);
        for (std::size_t r = 0; r < n; ++r) {
            const auto latent = static_cast<std::size_t>(rng.uniform_int(C));
            const auto& mu = cluster_means[k][latent];
            for (std::size_t d0 = 0; d0 < D; ++d0)
                ds.features[r * D + d0] = mu[d0] + truth.noise_sigma * rng.normal();
            // Cyclic label shift per cluster; identity when permutation is off.
            const std::size_t shift = truth.label_permute ? k : 0;
            ds.labels[r] = static_cast<int>((latent + shift) % C);
        }
        ds.split = make_splits(n, rng);
        clients[i] = std::move(ds);
    }
    return clients;
}

inline std::vector<ClientDataset> gen_iid(const FederationSpec& fed,
                                          const ClusterTruthSpec& truth) {
    FederationSpec one = fed;
    one.partition = PartitionKind::cluster;
    one.K = 1;
    ClusterTruthSpec t = truth;
    t.label_permute = false;
    auto clients = gen_cluster_noniid(one, t);
    for (auto& c : clients) c.cluster_id.reset();
    return clients;
}

// ---------------------------------------------------------------------------
// Dirichlet label-skew partition over a labeled pool
// ---------------------------------------------------------------------------

struct LabeledPool {
    std::vector<double> features;  // N x input_dim
    std::vector<int> labels;
    std::size_t n = 0;
    std::size_t input_dim = 0;
    std::size_t num_classes = 0;
};

inline LabeledPool make_gaussian_pool(std::size_t n, std::size_t input_dim,
                                      std::size_t num_classes, double mean_scale,
                                      double noise_sigma, SeededRng& rng) {
    LabeledPool pool;
    pool.n = n;
    pool.input_dim = input_dim;
    pool.num_classes = num_classes;
    pool.features.resize(n * input_dim);
    pool.labels.resize(n);
    auto means = detail::draw_class_means(num_classes, input_dim, mean_scale, rng);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = i % num_classes;  // balanced pool
        pool.labels[i] = static_cast<int>(c);
        for (std::size_t d0 = 0; d0 < input_dim; ++d0)
            pool.features[i * input_dim + d0] = means[c][d0] + noise_sigma * rng.normal();
    }
    return pool;
}

namespace detail {

// Marsaglia-Tsang gamma sampling; deterministic because it only draws through
// SeededRng primitives.
inline double gamma_sample(double alpha, SeededRng& rng) {
    if (alpha < 1.0) {
        const double u = rng.uniform();
        return gamma_sample(alpha + 1.0, rng) * std::pow(u > 0.0 ? u : 1e-300, 1.0 / alpha);
    }
    const double d = alpha - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x, v;
        do {
            x = rng.normal();
            v = 1.0 + c * x;
        } while (v <= 0.0);
        v = v * v * v;
        const double u = rng.uniform();
        if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
        if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
}

inline std::vector<double> dirichlet_sample(double alpha, std::size_t dim, SeededRng& rng) {
    std::vector<double> p(dim);
    double sum = 0.0;
    for (auto& v : p) {
        v = gamma_sample(alpha, rng);
        sum += v;
    }
    if (sum <= 0.0) {
        // All-zero draw is possible only for pathologically tiny alpha.
        std::fill(p.begin(), p.end(), 1.0 / double(dim));
        return p;
    }
    for (auto& v : p) v /= sum;
    return p;
}

}  // namespace detail

// Per-client label proportions drawn from Dir(alpha); samples are taken from
// the pool without replacement. When a label runs out its mass is
// redistributed over the remaining labels; a client that can draw nothing at
// all is an error.
inline std::vector<ClientDataset> gen_dirichlet_noniid(const FederationSpec& fed,
                                                       const LabeledPool& pool) {
    fed.validate();
    if (fed.alpha <= 0.0) throw std::invalid_argument("gen_dirichlet_noniid: alpha must be > 0");
    const std::size_t C = pool.num_classes, D = pool.input_dim;

    // Per-label queues, shuffled once.
    std::vector<std::vector<std::size_t>> by_label(C);
    for (std::size_t i = 0; i < pool.n; ++i) {
        const int y = pool.labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= C)
            throw std::invalid_argument("gen_dirichlet_noniid: pool label out of range");
        by_label[static_cast<std::size_t>(y)].push_back(i);
    }
    SeededRng pool_rng(fed.seed, mix_stream(stream_tag::datagen, 3));
    for (auto& q : by_label) pool_rng.shuffle(q);
    std::vector<std::size_t> next(C, 0);

    std::vector<ClientDataset> clients(fed.m);
    for (std::size_t i = 0; i < fed.m; ++i) {
        SeededRng rng(fed.seed, mix_stream(stream_tag::datagen, 4, i));
        auto p = detail::dirichlet_sample(fed.alpha, C, rng);

        const std::size_t want = fed.size_of(i);
        std::vector<std::size_t> chosen;
        chosen.reserve(want);
        for (std::size_t r = 0; r < want; ++r) {
            double mass = 0.0;
            for (std::size_t c = 0; c < C; ++c)
                if (next[c] < by_label[c].size()) mass += p[c];
            if (mass <= 0.0) break;  // pool exhausted
            double u = rng.uniform() * mass;
            std::size_t pick = C;
            for (std::size_t c = 0; c < C; ++c) {
                if (next[c] >= by_label[c].size()) continue;
                u -= p[c];
                if (u <= 0.0) {
                    pick = c;
                    break;
                }
                pick = c;  // guard against fp underrun: fall back to last live label
            }
            chosen.push_back(by_label[pick][next[pick]++]);
        }
        if (chosen.empty())
            throw std::runtime_error("gen_dirichlet_noniid: pool exhausted, client " +
                                     std::to_string(i) + " would receive zero samples");

        ClientDataset ds;
        ds.n = chosen.size();
        ds.input_dim = D;
        ds.num_classes = C;
        ds.features.resize(ds.n * D);
        ds.labels.resize(ds.n);
        for (std::size_t r = 0; r < chosen.size(); ++r) {
            const std::size_t src = chosen[r];
            std::copy(pool.features.begin() + src * D, pool.features.begin() + (src + 1) * D,
                      ds.features.begin() + r * D);
            ds.labels[r] = pool.labels[src];
        }
        ds.split = make_splits(ds.n, rng);
        clients[i] = std::move(ds);
    }
    return clients;
}

// ---------------------------------------------------------------------------
// CSV federations
// ---------------------------------------------------------------------------

struct ColumnSchema {
    std::size_t num_classes = 0;  // 0 => inferred as max label + 1
    std::uint64_t seed = 0;       // drives split assignment
    double train_frac = 0.70;
    double val_frac = 0.15;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            cells.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    cells.push_back(cur);
    return cells;
}

inline double parse_cell(const std::string& cell, const std::string& file, std::size_t row) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(cell, &pos);
        if (pos != cell.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw std::runtime_error(file + " row " + std::to_string(row) + ": non-numeric cell '" +
                                 cell + "'");
    }
}

}  // namespace detail

// One client per file. Header row must be f0,...,fk,label. Features are
// standardized with the global mean/std computed from train splits only.
inline std::vector<ClientDataset> load_csv_federation(const std::vector<std::string>& paths,
                                                      const ColumnSchema& schema) {
    if (paths.empty()) throw std::invalid_argument("load_csv_federation: no input files");
    std::vector<ClientDataset> clients;
    std::size_t D = 0;
    int max_label = -1;

    for (const auto& path : paths) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open " + path);
        std::string line;
        if (!std::getline(in, line)) throw std::runtime_error(path + ": empty file");
        const auto header = detail::split_csv_line(line);
        if (header.size() < 2 || header.back() != "label")
            throw std::runtime_error(path + ": header must be f0,...,fk,label");
        const std::size_t width = header.size();
        if (D == 0)
            D = width - 1;
        else if (width - 1 != D)
            throw std::runtime_error(path + ": feature count differs from first file");

        ClientDataset ds;
        ds.input_dim = D;
        std::size_t row = 1;
        while (std::getline(in, line)) {
            ++row;
            if (line.empty()) continue;
            const auto cells = detail::split_csv_line(line);
            if (cells.size() != width)
                throw std::runtime_error(path + " row " + std::to_string(row) + ": expected " +
                                         std::to_string(width) + " cells, got " +
                                         std::to_string(cells.size()));
            for (std::size_t k = 0; k < D; ++k)
                ds.features.push_back(detail::parse_cell(cells[k], path, row));
            const double y = detail::parse_cell(cells[D], path, row);
            if (y != std::floor(y) || y < 0.0)
                throw std::runtime_error(path + " row " + std::to_string(row) +
                                         ": unknown label '" + cells[D] + "'");
            ds.labels.push_back(static_cast<int>(y));
            max_label = std::max(max_label, static_cast<int>(y));
        }
        ds.n = ds.labels.size();
        if (ds.n == 0) throw std::runtime_error(path + ": no data rows");
        clients.push_back(std::move(ds));
    }

    const std::size_t C =
        schema.num_classes > 0 ? schema.num_classes : static_cast<std::size_t>(max_label + 1);
    for (std::size_t i = 0; i < clients.size(); ++i) {
        auto& ds = clients[i];
        ds.num_classes = C;
        for (int y : ds.labels)
            if (static_cast<std::size_t>(y) >= C)
                throw std::runtime_error("label " + std::to_string(y) + " out of range for " +
                                         std::to_string(C) + " classes");
        SeededRng rng(schema.seed, mix_stream(stream_tag::datagen, 5, i));
        ds.split = make_splits(ds.n, rng, schema.train_frac, schema.val_frac);
    }

    // Standardize with train-only statistics.
    std::vector<double> mean(D, 0.0), var(D, 0.0);
    std::size_t n_train = 0;
    for (const auto& ds : clients)
        for (std::size_t idx : ds.split.train) {
            for (std::size_t k = 0; k < D; ++k) mean[k] += ds.features[idx * D + k];
            ++n_train;
        }
    if (n_train == 0) throw std::runtime_error("load_csv_federation: no training rows");
    for (auto& v : mean) v /= double(n_train);
    for (const auto& ds : clients)
        for (std::size_t idx : ds.split.train)
            for (std::size_t k = 0; k < D; ++k) {
                const double c = ds.features[idx * D + k] - mean[k];
                var[k] += c * c;
            }
    std::vector<double> stddev(D);
    for (std::size_t k = 0; k < D; ++k) {
        stddev[k] = std::sqrt(var[k] / double(n_train));
        if (stddev[k] < 1e-12) stddev[k] = 1.0;  // constant feature
    }
    for (auto& ds : clients)
        for (std::size_t r = 0; r < ds.n; ++r)
            for (std::size_t k = 0; k < D; ++k)
                ds.features[r * D + k] = (ds.features[r * D + k] - mean[k]) / stddev[k];

    return clients;
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline void export_federation(const std::string& dir, const std::vector<ClientDataset>& clients,
                              const FederationSpec& fed) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    bool any_cluster = false;
    nlohmann::json sizes = nlohmann::json::array();
    nlohmann::json cluster_ids = nlohmann::json::array();
    for (std::size_t i = 0; i < clients.size(); ++i) {
        const auto& ds = clients[i];
        char name[32];
        std::snprintf(name, sizeof(name), "client_%03zu.csv", i);
        std::ofstream out(fs::path(dir) / name);
        for (std::size_t k = 0; k < ds.input_dim; ++k) out << "f" << k << ",";
        out << "label\n";
        for (std::size_t r = 0; r < ds.n; ++r) {
            for (std::size_t k = 0; k < ds.input_dim; ++k)
                out << format_double(ds.features[r * ds.input_dim + k]) << ",";
            out << ds.labels[r] << "\n";
        }
        sizes.push_back(ds.n);
        if (ds.cluster_id) {
            any_cluster = true;
            cluster_ids.push_back(*ds.cluster_id);
        } else {
            cluster_ids.push_back(nullptr);
        }
    }
    nlohmann::json manifest = {
        {"schema", 1},
        {"m", clients.size()},
        {"seed", fed.seed},
        {"partition", fed.partition == PartitionKind::cluster     ? "cluster"
                      : fed.partition == PartitionKind::dirichlet ? "dirichlet"
                                                                  : "iid"},
        {"input_dim", clients.empty() ? 0 : clients[0].input_dim},
        {"num_classes", clients.empty() ? 0 : clients[0].num_classes},
        {"sizes", sizes},
    };
    if (any_cluster) manifest["cluster_ids"] = cluster_ids;
    if (fed.partition == PartitionKind::cluster) manifest["K"] = fed.K;
    if (fed.partition == PartitionKind::dirichlet) manifest["alpha"] = fed.alpha;
    std::ofstream mf(fs::path(dir) / "federation.json");
    mf << manifest.dump(2) << "\n";
}

}  // namespace fedsim
