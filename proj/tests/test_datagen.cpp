#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "fedsim/baselines.hpp"
#include "fedsim/datagen.hpp"
#include "fedsim/local_sgd.hpp"

using namespace fedsim;

namespace {

FederationSpec cluster_fed(std::size_t m, std::size_t K, std::size_t n, std::uint64_t seed) {
    FederationSpec f;
    f.m = m;
    f.partition = PartitionKind::cluster;
    f.K = K;
    f.default_size = n;
    f.seed = seed;
    return f;
}

// Centralized SGD on one cluster's pooled training data.
ParamVector fit_pooled(const ModelSpec& spec, const std::vector<ClientDataset>& clients,
                       int cluster, std::uint64_t seed) {
    ClientDataset pooled;
    pooled.input_dim = clients[0].input_dim;
    pooled.num_classes = clients[0].num_classes;
    for (const auto& c : clients) {
        if (c.cluster_id != cluster) continue;
        for (std::size_t idx : c.split.train) {
            for (std::size_t k = 0; k < c.input_dim; ++k)
                pooled.features.push_back(c.features[idx * c.input_dim + k]);
            pooled.labels.push_back(c.labels[idx]);
        }
    }
    pooled.n = pooled.labels.size();
    for (std::size_t i = 0; i < pooled.n; ++i) pooled.split.train.push_back(i);

    SeededRng init(seed, 1);
    ParamVector theta = random_init(spec.layout(), init);
    LocalTrainConfig cfg;
    cfg.eta = 0.1;
    cfg.epochs = 60;
    cfg.batch_size = 32;
    SeededRng rng(seed, 2);
    return local_sgd(spec, theta, pooled, cfg, rng).theta;
}

double cluster_test_accuracy(const ModelSpec& spec, const ParamVector& theta,
                             const std::vector<ClientDataset>& clients, int cluster) {
    double correct = 0.0, total = 0.0;
    for (const auto& c : clients) {
        if (c.cluster_id != cluster) continue;
        const auto sm = evaluate_split(spec, theta, c, SplitKind::test);
        correct += sm.acc * double(sm.n);
        total += double(sm.n);
    }
    return total > 0 ? correct / total : 0.0;
}

}  // namespace

TEST_CASE("splits are a disjoint cover with default fractions") {
    SeededRng rng(3, 3);
    const auto s = make_splits(100, rng);
    s.validate(100);
    CHECK(s.train.size() == 70);
    CHECK(s.val.size() == 15);
    CHECK(s.test.size() == 15);

    const auto tiny = make_splits(1, rng);
    tiny.validate(1);
    CHECK(tiny.train.size() == 1);
}

TEST_CASE("cluster assignment bookkeeping") {
    ClusterTruthSpec truth;
    truth.input_dim = 4;
    truth.num_classes = 3;
    const auto clients = gen_cluster_noniid(cluster_fed(12, 3, 30, 5), truth);
    REQUIRE(clients.size() == 12);
    std::map<int, int> hist;
    for (const auto& c : clients) {
        REQUIRE(c.cluster_id.has_value());
        hist[*c.cluster_id]++;
        CHECK(c.n == 30);
        c.split.validate(c.n);
    }
    CHECK(hist[0] == 4);
    CHECK(hist[1] == 4);
    CHECK(hist[2] == 4);
}

TEST_CASE("K=1 gives one shared task") {
    ClusterTruthSpec truth;
    truth.input_dim = 3;
    truth.num_classes = 2;
    const auto clients = gen_cluster_noniid(cluster_fed(4, 1, 40, 6), truth);
    for (const auto& c : clients) CHECK(*c.cluster_id == 0);
}

TEST_CASE("generation is deterministic in the seed") {
    ClusterTruthSpec truth;
    truth.input_dim = 4;
    truth.num_classes = 3;
    const auto a = gen_cluster_noniid(cluster_fed(6, 2, 25, 9), truth);
    const auto b = gen_cluster_noniid(cluster_fed(6, 2, 25, 9), truth);
    const auto c = gen_cluster_noniid(cluster_fed(6, 2, 25, 10), truth);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].features == b[i].features);
        CHECK(a[i].labels == b[i].labels);
    }
    bool differs = false;
    for (std::size_t i = 0; i < a.size(); ++i) differs |= (a[i].features != c[i].features);
    CHECK(differs);
}

TEST_CASE("label permutation makes clusters conflict") {
    // Two clusters, swapped binary labels: a model fit on cluster 0 should
    // score roughly (1 - its own accuracy) on cluster 1.
    ClusterTruthSpec truth;
    truth.input_dim = 6;
    truth.num_classes = 2;
    truth.mean_scale = 3.0;
    truth.noise_sigma = 1.0;
    truth.label_permute = true;
    const auto clients = gen_cluster_noniid(cluster_fed(6, 2, 120, 77), truth);

    ModelSpec spec;
    spec.kind = ModelKind::logistic;
    spec.input_dim = 6;
    spec.num_classes = 2;
    const auto model0 = fit_pooled(spec, clients, 0, 123);

    const double own = cluster_test_accuracy(spec, model0, clients, 0);
    const double cross = cluster_test_accuracy(spec, model0, clients, 1);
    CHECK(own >= 0.9);
    CHECK(std::abs(cross - (1.0 - own)) <= 0.1);
}

TEST_CASE("dirichlet concentration limit approaches the global histogram") {
    SeededRng pool_rng(4, 4);
    const auto pool = make_gaussian_pool(6000, 4, 3, 2.0, 1.0, pool_rng);
    FederationSpec f;
    f.m = 5;
    f.partition = PartitionKind::dirichlet;
    f.alpha = 1e6;
    f.default_size = 600;
    f.seed = 11;
    const auto clients = gen_dirichlet_noniid(f, pool);
    for (const auto& c : clients) {
        std::vector<double> frac(3, 0.0);
        for (int y : c.labels) frac[static_cast<std::size_t>(y)] += 1.0 / double(c.n);
        for (double fr : frac) CHECK(std::abs(fr - 1.0 / 3.0) <= 0.05);
    }
}

TEST_CASE("small alpha concentrates labels per client") {
    SeededRng pool_rng(4, 5);
    const auto pool = make_gaussian_pool(40000, 4, 6, 2.0, 1.0, pool_rng);

    auto avg_distinct = [&](double alpha) {
        double total = 0.0;
        int runs = 0;
        for (std::uint64_t seed = 1; seed <= 20; ++seed) {
            FederationSpec f;
            f.m = 50;
            f.partition = PartitionKind::dirichlet;
            f.alpha = alpha;
            f.default_size = 30;
            f.seed = seed;
            const auto clients = gen_dirichlet_noniid(f, pool);
            for (const auto& c : clients) {
                std::set<int> s(c.labels.begin(), c.labels.end());
                total += double(s.size());
                ++runs;
            }
        }
        return total / double(runs);
    };

    CHECK(avg_distinct(0.1) < avg_distinct(10.0));
}

TEST_CASE("dirichlet partitions are deterministic") {
    SeededRng pool_rng(4, 6);
    const auto pool = make_gaussian_pool(3000, 3, 3, 2.0, 1.0, pool_rng);
    FederationSpec f;
    f.m = 8;
    f.partition = PartitionKind::dirichlet;
    f.alpha = 0.3;
    f.default_size = 100;
    f.seed = 21;
    const auto a = gen_dirichlet_noniid(f, pool);
    const auto b = gen_dirichlet_noniid(f, pool);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].features == b[i].features);
        CHECK(a[i].labels == b[i].labels);
    }
}

TEST_CASE("dirichlet exhaustion renormalizes and errors only when empty") {
    SeededRng pool_rng(4, 7);
    const auto pool = make_gaussian_pool(100, 3, 2, 2.0, 1.0, pool_rng);

    FederationSpec f;
    f.m = 2;
    f.partition = PartitionKind::dirichlet;
    f.alpha = 0.5;
    f.sizes = {90, 20};  // second client drains the remainder
    f.seed = 31;
    const auto clients = gen_dirichlet_noniid(f, pool);
    CHECK(clients[0].n == 90);
    CHECK(clients[1].n == 10);  // short but non-empty

    FederationSpec g = f;
    g.sizes = {100, 5};  // nothing left for the second client
    CHECK_THROWS_AS(gen_dirichlet_noniid(g, pool), std::runtime_error);
}

TEST_CASE("csv federation round trip with standardization") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "fedsim_csv_test";
    fs::create_directories(dir);

    {
        std::ofstream f(dir / "a.csv");
        f << "f0,f1,label\n";
        f << "1.0,10.0,0\n2.0,20.0,1\n3.0,30.0,0\n4.0,40.0,1\n5.0,50.0,0\n";
        f << "6.0,60.0,1\n7.0,70.0,0\n8.0,80.0,1\n9.0,90.0,0\n10.0,100.0,1\n";
    }
    {
        std::ofstream f(dir / "b.csv");
        f << "f0,f1,label\n";
        f << "-1.0,5.0,1\n-2.0,15.0,0\n-3.0,25.0,1\n-4.0,35.0,0\n-5.0,45.0,1\n";
        f << "-6.0,55.0,0\n-7.0,65.0,1\n-8.0,75.0,0\n-9.0,85.0,1\n-10.0,95.0,0\n";
    }

    ColumnSchema schema;
    schema.seed = 7;
    const auto clients =
        load_csv_federation({(dir / "a.csv").string(), (dir / "b.csv").string()}, schema);
    REQUIRE(clients.size() == 2);
    CHECK(clients[0].n == 10);
    CHECK(clients[0].input_dim == 2);

    // Train-split feature means are ~0 by construction of the standardizer.
    for (std::size_t k = 0; k < 2; ++k) {
        double mean = 0.0;
        std::size_t n = 0;
        for (const auto& c : clients)
            for (std::size_t idx : c.split.train) {
                mean += c.features[idx * 2 + k];
                ++n;
            }
        mean /= double(n);
        CHECK(std::abs(mean) < 1e-9);
    }

    // Val/test were standardized with train statistics, not their own: their
    // own means should generally NOT be zero.
    double val_mean = 0.0;
    std::size_t vn = 0;
    for (const auto& c : clients)
        for (std::size_t idx : c.split.val) {
            val_mean += c.features[idx * 2 + 0];
            ++vn;
        }
    REQUIRE(vn > 0);
    CHECK(std::abs(val_mean / double(vn)) > 1e-6);
}

TEST_CASE("csv parser reports row-level errors") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "fedsim_csv_err";
    fs::create_directories(dir);

    {
        std::ofstream f(dir / "ragged.csv");
        f << "f0,f1,label\n1.0,2.0,0\n1.0,0\n";
    }
    CHECK_THROWS_WITH(load_csv_federation({(dir / "ragged.csv").string()}, {}),
                      Catch::Matchers::ContainsSubstring("row 3"));

    {
        std::ofstream f(dir / "nonnum.csv");
        f << "f0,label\n1.0,0\nxyz,1\n";
    }
    CHECK_THROWS_WITH(load_csv_federation({(dir / "nonnum.csv").string()}, {}),
                      Catch::Matchers::ContainsSubstring("non-numeric"));

    {
        std::ofstream f(dir / "badlabel.csv");
        f << "f0,label\n1.0,0\n2.0,1.5\n";
    }
    CHECK_THROWS_WITH(load_csv_federation({(dir / "badlabel.csv").string()}, {}),
                      Catch::Matchers::ContainsSubstring("row 3"));

    {
        std::ofstream f(dir / "header.csv");
        f << "a,b\n1.0,0\n";
    }
    CHECK_THROWS_AS(load_csv_federation({(dir / "header.csv").string()}, {}), std::runtime_error);
}

TEST_CASE("export then reload preserves shape and labels") {
    namespace fs = std::filesystem;
    ClusterTruthSpec truth;
    truth.input_dim = 3;
    truth.num_classes = 2;
    const auto fed = cluster_fed(3, 2, 20, 13);
    const auto clients = gen_cluster_noniid(fed, truth);

    const auto dir = (fs::temp_directory_path() / "fedsim_export_test").string();
    export_federation(dir, clients, fed);

    std::ifstream mf(fs::path(dir) / "federation.json");
    nlohmann::json manifest;
    mf >> manifest;
    CHECK(manifest.at("m") == 3);
    CHECK(manifest.at("cluster_ids").size() == 3);

    std::vector<std::string> paths;
    for (std::size_t i = 0; i < 3; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "client_%03zu.csv", i);
        paths.push_back((fs::path(dir) / name).string());
    }
    ColumnSchema schema;
    schema.seed = fed.seed;
    const auto back = load_csv_federation(paths, schema);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(back[i].n == clients[i].n);
        CHECK(back[i].labels == clients[i].labels);
    }
}
