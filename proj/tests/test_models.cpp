#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "fedsim/datagen.hpp"
#include "fedsim/local_sgd.hpp"
#include "fedsim/models.hpp"

using namespace fedsim;

namespace {

Batch make_batch(std::vector<double> features, std::vector<int> labels, std::size_t dim) {
    Batch b;
    b.size = labels.size();
    b.input_dim = dim;
    b.features = std::move(features);
    b.labels = std::move(labels);
    return b;
}

ModelSpec logistic_spec(std::size_t d, std::size_t c) {
    ModelSpec s;
    s.kind = ModelKind::logistic;
    s.input_dim = d;
    s.num_classes = c;
    return s;
}

ModelSpec mlp_spec(std::size_t d, std::size_t h, std::size_t c, Activation a) {
    ModelSpec s;
    s.kind = ModelKind::mlp;
    s.input_dim = d;
    s.hidden_dim = h;
    s.num_classes = c;
    s.activation = a;
    return s;
}

// Independent scalar reimplementation of mean cross-entropy for a logistic
// model; no shared code with the library path.
double oracle_logistic_loss(const std::vector<double>& theta, const Batch& batch, std::size_t C) {
    const std::size_t D = batch.input_dim;
    double total = 0.0;
    for (std::size_t b = 0; b < batch.size; ++b) {
        std::vector<double> z(C);
        for (std::size_t c = 0; c < C; ++c) {
            z[c] = theta[C * D + c];
            for (std::size_t k = 0; k < D; ++k) z[c] += theta[c * D + k] * batch.features[b * D + k];
        }
        double denom = 0.0;
        for (std::size_t c = 0; c < C; ++c) denom += std::exp(z[c]);
        total += -std::log(std::exp(z[static_cast<std::size_t>(batch.labels[b])]) / denom);
    }
    return total / double(batch.size);
}

}  // namespace

TEST_CASE("zero-parameter logistic loss equals ln(C)") {
    for (std::size_t C : {2u, 3u, 7u}) {
        const auto spec = logistic_spec(3, C);
        ParamVector theta(spec.layout());
        const auto batch = make_batch({0.3, -1.0, 2.0, 0.0, 0.5, 1.5}, {0, static_cast<int>(C - 1)}, 3);
        const auto fr = forward(spec, theta, batch);
        CHECK(fr.loss == Catch::Approx(std::log(double(C))).epsilon(1e-12));
    }
}

TEST_CASE("saturated true-class logit drives the loss to zero") {
    const auto spec = logistic_spec(2, 3);
    ParamVector theta(spec.layout());
    theta[3 * 2 + 1] = 50.0;  // bias of class 1
    const auto batch = make_batch({0.0, 0.0}, {1}, 2);
    CHECK(forward(spec, theta, batch).loss < 1e-3);
}

TEST_CASE("logistic loss matches an independent reimplementation") {
    const auto spec = logistic_spec(2, 2);
    SeededRng rng(77, 1);
    auto theta = random_init(spec.layout(), rng);
    const auto batch =
        make_batch({0.5, -0.25, 1.5, 2.0, -1.0, 0.75}, {0, 1, 1}, 2);
    const double oracle =
        oracle_logistic_loss({theta.values().begin(), theta.values().end()}, batch, 2);
    CHECK(forward(spec, theta, batch).loss == Catch::Approx(oracle).epsilon(1e-12));
}

TEST_CASE("loss is permutation invariant over batch rows") {
    const auto spec = logistic_spec(3, 4);
    SeededRng rng(5, 2);
    auto theta = random_init(spec.layout(), rng);
    const auto b1 = make_batch({1, 2, 3, 4, 5, 6, 7, 8, 9}, {0, 1, 2}, 3);
    const auto b2 = make_batch({7, 8, 9, 1, 2, 3, 4, 5, 6}, {2, 0, 1}, 3);
    CHECK(forward(spec, theta, b1).loss == Catch::Approx(forward(spec, theta, b2).loss).epsilon(1e-15));
}

TEST_CASE("label out of range is an error") {
    const auto spec = logistic_spec(2, 2);
    ParamVector theta(spec.layout());
    const auto bad = make_batch({1.0, 2.0}, {2}, 2);
    CHECK_THROWS_AS(forward(spec, theta, bad), std::invalid_argument);
    CHECK_THROWS_AS(grad(spec, theta, bad), std::invalid_argument);
}

TEST_CASE("gradient matches central finite differences") {
    SeededRng data_rng(31, 4);

    auto fd_check = [&](const ModelSpec& spec) {
        SeededRng rng(1234, spec.kind == ModelKind::mlp ? 2 : 1);
        auto theta = random_init(spec.layout(), rng);
        const std::size_t B = 5;
        std::vector<double> feats(B * spec.input_dim);
        std::vector<int> labels(B);
        for (auto& f : feats) f = data_rng.normal();
        for (auto& l : labels)
            l = static_cast<int>(data_rng.uniform_int(spec.num_classes));
        const auto batch = make_batch(feats, labels, spec.input_dim);

        const auto g = grad(spec, theta, batch);
        const double h = 1e-6;
        for (int probe = 0; probe < 20; ++probe) {
            const std::size_t k = data_rng.uniform_int(theta.size());
            ParamVector tp = theta, tm = theta;
            tp[k] += h;
            tm[k] -= h;
            const double fd =
                (forward(spec, tp, batch).loss - forward(spec, tm, batch).loss) / (2.0 * h);
            const double denom = std::max({std::abs(fd), std::abs(g[k]), 1e-8});
            CHECK(std::abs(fd - g[k]) / denom <= 1e-6);
        }
    };

    fd_check(logistic_spec(4, 3));
    fd_check(mlp_spec(4, 6, 3, Activation::tanh));
    fd_check(mlp_spec(3, 5, 2, Activation::relu));
}

TEST_CASE("duplicated batch rows leave the mean gradient unchanged") {
    const auto spec = logistic_spec(2, 3);
    SeededRng rng(8, 3);
    auto theta = random_init(spec.layout(), rng);
    const auto b1 = make_batch({1.0, -0.5, 0.25, 2.0}, {0, 2}, 2);
    const auto b2 = make_batch({1.0, -0.5, 0.25, 2.0, 1.0, -0.5, 0.25, 2.0}, {0, 2, 0, 2}, 2);
    const auto g1 = grad(spec, theta, b1);
    const auto g2 = grad(spec, theta, b2);
    for (std::size_t i = 0; i < g1.size(); ++i)
        CHECK(g1[i] == Catch::Approx(g2[i]).margin(1e-15));
}

TEST_CASE("zero features: weight gradient zero, bias gradient analytic") {
    const std::size_t C = 3, D = 2;
    const auto spec = logistic_spec(D, C);
    ParamVector theta(spec.layout());
    theta[C * D + 0] = 0.4;  // biases
    theta[C * D + 1] = -0.2;
    theta[C * D + 2] = 0.1;
    const auto batch = make_batch({0, 0, 0, 0}, {0, 2}, D);
    const auto g = grad(spec, theta, batch);
    for (std::size_t i = 0; i < C * D; ++i) CHECK(g[i] == 0.0);

    // softmax(b) - mean one-hot
    std::vector<double> p(C);
    double denom = 0.0;
    for (std::size_t c = 0; c < C; ++c) denom += std::exp(theta[C * D + c]);
    for (std::size_t c = 0; c < C; ++c) p[c] = std::exp(theta[C * D + c]) / denom;
    const std::vector<double> mean_onehot{0.5, 0.0, 0.5};
    for (std::size_t c = 0; c < C; ++c)
        CHECK(g[C * D + c] == Catch::Approx(p[c] - mean_onehot[c]).margin(1e-12));
}

TEST_CASE("head slice covers the configured trailing layers") {
    auto spec = mlp_spec(3, 4, 2, Activation::relu);
    const auto one = spec.layout();
    CHECK(one->head_offset() == 3 * 4 + 4);
    CHECK(one->head_length() == 4 * 2 + 2);

    spec.head_layers = 2;
    const auto two = spec.layout();
    CHECK(two->head_offset() == 0);
    CHECK(two->head_length() == two->total());

    // Logistic models are a single affine layer, so the head is everything.
    const auto lg = logistic_spec(5, 3).layout();
    CHECK(lg->head_offset() == 0);
    CHECK(lg->head_length() == lg->total());
}

TEST_CASE("accuracy breaks ties toward the lowest index") {
    std::vector<double> logits{0.5, 0.5, 0.1};
    CHECK(accuracy(logits, {0}, 3) == 1.0);
    CHECK(accuracy(logits, {1}, 3) == 0.0);
}

namespace {

ClientDataset tiny_dataset(std::size_t n, std::size_t dim, std::size_t classes,
                           std::uint64_t seed) {
    ClientDataset ds;
    ds.n = n;
    ds.input_dim = dim;
    ds.num_classes = classes;
    SeededRng rng(seed, 99);
    ds.features.resize(n * dim);
    ds.labels.resize(n);
    for (auto& f : ds.features) f = rng.normal();
    for (auto& l : ds.labels) l = static_cast<int>(rng.uniform_int(classes));
    for (std::size_t i = 0; i < n; ++i) ds.split.train.push_back(i);
    return ds;
}

}  // namespace

TEST_CASE("single full-batch step is exactly -eta * grad") {
    const auto spec = logistic_spec(3, 2);
    const auto ds = tiny_dataset(8, 3, 2, 17);
    SeededRng init_rng(2, 2);
    const auto theta0 = random_init(spec.layout(), init_rng);

    LocalTrainConfig cfg;
    cfg.eta = 0.1;
    cfg.epochs = 1;
    cfg.batch_size = 8;
    SeededRng rng(100, 1);
    const auto upd = local_sgd(spec, theta0, ds, cfg, rng);

    const auto g = grad(spec, theta0, ds.full_batch(SplitKind::train));
    for (std::size_t i = 0; i < theta0.size(); ++i)
        CHECK(upd.theta[i] == theta0[i] - 0.1 * g[i]);
}

TEST_CASE("local_sgd is deterministic in the rng stream") {
    const auto spec = logistic_spec(3, 2);
    const auto ds = tiny_dataset(20, 3, 2, 18);
    SeededRng init_rng(2, 2);
    const auto theta0 = random_init(spec.layout(), init_rng);
    LocalTrainConfig cfg;
    cfg.eta = 0.05;
    cfg.epochs = 3;
    cfg.batch_size = 6;

    SeededRng r1(42, 1), r2(42, 1), r3(42, 2);
    const auto u1 = local_sgd(spec, theta0, ds, cfg, r1);
    const auto u2 = local_sgd(spec, theta0, ds, cfg, r2);
    const auto u3 = local_sgd(spec, theta0, ds, cfg, r3);
    bool identical = true, differs = false;
    for (std::size_t i = 0; i < theta0.size(); ++i) {
        const double a = u1.delta[i], b = u2.delta[i];
        identical &= std::memcmp(&a, &b, sizeof(double)) == 0;
        differs |= (u1.delta[i] != u3.delta[i]);
    }
    CHECK(identical);
    CHECK(differs);  // a different stream shuffles differently
}

TEST_CASE("local_sgd rejects bad inputs") {
    const auto spec = logistic_spec(3, 2);
    ClientDataset empty;
    empty.n = 0;
    empty.input_dim = 3;
    empty.num_classes = 2;
    SeededRng rng(1, 1);
    ParamVector theta(spec.layout());
    LocalTrainConfig cfg;
    CHECK_THROWS_AS(local_sgd(spec, theta, empty, cfg, rng), std::invalid_argument);

    LocalTrainConfig bad = cfg;
    bad.eta = 0.0;
    const auto ds = tiny_dataset(4, 3, 2, 19);
    CHECK_THROWS_AS(local_sgd(spec, theta, ds, bad, rng), std::invalid_argument);
}

TEST_CASE("epochs=1 with batch_size=n equals one full-batch step") {
    const auto spec = mlp_spec(3, 4, 2, Activation::relu);
    const auto ds = tiny_dataset(10, 3, 2, 21);
    SeededRng init_rng(6, 1);
    const auto theta0 = random_init(spec.layout(), init_rng);
    LocalTrainConfig cfg;
    cfg.eta = 0.2;
    cfg.epochs = 1;
    cfg.batch_size = 10;
    SeededRng rng(9, 9);
    const auto upd = local_sgd(spec, theta0, ds, cfg, rng);
    const auto g = grad(spec, theta0, ds.full_batch(SplitKind::train));
    for (std::size_t i = 0; i < theta0.size(); ++i)
        CHECK(upd.delta[i] == Catch::Approx(-0.2 * g[i]).margin(1e-15));
}
