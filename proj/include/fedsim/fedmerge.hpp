#pragma once

// The FedMerge engine: a soup of d global models, per-client merging weights,
// server-side merging, and the backward updates for both.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedsim/local_sgd.hpp"
#include "fedsim/parallel.hpp"
#include "fedsim/report.hpp"

namespace fedsim {

// ---------------------------------------------------------------------------
// Model soup
// ---------------------------------------------------------------------------

class ModelSoup {
public:
    ModelSoup(LayoutPtr layout, std::size_t d, SeededRng& rng,
              InitScheme scheme = InitScheme::glorot_uniform) {
        if (d < 1) throw std::invalid_argument("ModelSoup: d must be >= 1");
        models_.reserve(d);
        for (std::size_t j = 0; j < d; ++j) models_.push_back(random_init(layout, rng, scheme));
    }

    explicit ModelSoup(std::vector<ParamVector> models) : models_(std::move(models)) {
        if (models_.empty()) throw std::invalid_argument("ModelSoup: need at least one model");
        for (const auto& m : models_)
            if (!m.same_layout(models_[0]))
                throw std::invalid_argument("ModelSoup: models must share a layout");
    }

    std::size_t size() const { return models_.size(); }
    const ParamVector& model(std::size_t j) const { return models_.at(j); }
    ParamVector& model(std::size_t j) { return models_.at(j); }
    const LayoutPtr& layout() const { return models_[0].layout(); }

    double max_norm() const {
        double mx = 0.0;
        for (const auto& m : models_) mx = std::max(mx, m.norm());
        return mx;
    }

private:
    std::vector<ParamVector> models_;
};

// ---------------------------------------------------------------------------
// Merging weights
// ---------------------------------------------------------------------------

enum class WeightMode { softmax, unconstrained };

class MergeWeights {
public:
    MergeWeights(std::size_t m, std::size_t d, WeightMode mode)
        : m_(m), d_(d), mode_(mode), logits_(m * d, 0.0) {
        if (m < 1 || d < 1) throw std::invalid_argument("MergeWeights: m and d must be >= 1");
        // All-zero logits give uniform softmax rows; for the unconstrained
        // variant uniform means 1/d directly.
        if (mode == WeightMode::unconstrained)
            std::fill(logits_.begin(), logits_.end(), 1.0 / double(d));
    }

    std::size_t num_clients() const { return m_; }
    std::size_t num_models() const { return d_; }
    WeightMode mode() const { return mode_; }

    double logit(std::size_t i, std::size_t j) const { return logits_[i * d_ + j]; }
    double& logit(std::size_t i, std::size_t j) { return logits_[i * d_ + j]; }
    const std::vector<double>& logits() const { return logits_; }

    void set_row(std::size_t i, const std::vector<double>& row) {
        if (row.size() != d_) throw std::invalid_argument("MergeWeights: bad row width");
        std::copy(row.begin(), row.end(), logits_.begin() + i * d_);
    }

    // Effective merging weights for client i: row softmax of the logits, or
    // the raw values in unconstrained mode. The softmax denominator is summed
    // in value order so the result is invariant to column relabeling.
    std::vector<double> row_weights(std::size_t i) const {
        std::vector<double> w(logits_.begin() + i * d_, logits_.begin() + (i + 1) * d_);
        if (mode_ == WeightMode::unconstrained) return w;
        double mx = w[0];
        for (double v : w) mx = std::max(mx, v);
        for (auto& v : w) v = std::exp(v - mx);
        std::vector<double> terms = w;
        const double denom = stable_sum(terms);
        for (auto& v : w) v /= denom;
        return w;
    }

    std::vector<std::vector<double>> weight_matrix() const {
        std::vector<std::vector<double>> rows(m_);
        for (std::size_t i = 0; i < m_; ++i) rows[i] = row_weights(i);
        return rows;
    }

private:
    std::size_t m_, d_;
    WeightMode mode_;
    std::vector<double> logits_;
};

// ---------------------------------------------------------------------------
// Server configuration
// ---------------------------------------------------------------------------

struct ServerConfig {
    std::size_t d = 1;
    double eta_theta = 1.0;
    double eta_w = 0.01;
    WeightMode weight_mode = WeightMode::softmax;
    bool head_only_dot = true;
    bool normalize_w_grad = false;
    bool freeze_weights = false;  // fixed-weight ablation: train the soup only
    std::size_t clients_per_round = 0;  // 0 => full participation
    std::size_t rounds = 500;
    std::uint64_t seed = 0;
    LocalTrainConfig local;

    void validate(std::size_t m) const {
        if (d < 1) throw std::invalid_argument("ServerConfig: d must be >= 1");
        if (clients_per_round > m)
            throw std::invalid_argument("ServerConfig: clients_per_round exceeds client count");
        local.validate();
    }

    std::size_t participants(std::size_t m) const {
        return clients_per_round == 0 ? m : clients_per_round;
    }
};

// ---------------------------------------------------------------------------
// Merge
// ---------------------------------------------------------------------------

namespace detail {

inline bool param_lex_less(const ParamVector& a, const ParamVector& b) {
    const auto av = a.values(), bv = b.values();
    return std::lexicographical_compare(av.begin(), av.end(), bv.begin(), bv.end());
}

// Accumulation order for a merge row, keyed by (weight, model content) so the
// merged vector is bit-identical under a joint permutation of soup indices
// and weight columns.
inline std::vector<std::size_t> canonical_merge_order(const ModelSoup& soup,
                                                      const std::vector<double>& w) {
    std::vector<std::size_t> order(soup.size());
    for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (w[a] != w[b]) return w[a] < w[b];
        return param_lex_less(soup.model(a), soup.model(b));
    });
    return order;
}

}  // namespace detail

// theta_i = sum_j w_{i,j} Theta_j with the row's current effective weights.
inline ParamVector merge(const ModelSoup& soup, const MergeWeights& weights, std::size_t client) {
    if (client >= weights.num_clients())
        throw std::out_of_range("merge: client index out of range");
    if (weights.num_models() != soup.size())
        throw std::invalid_argument("merge: weight columns do not match soup size");
    const auto w = weights.row_weights(client);
    const auto order = detail::canonical_merge_order(soup, w);
    const std::size_t P = soup.layout()->total();
    std::vector<double> acc(P, 0.0);
    for (std::size_t j : order) {
        const double wj = w[j];
        const double* src = soup.model(j).data();
        for (std::size_t p = 0; p < P; ++p) acc[p] += wj * src[p];
    }
    return ParamVector(soup.layout(), std::move(acc));
}

// ---------------------------------------------------------------------------
// Weight updates
// ---------------------------------------------------------------------------

struct ClientDelta {
    std::size_t client;
    double coef;  // n_i / n_A over the participating set
    const ParamVector* delta;
    const ParamVector* merged;  // round-start merged model sent to the client
};

// Unconstrained variant: delta w_{i,j} = coef_i * <Theta_j, delta theta_i>.
// Rows of unsampled clients stay zero.
inline std::vector<std::vector<double>> update_weights_unconstrained(
    const ModelSoup& soup, std::size_t m, const std::vector<ClientDelta>& deltas,
    bool head_only) {
    const std::size_t d = soup.size();
    std::vector<std::vector<double>> upd(m, std::vector<double>(d, 0.0));
    for (const auto& cd : deltas)
        for (std::size_t j = 0; j < d; ++j)
            upd[cd.client][j] = cd.coef * dot(soup.model(j), *cd.delta, head_only);
    return upd;
}

// Softmax variant: delta a_{i,j} = coef_i * w_{i,j} * <delta theta_i,
// Theta_j - theta_i>. With normalize_w_grad each participating row is scaled
// to unit L2 norm (zero rows stay zero).
inline std::vector<std::vector<double>> update_weights_softmax(
    const ModelSoup& soup, const MergeWeights& weights, const std::vector<ClientDelta>& deltas,
    bool head_only, bool normalize) {
    const std::size_t d = soup.size();
    std::vector<std::vector<double>> upd(weights.num_clients(), std::vector<double>(d, 0.0));
    ParamVector diff(soup.layout());
    for (const auto& cd : deltas) {
        const auto w = weights.row_weights(cd.client);
        auto& row = upd[cd.client];
        for (std::size_t j = 0; j < d; ++j) {
            const double* t = soup.model(j).data();
            const double* th = cd.merged->data();
            for (std::size_t p = 0; p < diff.size(); ++p) diff[p] = t[p] - th[p];
            row[j] = cd.coef * w[j] * dot(*cd.delta, diff, head_only);
        }
        if (normalize) {
            std::vector<double> sq(d);
            for (std::size_t j = 0; j < d; ++j) sq[j] = row[j] * row[j];
            const double norm = std::sqrt(stable_sum(sq));
            if (norm > 0.0)
                for (auto& v : row) v /= norm;
        }
    }
    return upd;
}

// ---------------------------------------------------------------------------
// One communication round
// ---------------------------------------------------------------------------

inline std::vector<int> sample_clients(std::size_t m, std::size_t k, SeededRng& rng) {
    std::vector<int> idx(m);
    for (std::size_t i = 0; i < m; ++i) idx[i] = static_cast<int>(i);
    rng.shuffle(idx);
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

// One communication round: sample a client subset, merge a personalized
// model per client, run local SGD, aggregate the soup update, update the
// merging logits. All gradients are taken at round-start state; the two
// parameter blocks are then stepped with eta_theta and eta_w.
inline RoundReport server_round(ModelSoup& soup, MergeWeights& weights,
                                const std::vector<ClientDataset>& clients,
                                const ModelSpec& spec, const ServerConfig& cfg,
                                std::size_t round, int threads = 1) {
    using clock = std::chrono::steady_clock;
    const std::size_t m = clients.size();
    cfg.validate(m);
    if (weights.num_clients() != m)
        throw std::invalid_argument("server_round: weight rows do not match client count");

    RoundReport report;
    report.round = round;

    SeededRng sample_rng(cfg.seed, mix_stream(stream_tag::client_sample, round));
    report.selected = sample_clients(m, cfg.participants(m), sample_rng);

    std::vector<std::size_t> active;
    for (int i : report.selected) {
        if (clients[static_cast<std::size_t>(i)].split.train.empty())
            report.warnings.push_back("client " + std::to_string(i) +
                                      " has an empty train split; skipped");
        else
            active.push_back(static_cast<std::size_t>(i));
    }

    double server_sec = 0.0;

    // Forward: merge one personalized model per active client.
    std::vector<ParamVector> merged;
    merged.reserve(active.size());
    {
        const auto t0 = clock::now();
        for (std::size_t i : active) merged.push_back(merge(soup, weights, i));
        server_sec += std::chrono::duration<double>(clock::now() - t0).count();
    }

    // Local training, parallel across clients; each client owns an rng stream
    // keyed by (round, client) so results do not depend on scheduling.
    std::vector<LocalUpdate> updates(active.size(),
                                     LocalUpdate{ParamVector(soup.layout()), ParamVector(soup.layout())});
    parallel_for_index(active.size(), threads, [&](std::size_t a) {
        SeededRng rng(cfg.seed, mix_stream(stream_tag::local_train, round, active[a], 0));
        updates[a] = local_sgd(spec, merged[a], clients[active[a]], cfg.local, rng);
    });

    const auto t1 = clock::now();

    double n_active = 0.0;
    for (std::size_t i : active) n_active += double(clients[i].train_size());

    std::vector<ClientDelta> deltas;
    deltas.reserve(active.size());
    for (std::size_t a = 0; a < active.size(); ++a) {
        const std::size_t i = active[a];
        deltas.push_back({i, double(clients[i].train_size()) / n_active, &updates[a].delta,
                          &merged[a]});
        report.diag.sum_delta_sq += dot(updates[a].delta, updates[a].delta);
    }

    // Backward: delta Theta_j = sum_i coef_i w_{i,j} delta theta_i, computed
    // from round-start weights, then applied with eta_theta.
    if (!deltas.empty()) {
        std::vector<std::vector<double>> w_rows(active.size());
        for (std::size_t a = 0; a < active.size(); ++a) w_rows[a] = weights.row_weights(active[a]);

        const std::size_t P = soup.layout()->total();
        std::vector<double> acc(P);
        std::vector<std::vector<double>> logit_upd;
        if (!cfg.freeze_weights) {
            logit_upd = weights.mode() == WeightMode::softmax
                            ? update_weights_softmax(soup, weights, deltas, cfg.head_only_dot,
                                                     cfg.normalize_w_grad)
                            : update_weights_unconstrained(soup, m, deltas, cfg.head_only_dot);
        }

        for (std::size_t j = 0; j < soup.size(); ++j) {
            std::fill(acc.begin(), acc.end(), 0.0);
            for (std::size_t a = 0; a < active.size(); ++a) {
                const double c = deltas[a].coef * w_rows[a][j];
                const double* src = deltas[a].delta->data();
                for (std::size_t p = 0; p < P; ++p) acc[p] += c * src[p];
            }
            ParamVector& theta_j = soup.model(j);
            for (std::size_t p = 0; p < P; ++p) theta_j[p] += cfg.eta_theta * acc[p];
            theta_j.ensure_finite();
        }

        if (!cfg.freeze_weights) {
            for (const auto& cd : deltas) {
                if (weights.mode() == WeightMode::softmax) {
                    // Softmax logit updates cancel within each client row;
                    // track how far numerics drift from that.
                    std::vector<double> terms = logit_upd[cd.client];
                    report.diag.zero_sum_violation =
                        std::max(report.diag.zero_sum_violation, std::abs(stable_sum(terms)));
                }
                for (std::size_t j = 0; j < soup.size(); ++j)
                    weights.logit(cd.client, j) += cfg.eta_w * logit_upd[cd.client][j];
            }
        }
    }

    server_sec += std::chrono::duration<double>(clock::now() - t1).count();
    report.diag.server_phase_sec = server_sec;
    report.diag.max_model_norm = soup.max_norm();

    if (weights.mode() == WeightMode::softmax) {
        double viol = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            auto w = weights.row_weights(i);
            double lo = 0.0, hi = 0.0;
            for (double v : w) {
                lo = std::max(lo, -v);
                hi = std::max(hi, v - 1.0);
            }
            const double s = stable_sum(w);
            viol = std::max({viol, std::abs(s - 1.0), lo, hi});
        }
        report.diag.simplex_violation = viol;
    }

    return report;
}

// ---------------------------------------------------------------------------
// Trainer wrapper
// ---------------------------------------------------------------------------

class FedMergeTrainer : public Trainer {
public:
    FedMergeTrainer(const std::vector<ClientDataset>& clients, const ModelSpec& spec,
                    const ServerConfig& cfg, int threads = 1)
        : clients_(clients),
          spec_(spec),
          cfg_(cfg),
          threads_(threads),
          soup_(make_soup(spec, cfg)),
          weights_(clients.size(), cfg.d, cfg.weight_mode) {
        cfg_.validate(clients.size());
    }

    std::size_t num_clients() const override { return clients_.size(); }

    void step(std::size_t round, RoundReport& report) override {
        report = server_round(soup_, weights_, clients_, spec_, cfg_, round, threads_);
    }

    ClientEval eval_client(std::size_t i) const override {
        return evaluate_client(spec_, merge(soup_, weights_, i), clients_[i]);
    }

    std::vector<std::vector<double>> weight_snapshot() const override {
        return weights_.weight_matrix();
    }

    const ModelSoup& soup() const { return soup_; }
    ModelSoup& soup() { return soup_; }
    const MergeWeights& weights() const { return weights_; }
    MergeWeights& weights() { return weights_; }

private:
    static ModelSoup make_soup(const ModelSpec& spec, const ServerConfig& cfg) {
        const LayoutPtr layout = spec.layout();
        std::vector<ParamVector> models;
        models.reserve(cfg.d);
        for (std::size_t j = 0; j < cfg.d; ++j) {
            SeededRng rng(cfg.seed, mix_stream(stream_tag::model_init, j));
            models.push_back(random_init(layout, rng));
        }
        return ModelSoup(std::move(models));
    }

    const std::vector<ClientDataset>& clients_;
    ModelSpec spec_;
    ServerConfig cfg_;
    int threads_;
    ModelSoup soup_;
    MergeWeights weights_;
};

}  // namespace fedsim
