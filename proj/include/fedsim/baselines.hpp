#pragma once

// Comparison methods on the same model/data stack: Local, FedAvg,
// FedAvg+finetune, IFCA-style cluster FL and a simplified FedEM.
// FedAvg is written directly against the aggregation formula and shares no
// code with the merging engine, so it can serve as an independent reference.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedsim/local_sgd.hpp"
#include "fedsim/parallel.hpp"
#include "fedsim/report.hpp"

namespace fedsim {

enum class BaselineMethod { local, fedavg, fedavg_ft, ifca, fedem };

struct BaselineConfig {
    BaselineMethod method = BaselineMethod::fedavg;
    std::size_t d = 1;               // ifca / fedem model count
    std::size_t finetune_epochs = 1;  // fedavg_ft
    std::size_t clients_per_round = 0;  // 0 => full participation
    std::size_t rounds = 500;
    std::uint64_t seed = 0;
    LocalTrainConfig local;
    SplitKind ifca_assign_split = SplitKind::train;

    // Config-level rule: ifca/fedem are multi-model methods. The trainers
    // themselves accept d = 1, where both provably degenerate to FedAvg.
    void validate(std::size_t m, bool strict_d = true) const {
        if (strict_d && (method == BaselineMethod::ifca || method == BaselineMethod::fedem) &&
            d < 2)
            throw std::invalid_argument("BaselineConfig: ifca/fedem require d >= 2");
        if (d < 1) throw std::invalid_argument("BaselineConfig: d must be >= 1");
        if (clients_per_round > m)
            throw std::invalid_argument("BaselineConfig: clients_per_round exceeds client count");
        local.validate();
    }

    std::size_t participants(std::size_t m) const {
        return clients_per_round == 0 ? m : clients_per_round;
    }
};

namespace detail {

inline std::vector<int> sample_round_clients(std::size_t m, std::size_t k, std::uint64_t seed,
                                             std::size_t round) {
    SeededRng rng(seed, mix_stream(stream_tag::client_sample, round));
    std::vector<int> idx(m);
    for (std::size_t i = 0; i < m; ++i) idx[i] = static_cast<int>(i);
    rng.shuffle(idx);
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

inline std::vector<std::size_t> drop_empty_train(const std::vector<int>& selected,
                                                 const std::vector<ClientDataset>& clients,
                                                 RoundReport& report) {
    std::vector<std::size_t> active;
    for (int i : selected) {
        if (clients[static_cast<std::size_t>(i)].split.train.empty())
            report.warnings.push_back("client " + std::to_string(i) +
                                      " has an empty train split; skipped");
        else
            active.push_back(static_cast<std::size_t>(i));
    }
    return active;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// FedAvg
// ---------------------------------------------------------------------------

class FedAvgTrainer : public Trainer {
public:
    FedAvgTrainer(const std::vector<ClientDataset>& clients, const ModelSpec& spec,
                  const BaselineConfig& cfg, int threads = 1)
        : clients_(clients), spec_(spec), cfg_(cfg), threads_(threads), global_(init_model(spec, cfg.seed)) {
        cfg_.validate(clients.size());
    }

    std::size_t num_clients() const override { return clients_.size(); }

    void step(std::size_t round, RoundReport& report) override {
        report = RoundReport{};
        report.round = round;
        report.selected = detail::sample_round_clients(clients_.size(),
                                                       cfg_.participants(clients_.size()),
                                                       cfg_.seed, round);
        const auto active = detail::drop_empty_train(report.selected, clients_, report);
        if (active.empty()) return;

        std::vector<ParamVector> locals(active.size(), ParamVector(global_.layout()));
        parallel_for_index(active.size(), threads_, [&](std::size_t a) {
            SeededRng rng(cfg_.seed, mix_stream(stream_tag::local_train, round, active[a], 0));
            locals[a] = local_sgd(spec_, global_, clients_[active[a]], cfg_.local, rng).theta;
        });

        double n_active = 0.0;
        for (std::size_t i : active) n_active += double(clients_[i].train_size());

        // Theta <- sum_i (n_i / n) theta_i over the participating set.
        ParamVector agg(global_.layout());
        for (std::size_t a = 0; a < active.size(); ++a) {
            const double coef = double(clients_[active[a]].train_size()) / n_active;
            agg.axpy_inplace(coef, locals[a]);
            ParamVector d = locals[a];
            d.axpy_inplace(-1.0, global_);
            report.diag.sum_delta_sq += dot(d, d);
        }
        global_ = std::move(agg);
        report.diag.max_model_norm = global_.norm();
    }

    ClientEval eval_client(std::size_t i) const override {
        return evaluate_client(spec_, global_, clients_[i]);
    }

    const ParamVector& global_model() const { return global_; }

protected:
    static ParamVector init_model(const ModelSpec& spec, std::uint64_t seed) {
        SeededRng rng(seed, mix_stream(stream_tag::model_init, 0));
        return random_init(spec.layout(), rng);
    }

    const std::vector<ClientDataset>& clients_;
    ModelSpec spec_;
    BaselineConfig cfg_;
    int threads_;
    ParamVector global_;
};

// FedAvg followed by per-client fine-tuning at evaluation time.
class FedAvgFtTrainer : public FedAvgTrainer {
public:
    using FedAvgTrainer::FedAvgTrainer;

    ClientEval eval_client(std::size_t i) const override {
        if (cfg_.finetune_epochs == 0 || clients_[i].split.train.empty())
            return evaluate_client(spec_, global_, clients_[i]);
        LocalTrainConfig ft = cfg_.local;
        ft.epochs = cfg_.finetune_epochs;
        SeededRng rng(cfg_.seed, mix_stream(stream_tag::finetune, i, 0));
        const auto tuned = local_sgd(spec_, global_, clients_[i], ft, rng);
        return evaluate_client(spec_, tuned.theta, clients_[i]);
    }
};

// ---------------------------------------------------------------------------
// Local-only training
// ---------------------------------------------------------------------------

class LocalTrainer : public Trainer {
public:
    LocalTrainer(const std::vector<ClientDataset>& clients, const ModelSpec& spec,
                 const BaselineConfig& cfg, int threads = 1)
        : clients_(clients), spec_(spec), cfg_(cfg), threads_(threads) {
        cfg_.validate(clients.size());
        SeededRng rng(cfg.seed, mix_stream(stream_tag::model_init, 0));
        const ParamVector init = random_init(spec.layout(), rng);
        models_.assign(clients.size(), init);
    }

    std::size_t num_clients() const override { return clients_.size(); }

    void step(std::size_t round, RoundReport& report) override {
        report = RoundReport{};
        report.round = round;
        report.selected.resize(clients_.size());
        for (std::size_t i = 0; i < clients_.size(); ++i) report.selected[i] = static_cast<int>(i);
        const auto active = detail::drop_empty_train(report.selected, clients_, report);
        parallel_for_index(active.size(), threads_, [&](std::size_t a) {
            const std::size_t i = active[a];
            SeededRng rng(cfg_.seed, mix_stream(stream_tag::local_train, round, i, 0));
            models_[i] = local_sgd(spec_, models_[i], clients_[i], cfg_.local, rng).theta;
        });
    }

    ClientEval eval_client(std::size_t i) const override {
        return evaluate_client(spec_, models_[i], clients_[i]);
    }

private:
    const std::vector<ClientDataset>& clients_;
    ModelSpec spec_;
    BaselineConfig cfg_;
    int threads_;
    std::vector<ParamVector> models_;
};

// ---------------------------------------------------------------------------
// IFCA-style cluster FL
// ---------------------------------------------------------------------------

class IfcaTrainer : public Trainer {
public:
    IfcaTrainer(const std::vector<ClientDataset>& clients, const ModelSpec& spec,
                const BaselineConfig& cfg, int threads = 1)
        : clients_(clients), spec_(spec), cfg_(cfg), threads_(threads) {
        cfg_.validate(clients.size(), /*strict_d=*/false);
        for (std::size_t j = 0; j < cfg.d; ++j) {
            SeededRng rng(cfg.seed, mix_stream(stream_tag::model_init, j));
            models_.push_back(random_init(spec.layout(), rng));
        }
        assignment_.assign(clients.size(), 0);
    }

    std::size_t num_clients() const override { return clients_.size(); }

    // Each round every sampled client joins the model with the lowest loss on
    // its assignment split (ties -> lowest index), trains it, and models are
    // aggregated within their assigned groups. Empty groups carry over.
    void step(std::size_t round, RoundReport& report) override {
        report = RoundReport{};
        report.round = round;
        report.selected = detail::sample_round_clients(clients_.size(),
                                                       cfg_.participants(clients_.size()),
                                                       cfg_.seed, round);
        const auto active = detail::drop_empty_train(report.selected, clients_, report);
        if (active.empty()) return;

        std::vector<std::size_t> assign(active.size(), 0);
        std::vector<ParamVector> locals(active.size(), ParamVector(models_[0].layout()));
        parallel_for_index(active.size(), threads_, [&](std::size_t a) {
            const std::size_t i = active[a];
            assign[a] = best_model_for(i);
            SeededRng rng(cfg_.seed, mix_stream(stream_tag::local_train, round, i, 0));
            locals[a] = local_sgd(spec_, models_[assign[a]], clients_[i], cfg_.local, rng).theta;
        });
        for (std::size_t a = 0; a < active.size(); ++a) assignment_[active[a]] = static_cast<int>(assign[a]);

        for (std::size_t j = 0; j < models_.size(); ++j) {
            double n_j = 0.0;
            for (std::size_t a = 0; a < active.size(); ++a)
                if (assign[a] == j) n_j += double(clients_[active[a]].train_size());
            if (n_j == 0.0) continue;  // empty cluster keeps its model
            ParamVector agg(models_[j].layout());
            for (std::size_t a = 0; a < active.size(); ++a)
                if (assign[a] == j)
                    agg.axpy_inplace(double(clients_[active[a]].train_size()) / n_j, locals[a]);
            models_[j] = std::move(agg);
        }
        double mx = 0.0;
        for (const auto& mdl : models_) mx = std::max(mx, mdl.norm());
        report.diag.max_model_norm = mx;
    }

    ClientEval eval_client(std::size_t i) const override {
        return evaluate_client(spec_, models_[best_model_for(i)], clients_[i]);
    }

    const std::vector<int>& assignment() const { return assignment_; }

    // Warm start / checkpoint resume.
    void set_models(std::vector<ParamVector> models) {
        if (models.size() != models_.size())
            throw std::invalid_argument("set_models: model count mismatch");
        models_ = std::move(models);
    }

private:
    std::size_t best_model_for(std::size_t i) const {
        const auto& idx = clients_[i].split.of(cfg_.ifca_assign_split);
        if (idx.empty()) return 0;
        const Batch b = clients_[i].batch_from(idx);
        std::size_t best = 0;
        double best_loss = forward(spec_, models_[0], b).loss;
        for (std::size_t j = 1; j < models_.size(); ++j) {
            const double loss = forward(spec_, models_[j], b).loss;
            if (loss < best_loss) {
                best_loss = loss;
                best = j;
            }
        }
        return best;
    }

    const std::vector<ClientDataset>& clients_;
    ModelSpec spec_;
    BaselineConfig cfg_;
    int threads_;
    std::vector<ParamVector> models_;
    std::vector<int> assignment_;
};

// ---------------------------------------------------------------------------
// Simplified FedEM ("fedem-lite")
// ---------------------------------------------------------------------------

// Responsibilities r_{i,j} proportional to exp(-train loss of model j); each
// client trains every model with an r-weighted step, the server aggregates
// each model with n_i * r_{i,j} weights, and predictions ensemble the logits
// with r weights. Client cost deliberately grows with d.
class FedEmTrainer : public Trainer {
public:
    FedEmTrainer(const std::vector<ClientDataset>& clients, const ModelSpec& spec,
                 const BaselineConfig& cfg, int threads = 1)
        : clients_(clients), spec_(spec), cfg_(cfg), threads_(threads) {
        cfg_.validate(clients.size(), /*strict_d=*/false);
        for (std::size_t j = 0; j < cfg.d; ++j) {
            SeededRng rng(cfg.seed, mix_stream(stream_tag::model_init, j));
            models_.push_back(random_init(spec.layout(), rng));
        }
        resp_.assign(clients.size(), std::vector<double>(cfg.d, 1.0 / double(cfg.d)));
    }

    std::size_t num_clients() const override { return clients_.size(); }

    void step(std::size_t round, RoundReport& report) override {
        report = RoundReport{};
        report.round = round;
        report.selected = detail::sample_round_clients(clients_.size(),
                                                       cfg_.participants(clients_.size()),
                                                       cfg_.seed, round);
        const auto active = detail::drop_empty_train(report.selected, clients_, report);
        if (active.empty()) return;
        const std::size_t d = models_.size();

        std::vector<std::vector<ParamVector>> locals(
            active.size(), std::vector<ParamVector>(d, ParamVector(models_[0].layout())));
        parallel_for_index(active.size(), threads_, [&](std::size_t a) {
            const std::size_t i = active[a];
            resp_[i] = responsibilities(i);
            for (std::size_t j = 0; j < d; ++j) {
                LocalTrainConfig lt = cfg_.local;
                lt.eta = cfg_.local.eta * resp_[i][j];
                if (lt.eta <= 0.0) {
                    locals[a][j] = models_[j];
                    continue;
                }
                SeededRng rng(cfg_.seed, mix_stream(stream_tag::local_train, round, i, j));
                locals[a][j] = local_sgd(spec_, models_[j], clients_[i], lt, rng).theta;
            }
        });

        for (std::size_t j = 0; j < d; ++j) {
            double mass = 0.0;
            for (std::size_t a = 0; a < active.size(); ++a)
                mass += double(clients_[active[a]].train_size()) * resp_[active[a]][j];
            if (mass <= 0.0) continue;
            ParamVector agg(models_[j].layout());
            for (std::size_t a = 0; a < active.size(); ++a) {
                const double coef =
                    double(clients_[active[a]].train_size()) * resp_[active[a]][j] / mass;
                agg.axpy_inplace(coef, locals[a][j]);
            }
            models_[j] = std::move(agg);
        }
    }

    ClientEval eval_client(std::size_t i) const override {
        ClientEval ce;
        const auto r = resp_[i];
        for (SplitKind s : {SplitKind::train, SplitKind::val, SplitKind::test}) {
            SplitMetrics sm;
            const auto& idx = clients_[i].split.of(s);
            sm.n = idx.size();
            if (!idx.empty()) {
                const Batch b = clients_[i].batch_from(idx);
                std::vector<double> mix(b.size * spec_.num_classes, 0.0);
                std::vector<double> logits;
                for (std::size_t j = 0; j < models_.size(); ++j) {
                    fedsim::detail::compute_logits(spec_, models_[j], b, logits, nullptr);
                    for (std::size_t k = 0; k < mix.size(); ++k) mix[k] += r[j] * logits[k];
                }
                sm.loss = fedsim::detail::mean_cross_entropy(mix, b.labels, spec_.num_classes);
                sm.acc = accuracy(mix, b.labels, spec_.num_classes);
            }
            switch (s) {
                case SplitKind::train: ce.train = sm; break;
                case SplitKind::val: ce.val = sm; break;
                default: ce.test = sm; break;
            }
        }
        return ce;
    }

    const std::vector<std::vector<double>>& responsibilities_matrix() const { return resp_; }

private:
    std::vector<double> responsibilities(std::size_t i) const {
        const std::size_t d = models_.size();
        std::vector<double> losses(d);
        const Batch b = clients_[i].full_batch(SplitKind::train);
        for (std::size_t j = 0; j < d; ++j) losses[j] = forward(spec_, models_[j], b).loss;
        double mn = losses[0];
        for (double l : losses) mn = std::min(mn, l);
        std::vector<double> r(d);
        double sum = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            r[j] = std::exp(-(losses[j] - mn));
            sum += r[j];
        }
        for (auto& v : r) v /= sum;
        return r;
    }

    const std::vector<ClientDataset>& clients_;
    ModelSpec spec_;
    BaselineConfig cfg_;
    int threads_;
    std::vector<ParamVector> models_;
    std::vector<std::vector<double>> resp_;
};

// ---------------------------------------------------------------------------
// Run loops
// ---------------------------------------------------------------------------

inline std::unique_ptr<Trainer> make_baseline_trainer(const std::vector<ClientDataset>& clients,
                                                      const ModelSpec& spec,
                                                      const BaselineConfig& cfg, int threads = 1) {
    switch (cfg.method) {
        case BaselineMethod::local: return std::make_unique<LocalTrainer>(clients, spec, cfg, threads);
        case BaselineMethod::fedavg: return std::make_unique<FedAvgTrainer>(clients, spec, cfg, threads);
        case BaselineMethod::fedavg_ft:
            return std::make_unique<FedAvgFtTrainer>(clients, spec, cfg, threads);
        case BaselineMethod::ifca: return std::make_unique<IfcaTrainer>(clients, spec, cfg, threads);
        default: return std::make_unique<FedEmTrainer>(clients, spec, cfg, threads);
    }
}

inline std::vector<RoundReport> run_trainer(Trainer& t, std::size_t rounds,
                                            std::size_t eval_every = 1, int threads = 1) {
    std::vector<RoundReport> out;
    {
        RoundReport init;
        init.round = 0;
        t.evaluate(init, threads);
        out.push_back(std::move(init));
    }
    for (std::size_t r = 0; r < rounds; ++r) {
        RoundReport rep;
        t.step(r, rep);
        rep.round = r + 1;
        if (eval_every > 0 && ((r + 1) % eval_every == 0 || r + 1 == rounds))
            t.evaluate(rep, threads);
        out.push_back(std::move(rep));
    }
    return out;
}

inline std::vector<RoundReport> run_fedavg(const std::vector<ClientDataset>& clients,
                                           const ModelSpec& spec, const BaselineConfig& cfg,
                                           std::size_t eval_every = 1, int threads = 1) {
    FedAvgTrainer t(clients, spec, cfg, threads);
    return run_trainer(t, cfg.rounds, eval_every, threads);
}

inline std::vector<RoundReport> run_local(const std::vector<ClientDataset>& clients,
                                          const ModelSpec& spec, const BaselineConfig& cfg,
                                          std::size_t eval_every = 1, int threads = 1) {
    LocalTrainer t(clients, spec, cfg, threads);
    return run_trainer(t, cfg.rounds, eval_every, threads);
}

inline std::vector<RoundReport> run_fedavg_ft(const std::vector<ClientDataset>& clients,
                                              const ModelSpec& spec, const BaselineConfig& cfg,
                                              std::size_t eval_every = 1, int threads = 1) {
    FedAvgFtTrainer t(clients, spec, cfg, threads);
    return run_trainer(t, cfg.rounds, eval_every, threads);
}

inline std::vector<RoundReport> run_ifca(const std::vector<ClientDataset>& clients,
                                         const ModelSpec& spec, const BaselineConfig& cfg,
                                         std::size_t eval_every = 1, int threads = 1) {
    IfcaTrainer t(clients, spec, cfg, threads);
    return run_trainer(t, cfg.rounds, eval_every, threads);
}

inline std::vector<RoundReport> run_fedem(const std::vector<ClientDataset>& clients,
                                          const ModelSpec& spec, const BaselineConfig& cfg,
                                          std::size_t eval_every = 1, int threads = 1) {
    FedEmTrainer t(clients, spec, cfg, threads);
    return run_trainer(t, cfg.rounds, eval_every, threads);
}

}  // namespace fedsim
