#pragma once

// Convergence diagnostics: the joint (soup, weights) objective and its exact
// server-side gradient, an empirical smoothness estimate, and a per-round
// descent check against the smoothness bound.

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <vector>

#include "fedsim/fedmerge.hpp"

namespace fedsim {

// F(soup, weights) = sum_i (n_i / n) * mean-CE of client i at its merged
// model, over full train splits.
inline double surrogate_objective(const std::vector<ClientDataset>& clients,
                                  const ModelSpec& spec, const ModelSoup& soup,
                                  const MergeWeights& weights) {
    double n = 0.0;
    for (const auto& c : clients) n += double(c.train_size());
    if (n == 0.0) throw std::invalid_argument("surrogate_objective: no training data");
    double f = 0.0;
    for (std::size_t i = 0; i < clients.size(); ++i) {
        if (clients[i].split.train.empty()) continue;
        const ParamVector theta = merge(soup, weights, i);
        const Batch b = clients[i].full_batch(SplitKind::train);
        f += double(clients[i].train_size()) / n * forward(spec, theta, b).loss;
    }
    return f;
}

struct JointGradient {
    std::vector<ParamVector> wrt_models;       // d entries
    std::vector<std::vector<double>> wrt_logits;  // m x d
    double sum_client_grad_sq = 0.0;           // sum_i ||grad of client loss||^2

    double squared_norm() const {
        double s = 0.0;
        for (const auto& g : wrt_models) s += dot(g, g);
        for (const auto& row : wrt_logits)
            for (double v : row) s += v * v;
        return s;
    }
};

// Exact chain-rule gradient of F w.r.t. the soup and the weight parameters
// (logits in softmax mode, raw weights otherwise). Full inner products; no
// head restriction.
inline JointGradient surrogate_gradient(const std::vector<ClientDataset>& clients,
                                        const ModelSpec& spec, const ModelSoup& soup,
                                        const MergeWeights& weights) {
    const std::size_t m = clients.size(), d = soup.size();
    double n = 0.0;
    for (const auto& c : clients) n += double(c.train_size());
    if (n == 0.0) throw std::invalid_argument("surrogate_gradient: no training data");

    JointGradient out;
    out.wrt_models.assign(d, ParamVector(soup.layout()));
    out.wrt_logits.assign(m, std::vector<double>(d, 0.0));

    ParamVector diff(soup.layout());
    for (std::size_t i = 0; i < m; ++i) {
        if (clients[i].split.train.empty()) continue;
        const double coef = double(clients[i].train_size()) / n;
        const ParamVector theta = merge(soup, weights, i);
        const Batch b = clients[i].full_batch(SplitKind::train);
        const ParamVector g = grad(spec, theta, b);
        out.sum_client_grad_sq += dot(g, g);
        const auto w = weights.row_weights(i);
        for (std::size_t j = 0; j < d; ++j) {
            out.wrt_models[j].axpy_inplace(coef * w[j], g);
            if (weights.mode() == WeightMode::softmax) {
                const double* t = soup.model(j).data();
                const double* th = theta.data();
                for (std::size_t p = 0; p < diff.size(); ++p) diff[p] = t[p] - th[p];
                out.wrt_logits[i][j] = coef * w[j] * dot(g, diff);
            } else {
                out.wrt_logits[i][j] = coef * dot(soup.model(j), g);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Smoothness estimation
// ---------------------------------------------------------------------------

using GradFn = std::function<std::vector<double>(const std::vector<double>&)>;

// Empirical Lipschitz constant of grad_fn near `center`: difference quotients
// over random probe pairs, each refined by a few power-style iterations that
// re-align the probe direction with the observed gradient difference. The
// refinement is what lets the estimate approach the top curvature instead of
// the angle-averaged one.
inline double estimate_lipschitz(const GradFn& grad_fn, const std::vector<double>& center,
                                 std::size_t probes, SeededRng& rng, double spread = 0.5,
                                 double h = 1e-3, std::size_t refine_iters = 8) {
    if (probes < 2) throw std::invalid_argument("estimate_lipschitz: probes must be >= 2");
    const std::size_t dim = center.size();
    auto random_unit = [&](std::vector<double>& z) {
        double norm = 0.0;
        do {
            norm = 0.0;
            for (auto& v : z) {
                v = rng.normal();
                norm += v * v;
            }
            norm = std::sqrt(norm);
        } while (norm == 0.0);  // identical probe pair is rejected and resampled
        for (auto& v : z) v /= norm;
    };

    double best = 0.0;
    std::vector<double> z(dim), point(dim), shifted(dim);
    for (std::size_t p = 0; p < probes; ++p) {
        // Scatter the anchor point so curvature is sampled over a region,
        // not just at the center.
        for (std::size_t k = 0; k < dim; ++k)
            point[k] = center[k] + (p == 0 ? 0.0 : spread * rng.normal());
        const std::vector<double> g0 = grad_fn(point);
        random_unit(z);
        for (std::size_t it = 0; it < refine_iters; ++it) {
            for (std::size_t k = 0; k < dim; ++k) shifted[k] = point[k] + h * z[k];
            const std::vector<double> g1 = grad_fn(shifted);
            double diff_norm = 0.0;
            for (std::size_t k = 0; k < dim; ++k) {
                const double dv = g1[k] - g0[k];
                diff_norm += dv * dv;
                shifted[k] = dv;  // reuse as the next direction
            }
            diff_norm = std::sqrt(diff_norm);
            best = std::max(best, diff_norm / h);
            if (diff_norm == 0.0) break;
            for (std::size_t k = 0; k < dim; ++k) z[k] = shifted[k] / diff_norm;
        }
    }
    return best;
}

namespace detail {

inline std::vector<double> pack_joint(const ModelSoup& soup, const MergeWeights& weights) {
    std::vector<double> v;
    v.reserve(soup.size() * soup.layout()->total() + weights.logits().size());
    for (std::size_t j = 0; j < soup.size(); ++j)
        v.insert(v.end(), soup.model(j).values().begin(), soup.model(j).values().end());
    v.insert(v.end(), weights.logits().begin(), weights.logits().end());
    return v;
}

inline void unpack_joint(const std::vector<double>& v, ModelSoup& soup, MergeWeights& weights) {
    const std::size_t P = soup.layout()->total();
    std::size_t off = 0;
    for (std::size_t j = 0; j < soup.size(); ++j) {
        std::copy(v.begin() + off, v.begin() + off + P, soup.model(j).values().begin());
        off += P;
    }
    for (std::size_t i = 0; i < weights.num_clients(); ++i)
        for (std::size_t j = 0; j < weights.num_models(); ++j)
            weights.logit(i, j) = v[off++];
}

}  // namespace detail

// L-hat for the joint surrogate around the given state.
inline double estimate_smoothness(const std::vector<ClientDataset>& clients,
                                  const ModelSpec& spec, const ModelSoup& soup,
                                  const MergeWeights& weights, std::size_t probes,
                                  SeededRng& rng, double spread = 0.5) {
    ModelSoup scratch_soup = soup;
    MergeWeights scratch_w = weights;
    const GradFn grad_fn = [&](const std::vector<double>& x) {
        detail::unpack_joint(x, scratch_soup, scratch_w);
        const JointGradient g = surrogate_gradient(clients, spec, scratch_soup, scratch_w);
        std::vector<double> flat;
        flat.reserve(x.size());
        for (const auto& gm : g.wrt_models)
            flat.insert(flat.end(), gm.values().begin(), gm.values().end());
        for (const auto& row : g.wrt_logits) flat.insert(flat.end(), row.begin(), row.end());
        return flat;
    };
    return estimate_lipschitz(grad_fn, detail::pack_joint(soup, weights), probes, rng, spread);
}

// ---------------------------------------------------------------------------
// Descent check
// ---------------------------------------------------------------------------

struct DescentRow {
    std::size_t round = 0;
    double objective = 0.0;        // F before the round's update
    double grad_sq_norm = 0.0;     // ||grad F||^2 over (soup, logits)
    double sum_client_grad_sq = 0.0;
    double required_decrease = 0.0;  // eta (1 - eta L / 2) ||grad F||^2, clamped at 0
    double actual_decrease = 0.0;    // F_t - F_{t+1}
    double bound_rhs = 0.0;          // (m + d C^2) sum_i ||g_i||^2 scaled by the step factor
    bool violated = false;
};

struct DescentReport {
    double l_hat = 0.0;
    double eta = 0.0;
    std::vector<DescentRow> rows;
    double violation_fraction = 0.0;
    // Running average (1/T) sum_t sum_i ||g_i^t||^2 and the c/(T d) fit.
    std::vector<double> running_avg;
    double fitted_c = 0.0;
};

struct DescentOptions {
    std::size_t d = 2;
    std::size_t rounds = 100;
    std::size_t probes = 16;
    double eta_over_l = 0.1;  // eta = eta_over_l / L-hat
    double eta_abs = 0.0;     // > 0: fixed eta, e.g. for runs compared across d
    std::uint64_t seed = 0;
    WeightMode mode = WeightMode::softmax;
    InitScheme init = InitScheme::glorot_uniform;
};

// Runs the actual server rounds restricted to one local epoch, full batches
// and full participation, where the round update equals one exact gradient
// step with rate eta on the joint surrogate. A round violates when the
// objective fails the smoothness descent bound at the measured gradient norm
// (clamped at plain descent once eta exceeds 2 / L-hat).
inline DescentReport descent_check(const std::vector<ClientDataset>& clients,
                                   const ModelSpec& spec, const DescentOptions& opts) {
    std::size_t max_train = 0;
    for (const auto& c : clients) max_train = std::max(max_train, c.train_size());

    std::vector<ParamVector> models;
    for (std::size_t j = 0; j < opts.d; ++j) {
        SeededRng rng(opts.seed, mix_stream(stream_tag::model_init, j));
        models.push_back(random_init(spec.layout(), rng, opts.init));
    }
    ModelSoup soup(std::move(models));
    MergeWeights weights(clients.size(), opts.d, opts.mode);

    DescentReport report;
    SeededRng probe_rng(opts.seed, mix_stream(stream_tag::probe, 0));
    report.l_hat = estimate_smoothness(clients, spec, soup, weights, opts.probes, probe_rng);
    if (report.l_hat <= 0.0) report.l_hat = 1.0;
    report.eta = opts.eta_abs > 0.0 ? opts.eta_abs : opts.eta_over_l / report.l_hat;

    ServerConfig cfg;
    cfg.d = opts.d;
    cfg.eta_theta = 1.0;
    cfg.eta_w = 1.0;
    cfg.weight_mode = opts.mode;
    cfg.head_only_dot = false;
    cfg.normalize_w_grad = false;
    cfg.clients_per_round = 0;
    cfg.rounds = opts.rounds;
    cfg.seed = opts.seed;
    cfg.local.eta = report.eta;
    cfg.local.epochs = 1;
    cfg.local.batch_size = std::max<std::size_t>(1, max_train);

    const double step_factor = report.eta * (1.0 - report.eta * report.l_hat / 2.0);
    double f_cur = surrogate_objective(clients, spec, soup, weights);
    double running_sum = 0.0;
    std::size_t violations = 0;

    for (std::size_t t = 0; t < opts.rounds; ++t) {
        const JointGradient g = surrogate_gradient(clients, spec, soup, weights);
        DescentRow row;
        row.round = t;
        row.objective = f_cur;
        row.grad_sq_norm = g.squared_norm();
        row.sum_client_grad_sq = g.sum_client_grad_sq;
        const double c_theta = soup.max_norm();
        row.bound_rhs = step_factor *
                        (double(clients.size()) + double(opts.d) * c_theta * c_theta) *
                        g.sum_client_grad_sq;
        row.required_decrease = std::max(0.0, step_factor * row.grad_sq_norm);

        server_round(soup, weights, clients, spec, cfg, t);

        const double f_next = surrogate_objective(clients, spec, soup, weights);
        row.actual_decrease = f_cur - f_next;
        const double slack = 1e-10 * (1.0 + std::abs(f_cur));
        row.violated = row.actual_decrease < row.required_decrease - slack;
        if (row.violated) ++violations;

        running_sum += g.sum_client_grad_sq;
        report.running_avg.push_back(running_sum / double(t + 1));
        report.rows.push_back(row);
        f_cur = f_next;
    }
    report.violation_fraction =
        opts.rounds == 0 ? 0.0 : double(violations) / double(opts.rounds);

    // Least-squares fit of running_avg[T-1] ~ c / (T d).
    double num = 0.0, den = 0.0;
    for (std::size_t t = 0; t < report.running_avg.size(); ++t) {
        const double x = 1.0 / (double(t + 1) * double(opts.d));
        num += report.running_avg[t] * x;
        den += x * x;
    }
    report.fitted_c = den > 0.0 ? num / den : 0.0;
    return report;
}

}  // namespace fedsim
