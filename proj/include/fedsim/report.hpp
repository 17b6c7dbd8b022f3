#pragma once

// Per-round metrics, client evaluation and the trainer interface shared by
// FedMerge and the baselines.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "fedsim/datagen.hpp"
#include "fedsim/models.hpp"
#include "fedsim/parallel.hpp"

namespace fedsim {

struct SplitMetrics {
    double loss = 0.0;
    double acc = 0.0;
    std::size_t n = 0;
};

struct ClientEval {
    SplitMetrics train, val, test;

    const SplitMetrics& of(SplitKind s) const {
        switch (s) {
            case SplitKind::train: return train;
            case SplitKind::val: return val;
            default: return test;
        }
    }
};

struct Diagnostics {
    double sum_delta_sq = 0.0;        // sum_i ||delta theta_i||^2 over participants
    double max_model_norm = 0.0;      // max_j ||Theta_j||
    double simplex_violation = 0.0;   // max row-sum / range deviation of w
    double zero_sum_violation = 0.0;  // max_i |sum_j delta a_{i,j}|
    double server_phase_sec = 0.0;    // merge + server-update wall time
};

struct RoundReport {
    std::size_t round = 0;
    std::vector<int> selected;  // ascending client indices
    bool evaluated = false;
    std::vector<ClientEval> per_client;  // filled when evaluated
    SplitMetrics avg_train, avg_val, avg_test;
    Diagnostics diag;
    std::vector<std::string> warnings;

    const SplitMetrics& avg(SplitKind s) const {
        switch (s) {
            case SplitKind::train: return avg_train;
            case SplitKind::val: return avg_val;
            default: return avg_test;
        }
    }
};

inline SplitMetrics evaluate_split(const ModelSpec& spec, const ParamVector& theta,
                                   const ClientDataset& ds, SplitKind s) {
    SplitMetrics out;
    const auto& idx = ds.split.of(s);
    out.n = idx.size();
    if (idx.empty()) return out;
    const Batch b = ds.batch_from(idx);
    const ForwardResult fr = forward(spec, theta, b);
    out.loss = fr.loss;
    out.acc = accuracy(fr.logits, b.labels, spec.num_classes);
    return out;
}

inline ClientEval evaluate_client(const ModelSpec& spec, const ParamVector& theta,
                                  const ClientDataset& ds) {
    return {evaluate_split(spec, theta, ds, SplitKind::train),
            evaluate_split(spec, theta, ds, SplitKind::val),
            evaluate_split(spec, theta, ds, SplitKind::test)};
}

// n_i-weighted averages per split; empty splits contribute nothing.
inline void fill_weighted_averages(RoundReport& r) {
    for (SplitKind s : {SplitKind::train, SplitKind::val, SplitKind::test}) {
        double loss = 0.0, acc = 0.0, n = 0.0;
        for (const auto& ce : r.per_client) {
            const auto& m = ce.of(s);
            loss += m.loss * double(m.n);
            acc += m.acc * double(m.n);
            n += double(m.n);
        }
        SplitMetrics avg;
        avg.n = static_cast<std::size_t>(n);
        if (n > 0) {
            avg.loss = loss / n;
            avg.acc = acc / n;
        }
        switch (s) {
            case SplitKind::train: r.avg_train = avg; break;
            case SplitKind::val: r.avg_val = avg; break;
            default: r.avg_test = avg; break;
        }
    }
}

// A federated method: steps mutate internal state round by round; evaluation
// asks for the personalized model each client would use for inference.
class Trainer {
public:
    virtual ~Trainer() = default;
    virtual std::size_t num_clients() const = 0;
    virtual void step(std::size_t round, RoundReport& report) = 0;
    virtual ClientEval eval_client(std::size_t i) const = 0;

    // Per-client mixing weights for snapshot files; empty when the method
    // has none.
    virtual std::vector<std::vector<double>> weight_snapshot() const { return {}; }

    void evaluate(RoundReport& report, int threads) const {
        report.per_client.resize(num_clients());
        parallel_for_index(num_clients(), threads,
                           [&](std::size_t i) { report.per_client[i] = eval_client(i); });
        report.evaluated = true;
        fill_weighted_averages(report);
    }
};

// ---------------------------------------------------------------------------
// Weight-matrix structure score: mean intra-cluster minus mean inter-cluster
// cosine similarity of client weight rows.
// ---------------------------------------------------------------------------

inline double block_structure_score(const std::vector<std::vector<double>>& rows,
                                    const std::vector<int>& cluster_ids) {
    const std::size_t m = rows.size();
    if (m != cluster_ids.size())
        throw std::invalid_argument("block_structure_score: row/cluster count mismatch");
    auto cosine = [](const std::vector<double>& a, const std::vector<double>& b) {
        double ab = 0.0, aa = 0.0, bb = 0.0;
        for (std::size_t k = 0; k < a.size(); ++k) {
            ab += a[k] * b[k];
            aa += a[k] * a[k];
            bb += b[k] * b[k];
        }
        if (aa <= 0.0 || bb <= 0.0) return 0.0;
        return ab / std::sqrt(aa * bb);
    };
    double intra = 0.0, inter = 0.0;
    std::size_t n_intra = 0, n_inter = 0;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = i + 1; j < m; ++j) {
            const double c = cosine(rows[i], rows[j]);
            if (cluster_ids[i] == cluster_ids[j]) {
                intra += c;
                ++n_intra;
            } else {
                inter += c;
                ++n_inter;
            }
        }
    const double mi = n_intra ? intra / double(n_intra) : 0.0;
    const double me = n_inter ? inter / double(n_inter) : 0.0;
    return mi - me;
}

}  // namespace fedsim
