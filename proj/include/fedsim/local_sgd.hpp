#pragma once

// Client-side training: plain mini-batch SGD over the train split.

#include <stdexcept>
#include <vector>

#include "fedsim/datagen.hpp"
#include "fedsim/models.hpp"
#include "fedsim/param_core.hpp"

namespace fedsim {

struct LocalTrainConfig {
    double eta = 0.01;
    std::size_t epochs = 2;
    std::size_t batch_size = 64;

    void validate() const {
        if (eta <= 0.0) throw std::invalid_argument("LocalTrainConfig: eta must be > 0");
        if (epochs < 1) throw std::invalid_argument("LocalTrainConfig: epochs must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("LocalTrainConfig: batch_size must be >= 1");
    }
};

struct LocalUpdate {
    ParamVector theta;
    ParamVector delta;  // theta - theta0
};

// One epoch = one pass over the shuffled train split; the last partial batch
// is kept. Shuffling is driven only by `rng`.
inline LocalUpdate local_sgd(const ModelSpec& spec, const ParamVector& theta0,
                             const ClientDataset& data, const LocalTrainConfig& cfg,
                             SeededRng& rng) {
    cfg.validate();
    if (data.split.train.empty()) throw std::invalid_argument("local_sgd: empty train split");

    ParamVector theta = theta0;
    std::vector<std::size_t> order = data.split.train;
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(start + cfg.batch_size, order.size());
            const std::vector<std::size_t> idx(order.begin() + start, order.begin() + end);
            const ParamVector g = grad(spec, theta, data.batch_from(idx));
            theta.axpy_inplace(-cfg.eta, g);
        }
    }

    ParamVector delta = theta;
    delta.axpy_inplace(-1.0, theta0);
    return {std::move(theta), std::move(delta)};
}

}  // namespace fedsim
