#pragma once

// Small differentiable classifiers with hand-written forward and backward
// passes: multinomial logistic regression and a one-hidden-layer MLP.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedsim/param_core.hpp"

namespace fedsim {

enum class ModelKind { logistic, mlp };
enum class Activation { relu, tanh };

struct ModelSpec {
    ModelKind kind = ModelKind::logistic;
    std::size_t input_dim = 0;
    std::size_t hidden_dim = 0;  // mlp only
    std::size_t num_classes = 0;
    Activation activation = Activation::relu;
    // How many trailing affine layers form the classification head; the head
    // slice is what restricted inner products use.
    std::size_t head_layers = 1;

    void validate() const {
        if (input_dim == 0) throw std::invalid_argument("ModelSpec: input_dim must be positive");
        if (num_classes < 2) throw std::invalid_argument("ModelSpec: need at least 2 classes");
        if (kind == ModelKind::mlp && hidden_dim == 0)
            throw std::invalid_argument("ModelSpec: mlp needs hidden_dim");
        if (head_layers < 1) throw std::invalid_argument("ModelSpec: head_layers must be >= 1");
    }

    // Head range defaults to the final affine layer (weights + bias).
    LayoutPtr layout() const {
        validate();
        std::vector<LayerSpan> spans;
        std::size_t off = 0;
        auto push = [&](const std::string& name, std::size_t len, std::size_t fi, std::size_t fo) {
            spans.push_back({name, off, len, fi, fo});
            off += len;
        };
        if (kind == ModelKind::logistic) {
            push("weight", num_classes * input_dim, input_dim, num_classes);
            push("bias", num_classes, input_dim, num_classes);
            return std::make_shared<const LayerLayout>(std::move(spans), 0, off);
        }
        push("hidden_weight", hidden_dim * input_dim, input_dim, hidden_dim);
        push("hidden_bias", hidden_dim, input_dim, hidden_dim);
        const std::size_t head_off = head_layers >= 2 ? 0 : off;
        push("output_weight", num_classes * hidden_dim, hidden_dim, num_classes);
        push("output_bias", num_classes, hidden_dim, num_classes);
        return std::make_shared<const LayerLayout>(std::move(spans), head_off, off - head_off);
    }

    std::size_t param_count() const {
        if (kind == ModelKind::logistic) return num_classes * (input_dim + 1);
        return hidden_dim * (input_dim + 1) + num_classes * (hidden_dim + 1);
    }
};

struct Batch {
    std::vector<double> features;  // B x input_dim, row-major
    std::vector<int> labels;       // B
    std::size_t size = 0;
    std::size_t input_dim = 0;

    const double* row(std::size_t b) const { return features.data() + b * input_dim; }
};

struct ForwardResult {
    double loss = 0.0;
    std::vector<double> logits;  // B x num_classes, row-major
};

namespace detail {

inline double activate(Activation a, double z) {
    return a == Activation::relu ? (z > 0.0 ? z : 0.0) : std::tanh(z);
}

inline double activate_grad(Activation a, double z) {
    if (a == Activation::relu) return z > 0.0 ? 1.0 : 0.0;
    const double t = std::tanh(z);
    return 1.0 - t * t;
}

inline void check_batch(const ModelSpec& spec, const ParamVector& theta, const Batch& batch) {
    if (batch.size == 0) throw std::invalid_argument("batch must be non-empty");
    if (batch.input_dim != spec.input_dim)
        throw std::invalid_argument("batch feature width does not match model input_dim");
    if (theta.size() != spec.param_count())
        throw std::invalid_argument("theta does not match model layout");
    for (std::size_t b = 0; b < batch.size; ++b) {
        const int y = batch.labels[b];
        if (y < 0 || static_cast<std::size_t>(y) >= spec.num_classes)
            throw std::invalid_argument("label out of range at batch row " + std::to_string(b));
    }
}

// logits[b] = W2 act(W1 x + b1) + b2 (or the single affine for logistic).
// hidden_pre, when requested, receives the pre-activation values.
inline void compute_logits(const ModelSpec& spec, const ParamVector& theta, const Batch& batch,
                           std::vector<double>& logits, std::vector<double>* hidden_pre) {
    const std::size_t B = batch.size, D = spec.input_dim, C = spec.num_classes;
    logits.assign(B * C, 0.0);
    if (spec.kind == ModelKind::logistic) {
        const double* W = theta.data();
        const double* bias = theta.data() + C * D;
        for (std::size_t b = 0; b < B; ++b) {
            const double* x = batch.row(b);
            for (std::size_t c = 0; c < C; ++c) {
                double z = bias[c];
                const double* wrow = W + c * D;
                for (std::size_t k = 0; k < D; ++k) z += wrow[k] * x[k];
                logits[b * C + c] = z;
            }
        }
        return;
    }
    const std::size_t H = spec.hidden_dim;
    const double* W1 = theta.data();
    const double* b1 = W1 + H * D;
    const double* W2 = b1 + H;
    const double* b2 = W2 + C * H;
    if (hidden_pre) hidden_pre->assign(B * H, 0.0);
    std::vector<double> h(H);
    for (std::size_t b = 0; b < B; ++b) {
        const double* x = batch.row(b);
        for (std::size_t j = 0; j < H; ++j) {
            double z = b1[j];
            const double* wrow = W1 + j * D;
            for (std::size_t k = 0; k < D; ++k) z += wrow[k] * x[k];
            if (hidden_pre) (*hidden_pre)[b * H + j] = z;
            h[j] = activate(spec.activation, z);
        }
        for (std::size_t c = 0; c < C; ++c) {
            double z = b2[c];
            const double* wrow = W2 + c * H;
            for (std::size_t j = 0; j < H; ++j) z += wrow[j] * h[j];
            logits[b * C + c] = z;
        }
    }
}

// Mean cross-entropy over the batch, computed via a stable log-sum-exp.
inline double mean_cross_entropy(const std::vector<double>& logits, const std::vector<int>& labels,
                                 std::size_t C) {
    const std::size_t B = labels.size();
    double total = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        const double* z = logits.data() + b * C;
        double zmax = z[0];
        for (std::size_t c = 1; c < C; ++c) zmax = std::max(zmax, z[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < C; ++c) sum += std::exp(z[c] - zmax);
        total += (zmax + std::log(sum)) - z[static_cast<std::size_t>(labels[b])];
    }
    return total / double(B);
}

}  // namespace detail

inline ForwardResult forward(const ModelSpec& spec, const ParamVector& theta, const Batch& batch) {
    detail::check_batch(spec, theta, batch);
    ForwardResult out;
    detail::compute_logits(spec, theta, batch, out.logits, nullptr);
    out.loss = detail::mean_cross_entropy(out.logits, batch.labels, spec.num_classes);
    return out;
}

// Gradient of the mean cross-entropy w.r.t. theta.
inline ParamVector grad(const ModelSpec& spec, const ParamVector& theta, const Batch& batch) {
    detail::check_batch(spec, theta, batch);
    const std::size_t B = batch.size, D = spec.input_dim, C = spec.num_classes;

    std::vector<double> logits;
    std::vector<double> hidden_pre;
    detail::compute_logits(spec, theta, batch, logits,
                           spec.kind == ModelKind::mlp ? &hidden_pre : nullptr);

    ParamVector g(theta.layout());
    std::vector<double> dz(C);
    if (spec.kind == ModelKind::logistic) {
        double* gW = g.data();
        double* gb = g.data() + C * D;
        for (std::size_t b = 0; b < B; ++b) {
            const double* z = logits.data() + b * C;
            double zmax = z[0];
            for (std::size_t c = 1; c < C; ++c) zmax = std::max(zmax, z[c]);
            double sum = 0.0;
            for (std::size_t c = 0; c < C; ++c) sum += std::exp(z[c] - zmax);
            for (std::size_t c = 0; c < C; ++c) {
                dz[c] = std::exp(z[c] - zmax) / sum;
                if (c == static_cast<std::size_t>(batch.labels[b])) dz[c] -= 1.0;
                dz[c] /= double(B);
            }
            const double* x = batch.row(b);
            for (std::size_t c = 0; c < C; ++c) {
                double* grow = gW + c * D;
                for (std::size_t k = 0; k < D; ++k) grow[k] += dz[c] * x[k];
                gb[c] += dz[c];
            }
        }
        g.ensure_finite();
        return g;
    }

    const std::size_t H = spec.hidden_dim;
    const double* W1 = theta.data();
    const double* W2 = W1 + H * D + H;
    double* gW1 = g.data();
    double* gb1 = gW1 + H * D;
    double* gW2 = gb1 + H;
    double* gb2 = gW2 + C * H;

    std::vector<double> h(H), dh(H);
    for (std::size_t b = 0; b < B; ++b) {
        const double* zpre = hidden_pre.data() + b * H;
        for (std::size_t j = 0; j < H; ++j) h[j] = detail::activate(spec.activation, zpre[j]);

        const double* z = logits.data() + b * C;
        double zmax = z[0];
        for (std::size_t c = 1; c < C; ++c) zmax = std::max(zmax, z[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < C; ++c) sum += std::exp(z[c] - zmax);
        for (std::size_t c = 0; c < C; ++c) {
            dz[c] = std::exp(z[c] - zmax) / sum;
            if (c == static_cast<std::size_t>(batch.labels[b])) dz[c] -= 1.0;
            dz[c] /= double(B);
        }

        for (std::size_t c = 0; c < C; ++c) {
            double* grow = gW2 + c * H;
            for (std::size_t j = 0; j < H; ++j) grow[j] += dz[c] * h[j];
            gb2[c] += dz[c];
        }
        for (std::size_t j = 0; j < H; ++j) {
            double acc = 0.0;
            for (std::size_t c = 0; c < C; ++c) acc += W2[c * H + j] * dz[c];
            dh[j] = acc * detail::activate_grad(spec.activation, zpre[j]);
        }
        const double* x = batch.row(b);
        for (std::size_t j = 0; j < H; ++j) {
            double* grow = gW1 + j * D;
            for (std::size_t k = 0; k < D; ++k) grow[k] += dh[j] * x[k];
            gb1[j] += dh[j];
        }
    }
    g.ensure_finite();
    return g;
}

// Fraction of rows whose argmax logit (lowest index on ties) matches the label.
inline double accuracy(const std::vector<double>& logits, const std::vector<int>& labels,
                       std::size_t C) {
    if (labels.empty()) return 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < labels.size(); ++b) {
        const double* z = logits.data() + b * C;
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c)
            if (z[c] > z[best]) best = c;
        if (best == static_cast<std::size_t>(labels[b])) ++correct;
    }
    return double(correct) / double(labels.size());
}

}  // namespace fedsim
