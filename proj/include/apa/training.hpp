// Per-shard adapter training: deterministic minibatch SGD on binary
// cross-entropy, updating only the adapter factors of a frozen base model.
// Reproducibility is load-bearing: retraining a shard from the same ordered
// sample list and config must give bit-identical parameters.
#pragma once

#include <apa/adapter.hpp>
#include <apa/dataset.hpp>
#include <apa/model.hpp>
#include <apa/numerics.hpp>

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace apa {

struct TrainConfig {
    double learning_rate = 0.05;
    std::size_t epochs = 300;
    std::size_t batch_size = 32;
    std::uint64_t seed = 1;
    double init_stddev = 0.02;
    std::size_t rank = 4;
};

inline void validate_train_config(const TrainConfig& cfg) {
    if (!(cfg.learning_rate >= 0.0) || !std::isfinite(cfg.learning_rate)) {
        throw std::invalid_argument("TrainConfig: learning_rate must be finite and >= 0");
    }
    if (cfg.batch_size == 0) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (cfg.rank == 0) throw std::invalid_argument("TrainConfig: rank must be >= 1");
    if (!(cfg.init_stddev > 0.0)) {
        throw std::invalid_argument("TrainConfig: init_stddev must be > 0");
    }
}

/// Gradient accumulators shaped like an adapter's factor matrices.
struct AdapterGrads {
    std::vector<Matrix> B;
    std::vector<Matrix> A;
};

inline AdapterGrads make_grads(const Adapter& adapter) {
    AdapterGrads g;
    g.B.reserve(adapter.layers.size());
    g.A.reserve(adapter.layers.size());
    for (const auto& layer : adapter.layers) {
        g.B.emplace_back(layer.B.rows, layer.B.cols);
        g.A.emplace_back(layer.A.rows, layer.A.cols);
    }
    return g;
}

inline void zero_grads(AdapterGrads& g) {
    for (Matrix& m : g.B) std::fill(m.data.begin(), m.data.end(), 0.0);
    for (Matrix& m : g.A) std::fill(m.data.begin(), m.data.end(), 0.0);
}

namespace detail {

inline double activation_derivative(Activation act, double activated) {
    switch (act) {
        case Activation::Tanh: return 1.0 - activated * activated;
        case Activation::Relu: return activated > 0.0 ? 1.0 : 0.0;
        case Activation::None: return 1.0;
    }
    throw std::logic_error("activation_derivative: unknown activation");
}

} // namespace detail

/// Forward + backward for one sample. Adds d bce / d (B, A) into `grads` and
/// returns the logit. The forward pass uses the same primitives as
/// model_forward, so logits agree bitwise with serving-time evaluation.
inline double accumulate_sample_grads(const BaseModel& base, const Adapter& adapter,
                                      const Vector& x, double label, AdapterGrads& grads) {
    detail::check_update_layers(base, adapter);
    detail::check_input_dim(base, x);
    const std::size_t n_layers = base.layers.size();
    const std::size_t n_hidden = base.n_hidden();

    std::vector<Vector> inputs(n_layers);   // input fed to each layer
    std::vector<Vector> mids(n_hidden);     // A_l * input, per adapted layer
    std::vector<Vector> acts(n_layers);     // post-activation outputs
    Vector h = x;
    for (std::size_t l = 0; l < n_layers; ++l) {
        const DenseLayer& layer = base.layers[l];
        inputs[l] = h;
        Vector z = matvec(layer.weight, h);
        for (std::size_t i = 0; i < z.size(); ++i) z[i] += layer.bias[i];
        if (l < n_hidden) {
            const AdapterLayer& al = adapter.layers[l];
            mids[l] = matvec(al.A, h);
            for (std::size_t i = 0; i < al.B.rows; ++i) {
                const double* row = &al.B.data[i * al.B.cols];
                double acc = 0.0;
                for (std::size_t j = 0; j < al.B.cols; ++j) acc += row[j] * mids[l][j];
                z[i] += acc;
            }
        }
        for (double& v : z) v = apply_activation(layer.act, v);
        acts[l] = z;
        h = std::move(z);
    }
    const double logit = h[0];

    // Backward: g holds d loss / d activation of the current layer.
    Vector g{bce_grad(logit, label)};
    for (std::size_t li = n_layers; li-- > 0;) {
        const DenseLayer& layer = base.layers[li];
        Vector g_z(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
            g_z[i] = g[i] * detail::activation_derivative(layer.act, acts[li][i]);
        }
        Vector g_in(layer.weight.cols, 0.0);
        for (std::size_t i = 0; i < layer.weight.rows; ++i) {
            const double gi = g_z[i];
            if (gi == 0.0) continue;
            const double* row = &layer.weight.data[i * layer.weight.cols];
            for (std::size_t j = 0; j < layer.weight.cols; ++j) g_in[j] += row[j] * gi;
        }
        if (li < n_hidden) {
            const AdapterLayer& al = adapter.layers[li];
            const std::size_t r = al.rank();
            // d/dB = g_z * mid^T
            Matrix& gb = grads.B[li];
            for (std::size_t i = 0; i < al.B.rows; ++i) {
                const double gi = g_z[i];
                double* grow = &gb.data[i * r];
                for (std::size_t j = 0; j < r; ++j) grow[j] += gi * mids[li][j];
            }
            // t = B^T g_z
            Vector t(r, 0.0);
            for (std::size_t i = 0; i < al.B.rows; ++i) {
                const double gi = g_z[i];
                if (gi == 0.0) continue;
                const double* row = &al.B.data[i * r];
                for (std::size_t j = 0; j < r; ++j) t[j] += row[j] * gi;
            }
            // d/dA = t * input^T; input gradient gains A^T t
            Matrix& ga = grads.A[li];
            const Vector& in = inputs[li];
            for (std::size_t j = 0; j < r; ++j) {
                const double tj = t[j];
                double* grow = &ga.data[j * ga.cols];
                const double* arow = &al.A.data[j * al.A.cols];
                for (std::size_t k = 0; k < ga.cols; ++k) {
                    grow[k] += tj * in[k];
                    g_in[k] += arow[k] * tj;
                }
            }
        }
        g = std::move(g_in);
    }
    return logit;
}

/// Mean binary cross-entropy of (base + adapter) over a dataset.
inline double dataset_loss(const BaseModel& base, const Adapter& adapter, const Dataset& data) {
    if (data.samples.empty()) throw std::invalid_argument("dataset_loss: empty dataset");
    double total = 0.0;
    for (const auto& s : data.samples) {
        total += bce_loss(model_forward(base, adapter, s.features), s.label);
    }
    return total / static_cast<double>(data.samples.size());
}

/// The adapter training starts from under cfg: A drawn from
/// derive_seed(cfg.seed, 0), B zero.
inline Adapter initial_adapter(const BaseModel& base, const TrainConfig& cfg) {
    validate_train_config(cfg);
    return init_adapter(base.adapted_shapes(), cfg.rank, cfg.init_stddev,
                        derive_seed(cfg.seed, 0));
}

/// Minibatch SGD over the shard. Deterministic: initialization comes from
/// derive_seed(cfg.seed, 0), shuffling from derive_seed(cfg.seed, 1), and all
/// accumulation runs single-threaded in fixed order, so the result is a pure
/// function of (base, sample order, cfg).
inline Adapter train_shard(const BaseModel& base, const Dataset& shard_data,
                           const TrainConfig& cfg) {
    validate_train_config(cfg);
    if (shard_data.samples.empty()) throw std::invalid_argument("train_shard: empty shard");
    if (shard_data.dim != base.d_in) {
        throw std::invalid_argument("train_shard: data dim " + std::to_string(shard_data.dim) +
                                    " does not match base d_in " + std::to_string(base.d_in));
    }
    Adapter adapter = initial_adapter(base, cfg);
    const std::size_t n = shard_data.samples.size();
    SeededRng shuffle_rng(derive_seed(cfg.seed, 1));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    AdapterGrads grads = make_grads(adapter);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = n; i > 1; --i) {
            const std::size_t j = shuffle_rng.next_below(i);
            std::swap(order[i - 1], order[j]);
        }
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t end = std::min(start + cfg.batch_size, n);
            zero_grads(grads);
            for (std::size_t b = start; b < end; ++b) {
                const InstructionSample& s = shard_data.samples[order[b]];
                accumulate_sample_grads(base, adapter, s.features, s.label, grads);
            }
            const double scale = cfg.learning_rate / static_cast<double>(end - start);
            for (std::size_t l = 0; l < adapter.layers.size(); ++l) {
                Matrix& b = adapter.layers[l].B;
                Matrix& a = adapter.layers[l].A;
                for (std::size_t i = 0; i < b.data.size(); ++i) {
                    b.data[i] -= scale * grads.B[l].data[i];
                }
                for (std::size_t i = 0; i < a.data.size(); ++i) {
                    a.data[i] -= scale * grads.A[l].data[i];
                }
            }
        }
    }
    return adapter;
}

/// Worst relative error between analytic adapter gradients and central finite
/// differences, over at least 20 randomly chosen factor-matrix coordinates.
inline double grad_check(const BaseModel& base, const Adapter& adapter,
                         const InstructionSample& sample, double h) {
    if (!(h >= 1e-7 && h <= 1e-3)) {
        throw std::invalid_argument("grad_check: step size out of [1e-7, 1e-3]");
    }
    AdapterGrads grads = make_grads(adapter);
    accumulate_sample_grads(base, adapter, sample.features, sample.label, grads);

    struct Coord {
        std::size_t layer;
        bool in_b;
        std::size_t idx;
    };
    std::vector<Coord> all;
    for (std::size_t l = 0; l < adapter.layers.size(); ++l) {
        for (std::size_t i = 0; i < adapter.layers[l].B.data.size(); ++i) {
            all.push_back({l, true, i});
        }
        for (std::size_t i = 0; i < adapter.layers[l].A.data.size(); ++i) {
            all.push_back({l, false, i});
        }
    }
    SeededRng rng(0xC0FFEEULL);
    const std::size_t n_checks = std::min<std::size_t>(std::max<std::size_t>(20, 1), all.size());
    for (std::size_t i = all.size(); i > 1; --i) {
        std::swap(all[i - 1], all[rng.next_below(i)]);
    }

    Adapter probe = adapter;
    double worst = 0.0;
    for (std::size_t c = 0; c < n_checks; ++c) {
        const Coord& coord = all[c];
        double& slot = coord.in_b ? probe.layers[coord.layer].B.data[coord.idx]
                                  : probe.layers[coord.layer].A.data[coord.idx];
        const double saved = slot;
        slot = saved + h;
        const double up = bce_loss(model_forward(base, probe, sample.features), sample.label);
        slot = saved - h;
        const double down = bce_loss(model_forward(base, probe, sample.features), sample.label);
        slot = saved;
        const double numeric = (up - down) / (2.0 * h);
        const double analytic = coord.in_b ? grads.B[coord.layer].data[coord.idx]
                                           : grads.A[coord.layer].data[coord.idx];
        const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
        worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
    return worst;
}

} // namespace apa
