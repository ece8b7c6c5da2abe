// Frozen base network: a small dense feed-forward scorer with one logit
// output. Base weights never change after construction; all learning happens
// in adapters attached to the hidden layers.
#pragma once

#include <apa/adapter.hpp>
#include <apa/numerics.hpp>

#include <cmath>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace apa {

enum class Activation { Tanh, Relu, None };

inline double apply_activation(Activation act, double z) {
    switch (act) {
        case Activation::Tanh: return std::tanh(z);
        case Activation::Relu: return z > 0.0 ? z : 0.0;
        case Activation::None: return z;
    }
    throw std::logic_error("apply_activation: unknown activation");
}

struct DenseLayer {
    Matrix weight;  // out x in
    Vector bias;    // out
    Activation act = Activation::None;
};

/// Hidden layers carry adapters; the final width->1 logit layer stays bare
/// (its min dimension is 1, below any useful adapter rank).
struct BaseModel {
    std::vector<DenseLayer> layers;
    std::size_t d_in = 0;

    std::size_t n_hidden() const { return layers.empty() ? 0 : layers.size() - 1; }

    std::vector<std::pair<std::size_t, std::size_t>> adapted_shapes() const {
        std::vector<std::pair<std::size_t, std::size_t>> shapes;
        shapes.reserve(n_hidden());
        for (std::size_t l = 0; l < n_hidden(); ++l) {
            shapes.emplace_back(layers[l].weight.rows, layers[l].weight.cols);
        }
        return shapes;
    }
};

struct BaseConfig {
    std::size_t d_in = 32;
    std::size_t hidden_width = 32;
    std::size_t hidden_layers = 2;
    std::uint64_t seed = 1;
};

/// Weights ~ N(0, 1/fan_in) and biases ~ N(0, 0.04), drawn layer by layer
/// from a single stream so the whole network is a function of cfg.seed.
inline BaseModel make_base_model(const BaseConfig& cfg) {
    if (cfg.d_in == 0 || cfg.hidden_width == 0) {
        throw std::invalid_argument("make_base_model: zero dimension");
    }
    if (cfg.hidden_layers == 0) {
        throw std::invalid_argument("make_base_model: need at least one hidden layer");
    }
    BaseModel base;
    base.d_in = cfg.d_in;
    SeededRng rng(cfg.seed);
    std::size_t in_dim = cfg.d_in;
    for (std::size_t l = 0; l < cfg.hidden_layers; ++l) {
        DenseLayer layer;
        layer.weight = gaussian_matrix(cfg.hidden_width, in_dim,
                                       1.0 / std::sqrt(static_cast<double>(in_dim)), rng);
        layer.bias = gaussian_vector(cfg.hidden_width, 0.2, rng);
        layer.act = Activation::Tanh;
        base.layers.push_back(std::move(layer));
        in_dim = cfg.hidden_width;
    }
    DenseLayer head;
    head.weight = gaussian_matrix(1, in_dim, 1.0 / std::sqrt(static_cast<double>(in_dim)), rng);
    head.bias = gaussian_vector(1, 0.2, rng);
    head.act = Activation::None;
    base.layers.push_back(std::move(head));
    return base;
}

namespace detail {

inline void check_input_dim(const BaseModel& base, const Vector& x) {
    if (x.size() != base.d_in) {
        throw std::invalid_argument("model_forward: input size " + std::to_string(x.size()) +
                                    " does not match d_in " + std::to_string(base.d_in));
    }
}

// Per-update-kind hook adding the hidden layer l update to the preactivation.
struct NoUpdate {};

inline void add_update(const NoUpdate&, std::size_t, const Vector&, Vector&) {}

inline void add_update(const Adapter& adapter, std::size_t l, const Vector& x, Vector& z) {
    const AdapterLayer& layer = adapter.layers[l];
    const Vector mid = matvec(layer.A, x);
    for (std::size_t i = 0; i < layer.B.rows; ++i) {
        const double* row = &layer.B.data[i * layer.B.cols];
        double acc = 0.0;
        for (std::size_t j = 0; j < layer.B.cols; ++j) acc += row[j] * mid[j];
        z[i] += acc;
    }
}

inline void add_update(const MergedDense& merged, std::size_t l, const Vector& x, Vector& z) {
    const Matrix& delta = merged.deltas[l];
    for (std::size_t i = 0; i < delta.rows; ++i) {
        const double* row = &delta.data[i * delta.cols];
        double acc = 0.0;
        for (std::size_t j = 0; j < delta.cols; ++j) acc += row[j] * x[j];
        z[i] += acc;
    }
}

template <typename Update>
double forward_impl(const BaseModel& base, const Update& update, const Vector& x) {
    check_input_dim(base, x);
    Vector h = x;
    for (std::size_t l = 0; l < base.layers.size(); ++l) {
        const DenseLayer& layer = base.layers[l];
        Vector z = matvec(layer.weight, h);
        for (std::size_t i = 0; i < z.size(); ++i) z[i] += layer.bias[i];
        if (l < base.n_hidden()) add_update(update, l, h, z);
        for (double& v : z) v = apply_activation(layer.act, v);
        h = std::move(z);
    }
    return h[0];
}

template <typename Update>
void check_update_layers(const BaseModel& base, const Update& update) {
    std::size_t got;
    if constexpr (std::is_same_v<Update, Adapter>) {
        got = update.layers.size();
    } else {
        got = update.deltas.size();
    }
    if (got != base.n_hidden()) {
        throw std::invalid_argument("model_forward: update covers " + std::to_string(got) +
                                    " layers, base has " + std::to_string(base.n_hidden()) +
                                    " hidden layers");
    }
}

} // namespace detail

inline double model_forward(const BaseModel& base, const Vector& x) {
    return detail::forward_impl(base, detail::NoUpdate{}, x);
}

inline double model_forward(const BaseModel& base, const Adapter& adapter, const Vector& x) {
    detail::check_update_layers(base, adapter);
    return detail::forward_impl(base, adapter, x);
}

inline double model_forward(const BaseModel& base, const MergedDense& merged, const Vector& x) {
    detail::check_update_layers(base, merged);
    return detail::forward_impl(base, merged, x);
}

/// Activation of the last hidden layer under the bare base model. Serves as
/// the sample embedding for partitioning and neighbor search.
inline Vector hidden_representation(const BaseModel& base, const Vector& x) {
    detail::check_input_dim(base, x);
    Vector h = x;
    for (std::size_t l = 0; l < base.n_hidden(); ++l) {
        const DenseLayer& layer = base.layers[l];
        Vector z = matvec(layer.weight, h);
        for (std::size_t i = 0; i < z.size(); ++i) z[i] += layer.bias[i];
        for (double& v : z) v = apply_activation(layer.act, v);
        h = std::move(z);
    }
    return h;
}

// Binary artifact for the frozen base weights: retraining after a restart
// must see bit-identical parameters, so doubles are stored raw.
namespace detail {

inline constexpr char kBaseMagic[4] = {'A', 'P', 'B', '1'};

} // namespace detail

inline void save_base_model(const BaseModel& base, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_base_model: cannot open " + path);
    out.write(detail::kBaseMagic, 4);
    detail::write_pod(out, static_cast<std::uint64_t>(base.d_in));
    detail::write_pod(out, static_cast<std::uint64_t>(base.layers.size()));
    for (const auto& layer : base.layers) {
        detail::write_pod(out, static_cast<std::uint64_t>(layer.weight.rows));
        detail::write_pod(out, static_cast<std::uint64_t>(layer.weight.cols));
        detail::write_pod(out, static_cast<std::uint8_t>(layer.act));
        out.write(reinterpret_cast<const char*>(layer.weight.data.data()),
                  static_cast<std::streamsize>(layer.weight.data.size() * sizeof(double)));
        out.write(reinterpret_cast<const char*>(layer.bias.data()),
                  static_cast<std::streamsize>(layer.bias.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("save_base_model: write failed for " + path);
}

inline BaseModel load_base_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_base_model: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, detail::kBaseMagic, 4) != 0) {
        throw std::runtime_error("load_base_model: " + path + " is not a base-model artifact");
    }
    BaseModel base;
    std::uint64_t d_in = 0, n_layers = 0;
    detail::read_pod(in, d_in);
    detail::read_pod(in, n_layers);
    base.d_in = d_in;
    base.layers.resize(n_layers);
    for (auto& layer : base.layers) {
        std::uint64_t rows = 0, cols = 0;
        std::uint8_t act = 0;
        detail::read_pod(in, rows);
        detail::read_pod(in, cols);
        detail::read_pod(in, act);
        if (act > static_cast<std::uint8_t>(Activation::None)) {
            throw std::runtime_error("load_base_model: unknown activation code");
        }
        layer.act = static_cast<Activation>(act);
        layer.weight = Matrix(rows, cols);
        layer.bias.resize(rows);
        in.read(reinterpret_cast<char*>(layer.weight.data.data()),
                static_cast<std::streamsize>(layer.weight.data.size() * sizeof(double)));
        in.read(reinterpret_cast<char*>(layer.bias.data()),
                static_cast<std::streamsize>(layer.bias.size() * sizeof(double)));
        if (!in) throw std::runtime_error("load_base_model: " + path + " truncated");
    }
    return base;
}

inline double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

/// Binary cross-entropy from the logit, in the overflow-safe form
/// max(z,0) - z*y + log(1 + exp(-|z|)).
inline double bce_loss(double logit, double label) {
    if (!std::isfinite(logit)) throw std::invalid_argument("bce_loss: non-finite logit");
    return std::max(logit, 0.0) - logit * label + std::log1p(std::exp(-std::abs(logit)));
}

/// d bce / d logit.
inline double bce_grad(double logit, double label) { return sigmoid(logit) - label; }

} // namespace apa
