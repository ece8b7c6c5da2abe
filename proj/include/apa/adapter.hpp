// Low-rank adapters: the (B, A) rank-decomposition pair per adapted base
// layer, zero-update initialization, bottleneck forward, and the three
// parameter-level aggregation schemes used at serving time.
#pragma once

#include <apa/numerics.hpp>

#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

namespace apa {

/// Marker for adapters that are the result of aggregation rather than
/// per-shard training.
inline constexpr int kAggregatedShard = -1;

/// One rank-r update pair attached to a d1 x d2 base weight:
/// B is d1 x r, A is r x d2, and the layer update is B*A.
struct AdapterLayer {
    Matrix B;
    Matrix A;

    std::size_t rank() const { return B.cols; }
    std::size_t d1() const { return B.rows; }
    std::size_t d2() const { return A.cols; }
};

/// One adapter per shard: an AdapterLayer for every adapted base layer.
struct Adapter {
    std::vector<AdapterLayer> layers;
    int shard = kAggregatedShard;
    std::uint64_t seed = 0;
};

/// Dense per-layer update matrices (the non-decomposition aggregation result,
/// which is not rank-r in general).
struct MergedDense {
    std::vector<Matrix> deltas;  // one d1 x d2 matrix per adapted layer
};

/// Convex aggregation weights: nonnegative, summing to 1 within 1e-12.
struct WeightVector {
    Vector w;

    std::size_t size() const { return w.size(); }
    double operator[](std::size_t k) const { return w[k]; }
};

inline WeightVector make_weights(Vector w) {
    if (w.empty()) throw std::invalid_argument("make_weights: empty weight vector");
    double sum = 0.0;
    for (double x : w) {
        if (!(x >= 0.0)) throw std::invalid_argument("make_weights: negative weight");
        sum += x;
    }
    if (std::abs(sum - 1.0) > 1e-12) {
        throw std::invalid_argument("make_weights: weights sum to " + std::to_string(sum));
    }
    return WeightVector{std::move(w)};
}

inline bool bitwise_equal(const Adapter& a, const Adapter& b) {
    if (a.layers.size() != b.layers.size()) return false;
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
        if (!bitwise_equal(a.layers[l].B, b.layers[l].B)) return false;
        if (!bitwise_equal(a.layers[l].A, b.layers[l].A)) return false;
    }
    return true;
}

/// Largest absolute elementwise difference across all layer parameters.
inline double max_param_deviation(const Adapter& a, const Adapter& b) {
    if (a.layers.size() != b.layers.size()) {
        throw std::invalid_argument("max_param_deviation: layer count mismatch");
    }
    double worst = 0.0;
    auto scan = [&worst](const Matrix& x, const Matrix& y) {
        if (!x.same_shape(y)) throw std::invalid_argument("max_param_deviation: shape mismatch");
        for (std::size_t i = 0; i < x.data.size(); ++i) {
            worst = std::max(worst, std::abs(x.data[i] - y.data[i]));
        }
    };
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
        scan(a.layers[l].B, b.layers[l].B);
        scan(a.layers[l].A, b.layers[l].A);
    }
    return worst;
}

/// A gets random Gaussian entries, B starts at zero, so the initial update
/// B*A is zero and a freshly initialized adapter leaves the base model's
/// function unchanged.
inline Adapter init_adapter(const std::vector<std::pair<std::size_t, std::size_t>>& base_shapes,
                            std::size_t rank, double init_stddev, std::uint64_t seed) {
    if (rank == 0) throw std::invalid_argument("init_adapter: rank must be >= 1");
    Adapter adapter;
    adapter.seed = seed;
    SeededRng rng(seed);
    adapter.layers.reserve(base_shapes.size());
    for (const auto& [d1, d2] : base_shapes) {
        if (rank > std::min(d1, d2)) {
            throw std::invalid_argument("init_adapter: rank " + std::to_string(rank) +
                                        " exceeds min(" + std::to_string(d1) + "," +
                                        std::to_string(d2) + ")");
        }
        AdapterLayer layer;
        layer.B = Matrix(d1, rank);
        layer.A = gaussian_matrix(rank, d2, init_stddev, rng);
        adapter.layers.push_back(std::move(layer));
    }
    return adapter;
}

/// o = W0*x + B*(A*x). The product B*A is never materialized on the forward
/// path; the update goes through the rank-r bottleneck.
inline Vector layer_forward(const Matrix& w0, const AdapterLayer& layer, const Vector& x) {
    if (w0.rows != layer.d1() || w0.cols != layer.d2()) {
        throw std::invalid_argument("layer_forward: adapter " + std::to_string(layer.d1()) +
                                    "x" + std::to_string(layer.d2()) +
                                    " does not match base " + shape_str(w0));
    }
    Vector out = matvec(w0, x);
    const Vector mid = matvec(layer.A, x);
    for (std::size_t i = 0; i < layer.B.rows; ++i) {
        const double* row = &layer.B.data[i * layer.B.cols];
        double acc = 0.0;
        for (std::size_t j = 0; j < layer.B.cols; ++j) acc += row[j] * mid[j];
        out[i] += acc;
    }
    return out;
}

namespace detail {

inline void check_aggregation_inputs(const std::vector<Adapter>& adapters,
                                     const WeightVector& weights) {
    if (adapters.empty()) throw std::invalid_argument("aggregate: no adapters");
    if (weights.size() != adapters.size()) {
        throw std::invalid_argument("aggregate: " + std::to_string(weights.size()) +
                                    " weights for " + std::to_string(adapters.size()) +
                                    " adapters");
    }
    const Adapter& first = adapters.front();
    for (const Adapter& a : adapters) {
        if (a.layers.size() != first.layers.size()) {
            throw std::invalid_argument("aggregate: adapters disagree on layer count");
        }
        for (std::size_t l = 0; l < a.layers.size(); ++l) {
            if (!a.layers[l].B.same_shape(first.layers[l].B) ||
                !a.layers[l].A.same_shape(first.layers[l].A)) {
                throw std::invalid_argument("aggregate: adapters disagree on layer shapes");
            }
        }
    }
}

} // namespace detail

/// Decomposition-level aggregation: per-layer weighted sums of the B's and of
/// the A's independently. The result stays rank-r.
inline void aggregate_decomposition_into(const std::vector<Adapter>& adapters,
                                         const WeightVector& weights, Adapter& out) {
    detail::check_aggregation_inputs(adapters, weights);
    const std::size_t n_layers = adapters.front().layers.size();
    out.shard = kAggregatedShard;
    out.seed = 0;
    out.layers.resize(n_layers);
    for (std::size_t l = 0; l < n_layers; ++l) {
        const auto& proto = adapters.front().layers[l];
        AdapterLayer& dst = out.layers[l];
        dst.B.rows = proto.B.rows; dst.B.cols = proto.B.cols;
        dst.A.rows = proto.A.rows; dst.A.cols = proto.A.cols;
        dst.B.data.assign(proto.B.data.size(), 0.0);
        dst.A.data.assign(proto.A.data.size(), 0.0);
        for (std::size_t k = 0; k < adapters.size(); ++k) {
            const double w = weights[k];
            const auto& src = adapters[k].layers[l];
            for (std::size_t i = 0; i < src.B.data.size(); ++i) dst.B.data[i] += w * src.B.data[i];
            for (std::size_t i = 0; i < src.A.data.size(); ++i) dst.A.data[i] += w * src.A.data[i];
        }
    }
}

inline Adapter aggregate_decomposition(const std::vector<Adapter>& adapters,
                                       const WeightVector& weights) {
    Adapter out;
    aggregate_decomposition_into(adapters, weights, out);
    return out;
}

/// Non-decomposition-level aggregation: the weighted sum of the products
/// B_k*A_k, one dense d1 x d2 update per layer.
inline void aggregate_nondecomposition_into(const std::vector<Adapter>& adapters,
                                            const WeightVector& weights, MergedDense& out) {
    detail::check_aggregation_inputs(adapters, weights);
    const std::size_t n_layers = adapters.front().layers.size();
    out.deltas.resize(n_layers);
    for (std::size_t l = 0; l < n_layers; ++l) {
        const auto& proto = adapters.front().layers[l];
        Matrix& delta = out.deltas[l];
        delta.rows = proto.d1(); delta.cols = proto.d2();
        delta.data.assign(proto.d1() * proto.d2(), 0.0);
        for (std::size_t k = 0; k < adapters.size(); ++k) {
            const double w = weights[k];
            const Matrix& b = adapters[k].layers[l].B;
            const Matrix& a = adapters[k].layers[l].A;
            for (std::size_t i = 0; i < b.rows; ++i) {
                double* drow = &delta.data[i * delta.cols];
                for (std::size_t r = 0; r < b.cols; ++r) {
                    const double wb = w * b(i, r);
                    if (wb == 0.0) continue;
                    const double* arow = &a.data[r * a.cols];
                    for (std::size_t j = 0; j < a.cols; ++j) drow[j] += wb * arow[j];
                }
            }
        }
    }
}

inline MergedDense aggregate_nondecomposition(const std::vector<Adapter>& adapters,
                                              const WeightVector& weights) {
    MergedDense out;
    aggregate_nondecomposition_into(adapters, weights, out);
    return out;
}

/// Concatenation aggregation: B' = [w_1 B_1 ... w_K B_K] horizontally,
/// A' = the A_k stacked vertically. The rank-K*r result computes the same
/// forward output as the non-decomposition form, without densifying.
inline void aggregate_concat_into(const std::vector<Adapter>& adapters,
                                  const WeightVector& weights, Adapter& out) {
    detail::check_aggregation_inputs(adapters, weights);
    const std::size_t n_adapters = adapters.size();
    const std::size_t n_layers = adapters.front().layers.size();
    out.shard = kAggregatedShard;
    out.seed = 0;
    out.layers.resize(n_layers);
    for (std::size_t l = 0; l < n_layers; ++l) {
        const auto& proto = adapters.front().layers[l];
        const std::size_t r = proto.rank();
        const std::size_t big_rank = n_adapters * r;
        AdapterLayer& dst = out.layers[l];
        dst.B.rows = proto.d1(); dst.B.cols = big_rank;
        dst.A.rows = big_rank;   dst.A.cols = proto.d2();
        dst.B.data.assign(dst.B.rows * dst.B.cols, 0.0);
        dst.A.data.assign(dst.A.rows * dst.A.cols, 0.0);
        for (std::size_t k = 0; k < n_adapters; ++k) {
            const double w = weights[k];
            const Matrix& b = adapters[k].layers[l].B;
            const Matrix& a = adapters[k].layers[l].A;
            for (std::size_t i = 0; i < b.rows; ++i) {
                for (std::size_t j = 0; j < r; ++j) {
                    dst.B(i, k * r + j) = w * b(i, j);
                }
            }
            std::copy(a.data.begin(), a.data.end(), dst.A.data.begin() + k * r * a.cols);
        }
    }
}

inline Adapter aggregate_concat(const std::vector<Adapter>& adapters,
                                const WeightVector& weights) {
    Adapter out;
    aggregate_concat_into(adapters, weights, out);
    return out;
}

// ---------------------------------------------------------------------------
// Serialization. Binary, raw little-endian doubles: exact-unlearning
// comparisons load adapters from disk and expect bit-exact round-trips.
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr char kAdapterMagic[4] = {'A', 'P', 'A', '1'};

template <typename T>
void write_pod(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::istream& in, T& v) {
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw std::runtime_error("adapter artifact truncated");
}

} // namespace detail

inline void save_adapter(const Adapter& adapter, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_adapter: cannot open " + path);
    out.write(detail::kAdapterMagic, 4);
    detail::write_pod(out, static_cast<std::int64_t>(adapter.shard));
    detail::write_pod(out, adapter.seed);
    detail::write_pod(out, static_cast<std::uint64_t>(adapter.layers.size()));
    for (const auto& layer : adapter.layers) {
        detail::write_pod(out, static_cast<std::uint64_t>(layer.d1()));
        detail::write_pod(out, static_cast<std::uint64_t>(layer.rank()));
        detail::write_pod(out, static_cast<std::uint64_t>(layer.d2()));
        out.write(reinterpret_cast<const char*>(layer.B.data.data()),
                  static_cast<std::streamsize>(layer.B.data.size() * sizeof(double)));
        out.write(reinterpret_cast<const char*>(layer.A.data.data()),
                  static_cast<std::streamsize>(layer.A.data.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("save_adapter: write failed for " + path);
}

inline Adapter load_adapter(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_adapter: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, detail::kAdapterMagic, 4) != 0) {
        throw std::runtime_error("load_adapter: " + path + " is not an adapter artifact");
    }
    Adapter adapter;
    std::int64_t shard = 0;
    detail::read_pod(in, shard);
    adapter.shard = static_cast<int>(shard);
    detail::read_pod(in, adapter.seed);
    std::uint64_t n_layers = 0;
    detail::read_pod(in, n_layers);
    adapter.layers.resize(n_layers);
    for (auto& layer : adapter.layers) {
        std::uint64_t d1 = 0, r = 0, d2 = 0;
        detail::read_pod(in, d1);
        detail::read_pod(in, r);
        detail::read_pod(in, d2);
        layer.B = Matrix(d1, r);
        layer.A = Matrix(r, d2);
        in.read(reinterpret_cast<char*>(layer.B.data.data()),
                static_cast<std::streamsize>(layer.B.data.size() * sizeof(double)));
        in.read(reinterpret_cast<char*>(layer.A.data.data()),
                static_cast<std::streamsize>(layer.A.data.size() * sizeof(double)));
        if (!in) throw std::runtime_error("load_adapter: " + path + " truncated");
    }
    return adapter;
}

} // namespace apa
