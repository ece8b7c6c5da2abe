// Sample-adaptive aggregation weights: each query's nearest validation
// neighbors score every adapter through a precomputed loss cache, and a
// softmax over the negated mean losses yields the mixing weights. The cache
// is the only mutable serving-side state; staleness is a hard error.
#pragma once

#include <apa/adapter.hpp>
#include <apa/dataset.hpp>
#include <apa/model.hpp>
#include <apa/numerics.hpp>
#include <apa/partition.hpp>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

namespace apa {

enum class AggregationLevel { Decomposition, NonDecomposition, Concat };

struct AggregationConfig {
    double tau = 1000.0;
    std::size_t n_neighbors = 20;
    AggregationLevel level = AggregationLevel::Decomposition;
};

/// Per-adapter, per-validation-sample binary cross-entropy. Row k belongs to
/// adapter k; a dirty row means adapter k changed after the row was filled.
struct ValidationCache {
    Matrix loss;  // K x |valid|
    std::vector<SampleId> valid_ids;
    std::vector<std::uint8_t> dirty;

    std::size_t n_adapters() const { return loss.rows; }
    std::size_t n_valid() const { return loss.cols; }

    std::vector<double> row(std::size_t k) const {
        return std::vector<double>(loss.data.begin() + static_cast<std::ptrdiff_t>(k * loss.cols),
                                   loss.data.begin() +
                                       static_cast<std::ptrdiff_t>((k + 1) * loss.cols));
    }
};

struct NeighborSet {
    std::vector<SampleId> ids;          // descending similarity, ties by ascending id
    std::vector<std::size_t> indices;   // parallel cache column indices
};

namespace detail {

inline void fill_cache_row(ValidationCache& cache, std::size_t k, const BaseModel& base,
                           const Adapter& adapter, const Dataset& valid) {
    for (std::size_t i = 0; i < valid.samples.size(); ++i) {
        const InstructionSample& s = valid.samples[i];
        cache.loss(k, i) = bce_loss(model_forward(base, adapter, s.features), s.label);
    }
}

} // namespace detail

inline ValidationCache build_cache(const BaseModel& base, const std::vector<Adapter>& adapters,
                                   const Dataset& valid) {
    if (adapters.empty()) throw std::invalid_argument("build_cache: no adapters");
    if (valid.samples.empty()) throw std::invalid_argument("build_cache: empty validation set");
    ValidationCache cache;
    cache.loss = Matrix(adapters.size(), valid.samples.size());
    cache.valid_ids.reserve(valid.samples.size());
    for (const auto& s : valid.samples) cache.valid_ids.push_back(s.id);
    cache.dirty.assign(adapters.size(), 0);
    for (std::size_t k = 0; k < adapters.size(); ++k) {
        detail::fill_cache_row(cache, k, base, adapters[k], valid);
    }
    return cache;
}

inline void mark_dirty(ValidationCache& cache, std::size_t k) {
    if (k >= cache.n_adapters()) throw std::invalid_argument("mark_dirty: row out of range");
    cache.dirty[k] = 1;
}

/// Recompute row k for a (possibly retrained) adapter. Rows other than k are
/// untouched.
inline void refresh_row(ValidationCache& cache, std::size_t k, const BaseModel& base,
                        const Adapter& adapter, const Dataset& valid) {
    if (k >= cache.n_adapters()) throw std::invalid_argument("refresh_row: row out of range");
    if (valid.samples.size() != cache.n_valid()) {
        throw std::invalid_argument("refresh_row: validation set size changed");
    }
    for (std::size_t i = 0; i < valid.samples.size(); ++i) {
        if (valid.samples[i].id != cache.valid_ids[i]) {
            throw std::invalid_argument("refresh_row: validation ids changed");
        }
    }
    detail::fill_cache_row(cache, k, base, adapter, valid);
    cache.dirty[k] = 0;
}

/// Top-n validation samples by cosine similarity to the query embedding.
/// n larger than the pool clamps with a warning; tiny validation sets would
/// otherwise be unusable with the stock neighbor counts.
inline NeighborSet neighbors(const Vector& query_emb,
                             const std::vector<EmbeddedSample>& valid_embs, std::size_t n) {
    if (n == 0) throw std::invalid_argument("neighbors: n must be >= 1");
    if (valid_embs.empty()) throw std::invalid_argument("neighbors: no validation embeddings");
    if (n > valid_embs.size()) {
        std::cerr << "[apa] warning: neighbor count " << n << " clamped to validation size "
                  << valid_embs.size() << "\n";
        n = valid_embs.size();
    }
    struct Scored {
        double cos;
        SampleId id;
        std::size_t index;
    };
    std::vector<Scored> scored;
    scored.reserve(valid_embs.size());
    for (std::size_t i = 0; i < valid_embs.size(); ++i) {
        scored.push_back({cosine_similarity(query_emb, valid_embs[i].embedding),
                          valid_embs[i].id, i});
    }
    std::sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
        if (a.cos != b.cos) return a.cos > b.cos;
        return a.id < b.id;
    });
    NeighborSet out;
    out.ids.reserve(n);
    out.indices.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.ids.push_back(scored[i].id);
        out.indices.push_back(scored[i].index);
    }
    return out;
}

/// Mean cached loss of every adapter over the neighbor set. Refuses to read
/// stale rows: silently serving weights from an outdated cache would defeat
/// the point of retraining.
inline Vector adapter_errors(const ValidationCache& cache, const NeighborSet& nbrs) {
    if (nbrs.indices.empty()) throw std::invalid_argument("adapter_errors: empty neighbor set");
    for (std::size_t k = 0; k < cache.n_adapters(); ++k) {
        if (cache.dirty[k]) {
            throw invariant_error("adapter_errors: cache row " + std::to_string(k) +
                                  " is stale; refresh it before serving");
        }
    }
    for (std::size_t idx : nbrs.indices) {
        if (idx >= cache.n_valid()) {
            throw std::invalid_argument("adapter_errors: neighbor index out of range");
        }
    }
    Vector errors(cache.n_adapters(), 0.0);
    for (std::size_t k = 0; k < cache.n_adapters(); ++k) {
        double total = 0.0;
        for (std::size_t idx : nbrs.indices) total += cache.loss(k, idx);
        errors[k] = total / static_cast<double>(nbrs.indices.size());
    }
    return errors;
}

/// Softmax attention over negated errors: lower validation loss, higher
/// weight. tau = 0 gives exactly uniform weights.
inline WeightVector attention_weights(const Vector& errors, double tau) {
    Vector scores(errors.size());
    for (std::size_t i = 0; i < errors.size(); ++i) scores[i] = -errors[i];
    return make_weights(softmax_stable(scores, tau));
}

// ---------------------------------------------------------------------------
// Serialization: raw little-endian doubles, same rationale as adapters;
// restart must reproduce serving results bit-exactly.
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr char kCacheMagic[4] = {'A', 'P', 'C', '1'};

} // namespace detail

inline void save_cache(const ValidationCache& cache, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_cache: cannot open " + path);
    out.write(detail::kCacheMagic, 4);
    detail::write_pod(out, static_cast<std::uint64_t>(cache.n_adapters()));
    detail::write_pod(out, static_cast<std::uint64_t>(cache.n_valid()));
    out.write(reinterpret_cast<const char*>(cache.valid_ids.data()),
              static_cast<std::streamsize>(cache.valid_ids.size() * sizeof(SampleId)));
    out.write(reinterpret_cast<const char*>(cache.dirty.data()),
              static_cast<std::streamsize>(cache.dirty.size()));
    out.write(reinterpret_cast<const char*>(cache.loss.data.data()),
              static_cast<std::streamsize>(cache.loss.data.size() * sizeof(double)));
    if (!out) throw std::runtime_error("save_cache: write failed for " + path);
}

inline ValidationCache load_cache(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_cache: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, detail::kCacheMagic, 4) != 0) {
        throw std::runtime_error("load_cache: " + path + " is not a cache artifact");
    }
    std::uint64_t k = 0, v = 0;
    detail::read_pod(in, k);
    detail::read_pod(in, v);
    ValidationCache cache;
    cache.loss = Matrix(k, v);
    cache.valid_ids.resize(v);
    cache.dirty.resize(k);
    in.read(reinterpret_cast<char*>(cache.valid_ids.data()),
            static_cast<std::streamsize>(v * sizeof(SampleId)));
    in.read(reinterpret_cast<char*>(cache.dirty.data()), static_cast<std::streamsize>(k));
    in.read(reinterpret_cast<char*>(cache.loss.data.data()),
            static_cast<std::streamsize>(cache.loss.data.size() * sizeof(double)));
    if (!in) throw std::runtime_error("load_cache: " + path + " truncated");
    return cache;
}

} // namespace apa
