// Balanced semantic partitioning: embed samples with the frozen base
// network, cluster the embeddings, then assign samples to capacity-bounded
// shards by ascending cosine distance. The sweep is fully deterministic; the
// exact-unlearning guarantee depends on reproducing shard membership.
#pragma once

#include <apa/dataset.hpp>
#include <apa/model.hpp>
#include <apa/numerics.hpp>

#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <tuple>
#include <vector>

namespace apa {

struct EmbeddedSample {
    SampleId id = 0;
    Vector embedding;
};

struct ClusterCenters {
    std::vector<Vector> centers;

    std::size_t k() const { return centers.size(); }
};

/// shard_members holds each shard's sample ids in dataset order (the order
/// the embedding list was supplied in), so shard contents, and therefore
/// retraining inputs, are reproducible from shard_of alone.
struct ShardAssignment {
    std::size_t k = 0;
    std::size_t capacity = 0;
    std::map<SampleId, int> shard_of;
    std::vector<std::vector<SampleId>> shard_members;
    ClusterCenters centers;
};

inline EmbeddedSample embed(const BaseModel& base, const InstructionSample& s) {
    return EmbeddedSample{s.id, hidden_representation(base, s.features)};
}

inline std::vector<EmbeddedSample> embed_dataset(const BaseModel& base, const Dataset& data) {
    std::vector<EmbeddedSample> out;
    out.reserve(data.samples.size());
    for (const auto& s : data.samples) out.push_back(embed(base, s));
    return out;
}

namespace detail {

inline double sq_euclidean(const Vector& a, const Vector& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

} // namespace detail

/// Lloyd's algorithm with k-means++ seeding, Euclidean geometry, and fixed
/// tie-breaking (nearest center, lowest index on ties). Empty clusters keep
/// their previous center. Deterministic per seed.
inline ClusterCenters kmeans(const std::vector<EmbeddedSample>& embs, std::size_t k,
                             std::uint64_t seed, std::size_t max_iters = 100) {
    const std::size_t n = embs.size();
    if (k == 0) throw std::invalid_argument("kmeans: K must be >= 1");
    if (k > n) {
        throw std::invalid_argument("kmeans: K=" + std::to_string(k) + " exceeds n=" +
                                    std::to_string(n));
    }
    SeededRng rng(seed);
    ClusterCenters cc;
    cc.centers.reserve(k);
    cc.centers.push_back(embs[rng.next_below(n)].embedding);
    std::vector<double> d2(n, 0.0);
    while (cc.centers.size() < k) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double best = detail::sq_euclidean(embs[i].embedding, cc.centers[0]);
            for (std::size_t c = 1; c < cc.centers.size(); ++c) {
                best = std::min(best, detail::sq_euclidean(embs[i].embedding, cc.centers[c]));
            }
            d2[i] = best;
            total += best;
        }
        std::size_t pick;
        if (total > 0.0) {
            const double threshold = rng.uniform01() * total;
            double cum = 0.0;
            pick = n - 1;
            for (std::size_t i = 0; i < n; ++i) {
                cum += d2[i];
                if (cum >= threshold) {
                    pick = i;
                    break;
                }
            }
        } else {
            // All points coincide with existing centers; any pick is valid.
            pick = rng.next_below(n);
        }
        cc.centers.push_back(embs[pick].embedding);
    }

    std::vector<int> owner(n, -1);
    const std::size_t dim = embs[0].embedding.size();
    for (std::size_t iter = 0; iter < max_iters; ++iter) {
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            int best_c = 0;
            double best_d = detail::sq_euclidean(embs[i].embedding, cc.centers[0]);
            for (std::size_t c = 1; c < k; ++c) {
                const double d = detail::sq_euclidean(embs[i].embedding, cc.centers[c]);
                if (d < best_d) {
                    best_d = d;
                    best_c = static_cast<int>(c);
                }
            }
            if (owner[i] != best_c) {
                owner[i] = best_c;
                changed = true;
            }
        }
        if (!changed) break;
        std::vector<Vector> sums(k, Vector(dim, 0.0));
        std::vector<std::size_t> counts(k, 0);
        for (std::size_t i = 0; i < n; ++i) {
            const int c = owner[i];
            ++counts[c];
            for (std::size_t j = 0; j < dim; ++j) sums[c][j] += embs[i].embedding[j];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] == 0) continue;
            for (std::size_t j = 0; j < dim; ++j) {
                cc.centers[c][j] = sums[c][j] / static_cast<double>(counts[c]);
            }
        }
    }
    return cc;
}

/// Greedy capacity-bounded assignment: every (sample, shard) pair is scored
/// by cosine distance, the full list is sorted ascending with lexicographic
/// tie-breaks (distance, sample id, shard index), and each still-unassigned
/// sample takes the first shard with room. Since each sample pairs with all
/// shards and total capacity covers n, the sweep assigns everyone.
inline ShardAssignment balanced_assign(const std::vector<EmbeddedSample>& embs,
                                       const ClusterCenters& centers, std::size_t t) {
    const std::size_t n = embs.size();
    const std::size_t k = centers.k();
    if (k == 0) throw std::invalid_argument("balanced_assign: no centers");
    if (k * t < n) {
        throw std::invalid_argument("balanced_assign: infeasible capacity: " + std::to_string(k) +
                                    " shards of " + std::to_string(t) + " cannot hold " +
                                    std::to_string(n) + " samples");
    }

    struct DistanceEntry {
        double distance;
        SampleId id;
        std::size_t shard;
        std::size_t pos;  // index into embs, for O(1) lookback
    };
    std::vector<DistanceEntry> entries;
    entries.reserve(n * k);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < k; ++c) {
            entries.push_back({-cosine_similarity(embs[i].embedding, centers.centers[c]),
                               embs[i].id, c, i});
        }
    }
    std::sort(entries.begin(), entries.end(), [](const DistanceEntry& a, const DistanceEntry& b) {
        return std::tie(a.distance, a.id, a.shard) < std::tie(b.distance, b.id, b.shard);
    });

    ShardAssignment out;
    out.k = k;
    out.capacity = t;
    out.centers = centers;
    out.shard_members.resize(k);
    std::vector<std::size_t> sizes(k, 0);
    std::vector<int> assigned(n, -1);
    std::size_t remaining = n;
    for (const DistanceEntry& e : entries) {
        if (remaining == 0) break;
        if (assigned[e.pos] >= 0 || sizes[e.shard] >= t) continue;
        assigned[e.pos] = static_cast<int>(e.shard);
        ++sizes[e.shard];
        --remaining;
    }
    for (std::size_t i = 0; i < n; ++i) {
        out.shard_of[embs[i].id] = assigned[i];
        out.shard_members[assigned[i]].push_back(embs[i].id);
    }
    return out;
}

/// Nearest center by cosine distance, capacity ignored; ties go to the
/// lowest shard index.
inline int assign_single(const EmbeddedSample& emb, const ShardAssignment& assignment) {
    int best = 0;
    double best_d = -cosine_similarity(emb.embedding, assignment.centers.centers[0]);
    for (std::size_t c = 1; c < assignment.k; ++c) {
        const double d = -cosine_similarity(emb.embedding, assignment.centers.centers[c]);
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(c);
        }
    }
    return best;
}

/// Ablation baseline: shuffled round-robin deal, ignoring embeddings except
/// to carry the supplied centers through for routing and reporting.
inline ShardAssignment random_assign(const std::vector<EmbeddedSample>& embs,
                                     const ClusterCenters& centers, std::size_t t,
                                     std::uint64_t seed) {
    const std::size_t n = embs.size();
    const std::size_t k = centers.k();
    if (k == 0) throw std::invalid_argument("random_assign: no centers");
    if (k * t < n) throw std::invalid_argument("random_assign: infeasible capacity");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    SeededRng rng(seed);
    for (std::size_t i = n; i > 1; --i) {
        std::swap(order[i - 1], order[rng.next_below(i)]);
    }
    ShardAssignment out;
    out.k = k;
    out.capacity = t;
    out.centers = centers;
    out.shard_members.resize(k);
    std::vector<int> assigned(n, -1);
    for (std::size_t i = 0; i < n; ++i) assigned[order[i]] = static_cast<int>(i % k);
    for (std::size_t i = 0; i < n; ++i) {
        out.shard_of[embs[i].id] = assigned[i];
        out.shard_members[assigned[i]].push_back(embs[i].id);
    }
    return out;
}

/// Default capacity: equal shards, rounded up.
inline std::size_t default_capacity(std::size_t n, std::size_t k) {
    if (k == 0) throw std::invalid_argument("default_capacity: K must be >= 1");
    return (n + k - 1) / k;
}

/// Shard k's samples as a Dataset, in dataset order.
inline Dataset extract_shard(const Dataset& data, const ShardAssignment& assignment,
                             std::size_t k) {
    Dataset out;
    out.dim = data.dim;
    for (const auto& s : data.samples) {
        auto it = assignment.shard_of.find(s.id);
        if (it != assignment.shard_of.end() && it->second == static_cast<int>(k)) {
            out.samples.push_back(s);
        }
    }
    return out;
}

inline void save_partition(const ShardAssignment& assignment, const std::string& path) {
    nlohmann::json j;
    j["k"] = assignment.k;
    j["capacity"] = assignment.capacity;
    j["centers"] = assignment.centers.centers;
    // Member lists keep within-shard dataset order, which is what retraining
    // consumes; shard_of is rebuilt from them on load.
    nlohmann::json members = nlohmann::json::array();
    for (const auto& list : assignment.shard_members) members.push_back(list);
    j["members"] = members;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_partition: cannot open " + path);
    out << j.dump(2) << "\n";
    if (!out) throw std::runtime_error("save_partition: write failed for " + path);
}

inline ShardAssignment load_partition(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_partition: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("load_partition: " + path + ": " + e.what());
    }
    ShardAssignment out;
    out.k = j.at("k").get<std::size_t>();
    out.capacity = j.at("capacity").get<std::size_t>();
    out.centers.centers = j.at("centers").get<std::vector<Vector>>();
    out.shard_members = j.at("members").get<std::vector<std::vector<SampleId>>>();
    if (out.shard_members.size() != out.k) {
        throw std::runtime_error("load_partition: member list count mismatch");
    }
    for (std::size_t c = 0; c < out.shard_members.size(); ++c) {
        for (SampleId id : out.shard_members[c]) {
            if (!out.shard_of.emplace(id, static_cast<int>(c)).second) {
                throw std::runtime_error("load_partition: duplicate sample id " +
                                         std::to_string(id));
            }
        }
    }
    return out;
}

} // namespace apa
