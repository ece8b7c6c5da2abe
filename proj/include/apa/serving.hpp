// Serving paths. The aggregated path computes per-sample weights, merges the
// shard adapters at parameter level, and runs a single forward pass; the
// prediction-averaging baseline runs one forward per shard. AUC evaluation
// and the timing harness live here too.
#pragma once

#include <apa/adapter.hpp>
#include <apa/model.hpp>
#include <apa/unlearning.hpp>
#include <apa/weighting.hpp>

#include <algorithm>
#include <chrono>
#include <numeric>
#include <string>
#include <vector>

namespace apa {

struct Prediction {
    SampleId id = 0;
    double score = 0.0;  // sigmoid of the designated path's logit
    std::string method;
};

enum class WeightingStrategy { Adaptive, Average, Major, Semantic };

inline std::string strategy_name(WeightingStrategy s) {
    switch (s) {
        case WeightingStrategy::Adaptive: return "adaptive";
        case WeightingStrategy::Average: return "average";
        case WeightingStrategy::Major: return "major";
        case WeightingStrategy::Semantic: return "semantic";
    }
    throw std::logic_error("strategy_name: unknown strategy");
}

inline std::string level_name(AggregationLevel level) {
    switch (level) {
        case AggregationLevel::Decomposition: return "decomposition";
        case AggregationLevel::NonDecomposition: return "nondecomposition";
        case AggregationLevel::Concat: return "concat";
    }
    throw std::logic_error("level_name: unknown level");
}

/// Per-sample adapter weights under the chosen strategy. Adaptive and Major
/// read the validation cache (stale rows are a hard error); Average and
/// Semantic need no cache.
inline WeightVector serving_weights(const Registry& reg, const Vector& query_emb,
                                    const AggregationConfig& cfg, WeightingStrategy strategy) {
    const std::size_t k = reg.adapters.size();
    switch (strategy) {
        case WeightingStrategy::Average: {
            return make_weights(softmax_stable(Vector(k, 0.0), 0.0));
        }
        case WeightingStrategy::Semantic: {
            Vector cos(k);
            for (std::size_t c = 0; c < k; ++c) {
                cos[c] = cosine_similarity(query_emb, reg.assignment.centers.centers[c]);
            }
            return make_weights(softmax_stable(cos, cfg.tau));
        }
        case WeightingStrategy::Adaptive:
        case WeightingStrategy::Major: {
            const NeighborSet nbrs = neighbors(query_emb, reg.valid_embs, cfg.n_neighbors);
            const Vector errors = adapter_errors(reg.cache, nbrs);
            WeightVector w = attention_weights(errors, cfg.tau);
            if (strategy == WeightingStrategy::Major) {
                Vector hot(k, 0.0);
                hot[argmax(w.w)] = 1.0;
                w = make_weights(hot);
            }
            return w;
        }
    }
    throw std::logic_error("serving_weights: unknown strategy");
}

/// Reusable buffers for the serving loop; results are identical to the
/// allocating path.
struct ServingScratch {
    Adapter adapter;
    MergedDense merged;
};

inline Prediction predict_apa(const Registry& reg, const InstructionSample& sample,
                              const AggregationConfig& cfg, ServingScratch& scratch,
                              WeightingStrategy strategy = WeightingStrategy::Adaptive) {
    const Vector query = hidden_representation(reg.base, sample.features);
    const WeightVector w = serving_weights(reg, query, cfg, strategy);
    double logit = 0.0;
    switch (cfg.level) {
        case AggregationLevel::Decomposition:
            aggregate_decomposition_into(reg.adapters, w, scratch.adapter);
            logit = model_forward(reg.base, scratch.adapter, sample.features);
            break;
        case AggregationLevel::NonDecomposition:
            aggregate_nondecomposition_into(reg.adapters, w, scratch.merged);
            logit = model_forward(reg.base, scratch.merged, sample.features);
            break;
        case AggregationLevel::Concat:
            aggregate_concat_into(reg.adapters, w, scratch.adapter);
            logit = model_forward(reg.base, scratch.adapter, sample.features);
            break;
    }
    return Prediction{sample.id, sigmoid(logit),
                      "apa-" + level_name(cfg.level) + "-" + strategy_name(strategy)};
}

inline Prediction predict_apa(const Registry& reg, const InstructionSample& sample,
                              const AggregationConfig& cfg,
                              WeightingStrategy strategy = WeightingStrategy::Adaptive) {
    ServingScratch scratch;
    return predict_apa(reg, sample, cfg, scratch, strategy);
}

/// One forward per shard, scores averaged in shard order.
inline Prediction predict_sisa(const Registry& reg, const InstructionSample& sample) {
    double total = 0.0;
    for (const Adapter& adapter : reg.adapters) {
        total += sigmoid(model_forward(reg.base, adapter, sample.features));
    }
    return Prediction{sample.id, total / static_cast<double>(reg.adapters.size()), "sisa"};
}

inline Prediction predict_single(const Registry& reg, const InstructionSample& sample,
                                 std::size_t k) {
    if (k >= reg.adapters.size()) throw std::invalid_argument("predict_single: shard out of range");
    return Prediction{sample.id, sigmoid(model_forward(reg.base, reg.adapters[k], sample.features)),
                      "single-" + std::to_string(k)};
}

/// Probability that a random positive outscores a random negative, ties at
/// half weight, computed via midranks. Equals the all-pairs comparison
/// exactly: both numerators are sums of exact halves.
inline double auc(const std::vector<double>& scores, const std::vector<double>& labels) {
    if (scores.size() != labels.size()) {
        throw std::invalid_argument("auc: scores and labels length mismatch");
    }
    const std::size_t n = scores.size();
    std::size_t n_pos = 0;
    for (double y : labels) {
        if (y != 0.0 && y != 1.0) throw std::invalid_argument("auc: labels must be 0 or 1");
        if (y == 1.0) ++n_pos;
    }
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) {
        throw std::invalid_argument("auc: need at least one positive and one negative label");
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&scores](std::size_t a, std::size_t b) {
        return scores[a] < scores[b];
    });
    double pos_rank_sum = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
        for (std::size_t p = i; p <= j; ++p) {
            if (labels[order[p]] == 1.0) pos_rank_sum += midrank;
        }
        i = j + 1;
    }
    const double p = static_cast<double>(n_pos);
    return (pos_rank_sum - p * (p + 1.0) / 2.0) /
           (p * static_cast<double>(n_neg));
}

inline double auc(const std::vector<Prediction>& preds, const Dataset& data) {
    if (preds.size() != data.samples.size()) {
        throw std::invalid_argument("auc: prediction count does not match dataset");
    }
    std::vector<double> scores(preds.size()), labels(preds.size());
    for (std::size_t i = 0; i < preds.size(); ++i) {
        scores[i] = preds[i].score;
        labels[i] = data.samples[i].label;
    }
    return auc(scores, labels);
}

inline std::vector<Prediction> predict_dataset(const Registry& reg, const Dataset& data,
                                               const AggregationConfig& cfg,
                                               WeightingStrategy strategy =
                                                   WeightingStrategy::Adaptive) {
    std::vector<Prediction> out;
    out.reserve(data.samples.size());
    ServingScratch scratch;
    for (const auto& s : data.samples) out.push_back(predict_apa(reg, s, cfg, scratch, strategy));
    return out;
}

struct InferenceBench {
    double t_apa = 0.0;
    double t_sisa = 0.0;
    double t_single = 0.0;
    std::size_t samples = 0;
};

/// Serial wall-clock comparison over one shared sample set, one warm-up
/// prediction per path excluded from the timings.
inline InferenceBench bench_inference(const Registry& reg, const Dataset& test,
                                      const AggregationConfig& cfg) {
    if (test.samples.empty()) throw std::invalid_argument("bench_inference: empty test set");
    InferenceBench out;
    out.samples = test.samples.size();
    ServingScratch scratch;
    using clock = std::chrono::steady_clock;

    predict_apa(reg, test.samples[0], cfg, scratch);
    auto t0 = clock::now();
    for (const auto& s : test.samples) predict_apa(reg, s, cfg, scratch);
    out.t_apa = std::chrono::duration<double>(clock::now() - t0).count();

    predict_sisa(reg, test.samples[0]);
    t0 = clock::now();
    for (const auto& s : test.samples) predict_sisa(reg, s);
    out.t_sisa = std::chrono::duration<double>(clock::now() - t0).count();

    predict_single(reg, test.samples[0], 0);
    t0 = clock::now();
    for (const auto& s : test.samples) predict_single(reg, s, 0);
    out.t_single = std::chrono::duration<double>(clock::now() - t0).count();
    return out;
}

} // namespace apa
