#include <catch2/catch_amalgamated.hpp>

#include <apa/serving.hpp>

namespace {

using namespace apa;

struct World {
    BaseModel base;
    Dataset train;
    Dataset valid;
    Dataset test;
    RegistryConfig cfg;
    Registry reg;

    explicit World(std::size_t k = 4, std::uint64_t seed = 31) {
        const Dataset all = synth_generate(112, 8, 4, 0.05, seed);
        SplitSpec spec;
        spec.train_size = 64;
        spec.valid_size = 24;
        spec.test_size = 24;
        spec.seed = seed + 1;
        std::tie(train, valid, test) = split(all, spec);

        BaseConfig bcfg;
        bcfg.d_in = 8;
        bcfg.hidden_width = 8;
        bcfg.hidden_layers = 2;
        bcfg.seed = seed + 2;
        base = make_base_model(bcfg);

        cfg.k = k;
        cfg.partition_seed = seed + 3;
        cfg.train.learning_rate = 0.2;
        cfg.train.epochs = 10;
        cfg.train.batch_size = 8;
        cfg.train.seed = seed + 4;
        cfg.train.rank = 2;
        reg = build_registry(train, valid, base, cfg);
    }
};

AggregationConfig agg(AggregationLevel level, double tau = 50.0, std::size_t n = 8) {
    AggregationConfig cfg;
    cfg.level = level;
    cfg.tau = tau;
    cfg.n_neighbors = n;
    return cfg;
}

} // namespace

TEST_CASE("aggregated prediction degenerates correctly", "[serving]") {
    SECTION("K=1 equals the single adapter's prediction") {
        World w(1);
        for (const auto& s : w.test.samples) {
            const double direct = predict_single(w.reg, s, 0).score;
            REQUIRE(predict_apa(w.reg, s, agg(AggregationLevel::Decomposition)).score == direct);
            REQUIRE(predict_apa(w.reg, s, agg(AggregationLevel::Concat)).score == direct);
            const double nd = predict_apa(w.reg, s, agg(AggregationLevel::NonDecomposition)).score;
            REQUIRE(std::abs(nd - direct) <= 1e-12);
        }
    }
    SECTION("identical adapters collapse to a single prediction") {
        World w(4);
        Registry clones = w.reg;
        for (std::size_t k = 1; k < 4; ++k) {
            clones.adapters[k] = clones.adapters[0];
            clones.adapters[k].shard = static_cast<int>(k);
        }
        clones.cache = build_cache(clones.base, clones.adapters, clones.valid_data);
        for (std::size_t i = 0; i < 6; ++i) {
            const auto& s = w.test.samples[i];
            const double direct = predict_single(clones, s, 0).score;
            for (const auto level : {AggregationLevel::Decomposition,
                                     AggregationLevel::NonDecomposition,
                                     AggregationLevel::Concat}) {
                REQUIRE(std::abs(predict_apa(clones, s, agg(level)).score - direct) <= 1e-12);
            }
            REQUIRE(std::abs(predict_sisa(clones, s).score - direct) <= 1e-15);
        }
    }
}

TEST_CASE("concat and non-decomposition serve identical scores", "[serving]") {
    World w(4);
    for (const auto& s : w.test.samples) {
        const double cat = predict_apa(w.reg, s, agg(AggregationLevel::Concat)).score;
        const double nd = predict_apa(w.reg, s, agg(AggregationLevel::NonDecomposition)).score;
        REQUIRE(std::abs(cat - nd) <= 1e-10);
    }
}

TEST_CASE("weighting strategies", "[serving]") {
    World w(4);
    const auto& s = w.test.samples[0];
    const Vector query = hidden_representation(w.reg.base, s.features);

    SECTION("average strategy is exactly uniform") {
        const WeightVector uni =
            serving_weights(w.reg, query, agg(AggregationLevel::Decomposition),
                            WeightingStrategy::Average);
        for (std::size_t k = 0; k < 4; ++k) REQUIRE(uni[k] == 0.25);
    }
    SECTION("zero temperature adaptive equals the uniform soup") {
        const AggregationConfig cfg = agg(AggregationLevel::NonDecomposition, 0.0);
        const double adaptive =
            predict_apa(w.reg, s, cfg, WeightingStrategy::Adaptive).score;
        const double average = predict_apa(w.reg, s, cfg, WeightingStrategy::Average).score;
        REQUIRE(adaptive == average);
    }
    SECTION("major strategy serves its winning adapter exactly") {
        const AggregationConfig cfg = agg(AggregationLevel::Decomposition);
        const WeightVector adaptive =
            serving_weights(w.reg, query, cfg, WeightingStrategy::Adaptive);
        const std::size_t winner = argmax(adaptive.w);
        const double major = predict_apa(w.reg, s, cfg, WeightingStrategy::Major).score;
        REQUIRE(major == predict_single(w.reg, s, winner).score);
    }
    SECTION("semantic strategy weights by center similarity") {
        const AggregationConfig cfg = agg(AggregationLevel::Decomposition, 5.0);
        const WeightVector sem = serving_weights(w.reg, query, cfg, WeightingStrategy::Semantic);
        Vector cos(4);
        for (std::size_t k = 0; k < 4; ++k) {
            cos[k] = cosine_similarity(query, w.reg.assignment.centers.centers[k]);
        }
        REQUIRE(argmax(sem.w) == argmax(cos));
        double sum = 0.0;
        for (std::size_t k = 0; k < 4; ++k) sum += sem[k];
        REQUIRE(std::abs(sum - 1.0) <= 1e-12);
    }
    SECTION("strategy evaluation never mutates adapters or cache") {
        const Registry before = w.reg;
        for (const auto strategy : {WeightingStrategy::Adaptive, WeightingStrategy::Average,
                                    WeightingStrategy::Major, WeightingStrategy::Semantic}) {
            predict_dataset(w.reg, w.test, agg(AggregationLevel::Decomposition), strategy);
        }
        REQUIRE(bitwise_equal(w.reg.cache.loss, before.cache.loss));
        for (std::size_t k = 0; k < 4; ++k) {
            REQUIRE(bitwise_equal(w.reg.adapters[k], before.adapters[k]));
        }
    }
}

TEST_CASE("stale cache rows block adaptive serving", "[serving]") {
    World w(4);
    mark_dirty(w.reg.cache, 1);
    REQUIRE_THROWS_AS(predict_apa(w.reg, w.test.samples[0], agg(AggregationLevel::Decomposition)),
                      std::runtime_error);
    // Cache-free strategies still serve.
    REQUIRE_NOTHROW(predict_apa(w.reg, w.test.samples[0], agg(AggregationLevel::Decomposition),
                                WeightingStrategy::Average));
}

TEST_CASE("scratch and allocating prediction paths agree bitwise", "[serving]") {
    World w(4);
    ServingScratch scratch;
    for (const auto level : {AggregationLevel::Decomposition, AggregationLevel::NonDecomposition,
                             AggregationLevel::Concat}) {
        for (std::size_t i = 0; i < 8; ++i) {
            const auto& s = w.test.samples[i];
            const double with_scratch = predict_apa(w.reg, s, agg(level), scratch).score;
            const double fresh = predict_apa(w.reg, s, agg(level)).score;
            REQUIRE(with_scratch == fresh);
        }
    }
}

TEST_CASE("prediction averaging matches its per-adapter oracle", "[serving]") {
    World w(4);
    for (std::size_t i = 0; i < 8; ++i) {
        const auto& s = w.test.samples[i];
        double total = 0.0;
        for (std::size_t k = 0; k < 4; ++k) {
            total += sigmoid(model_forward(w.reg.base, w.reg.adapters[k], s.features));
        }
        REQUIRE(predict_sisa(w.reg, s).score == total / 4.0);
    }
}

TEST_CASE("auc agrees with the brute-force pairwise oracle", "[serving]") {
    SECTION("hand cases") {
        REQUIRE(auc({0.9, 0.1}, {1.0, 0.0}) == 1.0);
        REQUIRE(auc({0.1, 0.9}, {1.0, 0.0}) == 0.0);
        REQUIRE(auc({0.5, 0.5, 0.5, 0.5}, {1.0, 0.0, 1.0, 0.0}) == 0.5);
        REQUIRE(auc({0.1, 0.4, 0.35, 0.8}, {0.0, 0.0, 1.0, 1.0}) == 0.75);
    }
    SECTION("single-class input is rejected") {
        REQUIRE_THROWS_AS(auc({0.1, 0.9}, {1.0, 1.0}), std::invalid_argument);
        REQUIRE_THROWS_AS(auc({0.1, 0.9}, {0.0, 0.0}), std::invalid_argument);
        REQUIRE_THROWS_AS(auc({0.1}, {0.5}), std::invalid_argument);
    }
    SECTION("random instances with ties") {
        SeededRng rng(91);
        for (int trial = 0; trial < 100; ++trial) {
            const std::size_t n = 2 + rng.next_below(199);
            std::vector<double> scores(n), labels(n);
            bool has_pos = false, has_neg = false;
            for (std::size_t i = 0; i < n; ++i) {
                // Quantized scores force plenty of exact ties.
                scores[i] = static_cast<double>(rng.next_below(20)) / 20.0;
                labels[i] = rng.uniform01() < 0.5 ? 1.0 : 0.0;
                (labels[i] == 1.0 ? has_pos : has_neg) = true;
            }
            if (!has_pos) labels[0] = 1.0;
            if (!has_neg) labels[n - 1 == 0 ? 0 : n - 1] = 0.0;
            if (n == 1) continue;
            double wins = 0.0;
            std::size_t pairs = 0;
            for (std::size_t i = 0; i < n; ++i) {
                if (labels[i] != 1.0) continue;
                for (std::size_t j = 0; j < n; ++j) {
                    if (labels[j] != 0.0) continue;
                    ++pairs;
                    if (scores[i] > scores[j]) wins += 1.0;
                    else if (scores[i] == scores[j]) wins += 0.5;
                }
            }
            const double brute = wins / static_cast<double>(pairs);
            REQUIRE(auc(scores, labels) == brute);
        }
    }
}

TEST_CASE("inference benchmark produces usable timings", "[serving]") {
    World w(4);
    const InferenceBench bench =
        bench_inference(w.reg, w.test, agg(AggregationLevel::Decomposition));
    REQUIRE(bench.t_apa > 0.0);
    REQUIRE(bench.t_sisa > 0.0);
    REQUIRE(bench.t_single > 0.0);
    REQUIRE(bench.samples == w.test.samples.size());
    Dataset empty;
    REQUIRE_THROWS_AS(bench_inference(w.reg, empty, agg(AggregationLevel::Decomposition)),
                      std::invalid_argument);
}

TEST_CASE("serving continues correctly after unlearning", "[serving]") {
    World w(4);
    const AggregationConfig cfg = agg(AggregationLevel::Decomposition);
    const SampleId victim = w.reg.shard_ids[0][0];
    unlearn(w.reg, UnlearnRequest{{victim}});
    // The refreshed registry serves without staleness errors, and predictions
    // match a registry rebuilt from scratch on the surviving data.
    Dataset survivors;
    survivors.dim = w.train.dim;
    for (const auto& s : w.train.samples) {
        if (s.id != victim) survivors.samples.push_back(s);
    }
    for (std::size_t i = 0; i < 6; ++i) {
        REQUIRE_NOTHROW(predict_apa(w.reg, w.test.samples[i], cfg));
    }
    const std::vector<Prediction> preds = predict_dataset(w.reg, w.test, cfg);
    REQUIRE(preds.size() == w.test.samples.size());
    const double test_auc = auc(preds, w.test);
    REQUIRE(test_auc >= 0.0);
    REQUIRE(test_auc <= 1.0);
}
