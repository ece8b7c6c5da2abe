#include <catch2/catch_amalgamated.hpp>

#include <apa/partition.hpp>
#include <apa/training.hpp>

#include <cmath>
#include <cstdio>
#include <set>

namespace {

using namespace apa;

std::vector<EmbeddedSample> blob_points(const Vector& center, std::size_t n, double spread,
                                        SeededRng& rng, SampleId first_id) {
    std::vector<EmbeddedSample> out;
    for (std::size_t i = 0; i < n; ++i) {
        Vector p = center;
        for (double& v : p) v += rng.normal(spread);
        out.push_back({first_id + static_cast<SampleId>(i), std::move(p)});
    }
    return out;
}

Vector mean_of(const std::vector<EmbeddedSample>& embs, std::size_t from, std::size_t to) {
    Vector m(embs[0].embedding.size(), 0.0);
    for (std::size_t i = from; i < to; ++i) {
        for (std::size_t j = 0; j < m.size(); ++j) m[j] += embs[i].embedding[j];
    }
    for (double& v : m) v /= static_cast<double>(to - from);
    return m;
}

// Mean within-shard minus mean cross-shard cosine similarity.
double heterogeneity_gap(const std::vector<EmbeddedSample>& embs,
                         const ShardAssignment& assignment) {
    std::map<SampleId, const Vector*> by_id;
    for (const auto& e : embs) by_id[e.id] = &e.embedding;
    double within = 0.0, cross = 0.0;
    std::size_t n_within = 0, n_cross = 0;
    for (std::size_t i = 0; i < embs.size(); ++i) {
        for (std::size_t j = i + 1; j < embs.size(); ++j) {
            const double cos = cosine_similarity(embs[i].embedding, embs[j].embedding);
            if (assignment.shard_of.at(embs[i].id) == assignment.shard_of.at(embs[j].id)) {
                within += cos;
                ++n_within;
            } else {
                cross += cos;
                ++n_cross;
            }
        }
    }
    return within / static_cast<double>(n_within) - cross / static_cast<double>(n_cross);
}

} // namespace

TEST_CASE("embeddings are deterministic and adapter-independent", "[partition]") {
    BaseConfig cfg;
    cfg.d_in = 6;
    cfg.hidden_width = 5;
    cfg.hidden_layers = 2;
    cfg.seed = 3;
    const BaseModel base = make_base_model(cfg);
    SeededRng rng(8);
    InstructionSample s;
    s.id = 7;
    s.features = gaussian_vector(cfg.d_in, 1.0, rng);
    s.label = 1.0;

    const EmbeddedSample e1 = embed(base, s);
    REQUIRE(e1.id == 7);
    REQUIRE(e1.embedding.size() == cfg.hidden_width);
    REQUIRE(bitwise_equal(e1.embedding, embed(base, s).embedding));

    SECTION("training an adapter does not move embeddings") {
        Dataset tiny;
        tiny.dim = cfg.d_in;
        for (int i = 0; i < 8; ++i) {
            InstructionSample t;
            t.id = i;
            t.features = gaussian_vector(cfg.d_in, 1.0, rng);
            t.label = i % 2 ? 1.0 : 0.0;
            tiny.samples.push_back(std::move(t));
        }
        TrainConfig tcfg;
        tcfg.epochs = 5;
        tcfg.rank = 2;
        train_shard(base, tiny, tcfg);
        REQUIRE(bitwise_equal(e1.embedding, embed(base, s).embedding));
    }
    SECTION("zero input propagates the biases") {
        InstructionSample zero;
        zero.id = 0;
        zero.features = Vector(cfg.d_in, 0.0);
        const Vector got = embed(base, zero).embedding;
        // Independent oracle: fold tanh(W h + b) layer by layer by hand.
        Vector h(cfg.d_in, 0.0);
        for (std::size_t l = 0; l + 1 < base.layers.size(); ++l) {
            const DenseLayer& layer = base.layers[l];
            Vector next(layer.weight.rows, 0.0);
            for (std::size_t i = 0; i < layer.weight.rows; ++i) {
                double acc = layer.bias[i];
                for (std::size_t j = 0; j < layer.weight.cols; ++j) {
                    acc += layer.weight(i, j) * h[j];
                }
                next[i] = std::tanh(acc);
            }
            h = next;
        }
        REQUIRE(got.size() == h.size());
        for (std::size_t i = 0; i < h.size(); ++i) {
            REQUIRE(std::isfinite(got[i]));
            REQUIRE(std::abs(got[i] - h[i]) <= 1e-15);
        }
    }
}

TEST_CASE("kmeans recovers separated structure", "[partition]") {
    SeededRng rng(19);

    SECTION("K equal to n makes every point a center") {
        std::vector<EmbeddedSample> embs;
        for (int i = 0; i < 6; ++i) {
            embs.push_back({i, {static_cast<double>(i), static_cast<double>(i * i)}});
        }
        const ClusterCenters cc = kmeans(embs, embs.size(), 4);
        REQUIRE(cc.k() == embs.size());
        std::multiset<std::pair<double, double>> want, got;
        for (const auto& e : embs) want.insert({e.embedding[0], e.embedding[1]});
        for (const auto& c : cc.centers) got.insert({c[0], c[1]});
        REQUIRE(want == got);
    }
    SECTION("two well-separated blobs") {
        auto embs = blob_points({5.0, 0.0}, 50, 0.1, rng, 0);
        auto blob2 = blob_points({-5.0, 0.0}, 50, 0.1, rng, 50);
        embs.insert(embs.end(), blob2.begin(), blob2.end());
        const Vector m1 = mean_of(embs, 0, 50);
        const Vector m2 = mean_of(embs, 50, 100);
        const ClusterCenters cc = kmeans(embs, 2, 123);
        REQUIRE(cc.k() == 2);
        // Match centers to blob means by proximity.
        auto dist = [](const Vector& a, const Vector& b) {
            return std::hypot(a[0] - b[0], a[1] - b[1]);
        };
        const bool first_is_m1 = dist(cc.centers[0], m1) < dist(cc.centers[0], m2);
        const Vector& c1 = first_is_m1 ? cc.centers[0] : cc.centers[1];
        const Vector& c2 = first_is_m1 ? cc.centers[1] : cc.centers[0];
        REQUIRE(dist(c1, m1) < 0.1);
        REQUIRE(dist(c2, m2) < 0.1);
    }
    SECTION("same seed gives identical centers") {
        auto embs = blob_points({1.0, 2.0}, 40, 1.0, rng, 0);
        const ClusterCenters a = kmeans(embs, 3, 55);
        const ClusterCenters b = kmeans(embs, 3, 55);
        REQUIRE(a.k() == b.k());
        for (std::size_t c = 0; c < a.k(); ++c) REQUIRE(bitwise_equal(a.centers[c], b.centers[c]));
    }
    SECTION("validation") {
        auto embs = blob_points({0.0, 0.0}, 3, 1.0, rng, 0);
        REQUIRE_THROWS_AS(kmeans(embs, 4, 1), std::invalid_argument);
        REQUIRE_THROWS_AS(kmeans(embs, 0, 1), std::invalid_argument);
    }
}

TEST_CASE("balanced assignment respects capacity and semantics", "[partition]") {
    SECTION("two tight pairs stay together") {
        const double d = 5.0 * std::acos(-1.0) / 180.0;
        std::vector<EmbeddedSample> embs{
            {0, {std::cos(d), std::sin(d)}},
            {1, {std::cos(-d), std::sin(-d)}},
            {2, {std::cos(std::acos(-1.0) / 2 - d), std::sin(std::acos(-1.0) / 2 - d)}},
            {3, {std::cos(std::acos(-1.0) / 2 + d), std::sin(std::acos(-1.0) / 2 + d)}},
        };
        ClusterCenters cc;
        cc.centers = {{1.0, 0.0}, {0.0, 1.0}};
        const ShardAssignment a = balanced_assign(embs, cc, 2);
        REQUIRE(a.shard_of.at(0) == 0);
        REQUIRE(a.shard_of.at(1) == 0);
        REQUIRE(a.shard_of.at(2) == 1);
        REQUIRE(a.shard_of.at(3) == 1);
        REQUIRE(a.shard_members[0].size() == 2);
        REQUIRE(a.shard_members[1].size() == 2);
    }
    SECTION("slack capacity reduces to nearest-center assignment") {
        SeededRng rng(31);
        auto embs = blob_points({1.0, 0.5}, 60, 2.0, rng, 0);
        const ClusterCenters cc = kmeans(embs, 3, 7);
        const ShardAssignment a = balanced_assign(embs, cc, embs.size());
        for (const auto& e : embs) {
            int best = 0;
            double best_cos = cosine_similarity(e.embedding, cc.centers[0]);
            for (std::size_t c = 1; c < cc.k(); ++c) {
                const double cos = cosine_similarity(e.embedding, cc.centers[c]);
                if (cos > best_cos) {
                    best_cos = cos;
                    best = static_cast<int>(c);
                }
            }
            REQUIRE(a.shard_of.at(e.id) == best);
        }
    }
    SECTION("1024 samples across 4 shards of 256 fill exactly") {
        const Dataset data = synth_generate(1024, 16, 4, 0.0, 99);
        BaseConfig bcfg;
        bcfg.d_in = 16;
        bcfg.hidden_width = 16;
        bcfg.hidden_layers = 2;
        bcfg.seed = 12;
        const BaseModel base = make_base_model(bcfg);
        const auto embs = embed_dataset(base, data);
        const ClusterCenters cc = kmeans(embs, 4, 5);
        const ShardAssignment a = balanced_assign(embs, cc, 256);
        std::size_t total = 0;
        for (const auto& members : a.shard_members) {
            REQUIRE(members.size() == 256);
            total += members.size();
        }
        REQUIRE(total == 1024);

        SECTION("assignment is stable across reruns") {
            const ShardAssignment b = balanced_assign(embs, cc, 256);
            REQUIRE(a.shard_of == b.shard_of);
            REQUIRE(a.shard_members == b.shard_members);
        }
        SECTION("semantic shards are internally more similar than random ones") {
            REQUIRE(heterogeneity_gap(embs, a) > 0.0);
            const ShardAssignment r = random_assign(embs, cc, 256, 77);
            REQUIRE(heterogeneity_gap(embs, a) > heterogeneity_gap(embs, r) + 0.05);
        }
        SECTION("members lists follow dataset order") {
            for (const auto& members : a.shard_members) {
                for (std::size_t i = 1; i < members.size(); ++i) {
                    REQUIRE(members[i - 1] < members[i]);  // synth ids are 0..n-1 in order
                }
            }
        }
        SECTION("round-trip through the JSON artifact") {
            const std::string path = "/tmp/apa_test_partition.json";
            save_partition(a, path);
            const ShardAssignment back = load_partition(path);
            REQUIRE(back.k == a.k);
            REQUIRE(back.capacity == a.capacity);
            REQUIRE(back.shard_of == a.shard_of);
            REQUIRE(back.shard_members == a.shard_members);
            REQUIRE(back.centers.k() == a.centers.k());
            for (std::size_t c = 0; c < a.centers.k(); ++c) {
                REQUIRE(bitwise_equal(back.centers.centers[c], a.centers.centers[c]));
            }
            std::remove(path.c_str());
        }
        SECTION("shard extraction preserves dataset order") {
            const Dataset shard0 = extract_shard(data, a, 0);
            REQUIRE(shard0.samples.size() == 256);
            REQUIRE(shard0.dim == data.dim);
            std::size_t pos = 0;
            for (const auto& s : shard0.samples) {
                REQUIRE(a.shard_of.at(s.id) == 0);
                REQUIRE(s.id == a.shard_members[0][pos++]);
            }
        }
    }
    SECTION("infeasible capacity is rejected") {
        SeededRng rng(2);
        auto embs = blob_points({1.0, 1.0}, 10, 0.5, rng, 0);
        ClusterCenters cc;
        cc.centers = {{1.0, 0.0}, {0.0, 1.0}};
        REQUIRE_THROWS_AS(balanced_assign(embs, cc, 4), std::invalid_argument);
        REQUIRE_NOTHROW(balanced_assign(embs, cc, 5));
    }
}

TEST_CASE("single-sample routing picks the nearest center", "[partition]") {
    ShardAssignment a;
    a.k = 3;
    a.centers.centers = {{1.0, 0.0}, {0.0, 1.0}, {-1.0, 0.0}};

    REQUIRE(assign_single({0, {2.0, 0.0}}, a) == 0);
    REQUIRE(assign_single({0, {0.0, 0.5}}, a) == 1);
    REQUIRE(assign_single({0, {-3.0, 0.1}}, a) == 2);

    SECTION("exact tie goes to the lowest shard index") {
        ShardAssignment tie;
        tie.k = 2;
        tie.centers.centers = {{1.0, 0.0}, {1.0, 0.0}};
        REQUIRE(assign_single({0, {0.3, 0.4}}, tie) == 0);
    }
    SECTION("random queries match brute force") {
        SeededRng rng(44);
        for (int t = 0; t < 100; ++t) {
            const EmbeddedSample q{0, {rng.normal(1.0), rng.normal(1.0)}};
            int best = 0;
            double best_d = -cosine_similarity(q.embedding, a.centers.centers[0]);
            for (std::size_t c = 1; c < a.k; ++c) {
                const double d = -cosine_similarity(q.embedding, a.centers.centers[c]);
                if (d < best_d) {
                    best_d = d;
                    best = static_cast<int>(c);
                }
            }
            REQUIRE(assign_single(q, a) == best);
        }
    }
}

TEST_CASE("random assignment stays balanced", "[partition]") {
    SeededRng rng(3);
    auto embs = blob_points({0.5, 0.5}, 37, 1.0, rng, 0);
    ClusterCenters cc;
    cc.centers = {{1.0, 0.0}, {0.0, 1.0}, {1.0, 1.0}, {-1.0, 1.0}};
    const ShardAssignment a = random_assign(embs, cc, 10, 5);
    std::size_t total = 0;
    for (const auto& members : a.shard_members) {
        REQUIRE(members.size() <= 10);
        total += members.size();
    }
    REQUIRE(total == 37);
    const ShardAssignment b = random_assign(embs, cc, 10, 5);
    REQUIRE(a.shard_of == b.shard_of);
    const ShardAssignment c = random_assign(embs, cc, 10, 6);
    REQUIRE(a.shard_of != c.shard_of);
}
