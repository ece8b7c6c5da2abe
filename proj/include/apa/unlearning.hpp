// Deletion machinery. A registry pins the trained system state: frozen base,
// frozen partition, per-shard adapters, and the validation cache. Unlearning
// tombstones the removed ids and retrains only the affected shards with the
// same derived seeds, so the result is bit-identical to training from scratch
// without the removed samples on the same partition.
#pragma once

#include <apa/dataset.hpp>
#include <apa/model.hpp>
#include <apa/partition.hpp>
#include <apa/training.hpp>
#include <apa/weighting.hpp>

#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace apa {

struct UnlearnRequest {
    std::vector<SampleId> removed_ids;
};

struct RegistryConfig {
    std::size_t k = 4;
    std::size_t capacity = 0;  // 0 = equal shards, ceil(n / k)
    std::uint64_t partition_seed = 1;
    bool random_partition = false;
    bool parallel_training = true;
    TrainConfig train;
};

struct UnlearnReport {
    std::vector<std::size_t> affected;       // ascending shard indices
    std::vector<double> retrain_seconds;     // parallel to affected
    double total_seconds = 0.0;
    std::size_t samples_removed = 0;
};

struct Registry {
    BaseModel base;
    RegistryConfig cfg;
    Dataset train_data;                       // survivors, dataset order
    Dataset valid_data;
    ShardAssignment assignment;               // as built; never re-partitioned
    std::vector<std::vector<SampleId>> shard_ids;  // current survivors per shard
    std::vector<Adapter> adapters;
    ValidationCache cache;
    std::vector<EmbeddedSample> valid_embs;
    std::set<SampleId> tombstones;
    std::size_t original_n = 0;
};

/// Shard k trains under the base config with its own derived seed, giving
/// each shard an independent, reproducible stream.
inline TrainConfig shard_train_config(const TrainConfig& cfg, std::size_t k) {
    TrainConfig out = cfg;
    out.seed = derive_seed(cfg.seed, k);
    return out;
}

namespace detail {

inline Dataset subset_by_ids(const Dataset& data, const std::map<SampleId, std::size_t>& index,
                             const std::vector<SampleId>& ids) {
    Dataset out;
    out.dim = data.dim;
    out.samples.reserve(ids.size());
    for (SampleId id : ids) {
        auto it = index.find(id);
        if (it == index.end()) {
            throw std::invalid_argument("subset_by_ids: id " + std::to_string(id) +
                                        " missing from dataset");
        }
        out.samples.push_back(data.samples[it->second]);
    }
    return out;
}

/// Shard retraining entry point shared by build, unlearn, and the oracle: an
/// empty survivor list yields the untrained initial adapter for that shard's
/// derived config.
inline Adapter retrain_shard(const BaseModel& base, const Dataset& data,
                             const std::map<SampleId, std::size_t>& index,
                             const std::vector<SampleId>& member_ids, const TrainConfig& base_cfg,
                             std::size_t k) {
    const TrainConfig cfg_k = shard_train_config(base_cfg, k);
    Adapter adapter;
    if (member_ids.empty()) {
        adapter = initial_adapter(base, cfg_k);
    } else {
        adapter = train_shard(base, subset_by_ids(data, index, member_ids), cfg_k);
    }
    adapter.shard = static_cast<int>(k);
    return adapter;
}

inline std::map<SampleId, std::size_t> index_dataset(const Dataset& data) {
    std::map<SampleId, std::size_t> index;
    for (std::size_t i = 0; i < data.samples.size(); ++i) index[data.samples[i].id] = i;
    return index;
}

inline double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

} // namespace detail

/// Builds a fresh registry: partition, per-shard adapters, validation cache.
/// Passing `fixed` reuses a previously computed assignment instead of
/// repartitioning; it must cover exactly the training ids with cfg.k shards.
inline Registry build_registry(const Dataset& train, const Dataset& valid, const BaseModel& base,
                               const RegistryConfig& cfg,
                               const ShardAssignment* fixed = nullptr) {
    if (cfg.k == 0) throw std::invalid_argument("build_registry: K must be >= 1");
    if (train.samples.empty()) throw std::invalid_argument("build_registry: empty training set");
    Registry reg;
    reg.base = base;
    reg.cfg = cfg;
    reg.train_data = train;
    reg.valid_data = valid;
    reg.original_n = train.samples.size();

    if (fixed) {
        if (fixed->k != cfg.k) {
            throw std::invalid_argument("build_registry: partition has " +
                                        std::to_string(fixed->k) + " shards but config asks for " +
                                        std::to_string(cfg.k));
        }
        if (fixed->shard_of.size() != train.samples.size()) {
            throw std::invalid_argument("build_registry: partition covers " +
                                        std::to_string(fixed->shard_of.size()) +
                                        " samples, training set has " +
                                        std::to_string(train.samples.size()));
        }
        for (const auto& s : train.samples) {
            if (!fixed->shard_of.count(s.id)) {
                throw std::invalid_argument("build_registry: sample " + std::to_string(s.id) +
                                            " missing from the fixed partition");
            }
        }
        reg.assignment = *fixed;
    } else {
        const std::size_t t =
            cfg.capacity ? cfg.capacity : default_capacity(train.samples.size(), cfg.k);
        const auto embs = embed_dataset(base, train);
        const ClusterCenters centers = kmeans(embs, cfg.k, cfg.partition_seed);
        reg.assignment = cfg.random_partition
                             ? random_assign(embs, centers, t, cfg.partition_seed)
                             : balanced_assign(embs, centers, t);
    }
    reg.shard_ids = reg.assignment.shard_members;

    const auto index = detail::index_dataset(train);
    reg.adapters.resize(cfg.k);
    auto train_one = [&](std::size_t k) {
        return detail::retrain_shard(base, train, index, reg.shard_ids[k], cfg.train, k);
    };
    if (cfg.parallel_training && cfg.k > 1) {
        std::vector<std::future<Adapter>> jobs;
        jobs.reserve(cfg.k);
        for (std::size_t k = 0; k < cfg.k; ++k) {
            jobs.push_back(std::async(std::launch::async, train_one, k));
        }
        for (std::size_t k = 0; k < cfg.k; ++k) reg.adapters[k] = jobs[k].get();
    } else {
        for (std::size_t k = 0; k < cfg.k; ++k) reg.adapters[k] = train_one(k);
    }

    reg.cache = build_cache(base, reg.adapters, valid);
    reg.valid_embs = embed_dataset(base, valid);
    return reg;
}

/// Remove the requested samples. Affected shards retrain from scratch on
/// their survivors with the same derived seed as the original build; nothing
/// else changes. The registry mutates only after all retraining succeeds.
inline UnlearnReport unlearn(Registry& reg, const UnlearnRequest& req) {
    const auto t_start = std::chrono::steady_clock::now();
    if (req.removed_ids.empty()) {
        throw std::invalid_argument("unlearn: request must name at least one sample");
    }
    std::set<SampleId> removal(req.removed_ids.begin(), req.removed_ids.end());
    std::set<SampleId> valid_ids;
    for (const auto& s : reg.valid_data.samples) valid_ids.insert(s.id);
    for (SampleId id : removal) {
        if (reg.tombstones.count(id)) {
            throw std::invalid_argument("unlearn: sample " + std::to_string(id) +
                                        " was already removed");
        }
        if (valid_ids.count(id)) {
            throw std::invalid_argument("unlearn: sample " + std::to_string(id) +
                                        " is a validation sample, not unlearnable training data");
        }
        if (!reg.assignment.shard_of.count(id)) {
            throw std::invalid_argument("unlearn: unknown sample " + std::to_string(id));
        }
    }

    std::set<std::size_t> affected_set;
    for (SampleId id : removal) {
        affected_set.insert(static_cast<std::size_t>(reg.assignment.shard_of.at(id)));
    }
    const std::vector<std::size_t> affected(affected_set.begin(), affected_set.end());

    // Survivor lists keep dataset order; removal only deletes entries.
    std::map<std::size_t, std::vector<SampleId>> new_ids;
    for (std::size_t k : affected) {
        std::vector<SampleId> kept;
        kept.reserve(reg.shard_ids[k].size());
        for (SampleId id : reg.shard_ids[k]) {
            if (!removal.count(id)) kept.push_back(id);
        }
        new_ids[k] = std::move(kept);
    }

    const auto index = detail::index_dataset(reg.train_data);
    std::vector<Adapter> retrained(affected.size());
    std::vector<double> seconds(affected.size(), 0.0);
    auto retrain_one = [&](std::size_t slot) {
        const std::size_t k = affected[slot];
        const auto t0 = std::chrono::steady_clock::now();
        Adapter a = detail::retrain_shard(reg.base, reg.train_data, index, new_ids.at(k),
                                          reg.cfg.train, k);
        seconds[slot] = detail::seconds_since(t0);
        return a;
    };
    if (reg.cfg.parallel_training && affected.size() > 1) {
        std::vector<std::future<Adapter>> jobs;
        jobs.reserve(affected.size());
        for (std::size_t slot = 0; slot < affected.size(); ++slot) {
            jobs.push_back(std::async(std::launch::async, retrain_one, slot));
        }
        for (std::size_t slot = 0; slot < affected.size(); ++slot) {
            retrained[slot] = jobs[slot].get();
        }
    } else {
        for (std::size_t slot = 0; slot < affected.size(); ++slot) {
            retrained[slot] = retrain_one(slot);
        }
    }

    // Commit.
    for (std::size_t slot = 0; slot < affected.size(); ++slot) {
        const std::size_t k = affected[slot];
        reg.adapters[k] = std::move(retrained[slot]);
        reg.shard_ids[k] = std::move(new_ids.at(k));
        mark_dirty(reg.cache, k);
        refresh_row(reg.cache, k, reg.base, reg.adapters[k], reg.valid_data);
    }
    reg.tombstones.insert(removal.begin(), removal.end());

    UnlearnReport report;
    report.affected = affected;
    report.retrain_seconds = seconds;
    report.samples_removed = removal.size();
    report.total_seconds = detail::seconds_since(t_start);
    return report;
}

/// From-scratch oracle: independently retrain every shard touched by the
/// request on (original membership minus all tombstones) and report the
/// largest parameter difference against the registry's adapters. The
/// determinism contract makes the expected value exactly 0.0.
inline double exactness_oracle(const Registry& reg, const Dataset& original_train,
                               const UnlearnRequest& req) {
    const auto index = detail::index_dataset(original_train);
    std::set<std::size_t> affected;
    for (SampleId id : req.removed_ids) {
        affected.insert(static_cast<std::size_t>(reg.assignment.shard_of.at(id)));
    }
    double worst = 0.0;
    for (std::size_t k : affected) {
        std::vector<SampleId> survivors;
        for (SampleId id : reg.assignment.shard_members[k]) {
            if (!reg.tombstones.count(id)) survivors.push_back(id);
        }
        const Adapter oracle =
            detail::retrain_shard(reg.base, original_train, index, survivors, reg.cfg.train, k);
        worst = std::max(worst, max_param_deviation(oracle, reg.adapters[k]));
    }
    return worst;
}

struct UnlearnBench {
    double t_apa = 0.0;   // seconds for the shard-level unlearn
    double t_full = 0.0;  // seconds to retrain one model on all survivors
    double speedup = 0.0;
};

/// Wall-clock comparison against the monolithic baseline: one adapter
/// retrained on every surviving training sample. Operates on a copy so the
/// caller's registry is untouched.
inline UnlearnBench bench_unlearn(const Registry& reg, const UnlearnRequest& req) {
    Registry scratch = reg;
    UnlearnBench out;
    {
        const auto t0 = std::chrono::steady_clock::now();
        unlearn(scratch, req);
        out.t_apa = detail::seconds_since(t0);
    }
    std::set<SampleId> removal(req.removed_ids.begin(), req.removed_ids.end());
    Dataset survivors;
    survivors.dim = reg.train_data.dim;
    for (const auto& s : reg.train_data.samples) {
        if (!removal.count(s.id) && !reg.tombstones.count(s.id)) survivors.samples.push_back(s);
    }
    {
        const auto t0 = std::chrono::steady_clock::now();
        train_shard(reg.base, survivors, reg.cfg.train);
        out.t_full = detail::seconds_since(t0);
    }
    out.speedup = out.t_apa > 0.0 ? out.t_full / out.t_apa : 0.0;
    return out;
}

// ---------------------------------------------------------------------------
// Directory persistence. Layout:
//   meta.json        configs and counts
//   base.bin         frozen base weights
//   train.jsonl      surviving training samples (removed ids are gone)
//   valid.jsonl      validation samples
//   partition.json   original assignment (centers + member lists)
//   adapters/shard_<k>.bin
//   cache.bin
//   tombstones.log   append-only, one removed id per line
// ---------------------------------------------------------------------------

inline void save_registry(const Registry& reg, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "adapters");

    nlohmann::json meta;
    meta["k"] = reg.cfg.k;
    meta["capacity"] = reg.cfg.capacity;
    meta["partition_seed"] = reg.cfg.partition_seed;
    meta["random_partition"] = reg.cfg.random_partition;
    meta["parallel_training"] = reg.cfg.parallel_training;
    meta["train"] = {{"learning_rate", reg.cfg.train.learning_rate},
                     {"epochs", reg.cfg.train.epochs},
                     {"batch_size", reg.cfg.train.batch_size},
                     {"seed", reg.cfg.train.seed},
                     {"init_stddev", reg.cfg.train.init_stddev},
                     {"rank", reg.cfg.train.rank}};
    meta["original_n"] = reg.original_n;
    {
        std::ofstream out(fs::path(dir) / "meta.json");
        if (!out) throw std::runtime_error("save_registry: cannot write meta.json");
        out << meta.dump(2) << "\n";
    }

    save_base_model(reg.base, (fs::path(dir) / "base.bin").string());

    // Survivors only: removed samples must not persist anywhere but the log.
    Dataset survivors;
    survivors.dim = reg.train_data.dim;
    for (const auto& s : reg.train_data.samples) {
        if (!reg.tombstones.count(s.id)) survivors.samples.push_back(s);
    }
    save_jsonl(survivors, (fs::path(dir) / "train.jsonl").string());
    save_jsonl(reg.valid_data, (fs::path(dir) / "valid.jsonl").string());
    save_partition(reg.assignment, (fs::path(dir) / "partition.json").string());
    for (std::size_t k = 0; k < reg.adapters.size(); ++k) {
        save_adapter(reg.adapters[k],
                     (fs::path(dir) / "adapters" / ("shard_" + std::to_string(k) + ".bin"))
                         .string());
    }
    save_cache(reg.cache, (fs::path(dir) / "cache.bin").string());

    // Keep the log append-only: only ids not yet present are written.
    const fs::path log_path = fs::path(dir) / "tombstones.log";
    std::set<SampleId> logged;
    if (fs::exists(log_path)) {
        std::ifstream in(log_path);
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty()) logged.insert(std::stoll(line));
        }
    }
    std::ofstream log(log_path, std::ios::app);
    if (!log) throw std::runtime_error("save_registry: cannot write tombstones.log");
    for (SampleId id : reg.tombstones) {
        if (!logged.count(id)) log << id << "\n";
    }
}

inline Registry load_registry(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream meta_in(fs::path(dir) / "meta.json");
    if (!meta_in) throw std::runtime_error("load_registry: cannot open " + dir + "/meta.json");
    nlohmann::json meta;
    try {
        meta_in >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("load_registry: meta.json: ") + e.what());
    }

    Registry reg;
    reg.cfg.k = meta.at("k").get<std::size_t>();
    reg.cfg.capacity = meta.at("capacity").get<std::size_t>();
    reg.cfg.partition_seed = meta.at("partition_seed").get<std::uint64_t>();
    reg.cfg.random_partition = meta.at("random_partition").get<bool>();
    reg.cfg.parallel_training = meta.at("parallel_training").get<bool>();
    const auto& t = meta.at("train");
    reg.cfg.train.learning_rate = t.at("learning_rate").get<double>();
    reg.cfg.train.epochs = t.at("epochs").get<std::size_t>();
    reg.cfg.train.batch_size = t.at("batch_size").get<std::size_t>();
    reg.cfg.train.seed = t.at("seed").get<std::uint64_t>();
    reg.cfg.train.init_stddev = t.at("init_stddev").get<double>();
    reg.cfg.train.rank = t.at("rank").get<std::size_t>();
    reg.original_n = meta.at("original_n").get<std::size_t>();

    reg.base = load_base_model((fs::path(dir) / "base.bin").string());
    reg.train_data = load_samples((fs::path(dir) / "train.jsonl").string(), DataFormat::Jsonl);
    reg.valid_data = load_samples((fs::path(dir) / "valid.jsonl").string(), DataFormat::Jsonl);
    reg.assignment = load_partition((fs::path(dir) / "partition.json").string());
    if (reg.assignment.k != reg.cfg.k) {
        throw std::runtime_error("load_registry: partition K disagrees with meta.json");
    }
    reg.adapters.reserve(reg.cfg.k);
    for (std::size_t k = 0; k < reg.cfg.k; ++k) {
        reg.adapters.push_back(load_adapter(
            (fs::path(dir) / "adapters" / ("shard_" + std::to_string(k) + ".bin")).string()));
    }
    reg.cache = load_cache((fs::path(dir) / "cache.bin").string());

    const fs::path log_path = fs::path(dir) / "tombstones.log";
    if (fs::exists(log_path)) {
        std::ifstream in(log_path);
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty()) reg.tombstones.insert(std::stoll(line));
        }
    }

    reg.shard_ids.resize(reg.cfg.k);
    for (std::size_t k = 0; k < reg.cfg.k; ++k) {
        for (SampleId id : reg.assignment.shard_members[k]) {
            if (!reg.tombstones.count(id)) reg.shard_ids[k].push_back(id);
        }
    }
    std::size_t survivor_total = 0;
    for (const auto& ids : reg.shard_ids) survivor_total += ids.size();
    if (survivor_total != reg.train_data.samples.size()) {
        throw std::runtime_error("load_registry: survivor count disagrees with train.jsonl");
    }
    reg.valid_embs = embed_dataset(reg.base, reg.valid_data);
    return reg;
}

} // namespace apa
