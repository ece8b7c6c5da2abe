// Experiment driver: config file parsing, dataset preparation, and the
// command implementations behind the CLI. Reports are deterministic given
// seeds; wall-clock numbers are segregated into timings.csv.
#pragma once

#include <apa/dataset.hpp>
#include <apa/model.hpp>
#include <apa/partition.hpp>
#include <apa/serving.hpp>
#include <apa/training.hpp>
#include <apa/unlearning.hpp>
#include <apa/weighting.hpp>

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace apa {

struct SynthSpec {
    std::size_t n = 1324;
    std::size_t dim = 32;
    std::size_t clusters = 4;
    double noise = 0.1;
    std::uint64_t seed = 7;
};

struct FileSpec {
    std::string train;
    std::string valid;
    std::string test;
    DataFormat format = DataFormat::Jsonl;
    double rating_threshold = 0.5;
};

struct EvalSpec {
    bool ablate_strategies = false;
    bool ablate_levels = false;
};

struct ExperimentConfig {
    bool use_synth = true;
    SynthSpec synth;
    FileSpec files;
    SplitSpec split{1024, 150, 150, 11};
    BaseConfig base;
    RegistryConfig registry;
    AggregationConfig weighting;
    WeightingStrategy strategy = WeightingStrategy::Adaptive;
    EvalSpec eval;
    std::vector<SampleId> unlearn_ids;
    std::size_t bench_samples = 500;
    std::vector<std::size_t> bench_sweep;
    std::string out_dir = "out";
    std::string registry_dir = "registry";
};

namespace detail {

[[noreturn]] inline void config_error(const std::string& path, const std::string& what) {
    throw std::invalid_argument("config: " + path + ": " + what);
}

template <typename T>
void read_field(const nlohmann::json& j, const std::string& parent, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        config_error(parent + "." + key, e.what());
    }
}

inline AggregationLevel parse_level(const std::string& s, const std::string& path) {
    if (s == "decomposition") return AggregationLevel::Decomposition;
    if (s == "nondecomposition") return AggregationLevel::NonDecomposition;
    if (s == "concat") return AggregationLevel::Concat;
    config_error(path, "expected decomposition|nondecomposition|concat, got '" + s + "'");
}

inline WeightingStrategy parse_strategy(const std::string& s, const std::string& path) {
    if (s == "adaptive") return WeightingStrategy::Adaptive;
    if (s == "average") return WeightingStrategy::Average;
    if (s == "major") return WeightingStrategy::Major;
    if (s == "semantic") return WeightingStrategy::Semantic;
    config_error(path, "expected adaptive|average|major|semantic, got '" + s + "'");
}

inline DataFormat parse_format(const std::string& s, const std::string& path) {
    if (s == "jsonl") return DataFormat::Jsonl;
    if (s == "csv") return DataFormat::Csv;
    config_error(path, "expected jsonl|csv, got '" + s + "'");
}

} // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
    ExperimentConfig cfg;
    if (j.contains("data")) {
        const auto& data = j.at("data");
        if (data.contains("files")) {
            cfg.use_synth = false;
            const auto& f = data.at("files");
            detail::read_field(f, "data.files", "train", cfg.files.train);
            detail::read_field(f, "data.files", "valid", cfg.files.valid);
            detail::read_field(f, "data.files", "test", cfg.files.test);
            detail::read_field(f, "data.files", "rating_threshold", cfg.files.rating_threshold);
            if (f.contains("format")) {
                std::string format;
                detail::read_field(f, "data.files", "format", format);
                cfg.files.format = detail::parse_format(format, "data.files.format");
            }
            if (cfg.files.train.empty()) detail::config_error("data.files.train", "required");
            if (cfg.files.valid.empty()) detail::config_error("data.files.valid", "required");
        }
        if (data.contains("synth")) {
            if (!cfg.use_synth) {
                detail::config_error("data", "give either synth or files, not both");
            }
            const auto& s = data.at("synth");
            detail::read_field(s, "data.synth", "n", cfg.synth.n);
            detail::read_field(s, "data.synth", "dim", cfg.synth.dim);
            detail::read_field(s, "data.synth", "clusters", cfg.synth.clusters);
            detail::read_field(s, "data.synth", "noise", cfg.synth.noise);
            detail::read_field(s, "data.synth", "seed", cfg.synth.seed);
            cfg.base.d_in = cfg.synth.dim;
        }
        if (data.contains("split")) {
            const auto& s = data.at("split");
            detail::read_field(s, "data.split", "train", cfg.split.train_size);
            detail::read_field(s, "data.split", "valid", cfg.split.valid_size);
            detail::read_field(s, "data.split", "test", cfg.split.test_size);
            detail::read_field(s, "data.split", "seed", cfg.split.seed);
        }
    }
    if (j.contains("base")) {
        const auto& b = j.at("base");
        detail::read_field(b, "base", "d_in", cfg.base.d_in);
        detail::read_field(b, "base", "hidden_width", cfg.base.hidden_width);
        detail::read_field(b, "base", "hidden_layers", cfg.base.hidden_layers);
        detail::read_field(b, "base", "seed", cfg.base.seed);
    }
    if (j.contains("registry")) {
        const auto& r = j.at("registry");
        detail::read_field(r, "registry", "k", cfg.registry.k);
        detail::read_field(r, "registry", "capacity", cfg.registry.capacity);
        detail::read_field(r, "registry", "partition_seed", cfg.registry.partition_seed);
        detail::read_field(r, "registry", "random_partition", cfg.registry.random_partition);
        detail::read_field(r, "registry", "parallel_training", cfg.registry.parallel_training);
        if (cfg.registry.k == 0) detail::config_error("registry.k", "must be >= 1");
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        detail::read_field(t, "train", "learning_rate", cfg.registry.train.learning_rate);
        detail::read_field(t, "train", "epochs", cfg.registry.train.epochs);
        detail::read_field(t, "train", "batch_size", cfg.registry.train.batch_size);
        detail::read_field(t, "train", "seed", cfg.registry.train.seed);
        detail::read_field(t, "train", "init_stddev", cfg.registry.train.init_stddev);
        detail::read_field(t, "train", "rank", cfg.registry.train.rank);
        try {
            validate_train_config(cfg.registry.train);
        } catch (const std::invalid_argument& e) {
            detail::config_error("train", e.what());
        }
    }
    if (j.contains("weighting")) {
        const auto& w = j.at("weighting");
        detail::read_field(w, "weighting", "tau", cfg.weighting.tau);
        detail::read_field(w, "weighting", "neighbors", cfg.weighting.n_neighbors);
        if (cfg.weighting.tau < 0.0) detail::config_error("weighting.tau", "must be >= 0");
        if (cfg.weighting.n_neighbors == 0) {
            detail::config_error("weighting.neighbors", "must be >= 1");
        }
        if (w.contains("level")) {
            std::string level;
            detail::read_field(w, "weighting", "level", level);
            cfg.weighting.level = detail::parse_level(level, "weighting.level");
        }
        if (w.contains("strategy")) {
            std::string strategy;
            detail::read_field(w, "weighting", "strategy", strategy);
            cfg.strategy = detail::parse_strategy(strategy, "weighting.strategy");
        }
    }
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        detail::read_field(e, "eval", "ablate_strategies", cfg.eval.ablate_strategies);
        detail::read_field(e, "eval", "ablate_levels", cfg.eval.ablate_levels);
    }
    if (j.contains("unlearn")) {
        detail::read_field(j.at("unlearn"), "unlearn", "ids", cfg.unlearn_ids);
    }
    if (j.contains("bench")) {
        detail::read_field(j.at("bench"), "bench", "samples", cfg.bench_samples);
        detail::read_field(j.at("bench"), "bench", "sweep", cfg.bench_sweep);
    }
    detail::read_field(j, "(root)", "out_dir", cfg.out_dir);
    detail::read_field(j, "(root)", "registry_dir", cfg.registry_dir);
    return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("config: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument("config: " + path + ": " + e.what());
    }
    return parse_config(j);
}

struct ExperimentData {
    Dataset train;
    Dataset valid;
    Dataset test;
};

inline ExperimentData prepare_data(const ExperimentConfig& cfg) {
    ExperimentData out;
    if (cfg.use_synth) {
        const Dataset all = synth_generate(cfg.synth.n, cfg.synth.dim, cfg.synth.clusters,
                                           cfg.synth.noise, cfg.synth.seed);
        std::tie(out.train, out.valid, out.test) = split(all, cfg.split);
    } else {
        out.train = load_samples(cfg.files.train, cfg.files.format, cfg.files.rating_threshold);
        out.valid = load_samples(cfg.files.valid, cfg.files.format, cfg.files.rating_threshold);
        if (!cfg.files.test.empty()) {
            out.test = load_samples(cfg.files.test, cfg.files.format, cfg.files.rating_threshold);
        } else {
            out.test.dim = out.train.dim;
        }
    }
    if (out.train.dim != cfg.base.d_in) {
        throw std::invalid_argument("config: base.d_in is " + std::to_string(cfg.base.d_in) +
                                    " but the training data has dimension " +
                                    std::to_string(out.train.dim));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Report writers.
// ---------------------------------------------------------------------------

namespace detail {

inline void ensure_dir(const std::string& dir) {
    std::filesystem::create_directories(dir);
}

inline std::string csv_double(double v) {
    std::ostringstream s;
    s.precision(17);
    s << v;
    return s.str();
}

} // namespace detail

inline void write_report(const nlohmann::json& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_report: cannot open " + path);
    out << report.dump(2) << "\n";
}

inline void append_timing(const std::string& path, const std::string& method,
                          const std::string& phase, double seconds) {
    const bool fresh = !std::filesystem::exists(path);
    std::ofstream out(path, std::ios::app);
    if (!out) throw std::runtime_error("append_timing: cannot open " + path);
    if (fresh) out << "method,phase,seconds\n";
    out << method << "," << phase << "," << detail::csv_double(seconds) << "\n";
}

inline void write_predictions_csv(const std::vector<std::vector<Prediction>>& blocks,
                                  const Dataset& data, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_predictions_csv: cannot open " + path);
    out << "id,score,label,method\n";
    auto index = detail::index_dataset(data);
    for (const auto& block : blocks) {
        for (const auto& p : block) {
            out << p.id << "," << detail::csv_double(p.score) << ","
                << data.samples[index.at(p.id)].label << "," << p.method << "\n";
        }
    }
}

// ---------------------------------------------------------------------------
// Commands. Each throws on error; the CLI maps exception types to exit codes.
// ---------------------------------------------------------------------------

inline void cmd_synth(const ExperimentConfig& cfg) {
    if (!cfg.use_synth) {
        throw std::invalid_argument("config: synth command requires data.synth settings");
    }
    const ExperimentData data = prepare_data(cfg);
    detail::ensure_dir(cfg.out_dir);
    namespace fs = std::filesystem;
    save_jsonl(data.train, (fs::path(cfg.out_dir) / "train.jsonl").string());
    save_jsonl(data.valid, (fs::path(cfg.out_dir) / "valid.jsonl").string());
    save_jsonl(data.test, (fs::path(cfg.out_dir) / "test.jsonl").string());
    std::cout << "wrote " << data.train.samples.size() << " train / "
              << data.valid.samples.size() << " valid / " << data.test.samples.size()
              << " test samples to " << cfg.out_dir << "\n";
}

inline void cmd_partition(const ExperimentConfig& cfg) {
    const ExperimentData data = prepare_data(cfg);
    const BaseModel base = make_base_model(cfg.base);
    const auto embs = embed_dataset(base, data.train);
    const std::size_t t = cfg.registry.capacity
                              ? cfg.registry.capacity
                              : default_capacity(data.train.samples.size(), cfg.registry.k);
    const ClusterCenters centers = kmeans(embs, cfg.registry.k, cfg.registry.partition_seed);
    const ShardAssignment assignment =
        cfg.registry.random_partition
            ? random_assign(embs, centers, t, cfg.registry.partition_seed)
            : balanced_assign(embs, centers, t);
    detail::ensure_dir(cfg.registry_dir);
    namespace fs = std::filesystem;
    save_partition(assignment, (fs::path(cfg.registry_dir) / "partition.json").string());
    std::cout << "partitioned " << data.train.samples.size() << " samples into "
              << assignment.k << " shards (capacity " << assignment.capacity << ")\n";
}

inline void cmd_train(const ExperimentConfig& cfg) {
    const ExperimentData data = prepare_data(cfg);
    const BaseModel base = make_base_model(cfg.base);
    namespace fs = std::filesystem;
    const std::string partition_path = (fs::path(cfg.registry_dir) / "partition.json").string();
    const auto t0 = std::chrono::steady_clock::now();
    Registry reg;
    if (fs::exists(partition_path)) {
        const ShardAssignment fixed = load_partition(partition_path);
        reg = build_registry(data.train, data.valid, base, cfg.registry, &fixed);
    } else {
        reg = build_registry(data.train, data.valid, base, cfg.registry);
    }
    const double secs = detail::seconds_since(t0);
    save_registry(reg, cfg.registry_dir);
    detail::ensure_dir(cfg.out_dir);
    append_timing((fs::path(cfg.out_dir) / "timings.csv").string(), "train", "total", secs);
    std::cout << "trained " << reg.adapters.size() << " shard adapters in " << secs
              << "s; registry saved to " << cfg.registry_dir << "\n";
}

inline nlohmann::json eval_report(const Registry& reg, const Dataset& test,
                                  const ExperimentConfig& cfg,
                                  std::vector<std::vector<Prediction>>* blocks_out = nullptr) {
    if (test.samples.empty()) {
        throw std::invalid_argument("eval: no test samples configured");
    }
    nlohmann::json report;
    report["n_test"] = test.samples.size();
    report["k"] = reg.adapters.size();

    std::vector<std::vector<Prediction>> blocks;

    // Per-shard adapters on their own.
    nlohmann::json singles = nlohmann::json::array();
    double single_sum = 0.0;
    for (std::size_t k = 0; k < reg.adapters.size(); ++k) {
        std::vector<Prediction> preds;
        preds.reserve(test.samples.size());
        for (const auto& s : test.samples) preds.push_back(predict_single(reg, s, k));
        const double a = auc(preds, test);
        singles.push_back(a);
        single_sum += a;
        blocks.push_back(std::move(preds));
    }
    report["auc"]["single"] = singles;
    report["auc"]["single_mean"] = single_sum / static_cast<double>(reg.adapters.size());

    {
        std::vector<Prediction> preds;
        preds.reserve(test.samples.size());
        for (const auto& s : test.samples) preds.push_back(predict_sisa(reg, s));
        report["auc"]["sisa"] = auc(preds, test);
        blocks.push_back(std::move(preds));
    }

    std::vector<WeightingStrategy> strategies{cfg.strategy};
    if (cfg.eval.ablate_strategies) {
        strategies = {WeightingStrategy::Adaptive, WeightingStrategy::Average,
                      WeightingStrategy::Major, WeightingStrategy::Semantic};
    }
    std::vector<AggregationLevel> levels{cfg.weighting.level};
    if (cfg.eval.ablate_levels) {
        levels = {AggregationLevel::Decomposition, AggregationLevel::NonDecomposition,
                  AggregationLevel::Concat};
    }
    for (const auto strategy : strategies) {
        for (const auto level : levels) {
            AggregationConfig agg_cfg = cfg.weighting;
            agg_cfg.level = level;
            std::vector<Prediction> preds = predict_dataset(reg, test, agg_cfg, strategy);
            report["auc"]["apa"][strategy_name(strategy) + "@" + level_name(level)] =
                auc(preds, test);
            blocks.push_back(std::move(preds));
        }
    }
    if (blocks_out) *blocks_out = std::move(blocks);
    return report;
}

inline void cmd_eval(const ExperimentConfig& cfg) {
    const Registry reg = load_registry(cfg.registry_dir);
    const ExperimentData data = prepare_data(cfg);
    detail::ensure_dir(cfg.out_dir);
    namespace fs = std::filesystem;
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::vector<Prediction>> blocks;
    const nlohmann::json report = eval_report(reg, data.test, cfg, &blocks);
    const double secs = detail::seconds_since(t0);
    write_report(report, (fs::path(cfg.out_dir) / "report.json").string());
    write_predictions_csv(blocks, data.test,
                          (fs::path(cfg.out_dir) / "predictions.csv").string());
    append_timing((fs::path(cfg.out_dir) / "timings.csv").string(), "eval", "predict", secs);
    std::cout << report.dump(2) << "\n";
}

inline void cmd_predict(const ExperimentConfig& cfg) {
    const Registry reg = load_registry(cfg.registry_dir);
    const ExperimentData data = prepare_data(cfg);
    if (data.test.samples.empty()) {
        throw std::invalid_argument("predict: no test samples configured");
    }
    detail::ensure_dir(cfg.out_dir);
    namespace fs = std::filesystem;
    std::vector<std::vector<Prediction>> blocks{
        predict_dataset(reg, data.test, cfg.weighting, cfg.strategy)};
    write_predictions_csv(blocks, data.test,
                          (fs::path(cfg.out_dir) / "predictions.csv").string());
    std::cout << "wrote " << blocks[0].size() << " predictions to " << cfg.out_dir
              << "/predictions.csv\n";
}

inline void cmd_unlearn(const ExperimentConfig& cfg) {
    if (cfg.unlearn_ids.empty()) {
        throw std::invalid_argument("config: unlearn.ids must name at least one sample");
    }
    Registry reg = load_registry(cfg.registry_dir);
    const UnlearnReport report = unlearn(reg, UnlearnRequest{cfg.unlearn_ids});
    save_registry(reg, cfg.registry_dir);
    detail::ensure_dir(cfg.out_dir);
    namespace fs = std::filesystem;
    nlohmann::json j;
    j["affected_shards"] = report.affected;
    j["samples_removed"] = report.samples_removed;
    j["tombstones_total"] = reg.tombstones.size();
    write_report(j, (fs::path(cfg.out_dir) / "unlearn_report.json").string());
    const std::string timings = (fs::path(cfg.out_dir) / "timings.csv").string();
    for (std::size_t i = 0; i < report.affected.size(); ++i) {
        append_timing(timings, "unlearn", "shard_" + std::to_string(report.affected[i]),
                      report.retrain_seconds[i]);
    }
    append_timing(timings, "unlearn", "total", report.total_seconds);
    std::cout << j.dump(2) << "\n";
}

struct SweepPoint {
    std::size_t shard_size = 0;
    std::size_t k = 0;
    double auc = 0.0;
    double retrain_seconds = 0.0;
};

/// Shard-size sweep: rebuild the registry at each capacity (K = ceil(n / t)),
/// score the test split, and time the retraining triggered by removing one
/// sample from the first shard. Smaller shards retrain faster; this measures
/// by how much.
inline std::vector<SweepPoint> shard_size_sweep(const Dataset& train, const Dataset& valid,
                                                const Dataset& test, const BaseModel& base,
                                                const RegistryConfig& base_cfg,
                                                const AggregationConfig& agg,
                                                WeightingStrategy strategy,
                                                const std::vector<std::size_t>& sizes) {
    std::vector<SweepPoint> out;
    out.reserve(sizes.size());
    for (std::size_t t : sizes) {
        if (t == 0) throw std::invalid_argument("shard_size_sweep: shard size must be >= 1");
        RegistryConfig cfg = base_cfg;
        cfg.capacity = t;
        cfg.k = (train.samples.size() + t - 1) / t;
        Registry reg = build_registry(train, valid, base, cfg);
        SweepPoint p;
        p.shard_size = t;
        p.k = cfg.k;
        if (!test.samples.empty()) {
            p.auc = auc(predict_dataset(reg, test, agg, strategy), test);
        }
        const SampleId victim = reg.shard_ids.front().front();
        const UnlearnReport rep = unlearn(reg, UnlearnRequest{{victim}});
        p.retrain_seconds = rep.retrain_seconds.front();
        out.push_back(p);
    }
    return out;
}

inline void cmd_bench(const ExperimentConfig& cfg) {
    if (!cfg.bench_sweep.empty()) {
        const ExperimentData data = prepare_data(cfg);
        const BaseModel base = make_base_model(cfg.base);
        const auto points = shard_size_sweep(data.train, data.valid, data.test, base,
                                             cfg.registry, cfg.weighting, cfg.strategy,
                                             cfg.bench_sweep);
        detail::ensure_dir(cfg.out_dir);
        namespace fs = std::filesystem;
        nlohmann::json j = nlohmann::json::array();
        const std::string timings = (fs::path(cfg.out_dir) / "timings.csv").string();
        for (const auto& p : points) {
            j.push_back({{"shard_size", p.shard_size}, {"k", p.k}, {"auc", p.auc}});
            append_timing(timings, "sweep_" + std::to_string(p.shard_size), "retrain",
                          p.retrain_seconds);
            std::cout << "shard size " << p.shard_size << " (k=" << p.k << "): auc " << p.auc
                      << ", retrain " << p.retrain_seconds << "s\n";
        }
        write_report(j, (fs::path(cfg.out_dir) / "sweep.json").string());
        return;
    }
    const Registry reg = load_registry(cfg.registry_dir);
    const ExperimentData data = prepare_data(cfg);
    if (data.test.samples.empty()) {
        throw std::invalid_argument("bench: no test samples configured");
    }
    Dataset bench_set;
    bench_set.dim = data.test.dim;
    const std::size_t n = std::min(cfg.bench_samples, data.test.samples.size());
    bench_set.samples.assign(data.test.samples.begin(),
                             data.test.samples.begin() + static_cast<std::ptrdiff_t>(n));
    detail::ensure_dir(cfg.out_dir);
    namespace fs = std::filesystem;
    const std::string timings = (fs::path(cfg.out_dir) / "timings.csv").string();

    const InferenceBench inf = bench_inference(reg, bench_set, cfg.weighting);
    append_timing(timings, "bench_inference", "apa", inf.t_apa);
    append_timing(timings, "bench_inference", "sisa", inf.t_sisa);
    append_timing(timings, "bench_inference", "single", inf.t_single);

    SampleId victim = -1;
    for (const auto& ids : reg.shard_ids) {
        if (!ids.empty()) {
            victim = ids.front();
            break;
        }
    }
    if (victim < 0) throw std::runtime_error("bench: registry has no surviving samples");
    const UnlearnBench ub = bench_unlearn(reg, UnlearnRequest{{victim}});
    append_timing(timings, "bench_unlearn", "apa", ub.t_apa);
    append_timing(timings, "bench_unlearn", "full_retrain", ub.t_full);
    append_timing(timings, "bench_unlearn", "speedup", ub.speedup);

    std::cout << "inference over " << inf.samples << " samples: apa " << inf.t_apa << "s, sisa "
              << inf.t_sisa << "s, single " << inf.t_single << "s\n"
              << "unlearn one sample: " << ub.t_apa << "s vs full retrain " << ub.t_full
              << "s (speedup " << ub.speedup << "x)\n";
}

} // namespace apa
