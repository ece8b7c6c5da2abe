// Command line front end. Every subcommand reads one JSON config file and a
// few targeted overrides; heavy lifting lives in the library headers.
//
// Exit codes: 0 success, 1 bad config or data, 2 internal invariant violation.
#include <apa/apa.hpp>

#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

namespace {

apa::ExperimentConfig make_config(const std::string& config_path, const std::string& out_dir,
                                  const std::string& registry_dir) {
    apa::ExperimentConfig cfg;
    if (!config_path.empty()) cfg = apa::load_config(config_path);
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (!registry_dir.empty()) cfg.registry_dir = registry_dir;
    return cfg;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"adapter partition and aggregation toolkit"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    std::string registry_dir;
    app.add_option("-c,--config", config_path, "JSON config file")->capture_default_str();
    app.add_option("-o,--out", out_dir, "output directory (overrides config)");
    app.add_option("-r,--registry", registry_dir, "registry directory (overrides config)");

    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset split");
    std::size_t synth_n = 0;
    std::uint64_t synth_seed = 0;
    bool synth_seed_set = false;
    synth->add_option("-n,--samples", synth_n, "total sample count (overrides config)");
    synth->add_option("--seed", synth_seed, "generator seed (overrides config)")
        ->each([&](const std::string&) { synth_seed_set = true; });

    auto* partition = app.add_subcommand("partition", "cluster and assign training samples");
    std::size_t part_k = 0;
    std::size_t part_capacity = 0;
    bool part_random = false;
    partition->add_option("-k,--shards", part_k, "shard count (overrides config)");
    partition->add_option("-t,--capacity", part_capacity, "shard capacity (overrides config)");
    partition->add_flag("--random", part_random, "random assignment instead of balanced");

    auto* train = app.add_subcommand("train", "train per-shard adapters and build the registry");
    std::size_t train_epochs = 0;
    train->add_option("--epochs", train_epochs, "training epochs (overrides config)");

    auto* eval = app.add_subcommand("eval", "score the test split and write reports");
    bool eval_ablate_strategies = false;
    bool eval_ablate_levels = false;
    eval->add_flag("--ablate-strategies", eval_ablate_strategies,
                   "evaluate all four weighting strategies");
    eval->add_flag("--ablate-levels", eval_ablate_levels, "evaluate all three aggregation levels");

    auto* predict = app.add_subcommand("predict", "write predictions for the test split");
    std::string predict_strategy;
    std::string predict_level;
    predict->add_option("--strategy", predict_strategy,
                        "adaptive|average|major|semantic (overrides config)");
    predict->add_option("--level", predict_level,
                        "decomposition|nondecomposition|concat (overrides config)");

    auto* unlearn = app.add_subcommand("unlearn", "remove training samples and retrain");
    std::vector<apa::SampleId> unlearn_ids;
    unlearn->add_option("--ids", unlearn_ids, "sample ids to remove (overrides config)");

    auto* bench = app.add_subcommand("bench", "time inference and unlearning");
    std::size_t bench_samples = 0;
    std::vector<std::size_t> bench_sweep;
    bench->add_option("-n,--samples", bench_samples, "inference sample count (overrides config)");
    bench->add_option("--sweep", bench_sweep,
                      "shard sizes to sweep instead of benching the saved registry");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        apa::ExperimentConfig cfg = make_config(config_path, out_dir, registry_dir);
        if (synth->parsed()) {
            if (synth_n) cfg.synth.n = synth_n;
            if (synth_seed_set) cfg.synth.seed = synth_seed;
            apa::cmd_synth(cfg);
        } else if (partition->parsed()) {
            if (part_k) cfg.registry.k = part_k;
            if (part_capacity) cfg.registry.capacity = part_capacity;
            if (part_random) cfg.registry.random_partition = true;
            apa::cmd_partition(cfg);
        } else if (train->parsed()) {
            if (train_epochs) cfg.registry.train.epochs = train_epochs;
            apa::cmd_train(cfg);
        } else if (eval->parsed()) {
            if (eval_ablate_strategies) cfg.eval.ablate_strategies = true;
            if (eval_ablate_levels) cfg.eval.ablate_levels = true;
            apa::cmd_eval(cfg);
        } else if (predict->parsed()) {
            if (!predict_strategy.empty()) {
                cfg.strategy = apa::detail::parse_strategy(predict_strategy, "--strategy");
            }
            if (!predict_level.empty()) {
                cfg.weighting.level = apa::detail::parse_level(predict_level, "--level");
            }
            apa::cmd_predict(cfg);
        } else if (unlearn->parsed()) {
            if (!unlearn_ids.empty()) cfg.unlearn_ids = unlearn_ids;
            apa::cmd_unlearn(cfg);
        } else if (bench->parsed()) {
            if (bench_samples) cfg.bench_samples = bench_samples;
            if (!bench_sweep.empty()) cfg.bench_sweep = bench_sweep;
            apa::cmd_bench(cfg);
        }
        return 0;
    } catch (const apa::invariant_error& e) {
        std::cerr << "invariant violation: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
