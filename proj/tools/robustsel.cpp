// robustsel: feature scoring and consensus selection, tree-ensemble training,
// interval-constrained evasion attacks, and the robustness benchmark over
// network-flow CSVs.
//
// Exit codes: 0 success, 2 input/data error, 3 degenerate computation,
// 1 unexpected failure.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "robustsel/benchmark.hpp"
#include "robustsel/consensus.hpp"
#include "robustsel/csv.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace robustsel;

namespace {

struct CommonArgs {
    std::string data;
    std::string schema;
    std::string out = ".";
    std::uint64_t seed = 0;
    unsigned jobs = default_jobs();
    bool strict = false;
};

std::uint64_t env_seed() {
    const char* env = std::getenv("ROBUSTSEL_SEED");
    if (!env) return 0;
    return std::strtoull(env, nullptr, 10);
}

json load_config_arg(int argc, char** argv) {
    std::string path;
    for (int i = 1; i < argc; ++i) {
        std::string arg = argv[i];
        if (arg == "--config" && i + 1 < argc) path = argv[i + 1];
        else if (arg.rfind("--config=", 0) == 0) path = arg.substr(9);
    }
    if (path.empty()) return json::object();
    try {
        return json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw ConfigError("cannot parse config file " + path + ": " + e.what());
    }
}

template <typename T>
T jget(const json& j, const char* key, T fallback) {
    if (j.contains(key)) return j.at(key).get<T>();
    return fallback;
}

FeatureTable load_clean_table(const CommonArgs& args, const FeatureSchema& schema) {
    CsvOptions options;
    options.strict = args.strict;
    CsvReport report;
    FeatureTable raw = load_csv(args.data, schema, options, &report);
    if (!report.dropped.empty())
        std::fprintf(stderr, "robustsel: dropped %zu unparseable row(s) while reading %s\n",
                     report.dropped.size(), args.data.c_str());
    CleanStats stats;
    FeatureTable table = clean(raw, &stats);
    if (stats.rows_dropped || stats.cells_clamped)
        std::fprintf(stderr, "robustsel: cleaning removed %zu row(s), clamped %zu cell(s)\n",
                     stats.rows_dropped, stats.cells_clamped);
    return table;
}

std::vector<GroupSpecEntry> load_groups_arg(const std::string& path) {
    if (path.empty()) return {};
    return load_group_spec(path);
}

// ---------------------------------------------------------------------------

int run_synth(const CommonArgs& args, const SynthSpec& spec) {
    auto result = synthesize(spec);
    fs::path out(args.out);
    write_csv(out / "data.csv", result.table);
    save_schema(out / "schema.json", result.table.schema);
    std::printf("robustsel: wrote %s (%zu rows, %zu features, %zu malicious)\n",
                (out / "data.csv").c_str(), result.table.n_rows(), result.table.n_features(),
                result.table.count_malicious());
    std::printf("robustsel: wrote %s\n", (out / "schema.json").c_str());
    return 0;
}

int run_select(const CommonArgs& args, double threshold) {
    FeatureSchema schema = load_schema(args.schema);
    FeatureTable table = load_clean_table(args, schema);
    fs::path out(args.out);

    std::vector<RelevanceVector> vectors;
    auto methods = all_methods();
    for (std::size_t i = 0; i < methods.size(); ++i) {
        Method m = methods[i];
        auto raw = score_all(table, m, derive_seed(args.seed, "select", i));
        write_file_atomic(out / ("raw_" + method_name(m) + ".json"),
                          raw_scores_to_json(raw, schema.names).dump(2) + "\n");
        vectors.push_back(normalize(raw));
        std::fprintf(stderr, "robustsel: scored %s\n", method_name(m).c_str());
    }
    auto ranking = consensus_rank(schema.names, vectors, threshold);
    export_feature_set(ranking, "consensus", out / "consensus.json");

    std::printf("Consensus ranking (threshold %.2f%%, %zu of %zu features survive)\n", threshold * 100.0,
                ranking.surviving.size(), schema.n_features());
    std::printf("%4s  %-32s %s\n", "No.", "Feature", "Relevance");
    for (std::size_t i = 0; i < ranking.surviving.size(); ++i)
        std::printf("%4zu  %-32s %8.2f%%\n", i + 1, ranking.surviving[i].name.c_str(),
                    ranking.surviving[i].mean_relevance * 100.0);
    std::printf("vetoed: %zu feature(s)\n", ranking.vetoed.size());
    return 0;
}

std::vector<FeatureSetArtifact> resolve_feature_sets(const std::vector<std::string>& sources,
                                                     const FeatureTable& table, double threshold,
                                                     double train_fraction, std::uint64_t seed) {
    std::vector<FeatureSetArtifact> sets;
    for (const auto& source : sources) {
        if (source == "time_related") {
            FeatureSetArtifact fs;
            fs.name = "time_related";
            for (const auto& name : time_related_features())
                if (table.schema.has_feature(name)) fs.features.push_back(name);
            if (fs.features.empty())
                throw DataError("none of the time-related features exist in this schema");
            sets.push_back(std::move(fs));
        } else if (source == "consensus") {
            // scored on the same training split the benchmark will use
            SplitPair split = stratified_split(table, train_fraction, benchmark_split_seed(seed));
            std::vector<RelevanceVector> vectors;
            auto methods = all_methods();
            for (std::size_t i = 0; i < methods.size(); ++i)
                vectors.push_back(
                    normalize(score_all(split.train, methods[i], derive_seed(seed, "select", i))));
            auto ranking = consensus_rank(table.schema.names, vectors, threshold);
            FeatureSetArtifact fs;
            fs.name = "consensus";
            for (const auto& e : ranking.surviving) {
                fs.features.push_back(e.name);
                fs.mean_relevance.push_back(e.mean_relevance);
            }
            std::fprintf(stderr, "robustsel: consensus kept %zu of %zu features\n", fs.features.size(),
                         table.n_features());
            sets.push_back(std::move(fs));
        } else {
            sets.push_back(import_feature_set(source));
        }
    }
    return sets;
}

int run_bench(const CommonArgs& args, const std::vector<std::string>& feature_sources,
              const std::vector<std::string>& family_names, double threshold, int max_iter,
              double magnitude, const std::string& groups_path, const std::string& format) {
    FeatureSchema schema = load_schema(args.schema);
    FeatureTable table = load_clean_table(args, schema);

    std::vector<Family> families;
    if (family_names.empty())
        families.assign(all_families().begin(), all_families().end());
    else
        for (const auto& name : family_names) families.push_back(family_from_name(name));

    BenchmarkOptions options;
    options.max_iter = max_iter;
    options.magnitude = magnitude;
    options.jobs = args.jobs;
    options.keep_models = true;
    options.groups = load_groups_arg(groups_path);
    options.dataset_id = fs::path(args.data).stem().string();

    auto sources = feature_sources;
    if (sources.empty()) sources = {"consensus"};
    auto sets = resolve_feature_sets(sources, table, threshold, options.train_fraction, args.seed);

    BenchmarkMatrix matrix = run_benchmark(table, sets, families, args.seed, options);

    fs::path out(args.out);
    write_file_atomic(out / "benchmark.json", render_report(matrix, ReportFormat::json));
    write_file_atomic(out / "benchmark.txt", render_report(matrix, ReportFormat::text_table));
    if (format == "csv")
        write_file_atomic(out / "benchmark.csv", render_report(matrix, ReportFormat::csv));
    for (const auto& [key, model] : matrix.models) {
        std::string file = key;
        for (auto& c : file)
            if (c == '/') c = '_';
        save_model(model, out / "models" / (file + ".json"));
    }
    std::fputs(render_report(matrix, ReportFormat::text_table).c_str(), stdout);
    std::printf("\nrobustsel: wrote %s and %s\n", (out / "benchmark.json").c_str(),
                (out / "benchmark.txt").c_str());
    return 0;
}

int run_attack(const CommonArgs& args, const std::string& model_path, const std::string& pattern_data,
               const std::string& groups_path, int max_iter, double magnitude,
               std::size_t features_per_step) {
    TrainedEnsemble model = load_model(model_path);
    FeatureSchema schema = load_schema(args.schema);
    FeatureTable full = load_clean_table(args, schema);
    for (const auto& name : model.feature_names)
        if (!full.schema.has_feature(name))
            throw SchemaError("holdout is missing model feature '" + name + "'");
    FeatureTable holdout = select_features(full, model.feature_names);

    FeatureTable pattern_table = holdout;
    if (!pattern_data.empty()) {
        CommonArgs pattern_args = args;
        pattern_args.data = pattern_data;
        pattern_table = select_features(load_clean_table(pattern_args, schema), model.feature_names);
    }
    auto groups = resolve_groups(load_groups_arg(groups_path), holdout.schema, /*strict=*/false);
    PerturbationPattern pattern = learn_patterns(pattern_table, groups);

    PerturbationConfig cfg;
    cfg.magnitude = magnitude;
    cfg.features_per_step = features_per_step;
    cfg.seed = derive_seed(args.seed, "cmd_attack");
    AttackResult result = evasion_attack(model, holdout, pattern, cfg, max_iter);

    fs::path out(args.out);
    write_csv(out / "adversarial_holdout.csv", result.adversarial_holdout);
    write_file_atomic(out / "attack_trace.json", attack_trace_to_json(result).dump(2) + "\n");

    std::size_t evaded = 0;
    for (auto e : result.evaded_mask) evaded += e;
    std::printf("robustsel: attack ran %d iteration(s); %zu of %zu malicious rows evade detection\n",
                result.iterations_run, evaded, result.malicious_rows.size());
    std::printf("robustsel: final recall %.4f\n", result.trace.back().recall);
    std::printf("robustsel: wrote %s and %s\n", (out / "adversarial_holdout.csv").c_str(),
                (out / "attack_trace.json").c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        json config = load_config_arg(argc, argv);

        CLI::App app{"feature selection consensus and adversarial robustness benchmark for "
                     "network-flow datasets"};
        app.require_subcommand(1);
        std::string config_path;
        app.add_option("--config", config_path, "JSON config file; command-line flags win");

        CommonArgs args;
        args.seed = jget<std::uint64_t>(config, "seed", env_seed());
        args.data = jget<std::string>(config, "data", "");
        args.schema = jget<std::string>(config, "schema", "");
        args.out = jget<std::string>(config, "out", ".");
        args.jobs = jget<unsigned>(config, "jobs", default_jobs());
        args.strict = jget<bool>(config, "strict", false);

        auto add_common = [&](CLI::App* cmd, bool needs_data) {
            if (needs_data) {
                cmd->add_option("--data", args.data, "input CSV file");
                cmd->add_option("--schema", args.schema, "schema JSON sidecar");
            }
            cmd->add_option("--config", config_path, "JSON config file; command-line flags win");
            cmd->add_option("--out", args.out, "output directory");
            cmd->add_option("--seed", args.seed, "master seed (env ROBUSTSEL_SEED as fallback)");
            cmd->add_option("--jobs", args.jobs, "worker thread cap");
            cmd->add_flag("--strict", args.strict, "fail on any unparseable CSV row");
        };

        // synth
        auto* synth = app.add_subcommand("synth", "generate a synthetic flow dataset");
        SynthSpec spec;
        spec.n_rows = jget<std::size_t>(config, "rows", 1000);
        spec.n_informative = jget<std::size_t>(config, "informative", 5);
        spec.n_noise = jget<std::size_t>(config, "noise", 20);
        spec.class_ratio = jget<double>(config, "ratio", 0.1);
        synth->add_option("--rows", spec.n_rows, "number of rows");
        synth->add_option("--informative", spec.n_informative, "informative feature count");
        synth->add_option("--noise", spec.n_noise, "noise feature count");
        synth->add_option("--ratio", spec.class_ratio, "malicious class fraction");
        add_common(synth, false);

        // select
        auto* select = app.add_subcommand("select", "score features and build the consensus ranking");
        double threshold = jget<double>(config, "threshold", 0.01);
        select->add_option("--threshold", threshold, "veto threshold (fraction of relevance)");
        add_common(select, true);

        // bench
        auto* bench = app.add_subcommand("bench", "run the robustness benchmark matrix");
        std::vector<std::string> feature_sources =
            jget<std::vector<std::string>>(config, "features", {});
        std::vector<std::string> family_names = jget<std::vector<std::string>>(config, "families", {});
        int max_iter = jget<int>(config, "max_iter", 15);
        double magnitude = jget<double>(config, "magnitude", 0.25);
        std::string groups_path = jget<std::string>(config, "groups", "");
        std::string format = jget<std::string>(config, "format", "");
        bench->add_option("--features", feature_sources,
                          "feature set source: a JSON file, 'consensus', or 'time_related' (repeatable)");
        bench->add_option("--family", family_names,
                          "model family: random_forest, levelwise_gbt, leafwise_gbt, cyclic_gam "
                          "(repeatable; default all)");
        bench->add_option("--threshold", threshold, "consensus veto threshold");
        bench->add_option("--max-iter", max_iter, "evasion attack iteration cap");
        bench->add_option("--magnitude", magnitude, "perturbation magnitude (fraction of interval)");
        bench->add_option("--groups", groups_path, "correlated feature group spec JSON");
        bench->add_option("--format", format, "extra report format: csv");
        add_common(bench, true);

        // attack
        auto* attack = app.add_subcommand("attack", "run a model-specific evasion attack on a holdout");
        std::string model_path = jget<std::string>(config, "model", "");
        std::string pattern_data = jget<std::string>(config, "pattern_data", "");
        std::size_t features_per_step = jget<std::size_t>(config, "features_per_step", 1);
        attack->add_option("--model", model_path, "trained model artifact JSON");
        attack->add_option("--pattern-data", pattern_data,
                           "CSV to learn perturbation intervals from (default: the holdout itself)");
        attack->add_option("--groups", groups_path, "correlated feature group spec JSON");
        attack->add_option("--max-iter", max_iter, "attack iteration cap");
        attack->add_option("--magnitude", magnitude, "perturbation magnitude");
        attack->add_option("--features-per-step", features_per_step, "features perturbed per iteration");
        add_common(attack, true);

        try {
            app.parse(argc, argv);
        } catch (const CLI::CallForHelp& e) {
            return app.exit(e);
        } catch (const CLI::CallForAllHelp& e) {
            return app.exit(e);
        } catch (const CLI::ParseError& e) {
            app.exit(e);
            return 2;
        }

        auto require = [](const std::string& value, const char* flag) {
            if (value.empty()) throw ConfigError(std::string("missing required option ") + flag);
        };

        if (synth->parsed()) return run_synth(args, spec);
        if (select->parsed()) {
            require(args.data, "--data");
            require(args.schema, "--schema");
            return run_select(args, threshold);
        }
        if (bench->parsed()) {
            require(args.data, "--data");
            require(args.schema, "--schema");
            return run_bench(args, feature_sources, family_names, threshold, max_iter, magnitude,
                             groups_path, format);
        }
        if (attack->parsed()) {
            require(args.data, "--data");
            require(args.schema, "--schema");
            require(model_path, "--model");
            return run_attack(args, model_path, pattern_data, groups_path, max_iter, magnitude,
                              features_per_step);
        }
        return 2;
    } catch (const DegenerateError& e) {
        std::fprintf(stderr, "robustsel: degenerate computation: %s\n", e.what());
        return 3;
    } catch (const Error& e) {
        std::fprintf(stderr, "robustsel: error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "robustsel: unexpected error: %s\n", e.what());
        return 1;
    }
}
