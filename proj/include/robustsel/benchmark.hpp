#pragma once

#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "robustsel/adversarial.hpp"
#include "robustsel/consensus.hpp"
#include "robustsel/ensembles.hpp"
#include "robustsel/flowdata.hpp"

namespace robustsel {

struct ConfusionCounts {
    std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;  // malicious = positive
    std::int64_t total() const { return tp + fp + fn + tn; }
};

struct MetricsReport {
    double acc = 0, prc = 0, rcl = 0, f1s = 0, fpr = 0;
};

inline ConfusionCounts confusion(std::span<const std::uint8_t> truth, std::span<const std::uint8_t> pred) {
    if (truth.size() != pred.size()) throw DataError("confusion length mismatch");
    ConfusionCounts c;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] && pred[i]) ++c.tp;
        else if (!truth[i] && pred[i]) ++c.fp;
        else if (truth[i]) ++c.fn;
        else ++c.tn;
    }
    return c;
}

inline MetricsReport compute_metrics(const ConfusionCounts& c) {
    if (c.total() <= 0) throw DataError("metrics of an empty evaluation");
    auto tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp);
    auto fn = static_cast<double>(c.fn), tn = static_cast<double>(c.tn);
    MetricsReport m;
    m.acc = (tp + tn) / static_cast<double>(c.total());
    m.prc = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    m.rcl = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    m.f1s = m.prc + m.rcl > 0 ? 2 * m.prc * m.rcl / (m.prc + m.rcl) : 0.0;
    m.fpr = fp + tn > 0 ? fp / (fp + tn) : 0.0;
    return m;
}

inline std::pair<ConfusionCounts, MetricsReport> evaluate(const TrainedEnsemble& model,
                                                          const FeatureTable& holdout) {
    auto counts = confusion(holdout.labels, model.predict_labels(holdout));
    return {counts, compute_metrics(counts)};
}

enum class TrainingMode { regular, adversarial };

inline std::string training_mode_name(TrainingMode m) {
    return m == TrainingMode::regular ? "regular" : "adversarial";
}

struct BenchmarkCell {
    Family family = Family::random_forest;
    std::string feature_set;
    TrainingMode training = TrainingMode::regular;
    bool attacked = false;
    ConfusionCounts counts;
    MetricsReport metrics;
    nlohmann::json trace;  // attack trace for attacked cells
};

struct TunedConfigRecord {
    Family family = Family::random_forest;
    std::string feature_set;
    ModelConfig config;
};

struct BenchmarkMatrix {
    std::string dataset_id;
    std::uint64_t master_seed = 0;
    double train_fraction = 0.7;
    int max_iter = 15;
    double magnitude = 0.25;
    std::vector<BenchmarkCell> cells;
    std::vector<TunedConfigRecord> configs;
    // fitted models keyed "<feature_set>/<family>/<training>", in run order
    std::vector<std::pair<std::string, TrainedEnsemble>> models;
};

struct BenchmarkOptions {
    double train_fraction = 0.7;
    int max_iter = 15;
    double magnitude = 0.25;
    std::size_t attack_features_per_step = 1;
    bool tune_models = true;
    bool keep_models = false;
    std::vector<GroupSpecEntry> groups;
    unsigned jobs = default_jobs();
    std::string dataset_id = "dataset";
};

inline std::uint64_t benchmark_split_seed(std::uint64_t master_seed) {
    return derive_seed(master_seed, "benchmark_split");
}

// The 2x2 evaluation per (feature set, family): regular/adversarial training
// crossed with clean/attacked holdout. Attacks are model-specific; benign
// rows are never perturbed, so attacked FPR matches the clean FPR.
inline BenchmarkMatrix run_benchmark(const FeatureTable& dataset,
                                     const std::vector<FeatureSetArtifact>& feature_sets,
                                     const std::vector<Family>& families, std::uint64_t master_seed,
                                     const BenchmarkOptions& options = {}) {
    if (feature_sets.empty()) throw ConfigError("no feature sets to benchmark");
    if (families.empty()) throw ConfigError("no model families to benchmark");
    for (const auto& fs : feature_sets) {
        fs.validate();
        for (const auto& f : fs.features)
            if (!dataset.schema.has_feature(f))
                throw SchemaError("feature set '" + fs.name + "' references unknown feature '" + f + "'");
    }

    BenchmarkMatrix matrix;
    matrix.dataset_id = options.dataset_id;
    matrix.master_seed = master_seed;
    matrix.train_fraction = options.train_fraction;
    matrix.max_iter = options.max_iter;
    matrix.magnitude = options.magnitude;

    SplitPair split = stratified_split(dataset, options.train_fraction, benchmark_split_seed(master_seed));

    for (std::size_t fs_i = 0; fs_i < feature_sets.size(); ++fs_i) {
        const auto& fs = feature_sets[fs_i];
        FeatureTable train_fs = select_features(split.train, fs.features);
        FeatureTable hold_fs = select_features(split.holdout, fs.features);
        auto groups = resolve_groups(options.groups, train_fs.schema, /*strict=*/false);
        PerturbationPattern pattern = learn_patterns(train_fs, groups);

        PerturbationConfig aug_cfg;
        aug_cfg.magnitude = options.magnitude;
        aug_cfg.features_per_step = 1;
        aug_cfg.seed = derive_seed(master_seed, "augment", fs_i);
        FeatureTable augmented = augment_training(train_fs, pattern, aug_cfg);

        for (std::size_t fam_i = 0; fam_i < families.size(); ++fam_i) {
            Family family = families[fam_i];
            const std::string cell_id = "[feature_set=" + fs.name + ", family=" + family_name(family) + "]";
            try {
                ModelConfig cfg;
                if (options.tune_models) {
                    cfg = tune(family, default_grid(family), train_fs,
                               derive_seed(master_seed, "tune", fs_i, fam_i), options.jobs);
                } else {
                    cfg = default_config(family);
                }
                matrix.configs.push_back({family, fs.name, cfg});

                ModelConfig cfg_reg = cfg, cfg_adv = cfg;
                cfg_reg.seed = derive_seed(master_seed, "fit_regular", fs_i, fam_i);
                cfg_adv.seed = derive_seed(master_seed, "fit_adversarial", fs_i, fam_i);
                TrainedEnsemble m_reg = fit(cfg_reg, train_fs, options.jobs);
                TrainedEnsemble m_adv = fit(cfg_adv, augmented, options.jobs);

                PerturbationConfig atk_cfg;
                atk_cfg.magnitude = options.magnitude;
                atk_cfg.features_per_step = options.attack_features_per_step;
                atk_cfg.seed = derive_seed(master_seed, "attack", fs_i, fam_i);
                auto attacks = model_specific_holdouts({&m_reg, &m_adv}, hold_fs, pattern, atk_cfg,
                                                       options.max_iter, options.jobs);

                auto push_cell = [&](TrainingMode mode, bool attacked, const TrainedEnsemble& model,
                                     const FeatureTable& data, const AttackResult* attack) {
                    BenchmarkCell cell;
                    cell.family = family;
                    cell.feature_set = fs.name;
                    cell.training = mode;
                    cell.attacked = attacked;
                    auto [counts, metrics] = evaluate(model, data);
                    cell.counts = counts;
                    cell.metrics = metrics;
                    if (attack) cell.trace = attack_trace_to_json(*attack);
                    matrix.cells.push_back(std::move(cell));
                };
                push_cell(TrainingMode::regular, false, m_reg, hold_fs, nullptr);
                push_cell(TrainingMode::regular, true, m_reg, attacks[0].adversarial_holdout, &attacks[0]);
                push_cell(TrainingMode::adversarial, false, m_adv, hold_fs, nullptr);
                push_cell(TrainingMode::adversarial, true, m_adv, attacks[1].adversarial_holdout, &attacks[1]);

                if (options.keep_models) {
                    matrix.models.emplace_back(fs.name + "/" + family_name(family) + "/regular",
                                               std::move(m_reg));
                    matrix.models.emplace_back(fs.name + "/" + family_name(family) + "/adversarial",
                                               std::move(m_adv));
                }
            } catch (const DegenerateError& e) {
                throw DegenerateError("benchmark cell " + cell_id + " failed: " + e.what());
            } catch (const Error& e) {
                throw DataError("benchmark cell " + cell_id + " failed: " + e.what());
            }
        }
    }
    return matrix;
}

// ---------------------------------------------------------------------------
// Reports

enum class ReportFormat { json, text_table, csv };

namespace detail {

inline std::string percent(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v * 100.0);
    return buf;
}

inline nlohmann::json metrics_to_json(const MetricsReport& m) {
    return {{"acc", m.acc}, {"prc", m.prc}, {"rcl", m.rcl}, {"f1s", m.f1s}, {"fpr", m.fpr}};
}

inline nlohmann::json counts_to_json(const ConfusionCounts& c) {
    return {{"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}, {"tn", c.tn}};
}

}  // namespace detail

inline nlohmann::json matrix_to_json(const BenchmarkMatrix& matrix) {
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& cell : matrix.cells) {
        nlohmann::json j = {{"family", family_name(cell.family)},
                            {"feature_set", cell.feature_set},
                            {"training", training_mode_name(cell.training)},
                            {"attacked", cell.attacked},
                            {"metrics", detail::metrics_to_json(cell.metrics)},
                            {"counts", detail::counts_to_json(cell.counts)}};
        if (!cell.trace.is_null()) j["trace"] = cell.trace;
        cells.push_back(std::move(j));
    }
    nlohmann::json configs = nlohmann::json::array();
    for (const auto& rec : matrix.configs)
        configs.push_back({{"family", family_name(rec.family)},
                           {"feature_set", rec.feature_set},
                           {"config", config_to_json(rec.config)}});
    return {{"dataset", matrix.dataset_id},
            {"cells", cells},
            {"provenance",
             {{"master_seed", matrix.master_seed},
              {"train_fraction", matrix.train_fraction},
              {"attack", {{"max_iter", matrix.max_iter}, {"magnitude", matrix.magnitude}}},
              {"configs", configs},
              {"version", "1"}}}};
}

inline BenchmarkMatrix matrix_from_json(const nlohmann::json& j) {
    BenchmarkMatrix matrix;
    matrix.dataset_id = j.at("dataset").get<std::string>();
    const auto& prov = j.at("provenance");
    matrix.master_seed = prov.at("master_seed").get<std::uint64_t>();
    matrix.train_fraction = prov.at("train_fraction").get<double>();
    matrix.max_iter = prov.at("attack").at("max_iter").get<int>();
    matrix.magnitude = prov.at("attack").at("magnitude").get<double>();
    for (const auto& rec : prov.at("configs"))
        matrix.configs.push_back({family_from_name(rec.at("family").get<std::string>()),
                                  rec.at("feature_set").get<std::string>(),
                                  config_from_json(rec.at("config"))});
    for (const auto& c : j.at("cells")) {
        BenchmarkCell cell;
        cell.family = family_from_name(c.at("family").get<std::string>());
        cell.feature_set = c.at("feature_set").get<std::string>();
        cell.training = c.at("training").get<std::string>() == "regular" ? TrainingMode::regular
                                                                         : TrainingMode::adversarial;
        cell.attacked = c.at("attacked").get<bool>();
        const auto& m = c.at("metrics");
        cell.metrics = {m.at("acc").get<double>(), m.at("prc").get<double>(), m.at("rcl").get<double>(),
                        m.at("f1s").get<double>(), m.at("fpr").get<double>()};
        const auto& cc = c.at("counts");
        cell.counts = {cc.at("tp").get<std::int64_t>(), cc.at("fp").get<std::int64_t>(),
                       cc.at("fn").get<std::int64_t>(), cc.at("tn").get<std::int64_t>()};
        if (c.contains("trace")) cell.trace = c.at("trace");
        matrix.cells.push_back(std::move(cell));
    }
    return matrix;
}

// Rows ordered model, then training (regular before adversarial), then
// attacked (no before yes), grouped per feature set; percentages with two
// decimals.
inline std::string render_text_table(const BenchmarkMatrix& matrix) {
    std::string out;
    out += "Benchmark: " + matrix.dataset_id + " (seed " + std::to_string(matrix.master_seed) + ")\n";
    std::vector<std::string> sets;
    for (const auto& cell : matrix.cells)
        if (std::find(sets.begin(), sets.end(), cell.feature_set) == sets.end())
            sets.push_back(cell.feature_set);
    char line[160];
    for (const auto& set : sets) {
        out += "\n== feature set: " + set + " ==\n";
        std::snprintf(line, sizeof(line), "%-16s %-12s %-9s %8s %8s %8s %8s %8s\n", "Model", "Training",
                      "Attacked", "ACC", "PRC", "RCL", "F1S", "FPR");
        out += line;
        for (const auto& cell : matrix.cells) {
            if (cell.feature_set != set) continue;
            std::snprintf(line, sizeof(line), "%-16s %-12s %-9s %8s %8s %8s %8s %8s\n",
                          family_name(cell.family).c_str(),
                          cell.training == TrainingMode::regular ? "Regular" : "Adversarial",
                          cell.attacked ? "Yes" : "No", detail::percent(cell.metrics.acc).c_str(),
                          detail::percent(cell.metrics.prc).c_str(), detail::percent(cell.metrics.rcl).c_str(),
                          detail::percent(cell.metrics.f1s).c_str(), detail::percent(cell.metrics.fpr).c_str());
            out += line;
        }
    }
    return out;
}

inline std::string render_csv(const BenchmarkMatrix& matrix) {
    std::string out = "dataset,feature_set,family,training,attacked,acc,prc,rcl,f1s,fpr,tp,fp,fn,tn\n";
    for (const auto& cell : matrix.cells) {
        out += matrix.dataset_id + "," + cell.feature_set + "," + family_name(cell.family) + "," +
               training_mode_name(cell.training) + "," + (cell.attacked ? "yes" : "no") + ",";
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g,%.17g,%lld,%lld,%lld,%lld\n",
                      cell.metrics.acc, cell.metrics.prc, cell.metrics.rcl, cell.metrics.f1s,
                      cell.metrics.fpr, static_cast<long long>(cell.counts.tp),
                      static_cast<long long>(cell.counts.fp), static_cast<long long>(cell.counts.fn),
                      static_cast<long long>(cell.counts.tn));
        out += buf;
    }
    return out;
}

inline std::string render_report(const BenchmarkMatrix& matrix, ReportFormat format) {
    switch (format) {
        case ReportFormat::json: return matrix_to_json(matrix).dump(2) + "\n";
        case ReportFormat::text_table: return render_text_table(matrix);
        case ReportFormat::csv: return render_csv(matrix);
    }
    throw ConfigError("unknown report format");
}

}  // namespace robustsel
