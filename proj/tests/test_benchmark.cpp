#include <random>

#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "robustsel/benchmark.hpp"

using namespace robustsel;
using Catch::Matchers::WithinAbs;

namespace {

FeatureSetArtifact artifact_for(const FeatureTable& table, std::vector<std::string> features) {
    FeatureSetArtifact fs;
    fs.name = "consensus";
    fs.features = std::move(features);
    (void)table;
    return fs;
}

BenchmarkOptions quick_options() {
    BenchmarkOptions options;
    options.tune_models = false;
    options.jobs = 2;
    return options;
}

}  // namespace

TEST_CASE("compute_metrics") {
    SECTION("hand arithmetic") {
        auto m = compute_metrics({9, 1, 1, 89});
        REQUIRE_THAT(m.acc, WithinAbs(0.98, 1e-12));
        REQUIRE_THAT(m.prc, WithinAbs(0.9, 1e-12));
        REQUIRE_THAT(m.rcl, WithinAbs(0.9, 1e-12));
        REQUIRE_THAT(m.f1s, WithinAbs(0.9, 1e-12));
        REQUIRE_THAT(m.fpr, WithinAbs(1.0 / 90.0, 1e-12));
    }
    SECTION("all correct") {
        auto m = compute_metrics({10, 0, 0, 90});
        REQUIRE(m.acc == 1.0);
        REQUIRE(m.prc == 1.0);
        REQUIRE(m.rcl == 1.0);
        REQUIRE(m.f1s == 1.0);
        REQUIRE(m.fpr == 0.0);
    }
    SECTION("zero denominators follow the zero convention") {
        auto m = compute_metrics({0, 0, 5, 5});
        REQUIRE(m.prc == 0.0);
        REQUIRE(m.f1s == 0.0);
    }
    SECTION("empty evaluation is an error") {
        REQUIRE_THROWS_AS(compute_metrics({0, 0, 0, 0}), DataError);
    }
    SECTION("matches a brute-force tally on 1000 random prediction vectors") {
        std::mt19937_64 rng(5);
        std::uniform_int_distribution<int> coin(0, 1);
        for (int trial = 0; trial < 1000; ++trial) {
            std::size_t n = 1 + rng() % 60;
            std::vector<std::uint8_t> truth(n), pred(n);
            for (std::size_t i = 0; i < n; ++i) {
                truth[i] = static_cast<std::uint8_t>(coin(rng));
                pred[i] = static_cast<std::uint8_t>(coin(rng));
            }
            std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
            for (std::size_t i = 0; i < n; ++i) {
                if (truth[i] == 1 && pred[i] == 1) ++tp;
                if (truth[i] == 0 && pred[i] == 1) ++fp;
                if (truth[i] == 1 && pred[i] == 0) ++fn;
                if (truth[i] == 0 && pred[i] == 0) ++tn;
            }
            auto counts = confusion(truth, pred);
            REQUIRE(counts.tp == tp);
            REQUIRE(counts.fp == fp);
            REQUIRE(counts.fn == fn);
            REQUIRE(counts.tn == tn);
            auto m = compute_metrics(counts);
            REQUIRE(m.acc == static_cast<double>(tp + tn) / static_cast<double>(n));
        }
    }
}

TEST_CASE("evaluate") {
    auto table = testutil::separable_table(600, 3, 3);
    auto split = stratified_split(table, 0.7, 1);

    SECTION("a well-fit model scores F1 = 1 on separable data") {
        ModelConfig cfg = default_config(Family::random_forest);
        cfg.n_estimators = 15;
        auto model = fit(cfg, split.train);
        auto [counts, metrics] = evaluate(model, split.holdout);
        REQUIRE(metrics.f1s == 1.0);
        REQUIRE(counts.fp == 0);
        REQUIRE(counts.fn == 0);
    }
    SECTION("a constant-benign predictor has zero recall and zero FPR") {
        ModelConfig cfg = default_config(Family::random_forest);
        cfg.n_estimators = 0;
        auto model = fit(cfg, split.train);  // prior 0.5 -> predicts benign at threshold 0.5
        auto [counts, metrics] = evaluate(model, split.holdout);
        REQUIRE(metrics.rcl == 0.0);
        REQUIRE(metrics.fpr == 0.0);
        REQUIRE(counts.tp == 0);
        REQUIRE(counts.fp == 0);
    }
    SECTION("reported metrics recompute exactly from the returned counts") {
        ModelConfig cfg = default_config(Family::cyclic_gam);
        cfg.n_estimators = 5;
        auto model = fit(cfg, split.train);
        auto [counts, metrics] = evaluate(model, split.holdout);
        auto again = compute_metrics(counts);
        REQUIRE(metrics.acc == again.acc);
        REQUIRE(metrics.f1s == again.f1s);
        REQUIRE(metrics.fpr == again.fpr);
    }
}

TEST_CASE("run_benchmark") {
    SynthSpec spec{400, 3, 2, 0.3, 9};
    auto data = synthesize(spec).table;

    SECTION("one set and one family yields exactly four cells") {
        auto fs = artifact_for(data, {"inf_00", "inf_01", "inf_02"});
        auto matrix = run_benchmark(data, {fs}, {Family::random_forest}, 3, quick_options());
        REQUIRE(matrix.cells.size() == 4);
        REQUIRE(matrix.cells[0].training == TrainingMode::regular);
        REQUIRE_FALSE(matrix.cells[0].attacked);
        REQUIRE(matrix.cells[1].attacked);
        REQUIRE(matrix.cells[2].training == TrainingMode::adversarial);
        REQUIRE(matrix.cells[3].attacked);
        REQUIRE_FALSE(matrix.cells[1].trace.is_null());
    }
    SECTION("same seeds give identical matrices") {
        auto fs = artifact_for(data, {"inf_00", "inf_01", "noise_00"});
        auto a = run_benchmark(data, {fs}, {Family::cyclic_gam}, 17, quick_options());
        auto b = run_benchmark(data, {fs}, {Family::cyclic_gam}, 17, quick_options());
        REQUIRE(matrix_to_json(a).dump() == matrix_to_json(b).dump());
    }
    SECTION("attacked FPR equals clean FPR in every cell pair") {
        auto fs = artifact_for(data, {"inf_00", "inf_01", "inf_02", "noise_00"});
        auto matrix =
            run_benchmark(data, {fs}, {Family::random_forest, Family::levelwise_gbt}, 5, quick_options());
        for (std::size_t i = 0; i < matrix.cells.size(); i += 2) {
            REQUIRE(matrix.cells[i].attacked == false);
            REQUIRE(matrix.cells[i + 1].attacked == true);
            REQUIRE(matrix.cells[i].metrics.fpr == matrix.cells[i + 1].metrics.fpr);
            REQUIRE(matrix.cells[i].counts.fp == matrix.cells[i + 1].counts.fp);
        }
    }
    SECTION("unknown feature in a set names the problem") {
        auto fs = artifact_for(data, {"inf_00", "missing_feature"});
        REQUIRE_THROWS_WITH(run_benchmark(data, {fs}, {Family::random_forest}, 1, quick_options()),
                            Catch::Matchers::ContainsSubstring("missing_feature"));
    }
    SECTION("tuned run records a config per (set, family)") {
        auto fs = artifact_for(data, {"inf_00", "inf_01"});
        BenchmarkOptions options = quick_options();
        options.tune_models = true;
        auto matrix = run_benchmark(data, {fs}, {Family::cyclic_gam}, 2, options);
        REQUIRE(matrix.configs.size() == 1);
        REQUIRE(matrix.configs[0].family == Family::cyclic_gam);
    }
}

TEST_CASE("report rendering") {
    SynthSpec spec{300, 2, 1, 0.3, 4};
    auto data = synthesize(spec).table;
    auto fs = artifact_for(data, {"inf_00", "inf_01"});
    auto matrix = run_benchmark(data, {fs}, {Family::random_forest, Family::cyclic_gam}, 8, quick_options());

    SECTION("json round-trips to an equal matrix") {
        auto j = matrix_to_json(matrix);
        auto back = matrix_from_json(j);
        REQUIRE(matrix_to_json(back).dump() == j.dump());
    }
    SECTION("text table has four rows per (model, feature set)") {
        auto text = render_report(matrix, ReportFormat::text_table);
        std::size_t rf_rows = 0;
        std::istringstream in(text);
        std::string line;
        while (std::getline(in, line))
            if (line.find("random_forest") != std::string::npos) ++rf_rows;
        REQUIRE(rf_rows == 4);
    }
    SECTION("percentages render with two decimals") {
        BenchmarkMatrix tiny;
        tiny.dataset_id = "t";
        BenchmarkCell cell;
        cell.feature_set = "consensus";
        cell.metrics = {0.9, 0.9, 0.9, 0.9, 0.0111};
        tiny.cells.push_back(cell);
        auto text = render_report(tiny, ReportFormat::text_table);
        REQUIRE(text.find("90.00") != std::string::npos);
        REQUIRE(text.find("1.11") != std::string::npos);
    }
    SECTION("csv has one row per cell plus a header") {
        auto csv = render_report(matrix, ReportFormat::csv);
        std::size_t lines = static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n'));
        REQUIRE(lines == matrix.cells.size() + 1);
    }
}
