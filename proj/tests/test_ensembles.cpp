#include <random>

#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "robustsel/ensembles.hpp"

using namespace robustsel;
using Catch::Matchers::WithinAbs;

namespace {

// XOR on the first two features: additive models and stumps cannot fit it.
FeatureTable xor_table(std::size_t n, std::uint64_t seed) {
    FeatureTable t;
    t.schema = testutil::make_schema(2);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    t.values.resize(n * 2);
    t.labels.resize(n);
    for (std::size_t r = 0; r < n; ++r) {
        double a = unit(rng), b = unit(rng);
        if (std::abs(a) < 0.05) a = 0.1;
        if (std::abs(b) < 0.05) b = 0.1;
        t.values[r * 2] = a;
        t.values[r * 2 + 1] = b;
        t.labels[r] = (a > 0) != (b > 0) ? 1 : 0;
    }
    return t;
}

double holdout_f1(const TrainedEnsemble& model, const FeatureTable& holdout) {
    auto pred = model.predict_labels(holdout);
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] && holdout.labels[i]) tp += 1;
        else if (pred[i]) fp += 1;
        else if (holdout.labels[i]) fn += 1;
    }
    double prc = tp + fp > 0 ? tp / (tp + fp) : 0;
    double rcl = tp + fn > 0 ? tp / (tp + fn) : 0;
    return prc + rcl > 0 ? 2 * prc * rcl / (prc + rcl) : 0;
}

void check_tree_structure(const Tree& tree, const ModelConfig& cfg) {
    REQUIRE(tree.depth() <= cfg.max_depth);
    for (const auto& node : tree.nodes) {
        if (node.is_leaf()) {
            if (tree.nodes.size() > 1) REQUIRE(node.n_samples >= cfg.min_leaf);
        } else {
            REQUIRE(std::isfinite(node.threshold));
            REQUIRE(node.left >= 0);
            REQUIRE(node.right >= 0);
        }
    }
}

}  // namespace

TEST_CASE("gini impurity") {
    REQUIRE(gini(0, 7) == 0.0);
    REQUIRE(gini(5, 5) == 0.5);
    REQUIRE_THAT(gini(1, 3), WithinAbs(0.375, 1e-15));
    REQUIRE_THROWS_AS(gini(0, 0), DataError);
}

TEST_CASE("build_histogram_bins") {
    SECTION("constant column collapses to a single bin") {
        std::vector<double> constant(10, 3.0);
        REQUIRE(build_histogram_bins(constant, 16).empty());
    }
    SECTION("1..100 with 4 bins gives equal-count edges") {
        std::vector<double> col(100);
        std::iota(col.begin(), col.end(), 1.0);
        auto edges = build_histogram_bins(col, 4);
        REQUIRE(edges == std::vector<double>{25, 50, 75});
    }
    SECTION("edges strictly increase on arbitrary data") {
        std::mt19937_64 rng(5);
        for (int trial = 0; trial < 50; ++trial) {
            auto col = testutil::random_column(rng, 300, -2, 2);
            for (std::size_t i = 0; i < col.size(); i += 3) col[i] = std::round(col[i]);  // ties
            auto edges = build_histogram_bins(col, 32);
            REQUIRE(edges.size() <= 31);
            for (std::size_t i = 1; i < edges.size(); ++i) REQUIRE(edges[i] > edges[i - 1]);
        }
    }
    SECTION("max_bins below 2 is a config error") {
        std::vector<double> col = {1, 2};
        REQUIRE_THROWS_AS(build_histogram_bins(col, 1), ConfigError);
    }
}

TEST_CASE("fit reaches F1 = 1 on threshold-separable data") {
    auto table = testutil::separable_table(2000, 4, 42);
    auto split = stratified_split(table, 0.7, 7);
    for (Family family : all_families()) {
        ModelConfig cfg = default_config(family);
        cfg.n_estimators = 30;
        cfg.seed = 11;
        auto model = fit(cfg, split.train);
        INFO("family " << family_name(family));
        REQUIRE(holdout_f1(model, split.holdout) == 1.0);
    }
}

TEST_CASE("empty ensemble predicts the prior") {
    auto table = testutil::separable_table(200, 2, 1);
    double prior = static_cast<double>(table.count_malicious()) / static_cast<double>(table.n_rows());
    for (Family family : all_families()) {
        ModelConfig cfg = default_config(family);
        cfg.n_estimators = 0;
        auto model = fit(cfg, table);
        auto proba = model.predict_proba(table);
        for (double p : proba) REQUIRE_THAT(p, WithinAbs(prior, 1e-9));
    }
}

TEST_CASE("fit preconditions") {
    SECTION("single-class training set") {
        auto t = testutil::make_table(1, {{1}, {2}, {3}}, {0, 0, 0});
        REQUIRE_THROWS_AS(fit(default_config(Family::random_forest), t), DataError);
    }
    SECTION("schema mismatch at prediction") {
        auto t = testutil::separable_table(100, 2, 3);
        auto model = fit(default_config(Family::random_forest), t);
        auto other = testutil::separable_table(10, 3, 4);
        REQUIRE_THROWS_AS(model.predict_proba(other), SchemaError);
    }
}

TEST_CASE("GOSS selection arithmetic") {
    std::mt19937_64 rng(3);
    std::vector<double> grad(100);
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = static_cast<double>(i) / 100.0 - 0.5;
    auto sel = detail::goss_select(grad, 0.2, 0.1, rng);
    REQUIRE(sel.rows.size() == 30);  // 20 kept + 10 sampled

    // the 20 kept rows are exactly the largest |gradient| rows, weighted 1
    std::vector<std::uint32_t> order(100);
    std::iota(order.begin(), order.end(), 0u);
    std::stable_sort(order.begin(), order.end(),
                     [&](auto a, auto b) { return std::abs(grad[a]) > std::abs(grad[b]); });
    std::size_t sampled = 0;
    for (std::uint32_t r : sel.rows) {
        bool is_top = std::find(order.begin(), order.begin() + 20, r) != order.begin() + 20;
        if (is_top) {
            REQUIRE(sel.weight[r] == 1.0);
        } else {
            REQUIRE(sel.weight[r] == 8.0);  // (1 - 0.2) / 0.1
            ++sampled;
        }
    }
    REQUIRE(sampled == 10);
}

TEST_CASE("random forest vote fraction equals per-tree brute force") {
    auto table = testutil::separable_table(600, 3, 9);
    ModelConfig cfg = default_config(Family::random_forest);
    cfg.n_estimators = 25;
    cfg.seed = 5;
    auto model = fit(cfg, table);
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> row = {rng() % 12 - 2.0, testutil::random_column(rng, 1)[0],
                                   testutil::random_column(rng, 1)[0]};
        double votes = 0;
        for (const auto& tree : model.trees) votes += tree.predict(row) > 0.5 ? 1 : 0;
        double brute = votes / static_cast<double>(model.trees.size());
        REQUIRE_THAT(model.predict_row(row), WithinAbs(brute, 1e-12));
    }
}

TEST_CASE("boosted training loss is non-increasing on separable data") {
    auto table = testutil::separable_table(1000, 3, 21);
    for (Family family : {Family::levelwise_gbt, Family::leafwise_gbt, Family::cyclic_gam}) {
        ModelConfig cfg = default_config(family);
        cfg.n_estimators = 40;
        cfg.learning_rate = std::min(cfg.learning_rate, 0.3);
        cfg.seed = 2;
        auto model = fit(cfg, table);
        INFO("family " << family_name(family));
        REQUIRE(model.train_loss.size() == 41u);
        for (std::size_t i = 1; i < model.train_loss.size(); ++i)
            REQUIRE(model.train_loss[i] <= model.train_loss[i - 1] + 1e-12);
    }
}

TEST_CASE("cyclic GAM predictions decompose additively") {
    auto table = testutil::separable_table(500, 4, 33);
    ModelConfig cfg = default_config(Family::cyclic_gam);
    cfg.n_estimators = 20;
    auto model = fit(cfg, table);
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        auto row = testutil::random_column(rng, 4, -8, 12);
        double log_odds = model.base_score;
        for (std::size_t f = 0; f < 4; ++f) {
            const auto& edges = model.bin_edges[f];
            auto bin = static_cast<std::size_t>(
                std::lower_bound(edges.begin(), edges.end(), row[f]) - edges.begin());
            log_odds += model.shape[f][bin];
        }
        double proba = 1.0 / (1.0 + std::exp(-log_odds));
        REQUIRE_THAT(model.predict_row(row), WithinAbs(proba, 1e-9));
    }
}

TEST_CASE("tree structural invariants hold for every family") {
    auto table = testutil::separable_table(800, 3, 13);
    for (Family family : {Family::random_forest, Family::levelwise_gbt, Family::leafwise_gbt}) {
        ModelConfig cfg = default_config(family);
        cfg.n_estimators = 10;
        cfg.seed = 3;
        auto model = fit(cfg, table);
        INFO("family " << family_name(family));
        std::size_t leaves_cap = static_cast<std::size_t>(cfg.max_leaves);
        for (const auto& tree : model.trees) {
            check_tree_structure(tree, cfg);
            if (family == Family::leafwise_gbt) {
                std::size_t leaves = 0;
                for (const auto& node : tree.nodes) leaves += node.is_leaf() ? 1 : 0;
                REQUIRE(leaves <= leaves_cap);
            }
        }
    }
}

TEST_CASE("feature importances") {
    SECTION("importances sum to one and favor the informative feature") {
        SynthSpec spec{600, 1, 4, 0.3, 3};
        auto res = synthesize(spec);
        for (Family family : all_families()) {
            ModelConfig cfg = default_config(family);
            cfg.n_estimators = 20;
            cfg.seed = 1;
            auto model = fit(cfg, res.table);
            INFO("family " << family_name(family));
            double sum = std::accumulate(model.importances.begin(), model.importances.end(), 0.0);
            REQUIRE_THAT(sum, WithinAbs(1.0, 1e-9));
            auto top = static_cast<std::size_t>(
                std::max_element(model.importances.begin(), model.importances.end()) -
                model.importances.begin());
            REQUIRE(top == 0);
        }
    }
    SECTION("a model that can only split one feature is one-hot there") {
        // only f2 varies; the rest are constant and unsplittable
        FeatureTable t;
        t.schema = testutil::make_schema(4);
        std::mt19937_64 rng(9);
        for (int r = 0; r < 200; ++r) {
            double signal = (r % 2 == 0) ? 1.0 + 0.1 * (rng() % 10) : -1.0 - 0.1 * (rng() % 10);
            t.values.insert(t.values.end(), {7.0, 7.0, signal, 7.0});
            t.labels.push_back(r % 2 == 0 ? 1 : 0);
        }
        ModelConfig cfg = default_config(Family::random_forest);
        cfg.n_estimators = 15;
        auto model = fit(cfg, t);
        REQUIRE(model.importances[2] == 1.0);
        REQUIRE(model.importances[0] == 0.0);
    }
}

TEST_CASE("model artifact round trip") {
    testutil::TempDir tmp;
    auto table = testutil::separable_table(400, 3, 55);
    std::mt19937_64 rng(8);
    for (Family family : all_families()) {
        ModelConfig cfg = default_config(family);
        cfg.n_estimators = 8;
        cfg.seed = 77;
        auto model = fit(cfg, table);
        auto path = tmp.file(family_name(family) + ".json");
        save_model(model, path);
        auto back = load_model(path);
        INFO("family " << family_name(family));
        REQUIRE(back.feature_names == model.feature_names);
        for (int trial = 0; trial < 50; ++trial) {
            auto row = testutil::random_column(rng, 3, -10, 10);
            REQUIRE(back.predict_row(row) == model.predict_row(row));  // bit-identical
        }
    }
}

TEST_CASE("tune") {
    SECTION("grid of size one returns that configuration") {
        auto table = testutil::separable_table(300, 2, 4);
        ParamGrid grid;
        grid.max_depth = {6};
        auto cfg = tune(Family::random_forest, grid, table, 3);
        REQUIRE(cfg.max_depth == 6);
        REQUIRE(cfg.family == Family::random_forest);
    }
    SECTION("the strictly better depth wins on XOR data") {
        auto table = xor_table(600, 10);
        ParamGrid grid;
        grid.max_depth = {1, 4};
        ModelConfig shallow = default_config(Family::levelwise_gbt);
        auto cfg = tune(Family::levelwise_gbt, grid, table, 9);
        REQUIRE(cfg.max_depth == 4);
    }
    SECTION("deterministic winner for a fixed seed") {
        auto table = testutil::separable_table(400, 3, 6);
        auto a = tune(Family::leafwise_gbt, default_grid(Family::leafwise_gbt), table, 12);
        auto b = tune(Family::leafwise_gbt, default_grid(Family::leafwise_gbt), table, 12);
        REQUIRE(a.learning_rate == b.learning_rate);
        REQUIRE(a.feature_subsample == b.feature_subsample);
        REQUIRE(a.seed == b.seed);
    }
    SECTION("ties break toward the smaller structure") {
        auto table = testutil::separable_table(500, 2, 8);  // every config reaches F1 = 1
        ParamGrid grid;
        grid.max_depth = {16, 8};
        auto cfg = tune(Family::random_forest, grid, table, 2);
        REQUIRE(cfg.max_depth == 8);
    }
    SECTION("too few minority samples for five folds is a fold error") {
        FeatureTable t = testutil::separable_table(100, 2, 5);
        for (auto& l : t.labels) l = 0;
        t.labels[0] = t.labels[1] = t.labels[2] = 1;  // 3 malicious < 5 folds
        REQUIRE_THROWS_AS(tune(Family::random_forest, default_grid(Family::random_forest), t, 1),
                          DataError);
    }
}

TEST_CASE("fit determinism") {
    auto table = testutil::separable_table(500, 3, 77);
    for (Family family : all_families()) {
        ModelConfig cfg = default_config(family);
        cfg.n_estimators = 10;
        cfg.seed = 123;
        auto a = fit(cfg, table, 2);
        auto b = fit(cfg, table, 1);  // job count must not change the result
        INFO("family " << family_name(family));
        REQUIRE(model_to_json(a).dump() == model_to_json(b).dump());
    }
}
