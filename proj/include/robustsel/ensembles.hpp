#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <queue>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "robustsel/common.hpp"
#include "robustsel/flowdata.hpp"

namespace robustsel {

enum class Family { random_forest, levelwise_gbt, leafwise_gbt, cyclic_gam };

inline constexpr std::array<Family, 4> all_families() {
    return {Family::random_forest, Family::levelwise_gbt, Family::leafwise_gbt, Family::cyclic_gam};
}

inline std::string family_name(Family f) {
    switch (f) {
        case Family::random_forest: return "random_forest";
        case Family::levelwise_gbt: return "levelwise_gbt";
        case Family::leafwise_gbt: return "leafwise_gbt";
        case Family::cyclic_gam: return "cyclic_gam";
    }
    return "random_forest";
}

inline Family family_from_name(const std::string& s) {
    for (Family f : all_families())
        if (family_name(f) == s) return f;
    throw ConfigError("unknown model family: " + s);
}

struct ModelConfig {
    Family family = Family::random_forest;
    int n_estimators = 100;
    int max_features = 4;            // random_forest: candidate features per split
    int max_depth = 16;
    int min_leaf = 1;                // minimum samples in a leaf
    double min_gain = 0.0;           // minimum loss reduction to accept a split
    double learning_rate = 0.1;
    double feature_subsample = 1.0;  // fraction of features per tree
    int max_leaves = 15;
    int max_bins = 256;
    double goss_top_fraction = 0.2;
    double goss_other_fraction = 0.1;
    std::uint64_t seed = 0;
};

inline ModelConfig default_config(Family family) {
    ModelConfig c;
    c.family = family;
    switch (family) {
        case Family::random_forest:
            c.max_features = 4;
            c.max_depth = 16;
            c.min_leaf = 1;
            break;
        case Family::levelwise_gbt:
            c.max_depth = 8;
            c.min_leaf = 1;
            c.min_gain = 0.01;
            c.learning_rate = 0.3;
            c.feature_subsample = 0.9;
            break;
        case Family::leafwise_gbt:
            c.max_depth = 32;
            c.max_leaves = 15;
            c.min_leaf = 20;
            c.min_gain = 0.01;
            c.learning_rate = 0.1;
            c.feature_subsample = 0.8;
            break;
        case Family::cyclic_gam:
            c.max_leaves = 3;
            c.min_leaf = 1;
            c.learning_rate = 0.1;
            c.max_bins = 256;
            break;
    }
    return c;
}

inline double gini(double pos, double neg) {
    if (pos + neg <= 0) throw DataError("gini of an empty node");
    double p = pos / (pos + neg);
    return 1.0 - p * p - (1.0 - p) * (1.0 - p);
}

// Quantile-based edges; at most max_bins bins, strictly increasing,
// duplicates collapsed. A value x falls in the first bin whose edge is >= x.
inline std::vector<double> build_histogram_bins(std::span<const double> column, int max_bins) {
    if (max_bins < 2) throw ConfigError("max_bins must be >= 2");
    std::vector<double> sorted(column.begin(), column.end());
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> edges;
    if (sorted.empty() || sorted.front() == sorted.back()) return edges;  // single bin
    const std::size_t n = sorted.size();
    for (int i = 1; i < max_bins; ++i) {
        std::size_t pos = (static_cast<std::size_t>(i) * n) / static_cast<std::size_t>(max_bins);
        if (pos == 0) continue;
        double edge = sorted[pos - 1];
        if (edge >= sorted.back()) break;
        if (edges.empty() || edge > edges.back()) edges.push_back(edge);
    }
    return edges;
}

struct TreeNode {
    int feature = -1;  // -1 = leaf
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double value = 0.0;
    int n_samples = 0;

    bool is_leaf() const { return feature < 0; }
};

struct Tree {
    std::vector<TreeNode> nodes;  // nodes[0] is the root

    double predict(std::span<const double> row) const {
        int i = 0;
        while (!nodes[static_cast<std::size_t>(i)].is_leaf()) {
            const auto& n = nodes[static_cast<std::size_t>(i)];
            i = row[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right;
        }
        return nodes[static_cast<std::size_t>(i)].value;
    }

    int depth() const {
        if (nodes.empty()) return 0;
        std::vector<std::pair<int, int>> stack{{0, 0}};
        int deepest = 0;
        while (!stack.empty()) {
            auto [i, d] = stack.back();
            stack.pop_back();
            deepest = std::max(deepest, d);
            const auto& n = nodes[static_cast<std::size_t>(i)];
            if (!n.is_leaf()) {
                stack.emplace_back(n.left, d + 1);
                stack.emplace_back(n.right, d + 1);
            }
        }
        return deepest;
    }
};

struct TrainedEnsemble {
    ModelConfig config;
    std::vector<std::string> feature_names;
    double prior = 0.5;       // malicious fraction of the training set
    double base_score = 0.0;  // boosted families: prior log-odds
    std::vector<Tree> trees;
    std::vector<std::vector<double>> shape;      // cyclic_gam: per-feature per-bin log-odds terms
    std::vector<std::vector<double>> bin_edges;  // per feature
    std::vector<double> importances;             // sums to 1 when any split exists
    std::vector<double> train_loss;              // boosted: loss before round 1, then per round

    double decision_value(std::span<const double> row) const {
        double f = base_score;
        if (config.family == Family::cyclic_gam) {
            for (std::size_t j = 0; j < shape.size(); ++j) {
                const auto& edges = bin_edges[j];
                auto b = static_cast<std::size_t>(
                    std::lower_bound(edges.begin(), edges.end(), row[j]) - edges.begin());
                f += shape[j][b];
            }
        } else {
            for (const auto& t : trees) f += t.predict(row);
        }
        return f;
    }

    double predict_row(std::span<const double> row) const {
        if (config.family == Family::random_forest) {
            if (trees.empty()) return prior;
            std::size_t votes = 0;
            for (const auto& t : trees) votes += t.predict(row) > 0.5 ? 1 : 0;
            return static_cast<double>(votes) / static_cast<double>(trees.size());
        }
        return 1.0 / (1.0 + std::exp(-decision_value(row)));
    }

    std::vector<double> predict_proba(const FeatureTable& rows) const {
        if (rows.schema.names != feature_names)
            throw SchemaError("prediction schema does not match training schema");
        std::vector<double> out(rows.n_rows());
        for (std::size_t r = 0; r < rows.n_rows(); ++r) out[r] = predict_row(rows.row(r));
        return out;
    }

    std::vector<std::uint8_t> predict_labels(const FeatureTable& rows) const {
        auto proba = predict_proba(rows);
        std::vector<std::uint8_t> out(proba.size());
        for (std::size_t i = 0; i < proba.size(); ++i) out[i] = proba[i] > 0.5 ? 1 : 0;
        return out;
    }
};

inline const std::vector<double>& feature_importances(const TrainedEnsemble& model) {
    return model.importances;
}

namespace detail {

inline constexpr double kHessLambda = 1.0;  // L2 regularization on leaf values

inline double stable_log1pexp(double z) { return z > 35.0 ? z : std::log1p(std::exp(z)); }

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

struct BinnedData {
    std::size_t n_rows = 0;
    std::size_t n_features = 0;
    std::vector<std::vector<double>> edges;  // per feature
    std::vector<int> n_bins;                 // per feature, edges + 1
    std::vector<std::uint8_t> codes;         // column-major: codes[f * n_rows + r]

    std::uint8_t code(std::size_t r, std::size_t f) const { return codes[f * n_rows + r]; }
    const std::uint8_t* column(std::size_t f) const { return codes.data() + f * n_rows; }
};

inline BinnedData bin_table(const FeatureTable& table, int max_bins) {
    if (max_bins < 2 || max_bins > 256) throw ConfigError("max_bins must be in [2, 256]");
    BinnedData data;
    data.n_rows = table.n_rows();
    data.n_features = table.n_features();
    data.edges.resize(data.n_features);
    data.n_bins.resize(data.n_features);
    data.codes.resize(data.n_rows * data.n_features);
    for (std::size_t f = 0; f < data.n_features; ++f) {
        auto col = table.column(f);
        data.edges[f] = build_histogram_bins(col, max_bins);
        const auto& e = data.edges[f];
        data.n_bins[f] = static_cast<int>(e.size()) + 1;
        std::uint8_t* out = data.codes.data() + f * data.n_rows;
        for (std::size_t r = 0; r < data.n_rows; ++r)
            out[r] = static_cast<std::uint8_t>(std::lower_bound(e.begin(), e.end(), col[r]) - e.begin());
    }
    return data;
}

// Stable partition of idx[start, start+len) by code <= bin; returns the size
// of the left part. Row order inside each side is preserved.
inline std::size_t partition_rows(std::vector<std::uint32_t>& idx, std::vector<std::uint32_t>& scratch,
                                  std::size_t start, std::size_t len, const BinnedData& data,
                                  std::size_t feature, int bin) {
    scratch.clear();
    std::size_t out = start;
    const std::uint8_t* codes = data.column(feature);
    for (std::size_t i = start; i < start + len; ++i) {
        std::uint32_t r = idx[i];
        if (codes[r] <= bin)
            idx[out++] = r;
        else
            scratch.push_back(r);
    }
    std::copy(scratch.begin(), scratch.end(), idx.begin() + static_cast<std::ptrdiff_t>(out));
    return out - start;
}

// Sample k distinct values from [0, d) in rng-determined order.
inline std::vector<std::size_t> sample_distinct(std::size_t d, std::size_t k, std::mt19937_64& rng) {
    std::vector<std::size_t> pool(d);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    k = std::min(k, d);
    for (std::size_t i = 0; i < k; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, d - 1);
        std::swap(pool[i], pool[pick(rng)]);
    }
    pool.resize(k);
    return pool;
}

inline std::vector<std::size_t> feature_subset(std::size_t d, double fraction, std::mt19937_64& rng) {
    auto k = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(d)));
    k = std::clamp<std::size_t>(k, 1, d);
    auto subset = sample_distinct(d, k, rng);
    std::sort(subset.begin(), subset.end());
    return subset;
}

struct GbtSplit {
    double gain = -std::numeric_limits<double>::infinity();
    std::size_t feature = 0;
    int bin = -1;
    double g_left = 0, h_left = 0;
    std::size_t n_left = 0;
};

struct GradHistBin {
    double g = 0, h = 0;
    std::uint32_t cnt = 0;
};

// Histogram scratch reused across nodes: only bins touched by the node's rows
// are reset and scanned. Splitting at an empty bin partitions rows exactly
// like the nearest lower touched bin, so scanning touched bins in order finds
// the same best split as a dense scan.
struct HistScratch {
    std::vector<GradHistBin> bins = std::vector<GradHistBin>(256);
    std::vector<std::array<double, 2>> counts = std::vector<std::array<double, 2>>(256);  // pos, neg
    std::vector<std::uint16_t> touched;
};

// Newton gain with L2 lambda; standard second-order split objective.
inline double split_gain(double gl, double hl, double gr, double hr) {
    double g = gl + gr, h = hl + hr;
    return 0.5 * (gl * gl / (hl + kHessLambda) + gr * gr / (hr + kHessLambda) - g * g / (h + kHessLambda));
}

inline GbtSplit best_gbt_split(const BinnedData& data, std::span<const std::uint32_t> rows,
                               std::span<const double> grad, std::span<const double> hess,
                               std::span<const double> weight, const std::vector<std::size_t>& features,
                               double g_total, double h_total, int min_leaf, HistScratch& scratch) {
    GbtSplit best;
    auto& hist = scratch.bins;
    auto& touched = scratch.touched;
    for (std::size_t f : features) {
        if (data.n_bins[f] < 2) continue;
        const std::uint8_t* codes = data.column(f);
        touched.clear();
        for (std::uint32_t r : rows) {
            auto b = codes[r];
            if (hist[b].cnt == 0) touched.push_back(b);
            double w = weight.empty() ? 1.0 : weight[r];
            hist[b].g += grad[r] * w;
            hist[b].h += hess[r] * w;
            hist[b].cnt += 1;
        }
        std::sort(touched.begin(), touched.end());
        double gl = 0, hl = 0;
        std::size_t nl = 0;
        for (std::uint16_t b : touched) {
            gl += hist[b].g;
            hl += hist[b].h;
            nl += hist[b].cnt;
            std::size_t nr = rows.size() - nl;
            if (nl < static_cast<std::size_t>(min_leaf) || nr < static_cast<std::size_t>(min_leaf)) continue;
            double gain = split_gain(gl, hl, g_total - gl, h_total - hl);
            if (gain > best.gain) {
                best = GbtSplit{gain, f, static_cast<int>(b), gl, hl, nl};
            }
        }
        for (std::uint16_t b : touched) hist[b] = GradHistBin{};
    }
    return best;
}

inline double leaf_value(double g, double h, double learning_rate) {
    return -learning_rate * g / (h + kHessLambda);
}

struct GossSelection {
    std::vector<std::uint32_t> rows;  // ascending
    std::vector<double> weight;      // indexed by row id; 1 for kept, (1-a)/b for sampled
};

// Gradient-based one-side sampling: keep the top fraction by |gradient|,
// sample the given fraction of the rest and reweight it by (1-a)/b.
inline GossSelection goss_select(std::span<const double> grad, double top_fraction,
                                 double other_fraction, std::mt19937_64& rng) {
    const std::size_t n = grad.size();
    GossSelection sel;
    sel.weight.assign(n, 1.0);
    auto top_n = static_cast<std::size_t>(std::llround(top_fraction * static_cast<double>(n)));
    auto other_n = static_cast<std::size_t>(std::llround(other_fraction * static_cast<double>(n)));
    if (top_n == 0 && other_n == 0) {
        sel.rows.resize(n);
        std::iota(sel.rows.begin(), sel.rows.end(), 0u);
        return sel;
    }
    std::vector<std::uint32_t> order(n);
    std::iota(order.begin(), order.end(), 0u);
    std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
        return std::abs(grad[a]) > std::abs(grad[b]);
    });
    top_n = std::min(top_n, n);
    sel.rows.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top_n));
    std::vector<std::uint32_t> rest(order.begin() + static_cast<std::ptrdiff_t>(top_n), order.end());
    std::sort(rest.begin(), rest.end());
    other_n = std::min(other_n, rest.size());
    std::vector<std::uint32_t> sampled;
    std::sample(rest.begin(), rest.end(), std::back_inserter(sampled), other_n, rng);
    double w = other_fraction > 0 ? (1.0 - top_fraction) / other_fraction : 1.0;
    for (std::uint32_t r : sampled) sel.weight[r] = w;
    sel.rows.insert(sel.rows.end(), sampled.begin(), sampled.end());
    std::sort(sel.rows.begin(), sel.rows.end());
    return sel;
}

// ---------------------------------------------------------------------------
// Random forest

struct RfGrowContext {
    const BinnedData& data;
    std::span<const std::uint8_t> labels;
    const ModelConfig& cfg;
    std::mt19937_64 rng;
    std::vector<std::uint32_t> idx;
    std::vector<std::uint32_t> scratch;
    std::vector<double> importance;
    double n_total = 0;
    Tree tree;
    HistScratch hist;
};

inline int rf_grow(RfGrowContext& ctx, std::size_t start, std::size_t len, int depth) {
    double pos = 0;
    for (std::size_t i = start; i < start + len; ++i) pos += ctx.labels[ctx.idx[i]];
    double neg = static_cast<double>(len) - pos;

    auto make_leaf = [&]() {
        TreeNode leaf;
        leaf.value = pos / static_cast<double>(len);
        leaf.n_samples = static_cast<int>(len);
        ctx.tree.nodes.push_back(leaf);
        return static_cast<int>(ctx.tree.nodes.size() - 1);
    };

    if (depth >= ctx.cfg.max_depth || pos == 0 || neg == 0 ||
        len < 2 * static_cast<std::size_t>(ctx.cfg.min_leaf))
        return make_leaf();

    double node_gini = gini(pos, neg);
    auto candidates = sample_distinct(ctx.data.n_features,
                                      static_cast<std::size_t>(std::max(1, ctx.cfg.max_features)), ctx.rng);

    double best_gain = 0.0;
    std::size_t best_feature = 0;
    int best_bin = -1;
    auto& hist = ctx.hist.counts;
    auto& touched = ctx.hist.touched;
    for (std::size_t f : candidates) {
        if (ctx.data.n_bins[f] < 2) continue;
        const std::uint8_t* codes = ctx.data.column(f);
        touched.clear();
        for (std::size_t i = start; i < start + len; ++i) {
            std::uint32_t r = ctx.idx[i];
            auto b = codes[r];
            if (hist[b][0] == 0 && hist[b][1] == 0) touched.push_back(b);
            hist[b][ctx.labels[r]] += 1.0;
        }
        std::sort(touched.begin(), touched.end());
        double pl = 0, nl = 0;
        for (std::uint16_t b : touched) {
            pl += hist[b][1];
            nl += hist[b][0];
            double left = pl + nl;
            double right = static_cast<double>(len) - left;
            if (left < ctx.cfg.min_leaf || right < ctx.cfg.min_leaf) continue;
            double gain = node_gini - (left / static_cast<double>(len)) * gini(pl, nl) -
                          (right / static_cast<double>(len)) * gini(pos - pl, neg - nl);
            if (gain > best_gain) {
                best_gain = gain;
                best_feature = f;
                best_bin = b;
            }
        }
        for (std::uint16_t b : touched) hist[b] = {0.0, 0.0};
    }
    if (best_bin < 0) return make_leaf();

    std::size_t left_len = partition_rows(ctx.idx, ctx.scratch, start, len, ctx.data, best_feature, best_bin);
    ctx.importance[best_feature] += (static_cast<double>(len) / ctx.n_total) * best_gain;

    TreeNode split;
    split.feature = static_cast<int>(best_feature);
    split.threshold = ctx.data.edges[best_feature][static_cast<std::size_t>(best_bin)];
    split.n_samples = static_cast<int>(len);
    ctx.tree.nodes.push_back(split);
    auto node_id = static_cast<int>(ctx.tree.nodes.size() - 1);
    int left = rf_grow(ctx, start, left_len, depth + 1);
    int right = rf_grow(ctx, start + left_len, len - left_len, depth + 1);
    ctx.tree.nodes[static_cast<std::size_t>(node_id)].left = left;
    ctx.tree.nodes[static_cast<std::size_t>(node_id)].right = right;
    return node_id;
}

inline void fit_random_forest(TrainedEnsemble& model, const BinnedData& data,
                              std::span<const std::uint8_t> labels, unsigned jobs) {
    const auto& cfg = model.config;
    const std::size_t n = data.n_rows;
    std::size_t n_trees = cfg.n_estimators < 0 ? 0 : static_cast<std::size_t>(cfg.n_estimators);
    model.trees.resize(n_trees);
    std::vector<std::vector<double>> tree_importance(n_trees);

    parallel_for(n_trees, jobs, [&](std::size_t t) {
        RfGrowContext ctx{data, labels, cfg,
                          std::mt19937_64(derive_seed(cfg.seed, "rf_tree", t)),
                          {}, {}, std::vector<double>(data.n_features, 0.0),
                          static_cast<double>(n), Tree{}};
        ctx.idx.resize(n);
        std::uniform_int_distribution<std::size_t> pick(0, n - 1);
        for (std::size_t i = 0; i < n; ++i) ctx.idx[i] = static_cast<std::uint32_t>(pick(ctx.rng));
        std::sort(ctx.idx.begin(), ctx.idx.end());
        rf_grow(ctx, 0, n, 0);  // nodes are pushed pre-order, so the root is index 0
        model.trees[t] = std::move(ctx.tree);
        tree_importance[t] = std::move(ctx.importance);
    });
    model.importances.assign(data.n_features, 0.0);
    for (const auto& imp : tree_importance)
        for (std::size_t f = 0; f < imp.size(); ++f) model.importances[f] += imp[f];
}

// ---------------------------------------------------------------------------
// Gradient boosting (level-wise and leaf-wise trees)

struct BoostState {
    std::vector<double> score;  // current decision value per row
    std::vector<double> grad, hess;

    void refresh(std::span<const std::uint8_t> labels) {
        for (std::size_t i = 0; i < score.size(); ++i) {
            double p = sigmoid(score[i]);
            grad[i] = p - static_cast<double>(labels[i]);
            hess[i] = std::max(p * (1.0 - p), 1e-16);
        }
    }

    double loss(std::span<const std::uint8_t> labels) const {
        double total = 0;
        for (std::size_t i = 0; i < score.size(); ++i)
            total += labels[i] ? stable_log1pexp(-score[i]) : stable_log1pexp(score[i]);
        return total / static_cast<double>(score.size());
    }
};

struct PendingNode {
    std::size_t start = 0, len = 0;
    double g = 0, h = 0;
    int node_id = -1;
    int depth = 0;
};

inline Tree grow_levelwise_tree(const BinnedData& data, const BoostState& state,
                                const std::vector<std::size_t>& features, const ModelConfig& cfg,
                                std::vector<std::uint32_t>& idx, std::vector<std::uint32_t>& scratch,
                                std::vector<double>& importance) {
    Tree tree;
    HistScratch scratch_hist;
    double g0 = 0, h0 = 0;
    for (std::uint32_t r : idx) {
        g0 += state.grad[r];
        h0 += state.hess[r];
    }
    tree.nodes.push_back(TreeNode{});
    tree.nodes[0].n_samples = static_cast<int>(idx.size());
    std::vector<PendingNode> frontier{{0, idx.size(), g0, h0, 0, 0}};

    while (!frontier.empty()) {
        std::vector<PendingNode> next;
        for (const auto& node : frontier) {
            auto& tn = tree.nodes[static_cast<std::size_t>(node.node_id)];
            GbtSplit best;
            if (node.depth < cfg.max_depth) {
                best = best_gbt_split(data, std::span(idx).subspan(node.start, node.len), state.grad,
                                      state.hess, {}, features, node.g, node.h, cfg.min_leaf,
                                      scratch_hist);
            }
            if (best.bin < 0 || best.gain < cfg.min_gain) {
                tn.value = leaf_value(node.g, node.h, cfg.learning_rate);
                continue;
            }
            std::size_t left_len =
                partition_rows(idx, scratch, node.start, node.len, data, best.feature, best.bin);
            importance[best.feature] += best.gain;
            tn.feature = static_cast<int>(best.feature);
            tn.threshold = data.edges[best.feature][static_cast<std::size_t>(best.bin)];
            TreeNode left_node, right_node;
            left_node.n_samples = static_cast<int>(left_len);
            right_node.n_samples = static_cast<int>(node.len - left_len);
            tree.nodes.push_back(left_node);
            int left_id = static_cast<int>(tree.nodes.size() - 1);
            tree.nodes.push_back(right_node);
            int right_id = static_cast<int>(tree.nodes.size() - 1);
            tree.nodes[static_cast<std::size_t>(node.node_id)].left = left_id;
            tree.nodes[static_cast<std::size_t>(node.node_id)].right = right_id;
            next.push_back({node.start, left_len, best.g_left, best.h_left, left_id, node.depth + 1});
            next.push_back({node.start + left_len, node.len - left_len, node.g - best.g_left,
                            node.h - best.h_left, right_id, node.depth + 1});
        }
        frontier = std::move(next);
    }
    return tree;
}

inline Tree grow_leafwise_tree(const BinnedData& data, const BoostState& state,
                               std::span<const double> weight, const std::vector<std::size_t>& features,
                               const ModelConfig& cfg, std::vector<std::uint32_t>& idx,
                               std::vector<std::uint32_t>& scratch, std::vector<double>& importance) {
    Tree tree;
    HistScratch scratch_hist;
    double g0 = 0, h0 = 0;
    for (std::uint32_t r : idx) {
        double w = weight.empty() ? 1.0 : weight[r];
        g0 += state.grad[r] * w;
        h0 += state.hess[r] * w;
    }
    tree.nodes.push_back(TreeNode{});
    tree.nodes[0].n_samples = static_cast<int>(idx.size());

    struct Candidate {
        double gain;
        std::uint64_t order;  // insertion order breaks gain ties
        PendingNode node;
        GbtSplit split;
        bool operator<(const Candidate& other) const {
            if (gain != other.gain) return gain < other.gain;
            return order > other.order;
        }
    };
    std::priority_queue<Candidate> heap;
    std::uint64_t order = 0;

    auto consider = [&](const PendingNode& node) {
        if (node.depth >= cfg.max_depth) return;
        GbtSplit best = best_gbt_split(data, std::span(idx).subspan(node.start, node.len), state.grad,
                                       state.hess, weight, features, node.g, node.h, cfg.min_leaf,
                                       scratch_hist);
        if (best.bin >= 0 && best.gain >= cfg.min_gain) heap.push({best.gain, order++, node, best});
    };

    std::vector<PendingNode> leaves{{0, idx.size(), g0, h0, 0, 0}};
    consider(leaves[0]);
    std::size_t n_leaves = 1;
    std::vector<std::pair<int, std::pair<double, double>>> leaf_stats{{0, {g0, h0}}};

    while (n_leaves < static_cast<std::size_t>(cfg.max_leaves) && !heap.empty()) {
        Candidate cand = heap.top();
        heap.pop();
        const auto& node = cand.node;
        const auto& split = cand.split;
        std::size_t left_len = partition_rows(idx, scratch, node.start, node.len, data, split.feature,
                                              static_cast<int>(split.bin));
        importance[split.feature] += split.gain;
        auto& tn = tree.nodes[static_cast<std::size_t>(node.node_id)];
        tn.feature = static_cast<int>(split.feature);
        tn.threshold = data.edges[split.feature][static_cast<std::size_t>(split.bin)];
        TreeNode left_node, right_node;
        left_node.n_samples = static_cast<int>(left_len);
        right_node.n_samples = static_cast<int>(node.len - left_len);
        tree.nodes.push_back(left_node);
        int left_id = static_cast<int>(tree.nodes.size() - 1);
        tree.nodes.push_back(right_node);
        int right_id = static_cast<int>(tree.nodes.size() - 1);
        tree.nodes[static_cast<std::size_t>(node.node_id)].left = left_id;
        tree.nodes[static_cast<std::size_t>(node.node_id)].right = right_id;

        PendingNode left{node.start, left_len, split.g_left, split.h_left, left_id, node.depth + 1};
        PendingNode right{node.start + left_len, node.len - left_len, node.g - split.g_left,
                          node.h - split.h_left, right_id, node.depth + 1};
        leaf_stats.emplace_back(left_id, std::make_pair(left.g, left.h));
        leaf_stats.emplace_back(right_id, std::make_pair(right.g, right.h));
        ++n_leaves;
        consider(left);
        consider(right);
    }

    for (const auto& [node_id, gh] : leaf_stats) {
        auto& tn = tree.nodes[static_cast<std::size_t>(node_id)];
        if (tn.is_leaf()) tn.value = leaf_value(gh.first, gh.second, cfg.learning_rate);
    }
    return tree;
}

inline void fit_boosted(TrainedEnsemble& model, const BinnedData& data,
                        std::span<const std::uint8_t> labels) {
    const auto& cfg = model.config;
    const std::size_t n = data.n_rows;
    BoostState state;
    state.score.assign(n, model.base_score);
    state.grad.resize(n);
    state.hess.resize(n);
    model.train_loss.push_back(state.loss(labels));
    model.importances.assign(data.n_features, 0.0);

    std::vector<std::uint32_t> idx, scratch;
    std::vector<std::uint32_t> all_rows(n);
    std::iota(all_rows.begin(), all_rows.end(), 0u);

    for (int round = 0; round < cfg.n_estimators; ++round) {
        state.refresh(labels);
        std::mt19937_64 rng(derive_seed(cfg.seed, "boost_round", static_cast<std::uint64_t>(round)));
        auto features = feature_subset(data.n_features, cfg.feature_subsample, rng);

        Tree tree;
        if (cfg.family == Family::leafwise_gbt) {
            GossSelection sel = goss_select(state.grad, cfg.goss_top_fraction, cfg.goss_other_fraction, rng);
            idx = sel.rows;
            tree = grow_leafwise_tree(data, state, sel.weight, features, cfg, idx, scratch,
                                      model.importances);
        } else {
            idx = all_rows;
            tree = grow_levelwise_tree(data, state, features, cfg, idx, scratch, model.importances);
        }
        for (std::size_t i = 0; i < n; ++i) {
            // Walk by bin codes; thresholds are bin edges, so code comparison
            // against the edge's bin index is exact.
            int node = 0;
            while (!tree.nodes[static_cast<std::size_t>(node)].is_leaf()) {
                const auto& tn = tree.nodes[static_cast<std::size_t>(node)];
                const auto& edges = data.edges[static_cast<std::size_t>(tn.feature)];
                auto bin = static_cast<std::uint8_t>(
                    std::lower_bound(edges.begin(), edges.end(), tn.threshold) - edges.begin());
                node = data.code(i, static_cast<std::size_t>(tn.feature)) <= bin ? tn.left : tn.right;
            }
            state.score[i] += tree.nodes[static_cast<std::size_t>(node)].value;
        }
        model.trees.push_back(std::move(tree));
        model.train_loss.push_back(state.loss(labels));
    }
}

// ---------------------------------------------------------------------------
// Cyclic GAM: round-robin boosting of single-feature trees on bins.

inline void fit_cyclic_gam(TrainedEnsemble& model, const BinnedData& data,
                           std::span<const std::uint8_t> labels) {
    const auto& cfg = model.config;
    const std::size_t n = data.n_rows;
    BoostState state;
    state.score.assign(n, model.base_score);
    state.grad.resize(n);
    state.hess.resize(n);
    model.train_loss.push_back(state.loss(labels));
    model.importances.assign(data.n_features, 0.0);
    model.shape.resize(data.n_features);
    for (std::size_t f = 0; f < data.n_features; ++f)
        model.shape[f].assign(static_cast<std::size_t>(data.n_bins[f]), 0.0);

    struct Segment {
        int lo = 0, hi = 0;  // bin range [lo, hi)
        double g = 0, h = 0;
        std::size_t cnt = 0;
    };

    std::vector<GradHistBin> hist;
    for (int round = 0; round < cfg.n_estimators; ++round) {
        for (std::size_t f = 0; f < data.n_features; ++f) {
            state.refresh(labels);
            int nb = data.n_bins[f];
            hist.assign(static_cast<std::size_t>(nb), GradHistBin{});
            for (std::size_t i = 0; i < n; ++i) {
                auto b = data.code(i, f);
                hist[b].g += state.grad[i];
                hist[b].h += state.hess[i];
                hist[b].cnt += 1;
            }
            auto segment_stats = [&](int lo, int hi) {
                Segment s;
                s.lo = lo;
                s.hi = hi;
                for (int b = lo; b < hi; ++b) {
                    s.g += hist[static_cast<std::size_t>(b)].g;
                    s.h += hist[static_cast<std::size_t>(b)].h;
                    s.cnt += hist[static_cast<std::size_t>(b)].cnt;
                }
                return s;
            };
            struct SegSplit {
                double gain = -std::numeric_limits<double>::infinity();
                int bin = -1;
                double gl = 0, hl = 0;
                std::size_t nl = 0;
            };
            auto best_seg_split = [&](const Segment& s) {
                SegSplit best;
                double gl = 0, hl = 0;
                std::size_t nl = 0;
                for (int b = s.lo; b + 1 < s.hi; ++b) {
                    gl += hist[static_cast<std::size_t>(b)].g;
                    hl += hist[static_cast<std::size_t>(b)].h;
                    nl += hist[static_cast<std::size_t>(b)].cnt;
                    std::size_t nr = s.cnt - nl;
                    if (nl < static_cast<std::size_t>(cfg.min_leaf) ||
                        nr < static_cast<std::size_t>(cfg.min_leaf))
                        continue;
                    double gain = split_gain(gl, hl, s.g - gl, s.h - hl);
                    if (gain > best.gain) best = SegSplit{gain, b, gl, hl, nl};
                }
                return best;
            };

            struct Candidate {
                double gain;
                std::uint64_t order;
                Segment seg;
                SegSplit split;
                bool operator<(const Candidate& other) const {
                    if (gain != other.gain) return gain < other.gain;
                    return order > other.order;
                }
            };
            std::priority_queue<Candidate> heap;
            std::uint64_t order = 0;
            std::vector<Segment> finished;
            auto consider = [&](const Segment& s) {
                SegSplit split = best_seg_split(s);
                if (split.bin >= 0 && split.gain >= cfg.min_gain)
                    heap.push({split.gain, order++, s, split});
                else
                    finished.push_back(s);
            };
            Segment root = segment_stats(0, nb);
            std::size_t n_segments = 1;
            if (root.cnt == 0) continue;
            consider(root);
            while (n_segments < static_cast<std::size_t>(cfg.max_leaves) && !heap.empty()) {
                Candidate cand = heap.top();
                heap.pop();
                Segment left{cand.seg.lo, cand.split.bin + 1, cand.split.gl, cand.split.hl, cand.split.nl};
                Segment right{cand.split.bin + 1, cand.seg.hi, cand.seg.g - cand.split.gl,
                              cand.seg.h - cand.split.hl, cand.seg.cnt - cand.split.nl};
                model.importances[f] += cand.gain;
                ++n_segments;
                consider(left);
                consider(right);
            }
            while (!heap.empty()) {
                finished.push_back(heap.top().seg);
                heap.pop();
            }
            std::vector<double> delta(static_cast<std::size_t>(nb), 0.0);
            for (const auto& s : finished) {
                double v = leaf_value(s.g, s.h, cfg.learning_rate);
                for (int b = s.lo; b < s.hi; ++b) {
                    delta[static_cast<std::size_t>(b)] = v;
                    model.shape[f][static_cast<std::size_t>(b)] += v;
                }
            }
            for (std::size_t i = 0; i < n; ++i) state.score[i] += delta[data.code(i, f)];
        }
        model.train_loss.push_back(state.loss(labels));
    }
}

}  // namespace detail

inline void validate_config(const ModelConfig& cfg) {
    if (cfg.n_estimators < 0) throw ConfigError("n_estimators must be >= 0");
    if (cfg.max_features < 1) throw ConfigError("max_features must be >= 1");
    if (cfg.max_depth < 1) throw ConfigError("max_depth must be >= 1");
    if (cfg.min_leaf < 1) throw ConfigError("min_leaf must be >= 1");
    if (cfg.min_gain < 0) throw ConfigError("min_gain must be >= 0");
    if (!(cfg.learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
    if (!(cfg.feature_subsample > 0 && cfg.feature_subsample <= 1))
        throw ConfigError("feature_subsample must be in (0, 1]");
    if (cfg.max_leaves < 2) throw ConfigError("max_leaves must be >= 2");
    if (cfg.max_bins < 2 || cfg.max_bins > 256) throw ConfigError("max_bins must be in [2, 256]");
    if (cfg.goss_top_fraction < 0 || cfg.goss_other_fraction < 0 ||
        cfg.goss_top_fraction + cfg.goss_other_fraction > 1)
        throw ConfigError("GOSS fractions must be nonnegative with sum <= 1");
}

inline TrainedEnsemble fit(const ModelConfig& config, const FeatureTable& train,
                           unsigned jobs = default_jobs()) {
    validate_config(config);
    train.validate();
    if (train.n_features() == 0) throw DataError("cannot fit on an empty feature set");
    std::size_t n_mal = train.count_malicious();
    if (n_mal == 0 || n_mal == train.n_rows())
        throw DataError("training set must contain both classes");

    TrainedEnsemble model;
    model.config = config;
    model.feature_names = train.schema.names;
    model.prior = static_cast<double>(n_mal) / static_cast<double>(train.n_rows());
    double p = std::clamp(model.prior, 1e-7, 1.0 - 1e-7);
    model.base_score = std::log(p / (1.0 - p));

    detail::BinnedData data = detail::bin_table(train, config.max_bins);
    model.bin_edges = data.edges;
    model.importances.assign(train.n_features(), 0.0);

    switch (config.family) {
        case Family::random_forest:
            detail::fit_random_forest(model, data, train.labels, jobs);
            break;
        case Family::levelwise_gbt:
        case Family::leafwise_gbt:
            detail::fit_boosted(model, data, train.labels);
            break;
        case Family::cyclic_gam:
            detail::fit_cyclic_gam(model, data, train.labels);
            break;
    }
    double total = std::accumulate(model.importances.begin(), model.importances.end(), 0.0);
    if (total > 0)
        for (auto& v : model.importances) v /= total;
    return model;
}

// ---------------------------------------------------------------------------
// Hyperparameter search: exhaustive grid, stratified 5-fold CV, mean F1.

struct ParamGrid {
    std::vector<int> max_depth;
    std::vector<int> min_leaf;
    std::vector<int> max_leaves;
    std::vector<double> learning_rate;
    std::vector<double> feature_subsample;
};

inline ParamGrid default_grid(Family family) {
    ParamGrid g;
    switch (family) {
        case Family::random_forest:
            g.max_depth = {8, 12, 16};
            g.min_leaf = {1, 4};
            break;
        case Family::levelwise_gbt:
            g.max_depth = {4, 8, 16};
            g.learning_rate = {0.1, 0.2, 0.3};
            g.feature_subsample = {0.7, 0.9};
            break;
        case Family::leafwise_gbt:
            g.learning_rate = {0.1, 0.2};
            g.feature_subsample = {0.7, 0.8};
            break;
        case Family::cyclic_gam:
            g.max_leaves = {3, 15};
            g.min_leaf = {1, 2};
            break;
    }
    return g;
}

inline std::vector<ModelConfig> enumerate_grid(Family family, const ParamGrid& grid) {
    ModelConfig base = default_config(family);
    auto depths = grid.max_depth.empty() ? std::vector<int>{base.max_depth} : grid.max_depth;
    auto leafs = grid.min_leaf.empty() ? std::vector<int>{base.min_leaf} : grid.min_leaf;
    auto leaves = grid.max_leaves.empty() ? std::vector<int>{base.max_leaves} : grid.max_leaves;
    auto rates = grid.learning_rate.empty() ? std::vector<double>{base.learning_rate} : grid.learning_rate;
    auto subsamples =
        grid.feature_subsample.empty() ? std::vector<double>{base.feature_subsample} : grid.feature_subsample;
    std::vector<ModelConfig> out;
    for (int depth : depths)
        for (int min_leaf : leafs)
            for (int max_leaves : leaves)
                for (double lr : rates)
                    for (double sub : subsamples) {
                        ModelConfig c = base;
                        c.max_depth = depth;
                        c.min_leaf = min_leaf;
                        c.max_leaves = max_leaves;
                        c.learning_rate = lr;
                        c.feature_subsample = sub;
                        out.push_back(c);
                    }
    return out;
}

namespace detail {

inline std::vector<std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> stratified_folds(
    std::span<const std::uint8_t> labels, std::size_t k, std::uint64_t seed) {
    std::vector<std::size_t> by_class[2];
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
    std::vector<std::size_t> fold_of(labels.size(), 0);
    for (int c = 0; c < 2; ++c) {
        auto idx = by_class[c];
        std::mt19937_64 rng(derive_seed(seed, "fold", static_cast<std::uint64_t>(c)));
        std::shuffle(idx.begin(), idx.end(), rng);
        for (std::size_t i = 0; i < idx.size(); ++i) fold_of[idx[i]] = i % k;
    }
    std::vector<std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> folds(k);
    for (std::size_t i = 0; i < labels.size(); ++i)
        for (std::size_t f = 0; f < k; ++f)
            (fold_of[i] == f ? folds[f].second : folds[f].first).push_back(i);
    return folds;
}

inline double f1_score(std::span<const std::uint8_t> truth, std::span<const std::uint8_t> pred) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (pred[i] && truth[i]) tp += 1;
        else if (pred[i]) fp += 1;
        else if (truth[i]) fn += 1;
    }
    double prc = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    double rcl = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    return prc + rcl > 0 ? 2 * prc * rcl / (prc + rcl) : 0.0;
}

// Structural knob used for tie-breaking: tree size before learning rate.
inline int structure_key(const ModelConfig& c) {
    return (c.family == Family::leafwise_gbt || c.family == Family::cyclic_gam) ? c.max_leaves
                                                                                : c.max_depth;
}

}  // namespace detail

inline ModelConfig tune(Family family, const ParamGrid& grid, const FeatureTable& train,
                        std::uint64_t seed, unsigned jobs = default_jobs()) {
    auto candidates = enumerate_grid(family, grid);
    if (candidates.empty()) throw ConfigError("empty hyperparameter grid");
    constexpr std::size_t kFolds = 5;
    auto folds = detail::stratified_folds(train.labels, kFolds, derive_seed(seed, "cv"));
    for (std::size_t f = 0; f < folds.size(); ++f) {
        for (const auto& part : {folds[f].first, folds[f].second}) {
            std::size_t pos = 0;
            for (std::size_t i : part) pos += train.labels[i];
            if (pos == 0 || pos == part.size())
                throw DataError("cross-validation fold " + std::to_string(f) +
                                " is single-class; supply more minority samples");
        }
    }

    std::vector<double> mean_f1(candidates.size(), 0.0);
    std::vector<double> fold_f1(candidates.size() * kFolds, 0.0);
    parallel_for(candidates.size() * kFolds, jobs, [&](std::size_t task) {
        std::size_t cand = task / kFolds;
        std::size_t fold = task % kFolds;
        ModelConfig cfg = candidates[cand];
        cfg.seed = derive_seed(seed, "tune", cand, fold);
        FeatureTable fit_part = select_rows(train, folds[fold].first);
        FeatureTable val_part = select_rows(train, folds[fold].second);
        TrainedEnsemble model = fit(cfg, fit_part, 1);
        auto pred = model.predict_labels(val_part);
        fold_f1[task] = detail::f1_score(val_part.labels, pred);
    });
    for (std::size_t cand = 0; cand < candidates.size(); ++cand) {
        double total = 0;
        for (std::size_t fold = 0; fold < kFolds; ++fold) total += fold_f1[cand * kFolds + fold];
        mean_f1[cand] = total / static_cast<double>(kFolds);
    }

    std::size_t best = 0;
    for (std::size_t cand = 1; cand < candidates.size(); ++cand) {
        if (mean_f1[cand] > mean_f1[best]) {
            best = cand;
        } else if (mean_f1[cand] == mean_f1[best]) {
            int sk_cand = detail::structure_key(candidates[cand]);
            int sk_best = detail::structure_key(candidates[best]);
            if (sk_cand < sk_best ||
                (sk_cand == sk_best && candidates[cand].learning_rate < candidates[best].learning_rate))
                best = cand;
        }
    }
    ModelConfig winner = candidates[best];
    winner.seed = derive_seed(seed, "fit_final");
    return winner;
}

// ---------------------------------------------------------------------------
// Model artifact: versioned JSON with nested tree objects; load-back
// reproduces predictions bit-identically.

namespace detail {

inline nlohmann::json node_to_json(const Tree& tree, int i) {
    const auto& n = tree.nodes[static_cast<std::size_t>(i)];
    if (n.is_leaf()) return {{"n", n.n_samples}, {"value", n.value}};
    return {{"n", n.n_samples},
            {"feature", n.feature},
            {"threshold", n.threshold},
            {"left", node_to_json(tree, n.left)},
            {"right", node_to_json(tree, n.right)}};
}

inline int node_from_json(const nlohmann::json& j, Tree& tree) {
    TreeNode node;
    node.n_samples = j.value("n", 0);
    tree.nodes.push_back(node);
    auto id = static_cast<int>(tree.nodes.size() - 1);
    if (j.contains("feature")) {
        int left = node_from_json(j.at("left"), tree);
        int right = node_from_json(j.at("right"), tree);
        auto& n = tree.nodes[static_cast<std::size_t>(id)];
        n.feature = j.at("feature").get<int>();
        n.threshold = j.at("threshold").get<double>();
        n.left = left;
        n.right = right;
    } else {
        tree.nodes[static_cast<std::size_t>(id)].value = j.at("value").get<double>();
    }
    return id;
}

}  // namespace detail

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return {{"family", family_name(c.family)},
            {"n_estimators", c.n_estimators},
            {"max_features", c.max_features},
            {"max_depth", c.max_depth},
            {"min_leaf", c.min_leaf},
            {"min_gain", c.min_gain},
            {"learning_rate", c.learning_rate},
            {"feature_subsample", c.feature_subsample},
            {"max_leaves", c.max_leaves},
            {"max_bins", c.max_bins},
            {"goss_top_fraction", c.goss_top_fraction},
            {"goss_other_fraction", c.goss_other_fraction},
            {"seed", c.seed}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.family = family_from_name(j.at("family").get<std::string>());
    c.n_estimators = j.at("n_estimators").get<int>();
    c.max_features = j.at("max_features").get<int>();
    c.max_depth = j.at("max_depth").get<int>();
    c.min_leaf = j.at("min_leaf").get<int>();
    c.min_gain = j.at("min_gain").get<double>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.feature_subsample = j.at("feature_subsample").get<double>();
    c.max_leaves = j.at("max_leaves").get<int>();
    c.max_bins = j.at("max_bins").get<int>();
    c.goss_top_fraction = j.at("goss_top_fraction").get<double>();
    c.goss_other_fraction = j.at("goss_other_fraction").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

inline nlohmann::json model_to_json(const TrainedEnsemble& model) {
    nlohmann::json j;
    j["format_version"] = 1;
    j["config"] = config_to_json(model.config);
    j["feature_names"] = model.feature_names;
    j["prior"] = model.prior;
    j["base_score"] = model.base_score;
    j["bin_edges"] = model.bin_edges;
    nlohmann::json trees = nlohmann::json::array();
    for (const auto& t : model.trees) trees.push_back(detail::node_to_json(t, 0));
    j["trees"] = trees;
    j["shape"] = model.shape;
    j["importances"] = model.importances;
    j["train_loss"] = model.train_loss;
    return j;
}

inline TrainedEnsemble model_from_json(const nlohmann::json& j) {
    if (j.value("format_version", 0) != 1) throw DataError("unsupported model artifact version");
    TrainedEnsemble model;
    model.config = config_from_json(j.at("config"));
    model.feature_names = j.at("feature_names").get<std::vector<std::string>>();
    model.prior = j.at("prior").get<double>();
    model.base_score = j.at("base_score").get<double>();
    model.bin_edges = j.at("bin_edges").get<std::vector<std::vector<double>>>();
    for (const auto& t : j.at("trees")) {
        Tree tree;
        detail::node_from_json(t, tree);
        model.trees.push_back(std::move(tree));
    }
    model.shape = j.at("shape").get<std::vector<std::vector<double>>>();
    model.importances = j.at("importances").get<std::vector<double>>();
    model.train_loss = j.at("train_loss").get<std::vector<double>>();
    return model;
}

inline void save_model(const TrainedEnsemble& model, const std::filesystem::path& path) {
    write_file_atomic(path, model_to_json(model).dump(2) + "\n");
}

inline TrainedEnsemble load_model(const std::filesystem::path& path) {
    try {
        return model_from_json(nlohmann::json::parse(read_file(path)));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("cannot parse model artifact " + path.string() + ": " + e.what());
    }
}

}  // namespace robustsel
