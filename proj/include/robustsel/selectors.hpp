#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "robustsel/ensembles.hpp"
#include "robustsel/flowdata.hpp"

namespace robustsel {

enum class Method { info_gain, chi_squared, rfe, mad, dispersion_ratio };

inline constexpr std::array<Method, 5> all_methods() {
    return {Method::info_gain, Method::chi_squared, Method::rfe, Method::mad, Method::dispersion_ratio};
}

inline std::string method_name(Method m) {
    switch (m) {
        case Method::info_gain: return "info_gain";
        case Method::chi_squared: return "chi_squared";
        case Method::rfe: return "rfe";
        case Method::mad: return "mad";
        case Method::dispersion_ratio: return "dispersion_ratio";
    }
    return "info_gain";
}

inline Method method_from_name(const std::string& s) {
    for (Method m : all_methods())
        if (method_name(m) == s) return m;
    throw ConfigError("unknown selection method: " + s);
}

// Counts of a 2x2 term/class table: p = term & class, q = term & other,
// m = class without term, n = neither. Total is p+q+m+n by construction.
struct ContingencyCounts {
    double p = 0, q = 0, m = 0, n = 0;
    double total() const { return p + q + m + n; }
};

struct RawScoreVector {
    Method method = Method::info_gain;
    std::vector<double> scores;  // per feature, finite and >= 0
};

inline double entropy(std::span<const std::uint8_t> labels) {
    if (labels.empty()) throw DataError("entropy of an empty label vector");
    double pos = 0;
    for (auto l : labels) pos += l;
    double n = static_cast<double>(labels.size());
    double h = 0.0;
    for (double c : {pos, n - pos}) {
        if (c <= 0) continue;
        double p = c / n;
        h -= p * std::log(p);
    }
    return h;
}

inline double chi_squared(const ContingencyCounts& c) {
    if (c.p < 0 || c.q < 0 || c.m < 0 || c.n < 0) throw DataError("negative contingency count");
    double pm = c.p + c.m, qn = c.q + c.n, pq = c.p + c.q, mn = c.m + c.n;
    if (pm == 0 || qn == 0 || pq == 0 || mn == 0)
        throw DegenerateError("chi-squared statistic undefined: zero marginal");
    double diff = c.p * c.n - c.m * c.q;
    return c.total() * diff * diff / (pm * qn * pq * mn);
}

// Term presence for the chi-squared test: strictly above the column median.
inline std::vector<std::uint8_t> binarize_for_chi2(std::span<const double> feature) {
    if (feature.empty()) throw DataError("binarize_for_chi2 on an empty column");
    std::vector<double> sorted(feature.begin(), feature.end());
    std::sort(sorted.begin(), sorted.end());
    std::size_t n = sorted.size();
    double median = (n % 2 == 1) ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    std::vector<std::uint8_t> present(n);
    for (std::size_t i = 0; i < n; ++i) present[i] = feature[i] > median ? 1 : 0;
    return present;
}

// Mean absolute deviation of the column after min-max scaling to [0, 1].
inline double mad(std::span<const double> feature) {
    if (feature.empty()) throw DataError("mad of an empty column");
    auto [mn_it, mx_it] = std::minmax_element(feature.begin(), feature.end());
    double mn = *mn_it, mx = *mx_it;
    if (mx == mn) return 0.0;
    double scale = mx - mn;
    double mean = 0.0;
    for (double v : feature) mean += (v - mn) / scale;
    mean /= static_cast<double>(feature.size());
    double dev = 0.0;
    for (double v : feature) dev += std::abs((v - mn) / scale - mean);
    return dev / static_cast<double>(feature.size());
}

// Arithmetic-to-geometric mean ratio; columns reaching below 1 are shifted up
// so the minimum becomes 1 and the geometric mean stays defined.
inline double dispersion_ratio(std::span<const double> feature) {
    if (feature.empty()) throw DataError("dispersion_ratio of an empty column");
    auto [mn_it, mx_it] = std::minmax_element(feature.begin(), feature.end());
    if (*mn_it == *mx_it) return 1.0;
    double shift = std::max(0.0, 1.0 - *mn_it);
    double am = 0.0, log_gm = 0.0;
    for (double v : feature) {
        double x = v + shift;
        am += x;
        log_gm += std::log(x);
    }
    double n = static_cast<double>(feature.size());
    return std::max(1.0, (am / n) / std::exp(log_gm / n));
}

namespace detail {

inline constexpr double kEulerGamma = 0.57721566490153286061;

// Digamma at integer arguments 1..n via the harmonic recurrence.
inline std::vector<double> digamma_table(std::size_t n) {
    std::vector<double> psi(n + 1, 0.0);
    if (n >= 1) psi[1] = -kEulerGamma;
    for (std::size_t i = 1; i < n; ++i) psi[i + 1] = psi[i] + 1.0 / static_cast<double>(i);
    return psi;
}

inline std::size_t count_distinct(std::span<const double> x, std::size_t cap) {
    std::vector<double> sorted(x.begin(), x.end());
    std::sort(sorted.begin(), sorted.end());
    std::size_t distinct = 0;
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        if (i == 0 || sorted[i] != sorted[i - 1]) {
            if (++distinct > cap) return distinct;
        }
    }
    return distinct;
}

// Exact plug-in I(X;Y) over the joint frequencies of a low-cardinality column.
inline double discrete_mutual_information(std::span<const double> x, std::span<const std::uint8_t> y) {
    std::map<double, std::array<double, 2>> joint;
    for (std::size_t i = 0; i < x.size(); ++i) joint[x[i]][y[i]] += 1.0;
    double n = static_cast<double>(x.size());
    double n_pos = 0;
    for (auto l : y) n_pos += l;
    std::array<double, 2> py = {(n - n_pos) / n, n_pos / n};
    double mi = 0.0;
    for (const auto& [value, counts] : joint) {
        double px = (counts[0] + counts[1]) / n;
        for (int c = 0; c < 2; ++c) {
            if (counts[c] <= 0 || py[c] <= 0) continue;
            double pxy = counts[c] / n;
            mi += pxy * std::log(pxy / (px * py[c]));
        }
    }
    return std::max(0.0, mi);
}

// Nearest-neighbor mutual information between a continuous column and the
// binary label (Ross-style mixed estimator, 1-D specialization).
inline double knn_mutual_information(std::span<const double> x, std::span<const std::uint8_t> y, int k) {
    const std::size_t n_all = x.size();
    std::size_t class_count[2] = {0, 0};
    for (auto l : y) ++class_count[l];
    // Points in singleton classes carry no neighborhood information.
    std::vector<std::size_t> keep;
    keep.reserve(n_all);
    for (std::size_t i = 0; i < n_all; ++i)
        if (class_count[y[i]] > 1) keep.push_back(i);
    if (keep.size() < 2) return 0.0;

    std::vector<double> sorted_by_class[2];
    for (std::size_t i : keep) sorted_by_class[y[i]].push_back(x[i]);
    for (auto& v : sorted_by_class) std::sort(v.begin(), v.end());
    std::vector<double> all_sorted;
    all_sorted.reserve(keep.size());
    for (std::size_t i : keep) all_sorted.push_back(x[i]);
    std::sort(all_sorted.begin(), all_sorted.end());

    const double n_masked = static_cast<double>(keep.size());
    auto psi = digamma_table(keep.size() + 1);

    double sum_psi_k = 0.0, sum_psi_label = 0.0, sum_psi_m = 0.0;
    for (std::size_t i : keep) {
        const auto& own = sorted_by_class[y[i]];
        const std::size_t cnt = own.size();
        const int k_eff = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(k), cnt - 1));

        // k-th nearest same-class neighbor distance via a two-pointer window
        // around this value in the class-sorted array.
        auto pos = static_cast<std::size_t>(std::lower_bound(own.begin(), own.end(), x[i]) - own.begin());
        // pos points at the first occurrence of x[i]; treat that slot as self.
        std::ptrdiff_t left = static_cast<std::ptrdiff_t>(pos) - 1;
        std::size_t right = pos + 1;
        double dist = 0.0;
        for (int step = 0; step < k_eff; ++step) {
            double dl = left >= 0 ? x[i] - own[static_cast<std::size_t>(left)]
                                  : std::numeric_limits<double>::infinity();
            double dr = right < cnt ? own[right] - x[i] : std::numeric_limits<double>::infinity();
            if (dl <= dr) {
                dist = dl;
                --left;
            } else {
                dist = dr;
                ++right;
            }
        }
        double radius = std::nextafter(dist, 0.0);
        // Count by the computed distance, not by value bounds: adding the
        // radius to x[i] can round the shrunken radius away and re-include
        // the k-th neighbor.
        double v = x[i];
        auto mid = std::lower_bound(all_sorted.begin(), all_sorted.end(), v);
        auto hi = std::partition_point(mid, all_sorted.end(), [&](double a) { return a - v <= radius; });
        auto lo = std::partition_point(all_sorted.begin(), mid, [&](double a) { return v - a > radius; });
        auto m = static_cast<std::size_t>(hi - lo);  // includes self
        sum_psi_k += psi[static_cast<std::size_t>(k_eff)];
        sum_psi_label += psi[cnt];
        sum_psi_m += psi[std::max<std::size_t>(m, 1)];
    }
    double mi = psi[keep.size()] + sum_psi_k / n_masked - sum_psi_label / n_masked - sum_psi_m / n_masked;
    return std::max(0.0, mi);
}

}  // namespace detail

// Discrete plug-in estimator for low-cardinality columns (<= 16 distinct
// values), nearest-neighbor estimator otherwise. Deterministic.
inline double info_gain(std::span<const double> feature, std::span<const std::uint8_t> labels, int k = 3) {
    if (feature.size() != labels.size()) throw DataError("info_gain length mismatch");
    if (feature.empty()) throw DataError("info_gain on an empty column");
    if (k < 1) throw ConfigError("info_gain neighbor count must be >= 1");
    if (detail::count_distinct(feature, 16) <= 16)
        return detail::discrete_mutual_information(feature, labels);
    return detail::knn_mutual_information(feature, labels, k);
}

using ImportanceLearner = std::function<std::vector<double>(const FeatureTable&, std::uint64_t)>;

// 100-tree random forest with the default configuration as the elimination
// engine.
inline ImportanceLearner default_rfe_learner() {
    return [](const FeatureTable& table, std::uint64_t seed) {
        ModelConfig config = default_config(Family::random_forest);
        config.seed = seed;
        return fit(config, table).importances;
    };
}

// Eliminate the least important feature one iteration at a time; the last
// survivor gets rank 1. Score for rank r among d features is
// (d - r + 1) / (d (d + 1) / 2), positive and summing to one.
inline RawScoreVector rfe_rank(const FeatureTable& table, const ImportanceLearner& learner,
                               std::uint64_t seed = 0, std::vector<std::string>* warnings = nullptr) {
    const std::size_t d = table.n_features();
    if (d < 2) throw DataError("rfe_rank requires at least 2 features");
    std::size_t n_mal = table.count_malicious();
    if (n_mal == 0 || n_mal == table.n_rows()) throw DataError("rfe_rank requires both classes");

    std::vector<std::size_t> remaining(d);
    std::iota(remaining.begin(), remaining.end(), std::size_t{0});
    std::vector<std::size_t> rank(d, 0);
    for (std::size_t iter = 0; remaining.size() > 1; ++iter) {
        FeatureTable sub = select_features(table, remaining);
        std::vector<double> imp = learner(sub, derive_seed(seed, "rfe_iter", iter));
        if (imp.size() != remaining.size()) throw DataError("importance learner returned wrong length");
        if (warnings && std::all_of(imp.begin(), imp.end(), [](double v) { return v == 0.0; }))
            warnings->push_back("rfe: all importances zero at iteration " + std::to_string(iter) +
                                "; eliminating lowest column index");
        // min_element takes the first minimum, i.e. the lowest column index.
        auto victim = static_cast<std::size_t>(std::min_element(imp.begin(), imp.end()) - imp.begin());
        rank[remaining[victim]] = d - iter;  // eliminated first = worst rank
        remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(victim));
    }
    rank[remaining[0]] = 1;

    RawScoreVector out;
    out.method = Method::rfe;
    out.scores.resize(d);
    double rank_sum = static_cast<double>(d) * static_cast<double>(d + 1) / 2.0;
    for (std::size_t f = 0; f < d; ++f)
        out.scores[f] = static_cast<double>(d - rank[f] + 1) / rank_sum;
    return out;
}

inline RawScoreVector score_all(const FeatureTable& table, Method method, std::uint64_t seed = 0,
                                const ImportanceLearner& learner = {}) {
    table.validate();
    const std::size_t d = table.n_features();
    RawScoreVector out;
    out.method = method;
    // A table of constant columns is uninformative under every method; the
    // all-zero vector lets consensus reject it downstream.
    bool any_varying = false;
    for (std::size_t f = 0; f < d && !any_varying; ++f) {
        auto col = table.column(f);
        auto [mn, mx] = std::minmax_element(col.begin(), col.end());
        any_varying = *mn != *mx;
    }
    if (!any_varying) {
        out.scores.assign(d, 0.0);
        return out;
    }
    if (method == Method::rfe)
        return rfe_rank(table, learner ? learner : default_rfe_learner(), seed);
    out.scores.resize(d, 0.0);
    std::span<const std::uint8_t> labels(table.labels);
    for (std::size_t f = 0; f < d; ++f) {
        std::vector<double> col = table.column(f);
        switch (method) {
            case Method::info_gain:
                out.scores[f] = info_gain(col, labels);
                break;
            case Method::chi_squared: {
                auto present = binarize_for_chi2(col);
                ContingencyCounts c;
                for (std::size_t i = 0; i < present.size(); ++i) {
                    if (present[i] && labels[i]) c.p += 1;
                    else if (present[i]) c.q += 1;
                    else if (labels[i]) c.m += 1;
                    else c.n += 1;
                }
                try {
                    out.scores[f] = chi_squared(c);
                } catch (const DegenerateError&) {
                    out.scores[f] = 0.0;  // feature excluded from this method
                }
                break;
            }
            case Method::mad:
                out.scores[f] = mad(col);
                break;
            case Method::dispersion_ratio:
                // The AM/GM ratio has floor 1; score the excess so constant
                // columns carry no relevance.
                out.scores[f] = dispersion_ratio(col) - 1.0;
                break;
            case Method::rfe:
                break;  // handled above
        }
    }
    return out;
}

inline nlohmann::json raw_scores_to_json(const RawScoreVector& raw, const std::vector<std::string>& names) {
    if (names.size() != raw.scores.size()) throw DataError("score/name length mismatch");
    nlohmann::json features = nlohmann::json::array();
    for (std::size_t i = 0; i < names.size(); ++i)
        features.push_back({{"name", names[i]}, {"score", raw.scores[i]}});
    return {{"method", method_name(raw.method)}, {"features", features}};
}

}  // namespace robustsel
