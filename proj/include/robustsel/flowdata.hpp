#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "robustsel/common.hpp"

namespace robustsel {

enum class FeatureKind { continuous, integer, flag };

inline std::string kind_name(FeatureKind k) {
    switch (k) {
        case FeatureKind::continuous: return "continuous";
        case FeatureKind::integer: return "integer";
        case FeatureKind::flag: return "flag";
    }
    return "continuous";
}

inline FeatureKind kind_from_name(const std::string& s) {
    if (s == "continuous") return FeatureKind::continuous;
    if (s == "integer") return FeatureKind::integer;
    if (s == "flag") return FeatureKind::flag;
    throw SchemaError("unknown feature kind: " + s);
}

inline bool is_whole_kind(FeatureKind k) { return k != FeatureKind::continuous; }

struct FeatureSchema {
    std::vector<std::string> names;
    std::vector<FeatureKind> kinds;
    std::string label_column;
    std::string positive_label;   // label token for the malicious class
    std::string negative_label = "benign";  // token for the benign class; any other token is malicious

    std::size_t n_features() const { return names.size(); }

    std::size_t index_of(const std::string& name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return i;
        throw SchemaError("feature not in schema: " + name);
    }

    bool has_feature(const std::string& name) const {
        return std::find(names.begin(), names.end(), name) != names.end();
    }

    void validate() const {
        if (names.empty()) throw SchemaError("schema has no features");
        if (kinds.size() != names.size()) throw SchemaError("schema kinds/names length mismatch");
        std::unordered_set<std::string> seen;
        for (const auto& n : names) {
            if (n.empty()) throw SchemaError("schema contains an empty feature name");
            if (!seen.insert(n).second) throw SchemaError("duplicate feature name: " + n);
        }
        if (label_column.empty()) throw SchemaError("schema label_column is empty");
        if (seen.count(label_column)) throw SchemaError("label_column collides with a feature name: " + label_column);
        if (positive_label.empty()) throw SchemaError("schema positive_label is empty");
    }
};

// Row-major numeric matrix plus binary labels (1 = malicious, 0 = benign).
// Values may hold NaN/Inf between load_csv and clean; everything downstream
// of clean expects finite cells.
struct FeatureTable {
    FeatureSchema schema;
    std::vector<double> values;        // n_rows x n_features
    std::vector<std::uint8_t> labels;  // n_rows

    std::size_t n_rows() const { return labels.size(); }
    std::size_t n_features() const { return schema.n_features(); }

    double at(std::size_t r, std::size_t c) const { return values[r * n_features() + c]; }
    double& at(std::size_t r, std::size_t c) { return values[r * n_features() + c]; }

    std::span<const double> row(std::size_t r) const {
        return {values.data() + r * n_features(), n_features()};
    }

    std::vector<double> column(std::size_t c) const {
        std::vector<double> out(n_rows());
        for (std::size_t r = 0; r < n_rows(); ++r) out[r] = at(r, c);
        return out;
    }

    std::size_t count_malicious() const {
        return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), std::uint8_t{1}));
    }

    bool all_finite() const {
        return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
    }

    void validate(bool require_finite = true) const {
        schema.validate();
        if (values.size() != n_rows() * n_features())
            throw DataError("value matrix shape does not match rows x features");
        for (auto l : labels)
            if (l > 1) throw DataError("labels must be 0 or 1");
        if (require_finite && !all_finite()) throw DataError("table contains non-finite values");
        for (std::size_t c = 0; c < n_features(); ++c) {
            if (!is_whole_kind(schema.kinds[c])) continue;
            for (std::size_t r = 0; r < n_rows(); ++r) {
                double v = at(r, c);
                if (std::isfinite(v) && v != std::floor(v))
                    throw DataError("integer-kind column '" + schema.names[c] +
                                    "' contains a non-whole value at row " + std::to_string(r));
            }
        }
    }
};

// Column subset in the given order; schema is narrowed to match.
inline FeatureTable select_features(const FeatureTable& table, const std::vector<std::size_t>& cols) {
    if (cols.empty()) throw SchemaError("empty feature selection");
    FeatureTable out;
    out.schema.label_column = table.schema.label_column;
    out.schema.positive_label = table.schema.positive_label;
    out.schema.negative_label = table.schema.negative_label;
    for (std::size_t c : cols) {
        if (c >= table.n_features()) throw SchemaError("feature index out of range");
        out.schema.names.push_back(table.schema.names[c]);
        out.schema.kinds.push_back(table.schema.kinds[c]);
    }
    out.labels = table.labels;
    out.values.resize(table.n_rows() * cols.size());
    for (std::size_t r = 0; r < table.n_rows(); ++r)
        for (std::size_t j = 0; j < cols.size(); ++j)
            out.values[r * cols.size() + j] = table.at(r, cols[j]);
    return out;
}

inline FeatureTable select_features(const FeatureTable& table, const std::vector<std::string>& names) {
    std::vector<std::size_t> cols;
    cols.reserve(names.size());
    for (const auto& n : names) cols.push_back(table.schema.index_of(n));
    return select_features(table, cols);
}

inline FeatureTable select_rows(const FeatureTable& table, const std::vector<std::size_t>& rows) {
    FeatureTable out;
    out.schema = table.schema;
    out.labels.reserve(rows.size());
    out.values.reserve(rows.size() * table.n_features());
    for (std::size_t r : rows) {
        out.labels.push_back(table.labels[r]);
        auto row = table.row(r);
        out.values.insert(out.values.end(), row.begin(), row.end());
    }
    return out;
}

struct SplitPair {
    FeatureTable train;
    FeatureTable holdout;
    std::uint64_t seed = 0;
};

struct CleanStats {
    std::size_t rows_dropped = 0;
    std::size_t cells_clamped = 0;
};

// Missing (NaN) rows are dropped; +/-Inf cells are clamped to the column's
// observed finite extrema. A column with no finite value at all cannot be
// clamped, so its non-finite cells become missing.
inline FeatureTable clean(const FeatureTable& table, CleanStats* stats = nullptr) {
    const std::size_t n = table.n_rows();
    const std::size_t d = table.n_features();
    std::vector<double> col_min(d, std::numeric_limits<double>::infinity());
    std::vector<double> col_max(d, -std::numeric_limits<double>::infinity());
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < d; ++c) {
            double v = table.at(r, c);
            if (!std::isfinite(v)) continue;
            col_min[c] = std::min(col_min[c], v);
            col_max[c] = std::max(col_max[c], v);
        }
    }

    CleanStats local;
    FeatureTable out;
    out.schema = table.schema;
    out.values.reserve(table.values.size());
    std::vector<double> row(d);
    for (std::size_t r = 0; r < n; ++r) {
        bool keep = true;
        for (std::size_t c = 0; c < d; ++c) {
            double v = table.at(r, c);
            if (std::isinf(v)) {
                double clamped = v > 0 ? col_max[c] : col_min[c];
                if (!std::isfinite(clamped)) {
                    keep = false;  // column has no finite value to clamp to
                    break;
                }
                v = clamped;
                ++local.cells_clamped;
            } else if (std::isnan(v)) {
                keep = false;
                break;
            }
            row[c] = v;
        }
        if (!keep) {
            ++local.rows_dropped;
            continue;
        }
        out.values.insert(out.values.end(), row.begin(), row.end());
        out.labels.push_back(table.labels[r]);
    }
    if (stats) *stats = local;
    if (out.n_rows() == 0) throw DataError("dataset is empty after cleaning");
    return out;
}

// Per-class proportional split; deterministic for a fixed seed. Row order
// within each part follows the input order.
inline SplitPair stratified_split(const FeatureTable& table, double train_fraction, std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw ConfigError("train_fraction must be in (0, 1)");
    std::vector<std::size_t> by_class[2];
    for (std::size_t r = 0; r < table.n_rows(); ++r) by_class[table.labels[r]].push_back(r);
    for (int c = 0; c < 2; ++c)
        if (by_class[c].size() < 2)
            throw DataError("stratified_split requires at least 2 samples per class (class " +
                            std::to_string(c) + " has " + std::to_string(by_class[c].size()) + ")");

    std::vector<std::size_t> train_rows, holdout_rows;
    for (int c = 0; c < 2; ++c) {
        auto idx = by_class[c];
        std::mt19937_64 rng(derive_seed(seed, "stratified_split", static_cast<std::uint64_t>(c)));
        std::shuffle(idx.begin(), idx.end(), rng);
        std::size_t k = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(idx.size())));
        k = std::clamp<std::size_t>(k, 1, idx.size() - 1);
        train_rows.insert(train_rows.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
        holdout_rows.insert(holdout_rows.end(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end());
    }
    std::sort(train_rows.begin(), train_rows.end());
    std::sort(holdout_rows.begin(), holdout_rows.end());

    SplitPair pair;
    pair.train = select_rows(table, train_rows);
    pair.holdout = select_rows(table, holdout_rows);
    pair.seed = seed;
    return pair;
}

struct SynthSpec {
    std::size_t n_rows = 1000;
    std::size_t n_informative = 5;
    std::size_t n_noise = 20;
    double class_ratio = 0.1;  // malicious fraction
    std::uint64_t seed = 0;
};

struct SynthResult {
    FeatureTable table;
    std::vector<std::size_t> informative;  // column indices
};

// Class-conditional Gaussians for informative columns (means separated by a
// fixed shift, alternating sign per column), class-independent N(0,1) noise.
inline SynthResult synthesize(const SynthSpec& spec) {
    if (spec.n_informative < 1) throw ConfigError("n_informative must be >= 1");
    if (!(spec.class_ratio > 0.0 && spec.class_ratio < 1.0))
        throw ConfigError("class_ratio must be in (0, 1)");
    if (spec.n_rows < 4) throw ConfigError("n_rows must be >= 4");

    const std::size_t d = spec.n_informative + spec.n_noise;
    const std::size_t n = spec.n_rows;
    SynthResult res;
    auto& t = res.table;
    t.schema.label_column = "label";
    t.schema.positive_label = "malicious";
    for (std::size_t j = 0; j < spec.n_informative; ++j) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "inf_%02zu", j);
        t.schema.names.emplace_back(buf);
        t.schema.kinds.push_back(FeatureKind::continuous);
        res.informative.push_back(j);
    }
    for (std::size_t j = 0; j < spec.n_noise; ++j) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "noise_%02zu", j);
        t.schema.names.emplace_back(buf);
        t.schema.kinds.push_back(FeatureKind::continuous);
    }

    std::size_t n_mal = static_cast<std::size_t>(std::llround(spec.class_ratio * static_cast<double>(n)));
    n_mal = std::clamp<std::size_t>(n_mal, 2, n - 2);
    t.labels.assign(n, 0);
    {
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::mt19937_64 rng(derive_seed(spec.seed, "synthesize_labels"));
        std::shuffle(idx.begin(), idx.end(), rng);
        for (std::size_t i = 0; i < n_mal; ++i) t.labels[idx[i]] = 1;
    }

    constexpr double kSeparation = 2.0;
    std::mt19937_64 rng(derive_seed(spec.seed, "synthesize_values"));
    std::normal_distribution<double> gauss(0.0, 1.0);
    t.values.resize(n * d);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < d; ++c) {
            double v = gauss(rng);
            if (c < spec.n_informative && t.labels[r] == 1)
                v += (c % 2 == 0 ? kSeparation : -kSeparation);
            t.values[r * d + c] = v;
        }
    }
    return res;
}

}  // namespace robustsel
