#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "robustsel/common.hpp"
#include "robustsel/ensembles.hpp"
#include "robustsel/flowdata.hpp"

namespace robustsel {

// Features whose values must stay sorted in the listed order
// (e.g. min <= mean <= max of an IAT family).
struct CorrelatedGroup {
    std::vector<std::size_t> features;
};

struct GroupSpecEntry {
    std::vector<std::string> features;
    std::string ordering = "sorted";
};

inline std::vector<GroupSpecEntry> parse_group_spec(const nlohmann::json& j) {
    std::vector<GroupSpecEntry> out;
    for (const auto& g : j) {
        GroupSpecEntry entry;
        for (const auto& f : g.at("features")) entry.features.push_back(f.get<std::string>());
        entry.ordering = g.value("ordering", "sorted");
        if (entry.ordering != "sorted")
            throw ConfigError("unsupported group ordering '" + entry.ordering + "'");
        out.push_back(std::move(entry));
    }
    return out;
}

inline std::vector<GroupSpecEntry> load_group_spec(const std::filesystem::path& path) {
    try {
        return parse_group_spec(nlohmann::json::parse(read_file(path)));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("cannot parse group spec " + path.string() + ": " + e.what());
    }
}

// strict: every group feature must exist in the schema. Lenient resolution
// keeps the members that are present and drops groups left with fewer than 2.
inline std::vector<CorrelatedGroup> resolve_groups(const std::vector<GroupSpecEntry>& spec,
                                                   const FeatureSchema& schema, bool strict = true) {
    std::vector<CorrelatedGroup> out;
    for (const auto& entry : spec) {
        CorrelatedGroup group;
        for (const auto& name : entry.features) {
            if (schema.has_feature(name))
                group.features.push_back(schema.index_of(name));
            else if (strict)
                throw SchemaError("correlated group references unknown feature '" + name + "'");
        }
        if (group.features.size() >= 2) out.push_back(std::move(group));
    }
    return out;
}

struct PerturbationPattern {
    std::array<std::vector<double>, 2> lo;  // [class][feature] observed minimum
    std::array<std::vector<double>, 2> hi;  // [class][feature] observed maximum
    std::vector<CorrelatedGroup> groups;
    std::vector<FeatureKind> kinds;
    std::vector<std::string> feature_names;
};

struct PerturbationConfig {
    double magnitude = 0.25;           // step cap as a fraction of interval width
    std::size_t features_per_step = 1;
    std::uint64_t seed = 0;
};

inline void validate_perturbation_config(const PerturbationConfig& cfg) {
    if (!(cfg.magnitude > 0 && cfg.magnitude <= 1)) throw ConfigError("magnitude must be in (0, 1]");
    if (cfg.features_per_step < 1) throw ConfigError("features_per_step must be >= 1");
}

// Class-conditional observed [min, max] per feature, plus the ordering
// constraints. Group constraints must be satisfiable within each class's
// intervals.
inline PerturbationPattern learn_patterns(const FeatureTable& train,
                                          const std::vector<CorrelatedGroup>& groups = {}) {
    train.validate();
    std::size_t n_mal = train.count_malicious();
    if (n_mal == 0 || n_mal == train.n_rows())
        throw DataError("pattern learning requires both classes");
    const std::size_t d = train.n_features();
    PerturbationPattern pattern;
    pattern.kinds = train.schema.kinds;
    pattern.feature_names = train.schema.names;
    for (int c = 0; c < 2; ++c) {
        pattern.lo[c].assign(d, std::numeric_limits<double>::infinity());
        pattern.hi[c].assign(d, -std::numeric_limits<double>::infinity());
    }
    for (std::size_t r = 0; r < train.n_rows(); ++r) {
        int c = train.labels[r];
        for (std::size_t f = 0; f < d; ++f) {
            double v = train.at(r, f);
            pattern.lo[c][f] = std::min(pattern.lo[c][f], v);
            pattern.hi[c][f] = std::max(pattern.hi[c][f], v);
        }
    }
    for (const auto& g : groups) {
        for (std::size_t f : g.features)
            if (f >= d) throw SchemaError("correlated group references feature index out of range");
        for (int c = 0; c < 2; ++c) {
            double running = -std::numeric_limits<double>::infinity();
            for (std::size_t f : g.features) {
                running = std::max(running, pattern.lo[c][f]);
                if (running > pattern.hi[c][f])
                    throw DataError("group ordering constraint unsatisfiable within class " +
                                    std::to_string(c) + " intervals at feature '" +
                                    pattern.feature_names[f] + "'");
            }
        }
    }
    pattern.groups = groups;
    return pattern;
}

namespace detail {

inline double round_into(double v, double lo, double hi) {
    double whole = std::round(v);
    double lo_i = std::ceil(lo);
    double hi_i = std::floor(hi);
    if (lo_i > hi_i) return std::numeric_limits<double>::quiet_NaN();  // no whole number available
    return std::clamp(whole, lo_i, hi_i);
}

// Restore the ascending order of a touched group while keeping untouched
// members bit-identical. A touched member clamps into the band between its
// running left value and the minimum its right neighbors are guaranteed to
// reach (their value if untouched, their source value as the revert
// fallback), intersected with the target interval. An empty band reverts the
// move, so a row never trades interval validity for ordering.
inline void repair_group(std::vector<double>& row, std::span<const double> original,
                         const CorrelatedGroup& group, const std::vector<bool>& touched,
                         const std::vector<double>& lo, const std::vector<double>& hi) {
    bool any = false;
    for (std::size_t f : group.features) any = any || touched[f];
    if (!any) return;

    const std::size_t k = group.features.size();
    std::vector<double> cap_after(k, std::numeric_limits<double>::infinity());
    for (std::size_t i = k - 1; i-- > 0;) {
        std::size_t f = group.features[i + 1];
        double fallback = touched[f] ? original[f] : row[f];
        cap_after[i] = std::min(cap_after[i + 1], fallback);
    }
    double running = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < k; ++i) {
        std::size_t f = group.features[i];
        if (touched[f]) {
            double band_lo = std::max(running, lo[f]);
            double band_hi = std::min(cap_after[i], hi[f]);
            if (band_lo <= band_hi)
                row[f] = std::clamp(row[f], band_lo, band_hi);
            else
                row[f] = original[f];
        }
        running = std::max(running, row[f]);
    }
}

}  // namespace detail

// One perturbation step toward the benign class: a random subset of features
// each moves a bounded random distance toward a random point inside the
// benign interval, then integer kinds are rounded and group order repaired.
// Untouched features are bit-identical to the input.
inline std::vector<double> perturb(std::span<const double> sample, const PerturbationPattern& pattern,
                                   const PerturbationConfig& cfg, std::uint64_t seed) {
    validate_perturbation_config(cfg);
    const std::size_t d = sample.size();
    if (d != pattern.kinds.size()) throw SchemaError("sample does not match pattern width");

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto chosen = detail::sample_distinct(d, std::min(cfg.features_per_step, d), rng);

    std::vector<double> out(sample.begin(), sample.end());
    std::vector<bool> touched(d, false);
    const auto& lo = pattern.lo[0];  // target class: benign
    const auto& hi = pattern.hi[0];
    for (std::size_t f : chosen) {
        if (!(lo[f] <= hi[f])) continue;
        double width = hi[f] - lo[f];
        double target = lo[f] + unit(rng) * width;
        double step = unit(rng) * cfg.magnitude * width;
        double x = out[f];
        double gap = target - x;
        double moved = x + (gap >= 0 ? std::min(step, gap) : -std::min(step, -gap));
        moved = std::clamp(moved, lo[f], hi[f]);
        if (is_whole_kind(pattern.kinds[f])) {
            moved = detail::round_into(moved, lo[f], hi[f]);
            if (std::isnan(moved)) continue;  // interval holds no whole number
        }
        if (moved != out[f]) {
            out[f] = moved;
            touched[f] = true;
        }
    }
    for (const auto& g : pattern.groups) detail::repair_group(out, sample, g, touched, lo, hi);
    return out;
}

inline std::vector<double> perturb(std::span<const double> sample, const PerturbationPattern& pattern,
                                   const PerturbationConfig& cfg) {
    return perturb(sample, pattern, cfg, cfg.seed);
}

// Original rows plus one single-feature perturbed copy of every malicious
// row; copies keep the malicious label.
inline FeatureTable augment_training(const FeatureTable& train, const PerturbationPattern& pattern,
                                     const PerturbationConfig& cfg) {
    std::vector<std::size_t> malicious;
    for (std::size_t r = 0; r < train.n_rows(); ++r)
        if (train.labels[r]) malicious.push_back(r);
    if (malicious.empty()) throw DataError("augmentation requires malicious rows");

    PerturbationConfig one = cfg;
    one.features_per_step = 1;
    FeatureTable out = train;
    out.values.reserve(train.values.size() + malicious.size() * train.n_features());
    // Every malicious sample receives a perturbation; a move that reverts
    // (degenerate interval or infeasible group band) retries on a fresh
    // feature draw.
    const std::size_t max_attempts = 4 * train.n_features();
    for (std::size_t j = 0; j < malicious.size(); ++j) {
        auto row = train.row(malicious[j]);
        std::vector<double> copy(row.begin(), row.end());
        for (std::size_t attempt = 0; attempt < max_attempts; ++attempt) {
            copy = perturb(row, pattern, one, derive_seed(cfg.seed, "augment", j, attempt));
            if (!std::equal(copy.begin(), copy.end(), row.begin())) break;
        }
        out.values.insert(out.values.end(), copy.begin(), copy.end());
        out.labels.push_back(1);
    }
    return out;
}

struct AttackIteration {
    int iteration = 0;             // 0 = pre-attack state
    std::size_t still_detected = 0;
    double recall = 0;
};

struct AttackResult {
    FeatureTable adversarial_holdout;
    int iterations_run = 0;
    std::vector<AttackIteration> trace;
    std::vector<std::size_t> malicious_rows;  // row indices into the holdout
    std::vector<std::uint8_t> evaded_mask;    // aligned with malicious_rows
    std::size_t rows_queried = 0;
};

// Gray-box iterative evasion: every still-detected malicious row receives a
// candidate perturbation per iteration; candidates are always kept, and rows
// freeze once the model classifies them benign, so recall never increases.
inline AttackResult evasion_attack(const TrainedEnsemble& model, const FeatureTable& holdout,
                                   const PerturbationPattern& pattern, const PerturbationConfig& cfg,
                                   int max_iter = 15) {
    validate_perturbation_config(cfg);
    if (max_iter < 1) throw ConfigError("max_iter must be >= 1");
    if (holdout.schema.names != model.feature_names)
        throw SchemaError("holdout schema does not match the model's training schema");

    AttackResult result;
    result.adversarial_holdout = holdout;
    auto& adv = result.adversarial_holdout;
    for (std::size_t r = 0; r < holdout.n_rows(); ++r)
        if (holdout.labels[r]) result.malicious_rows.push_back(r);
    if (result.malicious_rows.empty()) throw DataError("attack requires malicious holdout rows");
    const double n_mal = static_cast<double>(result.malicious_rows.size());

    auto initial = model.predict_labels(adv);
    result.rows_queried += adv.n_rows();
    std::vector<std::size_t> detected;
    for (std::size_t r : result.malicious_rows)
        if (initial[r]) detected.push_back(r);
    result.trace.push_back({0, detected.size(), static_cast<double>(detected.size()) / n_mal});

    FeatureTable candidates;
    candidates.schema = adv.schema;
    for (int iter = 1; iter <= max_iter && !detected.empty(); ++iter) {
        candidates.values.clear();
        candidates.labels.assign(detected.size(), 1);
        for (std::size_t r : detected) {
            auto cand = perturb(adv.row(r), pattern, cfg,
                                derive_seed(cfg.seed, "attack", static_cast<std::uint64_t>(iter), r));
            candidates.values.insert(candidates.values.end(), cand.begin(), cand.end());
        }
        auto preds = model.predict_labels(candidates);
        result.rows_queried += candidates.n_rows();

        std::vector<std::size_t> still_detected;
        for (std::size_t k = 0; k < detected.size(); ++k) {
            std::size_t r = detected[k];
            auto cand = candidates.row(k);
            std::copy(cand.begin(), cand.end(), adv.values.begin() + static_cast<std::ptrdiff_t>(r * adv.n_features()));
            if (preds[k]) still_detected.push_back(r);
        }
        detected = std::move(still_detected);
        result.iterations_run = iter;
        result.trace.push_back({iter, detected.size(), static_cast<double>(detected.size()) / n_mal});
    }

    result.evaded_mask.assign(result.malicious_rows.size(), 1);
    for (std::size_t k = 0; k < result.malicious_rows.size(); ++k)
        if (std::find(detected.begin(), detected.end(), result.malicious_rows[k]) != detected.end())
            result.evaded_mask[k] = 0;
    return result;
}

// Independent attack per model. Seeds derive from the model artifact itself,
// so identical models under the same master seed yield identical results.
inline std::vector<AttackResult> model_specific_holdouts(const std::vector<const TrainedEnsemble*>& models,
                                                         const FeatureTable& holdout,
                                                         const PerturbationPattern& pattern,
                                                         const PerturbationConfig& cfg, int max_iter = 15,
                                                         unsigned jobs = default_jobs()) {
    std::vector<AttackResult> results(models.size());
    std::vector<std::uint64_t> fingerprints(models.size());
    for (std::size_t i = 0; i < models.size(); ++i)
        fingerprints[i] = hash_tag(model_to_json(*models[i]).dump());
    parallel_for(models.size(), jobs, [&](std::size_t i) {
        PerturbationConfig derived = cfg;
        derived.seed = derive_seed(cfg.seed, "model_attack", fingerprints[i]);
        results[i] = evasion_attack(*models[i], holdout, pattern, derived, max_iter);
    });
    return results;
}

inline nlohmann::json attack_trace_to_json(const AttackResult& result) {
    nlohmann::json trace = nlohmann::json::array();
    for (const auto& t : result.trace)
        trace.push_back({{"iteration", t.iteration},
                         {"still_detected", t.still_detected},
                         {"recall", t.recall}});
    std::size_t evaded = 0;
    for (auto e : result.evaded_mask) evaded += e;
    return {{"iterations_run", result.iterations_run},
            {"n_malicious", result.malicious_rows.size()},
            {"evaded", evaded},
            {"rows_queried", result.rows_queried},
            {"trace", trace}};
}

}  // namespace robustsel
