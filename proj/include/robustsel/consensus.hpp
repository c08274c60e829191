#pragma once

#include <algorithm>
#include <array>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "robustsel/selectors.hpp"

namespace robustsel {

struct RelevanceVector {
    Method method = Method::info_gain;
    std::vector<double> relevance;  // fractions in [0, 1] summing to 1
};

// Rescale raw scores so each feature carries a fraction of the total.
inline RelevanceVector normalize(const RawScoreVector& raw) {
    double sum = std::accumulate(raw.scores.begin(), raw.scores.end(), 0.0);
    for (double s : raw.scores)
        if (!(s >= 0) || !std::isfinite(s)) throw DataError("raw scores must be finite and >= 0");
    if (sum <= 0)
        throw DegenerateError("method " + method_name(raw.method) +
                              " scored every feature zero; no feature is informative under it");
    RelevanceVector out;
    out.method = raw.method;
    out.relevance.resize(raw.scores.size());
    for (std::size_t i = 0; i < raw.scores.size(); ++i) out.relevance[i] = raw.scores[i] / sum;
    return out;
}

struct ConsensusEntry {
    std::string name;
    double mean_relevance = 0;
    std::vector<double> per_method;  // aligned with ConsensusRanking::methods
};

struct VetoedEntry {
    std::string name;
    std::vector<Method> vetoed_by;
};

struct ConsensusRanking {
    std::vector<ConsensusEntry> surviving;  // mean relevance descending, ties by name
    std::vector<VetoedEntry> vetoed;
    std::vector<Method> methods;
    double threshold = 0.01;
};

// A feature is vetoed as soon as one method puts it below the threshold;
// survivors are ranked by the arithmetic mean of their relevances.
inline ConsensusRanking consensus_rank(const std::vector<std::string>& feature_names,
                                       const std::vector<RelevanceVector>& vectors, double threshold) {
    if (!(threshold > 0 && threshold < 1)) throw ConfigError("veto threshold must be in (0, 1)");
    if (vectors.empty()) throw ConfigError("consensus needs at least one relevance vector");
    for (const auto& v : vectors)
        if (v.relevance.size() != feature_names.size())
            throw DataError("relevance vector for " + method_name(v.method) +
                            " does not cover the feature universe");

    ConsensusRanking out;
    out.threshold = threshold;
    for (const auto& v : vectors) out.methods.push_back(v.method);

    for (std::size_t f = 0; f < feature_names.size(); ++f) {
        std::vector<Method> vetoed_by;
        double total = 0;
        std::vector<double> per_method;
        per_method.reserve(vectors.size());
        for (const auto& v : vectors) {
            per_method.push_back(v.relevance[f]);
            total += v.relevance[f];
            if (v.relevance[f] < threshold) vetoed_by.push_back(v.method);
        }
        if (vetoed_by.empty())
            out.surviving.push_back(
                {feature_names[f], total / static_cast<double>(vectors.size()), std::move(per_method)});
        else
            out.vetoed.push_back({feature_names[f], std::move(vetoed_by)});
    }

    if (out.surviving.empty()) {
        std::map<Method, std::size_t> veto_counts;
        for (const auto& v : out.vetoed)
            for (Method m : v.vetoed_by) ++veto_counts[m];
        Method harshest = out.methods.front();
        std::size_t most = 0;
        for (Method m : out.methods) {
            auto it = veto_counts.find(m);
            std::size_t c = it == veto_counts.end() ? 0 : it->second;
            if (c > most) {
                most = c;
                harshest = m;
            }
        }
        throw DegenerateError("every feature was vetoed; harshest method: " + method_name(harshest) +
                              " (" + std::to_string(most) + " vetoes)");
    }

    std::sort(out.surviving.begin(), out.surviving.end(), [](const auto& a, const auto& b) {
        if (a.mean_relevance != b.mean_relevance) return a.mean_relevance > b.mean_relevance;
        return a.name < b.name;
    });
    return out;
}

struct FeatureSetArtifact {
    std::string name;  // "time_related" or "consensus"
    std::vector<std::string> features;
    std::vector<double> mean_relevance;  // aligned with features; empty for static sets

    void validate() const {
        if (name != "time_related" && name != "consensus")
            throw ConfigError("feature set name must be 'time_related' or 'consensus', got '" + name + "'");
        if (features.empty()) throw DataError("feature set is empty");
        if (!mean_relevance.empty() && mean_relevance.size() != features.size())
            throw DataError("feature set relevance length mismatch");
    }
};

// Features surviving in every ranking, ordered by the mean of their
// per-ranking mean relevances.
inline FeatureSetArtifact intersect_common(const std::vector<ConsensusRanking>& rankings,
                                           const std::string& name = "time_related") {
    if (rankings.size() < 2) throw ConfigError("intersect_common needs at least 2 rankings");
    std::map<std::string, std::pair<std::size_t, double>> tally;  // name -> (count, sum of means)
    for (const auto& r : rankings)
        for (const auto& e : r.surviving) {
            auto& t = tally[e.name];
            t.first += 1;
            t.second += e.mean_relevance;
        }
    std::vector<std::pair<std::string, double>> common;
    for (const auto& [fname, t] : tally)
        if (t.first == rankings.size())
            common.emplace_back(fname, t.second / static_cast<double>(rankings.size()));
    if (common.empty()) throw DegenerateError("no feature survives in every ranking");
    std::sort(common.begin(), common.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    FeatureSetArtifact out;
    out.name = name;
    for (const auto& [fname, mean] : common) {
        out.features.push_back(fname);
        out.mean_relevance.push_back(mean);
    }
    out.validate();
    return out;
}

inline nlohmann::json ranking_to_json(const ConsensusRanking& ranking, const std::string& name) {
    nlohmann::json features = nlohmann::json::array();
    for (const auto& e : ranking.surviving) {
        nlohmann::json per_method;
        for (std::size_t m = 0; m < ranking.methods.size(); ++m)
            per_method[method_name(ranking.methods[m])] = e.per_method[m];
        features.push_back({{"name", e.name}, {"mean_relevance", e.mean_relevance}, {"per_method", per_method}});
    }
    nlohmann::json vetoed = nlohmann::json::array();
    for (const auto& v : ranking.vetoed) {
        std::vector<std::string> by;
        for (Method m : v.vetoed_by) by.push_back(method_name(m));
        vetoed.push_back({{"name", v.name}, {"vetoed_by", by}});
    }
    nlohmann::json versions;
    for (Method m : ranking.methods) versions[method_name(m)] = "1";
    return {{"name", name},
            {"threshold", ranking.threshold},
            {"features", features},
            {"vetoed", vetoed},
            {"method_versions", versions}};
}

inline FeatureSetArtifact export_feature_set(const ConsensusRanking& ranking, const std::string& name,
                                             const std::filesystem::path& path) {
    FeatureSetArtifact artifact;
    artifact.name = name;
    for (const auto& e : ranking.surviving) {
        artifact.features.push_back(e.name);
        artifact.mean_relevance.push_back(e.mean_relevance);
    }
    artifact.validate();
    write_file_atomic(path, ranking_to_json(ranking, name).dump(2) + "\n");
    return artifact;
}

// Accepts both the exported form (objects with relevance) and the slim static
// form (plain name strings).
inline FeatureSetArtifact import_feature_set(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("cannot parse feature set " + path.string() + ": " + e.what());
    }
    FeatureSetArtifact artifact;
    try {
        artifact.name = j.at("name").get<std::string>();
        for (const auto& f : j.at("features")) {
            if (f.is_string()) {
                artifact.features.push_back(f.get<std::string>());
            } else {
                artifact.features.push_back(f.at("name").get<std::string>());
                artifact.mean_relevance.push_back(f.value("mean_relevance", 0.0));
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("feature set " + path.string() + " is malformed: " + e.what());
    }
    if (!artifact.mean_relevance.empty() && artifact.mean_relevance.size() != artifact.features.size())
        throw DataError("feature set " + path.string() + " mixes plain and scored entries");
    artifact.validate();
    return artifact;
}

// The 24 time-related flow characteristics shipped with the library: IAT,
// bulk-rate, active and idle statistics of a bidirectional flow.
inline const std::vector<std::string>& time_related_features() {
    static const std::vector<std::string> kFeatures = {
        "flow_iat_mean", "flow_iat_std", "flow_iat_max", "flow_iat_min",
        "fwd_iat_total", "fwd_iat_mean", "fwd_iat_std", "fwd_iat_max", "fwd_iat_min",
        "bwd_iat_total", "bwd_iat_mean", "bwd_iat_std", "bwd_iat_max", "bwd_iat_min",
        "fwd_bulk_rate_mean", "bwd_bulk_rate_mean",
        "active_mean", "active_std", "active_max", "active_min",
        "idle_mean", "idle_std", "idle_max", "idle_min",
    };
    return kFeatures;
}

}  // namespace robustsel
