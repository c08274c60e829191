#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "robustsel/flowdata.hpp"

namespace testutil {

// Scoped temp directory under the system temp root.
struct TempDir {
    std::filesystem::path path;

    TempDir() {
        auto base = std::filesystem::temp_directory_path();
        static std::atomic<unsigned> counter{0};
        path = base / ("robustsel_test_" + std::to_string(::getpid()) + "_" +
                       std::to_string(counter.fetch_add(1)));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::filesystem::path file(const std::string& name) const { return path / name; }
};

inline robustsel::FeatureSchema make_schema(std::size_t d, const std::string& prefix = "f") {
    robustsel::FeatureSchema schema;
    for (std::size_t i = 0; i < d; ++i) {
        schema.names.push_back(prefix + std::to_string(i));
        schema.kinds.push_back(robustsel::FeatureKind::continuous);
    }
    schema.label_column = "label";
    schema.positive_label = "malicious";
    return schema;
}

// Row-major literal table.
inline robustsel::FeatureTable make_table(std::size_t d, std::vector<std::vector<double>> rows,
                                          std::vector<std::uint8_t> labels) {
    robustsel::FeatureTable t;
    t.schema = make_schema(d);
    t.labels = std::move(labels);
    for (const auto& r : rows) t.values.insert(t.values.end(), r.begin(), r.end());
    return t;
}

// Single numeric column with constant zero labels, for kernel tests.
inline std::vector<double> random_column(std::mt19937_64& rng, std::size_t n, double lo = -5, double hi = 5) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> out(n);
    for (auto& v : out) v = dist(rng);
    return out;
}

// Two classes separated by a gap on feature 0 (benign on a 0..4 half-unit
// grid, malicious on 6..10), pure noise elsewhere. The repeated grid values
// keep the class boundary on a histogram bin edge, so any sane model reaches
// F1 = 1 on a holdout.
inline robustsel::FeatureTable separable_table(std::size_t n, std::size_t d, std::uint64_t seed) {
    robustsel::FeatureTable t;
    t.schema = make_schema(d);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> grid(0, 8);
    std::uniform_real_distribution<double> noise(-3.0, 3.0);
    t.values.resize(n * d);
    t.labels.resize(n);
    for (std::size_t r = 0; r < n; ++r) {
        bool malicious = r % 2 == 1;
        t.labels[r] = malicious ? 1 : 0;
        t.values[r * d] = 0.5 * grid(rng) + (malicious ? 6.0 : 0.0);
        for (std::size_t c = 1; c < d; ++c) t.values[r * d + c] = noise(rng);
    }
    return t;
}

}  // namespace testutil
