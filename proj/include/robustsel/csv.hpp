#pragma once

#include <cctype>
#include <charconv>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "robustsel/flowdata.hpp"

namespace robustsel {

struct CsvOptions {
    bool strict = false;  // strict: any bad cell is fatal; lenient: drop the row and report
};

struct RowIssue {
    std::size_t row = 0;  // 1-based data row index (header not counted)
    std::string column;
    std::string token;
    std::string reason;
};

struct CsvReport {
    std::vector<RowIssue> dropped;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

inline bool iequals(std::string_view a, std::string_view b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (std::tolower(static_cast<unsigned char>(a[i])) != std::tolower(static_cast<unsigned char>(b[i])))
            return false;
    return true;
}

// Recognized tokens: NaN, Infinity, -Infinity (case-insensitive). Empty cells
// are treated as missing (NaN) so the cleaning stage decides their fate.
inline std::optional<double> parse_number(std::string_view token) {
    token = trim(token);
    if (token.empty()) return std::numeric_limits<double>::quiet_NaN();
    if (iequals(token, "nan")) return std::numeric_limits<double>::quiet_NaN();
    if (iequals(token, "infinity") || iequals(token, "inf") || iequals(token, "+infinity") || iequals(token, "+inf"))
        return std::numeric_limits<double>::infinity();
    if (iequals(token, "-infinity") || iequals(token, "-inf"))
        return -std::numeric_limits<double>::infinity();
    double value = 0.0;
    const char* first = token.data();
    const char* last = token.data() + token.size();
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc() || ptr != last) return std::nullopt;
    return value;
}

inline void split_fields(std::string_view line, std::vector<std::string_view>& out) {
    out.clear();
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
        if (i == line.size() || line[i] == ',') {
            out.push_back(line.substr(start, i - start));
            start = i + 1;
        }
    }
}

}  // namespace detail

// Benign iff the token matches the schema's negative label (or numeric zero);
// every other token collapses to malicious.
inline std::uint8_t map_label_token(std::string_view token, const FeatureSchema& schema) {
    using detail::iequals;
    auto t = detail::trim(token);
    if (t.empty()) throw DataError("empty label token");
    if (iequals(t, schema.negative_label)) return 0;
    if (iequals(t, schema.positive_label)) return 1;
    if (auto num = detail::parse_number(t); num && std::isfinite(*num)) return *num != 0.0 ? 1 : 0;
    return 1;
}

inline FeatureTable load_csv(const std::filesystem::path& path, const FeatureSchema& schema,
                             const CsvOptions& options = {}, CsvReport* report = nullptr) {
    schema.validate();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open CSV file: " + path.string());

    std::string line;
    if (!std::getline(in, line)) throw DataError("CSV file is empty: " + path.string());
    if (!line.empty() && line.back() == '\r') line.pop_back();

    std::vector<std::string_view> fields;
    detail::split_fields(line, fields);
    std::vector<std::string> header;
    header.reserve(fields.size());
    for (auto f : fields) header.emplace_back(detail::trim(f));

    const std::size_t d = schema.n_features();
    std::vector<std::size_t> col_of(d, SIZE_MAX);
    std::size_t label_col = SIZE_MAX;
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == schema.label_column) label_col = i;
        for (std::size_t j = 0; j < d; ++j)
            if (header[i] == schema.names[j]) col_of[j] = i;
    }
    for (std::size_t j = 0; j < d; ++j)
        if (col_of[j] == SIZE_MAX)
            throw SchemaError("CSV is missing schema column '" + schema.names[j] + "'");
    if (label_col == SIZE_MAX)
        throw SchemaError("CSV is missing label column '" + schema.label_column + "'");

    FeatureTable table;
    table.schema = schema;
    std::vector<double> row(d);
    std::size_t row_index = 0;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        ++row_index;
        detail::split_fields(line, fields);

        std::optional<RowIssue> issue;
        if (fields.size() < header.size()) {
            issue = RowIssue{row_index, "", "", "expected " + std::to_string(header.size()) +
                                                  " fields, found " + std::to_string(fields.size())};
        }
        std::uint8_t label = 0;
        if (!issue) {
            for (std::size_t j = 0; j < d; ++j) {
                auto token = fields[col_of[j]];
                auto value = detail::parse_number(token);
                if (!value) {
                    issue = RowIssue{row_index, schema.names[j], std::string(token), "unparseable numeric cell"};
                    break;
                }
                if (is_whole_kind(schema.kinds[j]) && std::isfinite(*value) && *value != std::floor(*value)) {
                    issue = RowIssue{row_index, schema.names[j], std::string(token),
                                     "non-whole value in integer column"};
                    break;
                }
                row[j] = *value;
            }
        }
        if (!issue) {
            auto token = detail::trim(fields[label_col]);
            if (token.empty())
                issue = RowIssue{row_index, schema.label_column, "", "empty label"};
            else
                label = map_label_token(token, schema);
        }
        if (issue) {
            if (options.strict)
                throw DataError("row " + std::to_string(issue->row) + ": " + issue->reason +
                                (issue->column.empty() ? "" : " in column '" + issue->column + "'") +
                                (issue->token.empty() ? "" : " (token '" + issue->token + "')"));
            if (report) report->dropped.push_back(std::move(*issue));
            continue;
        }
        table.values.insert(table.values.end(), row.begin(), row.end());
        table.labels.push_back(label);
    }
    return table;
}

// Shortest round-tripping representation.
inline std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    (void)ec;
    return std::string(buf, ptr);
}

inline void write_csv(const std::filesystem::path& path, const FeatureTable& table) {
    std::string out;
    out.reserve(table.n_rows() * table.n_features() * 8);
    for (std::size_t j = 0; j < table.n_features(); ++j) {
        out += table.schema.names[j];
        out += ',';
    }
    out += table.schema.label_column;
    out += '\n';
    for (std::size_t r = 0; r < table.n_rows(); ++r) {
        for (std::size_t j = 0; j < table.n_features(); ++j) {
            out += format_double(table.at(r, j));
            out += ',';
        }
        out += table.labels[r] ? table.schema.positive_label : table.schema.negative_label;
        out += '\n';
    }
    write_file_atomic(path, out);
}

inline FeatureSchema load_schema(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError("cannot parse schema JSON " + path.string() + ": " + e.what());
    }
    FeatureSchema schema;
    try {
        for (const auto& n : j.at("names")) schema.names.push_back(n.get<std::string>());
        if (j.contains("kinds"))
            for (const auto& k : j.at("kinds")) schema.kinds.push_back(kind_from_name(k.get<std::string>()));
        else
            schema.kinds.assign(schema.names.size(), FeatureKind::continuous);
        schema.label_column = j.at("label_column").get<std::string>();
        schema.positive_label = j.at("positive_label").get<std::string>();
        if (j.contains("negative_label")) schema.negative_label = j.at("negative_label").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError("schema JSON " + path.string() + " is malformed: " + e.what());
    }
    schema.validate();
    return schema;
}

inline void save_schema(const std::filesystem::path& path, const FeatureSchema& schema) {
    nlohmann::json j;
    j["names"] = schema.names;
    std::vector<std::string> kinds;
    kinds.reserve(schema.kinds.size());
    for (auto k : schema.kinds) kinds.push_back(kind_name(k));
    j["kinds"] = kinds;
    j["label_column"] = schema.label_column;
    j["positive_label"] = schema.positive_label;
    j["negative_label"] = schema.negative_label;
    write_file_atomic(path, j.dump(2) + "\n");
}

}  // namespace robustsel
