#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "robustsel/csv.hpp"

using namespace robustsel;
using testutil::TempDir;

namespace {

FeatureSchema two_feature_schema() {
    FeatureSchema schema;
    schema.names = {"dur", "rate"};
    schema.kinds = {FeatureKind::continuous, FeatureKind::continuous};
    schema.label_column = "label";
    schema.positive_label = "malicious";
    return schema;
}

}  // namespace

TEST_CASE("load_csv basics") {
    TempDir tmp;
    auto schema = two_feature_schema();

    SECTION("3-row CSV with all schema columns loads 3 rows") {
        write_file_atomic(tmp.file("a.csv"),
                          "dur,rate,label\n"
                          "1.5,2,benign\n"
                          "3,4,malicious\n"
                          "5,6.25,benign\n");
        auto t = load_csv(tmp.file("a.csv"), schema);
        REQUIRE(t.n_rows() == 3);
        REQUIRE(t.labels == std::vector<std::uint8_t>{0, 1, 0});
        REQUIRE(t.at(0, 0) == 1.5);
        REQUIRE(t.at(2, 1) == 6.25);
    }
    SECTION("missing label column is a schema error") {
        write_file_atomic(tmp.file("b.csv"), "dur,rate\n1,2\n");
        REQUIRE_THROWS_AS(load_csv(tmp.file("b.csv"), schema), SchemaError);
    }
    SECTION("missing feature column is a schema error naming the column") {
        write_file_atomic(tmp.file("c.csv"), "dur,label\n1,benign\n");
        REQUIRE_THROWS_WITH(load_csv(tmp.file("c.csv"), schema), Catch::Matchers::ContainsSubstring("rate"));
    }
    SECTION("columns reorder to schema order and extra columns are ignored") {
        write_file_atomic(tmp.file("d.csv"),
                          "extra,rate,label,dur\n"
                          "99,2,malicious,1\n");
        auto t = load_csv(tmp.file("d.csv"), schema);
        REQUIRE(t.at(0, 0) == 1.0);   // dur
        REQUIRE(t.at(0, 1) == 2.0);   // rate
        REQUIRE(t.labels[0] == 1);
    }
}

TEST_CASE("load_csv error handling") {
    TempDir tmp;
    auto schema = two_feature_schema();

    SECTION("unparseable cell drops the row in lenient mode with a report") {
        write_file_atomic(tmp.file("bad.csv"),
                          "dur,rate,label\n"
                          "1,2,benign\n"
                          "oops,4,malicious\n"
                          "5,6,benign\n");
        CsvReport report;
        auto t = load_csv(tmp.file("bad.csv"), schema, {}, &report);
        REQUIRE(t.n_rows() == 2);
        REQUIRE(report.dropped.size() == 1);
        REQUIRE(report.dropped[0].row == 2);
        REQUIRE(report.dropped[0].column == "dur");
    }
    SECTION("unparseable cell is fatal in strict mode") {
        write_file_atomic(tmp.file("bad.csv"), "dur,rate,label\nx,2,benign\n");
        CsvOptions strict;
        strict.strict = true;
        REQUIRE_THROWS_AS(load_csv(tmp.file("bad.csv"), schema, strict), DataError);
    }
    SECTION("recognized non-finite tokens become raw values for clean to handle") {
        write_file_atomic(tmp.file("inf.csv"),
                          "dur,rate,label\n"
                          "1,2,benign\n"
                          "Infinity,4,malicious\n"
                          "5,-infinity,benign\n"
                          "nan,8,benign\n");
        auto t = load_csv(tmp.file("inf.csv"), schema);
        REQUIRE(t.n_rows() == 4);
        REQUIRE(std::isinf(t.at(1, 0)));
        REQUIRE(t.at(2, 1) == -std::numeric_limits<double>::infinity());
        REQUIRE(std::isnan(t.at(3, 0)));
        CleanStats stats;
        auto cleaned = clean(t, &stats);
        REQUIRE(cleaned.n_rows() == 3);   // the NaN row is dropped
        REQUIRE(stats.cells_clamped == 2);
        REQUIRE(cleaned.at(1, 0) == 5.0); // Infinity clamped to finite max of [1, 5]
    }
    SECTION("non-whole value in an integer column drops the row") {
        auto int_schema = schema;
        int_schema.kinds[0] = FeatureKind::integer;
        write_file_atomic(tmp.file("int.csv"),
                          "dur,rate,label\n"
                          "1,2,benign\n"
                          "2.5,4,malicious\n");
        CsvReport report;
        auto t = load_csv(tmp.file("int.csv"), int_schema, {}, &report);
        REQUIRE(t.n_rows() == 1);
        REQUIRE(report.dropped.size() == 1);
    }
}

TEST_CASE("label mapping") {
    auto schema = two_feature_schema();
    REQUIRE(map_label_token("malicious", schema) == 1);
    REQUIRE(map_label_token("BENIGN", schema) == 0);
    REQUIRE(map_label_token("0", schema) == 0);
    REQUIRE(map_label_token("1", schema) == 1);
    // any unknown token collapses to malicious
    REQUIRE(map_label_token("DoS Hulk", schema) == 1);
    REQUIRE(map_label_token("PortScan", schema) == 1);
}

TEST_CASE("csv round trip") {
    TempDir tmp;
    auto t = testutil::separable_table(50, 4, 21);
    write_csv(tmp.file("round.csv"), t);
    auto back = load_csv(tmp.file("round.csv"), t.schema);
    REQUIRE(back.values == t.values);
    REQUIRE(back.labels == t.labels);
}

TEST_CASE("schema sidecar round trip") {
    TempDir tmp;
    FeatureSchema schema;
    schema.names = {"a", "b", "c"};
    schema.kinds = {FeatureKind::continuous, FeatureKind::integer, FeatureKind::flag};
    schema.label_column = "y";
    schema.positive_label = "attack";
    schema.negative_label = "normal";
    save_schema(tmp.file("schema.json"), schema);
    auto back = load_schema(tmp.file("schema.json"));
    REQUIRE(back.names == schema.names);
    REQUIRE(back.kinds == schema.kinds);
    REQUIRE(back.label_column == schema.label_column);
    REQUIRE(back.positive_label == schema.positive_label);
    REQUIRE(back.negative_label == schema.negative_label);
}
