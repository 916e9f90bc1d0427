#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "occp/report.hpp"

using namespace occp;

namespace {

ReplicationReport sample_report() {
    ReplicationReport r;
    r.columns = {"alpha", "param", "bias", "count"};
    r.config["study.replications"] = "3";
    r.config["study.seed"] = "42";
    r.seed = 42;
    r.add_row({0.5, std::string("phi"), -0.001234567890123456, std::int64_t(3)});
    r.add_row({0.999, std::string("eta"), 1e-17, std::int64_t(0)});
    return r;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("csv emission: schema, 17 significant digits, empty report") {
    const std::string path = "test_report_out.csv";
    emit_report(sample_report(), ReportFormat::csv, path);
    const std::string text = slurp(path);
    CHECK(text.rfind("alpha,param,bias,count\n", 0) == 0);
    CHECK(text.find("-0.0012345678901234561") != std::string::npos);
    CHECK(text.find("phi") != std::string::npos);

    ReplicationReport empty;
    empty.columns = {"a", "b"};
    emit_report(empty, ReportFormat::csv, path);
    CHECK(slurp(path) == "a,b\n");
    std::remove(path.c_str());
}

TEST_CASE("json round trip equals the in-memory report") {
    const std::string path = "test_report_out.json";
    const ReplicationReport original = sample_report();
    emit_report(original, ReportFormat::json, path);
    const ReplicationReport parsed = parse_report_json(path);
    CHECK(parsed.columns == original.columns);
    CHECK(parsed.config == original.config);
    CHECK(parsed.seed == original.seed);
    REQUIRE(parsed.rows.size() == original.rows.size());
    for (std::size_t i = 0; i < parsed.rows.size(); ++i)
        CHECK(parsed.rows[i] == original.rows[i]);
    std::remove(path.c_str());
}

TEST_CASE("byte-identical output for identical reports") {
    const ReplicationReport r = sample_report();
    emit_report(r, ReportFormat::csv, "rep_a.csv");
    emit_report(r, ReportFormat::csv, "rep_b.csv");
    CHECK(slurp("rep_a.csv") == slurp("rep_b.csv"));
    std::remove("rep_a.csv");
    std::remove("rep_b.csv");
}

TEST_CASE("row width must match columns") {
    ReplicationReport r;
    r.columns = {"a", "b"};
    CHECK_THROWS_AS(r.add_row({1.0}), std::invalid_argument);
}
