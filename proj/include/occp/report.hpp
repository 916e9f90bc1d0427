#ifndef OCCP_REPORT_HPP
#define OCCP_REPORT_HPP

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

namespace occp {

using Cell = std::variant<double, std::int64_t, std::string>;

// Tabular replication results plus the configuration needed to reproduce them.
struct ReplicationReport {
    std::vector<std::string> columns;
    std::vector<std::vector<Cell>> rows;
    std::map<std::string, std::string> config;  // echoed into JSON output
    std::uint64_t seed = 0;
    long failures = 0;

    void add_row(std::vector<Cell> row);
};

enum class ReportFormat { csv, json };

// Deterministic column order; doubles at 17 significant digits. JSON mirrors
// the CSV content plus the config echo and seed.
void emit_report(const ReplicationReport& report, ReportFormat format,
                 const std::string& path);

std::string format_double(double v);  // %.17g

// Re-parses a JSON report written by emit_report (round-trip checks).
ReplicationReport parse_report_json(const std::string& path);

}  // namespace occp

#endif
