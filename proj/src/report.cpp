#include "occp/report.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace occp {

void ReplicationReport::add_row(std::vector<Cell> row) {
    if (row.size() != columns.size())
        throw std::invalid_argument("ReplicationReport: row width != column count");
    rows.push_back(std::move(row));
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

namespace {

std::string cell_to_csv(const Cell& cell) {
    if (std::holds_alternative<double>(cell))
        return format_double(std::get<double>(cell));
    if (std::holds_alternative<std::int64_t>(cell))
        return std::to_string(std::get<std::int64_t>(cell));
    return std::get<std::string>(cell);
}

nlohmann::json cell_to_json(const Cell& cell) {
    if (std::holds_alternative<double>(cell)) return std::get<double>(cell);
    if (std::holds_alternative<std::int64_t>(cell)) return std::get<std::int64_t>(cell);
    return std::get<std::string>(cell);
}

}  // namespace

void emit_report(const ReplicationReport& report, ReportFormat format,
                 const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("emit_report: cannot open " + path);
    if (format == ReportFormat::csv) {
        for (std::size_t i = 0; i < report.columns.size(); ++i)
            out << (i ? "," : "") << report.columns[i];
        out << "\n";
        for (const auto& row : report.rows) {
            for (std::size_t i = 0; i < row.size(); ++i)
                out << (i ? "," : "") << cell_to_csv(row[i]);
            out << "\n";
        }
    } else {
        nlohmann::json j;
        j["columns"] = report.columns;
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& row : report.rows) {
            nlohmann::json jr = nlohmann::json::array();
            for (const auto& cell : row) jr.push_back(cell_to_json(cell));
            rows.push_back(std::move(jr));
        }
        j["rows"] = std::move(rows);
        j["config"] = report.config;
        j["seed"] = report.seed;
        j["failures"] = report.failures;
        out << j.dump(2) << "\n";
    }
    if (!out) throw std::runtime_error("emit_report: write failed for " + path);
}

ReplicationReport parse_report_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("parse_report_json: cannot open " + path);
    nlohmann::json j;
    in >> j;
    ReplicationReport report;
    report.columns = j.at("columns").get<std::vector<std::string>>();
    for (const auto& jr : j.at("rows")) {
        std::vector<Cell> row;
        for (const auto& cell : jr) {
            if (cell.is_number_float())
                row.emplace_back(cell.get<double>());
            else if (cell.is_number_integer())
                row.emplace_back(cell.get<std::int64_t>());
            else
                row.emplace_back(cell.get<std::string>());
        }
        report.rows.push_back(std::move(row));
    }
    report.config = j.at("config").get<std::map<std::string, std::string>>();
    report.seed = j.at("seed").get<std::uint64_t>();
    report.failures = j.at("failures").get<long>();
    return report;
}

}  // namespace occp
