// Batch experiment runner: divergence self-checks and the three benchmark
// pipelines, emitting CSV/JSON tables and plot data.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "occp/biased_means.hpp"
#include "occp/copula.hpp"
#include "occp/distributions.hpp"
#include "occp/divergence.hpp"
#include "occp/gp_confound.hpp"
#include "occp/parallel.hpp"
#include "occp/quadrature.hpp"
#include "occp/report.hpp"
#include "occp/rng.hpp"
#include "occp/special.hpp"

namespace {

using occp::Vec;

std::map<std::string, std::string> read_config_file(const std::string& path) {
    std::map<std::string, std::string> out;
    if (path.empty()) return out;
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file " + path);
    std::string line;
    while (std::getline(in, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t");
            const auto e = s.find_last_not_of(" \t");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (!key.empty()) out[key] = value;
    }
    return out;
}

// File values seed the lookup; explicitly passed CLI flags override them.
struct Settings {
    std::map<std::string, std::string> values;
    std::string ns;

    std::string get(const std::string& key, const std::string& fallback) const {
        auto it = values.find(ns + "." + key);
        if (it == values.end()) it = values.find(key);
        return it == values.end() ? fallback : it->second;
    }
    double get_num(const std::string& key, double fallback) const {
        const std::string v = get(key, "");
        return v.empty() ? fallback : std::stod(v);
    }
    long get_int(const std::string& key, long fallback) const {
        const std::string v = get(key, "");
        return v.empty() ? fallback : std::stol(v);
    }
    std::vector<double> get_list(const std::string& key,
                                 std::vector<double> fallback) const {
        const std::string v = get(key, "");
        if (v.empty()) return fallback;
        std::vector<double> out;
        std::stringstream ss(v);
        std::string item;
        while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
        return out;
    }
};

void write_outputs(const occp::ReplicationReport& report, const std::string& out_dir,
                   const std::string& stem) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    occp::emit_report(report, occp::ReportFormat::csv,
                      (fs::path(out_dir) / (stem + ".csv")).string());
    occp::emit_report(report, occp::ReportFormat::json,
                      (fs::path(out_dir) / (stem + ".json")).string());
}

void echo_config(occp::ReplicationReport& report, const Settings& s,
                 std::initializer_list<std::pair<const char*, std::string>> extra) {
    report.config = s.values;
    for (const auto& [k, v] : extra) report.config[std::string(s.ns) + "." + k] = v;
}

int run_divergence_check(std::uint64_t seed) {
    using namespace occp;
    Rng rng(seed);
    const std::vector<double> alphas{0.05, 0.5, 0.999, 2.5};
    double worst_gauss = 0.0, worst_ig = 0.0, worst_pg = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const double mq = rng.uniform(-2.0, 2.0), mp = rng.uniform(-2.0, 2.0);
        const double vq = rng.uniform(0.3, 3.0), vp = rng.uniform(0.3, 3.0);
        const double aq = rng.uniform(1.5, 6.0), bq = rng.uniform(0.5, 4.0);
        const double ap = rng.uniform(1.5, 6.0), bp = rng.uniform(0.5, 4.0);
        const double pg_b = rng.uniform(0.5, 8.0), pg_c = rng.uniform(0.0, 3.0);
        for (const double alpha : alphas) {
            {
                const double closed = renyi_gaussian(GaussianDist::scalar(mq, vq),
                                                     GaussianDist::scalar(mp, vp),
                                                     alpha);
                const double oracle = oracle_renyi_quadrature(
                    [&](double x) { return gaussian_logpdf(x, mq, vq); },
                    [&](double x) { return gaussian_logpdf(x, mp, vp); }, alpha,
                    Interval::real_line());
                worst_gauss = std::max(
                    worst_gauss, std::abs(closed - oracle) / (1.0 + std::abs(oracle)));
            }
            {
                const double closed =
                    renyi_invgamma({aq, bq}, {ap, bp}, alpha);
                const double oracle = oracle_renyi_quadrature(
                    [&](double x) { return invgamma_logpdf(x, aq, bq); },
                    [&](double x) { return invgamma_logpdf(x, ap, bp); }, alpha,
                    Interval::positive_half_line());
                worst_ig = std::max(
                    worst_ig, std::abs(closed - oracle) / (1.0 + std::abs(oracle)));
            }
            {
                const double closed = renyi_polya_gamma({pg_b, pg_c}, alpha);
                const double oracle = oracle_renyi_quadrature(
                    [&](double x) {
                        return pg_b * log_cosh(0.5 * pg_c) - 0.5 * pg_c * pg_c * x +
                               pg_logpdf_b0(x, pg_b);
                    },
                    [&](double x) { return pg_logpdf_b0(x, pg_b); }, alpha,
                    Interval::positive_half_line());
                worst_pg = std::max(
                    worst_pg, std::abs(closed - oracle) / (1.0 + std::abs(oracle)));
            }
        }
    }
    std::cout << "max relative error vs quadrature oracle\n"
              << "  gaussian:     " << worst_gauss << "\n"
              << "  inverse-gamma: " << worst_ig << "\n"
              << "  polya-gamma:  " << worst_pg << "\n";
    const bool ok = worst_gauss < 1e-6 && worst_ig < 1e-6 && worst_pg < 1e-6;
    std::cout << (ok ? "divergence-check PASS" : "divergence-check FAIL") << "\n";
    return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"optimization-centric cut posterior experiments"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path, out_dir = "out";
    std::uint64_t seed = 1;
    long replications = -1;
    int threads = occp::default_threads();
    app.add_option("--config", config_path, "key = value configuration file");
    app.add_option("--out-dir", out_dir, "output directory");
    app.add_option("--seed", seed, "master seed");
    app.add_option("--replications", replications, "replication count override");
    app.add_option("--threads", threads, "worker threads (results independent of this)");

    auto* divergence_cmd =
        app.add_subcommand("divergence-check", "closed forms vs quadrature oracles");
    auto* biased_cmd =
        app.add_subcommand("biased-means", "biased normal means study (table1.csv)");
    auto* gp_cmd =
        app.add_subcommand("gp-confound", "hidden confounding study (gp_table.csv)");
    std::string star_csv;
    double star_gamma = 0.3;
    gp_cmd->add_option("--star-csv", star_csv, "optional STAR-schema CSV input");
    gp_cmd->add_option("--star-gamma", star_gamma, "rural sampling fraction");
    auto* copula_cmd =
        app.add_subcommand("copula", "misspecified copula study (copula_table.csv)");
    auto* version_cmd = app.add_subcommand("version", "print version");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        Settings settings;
        settings.values = read_config_file(config_path);
        if (version_cmd->parsed()) {
            std::cout << "occp 1.0.0\n";
            return 0;
        }
        if (divergence_cmd->parsed()) return run_divergence_check(seed);

        if (biased_cmd->parsed()) {
            settings.ns = "biased-means";
            occp::biased_means::Table1Config config;
            config.replications = static_cast<int>(
                replications > 0 ? replications
                                 : settings.get_int("replications", 1000));
            config.seed = seed;
            config.threads = threads;
            config.n1 = static_cast<int>(settings.get_int("n1", 20));
            config.n2 = static_cast<int>(settings.get_int("n2", 1000));
            config.phi_true = settings.get_num("phi", 5.0);
            config.eta_true = settings.get_num("eta", 5.0);
            config.vb = settings.get_num("vb", 1.0);
            config.alphas = settings.get_list("alphas", {0.05, 0.5, 0.999, 5.0});
            auto output = occp::biased_means::run_table1(config);
            echo_config(output.table, settings,
                        {{"replications", std::to_string(config.replications)},
                         {"seed", std::to_string(seed)}});
            write_outputs(output.table, out_dir, "table1");
            write_outputs(output.contours, out_dir, "contours");
            std::cout << "wrote " << out_dir << "/table1.csv and contours.csv\n";
            return 0;
        }
        if (gp_cmd->parsed()) {
            settings.ns = "gp-confound";
            if (!star_csv.empty()) {
                const auto star =
                    occp::gp::ingest_star_csv(star_csv, star_gamma, seed);
                std::cout << "STAR ingest: n1=" << star.data.n1()
                          << " n2=" << star.data.n2() << " p="
                          << star.data.p1() + star.data.p2()
                          << " dropped=" << star.rows_dropped << "\n";
            }
            occp::gp::StudyConfig config;
            config.replications = static_cast<int>(
                replications > 0 ? replications : settings.get_int("replications", 50));
            config.seed = seed;
            config.threads = threads;
            config.n1 = static_cast<int>(settings.get_int("n1", 1000));
            config.n2 = static_cast<int>(settings.get_int("n2", 100));
            config.alphas =
                settings.get_list("alphas", {0.01, 0.05, 0.25, 0.999, 2.5});
            config.omega_draws =
                static_cast<int>(settings.get_int("omega_draws", 300));
            config.tau_draws = static_cast<int>(settings.get_int("tau_draws", 300));
            auto output = occp::gp::run_gp_study(config);
            echo_config(output.table, settings,
                        {{"replications", std::to_string(config.replications)},
                         {"seed", std::to_string(seed)}});
            write_outputs(output.table, out_dir, "gp_table");
            write_outputs(output.grid, out_dir, "gp_grid");
            std::cout << "wrote " << out_dir << "/gp_table.csv and gp_grid.csv\n";
            return 0;
        }
        if (copula_cmd->parsed()) {
            settings.ns = "copula";
            occp::copula::StudyConfig config;
            config.replications = static_cast<int>(
                replications > 0 ? replications : settings.get_int("replications", 60));
            config.seed = seed;
            config.threads = threads;
            config.n = static_cast<int>(settings.get_int("n", 1000));
            config.alphas = settings.get_list("alphas", {0.1, 0.25, 0.5, 0.999});
            config.stage2.mc_samples =
                static_cast<int>(settings.get_int("mc_samples", 256));
            config.band_draws = static_cast<int>(settings.get_int("band_draws", 300));
            auto output = occp::copula::run_copula_study(config);
            echo_config(output.table, settings,
                        {{"replications", std::to_string(config.replications)},
                         {"seed", std::to_string(seed)}});
            write_outputs(output.table, out_dir, "copula_table");
            write_outputs(output.marginal_fit, out_dir, "marginal_fit");
            std::cout << "wrote " << out_dir << "/copula_table.csv and marginal_fit.csv\n";
            return 0;
        }
    } catch (const std::invalid_argument& e) {
        std::cerr << "invalid configuration: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "runtime failure: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
