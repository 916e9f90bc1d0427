#include "occp/biased_means.hpp"

#include <cmath>
#include <stdexcept>

#include "occp/divergence.hpp"
#include "occp/parallel.hpp"
#include "occp/special.hpp"

namespace occp::biased_means {

namespace {
constexpr double kHalfLog2Pi = 0.91893853320467274178;
constexpr double kZ975 = 1.959963984540054;
}  // namespace

void Data::validate() const {
    if (z.size() < 1 || w.size() < 1)
        throw std::invalid_argument("biased_means::Data: need n1 >= 1 and n2 >= 1");
}

void Prior::validate() const {
    if (!(v0 > 0.0) || !(vb > 0.0))
        throw std::invalid_argument("biased_means::Prior: variances must be > 0");
}

void BivariateVariational::validate() const {
    if (!(v_phi > 0.0))
        throw std::invalid_argument("BivariateVariational: v_phi must be > 0");
    if (!(conditional_var() > 0.0))
        throw std::invalid_argument("BivariateVariational: conditional variance <= 0");
}

BivariateVariational true_joint_posterior(const Data& data, const Prior& prior) {
    data.validate();
    prior.validate();
    const double n1 = static_cast<double>(data.z.size());
    const double n2 = static_cast<double>(data.w.size());
    const double zb = data.z_bar(), wb = data.w_bar();
    const double c = (n2 * prior.vb + 1.0) * (n1 + 1.0 / prior.v0) + n2;
    BivariateVariational out;
    out.mu_phi =
        ((n1 * zb + prior.mu0 / prior.v0) * (n2 * prior.vb + 1.0) + n2 * wb) / c;
    out.mu_eta =
        n2 * prior.vb * (n1 * (wb - zb) + (wb - prior.mu0) / prior.v0) / c;
    out.v_phi = (n2 * prior.vb + 1.0) / c;
    out.v_phi_eta = -n2 * prior.vb / c;
    out.v_eta = (n1 + n2 + 1.0 / prior.v0) * prior.vb / c;
    out.validate();
    return out;
}

BivariateVariational cut_posterior(const Data& data, const Prior& prior) {
    data.validate();
    prior.validate();
    const double n1 = static_cast<double>(data.z.size());
    const double n2 = static_cast<double>(data.w.size());
    const double s1 = n1 * prior.v0 / (n1 * prior.v0 + 1.0);
    const double s2 = n2 * prior.vb / (n2 * prior.vb + 1.0);
    BivariateVariational out;
    out.mu_phi = s1 * data.z_bar() + (1.0 - s1) * prior.mu0;
    out.v_phi = s1 / n1;
    out.mu_eta = s2 * (data.w_bar() - out.mu_phi);
    out.v_eta = s2 / n2 + s2 * s2 * s1 / n1;
    out.v_phi_eta = -s1 * s2 / n1;
    out.validate();
    return out;
}

double stage1_divergence(double mu_phi, double v_phi, const Prior& prior, double alpha) {
    return renyi_gaussian(GaussianDist::scalar(mu_phi, v_phi),
                          GaussianDist::scalar(prior.mu0, prior.v0), alpha);
}

double stage1_objective(double mu_phi, double v_phi, const Data& data,
                        const Prior& prior, double alpha, double lambda1) {
    if (!(v_phi > 0.0)) throw std::invalid_argument("stage1_objective: v_phi <= 0");
    const double n1 = static_cast<double>(data.z.size());
    const double loss = n1 * kHalfLog2Pi + 0.5 * data.z.squaredNorm() -
                        n1 * data.z_bar() * mu_phi +
                        0.5 * n1 * (mu_phi * mu_phi + v_phi);
    return lambda1 * loss + stage1_divergence(mu_phi, v_phi, prior, alpha);
}

double stage2_divergence(double mu_eta, double v_eta, double v_phi_eta,
                         double v_phi_fixed, const Prior& prior, double alpha) {
    const double v_cond = v_eta - v_phi_eta * v_phi_eta / v_phi_fixed;
    if (!(v_cond > 0.0))
        throw std::invalid_argument("stage2_divergence: conditional variance <= 0");
    const double vb = prior.vb;
    // E over q(phi) of mu_{eta|phi}^2 is mu_eta^2 + v_phi_eta^2 / v_phi.
    const double mean_sq = mu_eta * mu_eta + v_phi_eta * v_phi_eta / v_phi_fixed;
    if (std::abs(alpha - 1.0) < kKlAlphaTol)
        return 0.5 * (std::log(vb) - std::log(v_cond) - 1.0 +
                      (mu_eta * mu_eta + v_eta) / vb);
    const double tau = alpha * vb + (1.0 - alpha) * v_cond;
    if (!(tau > 0.0)) throw std::domain_error("stage2_divergence: tau <= 0");
    return alpha * std::log(vb) / (2.0 * (alpha - 1.0)) - 0.5 * std::log(v_cond) +
           std::log(tau) / (2.0 * (1.0 - alpha)) + 0.5 * alpha * mean_sq / tau;
}

double stage2_objective(double mu_eta, double v_eta, double v_phi_eta, double mu_phi_fixed,
                        double v_phi_fixed, const Data& data, const Prior& prior,
                        double alpha, double lambda2) {
    const double n2 = static_cast<double>(data.w.size());
    const double wb = data.w_bar();
    const double loss =
        n2 * kHalfLog2Pi + 0.5 * data.w.squaredNorm() -
        n2 * wb * (mu_phi_fixed + mu_eta) +
        0.5 * n2 *
            ((mu_phi_fixed + mu_eta) * (mu_phi_fixed + mu_eta) + v_phi_fixed +
             2.0 * v_phi_eta + v_eta);
    return lambda2 * loss +
           stage2_divergence(mu_eta, v_eta, v_phi_eta, v_phi_fixed, prior, alpha);
}

Fit fit_occp(const Data& data, const Prior& prior, double alpha,
             const FitOptions& options) {
    data.validate();
    prior.validate();
    if (!(alpha > 0.0)) throw std::invalid_argument("fit_occp: alpha must be > 0");
    const BivariateVariational kld = cut_posterior(data, prior);

    Fit fit;
    if (std::abs(alpha - 1.0) < options.kld_proxy_tol) {
        // alpha == 1 (or its reporting proxy): rates are the base rates and the
        // OCCP is the KLD solution, solved numerically for uniformity.
        fit.rates = calibrate_learning_rates([](double) { return 1.0; },
                                             [](double) { return 1.0; }, 1.0);
    } else {
        fit.rates = calibrate_learning_rates(
            [&](double a) { return stage1_divergence(kld.mu_phi, kld.v_phi, prior, a); },
            [&](double a) {
                return stage2_divergence(kld.mu_eta, kld.v_eta, kld.v_phi_eta,
                                         kld.v_phi, prior, a);
            },
            alpha);
    }
    const double solve_alpha =
        (std::abs(alpha - 1.0) < options.kld_proxy_tol) ? 1.0 : alpha;

    // Stage 1 on (mu_phi, log v_phi).
    StageObjective s1;
    s1.learning_rate = fit.rates.lambda1;
    s1.expected_loss = [&, solve_alpha](const Vec& x) {
        const double n1 = static_cast<double>(data.z.size());
        const double v = std::exp(x[1]);
        return n1 * kHalfLog2Pi + 0.5 * data.z.squaredNorm() -
               n1 * data.z_bar() * x[0] + 0.5 * n1 * (x[0] * x[0] + v);
    };
    s1.divergence = [&, solve_alpha](const Vec& x) {
        return stage1_divergence(x[0], std::exp(x[1]), prior, solve_alpha);
    };
    Vec init1(2);
    init1 << kld.mu_phi, std::log(kld.v_phi);

    TwoStageOptions two_stage;
    two_stage.solver = options.solver;
    two_stage.stop = options.stop;

    // Stage 2 on (mu_eta, log v_cond, gamma = v_phi_eta / v_phi): the
    // conditional-variance constraint holds for free.
    auto stage2_factory = [&, solve_alpha](const Vec& stage1_params) {
        const double mu_phi = stage1_params[0];
        const double v_phi = std::exp(stage1_params[1]);
        StageObjective s2;
        s2.learning_rate = fit.rates.lambda2;
        s2.expected_loss = [&, mu_phi, v_phi](const Vec& x) {
            const double v_pe = x[2] * v_phi;
            const double v_eta = std::exp(x[1]) + x[2] * v_pe;
            const double n2 = static_cast<double>(data.w.size());
            return n2 * kHalfLog2Pi + 0.5 * data.w.squaredNorm() -
                   n2 * data.w_bar() * (mu_phi + x[0]) +
                   0.5 * n2 *
                       ((mu_phi + x[0]) * (mu_phi + x[0]) + v_phi + 2.0 * v_pe +
                        v_eta);
        };
        s2.divergence = [&, v_phi, solve_alpha](const Vec& x) {
            const double v_pe = x[2] * v_phi;
            const double v_eta = std::exp(x[1]) + x[2] * v_pe;
            return stage2_divergence(x[0], v_eta, v_pe, v_phi, prior, solve_alpha);
        };
        return s2;
    };
    auto init2_factory = [&](const Vec&) {
        Vec init2(3);
        init2 << kld.mu_eta, std::log(kld.conditional_var()), kld.v_phi_eta / kld.v_phi;
        return init2;
    };

    const OccpSolution solution =
        solve_two_stage(s1, init1, stage2_factory, init2_factory, two_stage);
    fit.stage1_converged = solution.stage1_report.converged;
    fit.stage2_converged = solution.stage2_report.converged;
    fit.posterior.mu_phi = solution.stage1_params[0];
    fit.posterior.v_phi = std::exp(solution.stage1_params[1]);
    fit.posterior.mu_eta = solution.stage2_params[0];
    const double gamma = solution.stage2_params[2];
    fit.posterior.v_phi_eta = gamma * fit.posterior.v_phi;
    fit.posterior.v_eta =
        std::exp(solution.stage2_params[1]) + gamma * fit.posterior.v_phi_eta;
    fit.posterior.validate();
    return fit;
}

Data simulate(int n1, int n2, double phi_true, double eta_true, Rng& rng) {
    Data data;
    data.z.resize(n1);
    data.w.resize(n2);
    for (int i = 0; i < n1; ++i) data.z[i] = phi_true + rng.normal();
    for (int j = 0; j < n2; ++j) data.w[j] = phi_true + eta_true + rng.normal();
    return data;
}

namespace {

struct Metrics {
    double bias_phi = 0, rmse_phi = 0, cover_phi = 0;
    double bias_eta = 0, rmse_eta = 0, cover_eta = 0;
    double mean_l1 = 0, mean_l2 = 0;
};

Metrics summarize(const std::vector<BivariateVariational>& fits,
                  const std::vector<double>& l1, const std::vector<double>& l2,
                  double phi_true, double eta_true) {
    Metrics m;
    const double r = static_cast<double>(fits.size());
    for (std::size_t i = 0; i < fits.size(); ++i) {
        const auto& f = fits[i];
        m.bias_phi += (f.mu_phi - phi_true) / r;
        m.bias_eta += (f.mu_eta - eta_true) / r;
        m.rmse_phi += (f.mu_phi - phi_true) * (f.mu_phi - phi_true) / r;
        m.rmse_eta += (f.mu_eta - eta_true) * (f.mu_eta - eta_true) / r;
        m.cover_phi +=
            (std::abs(phi_true - f.mu_phi) <= kZ975 * std::sqrt(f.v_phi)) / r;
        m.cover_eta +=
            (std::abs(eta_true - f.mu_eta) <= kZ975 * std::sqrt(f.v_eta)) / r;
        m.mean_l1 += l1[i] / r;
        m.mean_l2 += l2[i] / r;
    }
    m.rmse_phi = std::sqrt(m.rmse_phi);
    m.rmse_eta = std::sqrt(m.rmse_eta);
    return m;
}

void append_rows(ReplicationReport& table, const std::string& prior_name,
                 const std::string& alpha_label, const Metrics& m, bool with_rates) {
    table.add_row({prior_name, alpha_label, std::string("phi"), m.bias_phi, m.rmse_phi,
                   m.cover_phi, with_rates ? Cell(m.mean_l1) : Cell(std::string(""))});
    table.add_row({prior_name, alpha_label, std::string("eta"), m.bias_eta, m.rmse_eta,
                   m.cover_eta, with_rates ? Cell(m.mean_l2) : Cell(std::string(""))});
}

double bivariate_density(const BivariateVariational& q, double phi, double eta) {
    const double det = q.v_phi * q.v_eta - q.v_phi_eta * q.v_phi_eta;
    const double dp = phi - q.mu_phi, de = eta - q.mu_eta;
    const double quad =
        (q.v_eta * dp * dp - 2.0 * q.v_phi_eta * dp * de + q.v_phi * de * de) / det;
    return std::exp(-0.5 * quad) / (2.0 * M_PI * std::sqrt(det));
}

}  // namespace

Table1Output run_table1(const Table1Config& config) {
    if (config.replications < 1)
        throw std::invalid_argument("run_table1: replications must be >= 1");
    std::vector<Prior> priors = config.priors;
    if (priors.empty()) {
        priors.push_back({0.0, 100.0, config.vb});   // objective
        priors.push_back({10.0, 1.0, config.vb});    // strong subjective
    }
    const std::size_t n_alpha = config.alphas.size();
    const long reps = config.replications;

    struct RepResult {
        std::vector<BivariateVariational> true_fit, occp;  // occp is prior x alpha flat
        std::vector<double> l1, l2;
        bool failed = false;
    };
    std::vector<RepResult> results(reps);

    parallel_for(reps, config.threads, [&](long rep) {
        Rng rng = make_stream(config.seed, static_cast<std::uint64_t>(rep));
        const Data data =
            simulate(config.n1, config.n2, config.phi_true, config.eta_true, rng);
        RepResult& out = results[rep];
        try {
            for (const auto& prior : priors) {
                out.true_fit.push_back(true_joint_posterior(data, prior));
                for (const double alpha : config.alphas) {
                    const Fit fit = fit_occp(data, prior, alpha);
                    out.occp.push_back(fit.posterior);
                    out.l1.push_back(fit.rates.lambda1);
                    out.l2.push_back(fit.rates.lambda2);
                }
            }
        } catch (const std::exception&) {
            out.failed = true;
        }
    });

    long failures = 0;
    for (const auto& r : results) failures += r.failed ? 1 : 0;
    if (failures * 20 > reps)
        throw std::runtime_error("run_table1: more than 5% replication failures");

    Table1Output output;
    output.table.columns = {"prior", "alpha", "param", "bias", "rmse", "coverage",
                            "mean_lr"};
    output.table.seed = config.seed;
    output.table.failures = failures;
    for (std::size_t pi = 0; pi < priors.size(); ++pi) {
        const std::string prior_name = priors[pi].v0 >= 10.0 ? "objective" : "subjective";
        std::vector<BivariateVariational> tf;
        std::vector<double> zeros;
        for (const auto& r : results)
            if (!r.failed) {
                tf.push_back(r.true_fit[pi]);
                zeros.push_back(0.0);
            }
        append_rows(output.table, prior_name, "true",
                    summarize(tf, zeros, zeros, config.phi_true, config.eta_true),
                    false);
        for (std::size_t ai = 0; ai < n_alpha; ++ai) {
            std::vector<BivariateVariational> fits;
            std::vector<double> l1, l2;
            for (const auto& r : results)
                if (!r.failed) {
                    const std::size_t idx = pi * n_alpha + ai;
                    fits.push_back(r.occp[idx]);
                    l1.push_back(r.l1[idx]);
                    l2.push_back(r.l2[idx]);
                }
            append_rows(output.table, prior_name, format_double(config.alphas[ai]),
                        summarize(fits, l1, l2, config.phi_true, config.eta_true),
                        true);
        }
    }

    // Contour grid for the first surviving replication, subjective-style view:
    // true posterior vs the OCCP at each alpha.
    output.contours.columns = {"prior", "posterior", "alpha", "phi", "eta", "density"};
    output.contours.seed = config.seed;
    long first = -1;
    for (long r = 0; r < reps; ++r)
        if (!results[r].failed) {
            first = r;
            break;
        }
    if (first >= 0) {
        const int grid_n = 41;
        for (std::size_t pi = 0; pi < priors.size(); ++pi) {
            const std::string prior_name =
                priors[pi].v0 >= 10.0 ? "objective" : "subjective";
            auto emit = [&](const std::string& label, const std::string& alpha_label,
                            const BivariateVariational& q) {
                const double sp = std::sqrt(q.v_phi), se = std::sqrt(q.v_eta);
                for (int i = 0; i < grid_n; ++i)
                    for (int j = 0; j < grid_n; ++j) {
                        const double phi = q.mu_phi + (i - grid_n / 2) * 4.0 * sp / (grid_n / 2);
                        const double eta = q.mu_eta + (j - grid_n / 2) * 4.0 * se / (grid_n / 2);
                        output.contours.add_row({prior_name, label, alpha_label, phi,
                                                 eta, bivariate_density(q, phi, eta)});
                    }
            };
            emit("true", "", results[first].true_fit[pi]);
            for (std::size_t ai = 0; ai < n_alpha; ++ai)
                emit("occp", format_double(config.alphas[ai]),
                     results[first].occp[pi * n_alpha + ai]);
        }
    }
    return output;
}

}  // namespace occp::biased_means
