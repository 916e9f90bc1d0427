#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "occp/copula.hpp"
#include "occp/occp_core.hpp"
#include "occp/optimize.hpp"
#include "occp/quadrature.hpp"
#include "occp/rng.hpp"
#include "occp/special.hpp"

using namespace occp;
using namespace occp::copula;

namespace {

Vec lognormal_sample(Rng& rng, int n) {
    Vec y(n);
    for (int i = 0; i < n; ++i) y[i] = std::exp(0.5 + 0.8 * rng.normal());
    return y;
}

double log_binom(double n, double k) {
    return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

// Multinomial log density including the coefficient.
double multinomial_logpdf(const Eigen::VectorXi& counts, const Vec& probs) {
    double out = std::lgamma(counts.sum() + 1.0);
    for (Eigen::Index k = 0; k < counts.size(); ++k) {
        out -= std::lgamma(counts[k] + 1.0);
        if (counts[k] > 0) out += counts[k] * std::log(probs[k]);
    }
    return out;
}

}  // namespace

TEST_CASE("discretize: edge cases and invariants") {
    Vec two(2);
    two << 0.1, 0.9;
    const BinnedMarginal b = discretize(two, 2, TransformTag::identity_line);
    CHECK(b.counts[0] == 1);
    CHECK(b.counts[1] == 1);
    CHECK(default_bins(1000) == 400);
    CHECK(default_bins(500) == 250);

    Rng rng(3);
    const Vec y = lognormal_sample(rng, 777);
    const BinnedMarginal big = discretize(y, default_bins(777),
                                          TransformTag::log_positive);
    CHECK(big.counts.sum() == 777);
    CHECK(big.cum_remaining[0] == doctest::Approx(777.0));
    // kappa = counts - N/2
    for (int k = 0; k < 5; ++k)
        CHECK(big.kappa[k] ==
              doctest::Approx(big.counts[k] - 0.5 * big.cum_remaining[k]));
    CHECK_THROWS_AS(discretize(Vec::Constant(5, 2.0), 4, TransformTag::identity_line),
                    std::invalid_argument);
}

TEST_CASE("stick-breaking: halving, saturation, simplex") {
    Vec zeros = Vec::Zero(2);
    const Vec p = stick_breaking_probs(zeros);
    CHECK(p[0] == doctest::Approx(0.5));
    CHECK(p[1] == doctest::Approx(0.25));
    CHECK(p[2] == doctest::Approx(0.25));

    Vec big(2);
    big << 40.0, 40.0;
    const Vec sat = stick_breaking_probs(big);
    CHECK(sat[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(sat[1] < 1e-12);

    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        Vec g(30);
        for (int k = 0; k < 30; ++k) g[k] = rng.uniform(-8.0, 8.0);
        const Vec probs = stick_breaking_probs(g);
        CHECK(probs.minCoeff() >= 0.0);
        CHECK(probs.sum() == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("multinomial equals the product of sequential conditional binomials") {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const int p = 2 + static_cast<int>(rng.uniform() * 6);
        Vec g(p - 1);
        for (int k = 0; k < p - 1; ++k) g[k] = rng.uniform(-2.0, 2.0);
        const Vec probs = stick_breaking_probs(g);
        const int n = 30;
        Eigen::VectorXi counts = Eigen::VectorXi::Zero(p);
        for (int i = 0; i < n; ++i) {
            double u = rng.uniform(), acc = 0.0;
            for (int k = 0; k < p; ++k) {
                acc += probs[k];
                if (u <= acc || k == p - 1) {
                    counts[k] += 1;
                    break;
                }
            }
        }
        const double direct = multinomial_logpdf(counts, probs);
        double seq = 0.0;
        double remaining_n = n, remaining_p = 1.0;
        for (int k = 0; k < p - 1; ++k) {
            const double cond = probs[k] / remaining_p;
            seq += log_binom(remaining_n, counts[k]) + counts[k] * std::log(cond) +
                   (remaining_n - counts[k]) * std::log1p(-cond);
            remaining_n -= counts[k];
            remaining_p -= probs[k];
        }
        CHECK(direct == doctest::Approx(seq).epsilon(1e-10));
    }
}

TEST_CASE("PG augmentation integrates back to the multinomial") {
    // E[exp(-omega g^2 / 2)] under PG(N, 0) equals cosh(g/2)^-N, so the
    // augmented form must reproduce the sequential-binomial likelihood.
    Rng rng(9);
    for (int trial = 0; trial < 30; ++trial) {
        const int p = 3;
        Vec g(p - 1);
        for (int k = 0; k < p - 1; ++k) g[k] = rng.uniform(-2.0, 2.0);
        const Vec probs = stick_breaking_probs(g);
        Eigen::VectorXi counts(p);
        counts << 3, 2, 1;
        const int n = counts.sum();
        double direct = multinomial_logpdf(counts, probs);
        double augmented = std::lgamma(n + 1.0);
        for (int k = 0; k < p; ++k) augmented -= std::lgamma(counts[k] + 1.0);
        double big_n = n;
        for (int k = 0; k < p - 1; ++k) {
            const double kappa = counts[k] - 0.5 * big_n;
            augmented += -big_n * std::log(2.0) + kappa * g[k] -
                         big_n * log_cosh(0.5 * g[k]);
            big_n -= counts[k];
        }
        CHECK(direct == doctest::Approx(augmented).epsilon(1e-8));
    }
}

TEST_CASE("pg_mean: limits, frozen value, monotonicity, MC cross-check") {
    CHECK(pg_mean(3.0, 1e-9) == doctest::Approx(0.75).epsilon(1e-10));
    CHECK(pg_mean(1.0, 2.0) == doctest::Approx(std::tanh(1.0) / 4.0).epsilon(1e-12));
    double prev = pg_mean(2.0, 0.0);
    for (double c = 0.1; c < 6.0; c += 0.1) {
        const double cur = pg_mean(2.0, c);
        CHECK(cur < prev);
        prev = cur;
    }
    // derivative vs finite differences, across the small-c switch
    for (double c : {1e-5, 5e-5, 1e-3, 0.5, 2.0}) {
        const double h = 1e-7;
        const double fd = (pg_mean(2.5, c + h) - pg_mean(2.5, c - h)) / (2.0 * h);
        CHECK(pg_mean_dc(2.5, c) == doctest::Approx(fd).epsilon(1e-4));
    }
    // MC mean of PG(1, 2) via the tilted gamma-convolution representation
    Rng rng(11);
    const double c = 2.0;
    const long draws = 20000;
    const int terms = 2000;
    double num = 0.0, den = 0.0;
    for (long t = 0; t < draws; ++t) {
        double omega = 0.0;
        for (int k = 1; k <= terms; ++k) {
            const double gk = rng.exponential();  // Gamma(1, 1)
            omega += gk / ((k - 0.5) * (k - 0.5));
        }
        omega /= 2.0 * M_PI * M_PI;
        const double tilt = std::exp(-0.5 * c * c * omega);
        num += omega * tilt;
        den += tilt;
    }
    CHECK(pg_mean(1.0, c) == doctest::Approx(num / den).epsilon(0.02));
}

TEST_CASE("expected_g_squared matches Monte Carlo over q") {
    Rng rng(13);
    const Vec y = lognormal_sample(rng, 60);
    const BinnedMarginal data = discretize(y, 8, TransformTag::log_positive);
    MarginalConfig config;
    config.m_inducing = 3;
    MarginalState state = make_marginal_state(data, config);
    // randomize the state
    state.gp.mu_u = rng.normal_vector(3) * 0.7;
    state.gp.mu_sigma = 1.2;
    state.gp.v_sigma = 0.2;
    state.gp.mu_ell[0] = 0.9;
    state.gp.v_ell[0] = 0.05;
    state.mu_beta = rng.normal_vector(3) * 0.2;
    const Vec closed = expected_g_squared(state, data);

    const long draws = 300000;
    Rng mc(17);
    const Eigen::Index pm1 = data.bins() - 1;
    Vec sum = Vec::Zero(pm1), sum_sq = Vec::Zero(pm1);
    const Mat chol_v = Mat(state.gp.sigma_u.llt().matrixL());
    const Mat chol_b = Mat(state.sigma_beta.llt().matrixL());
    Mat x(pm1, 1);
    x.col(0) = data.midpoints.head(pm1);
    for (long t = 0; t < draws; ++t) {
        const double sigma =
            state.gp.mu_sigma + std::sqrt(state.gp.v_sigma) * mc.normal();
        const double ell =
            state.gp.mu_ell[0] + std::sqrt(state.gp.v_ell[0]) * mc.normal();
        const Vec v = state.gp.mu_u + chol_v * mc.normal_vector(3);
        const Vec beta = state.mu_beta + chol_b * mc.normal_vector(3);
        Mat k_cross(pm1, 3), k_self(pm1, pm1);
        for (Eigen::Index i = 0; i < pm1; ++i) {
            for (int j = 0; j < 3; ++j) {
                const double d = ell * x(i, 0) - state.gp.inducing(j, 0);
                k_cross(i, j) = sigma * std::exp(-0.5 * d * d);
            }
            for (Eigen::Index j = 0; j < pm1; ++j) {
                const double d = ell * (x(i, 0) - x(j, 0));
                k_self(i, j) = sigma * sigma * std::exp(-0.5 * d * d);
            }
        }
        const Mat a = state.gp.k_u_solve(Mat(k_cross.transpose())).transpose();
        Mat cov = k_self - a * k_cross.transpose();
        cov.diagonal().array() += 1e-10;
        const Vec d_draw = a * v + Mat(cov.llt().matrixL()) * mc.normal_vector(pm1);
        const Vec g = d_draw + state.basis * beta;
        sum += g.cwiseProduct(g);
        sum_sq += g.array().pow(4).matrix();
    }
    for (Eigen::Index k = 0; k < pm1; ++k) {
        const double mean = sum[k] / draws;
        const double se = std::sqrt(
            std::max(0.0, sum_sq[k] / draws - mean * mean) / static_cast<double>(draws));
        CHECK(std::abs(closed[k] - mean) <= 3.0 * se + 1e-6);
    }
}

TEST_CASE("marginal objective gradient matches finite differences (p <= 8, M <= 3)") {
    Rng rng(19);
    const Vec y = lognormal_sample(rng, 60);
    const BinnedMarginal data = discretize(y, 8, TransformTag::log_positive);
    MarginalConfig config;
    config.m_inducing = 3;
    MarginalState state = make_marginal_state(data, config);
    state.gp.mu_u = rng.normal_vector(3) * 0.5;
    state.mu_beta = rng.normal_vector(3) * 0.1;
    state.gp.mu_sigma = 1.1;
    state.gp.v_sigma = 0.3;
    state.pg_tilt = state.pg_tilt.array() + 0.5;
    for (double alpha : {0.25, 1.0, 1.5}) {
        const double lambda1 = 0.8;
        Vec grad;
        marginal_objective_grad(state, data, alpha, lambda1, &grad);
        MarginalState work = state;
        const Vec x = pack_marginal(state);
        const Vec fd = finite_diff_grad(
            [&](const Vec& v) {
                unpack_marginal(v, work);
                return marginal_objective(work, data, alpha, lambda1);
            },
            x, 1e-5);
        CHECK((grad - fd).norm() <= 1e-4 * (1.0 + fd.norm()));
    }
}

TEST_CASE("marginal CAVI: monotone objective and near-uniform fit on flat data") {
    // equal counts per bin with strong shrinkage give a near-uniform density
    Vec flat(120);
    for (int i = 0; i < 120; ++i) flat[i] = (i % 6) + 0.5 + 1e-4 * (i / 6);
    const BinnedMarginal data = discretize(flat, 6, TransformTag::identity_line);
    MarginalConfig config;
    config.m_inducing = 3;
    config.max_sweeps = 200;
    config.inner_repeats = 2;
    config.lengthscale_every = 5;
    MarginalState state = make_marginal_state(data, config);

    double prev = marginal_objective(state, data, 1.0, 1.0);
    for (int sweep = 0; sweep < 30; ++sweep) {
        marginal_cavi_sweep(state, data, config, sweep);
        const double cur = marginal_objective(state, data, 1.0, 1.0);
        CHECK(cur <= prev + 1e-8 * (1.0 + std::abs(prev)));
        prev = cur;
    }
    const Vec probs = fitted_probs(state, data);
    CHECK((probs.array() - 1.0 / 6.0).abs().maxCoeff() < 0.05);
}

TEST_CASE("marginal density: integral one, u in (0,1], monotone in bin index") {
    Rng rng(23);
    const Vec y = lognormal_sample(rng, 300);
    const BinnedMarginal data = discretize(y, 40, TransformTag::log_positive);
    MarginalConfig config;
    config.m_inducing = 5;
    config.max_sweeps = 400;
    MarginalState state = make_marginal_state(data, config);
    fit_marginal_kld(state, data, config);
    const DensityAndU du = marginal_density_and_u(state, data, y);
    // transformed-space bin masses sum to one
    const Vec probs = fitted_probs(state, data);
    CHECK(probs.sum() == doctest::Approx(1.0).epsilon(1e-10));
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        CHECK(du.u[i] > 0.0);
        CHECK(du.u[i] <= 1.0 + 1e-12);
    }
    // u is nondecreasing in the bin index
    Vec cum(data.bins());
    double acc = 0.0;
    for (Eigen::Index k = 0; k < data.bins(); ++k) {
        acc += probs[k];
        cum[k] = acc;
        if (k > 0) CHECK(cum[k] >= cum[k - 1]);
    }
    CHECK_THROWS_AS(data.bin_of(1e9), std::out_of_range);
}

TEST_CASE("gumbel copula: independence at theta = 1, unit mass, Kendall tau") {
    // theta -> 1 is the independence copula: density 1, loss 0
    Rng rng(29);
    for (int trial = 0; trial < 20; ++trial) {
        const double u = rng.uniform(0.05, 0.95), v = rng.uniform(0.05, 0.95);
        CHECK(gumbel_neglog_pdf(u, v, 1.0) == doctest::Approx(0.0).epsilon(1e-10));
    }
    // density integrates to one over the unit square at theta = 2
    auto inner = [](double u, double theta) {
        return integrate(
            [u, theta](double v) { return std::exp(-gumbel_neglog_pdf(u, v, theta)); },
            Interval::finite(1e-10, 1.0 - 1e-10), 1e-9, 1e-12);
    };
    const double mass = integrate([&](double u) { return inner(u, 2.0); },
                                  Interval::finite(1e-10, 1.0 - 1e-10), 1e-8, 1e-11);
    CHECK(mass == doctest::Approx(1.0).epsilon(1e-5));

    // sample Kendall tau at theta = 1 / (1 - 0.7)
    const double theta = 1.0 / (1.0 - 0.7);
    const int n = 4000;
    Vec us(n), vs(n);
    for (int i = 0; i < n; ++i) gumbel_sample(theta, rng, us[i], vs[i]);
    long concordant = 0, discordant = 0;
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            const double s = (us[i] - us[j]) * (vs[i] - vs[j]);
            if (s > 0)
                ++concordant;
            else if (s < 0)
                ++discordant;
        }
    const double tau_hat = 2.0 * (concordant - discordant) /
                           (static_cast<double>(n) * (n - 1));
    CHECK(tau_hat == doctest::Approx(0.7).epsilon(0.03));

    // analytic theta-derivative matches finite differences
    for (double theta_check : {1.3, 2.5, 4.0}) {
        const double u = 0.3, v = 0.6, h = 1e-6;
        const double fd = (gumbel_neglog_pdf(u, v, theta_check + h) -
                           gumbel_neglog_pdf(u, v, theta_check - h)) /
                          (2.0 * h);
        CHECK(gumbel_neglog_pdf_dtheta(u, v, theta_check) ==
              doctest::Approx(fd).epsilon(1e-5));
    }
}

TEST_CASE("stage-2 divergence: zero at the prior conditional") {
    CHECK(std::abs(stage2_divergence(0.0, 1.0, 1.0, 1.0, 1.0)) < 1e-12);
    CHECK(std::abs(stage2_divergence(0.0, 1.0, 1.0, 1.0, 0.5)) < 1e-12);
    // nonnegative elsewhere
    CHECK(stage2_divergence(0.4, 0.8, 0.5, 1.0, 0.5) > 0.0);
}

TEST_CASE("stage-2 copula fit: lambda2 -> 0 recovers the prior, KLD matches the "
          "direct loss minimizer") {
    Rng rng(31);
    // simulate Gumbel-dependent uniforms with known tau = 0.5
    const int n = 600;
    const double theta_true = 1.0 / (1.0 - 0.5);
    Vec y1(n), y2(n);
    for (int i = 0; i < n; ++i) {
        double u, v;
        gumbel_sample(theta_true, rng, u, v);
        y1[i] = std::exp(norm_quantile(std::min(1.0 - 1e-12, std::max(1e-12, u))));
        y2[i] = std::exp(norm_quantile(std::min(1.0 - 1e-12, std::max(1e-12, v))));
    }
    const BinnedMarginal b1 = discretize(y1, 60, TransformTag::log_positive);
    const BinnedMarginal b2 = discretize(y2, 60, TransformTag::log_positive);
    MarginalConfig mconfig;
    mconfig.m_inducing = 5;
    mconfig.max_sweeps = 600;
    MarginalState m1 = make_marginal_state(b1, mconfig);
    MarginalState m2 = make_marginal_state(b2, mconfig);
    fit_marginal_kld(m1, b1, mconfig);
    fit_marginal_kld(m2, b2, mconfig);

    // cut property: the stage-1 states are frozen inputs; a stage-2 solve
    // cannot touch them (compare packed bits)
    const Vec before1 = pack_marginal(m1), before2 = pack_marginal(m2);

    CopulaStage2Config cfg;
    cfg.mc_samples = 128;
    cfg.seed = 99;
    cfg.stop.max_iterations = 800;
    const CopulaFit fit = stage2_fit_copula(m1, m2, b1, b2, y1, y2, 1.0, cfg);
    CHECK(pack_marginal(m1) == before1);
    CHECK(pack_marginal(m2) == before2);

    // direct 1-D minimization of the plug-in loss as the oracle
    const DensityAndU du1 = marginal_density_and_u(m1, b1, y1);
    const DensityAndU du2 = marginal_density_and_u(m2, b2, y2);
    Mat u(n, 2);
    u.col(0) = du1.u;
    u.col(1) = du2.u;
    double best_eta = 0.0, best_loss = 1e300;
    for (double eta = -0.5; eta < 1.2; eta += 0.002) {
        const double loss = gumbel_loss(u, eta);
        if (loss < best_loss) {
            best_loss = loss;
            best_eta = eta;
        }
    }
    // the fitted posterior mean agrees with the M-estimate within MC error
    CHECK(std::abs(fit.mu_eta - best_eta) < 0.05);

    // lambda2 -> 0: posterior collapses to the prior N(0, prior_var)
    CopulaStage2Config tiny = cfg;
    tiny.lambda2 = 1e-9;
    const CopulaFit prior_fit =
        stage2_fit_copula(m1, m2, b1, b2, y1, y2, 0.5, tiny);
    CHECK(std::abs(prior_fit.mu_eta) < 2e-3);
    CHECK(prior_fit.sigma_eta == doctest::Approx(cfg.prior_var).epsilon(0.01));
}

TEST_CASE("copula study smoke test: tiny scale, deterministic") {
    StudyConfig config;
    config.replications = 1;
    config.n = 200;
    config.alphas = {0.5, 0.999};
    config.seed = 7;
    config.band_draws = 50;
    config.fit_band_draws = 50;
    config.copula_kl_draws = 2000;
    config.marginal.max_sweeps = 300;
    config.stage2.mc_samples = 128;
    config.stage2.stop.max_iterations = 400;
    const StudyOutput a = run_copula_study(config);
    const StudyOutput b = run_copula_study(config);
    CHECK(a.table.failures == 0);
    REQUIRE(a.table.rows.size() == 2);
    for (std::size_t i = 0; i < a.table.rows.size(); ++i)
        CHECK(a.table.rows[i] == b.table.rows[i]);
    CHECK(a.marginal_fit.rows.size() > 0);
}
