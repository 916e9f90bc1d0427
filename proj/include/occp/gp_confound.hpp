#ifndef OCCP_GP_CONFOUND_HPP
#define OCCP_GP_CONFOUND_HPP

#include <cstdint>
#include <functional>
#include <string>

#include "occp/occp_core.hpp"
#include "occp/report.hpp"

namespace occp::gp {

// Confounded observational sample plus the unconfounded (RCT) sample.
struct ConfoundingData {
    Mat x_cont_conf;              // n1 x p1 continuous covariates
    Mat x_bin_conf;               // n1 x p2 binary dummies (p2 may be 0)
    Eigen::VectorXi t_conf;       // n1, {0,1}
    Vec y_conf;                   // n1
    Mat x_cont_unconf;            // n2 x p1
    Mat x_bin_unconf;             // n2 x p2
    Eigen::VectorXi t_unconf;     // n2
    Vec y_unconf;                 // n2
    double propensity = 0.5;      // e^u in (0,1)

    void validate() const;
    Eigen::Index n1() const { return y_conf.size(); }
    Eigen::Index n2() const { return y_unconf.size(); }
    Eigen::Index p1() const { return x_cont_conf.cols(); }
    Eigen::Index p2() const { return x_bin_conf.cols(); }
    Vec w() const;                // unbiased CATE responses Y / (e + T - 1)
    Mat x_unconf_full() const;    // [continuous | dummies], the eta design
    Vec sign_conf() const;        // 2T - 1 as doubles
};

// One sparse-GP function block (a or d) with standardized inducing variables.
struct SparseGPBlock {
    Mat inducing;      // M x p1
    Mat k_u;           // standardized kernel gram + jitter
    Mat k_u_chol;      // lower Cholesky factor of k_u
    Vec mu_u;          // q(u)
    Mat sigma_u;
    double mu_sigma = 1.0;  // q(sigma): amplitude
    double v_sigma = 1.0;
    Vec mu_ell;             // q(ell_k), one per input dimension
    Vec v_ell;
    double v_sigma0 = 100.0;  // priors
    Vec mu_ell0;
    Vec v_ell0;

    Eigen::Index m() const { return inducing.rows(); }
    Vec k_u_solve(const Vec& v) const;
    Mat k_u_solve(const Mat& v) const;
};

SparseGPBlock make_gp_block(const Mat& x_cont, int m_inducing, double jitter,
                            double mu_ell0, double v_ell0, double v_sigma0);

// Kernel expectations under q(sigma) q(ell) ("raw" versions exclude the
// amplitude moment so they can be reused by the conditional updates).
Mat psi_cross_raw(const Mat& x, const SparseGPBlock& block);
Mat psi_cross(const Mat& x, const SparseGPBlock& block);
Mat psi_quad_raw(const Mat& x, const SparseGPBlock& block, const Vec& weights);
Mat psi_quad(const Mat& x, const SparseGPBlock& block, const Vec& weights = Vec());

// Derivatives of the raw kernels in the lengthscale variational parameters.
Mat psi_cross_raw_dmu(const Mat& x, const SparseGPBlock& block, Eigen::Index k);
Mat psi_cross_raw_dv(const Mat& x, const SparseGPBlock& block, Eigen::Index k);
Mat psi_quad_raw_dmu(const Mat& x, const SparseGPBlock& block, const Vec& weights,
                     Eigen::Index k);
Mat psi_quad_raw_dv(const Mat& x, const SparseGPBlock& block, const Vec& weights,
                    Eigen::Index k);

struct Stage1Priors {
    double a0 = 0.1;  // noise precision IG prior
    double b0 = 0.1;
    double delta_var0 = 100.0;
    double mu_ell0 = 1.0;
    double v_ell0 = 100.0;
    double v_sigma0 = 100.0;
};

struct Stage1State {
    SparseGPBlock gp_a;
    SparseGPBlock gp_d;
    Vec mu_delta;     // 2*p2 (empty when p2 == 0)
    Mat sigma_delta;
    double a_q = 1.0;  // q(sigma^2) = IG(a_q, b_q)
    double b_q = 1.0;
    Stage1Priors priors;
};

struct Stage1Config {
    int m_inducing = 10;
    double jitter = 1e-8;
    Stage1Priors priors;
    int max_sweeps = 500;
    double sweep_rel_tol = 1e-10;
    int lengthscale_iters = 12;  // inner numeric update per sweep
};

Stage1State make_stage1_state(const ConfoundingData& data, const Stage1Config& config);

// Expected negative log-likelihood under q (Appendix-level closed form).
double stage1_expected_loss(const Stage1State& state, const ConfoundingData& data);

// Sum of the block divergences from the priors.
double stage1_divergence(const Stage1State& state, double alpha);

double stage1_objective(const Stage1State& state, const ConfoundingData& data,
                        double alpha, double lambda1);

// Packed unconstrained parameter vector for gradient solvers.
Vec pack_stage1(const Stage1State& state);
void unpack_stage1(const Vec& params, Stage1State& state);
// Objective and gradient in packed coordinates.
double stage1_objective_grad(const Stage1State& state, const ConfoundingData& data,
                             double alpha, double lambda1, Vec* grad);

// One coordinate-ascent sweep of the closed-form KLD updates; lengthscales are
// refreshed numerically. Returns nothing; callers track the objective.
void stage1_cavi_sweep(Stage1State& state, const ConfoundingData& data,
                       int lengthscale_iters = 12);

SolveReport fit_stage1_kld(Stage1State& state, const ConfoundingData& data,
                           const Stage1Config& config);

SolveReport fit_stage1_alpha(Stage1State& state, const ConfoundingData& data,
                             double alpha, double lambda1,
                             const AdamOptions& adam = {.step_size = 5e-3},
                             const StoppingRule& stop = {.max_iterations = 4000,
                                                         .rel_tol = 1e-9,
                                                         .patience = 50});

// Posterior expectation of the unconfounded-effect vector omega^u.
Vec expected_omega_unconf(const Stage1State& state, const ConfoundingData& data);

struct Stage2Config {
    Vec mu_eta0;       // defaults to zero
    Mat sigma_eta0;    // defaults to 100 I
    double lambda2_base = 1.0;  // lambda_2^1
};

struct Stage2State {
    Vec a_eta;
    Mat sigma_eta_q;   // optimized covariance
    Mat sigma_eta;     // fixed (lambda_2^1 X'X + Sigma0^-1)^-1
    double lambda2_base = 1.0;
};

// Exact alpha = 1 solution.
Stage2State stage2_closed_form(const Stage1State& state1, const ConfoundingData& data,
                               const Stage2Config& config);

// Gradient solve of the stage-2 objective at any alpha (lambda2 scales the
// loss; the conditional mean keeps the base-rate coupling to omega^u).
Stage2State stage2_fit(const Stage1State& state1, const ConfoundingData& data,
                       const Stage2Config& config, double lambda2, double alpha,
                       const StoppingRule& stop = {.max_iterations = 2000,
                                                   .rel_tol = 1e-12,
                                                   .patience = 5,
                                                   .grad_tol = 1e-10});

double stage2_objective(const Stage2State& trial, const Stage1State& state1,
                        const ConfoundingData& data, const Stage2Config& config,
                        double lambda2, double alpha);

// E_{q(phi)} D_alpha{q(eta|phi) || p(eta)} with the mean-quadratic term
// averaged over Monte-Carlo draws of omega^u.
double stage2_divergence_mc(const Stage2State& state2, const Mat& omega_draws,
                            const Stage2Config& config, double alpha);

// Joint draws of d at the given points (sigma, ell resampled per draw).
Mat sample_d_joint(const SparseGPBlock& block, const Mat& points, int n_draws,
                   Rng& rng);
// Draws of omega^u = 2 d^u + Xb^u (delta_1 - delta_0).
Mat sample_omega_unconf(const Stage1State& state, const ConfoundingData& data,
                        int n_draws, Rng& rng);

struct Prediction {
    double omega_mean = 0.0;
    double omega_var = 0.0;
    double tau_mean = 0.0;
    Vec tau_draws;
    double z_mean = 0.0;
    double z_var = 0.0;
};

Prediction predict(const Stage1State& state1, const Stage2State& state2,
                   const ConfoundingData& data, const Vec& x_cont_star,
                   const Vec& x_bin_star, int t_star, int tau_draws, Rng& rng);

// Kallus-style simulation with a hidden confounder.
struct Truth {
    std::function<double(double)> tau;
    std::function<double(double)> omega;
};
ConfoundingData simulate_kallus(std::uint64_t seed, int n1 = 1000, int n2 = 100);
Truth kallus_truth();

struct StudyConfig {
    std::vector<double> alphas{0.01, 0.05, 0.25, 0.999, 2.5};
    int replications = 50;
    int n1 = 1000;
    int n2 = 100;
    std::uint64_t seed = 1;
    int threads = 1;
    int omega_draws = 300;   // draws for the stage-2 divergence / eta variance
    int tau_draws = 300;
    int grid_points = 41;
    double grid_lo = -2.0;
    double grid_hi = 2.0;
    Stage1Config stage1;
    double kld_proxy_tol = 2e-3;
};

struct StudyOutput {
    ReplicationReport table;  // alpha x metric
    ReplicationReport grid;   // alpha, x, rmse/coverage for omega and tau
};

StudyOutput run_gp_study(const StudyConfig& config);

// Tennessee STAR style ingestion: outcome is the score sum, treatment the
// small-class flag, and the confounded/unconfounded split follows the
// rural-sampling protocol with fraction gamma.
struct StarIngest {
    ConfoundingData data;
    long rows_dropped = 0;
};
StarIngest ingest_star_csv(const std::string& path, double gamma, std::uint64_t seed);

}  // namespace occp::gp

#endif
