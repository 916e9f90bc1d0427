#ifndef OCCP_COPULA_HPP
#define OCCP_COPULA_HPP

#include <cstdint>

#include "occp/gp_confound.hpp"  // shared sparse-GP block and Psi kernels
#include "occp/occp_core.hpp"
#include "occp/report.hpp"

namespace occp::copula {

using occp::gp::SparseGPBlock;

enum class TransformTag { identity_line, log_positive };

// One marginal discretized into p regular bins on the transformed line.
struct BinnedMarginal {
    Vec midpoints;            // p, transformed scale
    Eigen::VectorXi counts;   // p, sums to n
    Vec cum_remaining;        // N_k = n - sum_{k' < k} counts_k'
    Vec kappa;                // counts_k - N_k / 2 for k < p
    TransformTag transform = TransformTag::identity_line;
    double lo = 0.0;          // left edge, transformed scale
    double width = 1.0;       // bin width, transformed scale
    long n = 0;

    Eigen::Index bins() const { return midpoints.size(); }
    Eigen::Index bin_of(double y) const;  // throws when outside the range
    double to_line(double y) const;
    void validate() const;
};

int default_bins(long n);
BinnedMarginal discretize(const Vec& y, int p_bins, TransformTag tag);

// Stick-breaking probabilities from p-1 logits; the last bin absorbs the
// remainder, the result is a simplex point.
Vec stick_breaking_probs(const Vec& g);

// E PG(b, c) = b/(2c) tanh(c/2) with the c -> 0 limit b/4, plus its
// c-derivative.
double pg_mean(double b, double c);
double pg_mean_dc(double b, double c);

struct MarginalConfig {
    int m_inducing = 10;
    double jitter = 1e-8;
    double v_beta0 = 100.0;
    double v_sigma0 = 100.0;
    double mu_ell0 = 0.0;
    double v_ell0 = 100.0;
    int max_sweeps = 4000;
    double sweep_rel_tol = 1e-11;
    int inner_repeats = 4;       // extra conditional passes per sweep
    int lengthscale_every = 10;  // numeric lengthscale refresh cadence
    int lengthscale_iters = 12;
};

struct MarginalState {
    SparseGPBlock gp;   // q(v), q(sigma), q(ell); inducing over the midpoints
    Vec mu_beta;        // cubic basis coefficients (3)
    Mat sigma_beta;
    Vec pg_tilt;        // c_k, length p-1
    Mat basis;          // (p-1) x 3: x, x^2, x^3
    double v_beta0 = 100.0;
};

MarginalState make_marginal_state(const BinnedMarginal& data,
                                  const MarginalConfig& config);

// E_q(g_k^2), the PG tilt targets.
Vec expected_g_squared(const MarginalState& state, const BinnedMarginal& data);

double marginal_expected_loss(const MarginalState& state, const BinnedMarginal& data);

// Divergence split: the PG block always uses KL, the Gaussian blocks use
// D_alpha; the stage-1 objective is
//   lambda1 * (loss + KL_pg) + D_alpha(Gaussian blocks).
double marginal_divergence_gaussian(const MarginalState& state, double alpha);
double marginal_divergence_pg(const MarginalState& state, const BinnedMarginal& data);
double marginal_objective(const MarginalState& state, const BinnedMarginal& data,
                          double alpha, double lambda1);

Vec pack_marginal(const MarginalState& state);
void unpack_marginal(const Vec& params, MarginalState& state);
double marginal_objective_grad(const MarginalState& state, const BinnedMarginal& data,
                               double alpha, double lambda1, Vec* grad);

void marginal_cavi_sweep(MarginalState& state, const BinnedMarginal& data,
                         const MarginalConfig& config, int sweep_index);
SolveReport fit_marginal_kld(MarginalState& state, const BinnedMarginal& data,
                             const MarginalConfig& config);
SolveReport fit_marginal_alpha(MarginalState& state, const BinnedMarginal& data,
                               double alpha, double lambda1,
                               const AdamOptions& adam = {.step_size = 5e-3},
                               const StoppingRule& stop = {.max_iterations = 4000,
                                                           .rel_tol = 1e-10,
                                                           .patience = 50});

// Posterior-predictive-mean bin probabilities and per-observation u values.
Vec fitted_probs(const MarginalState& state, const BinnedMarginal& data);
struct DensityAndU {
    Vec density;  // original-scale density at the bin midpoints
    Vec u;        // one per raw observation, in (0, 1]
};
DensityAndU marginal_density_and_u(const MarginalState& state,
                                   const BinnedMarginal& data, const Vec& raw_y);

// Bivariate Gumbel copula, theta = 1/(1 - tau), tau = Phi(eta).
double gumbel_theta(double eta);
double gumbel_neglog_pdf(double u, double v, double theta);
double gumbel_neglog_pdf_dtheta(double u, double v, double theta);
// Negative log copula likelihood of an n x 2 matrix of uniforms.
double gumbel_loss(const Mat& u, double eta);
double gumbel_loss_deta(const Mat& u, double eta);
// Sampling via the positive-stable mixture representation.
void gumbel_sample(double theta, Rng& rng, double& u, double& v);

struct CopulaStage2Config {
    double prior_var = 1.0;  // eta ~ N(0, prior_var)
    double lambda2 = 1.0;
    int mc_samples = 256;
    std::uint64_t seed = 0;
    AdamOptions adam{.step_size = 2e-2};
    StoppingRule stop{.max_iterations = 1500, .rel_tol = 1e-8, .patience = 40};
};

struct CopulaFit {
    double mu_eta = 0.0;
    Vec sigma_eta_xi;      // covariance row Cov(eta, xi), xi = (v_1, b_1, v_2, b_2)
    double sigma_eta = 1.0;  // marginal variance of eta
    double cond_var = 1.0;   // Var(eta | xi)
    double divergence_kl = 0.0;     // at the fitted parameters
    double divergence_alpha = 0.0;  // at the requested alpha
};

// Stage 2 over q(eta | xi) with xi restricted to the (v_j, beta_j) blocks of
// the two frozen marginals; expected loss by reparameterized Monte Carlo with
// common random numbers.
CopulaFit stage2_fit_copula(const MarginalState& m1, const MarginalState& m2,
                            const BinnedMarginal& b1, const BinnedMarginal& b2,
                            const Vec& y1, const Vec& y2, double alpha,
                            const CopulaStage2Config& config);

// Divergence of the stage-2 conditional family at given parameters
// (used for calibration ratios and unit checks).
double stage2_divergence(double mu_eta, double marginal_var, double cond_var,
                         double prior_var, double alpha);

struct StudyConfig {
    std::vector<double> alphas{0.1, 0.25, 0.5, 0.999};
    int replications = 60;
    int n = 1000;
    double kendall_tau = 0.7;
    std::uint64_t seed = 1;
    int threads = 1;
    int band_draws = 300;       // density band draws per marginal
    int fit_band_draws = 1000;  // draws for the marginal_fit output
    long copula_kl_draws = 100000;
    MarginalConfig marginal;
    CopulaStage2Config stage2;
    double kld_proxy_tol = 2e-3;
};

struct StudyOutput {
    ReplicationReport table;         // alpha x metrics
    ReplicationReport marginal_fit;  // density bands for one dataset
};

StudyOutput run_copula_study(const StudyConfig& config);

}  // namespace occp::copula

#endif
