#ifndef OCCP_BIASED_MEANS_HPP
#define OCCP_BIASED_MEANS_HPP

#include <cstdint>

#include "occp/occp_core.hpp"
#include "occp/report.hpp"

namespace occp::biased_means {

struct Data {
    Vec z;  // reliable observations
    Vec w;  // biased observations
    double z_bar() const { return z.mean(); }
    double w_bar() const { return w.mean(); }
    void validate() const;
};

struct Prior {
    double mu0 = 0.0;
    double v0 = 100.0;  // variance of the location prior
    double vb = 1.0;    // variance of the bias prior
    void validate() const;
};

// Bivariate Gaussian over (phi, eta).
struct BivariateVariational {
    double mu_phi = 0.0;
    double mu_eta = 0.0;
    double v_phi = 1.0;
    double v_eta = 1.0;
    double v_phi_eta = 0.0;

    double conditional_var() const { return v_eta - v_phi_eta * v_phi_eta / v_phi; }
    void validate() const;
};

// Exact joint posterior using both data sources.
BivariateVariational true_joint_posterior(const Data& data, const Prior& prior);

// Exact cut posterior: phi from the reliable data only, eta conditional on phi.
BivariateVariational cut_posterior(const Data& data, const Prior& prior);

// Stage objectives. Stage-1 parameters are (mu_phi, v_phi); stage-2 parameters
// are (mu_eta, v_eta, v_phi_eta) with the stage-1 pair frozen.
double stage1_objective(double mu_phi, double v_phi, const Data& data,
                        const Prior& prior, double alpha, double lambda1);
double stage2_objective(double mu_eta, double v_eta, double v_phi_eta, double mu_phi_fixed,
                        double v_phi_fixed, const Data& data, const Prior& prior,
                        double alpha, double lambda2);

// Divergence terms alone (used for learning-rate calibration).
double stage1_divergence(double mu_phi, double v_phi, const Prior& prior, double alpha);
double stage2_divergence(double mu_eta, double v_eta, double v_phi_eta, double v_phi_fixed,
                         const Prior& prior, double alpha);

struct FitOptions {
    SolverChoice solver = SolverChoice::bfgs;
    StoppingRule stop{.max_iterations = 400, .rel_tol = 1e-13, .patience = 4,
                      .grad_tol = 1e-10};
    // Pipelines treat alpha this close to one as the KLD case.
    double kld_proxy_tol = 2e-3;
};

struct Fit {
    BivariateVariational posterior;
    LearningRates rates;
    bool stage1_converged = true;
    bool stage2_converged = true;
};

// Full OCCP at the given alpha: KLD solve, learning-rate calibration, then the
// two-stage solve at alpha (numeric BFGS on unconstrained parameterizations).
Fit fit_occp(const Data& data, const Prior& prior, double alpha,
             const FitOptions& options = {});

struct Table1Config {
    int n1 = 20;
    int n2 = 1000;
    double phi_true = 5.0;
    double eta_true = 5.0;
    double vb = 1.0;
    std::vector<Prior> priors;           // defaults to objective + subjective
    std::vector<double> alphas{0.05, 0.5, 0.999, 5.0};
    int replications = 1000;
    std::uint64_t seed = 1;
    int threads = 1;
};

struct Table1Output {
    ReplicationReport table;     // prior, alpha, param, bias, rmse, coverage, mean_lr
    ReplicationReport contours;  // grid of joint density values for one dataset
};

Table1Output run_table1(const Table1Config& config);

Data simulate(int n1, int n2, double phi_true, double eta_true, Rng& rng);

}  // namespace occp::biased_means

#endif
