#ifndef OCCP_CORE_HPP
#define OCCP_CORE_HPP

#include <cstdint>
#include <functional>

#include "occp/optimize.hpp"
#include "occp/rng.hpp"

namespace occp {

// One stage of the two-stage problem: total(x) = learning_rate * loss + divergence.
struct StageObjective {
    std::function<double(const Vec&)> expected_loss;
    std::function<double(const Vec&)> divergence;
    double learning_rate = 1.0;
    // Optional gradient of the *total* objective; solvers that need gradients
    // fall back to finite differences when absent.
    std::function<Vec(const Vec&)> gradient;

    double total(const Vec& x) const {
        return learning_rate * expected_loss(x) + divergence(x);
    }
    ObjectiveGrad total_with_grad() const;
};

struct LearningRates {
    double lambda1 = 1.0;       // lambda_1^alpha
    double lambda2 = 1.0;       // lambda_2^alpha
    double base_lambda1 = 1.0;  // lambda_1^1
    double base_lambda2 = 1.0;  // lambda_2^1
    double alpha = 1.0;
    bool degenerate_fallback = false;  // KLD at optimum was ~0; rates left at base
};

enum class SolverChoice { adam, bfgs };

struct TwoStageOptions {
    SolverChoice solver = SolverChoice::bfgs;
    AdamOptions adam;
    StoppingRule stop;
};

struct OccpSolution {
    Vec stage1_params;
    Vec stage2_params;
    LearningRates rates;
    SolveReport stage1_report;
    SolveReport stage2_report;
    std::uint64_t stage1_fingerprint = 0;  // hash of the frozen stage-1 params
};

std::uint64_t fingerprint(const Vec& v);

// Solves stage 1, freezes its optimum, then solves the stage-2 objective the
// factory builds around the frozen parameters. Stage-1 non-convergence is
// recorded but stage 2 is still attempted.
OccpSolution solve_two_stage(
    const StageObjective& stage1, const Vec& init1,
    const std::function<StageObjective(const Vec&)>& stage2_factory,
    const std::function<Vec(const Vec&)>& init2_factory,
    const TwoStageOptions& options = {});

// Renyi learning rates from the KLD solution: each rate is the ratio of the
// alpha-divergence to the KL divergence at the KLD optimum, times the base
// rate. The evaluators take alpha and evaluate at that fixed optimum.
LearningRates calibrate_learning_rates(
    const std::function<double(double)>& stage1_divergence_at_kld_opt,
    const std::function<double(double)>& stage2_divergence_at_kld_opt,
    double target_alpha, double base_lambda1 = 1.0, double base_lambda2 = 1.0);

// lambda_2^1 as an inverse dispersion: 1 / { sum r_j^2 / (n - p) }.
double dispersion_learning_rate(const Vec& residuals, int n, int p);

struct McEstimate {
    double mean = 0.0;
    double std_error = 0.0;
    long n_finite = 0;
    long n_bad = 0;
};

// Monte-Carlo expected loss with a reproducible stream. Draw failures beyond
// 1% of the sample budget abort.
McEstimate expectation_loss_mc(const std::function<double(Rng&)>& loss_draw,
                               long n_samples, std::uint64_t seed);

}  // namespace occp

#endif
