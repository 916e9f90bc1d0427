#include "occp/occp_core.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace occp {

ObjectiveGrad StageObjective::total_with_grad() const {
    if (gradient) {
        auto grad = gradient;
        auto loss = expected_loss;
        auto div = divergence;
        const double lr = learning_rate;
        return [grad, loss, div, lr](const Vec& x, Vec& g) {
            g = grad(x);
            return lr * loss(x) + div(x);
        };
    }
    auto loss = expected_loss;
    auto div = divergence;
    const double lr = learning_rate;
    return [loss, div, lr](const Vec& x, Vec& g) {
        auto f = [&](const Vec& y) { return lr * loss(y) + div(y); };
        g = finite_diff_grad(f, x, 1e-6);
        return f(x);
    };
}

std::uint64_t fingerprint(const Vec& v) {
    // FNV-1a over the raw parameter bytes.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    const auto* bytes = reinterpret_cast<const unsigned char*>(v.data());
    const std::size_t n = static_cast<std::size_t>(v.size()) * sizeof(double);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

namespace {

SolveReport run_solver(const StageObjective& objective, const Vec& init,
                       const TwoStageOptions& options) {
    const auto fg = objective.total_with_grad();
    if (options.solver == SolverChoice::adam)
        return adam_minimize(fg, init, options.adam, options.stop);
    StoppingRule rule = options.stop;
    if (rule.grad_tol <= 0.0) rule.grad_tol = 1e-9;
    return bfgs_minimize(fg, init, rule);
}

}  // namespace

OccpSolution solve_two_stage(
    const StageObjective& stage1, const Vec& init1,
    const std::function<StageObjective(const Vec&)>& stage2_factory,
    const std::function<Vec(const Vec&)>& init2_factory,
    const TwoStageOptions& options) {
    OccpSolution solution;
    solution.stage1_report = run_solver(stage1, init1, options);
    solution.stage1_params = solution.stage1_report.final_params;
    solution.stage1_fingerprint = fingerprint(solution.stage1_params);
    if (!solution.stage1_report.converged && solution.stage1_report.error.empty())
        solution.stage1_report.error = "stage 1 did not converge";

    const StageObjective stage2 = stage2_factory(solution.stage1_params);
    const Vec init2 = init2_factory(solution.stage1_params);
    solution.stage2_report = run_solver(stage2, init2, options);
    solution.stage2_params = solution.stage2_report.final_params;
    if (!solution.stage1_report.converged)
        solution.stage2_report.error += (solution.stage2_report.error.empty() ? "" : "; ") +
                                        std::string("stage 1 was flagged");
    return solution;
}

LearningRates calibrate_learning_rates(
    const std::function<double(double)>& stage1_divergence_at_kld_opt,
    const std::function<double(double)>& stage2_divergence_at_kld_opt,
    double target_alpha, double base_lambda1, double base_lambda2) {
    if (!(target_alpha > 0.0))
        throw std::invalid_argument("calibrate_learning_rates: alpha must be > 0");
    LearningRates rates;
    rates.alpha = target_alpha;
    rates.base_lambda1 = base_lambda1;
    rates.base_lambda2 = base_lambda2;
    rates.lambda1 = base_lambda1;
    rates.lambda2 = base_lambda2;
    if (std::abs(target_alpha - 1.0) < 1e-12) return rates;

    const double d1_kl = stage1_divergence_at_kld_opt(1.0);
    const double d2_kl = stage2_divergence_at_kld_opt(1.0);
    if (d1_kl < 0.0 || d2_kl < 0.0)
        throw std::domain_error("calibrate_learning_rates: negative divergence");
    if (d1_kl < 1e-12 || d2_kl < 1e-12) {
        // Posterior equals prior; the ratio is 0/0. Fall back to base rates.
        rates.degenerate_fallback = true;
        return rates;
    }
    rates.lambda1 = stage1_divergence_at_kld_opt(target_alpha) / d1_kl * base_lambda1;
    rates.lambda2 = stage2_divergence_at_kld_opt(target_alpha) / d2_kl * base_lambda2;
    return rates;
}

double dispersion_learning_rate(const Vec& residuals, int n, int p) {
    if (n <= p) throw std::invalid_argument("dispersion_learning_rate: need n > p");
    if (residuals.size() != n)
        throw std::invalid_argument("dispersion_learning_rate: residual length != n");
    const double rss = residuals.squaredNorm();
    if (!(rss > 0.0))
        throw std::domain_error("dispersion_learning_rate: zero residual sum of squares");
    return static_cast<double>(n - p) / rss;
}

McEstimate expectation_loss_mc(const std::function<double(Rng&)>& loss_draw,
                               long n_samples, std::uint64_t seed) {
    if (n_samples < 2)
        throw std::invalid_argument("expectation_loss_mc: need n_samples >= 2");
    Rng rng(seed);
    McEstimate est;
    double sum = 0.0, sum_sq = 0.0;
    for (long i = 0; i < n_samples; ++i) {
        const double v = loss_draw(rng);
        if (!std::isfinite(v)) {
            ++est.n_bad;
            continue;
        }
        ++est.n_finite;
        sum += v;
        sum_sq += v * v;
    }
    if (est.n_bad * 100 > n_samples)
        throw std::runtime_error("expectation_loss_mc: more than 1% non-finite draws");
    if (est.n_finite < 2)
        throw std::runtime_error("expectation_loss_mc: too few finite draws");
    est.mean = sum / static_cast<double>(est.n_finite);
    const double var =
        std::max(0.0, (sum_sq - est.n_finite * est.mean * est.mean) /
                          static_cast<double>(est.n_finite - 1));
    est.std_error = std::sqrt(var / static_cast<double>(est.n_finite));
    return est;
}

}  // namespace occp
