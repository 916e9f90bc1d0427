#ifndef OCCP_OPTIMIZE_HPP
#define OCCP_OPTIMIZE_HPP

#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace occp {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Objective callback: returns f(x) and fills grad (same size as x).
using ObjectiveGrad = std::function<double(const Vec&, Vec&)>;
using Objective = std::function<double(const Vec&)>;

struct StoppingRule {
    int max_iterations = 10000;
    double rel_tol = 1e-8;   // relative objective change
    int patience = 50;       // consecutive small-change iterations before stopping
    double grad_tol = 0.0;   // extra gradient-norm rule when > 0
};

struct SolveReport {
    Vec final_params;
    double final_objective = 0.0;
    int iterations_used = 0;
    std::vector<double> objective_trace;
    bool converged = false;
    std::string error;  // empty when the solve was clean
};

struct AdamOptions {
    double step_size = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    AdamOptions options;
    Vec first_moment;
    Vec second_moment;
    long iteration = 0;
};

SolveReport adam_minimize(const ObjectiveGrad& fg, const Vec& init, AdamState state,
                          const StoppingRule& stop);
inline SolveReport adam_minimize(const ObjectiveGrad& fg, const Vec& init,
                                 const AdamOptions& options = {},
                                 const StoppingRule& stop = {}) {
    return adam_minimize(fg, init, AdamState{options, Vec(), Vec(), 0}, stop);
}

// BFGS with backtracking line search; the inverse-Hessian approximation is
// reset to identity when the curvature condition fails.
SolveReport bfgs_minimize(const ObjectiveGrad& fg, const Vec& init,
                          const StoppingRule& stop = {.max_iterations = 500,
                                                      .rel_tol = 1e-12,
                                                      .patience = 3,
                                                      .grad_tol = 1e-9});

struct CoordinateDescentOptions {
    int max_sweeps = 500;
    double rel_tol = 1e-10;
    // With exact conditional minimizers the objective may not increase; an
    // increase beyond this slack is surfaced as an error.
    bool exact_updates = false;
    double exact_slack = 1e-10;
    std::function<Vec()> snapshot;  // optional: records params into the report
};

SolveReport coordinate_descent(const std::vector<std::function<void()>>& updates,
                               const std::function<double()>& objective,
                               const CoordinateDescentOptions& options = {});

// Central finite differences, elementwise.
Vec finite_diff_grad(const Objective& f, const Vec& x, double step = 1e-5);

// --- unconstrained reparameterizations ------------------------------------

enum class TransformKind { identity, log_scalar, cholesky_vech };

// forward: constrained -> unconstrained; inverse: unconstrained -> constrained.
// grad_chain maps (gradient w.r.t. constrained values, unconstrained point)
// to the gradient w.r.t. the unconstrained values.
struct Transform {
    TransformKind kind = TransformKind::identity;
    std::function<Vec(const Vec&)> forward;
    std::function<Vec(const Vec&)> inverse;
    std::function<Vec(const Vec&, const Vec&)> grad_chain;

    static Transform identity();
    static Transform log_scalar();
    // dim-d SPD matrices: constrained side is the full column-major matrix,
    // unconstrained side is vech of its Cholesky factor.
    static Transform cholesky_vech(Eigen::Index dim);
};

// vech packing of the lower triangle (column-major) and its inverse.
Vec vech(const Mat& lower);
Mat unvech(const Vec& packed, Eigen::Index dim);

// Chain rule d/d vech(C) = 2 vech(G C) for Sigma = C C^T with symmetric
// full-matrix gradient G = d f / d Sigma.
Vec cholesky_grad_chain(const Mat& grad_sigma, const Mat& factor);

}  // namespace occp

#endif
