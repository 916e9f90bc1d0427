#include "occp/optimize.hpp"

#include <cmath>
#include <stdexcept>

namespace occp {

namespace {

bool finite(double v) { return std::isfinite(v); }
bool finite(const Vec& v) { return v.allFinite(); }

}  // namespace

SolveReport adam_minimize(const ObjectiveGrad& fg, const Vec& init, AdamState state,
                          const StoppingRule& stop) {
    const Eigen::Index n = init.size();
    if (state.first_moment.size() != n) state.first_moment = Vec::Zero(n);
    if (state.second_moment.size() != n) state.second_moment = Vec::Zero(n);
    const AdamOptions& o = state.options;

    SolveReport report;
    Vec x = init;
    Vec grad(n);
    double f = fg(x, grad);
    if (!finite(f))
        throw std::invalid_argument("adam_minimize: objective not finite at init");
    report.objective_trace.push_back(f);
    Vec best_x = x;
    double best_f = f;
    int stall = 0;
    for (int it = 0; it < stop.max_iterations; ++it) {
        if (!finite(grad)) {
            report.error = "non-finite gradient at iteration " + std::to_string(it);
            break;
        }
        state.iteration += 1;
        state.first_moment = o.beta1 * state.first_moment + (1.0 - o.beta1) * grad;
        state.second_moment =
            o.beta2 * state.second_moment +
            (1.0 - o.beta2) * grad.array().square().matrix();
        const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.iteration));
        const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.iteration));
        x -= (o.step_size * (state.first_moment / bc1).array() /
              ((state.second_moment / bc2).array().sqrt() + o.epsilon))
                 .matrix();
        const double f_new = fg(x, grad);
        if (!finite(f_new)) {
            report.error = "non-finite objective at iteration " + std::to_string(it + 1);
            break;
        }
        report.objective_trace.push_back(f_new);
        if (f_new < best_f) {
            best_f = f_new;
            best_x = x;
        }
        const double change = std::abs(f - f_new) / (1.0 + std::abs(f));
        stall = (change < stop.rel_tol) ? stall + 1 : 0;
        f = f_new;
        report.iterations_used = it + 1;
        if (stall >= stop.patience) {
            report.converged = true;
            break;
        }
    }
    report.final_params = best_x;
    report.final_objective = best_f;
    return report;
}

SolveReport bfgs_minimize(const ObjectiveGrad& fg, const Vec& init,
                          const StoppingRule& stop) {
    const Eigen::Index n = init.size();
    SolveReport report;
    Vec x = init;
    Vec grad(n);
    double f = fg(x, grad);
    if (!finite(f))
        throw std::invalid_argument("bfgs_minimize: objective not finite at init");
    report.objective_trace.push_back(f);
    Vec best_x = x;
    double best_f = f;
    Mat h_inv = Mat::Identity(n, n);
    int stall = 0;
    for (int it = 0; it < stop.max_iterations; ++it) {
        report.iterations_used = it;
        if (!finite(grad)) {
            report.error = "non-finite gradient at iteration " + std::to_string(it);
            break;
        }
        const double gnorm = grad.norm();
        if (stop.grad_tol > 0.0 && gnorm <= stop.grad_tol) {
            report.converged = true;
            break;
        }
        Vec direction = -(h_inv * grad);
        double slope = grad.dot(direction);
        if (!(slope < 0.0)) {
            h_inv = Mat::Identity(n, n);
            direction = -grad;
            slope = -gnorm * gnorm;
            if (!(slope < 0.0)) {
                report.converged = true;  // zero gradient
                break;
            }
        }
        // Armijo backtracking.
        double step = 1.0;
        double f_new = f;
        Vec x_new = x, g_new = grad;
        bool accepted = false;
        for (int ls = 0; ls < 40; ++ls) {
            x_new = x + step * direction;
            f_new = fg(x_new, g_new);
            if (finite(f_new) && f_new <= f + 1e-4 * step * slope) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            report.error = "line search failed at iteration " + std::to_string(it);
            break;
        }
        const Vec s = x_new - x;
        const Vec y = g_new - grad;
        const double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm()) {
            const double rho = 1.0 / sy;
            const Mat vmat = Mat::Identity(n, n) - rho * s * y.transpose();
            h_inv = vmat * h_inv * vmat.transpose() + rho * s * s.transpose();
        } else {
            h_inv = Mat::Identity(n, n);  // curvature condition failed
        }
        const double change = std::abs(f - f_new) / (1.0 + std::abs(f));
        x = x_new;
        grad = g_new;
        f = f_new;
        report.objective_trace.push_back(f);
        if (f < best_f) {
            best_f = f;
            best_x = x;
        }
        stall = (change < stop.rel_tol) ? stall + 1 : 0;
        if (stall >= stop.patience) {
            report.converged = true;
            break;
        }
    }
    report.final_params = best_x;
    report.final_objective = best_f;
    return report;
}

SolveReport coordinate_descent(const std::vector<std::function<void()>>& updates,
                               const std::function<double()>& objective,
                               const CoordinateDescentOptions& options) {
    SolveReport report;
    double f = objective();
    if (!finite(f))
        throw std::invalid_argument("coordinate_descent: objective not finite at init");
    report.objective_trace.push_back(f);
    if (updates.empty()) {
        report.converged = true;
        report.final_objective = f;
        if (options.snapshot) report.final_params = options.snapshot();
        return report;
    }
    for (int sweep = 0; sweep < options.max_sweeps; ++sweep) {
        for (const auto& update : updates) update();
        const double f_new = objective();
        if (!finite(f_new)) {
            report.error = "non-finite objective after sweep " + std::to_string(sweep);
            break;
        }
        report.objective_trace.push_back(f_new);
        report.iterations_used = sweep + 1;
        if (options.exact_updates && f_new > f + options.exact_slack * (1.0 + std::abs(f))) {
            report.error = "objective increased after an exact-update sweep " +
                           std::to_string(sweep);
            break;
        }
        const double change = std::abs(f - f_new) / (1.0 + std::abs(f));
        f = f_new;
        if (change < options.rel_tol) {
            report.converged = true;
            break;
        }
    }
    report.final_objective = f;
    if (options.snapshot) report.final_params = options.snapshot();
    return report;
}

Vec finite_diff_grad(const Objective& f, const Vec& x, double step) {
    Vec g(x.size());
    Vec xp = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double xi = x[i];
        xp[i] = xi + step;
        const double fp = f(xp);
        xp[i] = xi - step;
        const double fm = f(xp);
        xp[i] = xi;
        if (!finite(fp) || !finite(fm))
            throw std::runtime_error("finite_diff_grad: non-finite evaluation");
        g[i] = (fp - fm) / (2.0 * step);
    }
    return g;
}

Transform Transform::identity() {
    Transform t;
    t.kind = TransformKind::identity;
    t.forward = [](const Vec& v) { return v; };
    t.inverse = [](const Vec& v) { return v; };
    t.grad_chain = [](const Vec& g, const Vec&) { return g; };
    return t;
}

Transform Transform::log_scalar() {
    Transform t;
    t.kind = TransformKind::log_scalar;
    t.forward = [](const Vec& v) -> Vec { return v.array().log(); };
    t.inverse = [](const Vec& u) -> Vec { return u.array().exp(); };
    t.grad_chain = [](const Vec& g, const Vec& u) -> Vec {
        return g.array() * u.array().exp();
    };
    return t;
}

Transform Transform::cholesky_vech(Eigen::Index dim) {
    Transform t;
    t.kind = TransformKind::cholesky_vech;
    t.forward = [dim](const Vec& sigma_flat) {
        const Mat sigma = Eigen::Map<const Mat>(sigma_flat.data(), dim, dim);
        Eigen::LLT<Mat> llt(sigma);
        if (llt.info() != Eigen::Success)
            throw std::domain_error("cholesky_vech: matrix not SPD");
        return vech(Mat(llt.matrixL()));
    };
    t.inverse = [dim](const Vec& packed) {
        const Mat c = unvech(packed, dim);
        const Mat sigma = c * c.transpose();
        return Vec(Eigen::Map<const Vec>(sigma.data(), dim * dim));
    };
    t.grad_chain = [dim](const Vec& grad_sigma_flat, const Vec& packed) {
        const Mat g = Eigen::Map<const Mat>(grad_sigma_flat.data(), dim, dim);
        return cholesky_grad_chain(g, unvech(packed, dim));
    };
    return t;
}

Vec vech(const Mat& lower) {
    const Eigen::Index d = lower.rows();
    Vec out(d * (d + 1) / 2);
    Eigen::Index k = 0;
    for (Eigen::Index j = 0; j < d; ++j)
        for (Eigen::Index i = j; i < d; ++i) out[k++] = lower(i, j);
    return out;
}

Mat unvech(const Vec& packed, Eigen::Index dim) {
    Mat out = Mat::Zero(dim, dim);
    Eigen::Index k = 0;
    for (Eigen::Index j = 0; j < dim; ++j)
        for (Eigen::Index i = j; i < dim; ++i) out(i, j) = packed[k++];
    return out;
}

Vec cholesky_grad_chain(const Mat& grad_sigma, const Mat& factor) {
    return 2.0 * vech(Mat(grad_sigma * factor));
}

}  // namespace occp
