#ifndef OCCP_QUADRATURE_HPP
#define OCCP_QUADRATURE_HPP

#include <functional>

namespace occp {

// Integration support. Infinite endpoints are mapped to finite intervals
// before the adaptive pass (x = a + t/(1-t) for half lines, x = t/(1-t^2)
// for the full line).
struct Interval {
    double lo;
    double hi;
    static Interval finite(double a, double b) { return {a, b}; }
    static Interval positive_half_line() { return {0.0, inf()}; }
    static Interval half_line(double a) { return {a, inf()}; }
    static Interval real_line() { return {-inf(), inf()}; }
    static double inf();
};

// Adaptive Gauss-Kronrod (G7/K15) with recursive bisection.
// Throws on non-convergence within the subdivision budget.
double integrate(const std::function<double(double)>& f, Interval support,
                 double rel_tol = 1e-10, double abs_tol = 1e-12,
                 int max_depth = 60);

// Independent numeric Renyi divergence: integrates q^alpha p^(1-alpha)
// (or the KL integrand q log(q/p) when |alpha-1| < 1e-9) from log-densities.
double oracle_renyi_quadrature(const std::function<double(double)>& q_logpdf,
                               const std::function<double(double)>& p_logpdf,
                               double alpha, Interval support,
                               double rel_tol = 1e-8);

}  // namespace occp

#endif
