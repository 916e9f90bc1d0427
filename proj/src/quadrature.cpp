#include "occp/quadrature.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace occp {

double Interval::inf() { return std::numeric_limits<double>::infinity(); }

namespace {

// 15-point Kronrod nodes/weights on [-1,1] with the embedded 7-point Gauss rule.
const double kXgk[8] = {
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144838258730,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000};
const double kWgk[8] = {
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714};
const double kWg[4] = {
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327};

struct GkResult {
    double value;
    double error;
};

GkResult gk15(const std::function<double(double)>& f, double a, double b) {
    const double c = 0.5 * (a + b);
    const double h = 0.5 * (b - a);
    const double fc = f(c);
    double result_gauss = fc * kWg[3];
    double result_kronrod = fc * kWgk[7];
    for (int j = 0; j < 7; ++j) {
        const double x = h * kXgk[j];
        const double f1 = f(c - x);
        const double f2 = f(c + x);
        result_kronrod += kWgk[j] * (f1 + f2);
        if (j % 2 == 1) result_gauss += kWg[j / 2] * (f1 + f2);
    }
    return {result_kronrod * h, std::abs((result_kronrod - result_gauss) * h)};
}

double adapt(const std::function<double(double)>& f, double a, double b,
             double tol_here, double rel_tol, int depth, int max_depth,
             double& global_scale) {
    const GkResult r = gk15(f, a, b);
    if (!std::isfinite(r.value))
        throw std::runtime_error("integrate: non-finite panel value");
    global_scale = std::max(global_scale, std::abs(r.value));
    if (r.error <= tol_here || r.error <= rel_tol * std::abs(r.value)) return r.value;
    if (depth >= max_depth)
        throw std::runtime_error("integrate: subdivision limit reached");
    const double m = 0.5 * (a + b);
    return adapt(f, a, m, 0.5 * tol_here, rel_tol, depth + 1, max_depth, global_scale) +
           adapt(f, m, b, 0.5 * tol_here, rel_tol, depth + 1, max_depth, global_scale);
}

}  // namespace

double integrate(const std::function<double(double)>& f, Interval support,
                 double rel_tol, double abs_tol, int max_depth) {
    const double inf = Interval::inf();
    std::function<double(double)> g;
    double a, b;
    if (support.lo == -inf && support.hi == inf) {
        g = [&f](double t) {
            const double d = 1.0 - t * t;
            return f(t / d) * (1.0 + t * t) / (d * d);
        };
        a = -1.0 + 1e-14;
        b = 1.0 - 1e-14;
    } else if (support.hi == inf) {
        const double lo = support.lo;
        g = [&f, lo](double t) {
            const double d = 1.0 - t;
            return f(lo + t / d) / (d * d);
        };
        a = 0.0;
        b = 1.0 - 1e-14;
    } else if (support.lo == -inf) {
        const double hi = support.hi;
        g = [&f, hi](double t) {
            const double d = 1.0 - t;
            return f(hi - t / d) / (d * d);
        };
        a = 0.0;
        b = 1.0 - 1e-14;
    } else {
        g = f;
        a = support.lo;
        b = support.hi;
    }
    double scale = 0.0;
    return adapt(g, a, b, abs_tol, rel_tol, 0, max_depth, scale);
}

double oracle_renyi_quadrature(const std::function<double(double)>& q_logpdf,
                               const std::function<double(double)>& p_logpdf,
                               double alpha, Interval support, double rel_tol) {
    if (!(alpha > 0.0))
        throw std::invalid_argument("oracle_renyi_quadrature: alpha must be > 0");
    if (std::abs(alpha - 1.0) < 1e-9) {
        auto integrand = [&](double x) {
            const double lq = q_logpdf(x);
            if (lq < -745.0) return 0.0;  // q == 0 kills the integrand
            return std::exp(lq) * (lq - p_logpdf(x));
        };
        return integrate(integrand, support, rel_tol, 1e-13);
    }
    auto integrand = [&](double x) {
        const double e = alpha * q_logpdf(x) + (1.0 - alpha) * p_logpdf(x);
        return (e < -745.0) ? 0.0 : std::exp(e);
    };
    const double mass = integrate(integrand, support, rel_tol, 1e-13);
    if (!(mass > 0.0))
        throw std::runtime_error("oracle_renyi_quadrature: non-positive integral");
    return std::log(mass) / (alpha - 1.0);
}

}  // namespace occp
