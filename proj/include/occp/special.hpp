#ifndef OCCP_SPECIAL_HPP
#define OCCP_SPECIAL_HPP

#include <cmath>

namespace occp {

// Digamma and trigamma via recurrence shift to x >= 8 plus the standard
// asymptotic series. Accurate to ~1e-13 for x > 0.
double digamma(double x);
double trigamma(double x);

// log cosh(x) computed as |x| + log1p(exp(-2|x|)) - log 2, safe for |x| >> 700.
double log_cosh(double x);

// log(1 + exp(x)) without overflow.
double log1p_exp(double x);

// Numerically stable logistic function.
double sigmoid(double x);

// Standard normal cdf and its inverse (Wichura's AS241, double precision).
double norm_cdf(double x);
double norm_quantile(double p);

// Regularized lower incomplete gamma P(a, x) (series + continued fraction).
double gamma_p(double a, double x);

// Quantile of Gamma(shape, rate) by Newton iteration on gamma_p.
double gamma_quantile(double shape, double rate, double p);

}  // namespace occp

#endif
