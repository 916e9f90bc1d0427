#ifndef OCCP_DISTRIBUTIONS_HPP
#define OCCP_DISTRIBUTIONS_HPP

#include <functional>

#include <Eigen/Dense>

namespace occp {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Multivariate normal held through the lower-triangular factor of its
// covariance, cov = factor * factor^T. The factor diagonal stays positive so
// the implied covariance is SPD under unconstrained optimization.
struct GaussianDist {
    Vec mean;
    Mat cov_factor;  // lower triangular, positive diagonal

    GaussianDist() = default;
    GaussianDist(Vec mu, Mat factor);

    static GaussianDist from_moments(const Vec& mean, const Mat& cov);
    static GaussianDist scalar(double mean, double var);

    Eigen::Index dim() const { return mean.size(); }
    Mat cov() const { return cov_factor * cov_factor.transpose(); }
    double var_scalar() const;  // dim-1 convenience
    double log_det_cov() const;
    void validate() const;
};

struct InvGammaDist {
    double shape = 1.0;  // a
    double rate = 1.0;   // b
    void validate() const;
};

// PG(b, c): shape b, tilt c, measured against the PG(b, 0) reference.
struct PolyaGammaDist {
    double shape = 1.0;  // b
    double tilt = 0.0;   // c >= 0
    void validate() const;
};

// Exponential-family density through its natural parameters and log-partition.
struct ExpFamSpec {
    Vec natural_params;
    std::function<double(const Vec&)> log_partition;
    std::function<Vec(const Vec&)> log_partition_grad;
};

// Natural-parameter encodings matching the log-partitions used by the
// closed-form divergences: Gaussian A = (mu' S^-1 mu + log|S|)/2 over
// (S^-1 mu, -vec(S^-1)/2); inverse gamma A = lgamma(a) - a log b over (a, b).
ExpFamSpec gaussian_expfam(const GaussianDist& d);
ExpFamSpec invgamma_expfam(const InvGammaDist& d);

// log PG(x | b, 0) via the alternating series density; serves as the
// quadrature oracle's density for the PG family.
double pg_logpdf_b0(double x, double b);

// Gaussian log density helpers.
double gaussian_logpdf(double x, double mean, double var);
double invgamma_logpdf(double x, double shape, double rate);

}  // namespace occp

#endif
