#include "occp/divergence.hpp"

#include <cmath>
#include <stdexcept>

#include "occp/special.hpp"

namespace occp {

namespace {

double log_det_spd(const Mat& m, const char* what) {
    Eigen::LLT<Mat> llt(m);
    if (llt.info() != Eigen::Success) throw std::domain_error(what);
    return 2.0 * Mat(llt.matrixL()).diagonal().array().log().sum();
}

void check_pair(const GaussianDist& q, const GaussianDist& p, double alpha) {
    q.validate();
    p.validate();
    if (q.dim() != p.dim())
        throw std::invalid_argument("renyi_gaussian: dimension mismatch");
    if (!(alpha > 0.0)) throw std::invalid_argument("renyi_gaussian: alpha must be > 0");
}

void check_finite(double v, const char* what) {
    if (!std::isfinite(v)) throw std::runtime_error(what);
}

}  // namespace

double renyi_gaussian(const GaussianDist& q, const GaussianDist& p, double alpha) {
    check_pair(q, p, alpha);
    const Eigen::Index d = q.dim();
    const Vec diff = q.mean - p.mean;
    if (std::abs(alpha - 1.0) < kKlAlphaTol) {
        const Mat cov_p = p.cov();
        Eigen::LLT<Mat> llt(cov_p);
        if (llt.info() != Eigen::Success)
            throw std::domain_error("renyi_gaussian: p covariance not SPD");
        const Mat cov_q = q.cov();
        const double val = 0.5 * (p.log_det_cov() - q.log_det_cov() -
                                  static_cast<double>(d) + diff.dot(llt.solve(diff)) +
                                  llt.solve(cov_q).trace());
        check_finite(val, "renyi_gaussian: non-finite value");
        return val;
    }
    const Mat w = alpha * p.cov() + (1.0 - alpha) * q.cov();
    Eigen::LLT<Mat> llt(w);
    if (llt.info() != Eigen::Success)
        throw std::domain_error("renyi_gaussian: W = a*cov(p)+(1-a)*cov(q) not SPD");
    const double log_det_w = 2.0 * Mat(llt.matrixL()).diagonal().array().log().sum();
    const double val = alpha * p.log_det_cov() / (2.0 * (alpha - 1.0)) -
                       0.5 * q.log_det_cov() + log_det_w / (2.0 * (1.0 - alpha)) +
                       0.5 * alpha * diff.dot(llt.solve(diff));
    check_finite(val, "renyi_gaussian: non-finite value");
    return val;
}

GaussianGrad renyi_gaussian_grad(const GaussianDist& q, const GaussianDist& p,
                                 double alpha) {
    check_pair(q, p, alpha);
    const Eigen::Index d = q.dim();
    const Vec diff = q.mean - p.mean;
    // At alpha == 1 the same formulas apply with W = cov(p).
    const Mat w = (std::abs(alpha - 1.0) < kKlAlphaTol)
                      ? p.cov()
                      : Mat(alpha * p.cov() + (1.0 - alpha) * q.cov());
    Eigen::LLT<Mat> llt(w);
    if (llt.info() != Eigen::Success)
        throw std::domain_error("renyi_gaussian_grad: W not SPD");
    const Mat w_inv = llt.solve(Mat::Identity(d, d));
    const Vec wd = w_inv * diff;
    GaussianGrad g;
    g.d_mean = alpha * wd;
    // d D / d vech(C) = vech( W^-1 C - C^-T + a(a-1) W^-1 dd' W^-1 C )
    const Mat c = q.cov_factor;
    const Mat c_inv_t = c.triangularView<Eigen::Lower>()
                            .solve(Mat::Identity(d, d))
                            .transpose();
    Mat m = w_inv * c - c_inv_t + alpha * (alpha - 1.0) * wd * (wd.transpose() * c);
    g.d_vech_factor.resize(d * (d + 1) / 2);
    Eigen::Index k = 0;
    for (Eigen::Index j = 0; j < d; ++j)
        for (Eigen::Index i = j; i < d; ++i) g.d_vech_factor[k++] = m(i, j);
    return g;
}

double renyi_invgamma(const InvGammaDist& q, const InvGammaDist& p, double alpha) {
    q.validate();
    p.validate();
    if (!(alpha > 0.0)) throw std::invalid_argument("renyi_invgamma: alpha must be > 0");
    const double a = q.shape, b = q.rate, a0 = p.shape, b0 = p.rate;
    if (std::abs(alpha - 1.0) < kKlAlphaTol) {
        const double val = a0 * std::log(b / b0) + std::lgamma(a0) - std::lgamma(a) +
                           (a - a0) * digamma(a) + a * (b0 - b) / b;
        check_finite(val, "renyi_invgamma: non-finite value");
        return val;
    }
    const double ap = alpha * a + (1.0 - alpha) * a0;
    const double bp = alpha * b + (1.0 - alpha) * b0;
    if (!(ap > 0.0) || !(bp > 0.0))
        throw std::domain_error("renyi_invgamma: alpha-mixture leaves the family");
    const double val = (std::lgamma(ap) - ap * std::log(bp) -
                        alpha * (std::lgamma(a) - a * std::log(b))) /
                           (alpha - 1.0) +
                       std::lgamma(a0) - a0 * std::log(b0);
    check_finite(val, "renyi_invgamma: non-finite value");
    return val;
}

InvGammaGrad renyi_invgamma_grad(const InvGammaDist& q, const InvGammaDist& p,
                                 double alpha) {
    q.validate();
    p.validate();
    if (!(alpha > 0.0))
        throw std::invalid_argument("renyi_invgamma_grad: alpha must be > 0");
    const double a = q.shape, b = q.rate, a0 = p.shape, b0 = p.rate;
    // KL branch: exact differentials of the KL expression; the rate gradient
    // is also the alpha -> 1 limit of the general branch.
    if (std::abs(alpha - 1.0) < kKlAlphaTol)
        return {(a - a0) * trigamma(a) + b0 / b - 1.0, a0 / b - a * b0 / (b * b)};
    const double ap = alpha * a + (1.0 - alpha) * a0;
    const double bp = alpha * b + (1.0 - alpha) * b0;
    if (!(ap > 0.0) || !(bp > 0.0))
        throw std::domain_error("renyi_invgamma_grad: alpha-mixture leaves the family");
    return {alpha * (std::log(b) - std::log(bp) + digamma(ap) - digamma(a)) /
                (alpha - 1.0),
            alpha * (a / b - ap / bp) / (alpha - 1.0)};
}

double renyi_polya_gamma(const PolyaGammaDist& dist, double alpha) {
    dist.validate();
    if (!(alpha > 0.0))
        throw std::invalid_argument("renyi_polya_gamma: alpha must be > 0");
    const double b = dist.shape, c = dist.tilt;
    if (std::abs(alpha - 1.0) < kKlAlphaTol)
        return b * log_cosh(0.5 * c) - 0.25 * b * c * std::tanh(0.5 * c);
    return b * (alpha * log_cosh(0.5 * c) - log_cosh(0.5 * std::sqrt(alpha) * c)) /
           (alpha - 1.0);
}

double renyi_polya_gamma_grad_tilt(const PolyaGammaDist& dist, double alpha) {
    dist.validate();
    if (!(alpha > 0.0))
        throw std::invalid_argument("renyi_polya_gamma_grad_tilt: alpha must be > 0");
    const double b = dist.shape, c = dist.tilt;
    if (std::abs(alpha - 1.0) < kKlAlphaTol) {
        const double sech = 1.0 / std::cosh(0.5 * c);
        return 0.25 * b * std::tanh(0.5 * c) - 0.125 * b * c * sech * sech;
    }
    const double ra = std::sqrt(alpha);
    return 0.5 * b *
           (alpha * std::tanh(0.5 * c) - ra * std::tanh(0.5 * ra * c)) /
           (alpha - 1.0);
}

double renyi_expfam(const ExpFamSpec& q, const ExpFamSpec& p, double alpha) {
    if (!(alpha > 0.0) || std::abs(alpha - 1.0) < kKlAlphaTol)
        throw std::invalid_argument("renyi_expfam: requires alpha > 0, alpha != 1");
    if (q.natural_params.size() != p.natural_params.size())
        throw std::invalid_argument("renyi_expfam: natural parameter size mismatch");
    const Vec mixed = alpha * q.natural_params + (1.0 - alpha) * p.natural_params;
    const double a_mixed = q.log_partition(mixed);
    if (!std::isfinite(a_mixed))
        throw std::domain_error(
            "renyi_expfam: alpha-mixture outside natural-parameter domain");
    return (a_mixed - alpha * q.log_partition(q.natural_params) -
            (1.0 - alpha) * p.log_partition(p.natural_params)) /
           (alpha - 1.0);
}

Vec renyi_expfam_grad(const ExpFamSpec& q, const ExpFamSpec& p, double alpha) {
    if (!(alpha > 0.0) || std::abs(alpha - 1.0) < kKlAlphaTol)
        throw std::invalid_argument("renyi_expfam_grad: requires alpha > 0, alpha != 1");
    const Vec mixed = alpha * q.natural_params + (1.0 - alpha) * p.natural_params;
    return alpha / (alpha - 1.0) *
           (q.log_partition_grad(mixed) - q.log_partition_grad(q.natural_params));
}

double renyi_sum(const std::vector<DivergenceBlock>& blocks, double alpha) {
    double total = 0.0;
    for (const auto& block : blocks) {
        total += std::visit(
            [alpha](const auto& b) -> double {
                using T = std::decay_t<decltype(b)>;
                if constexpr (std::is_same_v<T, GaussianBlock>)
                    return renyi_gaussian(b.q, b.p, alpha);
                else if constexpr (std::is_same_v<T, InvGammaBlock>)
                    return renyi_invgamma(b.q, b.p, alpha);
                else
                    return renyi_polya_gamma(b.dist, alpha);
            },
            block);
    }
    return total;
}

}  // namespace occp
