#ifndef OCCP_DIVERGENCE_HPP
#define OCCP_DIVERGENCE_HPP

#include <variant>
#include <vector>

#include "occp/distributions.hpp"

namespace occp {

// Renyi alpha-divergences D_alpha(q || p) in closed form, with the KL limit
// taken whenever |alpha - 1| < 1e-9 (the (alpha-1)^-1 prefactor is unstable
// at machine-alpha near one).
inline constexpr double kKlAlphaTol = 1e-9;

double renyi_gaussian(const GaussianDist& q, const GaussianDist& p, double alpha);

struct GaussianGrad {
    Vec d_mean;         // d D / d mean(q)
    Vec d_vech_factor;  // d D / d vech(cov_factor(q)), column-major lower triangle
};
GaussianGrad renyi_gaussian_grad(const GaussianDist& q, const GaussianDist& p,
                                 double alpha);

double renyi_invgamma(const InvGammaDist& q, const InvGammaDist& p, double alpha);

struct InvGammaGrad {
    double d_shape;
    double d_rate;
};
InvGammaGrad renyi_invgamma_grad(const InvGammaDist& q, const InvGammaDist& p,
                                 double alpha);

// D_alpha(PG(b,c) || PG(b,0)) and its derivative in the tilt c.
double renyi_polya_gamma(const PolyaGammaDist& dist, double alpha);
double renyi_polya_gamma_grad_tilt(const PolyaGammaDist& dist, double alpha);

// Same-family exponential form (alpha != 1 only; KL branches are
// family-specific and dispatched through the functions above).
double renyi_expfam(const ExpFamSpec& q, const ExpFamSpec& p, double alpha);
Vec renyi_expfam_grad(const ExpFamSpec& q, const ExpFamSpec& p, double alpha);

// Additivity over independent blocks.
struct GaussianBlock {
    GaussianDist q;
    GaussianDist p;
};
struct InvGammaBlock {
    InvGammaDist q;
    InvGammaDist p;
};
struct PolyaGammaBlock {
    PolyaGammaDist dist;  // measured against PG(shape, 0)
};
using DivergenceBlock = std::variant<GaussianBlock, InvGammaBlock, PolyaGammaBlock>;

double renyi_sum(const std::vector<DivergenceBlock>& blocks, double alpha);

}  // namespace occp

#endif
