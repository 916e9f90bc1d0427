#include "occp/gp_confound.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "occp/divergence.hpp"
#include "occp/parallel.hpp"
#include "occp/special.hpp"

namespace occp::gp {

namespace {
constexpr double kHalfLog2Pi = 0.91893853320467274178;
constexpr double kZ975 = 1.959963984540054;

Mat chol_or_throw(const Mat& m, const char* what) {
    Eigen::LLT<Mat> llt(m);
    if (llt.info() != Eigen::Success) throw std::domain_error(what);
    return llt.matrixL();
}

// Cholesky with escalating jitter; sampled covariances lose PSD at roundoff.
Mat chol_with_jitter(Mat m, double scale) {
    double jitter = 1e-10 * (1.0 + scale);
    for (int attempt = 0; attempt < 8; ++attempt) {
        Eigen::LLT<Mat> llt(m);
        if (llt.info() == Eigen::Success) return llt.matrixL();
        m.diagonal().array() += jitter;
        jitter *= 10.0;
    }
    throw std::runtime_error("chol_with_jitter: matrix stayed indefinite");
}

struct Grad1d {
    double d_mean;
    double d_var;
};

// 1-D Gaussian divergence gradient in (mean, variance).
Grad1d renyi_gaussian_1d_grad(double m, double v, double m0, double v0, double alpha) {
    const double w = (std::abs(alpha - 1.0) < kKlAlphaTol)
                         ? v0
                         : alpha * v0 + (1.0 - alpha) * v;
    if (!(w > 0.0)) throw std::domain_error("renyi_gaussian_1d_grad: W <= 0");
    const double d = m - m0;
    return {alpha * d / w,
            0.5 * (1.0 / w - 1.0 / v + alpha * (alpha - 1.0) * d * d / (w * w))};
}

double renyi_gaussian_1d(double m, double v, double m0, double v0, double alpha) {
    return renyi_gaussian(GaussianDist::scalar(m, v), GaussianDist::scalar(m0, v0),
                          alpha);
}

// Design matrix for the dummy block: row i is ((1-T_i) Xb_i', T_i Xb_i').
Mat delta_design(const ConfoundingData& data) {
    const Eigen::Index n1 = data.n1(), p2 = data.p2();
    Mat design(n1, 2 * p2);
    for (Eigen::Index i = 0; i < n1; ++i) {
        design.row(i).head(p2) = (1.0 - data.t_conf[i]) * data.x_bin_conf.row(i);
        design.row(i).tail(p2) = static_cast<double>(data.t_conf[i]) *
                                 data.x_bin_conf.row(i);
    }
    return design;
}

}  // namespace

// --- data --------------------------------------------------------------------

void ConfoundingData::validate() const {
    if (n1() < 1 || n2() < 1)
        throw std::invalid_argument("ConfoundingData: need n1 >= n2 >= 1");
    if (n1() < n2()) throw std::invalid_argument("ConfoundingData: expected n1 >= n2");
    if (!(propensity > 0.0 && propensity < 1.0))
        throw std::invalid_argument("ConfoundingData: propensity must be in (0,1)");
    if (x_cont_conf.rows() != n1() || t_conf.size() != n1())
        throw std::invalid_argument("ConfoundingData: confounded shapes disagree");
    if (x_cont_unconf.rows() != n2() || t_unconf.size() != n2())
        throw std::invalid_argument("ConfoundingData: unconfounded shapes disagree");
    if (x_cont_unconf.cols() != p1() || x_bin_unconf.cols() != p2())
        throw std::invalid_argument("ConfoundingData: covariate dimensions disagree");
    for (Eigen::Index i = 0; i < n1(); ++i)
        if (t_conf[i] != 0 && t_conf[i] != 1)
            throw std::invalid_argument("ConfoundingData: treatments must be 0/1");
    for (Eigen::Index j = 0; j < n2(); ++j)
        if (t_unconf[j] != 0 && t_unconf[j] != 1)
            throw std::invalid_argument("ConfoundingData: treatments must be 0/1");
}

Vec ConfoundingData::w() const {
    Vec out(n2());
    for (Eigen::Index j = 0; j < n2(); ++j)
        out[j] = y_unconf[j] / (propensity + t_unconf[j] - 1.0);
    return out;
}

Mat ConfoundingData::x_unconf_full() const {
    Mat out(n2(), p1() + p2());
    out.leftCols(p1()) = x_cont_unconf;
    if (p2() > 0) out.rightCols(p2()) = x_bin_unconf;
    return out;
}

Vec ConfoundingData::sign_conf() const {
    Vec s(n1());
    for (Eigen::Index i = 0; i < n1(); ++i) s[i] = 2.0 * t_conf[i] - 1.0;
    return s;
}

// --- sparse GP block ----------------------------------------------------------

Vec SparseGPBlock::k_u_solve(const Vec& v) const {
    return k_u_chol.triangularView<Eigen::Lower>().transpose().solve(
        k_u_chol.triangularView<Eigen::Lower>().solve(v));
}

Mat SparseGPBlock::k_u_solve(const Mat& v) const {
    return k_u_chol.triangularView<Eigen::Lower>().transpose().solve(
        k_u_chol.triangularView<Eigen::Lower>().solve(v));
}

SparseGPBlock make_gp_block(const Mat& x_cont, int m_inducing, double jitter,
                            double mu_ell0, double v_ell0, double v_sigma0) {
    const Eigen::Index p1 = x_cont.cols();
    SparseGPBlock block;
    block.inducing.resize(m_inducing, p1);
    for (Eigen::Index k = 0; k < p1; ++k) {
        const double lo = x_cont.col(k).minCoeff();
        const double hi = x_cont.col(k).maxCoeff();
        for (int i = 0; i < m_inducing; ++i)
            block.inducing(i, k) = (m_inducing == 1)
                                       ? 0.5 * (lo + hi)
                                       : lo + (hi - lo) * i / (m_inducing - 1.0);
    }
    block.k_u.resize(m_inducing, m_inducing);
    for (int i = 0; i < m_inducing; ++i)
        for (int j = 0; j < m_inducing; ++j)
            block.k_u(i, j) = std::exp(
                -0.5 * (block.inducing.row(i) - block.inducing.row(j)).squaredNorm());
    block.k_u.diagonal().array() += jitter;
    block.k_u_chol = chol_or_throw(block.k_u, "make_gp_block: K_u not SPD");
    block.mu_u = Vec::Zero(m_inducing);
    block.sigma_u = block.k_u;
    block.mu_ell = Vec::Constant(p1, mu_ell0);
    block.v_ell = Vec::Constant(p1, 1e-2);
    block.mu_ell0 = Vec::Constant(p1, mu_ell0);
    block.v_ell0 = Vec::Constant(p1, v_ell0);
    block.v_sigma0 = v_sigma0;
    return block;
}

Mat psi_cross_raw(const Mat& x, const SparseGPBlock& block) {
    const Eigen::Index n = x.rows(), m = block.m(), p1 = x.cols();
    Mat out = Mat::Ones(n, m);
    for (Eigen::Index k = 0; k < p1; ++k) {
        const double mu = block.mu_ell[k], v = block.v_ell[k];
        for (Eigen::Index i = 0; i < n; ++i) {
            const double xi = x(i, k);
            const double den = 1.0 + v * xi * xi;
            const double inv_sqrt = 1.0 / std::sqrt(den);
            for (Eigen::Index j = 0; j < m; ++j) {
                const double d = xi * mu - block.inducing(j, k);
                out(i, j) *= std::exp(-0.5 * d * d / den) * inv_sqrt;
            }
        }
    }
    return out;
}

Mat psi_cross(const Mat& x, const SparseGPBlock& block) {
    return block.mu_sigma * psi_cross_raw(x, block);
}

namespace {

Mat inducing_prefactor(const SparseGPBlock& block) {
    const Eigen::Index m = block.m();
    Mat pre(m, m);
    for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index j = 0; j < m; ++j)
            pre(i, j) = std::exp(
                -0.25 * (block.inducing.row(i) - block.inducing.row(j)).squaredNorm());
    return pre;
}

}  // namespace

Mat psi_quad_raw(const Mat& x, const SparseGPBlock& block, const Vec& weights) {
    const Eigen::Index n = x.rows(), m = block.m(), p1 = x.cols();
    Mat out = Mat::Zero(m, m);
    Mat term(m, m);
    for (Eigen::Index r = 0; r < n; ++r) {
        const double wr = weights.size() ? weights[r] : 1.0;
        if (wr == 0.0) continue;
        term.setConstant(wr);
        for (Eigen::Index k = 0; k < p1; ++k) {
            const double xk = x(r, k);
            const double den = 1.0 + 2.0 * block.v_ell[k] * xk * xk;
            const double inv_sqrt = 1.0 / std::sqrt(den);
            const double xm = xk * block.mu_ell[k];
            for (Eigen::Index i = 0; i < m; ++i)
                for (Eigen::Index j = i; j < m; ++j) {
                    const double g =
                        xm - 0.5 * (block.inducing(i, k) + block.inducing(j, k));
                    term(i, j) *= std::exp(-g * g / den) * inv_sqrt;
                }
        }
        for (Eigen::Index i = 0; i < m; ++i)
            for (Eigen::Index j = i; j < m; ++j) out(i, j) += term(i, j);
    }
    for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index j = 0; j < i; ++j) out(i, j) = out(j, i);
    return inducing_prefactor(block).cwiseProduct(out);
}

Mat psi_quad(const Mat& x, const SparseGPBlock& block, const Vec& weights) {
    return (block.mu_sigma * block.mu_sigma + block.v_sigma) *
           psi_quad_raw(x, block, weights);
}

Mat psi_cross_raw_dmu(const Mat& x, const SparseGPBlock& block, Eigen::Index k) {
    Mat out = psi_cross_raw(x, block);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double xi = x(i, k);
        const double den = 1.0 + block.v_ell[k] * xi * xi;
        for (Eigen::Index j = 0; j < block.m(); ++j)
            out(i, j) *= (block.inducing(j, k) - xi * block.mu_ell[k]) * xi / den;
    }
    return out;
}

Mat psi_cross_raw_dv(const Mat& x, const SparseGPBlock& block, Eigen::Index k) {
    Mat out = psi_cross_raw(x, block);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double xi = x(i, k);
        const double den = 1.0 + block.v_ell[k] * xi * xi;
        for (Eigen::Index j = 0; j < block.m(); ++j) {
            const double d = block.inducing(j, k) - xi * block.mu_ell[k];
            out(i, j) *= 0.5 * xi * xi / den * (d * d / den - 1.0);
        }
    }
    return out;
}

namespace {

template <typename PerEntry>
Mat psi_quad_raw_deriv(const Mat& x, const SparseGPBlock& block, const Vec& weights,
                       Eigen::Index kdim, PerEntry per_entry) {
    const Eigen::Index n = x.rows(), m = block.m(), p1 = x.cols();
    Mat out = Mat::Zero(m, m);
    Mat term(m, m);
    for (Eigen::Index r = 0; r < n; ++r) {
        const double wr = weights.size() ? weights[r] : 1.0;
        if (wr == 0.0) continue;
        term.setConstant(wr);
        for (Eigen::Index k = 0; k < p1; ++k) {
            const double xk = x(r, k);
            const double den = 1.0 + 2.0 * block.v_ell[k] * xk * xk;
            const double inv_sqrt = 1.0 / std::sqrt(den);
            const double xm = xk * block.mu_ell[k];
            for (Eigen::Index i = 0; i < m; ++i)
                for (Eigen::Index j = i; j < m; ++j) {
                    const double g =
                        xm - 0.5 * (block.inducing(i, k) + block.inducing(j, k));
                    term(i, j) *= std::exp(-g * g / den) * inv_sqrt;
                }
        }
        const double xk = x(r, kdim);
        const double den = 1.0 + 2.0 * block.v_ell[kdim] * xk * xk;
        const double xm = xk * block.mu_ell[kdim];
        for (Eigen::Index i = 0; i < m; ++i)
            for (Eigen::Index j = i; j < m; ++j) {
                const double g =
                    xm - 0.5 * (block.inducing(i, kdim) + block.inducing(j, kdim));
                out(i, j) += term(i, j) * per_entry(g, xk, den);
            }
    }
    for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index j = 0; j < i; ++j) out(i, j) = out(j, i);
    return inducing_prefactor(block).cwiseProduct(out);
}

}  // namespace

Mat psi_quad_raw_dmu(const Mat& x, const SparseGPBlock& block, const Vec& weights,
                     Eigen::Index k) {
    return psi_quad_raw_deriv(
        x, block, weights, k,
        [](double g, double xk, double den) { return -2.0 * g * xk / den; });
}

Mat psi_quad_raw_dv(const Mat& x, const SparseGPBlock& block, const Vec& weights,
                    Eigen::Index k) {
    return psi_quad_raw_deriv(x, block, weights, k,
                              [](double g, double xk, double den) {
                                  return xk * xk * (2.0 * g * g / den - 1.0) / den;
                              });
}

// --- stage 1: objective -------------------------------------------------------

Stage1State make_stage1_state(const ConfoundingData& data, const Stage1Config& config) {
    data.validate();
    Stage1State state;
    state.priors = config.priors;
    state.gp_a = make_gp_block(data.x_cont_conf, config.m_inducing, config.jitter,
                               config.priors.mu_ell0, config.priors.v_ell0,
                               config.priors.v_sigma0);
    state.gp_d = state.gp_a;
    const Eigen::Index q = 2 * data.p2();
    state.mu_delta = Vec::Zero(q);
    state.sigma_delta = Mat::Identity(q, q) * config.priors.delta_var0;
    state.a_q = config.priors.a0 + 0.5 * static_cast<double>(data.n1());
    state.b_q = config.priors.b0 + 0.5 * data.y_conf.squaredNorm();
    return state;
}

namespace {

struct LossWork {
    Mat raw_pa, raw_p1a, raw_pd, raw_p1d;
    Mat pa, p1a, pd, p1d;
    Vec kia_mu, kid_mu;  // K^-1 mu_u per block
    Vec mean_a;          // Psi_a K^-1 mu_ua (n1)
    Vec mean_d;          // Psi_d K^-1 mu_ud (n1)
    Vec mean_d_signed;
    Vec xb_delta;  // design * mu_delta (zero when p2 == 0)
    Mat design;    // n1 x 2 p2
    double quad = 0.0;
    double bracket_a = 0.0, bracket_d = 0.0;  // amplitude-free quadratic brackets
};

double quad_bracket(const SparseGPBlock& block, const Mat& raw_p1, double n1) {
    const Mat ki_p1 = block.k_u_solve(raw_p1);
    const Vec ki_mu = block.k_u_solve(block.mu_u);
    return n1 + (ki_p1 * (block.k_u_solve(block.sigma_u) -
                          Mat::Identity(block.m(), block.m())))
                    .trace() +
           ki_mu.dot(raw_p1 * ki_mu);
}

LossWork loss_work(const Stage1State& state, const ConfoundingData& data) {
    LossWork w;
    const double n1 = static_cast<double>(data.n1());
    const Vec sgn = data.sign_conf();
    w.raw_pa = psi_cross_raw(data.x_cont_conf, state.gp_a);
    w.raw_p1a = psi_quad_raw(data.x_cont_conf, state.gp_a, Vec());
    w.raw_pd = psi_cross_raw(data.x_cont_conf, state.gp_d);
    w.raw_p1d = psi_quad_raw(data.x_cont_conf, state.gp_d, Vec());
    w.pa = state.gp_a.mu_sigma * w.raw_pa;
    w.pd = state.gp_d.mu_sigma * w.raw_pd;
    const double amp_a = state.gp_a.mu_sigma * state.gp_a.mu_sigma + state.gp_a.v_sigma;
    const double amp_d = state.gp_d.mu_sigma * state.gp_d.mu_sigma + state.gp_d.v_sigma;
    w.p1a = amp_a * w.raw_p1a;
    w.p1d = amp_d * w.raw_p1d;
    w.kia_mu = state.gp_a.k_u_solve(state.gp_a.mu_u);
    w.kid_mu = state.gp_d.k_u_solve(state.gp_d.mu_u);
    w.mean_a = w.pa * w.kia_mu;
    w.mean_d = w.pd * w.kid_mu;
    w.mean_d_signed = sgn.cwiseProduct(w.mean_d);
    if (data.p2() > 0) {
        w.design = delta_design(data);
        w.xb_delta = w.design * state.mu_delta;
    } else {
        w.xb_delta = Vec::Zero(data.n1());
    }

    w.bracket_a = quad_bracket(state.gp_a, w.raw_p1a, n1);
    w.bracket_d = quad_bracket(state.gp_d, w.raw_p1d, n1);

    const Vec mean_omega = w.mean_a + w.mean_d_signed + w.xb_delta;
    double e_ww = amp_a * w.bracket_a + amp_d * w.bracket_d;
    // bracket includes n1 + trace + mean quadratic, all amplitude-free
    e_ww += 2.0 * w.mean_a.dot(w.mean_d_signed + w.xb_delta);
    e_ww += 2.0 * w.mean_d.dot(sgn.cwiseProduct(w.xb_delta));
    if (data.p2() > 0) {
        const Mat dtd = w.design.transpose() * w.design;
        e_ww += (dtd * state.sigma_delta).trace() +
                state.mu_delta.dot(dtd * state.mu_delta);
    }
    w.quad = data.y_conf.squaredNorm() - 2.0 * data.y_conf.dot(mean_omega) + e_ww;
    return w;
}

}  // namespace

double stage1_expected_loss(const Stage1State& state, const ConfoundingData& data) {
    const double n1 = static_cast<double>(data.n1());
    const LossWork w = loss_work(state, data);
    return n1 * kHalfLog2Pi +
           0.5 * n1 * (std::log(state.b_q) - digamma(state.a_q)) +
           0.5 * state.a_q / state.b_q * w.quad;
}

double stage1_divergence(const Stage1State& state, double alpha) {
    const Stage1Priors& pr = state.priors;
    double dv = renyi_invgamma({state.a_q, state.b_q}, {pr.a0, pr.b0}, alpha);
    auto gp_terms = [&](const SparseGPBlock& b) {
        double s = renyi_gaussian(
            GaussianDist(b.mu_u, chol_or_throw(b.sigma_u, "stage1_divergence: "
                                                          "Sigma_u not SPD")),
            GaussianDist(Vec::Zero(b.m()), b.k_u_chol), alpha);
        s += renyi_gaussian_1d(b.mu_sigma, b.v_sigma, 0.0, b.v_sigma0, alpha);
        for (Eigen::Index k = 0; k < b.mu_ell.size(); ++k)
            s += renyi_gaussian_1d(b.mu_ell[k], b.v_ell[k], b.mu_ell0[k], b.v_ell0[k],
                                   alpha);
        return s;
    };
    dv += gp_terms(state.gp_a) + gp_terms(state.gp_d);
    if (state.mu_delta.size() > 0) {
        const Eigen::Index q = state.mu_delta.size();
        dv += renyi_gaussian(
            GaussianDist(state.mu_delta,
                         chol_or_throw(state.sigma_delta,
                                       "stage1_divergence: Sigma_delta not SPD")),
            GaussianDist(Vec::Zero(q),
                         Mat(Mat::Identity(q, q) * std::sqrt(pr.delta_var0))),
            alpha);
    }
    return dv;
}

double stage1_objective(const Stage1State& state, const ConfoundingData& data,
                        double alpha, double lambda1) {
    return lambda1 * stage1_expected_loss(state, data) +
           stage1_divergence(state, alpha);
}

// --- stage 1: packing and gradient ---------------------------------------------

namespace {

Eigen::Index tri(Eigen::Index d) { return d * (d + 1) / 2; }

Eigen::Index packed_size(const Stage1State& state) {
    const Eigen::Index q = state.mu_delta.size();
    const Eigen::Index m = state.gp_a.m();
    const Eigen::Index p1 = state.gp_a.mu_ell.size();
    const Eigen::Index per_block = m + tri(m) + 2 + 2 * p1;
    return (q > 0 ? q + tri(q) : 0) + 2 + 2 * per_block;
}

void pack_block(const SparseGPBlock& b, Vec& out, Eigen::Index& at) {
    const Eigen::Index m = b.m(), p1 = b.mu_ell.size();
    out.segment(at, m) = b.mu_u;
    at += m;
    out.segment(at, tri(m)) =
        vech(chol_or_throw(b.sigma_u, "pack_stage1: Sigma_u not SPD"));
    at += tri(m);
    out[at++] = b.mu_sigma;
    out[at++] = std::log(b.v_sigma);
    out.segment(at, p1) = b.mu_ell;
    at += p1;
    out.segment(at, p1) = b.v_ell.array().log();
    at += p1;
}

void unpack_block(const Vec& in, SparseGPBlock& b, Eigen::Index& at) {
    const Eigen::Index m = b.m(), p1 = b.mu_ell.size();
    b.mu_u = in.segment(at, m);
    at += m;
    const Mat c = unvech(in.segment(at, tri(m)), m);
    b.sigma_u = c * c.transpose();
    at += tri(m);
    b.mu_sigma = in[at++];
    b.v_sigma = std::exp(in[at++]);
    b.mu_ell = in.segment(at, p1);
    at += p1;
    b.v_ell = in.segment(at, p1).array().exp();
    at += p1;
}

}  // namespace

Vec pack_stage1(const Stage1State& state) {
    Vec out(packed_size(state));
    Eigen::Index at = 0;
    const Eigen::Index q = state.mu_delta.size();
    if (q > 0) {
        out.segment(at, q) = state.mu_delta;
        at += q;
        out.segment(at, tri(q)) = vech(
            chol_or_throw(state.sigma_delta, "pack_stage1: Sigma_delta not SPD"));
        at += tri(q);
    }
    out[at++] = std::log(state.a_q);
    out[at++] = std::log(state.b_q);
    pack_block(state.gp_a, out, at);
    pack_block(state.gp_d, out, at);
    return out;
}

void unpack_stage1(const Vec& params, Stage1State& state) {
    Eigen::Index at = 0;
    const Eigen::Index q = state.mu_delta.size();
    if (q > 0) {
        state.mu_delta = params.segment(at, q);
        at += q;
        const Mat c = unvech(params.segment(at, tri(q)), q);
        state.sigma_delta = c * c.transpose();
        at += tri(q);
    }
    state.a_q = std::exp(params[at++]);
    state.b_q = std::exp(params[at++]);
    unpack_block(params, state.gp_a, at);
    unpack_block(params, state.gp_d, at);
}

namespace {

// Per-block loss gradients shared between the a and d blocks. `resid` is the
// signed regression residual multiplying this block's cross kernel and
// `other_mean` the competing mean term inside it.
struct BlockGrads {
    Vec d_mu_u;
    Vec d_vech_sigma_u;  // chain through the Cholesky factor of Sigma_u
    double d_mu_sigma = 0.0;
    double d_v_sigma = 0.0;
    Vec d_mu_ell;
    Vec d_v_ell;
};

BlockGrads block_loss_grads(const SparseGPBlock& block, const Mat& x, const Mat& raw_p,
                            const Mat& raw_p1, double bracket, const Vec& resid,
                            double ratio) {
    // resid = (other-mean terms - z), already sign-adjusted for this block.
    const Eigen::Index m = block.m(), p1 = block.mu_ell.size();
    const double amp = block.mu_sigma * block.mu_sigma + block.v_sigma;
    const Vec ki_mu = block.k_u_solve(block.mu_u);
    const Mat p1_full = amp * raw_p1;
    const Mat p_full = block.mu_sigma * raw_p;

    BlockGrads g;
    g.d_mu_u = ratio * block.k_u_solve(
                           Vec(p1_full * ki_mu + p_full.transpose() * resid));
    const Mat g_sigma =
        0.5 * ratio * block.k_u_solve(Mat(block.k_u_solve(p1_full).transpose()));
    g.d_vech_sigma_u = cholesky_grad_chain(
        g_sigma, chol_or_throw(block.sigma_u, "block_loss_grads: Sigma_u not SPD"));
    g.d_mu_sigma = ratio * (ki_mu.dot(raw_p.transpose() * resid) +
                            block.mu_sigma * bracket);
    g.d_v_sigma = 0.5 * ratio * bracket;

    const Mat ki_sig_ki = block.k_u_solve(Mat(block.k_u_solve(block.sigma_u).transpose()));
    const Mat ki = block.k_u_solve(Mat(Mat::Identity(m, m)));
    const Mat coef_b = ki_sig_ki + ki_mu * ki_mu.transpose() - ki;
    const Mat coef_a = resid * ki_mu.transpose();  // n1 x m
    g.d_mu_ell.resize(p1);
    g.d_v_ell.resize(p1);
    for (Eigen::Index k = 0; k < p1; ++k) {
        const Mat dp = psi_cross_raw_dmu(x, block, k);
        const Mat dq = psi_quad_raw_dmu(x, block, Vec(), k);
        g.d_mu_ell[k] = 0.5 * ratio *
                        (2.0 * block.mu_sigma * dp.cwiseProduct(coef_a).sum() +
                         amp * dq.cwiseProduct(coef_b).sum());
        const Mat dpv = psi_cross_raw_dv(x, block, k);
        const Mat dqv = psi_quad_raw_dv(x, block, Vec(), k);
        g.d_v_ell[k] = 0.5 * ratio *
                       (2.0 * block.mu_sigma * dpv.cwiseProduct(coef_a).sum() +
                        amp * dqv.cwiseProduct(coef_b).sum());
    }
    return g;
}

void add_block_divergence_grad(const SparseGPBlock& block, double alpha,
                               BlockGrads& g) {
    const GaussianGrad gu = renyi_gaussian_grad(
        GaussianDist(block.mu_u, chol_or_throw(block.sigma_u,
                                               "divergence grad: Sigma_u not SPD")),
        GaussianDist(Vec::Zero(block.m()), block.k_u_chol), alpha);
    g.d_mu_u += gu.d_mean;
    g.d_vech_sigma_u += gu.d_vech_factor;
    const Grad1d gs =
        renyi_gaussian_1d_grad(block.mu_sigma, block.v_sigma, 0.0, block.v_sigma0, alpha);
    g.d_mu_sigma += gs.d_mean;
    g.d_v_sigma += gs.d_var;
    for (Eigen::Index k = 0; k < block.mu_ell.size(); ++k) {
        const Grad1d gl = renyi_gaussian_1d_grad(block.mu_ell[k], block.v_ell[k],
                                                 block.mu_ell0[k], block.v_ell0[k],
                                                 alpha);
        g.d_mu_ell[k] += gl.d_mean;
        g.d_v_ell[k] += gl.d_var;
    }
}

void write_block_grad(const SparseGPBlock& block, const BlockGrads& g, Vec& out,
                      Eigen::Index& at) {
    const Eigen::Index m = block.m(), p1 = block.mu_ell.size();
    out.segment(at, m) = g.d_mu_u;
    at += m;
    out.segment(at, tri(m)) = g.d_vech_sigma_u;
    at += tri(m);
    out[at++] = g.d_mu_sigma;
    out[at++] = g.d_v_sigma * block.v_sigma;  // log chain
    out.segment(at, p1) = g.d_mu_ell;
    at += p1;
    out.segment(at, p1) =
        (g.d_v_ell.array() * block.v_ell.array()).matrix();  // log chain
    at += p1;
}

}  // namespace

double stage1_objective_grad(const Stage1State& state, const ConfoundingData& data,
                             double alpha, double lambda1, Vec* grad) {
    const double n1 = static_cast<double>(data.n1());
    const LossWork w = loss_work(state, data);
    const double a = state.a_q, b = state.b_q;
    const double loss = n1 * kHalfLog2Pi + 0.5 * n1 * (std::log(b) - digamma(a)) +
                        0.5 * a / b * w.quad;
    const double value = lambda1 * loss + stage1_divergence(state, alpha);
    if (!grad) return value;

    grad->resize(packed_size(state));
    Eigen::Index at = 0;
    const double ratio = lambda1 * a / b;
    const Vec sgn = data.sign_conf();
    const Vec& z = data.y_conf;

    if (state.mu_delta.size() > 0) {
        const Eigen::Index q = state.mu_delta.size();
        const Vec resid = w.xb_delta + w.mean_a + w.mean_d_signed - z;
        Vec d_mu = ratio * (w.design.transpose() * resid);
        Mat d_sigma = 0.5 * ratio * (w.design.transpose() * w.design);
        const Mat c_delta =
            chol_or_throw(state.sigma_delta, "stage1 grad: Sigma_delta not SPD");
        Vec d_vech = cholesky_grad_chain(d_sigma, c_delta);
        const GaussianGrad gd = renyi_gaussian_grad(
            GaussianDist(state.mu_delta, c_delta),
            GaussianDist(Vec::Zero(q),
                         Mat(Mat::Identity(q, q) *
                             std::sqrt(state.priors.delta_var0))),
            alpha);
        d_mu += gd.d_mean;
        d_vech += gd.d_vech_factor;
        grad->segment(at, q) = d_mu;
        at += q;
        grad->segment(at, tri(q)) = d_vech;
        at += tri(q);
    }

    // q(sigma^2) block on (log a, log b).
    const InvGammaGrad gig = renyi_invgamma_grad(
        {a, b}, {state.priors.a0, state.priors.b0}, alpha);
    const double d_a = lambda1 * (-0.5 * n1 * trigamma(a) + 0.5 * w.quad / b) + gig.d_shape;
    const double d_b =
        lambda1 * (0.5 * n1 / b - 0.5 * a / (b * b) * w.quad) + gig.d_rate;
    (*grad)[at++] = d_a * a;
    (*grad)[at++] = d_b * b;

    // Block a: residual pairs with (signed d-mean + dummies - z).
    {
        const Vec resid = w.mean_d_signed + w.xb_delta - z;
        BlockGrads g = block_loss_grads(state.gp_a, data.x_cont_conf, w.raw_pa,
                                        w.raw_p1a, w.bracket_a, resid, ratio);
        add_block_divergence_grad(state.gp_a, alpha, g);
        write_block_grad(state.gp_a, g, *grad, at);
    }
    // Block d: residual is sign-adjusted.
    {
        const Vec resid = sgn.cwiseProduct(Vec(w.mean_a + w.xb_delta - z));
        BlockGrads g = block_loss_grads(state.gp_d, data.x_cont_conf, w.raw_pd,
                                        w.raw_p1d, w.bracket_d, resid, ratio);
        add_block_divergence_grad(state.gp_d, alpha, g);
        write_block_grad(state.gp_d, g, *grad, at);
    }
    return value;
}

// --- stage 1: CAVI --------------------------------------------------------------

namespace {

void update_u_block(SparseGPBlock& block, const Mat& raw_p, const Mat& raw_p1,
                    const Vec& target, double b_over_a) {
    const Eigen::Index m = block.m();
    const double amp = block.mu_sigma * block.mu_sigma + block.v_sigma;
    const Mat p1_full = amp * raw_p1;
    const Mat s = b_over_a * block.k_u + p1_full;
    Eigen::LDLT<Mat> ldlt(s);
    if (ldlt.info() != Eigen::Success)
        throw std::runtime_error("update_u_block: solve failed");
    block.sigma_u = b_over_a * block.k_u * ldlt.solve(block.k_u);
    block.sigma_u = 0.5 * (block.sigma_u + block.sigma_u.transpose()).eval();
    block.mu_u =
        block.k_u * ldlt.solve(Vec(block.mu_sigma * raw_p.transpose() * target));
}

void update_sigma_block(SparseGPBlock& block, const Mat& raw_p, const Mat& raw_p1,
                        double bracket, const Vec& target, double a_over_b) {
    const Vec ki_mu = block.k_u_solve(block.mu_u);
    block.v_sigma = 1.0 / (a_over_b * bracket + 1.0 / block.v_sigma0);
    block.mu_sigma = block.v_sigma * a_over_b * ki_mu.dot(raw_p.transpose() * target);
}

}  // namespace

void stage1_cavi_sweep(Stage1State& state, const ConfoundingData& data,
                       int lengthscale_iters) {
    const double n1 = static_cast<double>(data.n1());
    const Vec sgn = data.sign_conf();
    const Vec& z = data.y_conf;
    const Mat design = data.p2() > 0 ? delta_design(data) : Mat();

    // q(sigma^2): a_q is fixed by conjugacy, b_q tracks the expected RSS.
    {
        const LossWork w = loss_work(state, data);
        state.a_q = state.priors.a0 + 0.5 * n1;
        state.b_q = state.priors.b0 + 0.5 * w.quad;
    }
    const double a_over_b = state.a_q / state.b_q;
    const double b_over_a = 1.0 / a_over_b;

    // q(u_a), then q(u_d) with the refreshed a-mean.
    {
        const Mat raw_pa = psi_cross_raw(data.x_cont_conf, state.gp_a);
        const Mat raw_p1a = psi_quad_raw(data.x_cont_conf, state.gp_a, Vec());
        const Mat raw_pd = psi_cross_raw(data.x_cont_conf, state.gp_d);
        const Mat raw_p1d = psi_quad_raw(data.x_cont_conf, state.gp_d, Vec());
        const Vec xb = data.p2() > 0 ? Vec(design * state.mu_delta)
                                     : Vec(Vec::Zero(data.n1()));
        Vec mean_d = state.gp_d.mu_sigma * raw_pd * state.gp_d.k_u_solve(state.gp_d.mu_u);
        update_u_block(state.gp_a, raw_pa, raw_p1a,
                       Vec(z - sgn.cwiseProduct(mean_d) - xb), b_over_a);
        const Vec mean_a =
            state.gp_a.mu_sigma * raw_pa * state.gp_a.k_u_solve(state.gp_a.mu_u);
        update_u_block(state.gp_d, raw_pd, raw_p1d,
                       Vec(sgn.cwiseProduct(Vec(z - mean_a - xb))), b_over_a);

        // q(delta).
        if (data.p2() > 0) {
            const Eigen::Index q = state.mu_delta.size();
            mean_d = state.gp_d.mu_sigma * raw_pd * state.gp_d.k_u_solve(state.gp_d.mu_u);
            const Mat prior_prec =
                Mat::Identity(q, q) / state.priors.delta_var0;
            const Mat prec = prior_prec + a_over_b * design.transpose() * design;
            Eigen::LLT<Mat> llt(prec);
            state.sigma_delta = llt.solve(Mat::Identity(q, q));
            state.mu_delta = llt.solve(Vec(
                a_over_b * design.transpose() *
                Vec(z - mean_a - sgn.cwiseProduct(mean_d))));
        }
    }

    // q(sigma_a), q(sigma_d). Brackets are amplitude-free.
    {
        const Mat raw_pa = psi_cross_raw(data.x_cont_conf, state.gp_a);
        const Mat raw_p1a = psi_quad_raw(data.x_cont_conf, state.gp_a, Vec());
        const Mat raw_pd = psi_cross_raw(data.x_cont_conf, state.gp_d);
        const Mat raw_p1d = psi_quad_raw(data.x_cont_conf, state.gp_d, Vec());
        const Vec xb = data.p2() > 0 ? Vec(design * state.mu_delta)
                                     : Vec(Vec::Zero(data.n1()));
        const Vec mean_d =
            state.gp_d.mu_sigma * raw_pd * state.gp_d.k_u_solve(state.gp_d.mu_u);
        const double bracket_a = quad_bracket(state.gp_a, raw_p1a, n1);
        update_sigma_block(state.gp_a, raw_pa, raw_p1a, bracket_a,
                           Vec(z - sgn.cwiseProduct(mean_d) - xb), a_over_b);
        const Vec mean_a =
            state.gp_a.mu_sigma * raw_pa * state.gp_a.k_u_solve(state.gp_a.mu_u);
        const double bracket_d = quad_bracket(state.gp_d, raw_p1d, n1);
        update_sigma_block(state.gp_d, raw_pd, raw_p1d, bracket_d,
                           Vec(sgn.cwiseProduct(Vec(z - mean_a - xb))), a_over_b);
    }

    // Lengthscales: no closed form; short gradient descent on the full
    // objective restricted to (mu_ell, log v_ell) of both blocks.
    if (lengthscale_iters > 0) {
        const Eigen::Index p1 = data.p1();
        Stage1State trial = state;
        auto set_ell = [&trial, p1](const Vec& x) {
            trial.gp_a.mu_ell = x.segment(0, p1);
            trial.gp_a.v_ell = x.segment(p1, p1).array().exp();
            trial.gp_d.mu_ell = x.segment(2 * p1, p1);
            trial.gp_d.v_ell = x.segment(3 * p1, p1).array().exp();
        };
        Vec full_grad;
        auto fg = [&](const Vec& x, Vec& g) {
            set_ell(x);
            const double f =
                stage1_objective_grad(trial, data, 1.0, 1.0, &full_grad);
            // lengthscale entries sit at the tail of each block segment
            const Eigen::Index q = trial.mu_delta.size();
            const Eigen::Index m = trial.gp_a.m();
            const Eigen::Index per_block = m + tri(m) + 2 + 2 * p1;
            const Eigen::Index base = (q > 0 ? q + tri(q) : 0) + 2;
            g.resize(4 * p1);
            g.segment(0, 2 * p1) =
                full_grad.segment(base + per_block - 2 * p1, 2 * p1);
            g.segment(2 * p1, 2 * p1) =
                full_grad.segment(base + 2 * per_block - 2 * p1, 2 * p1);
            return f;
        };
        Vec x0(4 * p1);
        x0.segment(0, p1) = state.gp_a.mu_ell;
        x0.segment(p1, p1) = state.gp_a.v_ell.array().log();
        x0.segment(2 * p1, p1) = state.gp_d.mu_ell;
        x0.segment(3 * p1, p1) = state.gp_d.v_ell.array().log();
        const SolveReport r = bfgs_minimize(
            fg, x0,
            {.max_iterations = lengthscale_iters, .rel_tol = 1e-12, .patience = 2,
             .grad_tol = 1e-10});
        set_ell(r.final_params);  // best-seen; never worse than x0
        state.gp_a.mu_ell = trial.gp_a.mu_ell;
        state.gp_a.v_ell = trial.gp_a.v_ell;
        state.gp_d.mu_ell = trial.gp_d.mu_ell;
        state.gp_d.v_ell = trial.gp_d.v_ell;
    }
}

SolveReport fit_stage1_kld(Stage1State& state, const ConfoundingData& data,
                           const Stage1Config& config) {
    CoordinateDescentOptions options;
    options.max_sweeps = config.max_sweeps;
    options.rel_tol = config.sweep_rel_tol;
    options.exact_updates = true;
    options.exact_slack = 1e-8;
    options.snapshot = [&state]() { return pack_stage1(state); };
    std::vector<std::function<void()>> updates{
        [&]() { stage1_cavi_sweep(state, data, config.lengthscale_iters); }};
    return coordinate_descent(
        updates, [&]() { return stage1_objective(state, data, 1.0, 1.0); }, options);
}

SolveReport fit_stage1_alpha(Stage1State& state, const ConfoundingData& data,
                             double alpha, double lambda1, const AdamOptions& adam,
                             const StoppingRule& stop) {
    Stage1State work = state;
    auto fg = [&](const Vec& x, Vec& g) {
        unpack_stage1(x, work);
        return stage1_objective_grad(work, data, alpha, lambda1, &g);
    };
    const SolveReport report = adam_minimize(fg, pack_stage1(state), adam, stop);
    unpack_stage1(report.final_params, state);
    return report;
}

// --- stage 2 ---------------------------------------------------------------------

Vec expected_omega_unconf(const Stage1State& state, const ConfoundingData& data) {
    Vec omega = 2.0 * psi_cross(data.x_cont_unconf, state.gp_d) *
                state.gp_d.k_u_solve(state.gp_d.mu_u);
    if (data.p2() > 0) {
        const Eigen::Index p2 = data.p2();
        omega += data.x_bin_unconf *
                 Vec(state.mu_delta.tail(p2) - state.mu_delta.head(p2));
    }
    return omega;
}

namespace {

struct Stage2Work {
    Mat x;          // n2 x p design
    Vec w;          // responses
    Mat sigma0;     // prior covariance
    Vec mu0;
    Mat sigma0_inv;
    Vec e_omega;    // E_q(omega^u) under the supplied stage-1 state
    Vec shift;      // lambda2_base * Sigma_eta X' E(omega)
    Vec b_vec;      // w + (lambda2_base X Sigma_eta X' - I) E(omega)
};

Stage2Work stage2_work(const Stage1State& state1, const ConfoundingData& data,
                       const Stage2Config& config, const Mat& sigma_eta,
                       double lambda2_base) {
    Stage2Work w;
    w.x = data.x_unconf_full();
    w.w = data.w();
    const Eigen::Index p = w.x.cols();
    w.sigma0 = config.sigma_eta0.size() ? config.sigma_eta0
                                        : Mat(Mat::Identity(p, p) * 100.0);
    w.mu0 = config.mu_eta0.size() ? config.mu_eta0 : Vec(Vec::Zero(p));
    w.sigma0_inv = w.sigma0.llt().solve(Mat::Identity(p, p));
    w.e_omega = expected_omega_unconf(state1, data);
    w.shift = lambda2_base * sigma_eta * (w.x.transpose() * w.e_omega);
    w.b_vec = w.w + lambda2_base * (w.x * (sigma_eta * (w.x.transpose() * w.e_omega))) -
              w.e_omega;
    return w;
}

Mat fixed_sigma_eta(const ConfoundingData& data, const Stage2Config& config) {
    const Mat x = data.x_unconf_full();
    const Eigen::Index p = x.cols();
    const Mat sigma0 = config.sigma_eta0.size() ? config.sigma_eta0
                                                : Mat(Mat::Identity(p, p) * 100.0);
    const Mat prec =
        config.lambda2_base * x.transpose() * x + sigma0.llt().solve(Mat::Identity(p, p));
    return prec.llt().solve(Mat::Identity(p, p));
}

}  // namespace

Stage2State stage2_closed_form(const Stage1State& state1, const ConfoundingData& data,
                               const Stage2Config& config) {
    (void)state1;  // the alpha = 1 optimum does not involve omega^u
    Stage2State s;
    s.lambda2_base = config.lambda2_base;
    s.sigma_eta = fixed_sigma_eta(data, config);
    s.sigma_eta_q = s.sigma_eta;
    const Mat x = data.x_unconf_full();
    const Eigen::Index p = x.cols();
    const Mat sigma0 = config.sigma_eta0.size() ? config.sigma_eta0
                                                : Mat(Mat::Identity(p, p) * 100.0);
    const Vec mu0 = config.mu_eta0.size() ? config.mu_eta0 : Vec(Vec::Zero(p));
    s.a_eta = s.sigma_eta * (sigma0.llt().solve(mu0) +
                             config.lambda2_base * x.transpose() * data.w());
    return s;
}

double stage2_objective(const Stage2State& trial, const Stage1State& state1,
                        const ConfoundingData& data, const Stage2Config& config,
                        double lambda2, double alpha) {
    const Stage2Work w =
        stage2_work(state1, data, config, trial.sigma_eta, trial.lambda2_base);
    const Eigen::Index p = w.x.cols();
    const Mat xtx = w.x.transpose() * w.x;
    const double loss = 0.5 * (trial.sigma_eta_q * xtx).trace() +
                        0.5 * trial.a_eta.dot(xtx * trial.a_eta) -
                        trial.a_eta.dot(w.x.transpose() * w.b_vec);
    const Vec xq = trial.a_eta - w.mu0;
    const Vec yq = xq - 2.0 * w.shift;
    const double log_det_q =
        2.0 * Mat(trial.sigma_eta_q.llt().matrixL()).diagonal().array().log().sum();
    const double log_det_0 =
        2.0 * Mat(w.sigma0.llt().matrixL()).diagonal().array().log().sum();
    double dv;
    if (std::abs(alpha - 1.0) < kKlAlphaTol) {
        dv = 0.5 * (log_det_0 - log_det_q + (w.sigma0_inv * trial.sigma_eta_q).trace() -
                    static_cast<double>(p) + xq.dot(w.sigma0_inv * yq));
    } else {
        const Mat wm = alpha * w.sigma0 + (1.0 - alpha) * trial.sigma_eta_q;
        Eigen::LLT<Mat> llt(wm);
        if (llt.info() != Eigen::Success)
            throw std::domain_error("stage2_objective: W not SPD");
        const double log_det_w =
            2.0 * Mat(llt.matrixL()).diagonal().array().log().sum();
        dv = alpha * log_det_0 / (2.0 * (alpha - 1.0)) - 0.5 * log_det_q +
             log_det_w / (2.0 * (1.0 - alpha)) + 0.5 * alpha * xq.dot(llt.solve(yq));
    }
    return lambda2 * loss + dv;
}

Stage2State stage2_fit(const Stage1State& state1, const ConfoundingData& data,
                       const Stage2Config& config, double lambda2, double alpha,
                       const StoppingRule& stop) {
    Stage2State init = stage2_closed_form(state1, data, config);
    const Stage2Work w =
        stage2_work(state1, data, config, init.sigma_eta, init.lambda2_base);
    const Eigen::Index p = w.x.cols();
    const Mat xtx = w.x.transpose() * w.x;
    const Vec xb = w.x.transpose() * w.b_vec;
    const bool kl = std::abs(alpha - 1.0) < kKlAlphaTol;

    auto fg = [&](const Vec& params, Vec& g) {
        const Vec a = params.head(p);
        const Mat c = unvech(params.tail(tri(p)), p);
        const Mat sigma_q = c * c.transpose();
        const Vec xq = a - w.mu0;
        const Vec yq = xq - 2.0 * w.shift;
        const double log_det_q = 2.0 * c.diagonal().array().log().sum();
        double value = lambda2 * (0.5 * (sigma_q * xtx).trace() +
                                  0.5 * a.dot(xtx * a) - a.dot(xb));
        Vec d_a = lambda2 * (xtx * a - xb);
        Mat g_sigma = 0.5 * lambda2 * xtx;
        if (kl) {
            const double log_det_0 = 2.0 * Mat(w.sigma0.llt().matrixL())
                                               .diagonal()
                                               .array()
                                               .log()
                                               .sum();
            value += 0.5 * (log_det_0 - log_det_q +
                            (w.sigma0_inv * sigma_q).trace() -
                            static_cast<double>(p) + xq.dot(w.sigma0_inv * yq));
            d_a += w.sigma0_inv * (xq - w.shift);
            g_sigma += 0.5 * (w.sigma0_inv - sigma_q.llt().solve(Mat::Identity(p, p)));
        } else {
            const Mat wm = alpha * w.sigma0 + (1.0 - alpha) * sigma_q;
            Eigen::LLT<Mat> llt(wm);
            if (llt.info() != Eigen::Success)
                throw std::domain_error("stage2_fit: W not SPD");
            const Mat w_inv = llt.solve(Mat::Identity(p, p));
            const double log_det_w =
                2.0 * Mat(llt.matrixL()).diagonal().array().log().sum();
            const double log_det_0 = 2.0 * Mat(w.sigma0.llt().matrixL())
                                               .diagonal()
                                               .array()
                                               .log()
                                               .sum();
            value += alpha * log_det_0 / (2.0 * (alpha - 1.0)) - 0.5 * log_det_q +
                     log_det_w / (2.0 * (1.0 - alpha)) +
                     0.5 * alpha * xq.dot(w_inv * yq);
            d_a += alpha * (w_inv * (xq - w.shift));
            const Vec wx = w_inv * xq, wy = w_inv * yq;
            g_sigma += 0.5 * (w_inv - sigma_q.llt().solve(Mat::Identity(p, p))) -
                       0.25 * alpha * (1.0 - alpha) *
                           (wx * wy.transpose() + wy * wx.transpose());
        }
        g.resize(p + tri(p));
        g.head(p) = d_a;
        g.tail(tri(p)) = cholesky_grad_chain(g_sigma, c);
        return value;
    };

    Vec init_params(p + tri(p));
    init_params.head(p) = init.a_eta;
    init_params.tail(tri(p)) =
        vech(chol_or_throw(init.sigma_eta_q, "stage2_fit: init covariance not SPD"));
    const SolveReport report = bfgs_minimize(fg, init_params, stop);
    Stage2State out = init;
    out.a_eta = report.final_params.head(p);
    const Mat c = unvech(report.final_params.tail(tri(p)), p);
    out.sigma_eta_q = c * c.transpose();
    return out;
}

double stage2_divergence_mc(const Stage2State& state2, const Mat& omega_draws,
                            const Stage2Config& config, double alpha) {
    const Eigen::Index p = state2.a_eta.size();
    const Mat sigma0 = config.sigma_eta0.size() ? config.sigma_eta0
                                                : Mat(Mat::Identity(p, p) * 100.0);
    const Vec mu0 = config.mu_eta0.size() ? config.mu_eta0 : Vec(Vec::Zero(p));
    const double log_det_q =
        2.0 * Mat(state2.sigma_eta_q.llt().matrixL()).diagonal().array().log().sum();
    const double log_det_0 =
        2.0 * Mat(sigma0.llt().matrixL()).diagonal().array().log().sum();
    const bool kl = std::abs(alpha - 1.0) < kKlAlphaTol;
    Mat quad_mat;  // matrix of the quadratic form
    double constant;
    if (kl) {
        quad_mat = sigma0.llt().solve(Mat::Identity(p, p));
        constant = 0.5 * (log_det_0 - log_det_q +
                          (quad_mat * state2.sigma_eta_q).trace() -
                          static_cast<double>(p));
    } else {
        const Mat wm = alpha * sigma0 + (1.0 - alpha) * state2.sigma_eta_q;
        Eigen::LLT<Mat> llt(wm);
        if (llt.info() != Eigen::Success)
            throw std::domain_error("stage2_divergence_mc: W not SPD");
        quad_mat = llt.solve(Mat::Identity(p, p));
        const double log_det_w =
            2.0 * Mat(llt.matrixL()).diagonal().array().log().sum();
        constant = alpha * log_det_0 / (2.0 * (alpha - 1.0)) - 0.5 * log_det_q +
                   log_det_w / (2.0 * (1.0 - alpha));
    }
    // Quadratic term averaged over the omega^u draws. The draws matrix holds
    // lambda2_base * Sigma_eta X' omega_s rows already projected to eta space.
    double quad = 0.0;
    for (Eigen::Index s = 0; s < omega_draws.rows(); ++s) {
        const Vec mu_q = state2.a_eta - omega_draws.row(s).transpose();
        const Vec d = mu_q - mu0;
        quad += d.dot(quad_mat * d);
    }
    quad /= static_cast<double>(omega_draws.rows());
    return constant + 0.5 * (kl ? 1.0 : alpha) * quad;
}

Mat sample_d_joint(const SparseGPBlock& block, const Mat& points, int n_draws,
                   Rng& rng) {
    const Eigen::Index n = points.rows(), m = block.m(), p1 = points.cols();
    Mat out(n_draws, n);
    Mat k_cross(n, m), k_self(n, n);
    for (int s = 0; s < n_draws; ++s) {
        const double sigma = block.mu_sigma + std::sqrt(block.v_sigma) * rng.normal();
        Vec ell(p1);
        for (Eigen::Index k = 0; k < p1; ++k)
            ell[k] = block.mu_ell[k] + std::sqrt(block.v_ell[k]) * rng.normal();
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index j = 0; j < m; ++j) {
                double q = 0.0;
                for (Eigen::Index k = 0; k < p1; ++k) {
                    const double d = ell[k] * points(i, k) - block.inducing(j, k);
                    q += d * d;
                }
                k_cross(i, j) = sigma * std::exp(-0.5 * q);
            }
            for (Eigen::Index j = i; j < n; ++j) {
                double q = 0.0;
                for (Eigen::Index k = 0; k < p1; ++k) {
                    const double d = ell[k] * (points(i, k) - points(j, k));
                    q += d * d;
                }
                k_self(i, j) = k_self(j, i) = sigma * sigma * std::exp(-0.5 * q);
            }
        }
        const Mat a = block.k_u_solve(Mat(k_cross.transpose())).transpose();
        const Vec mean = a * block.mu_u;
        Mat cov = k_self - a * k_cross.transpose() + a * block.sigma_u * a.transpose();
        cov = 0.5 * (cov + cov.transpose()).eval();
        const Mat chol = chol_with_jitter(cov, sigma * sigma);
        out.row(s) =
            (mean + chol.triangularView<Eigen::Lower>() * rng.normal_vector(n))
                .transpose();
    }
    return out;
}

Mat sample_omega_unconf(const Stage1State& state, const ConfoundingData& data,
                        int n_draws, Rng& rng) {
    Mat omega = 2.0 * sample_d_joint(state.gp_d, data.x_cont_unconf, n_draws, rng);
    if (data.p2() > 0) {
        const Eigen::Index q = state.mu_delta.size(), p2 = data.p2();
        const Mat chol =
            chol_or_throw(state.sigma_delta, "sample_omega_unconf: Sigma_delta");
        for (int s = 0; s < n_draws; ++s) {
            const Vec delta =
                state.mu_delta + chol.triangularView<Eigen::Lower>() *
                                     rng.normal_vector(q);
            omega.row(s) += (data.x_bin_unconf * Vec(delta.tail(p2) - delta.head(p2)))
                                .transpose();
        }
    }
    return omega;
}

// --- prediction ---------------------------------------------------------------

namespace {

double var_d_star(const SparseGPBlock& block, const Vec& x_star) {
    Mat x(1, x_star.size());
    x.row(0) = x_star.transpose();
    const Vec psi = psi_cross(x, block).row(0).transpose();
    Vec one = Vec::Ones(1);
    const Mat psi1 = psi_quad(x, block, one);
    const Vec ki_mu = block.k_u_solve(block.mu_u);
    const double amp = block.mu_sigma * block.mu_sigma + block.v_sigma;
    return amp + (block.k_u_solve(psi1) *
                  (block.k_u_solve(Mat(block.sigma_u + block.mu_u * block.mu_u.transpose())) -
                   Mat::Identity(block.m(), block.m())))
                     .trace() -
           std::pow(ki_mu.dot(psi), 2);
}

}  // namespace

Prediction predict(const Stage1State& state1, const Stage2State& state2,
                   const ConfoundingData& data, const Vec& x_cont_star,
                   const Vec& x_bin_star, int t_star, int tau_draws, Rng& rng) {
    Prediction out;
    const Eigen::Index p2 = data.p2();
    Mat xs(1, x_cont_star.size());
    xs.row(0) = x_cont_star.transpose();
    const Vec psi_d = psi_cross(xs, state1.gp_d).row(0).transpose();
    const Vec kid_mu = state1.gp_d.k_u_solve(state1.gp_d.mu_u);

    Vec delta_diff = Vec::Zero(p2);
    Mat var_delta_diff = Mat::Zero(p2, p2);
    if (p2 > 0) {
        delta_diff = state1.mu_delta.tail(p2) - state1.mu_delta.head(p2);
        const Mat& sd = state1.sigma_delta;
        var_delta_diff = sd.bottomRightCorner(p2, p2) + sd.topLeftCorner(p2, p2) -
                         sd.bottomLeftCorner(p2, p2) - sd.topRightCorner(p2, p2);
    }

    out.omega_mean = 2.0 * psi_d.dot(kid_mu) +
                     (p2 > 0 ? x_bin_star.dot(delta_diff) : 0.0);
    out.omega_var = 4.0 * var_d_star(state1.gp_d, x_cont_star) +
                    (p2 > 0 ? x_bin_star.dot(var_delta_diff * x_bin_star) : 0.0);

    // tau mean: eta couples back through omega^u.
    Vec x_full(x_cont_star.size() + p2);
    x_full.head(x_cont_star.size()) = x_cont_star;
    if (p2 > 0) x_full.tail(p2) = x_bin_star;
    const Mat x_unconf = data.x_unconf_full();
    const Vec proj =
        state2.lambda2_base * (x_unconf * (state2.sigma_eta * x_full));
    const Mat psi_du = psi_cross(data.x_cont_unconf, state1.gp_d);
    const Vec mean_d_u = psi_du * kid_mu;
    out.tau_mean = 2.0 * psi_d.dot(kid_mu) - 2.0 * proj.dot(mean_d_u) +
                   x_full.dot(state2.a_eta);
    if (p2 > 0)
        out.tau_mean += x_bin_star.dot(delta_diff) -
                        proj.dot(data.x_bin_unconf * delta_diff);

    // tau draws: joint d at (x*, X^u), then delta, then eta | phi.
    if (tau_draws > 0) {
        Mat pts(1 + data.n2(), x_cont_star.size());
        pts.row(0) = x_cont_star.transpose();
        pts.bottomRows(data.n2()) = data.x_cont_unconf;
        const Mat d_draws = sample_d_joint(state1.gp_d, pts, tau_draws, rng);
        const Mat chol_q = chol_with_jitter(state2.sigma_eta_q, 1.0);
        Mat chol_delta;
        if (p2 > 0)
            chol_delta = chol_or_throw(state1.sigma_delta, "predict: Sigma_delta");
        out.tau_draws.resize(tau_draws);
        for (int s = 0; s < tau_draws; ++s) {
            const double d_star = d_draws(s, 0);
            Vec omega_u = 2.0 * d_draws.row(s).tail(data.n2()).transpose();
            Vec dd = delta_diff;
            double delta_term = 0.0;
            if (p2 > 0) {
                const Vec delta =
                    state1.mu_delta + chol_delta.triangularView<Eigen::Lower>() *
                                          rng.normal_vector(2 * p2);
                dd = delta.tail(p2) - delta.head(p2);
                omega_u += data.x_bin_unconf * dd;
                delta_term = x_bin_star.dot(dd);
            }
            const Vec mu_eta =
                state2.a_eta - state2.lambda2_base *
                                   (state2.sigma_eta *
                                    (x_unconf.transpose() * omega_u));
            const Vec eta = mu_eta + chol_q.triangularView<Eigen::Lower>() *
                                         rng.normal_vector(state2.a_eta.size());
            out.tau_draws[s] = 2.0 * d_star + delta_term + x_full.dot(eta);
        }
    }

    // z* prediction.
    if (!(state1.a_q > 1.0))
        throw std::domain_error("predict: z* variance undefined for a_q <= 1");
    const Vec psi_a = psi_cross(xs, state1.gp_a).row(0).transpose();
    const Vec kia_mu = state1.gp_a.k_u_solve(state1.gp_a.mu_u);
    Vec design_star = Vec::Zero(2 * p2);
    if (p2 > 0) {
        design_star.head(p2) = (1.0 - t_star) * x_bin_star;
        design_star.tail(p2) = static_cast<double>(t_star) * x_bin_star;
    }
    out.z_mean = psi_a.dot(kia_mu) + (2.0 * t_star - 1.0) * psi_d.dot(kid_mu) +
                 (p2 > 0 ? design_star.dot(state1.mu_delta) : 0.0);
    Vec one = Vec::Ones(1);
    auto z_var_block = [&](const SparseGPBlock& block, const Vec& psi) {
        const Mat psi1 = psi_quad(xs, block, one);
        const Vec ki_mu = block.k_u_solve(block.mu_u);
        const double amp = block.mu_sigma * block.mu_sigma + block.v_sigma;
        const Mat ki_sig = block.k_u_solve(block.sigma_u);
        return (block.k_u_solve(psi1) *
                (ki_sig - Mat::Identity(block.m(), block.m())))
                   .trace() +
               ki_mu.dot((psi1 - psi * psi.transpose()) * block.k_u_solve(block.mu_u)) +
               amp;
    };
    out.z_var = state1.b_q / (state1.a_q - 1.0) + z_var_block(state1.gp_a, psi_a) +
                z_var_block(state1.gp_d, psi_d) +
                (p2 > 0 ? design_star.dot(state1.sigma_delta * design_star) : 0.0);
    return out;
}

// --- simulation and study --------------------------------------------------------

ConfoundingData simulate_kallus(std::uint64_t seed, int n1, int n2) {
    Rng rng(seed);
    ConfoundingData data;
    data.x_cont_conf.resize(n1, 1);
    data.x_bin_conf.resize(n1, 0);
    data.t_conf.resize(n1);
    data.y_conf.resize(n1);
    auto outcome = [&](double t, double x, double u) {
        return 1.0 + t + x + 2.0 * t * x + 0.5 * x * x + 0.75 * t * x * x + u +
               0.5 * rng.normal();
    };
    for (int i = 0; i < n1; ++i) {
        const int t = rng.bernoulli(0.5);
        const double x = rng.normal();
        const double cov = t - 0.5;
        const double u = cov * x + std::sqrt(1.0 - cov * cov) * rng.normal();
        data.t_conf[i] = t;
        data.x_cont_conf(i, 0) = x;
        data.y_conf[i] = outcome(t, x, u);
    }
    data.x_cont_unconf.resize(n2, 1);
    data.x_bin_unconf.resize(n2, 0);
    data.t_unconf.resize(n2);
    data.y_unconf.resize(n2);
    for (int j = 0; j < n2; ++j) {
        const int t = rng.bernoulli(0.5);
        const double x = rng.uniform(-1.0, 1.0);
        const double u = rng.normal();
        data.t_unconf[j] = t;
        data.x_cont_unconf(j, 0) = x;
        data.y_unconf[j] = outcome(t, x, u);
    }
    data.propensity = 0.5;
    return data;
}

Truth kallus_truth() {
    Truth t;
    t.tau = [](double x) { return 1.0 + 2.0 * x + 0.75 * x * x; };
    t.omega = [](double x) { return 1.0 + 3.0 * x + 0.75 * x * x; };
    return t;
}

StudyOutput run_gp_study(const StudyConfig& config) {
    const std::size_t n_alpha = config.alphas.size();
    const long reps = config.replications;
    const Truth truth = kallus_truth();
    const int grid_n = config.grid_points;
    Vec grid(grid_n);
    for (int i = 0; i < grid_n; ++i)
        grid[i] = config.grid_lo +
                  (config.grid_hi - config.grid_lo) * i / (grid_n - 1.0);

    struct RepResult {
        std::vector<double> lambda1, lambda2, eta_mean, eta_var;
        // per alpha x grid
        Mat omega_hat, omega_var, tau_hat, tau_var;
        bool failed = false;
    };
    std::vector<RepResult> results(reps);

    parallel_for(reps, config.threads, [&](long rep) {
        RepResult& out = results[rep];
        try {
            Rng data_rng = make_stream(config.seed, rep, 0);
            const ConfoundingData data =
                simulate_kallus(data_rng.next_u64(), config.n1, config.n2);
            Stage1State kld_state = make_stage1_state(data, config.stage1);
            fit_stage1_kld(kld_state, data, config.stage1);

            // lambda2^1 from the dispersion of the plug-in residuals.
            const Mat x = data.x_unconf_full();
            const Vec w = data.w();
            const Eigen::Index p = x.cols();
            const Vec e_omega = expected_omega_unconf(kld_state, data);
            const Vec eta_hat =
                (x.transpose() * x).llt().solve(x.transpose() * (w - e_omega));
            const Vec resid = w - e_omega - x * eta_hat;
            Stage2Config cfg2;
            cfg2.lambda2_base = dispersion_learning_rate(
                resid, static_cast<int>(data.n2()), static_cast<int>(p));

            const Stage2State s2_kld = stage2_closed_form(kld_state, data, cfg2);
            const double div1_kl = stage1_divergence(kld_state, 1.0);

            Rng draw_rng = make_stream(config.seed, rep, 1);
            const Mat omega_draws_kld =
                sample_omega_unconf(kld_state, data, config.omega_draws, draw_rng);
            // project draws once: rows become lambda2 * Sigma_eta X' omega_s
            auto project = [&](const Mat& draws, const Stage2State& s2) {
                Mat proj(draws.rows(), p);
                for (Eigen::Index s = 0; s < draws.rows(); ++s)
                    proj.row(s) = (s2.lambda2_base *
                                   (s2.sigma_eta *
                                    (x.transpose() * draws.row(s).transpose())))
                                      .transpose();
                return proj;
            };
            const Mat proj_kld = project(omega_draws_kld, s2_kld);
            const double div2_kl = stage2_divergence_mc(s2_kld, proj_kld, cfg2, 1.0);

            out.omega_hat.resize(n_alpha, grid_n);
            out.omega_var.resize(n_alpha, grid_n);
            out.tau_hat.resize(n_alpha, grid_n);
            out.tau_var.resize(n_alpha, grid_n);
            for (std::size_t ai = 0; ai < n_alpha; ++ai) {
                const double alpha = config.alphas[ai];
                const bool proxy = std::abs(alpha - 1.0) < config.kld_proxy_tol;
                Stage1State state = kld_state;
                Stage2State s2 = s2_kld;
                double l1 = 1.0, l2 = cfg2.lambda2_base;
                Mat omega_draws = omega_draws_kld;
                if (!proxy) {
                    l1 = stage1_divergence(kld_state, alpha) / div1_kl;
                    l2 = stage2_divergence_mc(s2_kld, proj_kld, cfg2, alpha) /
                         div2_kl * cfg2.lambda2_base;
                    fit_stage1_alpha(state, data, alpha, l1);
                    s2 = stage2_fit(state, data, cfg2, l2, alpha);
                    Rng alpha_rng = make_stream(config.seed, rep, 10 + ai);
                    omega_draws =
                        sample_omega_unconf(state, data, config.omega_draws, alpha_rng);
                }
                out.lambda1.push_back(l1);
                out.lambda2.push_back(l2);

                // eta posterior mean and marginal variance (p == 1 study).
                const Vec e_omega_a = expected_omega_unconf(state, data);
                const Vec eta_mean =
                    s2.a_eta - s2.lambda2_base *
                                   (s2.sigma_eta * (x.transpose() * e_omega_a));
                Vec proj_x(omega_draws.rows());
                for (Eigen::Index s = 0; s < omega_draws.rows(); ++s)
                    proj_x[s] = (s2.lambda2_base *
                                 (s2.sigma_eta *
                                  (x.transpose() * omega_draws.row(s).transpose())))(0);
                const double mean_proj = proj_x.mean();
                const double var_proj =
                    (proj_x.array() - mean_proj).square().sum() /
                    std::max<double>(1.0, proj_x.size() - 1.0);
                out.eta_mean.push_back(eta_mean[0]);
                out.eta_var.push_back(s2.sigma_eta_q(0, 0) + var_proj);

                Rng tau_rng = make_stream(config.seed, rep, 100 + ai);
                for (int gi = 0; gi < grid_n; ++gi) {
                    Vec x_star(1);
                    x_star[0] = grid[gi];
                    const Prediction pred = predict(state, s2, data, x_star, Vec(), 1,
                                                    config.tau_draws, tau_rng);
                    out.omega_hat(ai, gi) = pred.omega_mean;
                    out.omega_var(ai, gi) = pred.omega_var;
                    const double tau_mean = pred.tau_mean;
                    const double tv =
                        (pred.tau_draws.array() - pred.tau_draws.mean())
                            .square()
                            .sum() /
                        std::max<double>(1.0, pred.tau_draws.size() - 1.0);
                    out.tau_hat(ai, gi) = tau_mean;
                    out.tau_var(ai, gi) = tv;
                }
            }
        } catch (const std::exception&) {
            out.failed = true;
        }
    });

    long failures = 0;
    for (const auto& r : results) failures += r.failed ? 1 : 0;

    StudyOutput output;
    output.table.columns = {"alpha",       "lambda1_mean", "lambda1_sd",
                            "lambda2_mean", "lambda2_sd",  "eta_mean",
                            "eta_rmse",    "eta_coverage"};
    output.table.seed = config.seed;
    output.table.failures = failures;
    output.grid.columns = {"alpha", "x", "rmse_omega", "rmse_tau", "cover_omega",
                           "cover_tau"};
    output.grid.seed = config.seed;
    output.grid.failures = failures;

    for (std::size_t ai = 0; ai < n_alpha; ++ai) {
        double l1_sum = 0, l1_sq = 0, l2_sum = 0, l2_sq = 0;
        double eta_sum = 0, eta_sq = 0, cover = 0;
        long n_ok = 0;
        for (const auto& r : results) {
            if (r.failed) continue;
            ++n_ok;
            l1_sum += r.lambda1[ai];
            l1_sq += r.lambda1[ai] * r.lambda1[ai];
            l2_sum += r.lambda2[ai];
            l2_sq += r.lambda2[ai] * r.lambda2[ai];
            eta_sum += r.eta_mean[ai];
            eta_sq += (r.eta_mean[ai] + 1.0) * (r.eta_mean[ai] + 1.0);
            cover += std::abs(-1.0 - r.eta_mean[ai]) <=
                             kZ975 * std::sqrt(r.eta_var[ai])
                         ? 1.0
                         : 0.0;
        }
        const double n = static_cast<double>(n_ok);
        auto sd = [n](double sum, double sq) {
            return n > 1 ? std::sqrt(std::max(0.0, (sq - sum * sum / n) / (n - 1)))
                         : 0.0;
        };
        output.table.add_row({config.alphas[ai], l1_sum / n, sd(l1_sum, l1_sq),
                              l2_sum / n, sd(l2_sum, l2_sq), eta_sum / n,
                              std::sqrt(eta_sq / n), cover / n});
        for (int gi = 0; gi < grid_n; ++gi) {
            double se_omega = 0, se_tau = 0, cov_omega = 0, cov_tau = 0;
            for (const auto& r : results) {
                if (r.failed) continue;
                const double to = truth.omega(grid[gi]), tt = truth.tau(grid[gi]);
                se_omega += std::pow(r.omega_hat(ai, gi) - to, 2);
                se_tau += std::pow(r.tau_hat(ai, gi) - tt, 2);
                cov_omega += std::abs(to - r.omega_hat(ai, gi)) <=
                                     kZ975 * std::sqrt(r.omega_var(ai, gi))
                                 ? 1.0
                                 : 0.0;
                cov_tau += std::abs(tt - r.tau_hat(ai, gi)) <=
                                   kZ975 * std::sqrt(r.tau_var(ai, gi))
                               ? 1.0
                               : 0.0;
            }
            output.grid.add_row({config.alphas[ai], grid[gi],
                                 std::sqrt(se_omega / n), std::sqrt(se_tau / n),
                                 cov_omega / n, cov_tau / n});
        }
    }
    return output;
}

// --- STAR ingestion ---------------------------------------------------------------

StarIngest ingest_star_csv(const std::string& path, double gamma, std::uint64_t seed) {
    if (!(gamma > 0.0 && gamma < 1.0))
        throw std::invalid_argument("ingest_star_csv: gamma must be in (0,1)");
    std::ifstream in(path);
    if (!in) throw std::runtime_error("ingest_star_csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line))
        throw std::runtime_error("ingest_star_csv: empty file");
    auto split = [](const std::string& s) {
        std::vector<std::string> out;
        std::stringstream ss(s);
        std::string field;
        while (std::getline(ss, field, ',')) out.push_back(field);
        return out;
    };
    const std::vector<std::string> header = split(line);
    const std::vector<std::string> required = {"listen", "read",      "math",
                                               "small",  "age",       "gender",
                                               "race",   "freelunch", "teacher",
                                               "rural"};
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < header.size(); ++i) index[header[i]] = i;
    for (const auto& col : required)
        if (!index.count(col))
            throw std::runtime_error("ingest_star_csv: missing column " + col);

    struct Row {
        double score, age;
        int small, gender, freelunch, rural;
        long race, teacher;
    };
    std::vector<Row> rows;
    long dropped = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto fields = split(line);
        bool ok = fields.size() >= header.size();
        Row row{};
        if (ok) {
            try {
                const double listen = std::stod(fields[index["listen"]]);
                const double read = std::stod(fields[index["read"]]);
                const double math = std::stod(fields[index["math"]]);
                row.score = listen + read + math;
                row.age = std::stod(fields[index["age"]]);
                row.small = std::stoi(fields[index["small"]]);
                row.gender = std::stoi(fields[index["gender"]]);
                row.freelunch = std::stoi(fields[index["freelunch"]]);
                row.rural = std::stoi(fields[index["rural"]]);
                row.race = std::stol(fields[index["race"]]);
                row.teacher = std::stol(fields[index["teacher"]]);
            } catch (const std::exception&) {
                ok = false;
            }
        }
        if (!ok) {
            ++dropped;
            continue;
        }
        rows.push_back(row);
    }
    if (rows.empty()) throw std::runtime_error("ingest_star_csv: no usable rows");

    // Propensity: overall small-class proportion.
    double prop = 0.0;
    for (const auto& r : rows) prop += r.small;
    prop /= static_cast<double>(rows.size());
    if (!(prop > 0.0 && prop < 1.0))
        throw std::runtime_error("ingest_star_csv: degenerate propensity");

    // Unconfounded sample: random fraction gamma of the rural students.
    std::vector<std::size_t> rural_idx;
    for (std::size_t i = 0; i < rows.size(); ++i)
        if (rows[i].rural) rural_idx.push_back(i);
    Rng rng(seed);
    for (std::size_t i = rural_idx.size(); i > 1; --i)
        std::swap(rural_idx[i - 1],
                  rural_idx[static_cast<std::size_t>(rng.uniform() * i)]);
    const std::size_t n_unconf =
        std::max<std::size_t>(1, static_cast<std::size_t>(gamma * rural_idx.size()));
    std::vector<char> in_unconf(rows.size(), 0);
    for (std::size_t i = 0; i < n_unconf; ++i) in_unconf[rural_idx[i]] = 1;

    // Confounded: T=0 not in the unconfounded sample, plus T=1 students whose
    // outcome is in the lower half among treated rural / urban students.
    auto treated_median = [&](int rural) {
        std::vector<double> s;
        for (const auto& r : rows)
            if (r.small == 1 && r.rural == rural) s.push_back(r.score);
        if (s.empty()) return 0.0;
        std::nth_element(s.begin(), s.begin() + s.size() / 2, s.end());
        return s[s.size() / 2];
    };
    const double med_rural = treated_median(1), med_urban = treated_median(0);
    std::vector<std::size_t> conf_idx, unconf_idx;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (in_unconf[i]) {
            unconf_idx.push_back(i);
            continue;
        }
        const Row& r = rows[i];
        if (r.small == 0)
            conf_idx.push_back(i);
        else if (r.score < (r.rural ? med_rural : med_urban))
            conf_idx.push_back(i);
    }
    if (conf_idx.size() < unconf_idx.size())
        throw std::runtime_error("ingest_star_csv: confounded sample too small");

    // Dummy coding: gender, freelunch directly; race and teacher by level.
    std::vector<long> race_levels, teacher_levels;
    for (const auto& r : rows) {
        race_levels.push_back(r.race);
        teacher_levels.push_back(r.teacher);
    }
    auto uniq = [](std::vector<long>& v) {
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
    };
    uniq(race_levels);
    uniq(teacher_levels);
    const Eigen::Index p2 = 2 + std::max<std::size_t>(race_levels.size(), 1) - 1 +
                            std::max<std::size_t>(teacher_levels.size(), 1) - 1;
    auto fill = [&](const std::vector<std::size_t>& idx, Mat& xc, Mat& xb,
                    Eigen::VectorXi& t, Vec& y) {
        const Eigen::Index n = static_cast<Eigen::Index>(idx.size());
        xc.resize(n, 1);
        xb.resize(n, p2);
        t.resize(n);
        y.resize(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const Row& r = rows[idx[i]];
            xc(i, 0) = r.age;
            Eigen::Index at = 0;
            xb(i, at++) = r.gender;
            xb(i, at++) = r.freelunch;
            for (std::size_t lv = 1; lv < race_levels.size(); ++lv)
                xb(i, at++) = (r.race == race_levels[lv]) ? 1.0 : 0.0;
            for (std::size_t lv = 1; lv < teacher_levels.size(); ++lv)
                xb(i, at++) = (r.teacher == teacher_levels[lv]) ? 1.0 : 0.0;
            t[i] = r.small;
            y[i] = r.score;
        }
    };
    StarIngest out;
    out.rows_dropped = dropped;
    fill(conf_idx, out.data.x_cont_conf, out.data.x_bin_conf, out.data.t_conf,
         out.data.y_conf);
    fill(unconf_idx, out.data.x_cont_unconf, out.data.x_bin_unconf,
         out.data.t_unconf, out.data.y_unconf);
    out.data.propensity = prop;
    out.data.validate();
    return out;
}

}  // namespace occp::gp
