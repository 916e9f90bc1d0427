#include "occp/copula.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "occp/divergence.hpp"
#include "occp/parallel.hpp"
#include "occp/special.hpp"

namespace occp::copula {

namespace {
constexpr double kZ975 = 1.959963984540054;

Mat chol_or_throw(const Mat& m, const char* what) {
    Eigen::LLT<Mat> llt(m);
    if (llt.info() != Eigen::Success) throw std::domain_error(what);
    return llt.matrixL();
}

double clamp_u(double u) { return std::min(1.0 - 1e-10, std::max(1e-10, u)); }

Eigen::Index tri(Eigen::Index d) { return d * (d + 1) / 2; }

}  // namespace

// --- discretization -------------------------------------------------------------

Eigen::Index BinnedMarginal::bin_of(double y) const {
    const double t = to_line(y);
    if (t < lo - 1e-12 || t > lo + width * bins() + 1e-12)
        throw std::out_of_range("BinnedMarginal: observation outside binned range");
    const auto idx = static_cast<Eigen::Index>((t - lo) / width);
    return std::min<Eigen::Index>(std::max<Eigen::Index>(idx, 0), bins() - 1);
}

double BinnedMarginal::to_line(double y) const {
    if (transform == TransformTag::log_positive) {
        if (!(y > 0.0))
            throw std::invalid_argument("BinnedMarginal: log transform needs y > 0");
        return std::log(y);
    }
    return y;
}

void BinnedMarginal::validate() const {
    if (bins() < 2) throw std::invalid_argument("BinnedMarginal: need p >= 2");
    if (counts.sum() != n)
        throw std::invalid_argument("BinnedMarginal: counts do not sum to n");
    double rem = static_cast<double>(n);
    for (Eigen::Index k = 0; k < bins(); ++k) {
        if (counts[k] < 0) throw std::invalid_argument("BinnedMarginal: negative count");
        if (std::abs(cum_remaining[k] - rem) > 1e-9)
            throw std::invalid_argument("BinnedMarginal: N_k inconsistent");
        rem -= counts[k];
    }
}

int default_bins(long n) {
    return static_cast<int>(std::min<long>(n / 2, 400));
}

BinnedMarginal discretize(const Vec& y, int p_bins, TransformTag tag) {
    if (y.size() < 1) throw std::invalid_argument("discretize: empty sample");
    if (p_bins < 2) throw std::invalid_argument("discretize: need p_bins >= 2");
    BinnedMarginal out;
    out.transform = tag;
    out.n = y.size();
    Vec t(y.size());
    for (Eigen::Index i = 0; i < y.size(); ++i) t[i] = out.to_line(y[i]);
    const double lo = t.minCoeff(), hi = t.maxCoeff();
    if (!(hi > lo)) throw std::invalid_argument("discretize: degenerate range");
    out.lo = lo;
    out.width = (hi - lo) / p_bins;
    out.midpoints.resize(p_bins);
    for (int k = 0; k < p_bins; ++k) out.midpoints[k] = lo + (k + 0.5) * out.width;
    out.counts = Eigen::VectorXi::Zero(p_bins);
    for (Eigen::Index i = 0; i < t.size(); ++i) {
        auto idx = static_cast<Eigen::Index>((t[i] - lo) / out.width);
        idx = std::min<Eigen::Index>(std::max<Eigen::Index>(idx, 0), p_bins - 1);
        out.counts[idx] += 1;
    }
    out.cum_remaining.resize(p_bins);
    out.kappa.resize(p_bins);
    double rem = static_cast<double>(out.n);
    for (int k = 0; k < p_bins; ++k) {
        out.cum_remaining[k] = rem;
        out.kappa[k] = out.counts[k] - 0.5 * rem;
        rem -= out.counts[k];
    }
    out.validate();
    return out;
}

Vec stick_breaking_probs(const Vec& g) {
    const Eigen::Index p = g.size() + 1;
    Vec probs(p);
    double remaining = 1.0;
    for (Eigen::Index k = 0; k + 1 < p; ++k) {
        const double s = sigmoid(g[k]);
        probs[k] = s * remaining;
        remaining -= probs[k];
        if (remaining < 0.0) remaining = 0.0;
    }
    probs[p - 1] = remaining;
    return probs;
}

double pg_mean(double b, double c) {
    if (!(b > 0.0)) throw std::invalid_argument("pg_mean: b must be > 0");
    c = std::abs(c);
    if (c < 1e-4) return 0.25 * b - b * c * c / 48.0;
    return 0.5 * b / c * std::tanh(0.5 * c);
}

double pg_mean_dc(double b, double c) {
    const double s = (c < 0.0) ? -1.0 : 1.0;
    c = std::abs(c);
    if (c < 1e-4) return s * (-b * c / 24.0);
    const double sech = 1.0 / std::cosh(0.5 * c);
    return s * (0.5 * b / c) * (0.5 * sech * sech - std::tanh(0.5 * c) / c);
}

// --- marginal state --------------------------------------------------------------

MarginalState make_marginal_state(const BinnedMarginal& data,
                                  const MarginalConfig& config) {
    data.validate();
    MarginalState state;
    Mat mids(data.bins(), 1);
    mids.col(0) = data.midpoints;
    state.gp = gp::make_gp_block(mids, config.m_inducing, config.jitter,
                                 config.mu_ell0, config.v_ell0, config.v_sigma0);
    state.gp.mu_ell[0] = 1.0;  // symmetry-breaking start; prior mean stays at 0
    state.gp.v_ell[0] = 1e-2;
    state.mu_beta = Vec::Zero(3);
    state.sigma_beta = Mat::Identity(3, 3);
    state.v_beta0 = config.v_beta0;
    const Eigen::Index pm1 = data.bins() - 1;
    state.basis.resize(pm1, 3);
    for (Eigen::Index k = 0; k < pm1; ++k) {
        const double x = data.midpoints[k];
        state.basis(k, 0) = x;
        state.basis(k, 1) = x * x;
        state.basis(k, 2) = x * x * x;
    }
    state.pg_tilt = Vec::Ones(pm1);
    return state;
}

namespace {

Mat latent_inputs(const BinnedMarginal& data) {
    Mat x(data.bins() - 1, 1);
    x.col(0) = data.midpoints.head(data.bins() - 1);
    return x;
}

struct MarginalWork {
    Mat x;       // latent inputs, (p-1) x 1
    Vec kappa;   // p-1
    Vec big_n;   // N_k
    Vec omega;   // E q(omega_k)
    Mat raw_p;   // psi_cross_raw
    Mat raw_q1;  // Omega-weighted psi_quad_raw
    Vec ki_mu;
    Vec mean_d;  // Psi K^-1 mu_v
    Mat a2;      // K^-1 - K^-1 (Sigma_v + mu mu') K^-1
    double amp = 1.0;
    double sum_omega = 0.0;
};

MarginalWork marginal_work(const MarginalState& state, const BinnedMarginal& data) {
    MarginalWork w;
    const Eigen::Index pm1 = data.bins() - 1;
    w.x = latent_inputs(data);
    w.kappa = data.kappa.head(pm1);
    w.big_n = data.cum_remaining.head(pm1);
    w.omega.resize(pm1);
    for (Eigen::Index k = 0; k < pm1; ++k)
        w.omega[k] = pg_mean(w.big_n[k], state.pg_tilt[k]);
    w.sum_omega = w.omega.sum();
    w.raw_p = gp::psi_cross_raw(w.x, state.gp);
    w.raw_q1 = gp::psi_quad_raw(w.x, state.gp, w.omega);
    w.ki_mu = state.gp.k_u_solve(state.gp.mu_u);
    w.mean_d = state.gp.mu_sigma * (w.raw_p * w.ki_mu);
    const Eigen::Index m = state.gp.m();
    const Mat ki = state.gp.k_u_solve(Mat(Mat::Identity(m, m)));
    const Mat mom = state.gp.sigma_u + state.gp.mu_u * state.gp.mu_u.transpose();
    w.a2 = ki - state.gp.k_u_solve(Mat(state.gp.k_u_solve(mom).transpose()));
    w.amp = state.gp.mu_sigma * state.gp.mu_sigma + state.gp.v_sigma;
    return w;
}

// Per-bin raw quadratic kernels E[k_v(:,k) k_v(:,k)'], without the amplitude.
std::vector<Mat> quad_rows(const MarginalState& state, const Mat& x) {
    std::vector<Mat> rows(x.rows());
    Vec indicator = Vec::Zero(x.rows());
    for (Eigen::Index k = 0; k < x.rows(); ++k) {
        indicator[k] = 1.0;
        rows[k] = gp::psi_quad_raw(x, state.gp, indicator);
        indicator[k] = 0.0;
    }
    return rows;
}

}  // namespace

Vec expected_g_squared(const MarginalState& state, const BinnedMarginal& data) {
    const MarginalWork w = marginal_work(state, data);
    const Eigen::Index pm1 = data.bins() - 1;
    const std::vector<Mat> rows = quad_rows(state, w.x);
    const Mat beta_mom = state.sigma_beta + state.mu_beta * state.mu_beta.transpose();
    Vec out(pm1);
    for (Eigen::Index k = 0; k < pm1; ++k) {
        const double hk_beta = state.basis.row(k).dot(state.mu_beta);
        out[k] = w.amp * (1.0 - (rows[k] * w.a2).trace()) +
                 2.0 * w.mean_d[k] * hk_beta +
                 state.basis.row(k).dot(beta_mom * state.basis.row(k).transpose());
    }
    return out;
}

double marginal_expected_loss(const MarginalState& state, const BinnedMarginal& data) {
    const MarginalWork w = marginal_work(state, data);
    const Vec h_beta = state.basis * state.mu_beta;
    const Mat beta_mom = state.sigma_beta + state.mu_beta * state.mu_beta.transpose();
    double loss = -w.kappa.dot(w.mean_d) - w.kappa.dot(h_beta) +
                  w.mean_d.dot(w.omega.cwiseProduct(h_beta)) +
                  0.5 * w.amp * w.sum_omega - 0.5 * w.amp * (w.raw_q1 * w.a2).trace();
    loss += 0.5 * (state.basis.transpose() * w.omega.asDiagonal() * state.basis *
                   beta_mom)
                      .trace();
    return loss;
}

double marginal_divergence_gaussian(const MarginalState& state, double alpha) {
    const Eigen::Index m = state.gp.m();
    double dv = renyi_gaussian(
        GaussianDist(state.gp.mu_u,
                     chol_or_throw(state.gp.sigma_u, "marginal divergence: Sigma_v")),
        GaussianDist(Vec::Zero(m), state.gp.k_u_chol), alpha);
    dv += renyi_gaussian(
        GaussianDist(state.mu_beta,
                     chol_or_throw(state.sigma_beta, "marginal divergence: Sigma_b")),
        GaussianDist(Vec::Zero(3),
                     Mat(Mat::Identity(3, 3) * std::sqrt(state.v_beta0))),
        alpha);
    dv += renyi_gaussian(GaussianDist::scalar(state.gp.mu_sigma, state.gp.v_sigma),
                         GaussianDist::scalar(0.0, state.gp.v_sigma0), alpha);
    dv += renyi_gaussian(GaussianDist::scalar(state.gp.mu_ell[0], state.gp.v_ell[0]),
                         GaussianDist::scalar(state.gp.mu_ell0[0], state.gp.v_ell0[0]),
                         alpha);
    return dv;
}

double marginal_divergence_pg(const MarginalState& state, const BinnedMarginal& data) {
    double dv = 0.0;
    for (Eigen::Index k = 0; k + 1 < data.bins(); ++k)
        dv += renyi_polya_gamma(
            {data.cum_remaining[k], std::abs(state.pg_tilt[k])}, 1.0);
    return dv;
}

double marginal_objective(const MarginalState& state, const BinnedMarginal& data,
                          double alpha, double lambda1) {
    return lambda1 * (marginal_expected_loss(state, data) +
                      marginal_divergence_pg(state, data)) +
           marginal_divergence_gaussian(state, alpha);
}

// --- packing and gradient ---------------------------------------------------------

Vec pack_marginal(const MarginalState& state) {
    const Eigen::Index m = state.gp.m();
    const Eigen::Index pm1 = state.pg_tilt.size();
    Vec out(m + tri(m) + 3 + tri(3) + 4 + pm1);
    Eigen::Index at = 0;
    out.segment(at, m) = state.gp.mu_u;
    at += m;
    out.segment(at, tri(m)) =
        vech(chol_or_throw(state.gp.sigma_u, "pack_marginal: Sigma_v"));
    at += tri(m);
    out.segment(at, 3) = state.mu_beta;
    at += 3;
    out.segment(at, tri(3)) =
        vech(chol_or_throw(state.sigma_beta, "pack_marginal: Sigma_b"));
    at += tri(3);
    out[at++] = state.gp.mu_sigma;
    out[at++] = std::log(state.gp.v_sigma);
    out[at++] = state.gp.mu_ell[0];
    out[at++] = std::log(state.gp.v_ell[0]);
    out.segment(at, pm1) = state.pg_tilt;
    return out;
}

void unpack_marginal(const Vec& params, MarginalState& state) {
    const Eigen::Index m = state.gp.m();
    const Eigen::Index pm1 = state.pg_tilt.size();
    Eigen::Index at = 0;
    state.gp.mu_u = params.segment(at, m);
    at += m;
    {
        const Mat c = unvech(params.segment(at, tri(m)), m);
        state.gp.sigma_u = c * c.transpose();
        at += tri(m);
    }
    state.mu_beta = params.segment(at, 3);
    at += 3;
    {
        const Mat c = unvech(params.segment(at, tri(3)), 3);
        state.sigma_beta = c * c.transpose();
        at += tri(3);
    }
    state.gp.mu_sigma = params[at++];
    state.gp.v_sigma = std::exp(params[at++]);
    state.gp.mu_ell[0] = params[at++];
    state.gp.v_ell[0] = std::exp(params[at++]);
    state.pg_tilt = params.segment(at, pm1);
}

double marginal_objective_grad(const MarginalState& state, const BinnedMarginal& data,
                               double alpha, double lambda1, Vec* grad) {
    const MarginalWork w = marginal_work(state, data);
    const Eigen::Index m = state.gp.m();
    const Eigen::Index pm1 = data.bins() - 1;
    const Vec h_beta = state.basis * state.mu_beta;
    const Mat beta_mom = state.sigma_beta + state.mu_beta * state.mu_beta.transpose();

    double loss = -w.kappa.dot(w.mean_d) - w.kappa.dot(h_beta) +
                  w.mean_d.dot(w.omega.cwiseProduct(h_beta)) +
                  0.5 * w.amp * w.sum_omega - 0.5 * w.amp * (w.raw_q1 * w.a2).trace();
    loss += 0.5 * (state.basis.transpose() * w.omega.asDiagonal() * state.basis *
                   beta_mom)
                      .trace();
    double pg_kl = 0.0;
    for (Eigen::Index k = 0; k < pm1; ++k)
        pg_kl += renyi_polya_gamma({w.big_n[k], std::abs(state.pg_tilt[k])}, 1.0);
    const double value =
        lambda1 * (loss + pg_kl) + marginal_divergence_gaussian(state, alpha);
    if (!grad) return value;

    grad->resize(pack_marginal(state).size());
    Eigen::Index at = 0;
    const Vec resid = w.omega.cwiseProduct(h_beta) - w.kappa;  // multiplies E[d]

    // q(v): loss gradient plus divergence.
    {
        Vec d_mu = state.gp.k_u_solve(
            Vec(state.gp.mu_sigma * (w.raw_p.transpose() * resid) +
                w.amp * (w.raw_q1 * w.ki_mu)));
        const Mat g_sigma =
            0.5 * w.amp *
            state.gp.k_u_solve(Mat(state.gp.k_u_solve(w.raw_q1).transpose()));
        const Mat c_v = chol_or_throw(state.gp.sigma_u, "marginal grad: Sigma_v");
        Vec d_vech = cholesky_grad_chain(g_sigma, c_v);
        d_mu *= lambda1;
        d_vech *= lambda1;
        const GaussianGrad gv = renyi_gaussian_grad(
            GaussianDist(state.gp.mu_u, c_v),
            GaussianDist(Vec::Zero(m), state.gp.k_u_chol), alpha);
        d_mu += gv.d_mean;
        d_vech += gv.d_vech_factor;
        grad->segment(at, m) = d_mu;
        at += m;
        grad->segment(at, tri(m)) = d_vech;
        at += tri(m);
    }
    // q(beta).
    {
        Vec d_mu = lambda1 * (state.basis.transpose() *
                              Vec(w.omega.cwiseProduct(Vec(w.mean_d + h_beta)) -
                                  w.kappa));
        const Mat g_sigma = 0.5 * lambda1 *
                            (state.basis.transpose() * w.omega.asDiagonal() *
                             state.basis);
        const Mat c_b = chol_or_throw(state.sigma_beta, "marginal grad: Sigma_b");
        Vec d_vech = cholesky_grad_chain(g_sigma, c_b);
        const GaussianGrad gb = renyi_gaussian_grad(
            GaussianDist(state.mu_beta, c_b),
            GaussianDist(Vec::Zero(3),
                         Mat(Mat::Identity(3, 3) * std::sqrt(state.v_beta0))),
            alpha);
        d_mu += gb.d_mean;
        d_vech += gb.d_vech_factor;
        grad->segment(at, 3) = d_mu;
        at += 3;
        grad->segment(at, tri(3)) = d_vech;
        at += tri(3);
    }
    // q(sigma), q(ell).
    {
        const double bracket = w.sum_omega - (w.raw_q1 * w.a2).trace();
        double d_ms =
            lambda1 * (resid.dot(w.raw_p * w.ki_mu) + state.gp.mu_sigma * bracket);
        double d_vs = lambda1 * 0.5 * bracket;
        const auto gs = [&](double mq, double vq, double m0, double v0) {
            const GaussianGrad g = renyi_gaussian_grad(
                GaussianDist::scalar(mq, vq), GaussianDist::scalar(m0, v0), alpha);
            // d/d vech(C) = d/dc with c = sqrt(v); convert to d/dv = (d/dc)/(2c)
            return std::pair<double, double>(g.d_mean[0],
                                             g.d_vech_factor[0] / (2.0 * std::sqrt(vq)));
        };
        const auto [gsm, gsv] =
            gs(state.gp.mu_sigma, state.gp.v_sigma, 0.0, state.gp.v_sigma0);
        d_ms += gsm;
        d_vs += gsv;
        const Mat dp = gp::psi_cross_raw_dmu(w.x, state.gp, 0);
        const Mat dq = gp::psi_quad_raw_dmu(w.x, state.gp, w.omega, 0);
        const Mat dpv = gp::psi_cross_raw_dv(w.x, state.gp, 0);
        const Mat dqv = gp::psi_quad_raw_dv(w.x, state.gp, w.omega, 0);
        double d_ml = lambda1 * (state.gp.mu_sigma * resid.dot(dp * w.ki_mu) -
                                 0.5 * w.amp * (dq * w.a2).trace());
        double d_vl = lambda1 * (state.gp.mu_sigma * resid.dot(dpv * w.ki_mu) -
                                 0.5 * w.amp * (dqv * w.a2).trace());
        const auto [glm, glv] = gs(state.gp.mu_ell[0], state.gp.v_ell[0],
                                   state.gp.mu_ell0[0], state.gp.v_ell0[0]);
        d_ml += glm;
        d_vl += glv;
        (*grad)[at++] = d_ms;
        (*grad)[at++] = d_vs * state.gp.v_sigma;  // log chain
        (*grad)[at++] = d_ml;
        (*grad)[at++] = d_vl * state.gp.v_ell[0];
    }
    // PG tilts.
    {
        const std::vector<Mat> rows = quad_rows(state, w.x);
        for (Eigen::Index k = 0; k < pm1; ++k) {
            const double d_omega =
                w.mean_d[k] * h_beta[k] + 0.5 * w.amp -
                0.5 * w.amp * (rows[k] * w.a2).trace() +
                0.5 * state.basis.row(k).dot(beta_mom *
                                             state.basis.row(k).transpose());
            const double sgn_c = state.pg_tilt[k] < 0.0 ? -1.0 : 1.0;
            const double d_kl =
                sgn_c * renyi_polya_gamma_grad_tilt(
                            {w.big_n[k], std::abs(state.pg_tilt[k])}, 1.0);
            (*grad)[at++] =
                lambda1 * (d_omega * pg_mean_dc(w.big_n[k], state.pg_tilt[k]) + d_kl);
        }
    }
    return value;
}

// --- CAVI --------------------------------------------------------------------------

void marginal_cavi_sweep(MarginalState& state, const BinnedMarginal& data,
                         const MarginalConfig& config, int sweep_index) {
    const Eigen::Index pm1 = data.bins() - 1;
    const Mat x = latent_inputs(data);
    const Vec kappa = data.kappa.head(pm1);
    const Vec big_n = data.cum_remaining.head(pm1);
    const Mat& h = state.basis;

    for (int pass = 0; pass < std::max(1, config.inner_repeats); ++pass) {
        // q(omega): PG(N_k, sqrt(E g_k^2)).
        const Vec g2 = expected_g_squared(state, data);
        for (Eigen::Index k = 0; k < pm1; ++k)
            state.pg_tilt[k] = std::sqrt(std::max(0.0, g2[k]));
        Vec omega(pm1);
        for (Eigen::Index k = 0; k < pm1; ++k)
            omega[k] = pg_mean(big_n[k], state.pg_tilt[k]);

        // q(beta).
        Mat raw_p = gp::psi_cross_raw(x, state.gp);
        Vec mean_d = state.gp.mu_sigma * (raw_p * state.gp.k_u_solve(state.gp.mu_u));
        {
            const Mat prec = h.transpose() * omega.asDiagonal() * h +
                             Mat::Identity(3, 3) / state.v_beta0;
            Eigen::LLT<Mat> llt(prec);
            state.sigma_beta = llt.solve(Mat::Identity(3, 3));
            state.mu_beta =
                llt.solve(Vec(h.transpose() * Vec(kappa - omega.cwiseProduct(mean_d))));
        }
        // q(v): Sigma_v = K (P1 + K)^-1 K, mu_v = K (P1+K)^-1 Psi'(kappa - Om H b).
        {
            const double amp =
                state.gp.mu_sigma * state.gp.mu_sigma + state.gp.v_sigma;
            const Mat p1 = amp * gp::psi_quad_raw(x, state.gp, omega);
            Eigen::LLT<Mat> llt(Mat(p1 + state.gp.k_u));
            state.gp.sigma_u = state.gp.k_u * llt.solve(state.gp.k_u);
            state.gp.sigma_u =
                0.5 * (state.gp.sigma_u + state.gp.sigma_u.transpose()).eval();
            const Vec target = kappa - omega.cwiseProduct(Vec(h * state.mu_beta));
            state.gp.mu_u = state.gp.k_u *
                            llt.solve(Vec(state.gp.mu_sigma *
                                          (raw_p.transpose() * target)));
        }
        // q(sigma).
        {
            const Mat raw_q1 = gp::psi_quad_raw(x, state.gp, omega);
            const Eigen::Index m = state.gp.m();
            const Mat ki = state.gp.k_u_solve(Mat(Mat::Identity(m, m)));
            const Mat mom =
                state.gp.sigma_u + state.gp.mu_u * state.gp.mu_u.transpose();
            const Mat a2 =
                ki - state.gp.k_u_solve(Mat(state.gp.k_u_solve(mom).transpose()));
            const double bracket = omega.sum() - (raw_q1 * a2).trace();
            state.gp.v_sigma = 1.0 / (bracket + 1.0 / state.gp.v_sigma0);
            const Vec target = kappa - omega.cwiseProduct(Vec(h * state.mu_beta));
            state.gp.mu_sigma =
                state.gp.v_sigma *
                target.dot(raw_p * state.gp.k_u_solve(state.gp.mu_u));
        }
    }

    // Lengthscale: numeric refresh on (mu_ell, log v_ell).
    if (config.lengthscale_every > 0 && sweep_index % config.lengthscale_every == 0) {
        MarginalState trial = state;
        Vec full_grad;
        const Eigen::Index m = state.gp.m();
        const Eigen::Index base = m + tri(m) + 3 + tri(3) + 2;
        auto fg = [&](const Vec& p, Vec& g) {
            trial.gp.mu_ell[0] = p[0];
            trial.gp.v_ell[0] = std::exp(p[1]);
            const double f = marginal_objective_grad(trial, data, 1.0, 1.0, &full_grad);
            g.resize(2);
            g[0] = full_grad[base];
            g[1] = full_grad[base + 1];
            return f;
        };
        Vec p0(2);
        p0 << state.gp.mu_ell[0], std::log(state.gp.v_ell[0]);
        const SolveReport r = bfgs_minimize(
            fg, p0,
            {.max_iterations = config.lengthscale_iters, .rel_tol = 1e-12,
             .patience = 2, .grad_tol = 1e-10});
        state.gp.mu_ell[0] = r.final_params[0];
        state.gp.v_ell[0] = std::exp(r.final_params[1]);
    }
}

SolveReport fit_marginal_kld(MarginalState& state, const BinnedMarginal& data,
                             const MarginalConfig& config) {
    int sweep = 0;
    CoordinateDescentOptions options;
    options.max_sweeps = config.max_sweeps;
    options.rel_tol = config.sweep_rel_tol;
    options.exact_updates = true;
    options.exact_slack = 1e-8;
    std::vector<std::function<void()>> updates{
        [&]() { marginal_cavi_sweep(state, data, config, sweep++); }};
    return coordinate_descent(
        updates, [&]() { return marginal_objective(state, data, 1.0, 1.0); }, options);
}

SolveReport fit_marginal_alpha(MarginalState& state, const BinnedMarginal& data,
                               double alpha, double lambda1, const AdamOptions& adam,
                               const StoppingRule& stop) {
    MarginalState work = state;
    auto fg = [&](const Vec& p, Vec& g) {
        unpack_marginal(p, work);
        return marginal_objective_grad(work, data, alpha, lambda1, &g);
    };
    const SolveReport report = adam_minimize(fg, pack_marginal(state), adam, stop);
    unpack_marginal(report.final_params, state);
    return report;
}

// --- density and u -----------------------------------------------------------------

Vec fitted_probs(const MarginalState& state, const BinnedMarginal& data) {
    const Mat x = latent_inputs(data);
    const Vec g = gp::psi_cross(x, state.gp) * state.gp.k_u_solve(state.gp.mu_u) +
                  state.basis * state.mu_beta;
    return stick_breaking_probs(g);
}

DensityAndU marginal_density_and_u(const MarginalState& state,
                                   const BinnedMarginal& data, const Vec& raw_y) {
    DensityAndU out;
    const Vec probs = fitted_probs(state, data);
    out.density.resize(data.bins());
    for (Eigen::Index k = 0; k < data.bins(); ++k) {
        const double line_density = probs[k] / data.width;
        out.density[k] = (data.transform == TransformTag::log_positive)
                             ? line_density / std::exp(data.midpoints[k])
                             : line_density;
    }
    Vec cum(data.bins());
    double acc = 0.0;
    for (Eigen::Index k = 0; k < data.bins(); ++k) {
        acc += probs[k];
        cum[k] = acc;
    }
    out.u.resize(raw_y.size());
    for (Eigen::Index i = 0; i < raw_y.size(); ++i)
        out.u[i] = cum[data.bin_of(raw_y[i])];
    return out;
}

// --- Gumbel copula -------------------------------------------------------------------

double gumbel_theta(double eta) {
    const double tau = norm_cdf(eta);
    return 1.0 / (1.0 - std::min(tau, 1.0 - 1e-12));
}

namespace {

struct GumbelParts {
    double lx, ly;      // log(-log u), log(-log v)
    double log_a;       // log(x^theta + y^theta)
    double log_s;       // log_a / theta
    double s;
    double dlog_s;      // d log s / d theta
};

GumbelParts gumbel_parts(double u, double v, double theta) {
    GumbelParts p;
    const double x = -std::log(clamp_u(u));
    const double y = -std::log(clamp_u(v));
    p.lx = std::log(x);
    p.ly = std::log(y);
    const double mx = std::max(p.lx, p.ly), mn = std::min(p.lx, p.ly);
    p.log_a = theta * mx + log1p_exp(theta * (mn - mx));
    p.log_s = p.log_a / theta;
    p.s = std::exp(p.log_s);
    // d log A / d theta = softmax-weighted mean of (lx, ly)
    const double wx = std::exp(theta * p.lx - p.log_a);
    const double wy = std::exp(theta * p.ly - p.log_a);
    p.dlog_s = -p.log_a / (theta * theta) + (wx * p.lx + wy * p.ly) / theta;
    return p;
}

}  // namespace

double gumbel_neglog_pdf(double u, double v, double theta) {
    if (!(theta >= 1.0)) throw std::invalid_argument("gumbel: theta must be >= 1");
    const GumbelParts p = gumbel_parts(u, v, theta);
    const double x = std::exp(p.lx), y = std::exp(p.ly);
    const double logc = -p.s + (theta - 1.0) * (p.lx + p.ly) +
                        (1.0 - 2.0 * theta) * p.log_s + std::log(p.s + theta - 1.0) +
                        x + y;
    if (!std::isfinite(logc))
        throw std::runtime_error("gumbel_neglog_pdf: non-finite density");
    return -logc;
}

double gumbel_neglog_pdf_dtheta(double u, double v, double theta) {
    const GumbelParts p = gumbel_parts(u, v, theta);
    const double ds = p.s * p.dlog_s;
    const double dlogc = -ds + (p.lx + p.ly) - 2.0 * p.log_s +
                         (1.0 - 2.0 * theta) * p.dlog_s +
                         (ds + 1.0) / (p.s + theta - 1.0);
    return -dlogc;
}

double gumbel_loss(const Mat& u, double eta) {
    const double theta = gumbel_theta(eta);
    double loss = 0.0;
    for (Eigen::Index i = 0; i < u.rows(); ++i)
        loss += gumbel_neglog_pdf(u(i, 0), u(i, 1), theta);
    return loss;
}

double gumbel_loss_deta(const Mat& u, double eta) {
    const double theta = gumbel_theta(eta);
    double d_theta = 0.0;
    for (Eigen::Index i = 0; i < u.rows(); ++i)
        d_theta += gumbel_neglog_pdf_dtheta(u(i, 0), u(i, 1), theta);
    const double tau = norm_cdf(eta);
    const double phi = std::exp(-0.5 * eta * eta) / std::sqrt(2.0 * M_PI);
    const double dtheta_deta = phi / ((1.0 - tau) * (1.0 - tau));
    return d_theta * dtheta_deta;
}

void gumbel_sample(double theta, Rng& rng, double& u, double& v) {
    // Positive stable frailty (Chambers-Mallows-Stuck with beta = 1).
    const double a = 1.0 / theta;
    double frailty = 1.0;
    if (theta > 1.0 + 1e-12) {
        const double ang = rng.uniform() * M_PI;
        const double w = rng.exponential();
        frailty = std::sin(a * ang) / std::pow(std::sin(ang), 1.0 / a) *
                  std::pow(std::sin((1.0 - a) * ang) / w, (1.0 - a) / a);
    }
    u = std::exp(-std::pow(rng.exponential() / frailty, a));
    v = std::exp(-std::pow(rng.exponential() / frailty, a));
}

// --- stage 2 --------------------------------------------------------------------------

double stage2_divergence(double mu_eta, double marginal_var, double cond_var,
                         double prior_var, double alpha) {
    if (!(cond_var > 0.0) || marginal_var < cond_var - 1e-12)
        throw std::invalid_argument("stage2_divergence: invalid variances");
    const double cross = marginal_var - cond_var;  // Sigma_ex Sigma_x^-1 Sigma_xe
    if (std::abs(alpha - 1.0) < kKlAlphaTol)
        return 0.5 * (std::log(prior_var) - std::log(cond_var) - 1.0 +
                      (mu_eta * mu_eta + marginal_var) / prior_var);
    const double w = alpha * prior_var + (1.0 - alpha) * cond_var;
    if (!(w > 0.0)) throw std::domain_error("stage2_divergence: W <= 0");
    return 0.5 * alpha * (mu_eta * mu_eta + cross) / w +
           alpha * std::log(prior_var) / (2.0 * (alpha - 1.0)) -
           0.5 * std::log(cond_var) + std::log(w) / (2.0 * (1.0 - alpha));
}

CopulaFit stage2_fit_copula(const MarginalState& m1, const MarginalState& m2,
                            const BinnedMarginal& b1, const BinnedMarginal& b2,
                            const Vec& y1, const Vec& y2, double alpha,
                            const CopulaStage2Config& config) {
    if (config.mc_samples < 100)
        throw std::invalid_argument("stage2_fit_copula: need mc_samples >= 100");
    const Eigen::Index n = y1.size();
    if (y2.size() != n)
        throw std::invalid_argument("stage2_fit_copula: sample size mismatch");
    const Eigen::Index m = m1.gp.m();
    const Eigen::Index dim_xi = 2 * (m + 3);
    const int s_draws = config.mc_samples;

    // Whitened xi draws, fixed across optimization steps (common random numbers).
    Rng rng(config.seed);
    Mat eps(s_draws, dim_xi);
    Vec zeta(s_draws);
    for (int s = 0; s < s_draws; ++s) {
        for (Eigen::Index j = 0; j < dim_xi; ++j) eps(s, j) = rng.normal();
        zeta[s] = rng.normal();
    }

    // Precompute per-draw u matrices -> log(-log u) arrays.
    struct MarginalDraw {
        Mat chol_v, chol_b;
        Mat psi;               // Psi_{j,v} (p-1) x M with amplitude
        Mat h;                 // basis
        Eigen::VectorXi bins;  // observation bin indices
        const MarginalState* state;
        const BinnedMarginal* binned;
    };
    auto prep = [](const MarginalState& st, const BinnedMarginal& bn, const Vec& y) {
        MarginalDraw d;
        d.chol_v = chol_or_throw(st.gp.sigma_u, "stage2: Sigma_v");
        d.chol_b = chol_or_throw(st.sigma_beta, "stage2: Sigma_b");
        Mat x(bn.bins() - 1, 1);
        x.col(0) = bn.midpoints.head(bn.bins() - 1);
        d.psi = gp::psi_cross(x, st.gp);
        d.h = st.basis;
        d.bins.resize(y.size());
        for (Eigen::Index i = 0; i < y.size(); ++i)
            d.bins[i] = static_cast<int>(bn.bin_of(y[i]));
        d.state = &st;
        d.binned = &bn;
        return d;
    };
    const MarginalDraw d1 = prep(m1, b1, y1);
    const MarginalDraw d2 = prep(m2, b2, y2);

    Mat lx(s_draws, n), ly(s_draws, n);
    auto draw_u = [&](const MarginalDraw& d, const Vec& eps_v, const Vec& eps_b,
                      Mat& target, int s) {
        const Vec v = d.state->gp.mu_u +
                      d.chol_v.triangularView<Eigen::Lower>() * eps_v;
        const Vec beta = d.state->mu_beta +
                         d.chol_b.triangularView<Eigen::Lower>() * eps_b;
        const Vec g = d.psi * d.state->gp.k_u_solve(v) + d.h * beta;
        const Vec probs = stick_breaking_probs(g);
        Vec cum(probs.size());
        double acc = 0.0;
        for (Eigen::Index k = 0; k < probs.size(); ++k) {
            acc += probs[k];
            cum[k] = acc;
        }
        for (Eigen::Index i = 0; i < target.cols(); ++i) {
            const double u = clamp_u(cum[d.bins[i]]);
            target(s, i) = std::log(-std::log(u));
        }
    };
    for (int s = 0; s < s_draws; ++s) {
        draw_u(d1, eps.row(s).segment(0, m).transpose(),
               eps.row(s).segment(m, 3).transpose(), lx, s);
        draw_u(d2, eps.row(s).segment(m + 3, m).transpose(),
               eps.row(s).segment(m + 3 + m, 3).transpose(), ly, s);
    }

    // Loss of one draw as a function of eta, with derivative.
    auto draw_loss = [&](int s, double eta, double& d_eta) {
        const double tau = std::min(norm_cdf(eta), 1.0 - 1e-12);
        const double theta = 1.0 / (1.0 - tau);
        double loss = 0.0, d_theta = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double lxi = lx(s, i), lyi = ly(s, i);
            const double mx = std::max(lxi, lyi), mn = std::min(lxi, lyi);
            const double log_a = theta * mx + log1p_exp(theta * (mn - mx));
            const double log_s = log_a / theta;
            const double sv = std::exp(log_s);
            const double wx = std::exp(theta * lxi - log_a);
            const double wy = std::exp(theta * lyi - log_a);
            const double dlog_s =
                -log_a / (theta * theta) + (wx * lxi + wy * lyi) / theta;
            const double xv = std::exp(lxi), yv = std::exp(lyi);
            loss -= -sv + (theta - 1.0) * (lxi + lyi) + (1.0 - 2.0 * theta) * log_s +
                    std::log(sv + theta - 1.0) + xv + yv;
            const double ds = sv * dlog_s;
            d_theta -= -ds + (lxi + lyi) - 2.0 * log_s + (1.0 - 2.0 * theta) * dlog_s +
                       (ds + 1.0) / (sv + theta - 1.0);
        }
        const double phi = std::exp(-0.5 * eta * eta) / std::sqrt(2.0 * M_PI);
        d_eta = d_theta * phi / ((1.0 - tau) * (1.0 - tau));
        return loss;
    };

    const double v0 = config.prior_var;
    const bool kl = std::abs(alpha - 1.0) < kKlAlphaTol;
    auto fg = [&](const Vec& p, Vec& g) {
        const double mu = p[0];
        const Vec btil = p.segment(1, dim_xi);
        const double vc = std::exp(p[dim_xi + 1]);
        const double sd_c = std::sqrt(vc);
        double loss = 0.0;
        double g_mu = 0.0, g_lv = 0.0;
        Vec g_b = Vec::Zero(dim_xi);
        for (int s = 0; s < s_draws; ++s) {
            const double eta =
                mu + btil.dot(eps.row(s).transpose()) + sd_c * zeta[s];
            double d_eta;
            loss += draw_loss(s, eta, d_eta);
            g_mu += d_eta;
            g_b += d_eta * eps.row(s).transpose();
            g_lv += d_eta * 0.5 * sd_c * zeta[s];
        }
        const double inv_s = 1.0 / static_cast<double>(s_draws);
        loss *= inv_s;
        g_mu *= inv_s * config.lambda2;
        g_b *= inv_s * config.lambda2;
        g_lv *= inv_s * config.lambda2;

        const double cross = btil.squaredNorm();
        double dv;
        if (kl) {
            dv = 0.5 * (std::log(v0) - std::log(vc) - 1.0 +
                        (mu * mu + vc + cross) / v0);
            g_mu += mu / v0;
            g_b += btil / v0;
            g_lv += 0.5 * (vc / v0 - 1.0);
        } else {
            const double w = alpha * v0 + (1.0 - alpha) * vc;
            if (!(w > 0.0)) throw std::domain_error("stage2 copula: W <= 0");
            dv = 0.5 * alpha * (mu * mu + cross) / w +
                 alpha * std::log(v0) / (2.0 * (alpha - 1.0)) - 0.5 * std::log(vc) +
                 std::log(w) / (2.0 * (1.0 - alpha));
            g_mu += alpha * mu / w;
            g_b += alpha / w * btil;
            const double dv_dvc = -0.5 * alpha * (mu * mu + cross) * (1.0 - alpha) /
                                      (w * w) -
                                  0.5 / vc + 0.5 / w;
            g_lv += dv_dvc * vc;
        }
        g.resize(p.size());
        g[0] = g_mu;
        g.segment(1, dim_xi) = g_b;
        g[dim_xi + 1] = g_lv;
        return config.lambda2 * loss + dv;
    };

    Vec init = Vec::Zero(dim_xi + 2);
    init[dim_xi + 1] = std::log(0.25 * v0);
    const SolveReport report =
        adam_minimize(fg, init, config.adam, config.stop);

    CopulaFit fit;
    fit.mu_eta = report.final_params[0];
    const Vec btil = report.final_params.segment(1, dim_xi);
    fit.cond_var = std::exp(report.final_params[dim_xi + 1]);
    fit.sigma_eta = fit.cond_var + btil.squaredNorm();
    // Map whitened coefficients back: Cov(eta, xi) = L_xi btil per block.
    fit.sigma_eta_xi.resize(dim_xi);
    Eigen::Index at = 0;
    auto unwhiten = [&](const Mat& chol, Eigen::Index len) {
        fit.sigma_eta_xi.segment(at, len) =
            chol.triangularView<Eigen::Lower>() * btil.segment(at, len);
        at += len;
    };
    unwhiten(chol_or_throw(m1.gp.sigma_u, "stage2: Sigma_v1"), m);
    unwhiten(chol_or_throw(m1.sigma_beta, "stage2: Sigma_b1"), 3);
    unwhiten(chol_or_throw(m2.gp.sigma_u, "stage2: Sigma_v2"), m);
    unwhiten(chol_or_throw(m2.sigma_beta, "stage2: Sigma_b2"), 3);
    fit.divergence_kl = stage2_divergence(fit.mu_eta, fit.sigma_eta, fit.cond_var,
                                          v0, 1.0);
    fit.divergence_alpha =
        stage2_divergence(fit.mu_eta, fit.sigma_eta, fit.cond_var, v0, alpha);
    return fit;
}

// --- study ---------------------------------------------------------------------------

namespace {

struct TrueMarginals {
    // Lognormal(1, 1) and Gamma(7, 3) densities.
    static double f1(double y) {
        if (!(y > 0.0)) return 0.0;
        const double z = std::log(y) - 1.0;
        return std::exp(-0.5 * z * z) / (y * std::sqrt(2.0 * M_PI));
    }
    static double f2(double y) {
        if (!(y > 0.0)) return 0.0;
        return std::exp(7.0 * std::log(3.0) + 6.0 * std::log(y) - 3.0 * y -
                        std::lgamma(7.0));
    }
};

// Bivariate t-copula density with one degree of freedom.
double t1_copula_logpdf(double u, double v, double rho) {
    const double x = std::tan(M_PI * (clamp_u(u) - 0.5));
    const double y = std::tan(M_PI * (clamp_u(v) - 0.5));
    const double det = 1.0 - rho * rho;
    const double q = (x * x - 2.0 * rho * x * y + y * y) / det;
    const double log_joint =
        -std::log(2.0 * M_PI) - 0.5 * std::log(det) - 1.5 * std::log1p(q);
    const double log_marg = -std::log(M_PI * (1.0 + x * x)) -
                            std::log(M_PI * (1.0 + y * y));
    return log_joint - log_marg;
}

void simulate_t_copula(double tau, Eigen::Index n, Rng& rng, Vec& y1, Vec& y2) {
    const double rho = std::sin(0.5 * M_PI * tau);
    y1.resize(n);
    y2.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double z1 = rng.normal();
        const double z2 = rho * z1 + std::sqrt(1.0 - rho * rho) * rng.normal();
        double s = rng.normal();
        s = s * s;
        if (s < 1e-300) s = 1e-300;
        const double t1 = z1 / std::sqrt(s), t2 = z2 / std::sqrt(s);
        double u1 = 0.5 + std::atan(t1) / M_PI;
        double u2 = 0.5 + std::atan(t2) / M_PI;
        u1 = std::min(1.0 - 1e-14, std::max(1e-14, u1));
        u2 = std::min(1.0 - 1e-14, std::max(1e-14, u2));
        y1[i] = std::exp(1.0 + norm_quantile(u1));
        y2[i] = gamma_quantile(7.0, 3.0, u2);
    }
}

double marginal_predictive_kl(const Vec& probs, const BinnedMarginal& data,
                              double (*truth)(double)) {
    double kl = 0.0;
    for (Eigen::Index k = 0; k < data.bins(); ++k) {
        if (!(probs[k] > 0.0)) continue;
        const double mid = data.midpoints[k];
        const double y = (data.transform == TransformTag::log_positive)
                             ? std::exp(mid)
                             : mid;
        double f_line = truth(y);
        if (data.transform == TransformTag::log_positive) f_line *= y;
        if (!(f_line > 0.0)) continue;
        kl += probs[k] * (std::log(probs[k] / data.width) - std::log(f_line));
    }
    return kl;
}

struct DensityBands {
    Mat draws;  // band_draws x p, transformed-scale density draws
    Vec lower, upper;
    double coverage = 0.0;  // fraction of bins whose true density is inside
};

DensityBands density_bands(const MarginalState& state, const BinnedMarginal& data,
                           int n_draws, double (*truth)(double), Rng& rng) {
    const Eigen::Index p = data.bins();
    const Eigen::Index pm1 = p - 1;
    const Eigen::Index m = state.gp.m();
    const Mat x = latent_inputs(data);

    // Standardized conditional residual factor at ell = E[ell]; ell's posterior
    // variance is tiny, so only the mean kernel redraws per sample.
    Mat kbar(pm1, m), kbar_self(pm1, pm1);
    const double ell0 = state.gp.mu_ell[0];
    for (Eigen::Index i = 0; i < pm1; ++i) {
        for (Eigen::Index j = 0; j < m; ++j) {
            const double d = ell0 * x(i, 0) - state.gp.inducing(j, 0);
            kbar(i, j) = std::exp(-0.5 * d * d);
        }
        for (Eigen::Index j = i; j < pm1; ++j) {
            const double d = ell0 * (x(i, 0) - x(j, 0));
            kbar_self(i, j) = kbar_self(j, i) = std::exp(-0.5 * d * d);
        }
    }
    Mat cond = kbar_self - kbar * state.gp.k_u_solve(Mat(kbar.transpose()));
    cond.diagonal().array() += 1e-9;
    Eigen::LLT<Mat> cond_llt(cond);
    if (cond_llt.info() != Eigen::Success)
        throw std::runtime_error("density_bands: conditional covariance not SPD");
    const Mat cond_chol = cond_llt.matrixL();

    const Mat chol_v = chol_or_throw(state.gp.sigma_u, "density_bands: Sigma_v");
    const Mat chol_b = chol_or_throw(state.sigma_beta, "density_bands: Sigma_b");

    DensityBands out;
    out.draws.resize(n_draws, p);
    Mat kcross(pm1, m);
    for (int s = 0; s < n_draws; ++s) {
        const double sig =
            state.gp.mu_sigma + std::sqrt(state.gp.v_sigma) * rng.normal();
        const double ell =
            state.gp.mu_ell[0] + std::sqrt(state.gp.v_ell[0]) * rng.normal();
        const Vec v = state.gp.mu_u + chol_v.triangularView<Eigen::Lower>() *
                                          rng.normal_vector(m);
        const Vec beta = state.mu_beta + chol_b.triangularView<Eigen::Lower>() *
                                             rng.normal_vector(3);
        for (Eigen::Index i = 0; i < pm1; ++i)
            for (Eigen::Index j = 0; j < m; ++j) {
                const double d = ell * x(i, 0) - state.gp.inducing(j, 0);
                kcross(i, j) = sig * std::exp(-0.5 * d * d);
            }
        const Vec resid =
            cond_chol.triangularView<Eigen::Lower>() * rng.normal_vector(pm1);
        const Vec g =
            kcross * state.gp.k_u_solve(v) + sig * resid + state.basis * beta;
        const Vec probs = stick_breaking_probs(g);
        out.draws.row(s) = (probs / data.width).transpose();
    }
    out.lower.resize(p);
    out.upper.resize(p);
    std::vector<double> col(n_draws);
    long covered = 0;
    for (Eigen::Index k = 0; k < p; ++k) {
        for (int s = 0; s < n_draws; ++s) col[s] = out.draws(s, k);
        std::sort(col.begin(), col.end());
        const auto lo_idx = static_cast<std::size_t>(0.025 * (n_draws - 1));
        const auto hi_idx = static_cast<std::size_t>(std::ceil(0.975 * (n_draws - 1)));
        out.lower[k] = col[lo_idx];
        out.upper[k] = col[hi_idx];
        const double mid = data.midpoints[k];
        const double y = (data.transform == TransformTag::log_positive)
                             ? std::exp(mid)
                             : mid;
        double f_line = truth(y);
        if (data.transform == TransformTag::log_positive) f_line *= y;
        if (f_line >= out.lower[k] && f_line <= out.upper[k]) ++covered;
    }
    out.coverage = static_cast<double>(covered) / static_cast<double>(p);
    return out;
}

double copula_predictive_kl(double mu_eta, double rho_true, long n_draws, Rng& rng) {
    const double theta = gumbel_theta(mu_eta);
    double kl = 0.0;
    for (long s = 0; s < n_draws; ++s) {
        double u, v;
        gumbel_sample(theta, rng, u, v);
        kl += -gumbel_neglog_pdf(u, v, theta) - t1_copula_logpdf(u, v, rho_true);
    }
    return kl / static_cast<double>(n_draws);
}

}  // namespace

StudyOutput run_copula_study(const StudyConfig& config) {
    const std::size_t n_alpha = config.alphas.size();
    const long reps = config.replications;
    const double eta_true = norm_quantile(config.kendall_tau);
    const double rho_true = std::sin(0.5 * M_PI * config.kendall_tau);

    struct RepResult {
        std::vector<double> mu_eta, var_eta, kl_cop, kl_f1, kl_f2, cover_f1, cover_f2;
        // marginal_fit rows captured for the first replication only
        std::vector<std::vector<Cell>> fit_rows;
        bool failed = false;
    };
    std::vector<RepResult> results(reps);

    parallel_for(reps, config.threads, [&](long rep) {
        RepResult& out = results[rep];
        try {
            Rng data_rng = make_stream(config.seed, rep, 0);
            Vec y1, y2;
            simulate_t_copula(config.kendall_tau, config.n, data_rng, y1, y2);
            const int p_bins = default_bins(config.n);
            const BinnedMarginal b1 =
                discretize(y1, p_bins, TransformTag::log_positive);
            const BinnedMarginal b2 =
                discretize(y2, p_bins, TransformTag::log_positive);

            MarginalState kld1 = make_marginal_state(b1, config.marginal);
            MarginalState kld2 = make_marginal_state(b2, config.marginal);
            fit_marginal_kld(kld1, b1, config.marginal);
            fit_marginal_kld(kld2, b2, config.marginal);
            const double div_kl = marginal_divergence_gaussian(kld1, 1.0) +
                                  marginal_divergence_gaussian(kld2, 1.0);

            // Stage-2 KLD fit on the KLD marginals anchors the lambda2 ratio.
            CopulaStage2Config s2cfg = config.stage2;
            s2cfg.seed = make_stream(config.seed, rep, 1).next_u64();
            s2cfg.lambda2 = 1.0;
            const CopulaFit fit_kld =
                stage2_fit_copula(kld1, kld2, b1, b2, y1, y2, 1.0, s2cfg);

            for (std::size_t ai = 0; ai < n_alpha; ++ai) {
                const double alpha = config.alphas[ai];
                const bool proxy = std::abs(alpha - 1.0) < config.kld_proxy_tol;
                MarginalState s1 = kld1, s2m = kld2;
                double lambda1 = 1.0, lambda2 = 1.0;
                CopulaFit fit = fit_kld;
                if (!proxy) {
                    lambda1 = (marginal_divergence_gaussian(kld1, alpha) +
                               marginal_divergence_gaussian(kld2, alpha)) /
                              div_kl;
                    lambda2 = stage2_divergence(fit_kld.mu_eta, fit_kld.sigma_eta,
                                                fit_kld.cond_var, s2cfg.prior_var,
                                                alpha) /
                              fit_kld.divergence_kl;
                    fit_marginal_alpha(s1, b1, alpha, lambda1);
                    fit_marginal_alpha(s2m, b2, alpha, lambda1);
                    CopulaStage2Config cfg_alpha = s2cfg;
                    cfg_alpha.lambda2 = lambda2;
                    fit = stage2_fit_copula(s1, s2m, b1, b2, y1, y2, alpha, cfg_alpha);
                }
                out.mu_eta.push_back(fit.mu_eta);
                out.var_eta.push_back(fit.sigma_eta);

                const Vec probs1 = fitted_probs(s1, b1);
                const Vec probs2 = fitted_probs(s2m, b2);
                out.kl_f1.push_back(
                    marginal_predictive_kl(probs1, b1, &TrueMarginals::f1));
                out.kl_f2.push_back(
                    marginal_predictive_kl(probs2, b2, &TrueMarginals::f2));
                Rng kl_rng = make_stream(config.seed, rep, 20 + ai);
                out.kl_cop.push_back(copula_predictive_kl(
                    fit.mu_eta, rho_true, config.copula_kl_draws, kl_rng));
                Rng band_rng = make_stream(config.seed, rep, 40 + ai);
                const DensityBands bands1 = density_bands(
                    s1, b1, config.band_draws, &TrueMarginals::f1, band_rng);
                const DensityBands bands2 = density_bands(
                    s2m, b2, config.band_draws, &TrueMarginals::f2, band_rng);
                out.cover_f1.push_back(bands1.coverage);
                out.cover_f2.push_back(bands2.coverage);

                if (rep == 0 && ai == 0) {
                    Rng fit_rng = make_stream(config.seed, rep, 60);
                    const DensityBands full1 = density_bands(
                        s1, b1, config.fit_band_draws, &TrueMarginals::f1, fit_rng);
                    const DensityBands full2 = density_bands(
                        s2m, b2, config.fit_band_draws, &TrueMarginals::f2, fit_rng);
                    const DensityAndU du1 = marginal_density_and_u(s1, b1, y1);
                    const DensityAndU du2 = marginal_density_and_u(s2m, b2, y2);
                    auto emit = [&](const BinnedMarginal& bn, const DensityAndU& du,
                                    const DensityBands& bands, int marginal,
                                    double (*truth)(double)) {
                        for (Eigen::Index k = 0; k < bn.bins(); ++k) {
                            const double mid =
                                bn.transform == TransformTag::log_positive
                                    ? std::exp(bn.midpoints[k])
                                    : bn.midpoints[k];
                            const double jac =
                                bn.transform == TransformTag::log_positive
                                    ? 1.0 / mid
                                    : 1.0;
                            out.fit_rows.push_back(
                                {static_cast<std::int64_t>(marginal), mid,
                                 du.density[k], bands.lower[k] * jac,
                                 bands.upper[k] * jac, truth(mid)});
                        }
                    };
                    emit(b1, du1, full1, 1, &TrueMarginals::f1);
                    emit(b2, du2, full2, 2, &TrueMarginals::f2);
                }
            }
        } catch (const std::exception&) {
            out.failed = true;
        }
    });

    long failures = 0;
    for (const auto& r : results) failures += r.failed ? 1 : 0;

    StudyOutput output;
    output.table.columns = {"alpha",  "bias",  "rmse",     "coverage", "kl_cop",
                            "kl_f1",  "kl_f2", "cover_f1", "cover_f2"};
    output.table.seed = config.seed;
    output.table.failures = failures;
    for (std::size_t ai = 0; ai < n_alpha; ++ai) {
        double bias = 0, rmse = 0, cover = 0, klc = 0, k1 = 0, k2 = 0, c1 = 0, c2 = 0;
        long n_ok = 0;
        for (const auto& r : results) {
            if (r.failed) continue;
            ++n_ok;
            const double err = r.mu_eta[ai] - eta_true;
            bias += err;
            rmse += err * err;
            cover += std::abs(err) <= kZ975 * std::sqrt(r.var_eta[ai]) ? 1.0 : 0.0;
            klc += r.kl_cop[ai];
            k1 += r.kl_f1[ai];
            k2 += r.kl_f2[ai];
            c1 += r.cover_f1[ai];
            c2 += r.cover_f2[ai];
        }
        const double n = static_cast<double>(n_ok);
        output.table.add_row({config.alphas[ai], bias / n, std::sqrt(rmse / n),
                              cover / n, klc / n, k1 / n, k2 / n, c1 / n, c2 / n});
    }
    output.marginal_fit.columns = {"marginal", "midpoint", "density",
                                   "lower95",  "upper95",  "truth"};
    output.marginal_fit.seed = config.seed;
    for (const auto& r : results)
        for (const auto& row : r.fit_rows) output.marginal_fit.rows.push_back(row);
    return output;
}

}  // namespace occp::copula
