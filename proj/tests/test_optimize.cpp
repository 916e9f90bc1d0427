#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "occp/optimize.hpp"
#include "occp/rng.hpp"

using namespace occp;

TEST_CASE("adam: convex quadratic and Rosenbrock") {
    Vec a(3);
    a << 1.0, -2.0, 0.5;
    auto quad = [&](const Vec& x, Vec& g) {
        g = 2.0 * (x - a);
        return (x - a).squaredNorm();
    };
    const SolveReport r = adam_minimize(quad, Vec::Zero(3), AdamOptions{.step_size = 5e-2});
    CHECK(r.converged);
    CHECK((r.final_params - a).norm() < 1e-4);

    auto rosenbrock = [](const Vec& x, Vec& g) {
        const double f = 100.0 * std::pow(x[1] - x[0] * x[0], 2) +
                         std::pow(1.0 - x[0], 2);
        g.resize(2);
        g[0] = -400.0 * x[0] * (x[1] - x[0] * x[0]) - 2.0 * (1.0 - x[0]);
        g[1] = 200.0 * (x[1] - x[0] * x[0]);
        return f;
    };
    Vec init(2);
    init << -1.2, 1.0;
    const SolveReport r2 =
        adam_minimize(rosenbrock, init, AdamOptions{.step_size = 2e-2},
                      StoppingRule{.max_iterations = 20000, .rel_tol = 1e-12,
                                   .patience = 200});
    CHECK(r2.final_objective < 1e-3);
}

TEST_CASE("adam: non-finite objective surfaces with best-seen parameters") {
    int calls = 0;
    auto f = [&](const Vec& x, Vec& g) {
        ++calls;
        g = 2.0 * x;
        if (calls > 5) return std::numeric_limits<double>::quiet_NaN();
        return x.squaredNorm();
    };
    Vec init(1);
    init << 3.0;
    const SolveReport r = adam_minimize(f, init, AdamOptions{});
    CHECK_FALSE(r.converged);
    CHECK(r.error.find("non-finite objective") != std::string::npos);
    CHECK(r.error.find("iteration") != std::string::npos);
    CHECK(std::isfinite(r.final_objective));
    CHECK(r.final_params.size() == 1);
}

TEST_CASE("bfgs: quadratic reaches tiny gradient quickly") {
    Mat h = Mat::Zero(5, 5);
    for (int i = 0; i < 5; ++i) h(i, i) = 1.0 + i;
    Vec b(5);
    b << 1, -1, 2, 0.5, -0.3;
    auto f = [&](const Vec& x, Vec& g) {
        g = h * x - b;
        return 0.5 * x.dot(h * x) - b.dot(x);
    };
    const SolveReport r = bfgs_minimize(f, Vec::Zero(5),
                                        {.max_iterations = 20, .rel_tol = 1e-14,
                                         .patience = 3, .grad_tol = 1e-8});
    CHECK(r.converged);
    Vec g(5);
    f(r.final_params, g);
    CHECK(g.norm() < 1e-8);
    CHECK(r.iterations_used <= 20);
}

TEST_CASE("bfgs: non-smooth |x| halts unconverged with best-seen") {
    auto f = [](const Vec& x, Vec& g) {
        g.resize(1);
        g[0] = x[0] >= 0.0 ? 1.0 : -1.0;
        return std::abs(x[0]);
    };
    Vec init(1);
    init << 0.7;
    const SolveReport r = bfgs_minimize(f, init,
                                        {.max_iterations = 200, .rel_tol = 1e-15,
                                         .patience = 1000, .grad_tol = 1e-12});
    CHECK_FALSE(r.converged);
    CHECK(std::abs(r.final_params[0]) <= 0.7);
}

TEST_CASE("coordinate descent: separable quadratic converges in one sweep") {
    Vec state(2);
    state << 5.0, -3.0;
    auto objective = [&]() { return state[0] * state[0] + 2.0 * state[1] * state[1]; };
    std::vector<std::function<void()>> updates{[&]() { state[0] = 0.0; },
                                               [&]() { state[1] = 0.0; }};
    CoordinateDescentOptions options;
    options.exact_updates = true;
    options.snapshot = [&]() { return state; };
    const SolveReport r = coordinate_descent(updates, objective, options);
    CHECK(r.converged);
    CHECK(r.iterations_used <= 2);
    CHECK(r.final_objective == doctest::Approx(0.0));

    // empty update list returns init unchanged and converged
    Vec fixed(1);
    fixed << 4.0;
    const SolveReport r2 = coordinate_descent(
        {}, [&]() { return fixed[0]; },
        CoordinateDescentOptions{.snapshot = [&]() { return fixed; }});
    CHECK(r2.converged);
    CHECK(r2.final_params[0] == 4.0);
}

TEST_CASE("coordinate descent: objective increase beyond slack is an error") {
    double x = 1.0;
    int sweep = 0;
    std::vector<std::function<void()>> updates{[&]() { x += (sweep++ ? 1.0 : -0.5); }};
    CoordinateDescentOptions options;
    options.exact_updates = true;
    const SolveReport r =
        coordinate_descent(updates, [&]() { return x * x; }, options);
    CHECK_FALSE(r.error.empty());
}

TEST_CASE("finite differences") {
    Vec x(1);
    x << 3.0;
    const Vec g = finite_diff_grad([](const Vec& v) { return v[0] * v[0]; }, x, 1e-5);
    CHECK(g[0] == doctest::Approx(6.0).epsilon(1e-6));
    const Vec zero =
        finite_diff_grad([](const Vec&) { return 2.5; }, Vec::Zero(4), 1e-5);
    CHECK(zero.norm() == 0.0);
}

TEST_CASE("transforms: round trips and chain rules") {
    Rng rng(3);
    const Transform log_t = Transform::log_scalar();
    for (int trial = 0; trial < 50; ++trial) {
        Vec v(3);
        for (int i = 0; i < 3; ++i) v[i] = std::exp(rng.uniform(-3.0, 3.0));
        CHECK((log_t.inverse(log_t.forward(v)) - v).norm() <= 1e-12 * v.norm());
    }
    // chain rule for log: transformed-space finite differences match
    auto f = [](const Vec& v) { return v[0] * v[0] + std::sin(v[1]) + v[2]; };
    Vec v(3);
    v << 0.7, 2.0, 0.1;
    const Vec u = log_t.forward(v);
    const Vec grad_v = finite_diff_grad(f, v, 1e-6);
    const Vec chained = log_t.grad_chain(grad_v, u);
    const Vec fd_u = finite_diff_grad(
        [&](const Vec& uu) { return f(log_t.inverse(uu)); }, u, 1e-6);
    CHECK((chained - fd_u).norm() <= 1e-4 * (1.0 + fd_u.norm()));

    const Transform chol_t = Transform::cholesky_vech(3);
    for (int trial = 0; trial < 20; ++trial) {
        Mat a(3, 3);
        for (int i = 0; i < 9; ++i) a(i / 3, i % 3) = rng.uniform(-1.0, 1.0);
        const Mat spd = a * a.transpose() + 0.5 * Mat::Identity(3, 3);
        const Vec flat = Eigen::Map<const Vec>(spd.data(), 9);
        const Vec packed = chol_t.forward(flat);
        const Vec back = chol_t.inverse(packed);
        CHECK((back - flat).norm() <= 1e-12 * (1.0 + flat.norm()));
    }
    // Cholesky chain rule against transformed-space finite differences
    Mat a(3, 3);
    for (int i = 0; i < 9; ++i) a(i / 3, i % 3) = rng.uniform(-1.0, 1.0);
    const Mat spd = a * a.transpose() + Mat::Identity(3, 3);
    auto f_sigma = [](const Vec& flat) {
        const Mat s = Eigen::Map<const Mat>(flat.data(), 3, 3);
        return s.trace() + 0.25 * s.squaredNorm() + std::log(s(0, 0) + 1.0);
    };
    const Vec flat = Eigen::Map<const Vec>(spd.data(), 9);
    const Vec packed = chol_t.forward(flat);
    const Vec grad_sigma = finite_diff_grad(f_sigma, flat, 1e-6);
    const Vec chained2 = chol_t.grad_chain(grad_sigma, packed);
    const Vec fd_packed = finite_diff_grad(
        [&](const Vec& pp) { return f_sigma(chol_t.inverse(pp)); }, packed, 1e-6);
    CHECK((chained2 - fd_packed).norm() <= 1e-4 * (1.0 + fd_packed.norm()));
}

TEST_CASE("determinism: identical setup gives bit-identical traces") {
    auto f = [](const Vec& x, Vec& g) {
        g = 2.0 * x;
        return x.squaredNorm() + std::sin(x[0]);
    };
    Vec init(2);
    init << 2.0, -1.0;
    const SolveReport r1 = adam_minimize(f, init, AdamOptions{});
    const SolveReport r2 = adam_minimize(f, init, AdamOptions{});
    REQUIRE(r1.objective_trace.size() == r2.objective_trace.size());
    for (std::size_t i = 0; i < r1.objective_trace.size(); ++i)
        CHECK(r1.objective_trace[i] == r2.objective_trace[i]);
    CHECK(r1.final_params == r2.final_params);
}
