#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "supermarket/lyapunov.hpp"
#include "supermarket/stein.hpp"

using namespace supermarket;

namespace {

IntegratorConfig tight() {
    IntegratorConfig cfg;
    cfg.rel_tol = 1e-11;
    cfg.abs_tol = 1e-14;
    cfg.settle_tol = 1e-12;
    return cfg;
}

OccupancyState stationary_state(const ModelParams& p, std::uint64_t seed, int events = 3000) {
    Rng rng(seed);
    auto st = OccupancyState::empty(p.M);
    for (int i = 0; i < events; ++i) st = apply_event(st, next_event(st, p, rng).second);
    return st;
}

}  // namespace

TEST(GValue, ZeroAtEquilibrium) {
    const auto g = g_value(ShiftedState{std::vector<double>(6, 0.0)}, 0.5, 6, IntegratorConfig{});
    EXPECT_EQ(g.value, 0.0);
    EXPECT_EQ(g.settle_time, 0.0);
}

TEST(GValue, NegativeAwayFromEquilibrium) {
    Rng rng(1);
    for (int i = 0; i < 20; ++i) {
        const auto x = random_valid_state(0.6, 8, rng);
        EXPECT_LT(g_value(x, 0.6, 8, IntegratorConfig{}).value, 0.0);
    }
}

TEST(GValue, AgreesWithQuadratureOfTrajectory) {
    Rng rng(2);
    const double lam = 0.5;
    const std::size_t n = 6;
    const auto x = random_valid_state(lam, n, rng);
    const auto cfg = tight();
    const auto tr = integrate(x, lam, n, cfg);
    // Composite Simpson on a fine grid of the dense output.
    const std::size_t m = 200000;
    const double h = tr.t_end() / m;
    double acc = 0.0;
    for (std::size_t i = 0; i <= m; ++i) {
        const auto xi = tr.at(i * h);
        double s2 = 0.0;
        for (double v : xi.x) s2 += v * v;
        acc += s2 * (i == 0 || i == m ? 1.0 : (i % 2 ? 4.0 : 2.0));
    }
    EXPECT_NEAR(g_value(x, lam, n, cfg).value, -acc * h / 3.0, 1e-8);
}

TEST(GValue, ErrorEstimateCoversToleranceHalving) {
    Rng rng(3);
    const auto x = random_valid_state(0.5, 8, rng);
    IntegratorConfig cfg;
    const auto a = g_value(x, 0.5, 8, cfg);
    cfg.rel_tol /= 2;
    cfg.abs_tol /= 2;
    const auto b = g_value(x, 0.5, 8, cfg);
    EXPECT_LT(std::abs(a.value - b.value), 10 * a.quadrature_error_estimate);
    EXPECT_GT(a.quadrature_error_estimate, 0.0);
}

TEST(GGradient, ZeroAtEquilibrium) {
    const std::vector<double> v{0.3, -0.2, 0.1, 0.0, 0.5, 1.0};
    EXPECT_EQ(g_gradient_dir(ShiftedState{std::vector<double>(6, 0.0)}, v, 0.5, 6, IntegratorConfig{}), 0.0);
}

TEST(GGradient, MatchesCentralDifferences) {
    Rng rng(4);
    const double lam = 0.5, h = 1e-5;
    const std::size_t n = 8;
    const auto cfg = tight();
    for (int probe = 0; probe < 20; ++probe) {
        // Keep the probe interior so that x +- h v stays a valid tail.
        TailState s{std::vector<double>(n)};
        for (auto& v : s.s) v = 0.05 + 0.9 * rng.uniform();
        std::sort(s.s.begin(), s.s.end(), std::greater<>());
        for (std::size_t k = 1; k < n; ++k) s.s[k] = std::min(s.s[k], s.s[k - 1] - 1e-3);
        const auto x = shift(s, lam);
        std::vector<double> v(n);
        for (auto& c : v) c = rng.uniform() - 0.5;
        ShiftedState xp = x, xm = x;
        for (std::size_t k = 0; k < n; ++k) {
            xp[k] += h * v[k];
            xm[k] -= h * v[k];
        }
        const double fd = (g_value(xp, lam, n, cfg).value - g_value(xm, lam, n, cfg).value) / (2 * h);
        const double an = g_gradient_dir(x, v, lam, n, cfg);
        EXPECT_NEAR(an, fd, 1e-4 * std::abs(fd)) << probe;
    }
}

TEST(GGradient, LastCoordinateWithinEnvelopeBound) {
    Rng rng(5);
    const double lam = 0.5;
    const std::size_t n = 8;
    const auto tilde = tilde_weights(lam, n);
    std::vector<double> e(n, 0.0);
    e[n - 1] = 1.0;
    for (int i = 0; i < 10; ++i) {
        const auto x = random_valid_state(lam, n, rng);
        EXPECT_LE(std::abs(g_gradient_dir(x, e, lam, n, IntegratorConfig{})), 2 * envelope_integral_bound(tilde));
    }
}

TEST(GGradient, PoissonEquationPointwise) {
    // grad g . f(x) = sum x_k^2.
    Rng rng(6);
    const double lam = 0.7;
    const std::size_t n = 8;
    for (int i = 0; i < 10; ++i) {
        const auto x = random_valid_state(lam, n, rng);
        const auto f = rhs_shifted(x, lam, n);
        double s2 = 0.0;
        for (double v : x.x) s2 += v * v;
        EXPECT_NEAR(g_gradient_dir(x, f, lam, n, tight()), s2, 1e-8 * std::max(1.0, s2));
    }
}

TEST(Neighbors, EmptySystemOnlyArrives) {
    ModelParams p;
    p.lambda = 0.5;
    p.M = 10;
    const auto nb = generator_neighbors(TailState{{}}, p);
    ASSERT_EQ(nb.size(), 1u);
    EXPECT_EQ(nb[0].kind, EventKind::arrival);
    EXPECT_EQ(nb[0].level, 1u);
    EXPECT_DOUBLE_EQ(nb[0].rate, 5.0);
    EXPECT_DOUBLE_EQ(nb[0].neighbor.s[0], 0.1);
}

TEST(Neighbors, FourServerHandExample) {
    // Counts {1, 2, 1}: tail s = (3/4, 1/4).
    ModelParams p;
    p.lambda = 0.5;
    p.M = 4;
    const auto nb = generator_neighbors(to_tail(OccupancyState({1, 2, 1}), 2), p);
    ASSERT_EQ(nb.size(), 5u);
    // arrivals: k=1 0.5*4*(1 - 9/16), k=2 0.5*4*(9/16 - 1/16), k=3 0.5*4*(1/16)
    // departures: k=1 4*(3/4 - 1/4), k=2 4*(1/4)
    const double expected_arr[] = {0.875, 1.0, 0.125};
    const double expected_dep[] = {2.0, 1.0};
    std::size_t a = 0, d = 0;
    for (const auto& t : nb) {
        if (t.kind == EventKind::arrival)
            EXPECT_DOUBLE_EQ(t.rate, expected_arr[a++]);
        else
            EXPECT_DOUBLE_EQ(t.rate, expected_dep[d++]);
    }
    EXPECT_EQ(a, 3u);
    EXPECT_EQ(d, 2u);
}

TEST(Neighbors, TotalRateMatchesSimulator) {
    ModelParams p;
    p.lambda = 0.6;
    p.M = 50;
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto st = stationary_state(p, seed);
        const auto nb = generator_neighbors(full_tail(st), p);
        double total = 0.0;
        for (const auto& t : nb) total += t.rate;
        const double busy = static_cast<double>(st.servers() - st.count(0));
        EXPECT_NEAR(total, p.lambda * p.M + busy, 1e-9);
        EXPECT_LE(nb.size(), 2 * (st.max_level() + 1));
    }
}

TEST(Neighbors, RejectsUnquantizedTail) {
    ModelParams p;
    p.M = 10;
    EXPECT_THROW(generator_neighbors(TailState{{0.55}}, p), DomainError);
}

TEST(Generator, EmptySystemSingleTerm) {
    ModelParams p;
    p.lambda = 0.5;
    p.M = 10;
    const std::size_t n = 6;
    const IntegratorConfig cfg;
    TailState one{std::vector<double>(n, 0.0)};
    one.s[0] = 0.1;
    const double by_hand =
        5.0 * (g_value(shift(one, 0.5), 0.5, n, cfg).value -
               g_value(shift(TailState{std::vector<double>(n, 0.0)}, 0.5), 0.5, n, cfg).value);
    EXPECT_NEAR(generator_apply_g(TailState{{}}, p, n, cfg), by_hand, 1e-14);
}

TEST(Generator, SmallNearEquilibrium) {
    // lambda = 0.5, M = 128: M s* = (64, 16, 1, ...) is integral up to level 3.
    ModelParams p;
    p.lambda = 0.5;
    p.M = 128;
    const std::size_t n = 3;
    TailState s{{0.5, 0.125, 1.0 / 128}};
    const double gm = generator_apply_g(s, p, n, tight());
    // Second-order Taylor scale: rate mass O(M) times O(1/M^2) residuals.
    EXPECT_LT(std::abs(gm), 1.0 / 128 * 10);
}

TEST(StateTerms, DecompositionIsPointwiseGeneratorShift) {
    ModelParams p;
    p.lambda = 0.5;
    p.M = 20;
    const std::size_t n = 6;
    GEvaluator eval(p, n, IntegratorConfig{});
    for (std::uint64_t seed : {4u, 5u, 6u, 7u}) {
        const auto t = state_terms(stationary_state(p, seed), p, n, eval);
        EXPECT_NEAR(t.residual() + t.generator, 0.0, 1e-9);
    }
}

TEST(StateTerms, PerTransitionResidualQuartersWhenMDoubles) {
    const double lam = 0.5;
    const std::size_t n = 6;
    const TailState s{{0.6, 0.2, 0.05, 0.0, 0.0, 0.0}};  // quantized at M = 20 and 40
    const auto x = shift(s, lam);
    const auto cfg = tight();
    const auto grad = g_gradient(x, lam, n, cfg);
    const double gx = g_value(x, lam, n, cfg).value;
    for (std::size_t k = 0; k < 3; ++k) {
        double res[2];
        int i = 0;
        for (double M : {20.0, 40.0}) {
            ShiftedState y = x;
            y[k] -= 1.0 / M;
            res[i++] = std::abs(g_value(y, lam, n, cfg).value - gx + grad[k] / M);
        }
        const double ratio = res[0] / res[1];
        EXPECT_GE(ratio, 2.5) << k;
        EXPECT_LE(ratio, 6.0) << k;
    }
}

TEST(SteinDecomposition, SmallScaleIdentityAndBar) {
    ModelParams p;
    p.lambda = 0.5;
    p.M = 20;
    const std::size_t n = 6;
    const auto sim = SimConfig::defaults(p, n, 7);
    const auto r = stein_decomposition(p, sim, n, IntegratorConfig{});
    EXPECT_FALSE(r.partial);
    EXPECT_GE(r.samples, 150u);
    EXPECT_LE(r.bar_residual.sigmas(), 3.0);
    EXPECT_LE(r.identity_residual.sigmas(), 3.0);
    EXPECT_LE(std::abs(r.identity_residual.mean), 3 * r.identity_residual.ci);
    // The truncation term is bounded by the gradient envelope times lambda^n.
    EXPECT_LE(std::abs(r.truncation_term.mean), 2 * envelope_integral_bound(tilde_weights(0.5, n)) * std::pow(0.5, n));
    const auto j = to_json(r);
    for (const char* key : {"lhs_mse", "truncation_term", "second_order_term", "bar_residual"}) EXPECT_TRUE(j.contains(key));
}

TEST(SteinDecomposition, DeterministicUnderSeed) {
    ModelParams p;
    p.lambda = 0.5;
    p.M = 20;
    auto sim = SimConfig::defaults(p, 6, 11);
    sim.horizon_time = sim.warmup_time + 2000;
    SteinConfig sc;
    sc.samples = 50;
    const auto a = bar_check(p, sim, 6, IntegratorConfig{}, sc);
    const auto b = bar_check(p, sim, 6, IntegratorConfig{}, sc);
    EXPECT_EQ(a.mean, b.mean);
    EXPECT_EQ(a.ci, b.ci);
}

TEST(SteinDecomposition, BudgetExhaustionIsFlagged) {
    ModelParams p;
    p.lambda = 0.5;
    p.M = 20;
    SteinConfig sc;
    sc.max_distinct_states = 5;
    const auto r = stein_decomposition(p, SimConfig::defaults(p, 6, 3), 6, IntegratorConfig{}, sc);
    EXPECT_TRUE(r.partial);
    EXPECT_LT(r.samples, 200u);
}

TEST(SteinDecomposition, LongerHorizonShrinksInterval) {
    ModelParams p;
    p.lambda = 0.5;
    p.M = 20;
    auto sim = SimConfig::defaults(p, 6, 13);
    SteinConfig sc;
    sc.samples = 400;
    const auto a = bar_check(p, sim, 6, IntegratorConfig{}, sc);
    sim.horizon_time = sim.warmup_time + 2 * (sim.horizon_time - sim.warmup_time);
    sc.samples = 800;
    const auto b = bar_check(p, sim, 6, IntegratorConfig{}, sc);
    EXPECT_NEAR(a.ci / b.ci, std::sqrt(2.0), 0.6);
}
