#ifndef SUPERMARKET_LYAPUNOV_HPP
#define SUPERMARKET_LYAPUNOV_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "supermarket/core.hpp"
#include "supermarket/error.hpp"
#include "supermarket/meanfield.hpp"
#include "supermarket/stats.hpp"

namespace supermarket {

enum class CertVariant { base, tilde };

/// Weighted l1 decay certificate V(x) = sum_k w_k |x_k| with rate delta.
///
/// The base variant certifies x(t); the tilde variant certifies the
/// sensitivity x^(1)(t) after the threshold time t_tilde. A tilde certificate
/// still carries the base rate, since t_tilde is defined through it.
struct LyapunovCert {
    CertVariant variant = CertVariant::base;
    double lambda = 0.0;
    std::size_t n = 0;

    std::size_t k_lambda = 0;
    std::vector<double> weights;  // w_0..w_n; empty for a tilde cert with n < k_lambda
    double delta = 0.0;

    std::size_t k_tilde = 0;
    std::vector<double> weights_tilde;  // w~_0..w~_n
    double delta_tilde = 0.0;
    double t_tilde = 0.0;

    /// True when every sufficient inequality of the decay argument holds at
    /// this (lambda, n). Otherwise `violations` names the failing cases.
    bool certified = false;
    std::vector<std::string> violations;

    std::span<const double> active_weights() const {
        return variant == CertVariant::base ? std::span<const double>(weights) : std::span<const double>(weights_tilde);
    }
    double rate() const { return variant == CertVariant::base ? delta : delta_tilde; }

    /// V(x) for x_1..x_n.
    double value(std::span<const double> x) const {
        const auto w = active_weights();
        if (x.size() + 1 != w.size()) throw DomainError("LyapunovCert::value: state length does not match n");
        double v = 0.0;
        for (std::size_t k = 0; k < x.size(); ++k) v += w[k + 1] * std::abs(x[k]);
        return v;
    }
};

namespace detail {

inline void check_load(double lambda, const char* who) {
    if (!(lambda > 0.0 && lambda < 1.0)) throw DomainError(std::string(who) + ": lambda must lie in (0, 1)");
}

inline double ceil_log2(double v) { return std::ceil(std::log(v) / std::log(2.0)); }

/// w_0 = 0, w_1 = 1, partial geometric sums up to k0, linear growth after.
inline std::vector<double> weight_sequence(std::size_t n, std::size_t k0, double ratio) {
    std::vector<double> w(n + 1, 0.0);
    w[1] = 1.0;
    double partial = 0.0;
    for (std::size_t k = 1; k <= k0; ++k) {
        partial += std::pow(ratio, -static_cast<double>(k - 1));
        if (k >= 2) w[k] = 1.0 + partial / static_cast<double>(k0);
    }
    for (std::size_t k = k0 + 1; k <= n; ++k)
        w[k] = (1.0 + static_cast<double>(k - k0) / static_cast<double>(n)) * w[k0];
    return w;
}

inline std::string case_label(const char* name, std::size_t k) { return std::string(name) + " at k=" + std::to_string(k); }

}  // namespace detail

/// Smallest level from the closed form with lambda (2 s*_k + 1) <= sqrt(lambda).
inline std::size_t k_lambda(double lambda) {
    detail::check_load(lambda, "k_lambda");
    const double r = std::sqrt(lambda);
    const double c = (1.0 - r) / (2.0 * r);
    std::size_t k = 1;
    if (c < 1.0) {
        const double v = detail::ceil_log2(std::log(c) / std::log(lambda) + 1.0);
        if (v > 1.0) k = static_cast<std::size_t>(v);
    }
    // The closed form meets the inequality with equality in exact arithmetic.
    while (lambda * (2.0 * equilibrium_level(lambda, k) + 1.0) > r) ++k;
    return k;
}

/// Smallest level from the closed form with s*_k <= 1/8.
inline std::size_t k_tilde(double lambda) {
    detail::check_load(lambda, "k_tilde");
    const double v = detail::ceil_log2(std::log(8.0) / std::log(1.0 / lambda) + 1.0);
    std::size_t k = v > 1.0 ? static_cast<std::size_t>(v) : 1;
    while (equilibrium_level(lambda, k) > 0.125) ++k;
    return k;
}

inline double tilde_decay_rate(double lambda, std::size_t n) { return (2.0 - lambda) / (8.0 * static_cast<double>(n)); }

/// (1/delta) ln(32 n), with the base rate delta.
inline double threshold_time(double lambda, std::size_t n) {
    return std::log(32.0 * static_cast<double>(n)) / weighted_decay_rate(lambda, n);
}

namespace detail {

/// Sufficient inequalities of the base decay argument.
inline void check_base_cases(LyapunovCert& c) {
    const double lam = c.lambda;
    const double m = std::max(1.0, 4.0 * lam);
    const double kl = static_cast<double>(c.k_lambda);
    const double nn = static_cast<double>(c.n);
    const auto& w = c.weights;
    for (std::size_t k = 1; k < c.k_lambda; ++k)
        if (c.delta * w[k] * kl * std::pow(m, static_cast<double>(k)) > lam)
            c.violations.push_back(case_label("base geometric range", k));
    const double wk = w[c.k_lambda];
    const double cap = 4.0 / (1.0 - std::sqrt(lam)) *
                       (nn / (kl * std::pow(m, kl - 1.0)) - std::sqrt(lam) * wk);
    if (wk > cap) c.violations.push_back(case_label("base junction", c.k_lambda));
    for (std::size_t k = c.k_lambda + 1; k <= c.n; ++k)
        if (w[k] > (1.0 - std::sqrt(lam)) * wk / (c.delta * nn) * (1.0 + 1e-12))
            c.violations.push_back(case_label("base linear range", k));
}

inline void check_tilde_cases(LyapunovCert& c) {
    const double lam = c.lambda;
    const double m = std::max(1.0, 5.0 * lam);
    const double kt = static_cast<double>(c.k_tilde);
    const double nn = static_cast<double>(c.n);
    const auto& w = c.weights_tilde;
    for (std::size_t k = 1; k < c.k_tilde; ++k)
        if (c.delta_tilde * w[k] * kt * std::pow(m, static_cast<double>(k)) > lam)
            c.violations.push_back(case_label("tilde geometric range", k));
    const double wk = w[c.k_tilde];
    if ((0.5 * lam + (2.0 - lam) / 8.0) * wk > nn / (kt * std::pow(m, kt - 1.0)))
        c.violations.push_back(case_label("tilde junction", c.k_tilde));
    for (std::size_t k = c.k_tilde + 1; k <= c.n; ++k)
        if (w[k] > (1.0 - 0.5 * lam) * wk / (c.delta_tilde * nn) * (1.0 + 1e-12))
            c.violations.push_back(case_label("tilde linear range", k));
}

}  // namespace detail

inline LyapunovCert base_weights(double lambda, std::size_t n) {
    LyapunovCert c;
    c.variant = CertVariant::base;
    c.lambda = lambda;
    c.n = n;
    c.k_lambda = k_lambda(lambda);
    if (n < c.k_lambda)
        throw DomainError("base_weights: n = " + std::to_string(n) + " is below k_lambda = " + std::to_string(c.k_lambda));
    c.weights = detail::weight_sequence(n, c.k_lambda, std::max(1.0, 4.0 * lambda));
    c.delta = weighted_decay_rate(lambda, n);
    detail::check_base_cases(c);
    c.certified = c.violations.empty();
    return c;
}

inline LyapunovCert tilde_weights(double lambda, std::size_t n) {
    LyapunovCert c;
    c.variant = CertVariant::tilde;
    c.lambda = lambda;
    c.n = n;
    c.k_tilde = k_tilde(lambda);
    if (n < c.k_tilde)
        throw DomainError("tilde_weights: n = " + std::to_string(n) + " is below k_tilde = " + std::to_string(c.k_tilde));
    c.k_lambda = k_lambda(lambda);
    if (n >= c.k_lambda) c.weights = detail::weight_sequence(n, c.k_lambda, std::max(1.0, 4.0 * lambda));
    c.delta = weighted_decay_rate(lambda, n);
    c.weights_tilde = detail::weight_sequence(n, c.k_tilde, std::max(1.0, 5.0 * lambda));
    c.delta_tilde = tilde_decay_rate(lambda, n);
    c.t_tilde = threshold_time(lambda, n);
    detail::check_tilde_cases(c);
    c.certified = c.violations.empty();
    return c;
}

struct DecayReport {
    double max_ratio = 0.0;
    double empirical_rate = std::numeric_limits<double>::quiet_NaN();
    double certified_rate = 0.0;
    std::size_t grid_points = 0;
    bool rate_defined = false;
    bool certified = false;  // (lambda, n) inside the regime where the proof's inequalities hold
    double tolerance = 0.0;

    bool passed() const { return max_ratio <= 1.0 + tolerance; }
};

inline nlohmann::json to_json(const DecayReport& r) {
    nlohmann::json j;
    j["max_ratio"] = r.max_ratio;
    j["empirical_rate"] = r.rate_defined ? nlohmann::json(r.empirical_rate) : nlohmann::json(nullptr);
    j["certified_rate"] = r.certified_rate;
    j["grid_points"] = r.grid_points;
    j["certified_regime"] = r.certified;
    j["tolerance"] = r.tolerance;
    j["passed"] = r.passed();
    return j;
}

/// Checks V(t) e^{rate (t - t_start)} <= V(t_start) on a uniform grid of
/// [t_start, t_end]. `state(t, out)` fills x_1..x_n at time t.
inline DecayReport verify_decay(const std::function<void(double, std::span<double>)>& state, double t_start,
                                double t_end, const LyapunovCert& cert, std::size_t grid_points = 400,
                                double tolerance = 1e-6) {
    if (grid_points < 2) throw DomainError("verify_decay: need at least two grid points");
    if (!(t_end >= t_start)) throw DomainError("verify_decay: empty time window");
    DecayReport r;
    r.certified_rate = cert.rate();
    r.grid_points = grid_points;
    r.certified = cert.certified;
    r.tolerance = tolerance;
    std::vector<double> x(cert.n);
    state(t_start, x);
    const double v0 = cert.value(x);
    if (v0 == 0.0) return r;
    std::vector<double> ts, logs;
    for (std::size_t i = 0; i < grid_points; ++i) {
        const double t = t_start + (t_end - t_start) * static_cast<double>(i) / static_cast<double>(grid_points - 1);
        state(t, x);
        const double v = cert.value(x);
        r.max_ratio = std::max(r.max_ratio, v * std::exp(r.certified_rate * (t - t_start)) / v0);
        if (v > 0.0) {
            ts.push_back(t);
            logs.push_back(std::log(v));
        }
    }
    if (ts.size() >= 2 && ts.back() > ts.front()) {
        r.empirical_rate = -stats::ols(ts, logs).slope;
        r.rate_defined = true;
    }
    return r;
}

inline DecayReport verify_decay(const Trajectory& traj, const LyapunovCert& cert, double t_start = 0.0,
                                std::size_t grid_points = 400, double tolerance = 1e-6) {
    if (traj.n() != cert.n) throw DomainError("verify_decay: trajectory and certificate disagree on n");
    const auto& sol = traj.solution();
    auto state = [&sol](double t, std::span<double> out) { sol.eval(t, out); };
    return verify_decay(state, t_start, traj.t_end(), cert, grid_points, tolerance);
}

/// V(x)/4 <= |x|_1 <= V(x), which follows from 1 <= w_k <= 4.
inline bool sandwich_holds(const LyapunovCert& cert, std::span<const double> x, double tol = 0.0) {
    double l1 = 0.0;
    for (double v : x) l1 += std::abs(v);
    const double v = cert.value(x);
    return v / 4.0 <= l1 + tol && l1 <= v + tol;
}

/// Largest |x(t)|_1 over t >= t_tilde. Beyond the end of the trajectory the
/// non-expansive l1 flow is bounded by its value at t_end.
inline double max_l1_after(const Trajectory& traj, double t_from, std::size_t grid_points = 400) {
    if (t_from >= traj.t_end()) return traj.l1_at(traj.t_end());
    double worst = 0.0;
    for (std::size_t i = 0; i < grid_points; ++i) {
        const double t = t_from + (traj.t_end() - t_from) * static_cast<double>(i) / static_cast<double>(grid_points - 1);
        worst = std::max(worst, traj.l1_at(t));
    }
    return worst;
}

}  // namespace supermarket

#endif  // SUPERMARKET_LYAPUNOV_HPP
