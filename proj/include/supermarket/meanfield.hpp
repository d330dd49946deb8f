#ifndef SUPERMARKET_MEANFIELD_HPP
#define SUPERMARKET_MEANFIELD_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "supermarket/core.hpp"
#include "supermarket/error.hpp"
#include "supermarket/ode.hpp"
#include "supermarket/rng.hpp"

namespace supermarket {

struct IntegratorConfig {
    double rel_tol = 1e-8;
    double abs_tol = 1e-10;
    double t_max = 0.0;  // 0 selects the decay-envelope default
    double settle_tol = 1e-10;

    void validate() const {
        if (!(rel_tol > 0.0) || !(abs_tol > 0.0) || !(settle_tol > 0.0))
            throw ConfigError("integrator tolerances must be positive");
        if (t_max < 0.0) throw ConfigError("t_max must be nonnegative");
    }

    ode::Options ode_options() const {
        ode::Options o;
        o.rel_tol = rel_tol;
        o.abs_tol = abs_tol;
        return o;
    }

    /// Options for runs that must cross |x|_1 < settle_tol. The absolute
    /// tolerance is held two decades under settle_tol / n; otherwise the
    /// numerical solution wanders at the abs_tol noise floor and never crosses.
    ode::Options settling_options(std::size_t n) const {
        ode::Options o = ode_options();
        o.abs_tol = std::min(abs_tol, settle_tol / (100.0 * static_cast<double>(std::max<std::size_t>(n, 1))));
        return o;
    }
};

/// Rate (1 - sqrt(lambda)) / (4n) of the weighted l1 decay certificate.
inline double weighted_decay_rate(double lambda, std::size_t n) {
    return (1.0 - std::sqrt(lambda)) / (4.0 * static_cast<double>(n));
}

/// (20/delta) * max(1, ln(n / settle_tol)).
inline double default_t_max(double lambda, std::size_t n, double settle_tol) {
    const double delta = weighted_decay_rate(lambda, n);
    return 20.0 / delta * std::max(1.0, std::log(static_cast<double>(n) / settle_tol));
}

namespace detail {

inline void check_dim(std::size_t got, std::size_t n, const char* who) {
    if (n < 1) throw DomainError(std::string(who) + ": n must be >= 1");
    if (got != n) throw DomainError(std::string(who) + ": state length does not match n");
}

}  // namespace detail

/// Vector field of the truncated system in deviation coordinates. Holds the
/// equilibrium s*_1..s*_n so repeated evaluation does no transcendental work.
class ShiftedField {
public:
    ShiftedField(double lambda, std::size_t n) : lambda_(lambda), n_(n), star_(equilibrium(lambda, n)) {}

    double lambda() const noexcept { return lambda_; }
    std::size_t dim() const noexcept { return n_; }
    std::span<const double> star() const noexcept { return star_; }

    void operator()(std::span<const double> x, std::span<double> dx) const {
        double q_prev = 0.0;  // x_0 = 0, so the k = 1 branch has no inflow
        for (std::size_t k = 0; k < n_; ++k) {
            const double q = x[k] * x[k] + 2.0 * star_[k] * x[k];
            const double next = k + 1 < n_ ? x[k + 1] : 0.0;
            dx[k] = lambda_ * (q_prev - q) - x[k] + next;
            q_prev = q;
        }
    }

    void operator()(double, std::span<const double> x, std::span<double> dx) const { (*this)(x, dx); }

private:
    double lambda_;
    std::size_t n_;
    std::vector<double> star_;
};

/// Right-hand side of the truncated system in tail coordinates; level n is
/// closed with s*_{n+1}.
inline std::vector<double> rhs_truncated(const TailState& s, double lambda, std::size_t n) {
    detail::check_dim(s.size(), n, "rhs_truncated");
    const double closure = equilibrium_level(lambda, n + 1);
    std::vector<double> out(n);
    for (std::size_t k = 1; k <= n; ++k) {
        const double prev = s.level(k - 1);
        const double cur = s.s[k - 1];
        const double next = k < n ? s.s[k] : closure;
        out[k - 1] = lambda * (prev * prev - cur * cur) - (cur - next);
    }
    return out;
}

inline std::vector<double> rhs_shifted(const ShiftedState& x, double lambda, std::size_t n) {
    detail::check_dim(x.size(), n, "rhs_shifted");
    std::vector<double> out(n);
    ShiftedField(lambda, n)(x.x, out);
    return out;
}

/// Dense solution of the shifted truncated system.
class Trajectory {
public:
    Trajectory(ode::DenseSolution sol, double lambda, std::size_t n, IntegratorConfig cfg)
        : sol_(std::move(sol)), lambda_(lambda), n_(n), cfg_(cfg), star_(equilibrium(lambda, n)) {}

    double lambda() const noexcept { return lambda_; }
    std::size_t n() const noexcept { return n_; }
    const IntegratorConfig& config() const noexcept { return cfg_; }
    std::span<const double> star() const noexcept { return star_; }
    const ode::DenseSolution& solution() const noexcept { return sol_; }
    const ode::StepStats& step_stats() const noexcept { return sol_.stats(); }

    std::size_t points() const noexcept { return sol_.points(); }
    double time(std::size_t i) const { return sol_.time(i); }
    double t_end() const { return sol_.t_end(); }

    ShiftedState state(std::size_t i) const {
        auto v = sol_.state(i);
        return ShiftedState{std::vector<double>(v.begin(), v.end())};
    }

    ShiftedState at(double t) const { return ShiftedState{sol_.at(t)}; }

    double l1_at(double t) const { return at(t).l1(); }

    /// CSV with header t,x_1..x_n at every accepted step.
    void write_csv(std::ostream& os) const {
        os << "t";
        for (std::size_t k = 1; k <= n_; ++k) os << ",x_" << k;
        os << '\n';
        os << std::setprecision(17);
        for (std::size_t i = 0; i < sol_.points(); ++i) {
            os << sol_.time(i);
            for (double v : sol_.state(i)) os << ',' << v;
            os << '\n';
        }
    }

private:
    ode::DenseSolution sol_;
    double lambda_;
    std::size_t n_;
    IntegratorConfig cfg_;
    std::vector<double> star_;
};

/// Rejects initial conditions whose unshifted tail is not 1 >= s_1 >= ... >= s_n >= 0.
inline void require_valid_start(const ShiftedState& x0, double lambda, std::size_t n, const char* who) {
    detail::check_dim(x0.size(), n, who);
    if (!unshift(x0, lambda).is_monotone(1e-12))
        throw DomainError(std::string(who) + ": initial condition is not a monotone tail in [0,1]");
}

/// Trajectory on [0, t_max]. With t_max = 0 the run instead ends once
/// |x(t)|_1 < settle_tol (capped by the decay-envelope default).
inline Trajectory integrate(const ShiftedState& x0, double lambda, std::size_t n, const IntegratorConfig& cfg) {
    cfg.validate();
    require_valid_start(x0, lambda, n, "integrate");
    ShiftedField field(lambda, n);
    if (cfg.t_max > 0.0) return Trajectory(ode::integrate(field, x0.x, 0.0, cfg.t_max, cfg.ode_options()), lambda, n, cfg);
    const double tol = cfg.settle_tol;
    auto stop = [tol](double, std::span<const double> y) {
        double a = 0.0;
        for (double v : y) a += std::abs(v);
        return a < tol;
    };
    auto sol = ode::integrate(field, x0.x, 0.0, default_t_max(lambda, n, tol), cfg.settling_options(n), stop);
    return Trajectory(std::move(sol), lambda, n, cfg);
}

/// Integrates the tail-coordinate system directly; returned states are s~(t).
inline ode::DenseSolution integrate_truncated(const TailState& s0, double lambda, std::size_t n,
                                              const IntegratorConfig& cfg) {
    cfg.validate();
    detail::check_dim(s0.size(), n, "integrate_truncated");
    if (!s0.is_monotone(1e-12)) throw DomainError("integrate_truncated: initial tail not monotone");
    const double closure = equilibrium_level(lambda, n + 1);
    auto field = [&](double, std::span<const double> s, std::span<double> ds) {
        double prev = 1.0;
        for (std::size_t k = 0; k < n; ++k) {
            const double next = k + 1 < n ? s[k + 1] : closure;
            ds[k] = lambda * (prev * prev - s[k] * s[k]) - (s[k] - next);
            prev = s[k];
        }
    };
    const double t_max = cfg.t_max > 0.0 ? cfg.t_max : 100.0;
    return ode::integrate(field, s0.s, 0.0, t_max, cfg.ode_options());
}

struct SettledTrajectory {
    Trajectory trajectory;
    double settle_time = 0.0;
};

namespace detail {

inline double l1(std::span<const double> v) {
    double a = 0.0;
    for (double x : v) a += std::abs(x);
    return a;
}

/// First t in the last accepted step where the l1 norm of the first `n`
/// components drops below `tol`, located by bisection on the interpolant.
inline double refine_crossing(const ode::DenseSolution& sol, std::size_t n, double tol) {
    const std::size_t last = sol.points() - 1;
    if (last == 0) return sol.time(0);
    double lo = sol.time(last - 1), hi = sol.time(last);
    std::vector<double> buf(sol.dim());
    for (int it = 0; it < 60; ++it) {
        const double mid = 0.5 * (lo + hi);
        sol.eval_in_step(last - 1, mid, buf);
        if (l1(std::span<const double>(buf).first(n)) < tol)
            hi = mid;
        else
            lo = mid;
    }
    return hi;
}

}  // namespace detail

/// Integrates until |x(t)|_1 < settle_tol. Throws ConvergenceTimeout if t_max
/// is reached first.
inline SettledTrajectory solve_to_equilibrium(const ShiftedState& x0, double lambda, std::size_t n,
                                              const IntegratorConfig& cfg) {
    cfg.validate();
    require_valid_start(x0, lambda, n, "solve_to_equilibrium");
    const double t_max = cfg.t_max > 0.0 ? cfg.t_max : default_t_max(lambda, n, cfg.settle_tol);
    ShiftedField field(lambda, n);
    const double tol = cfg.settle_tol;
    auto stop = [tol](double, std::span<const double> y) { return detail::l1(y) < tol; };
    auto sol = ode::integrate(field, x0.x, 0.0, t_max, cfg.settling_options(n), stop);
    const double residual = detail::l1(sol.state(sol.points() - 1));
    if (!(residual < tol)) throw ConvergenceTimeout("solve_to_equilibrium: t_max reached before settling", residual);
    const double settle = sol.points() == 1 ? 0.0 : detail::refine_crossing(sol, n, tol);
    return {Trajectory(std::move(sol), lambda, n, cfg), settle};
}

/// Uniformly random monotone tail (sorted uniforms), returned in deviation coordinates.
inline ShiftedState random_valid_state(double lambda, std::size_t n, Rng& rng) {
    TailState s{std::vector<double>(n)};
    for (auto& v : s.s) v = rng.uniform();
    std::sort(s.s.begin(), s.s.end(), std::greater<>());
    return shift(s, lambda);
}

}  // namespace supermarket

#endif  // SUPERMARKET_MEANFIELD_HPP
