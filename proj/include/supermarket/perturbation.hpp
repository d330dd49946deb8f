#ifndef SUPERMARKET_PERTURBATION_HPP
#define SUPERMARKET_PERTURBATION_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "supermarket/core.hpp"
#include "supermarket/error.hpp"
#include "supermarket/lyapunov.hpp"
#include "supermarket/meanfield.hpp"
#include "supermarket/ode.hpp"

namespace supermarket {

/// Tridiagonal n x n matrix; sub[k] couples row k+1 to column k, sup[k] row k to column k+1.
struct Tridiagonal {
    std::vector<double> sub, diag, sup;

    std::size_t size() const noexcept { return diag.size(); }

    std::vector<double> apply(std::span<const double> v) const {
        const std::size_t n = size();
        if (v.size() != n) throw DomainError("Tridiagonal::apply: length mismatch");
        std::vector<double> out(n);
        for (std::size_t k = 0; k < n; ++k) {
            double acc = diag[k] * v[k];
            if (k > 0) acc += sub[k - 1] * v[k - 1];
            if (k + 1 < n) acc += sup[k] * v[k + 1];
            out[k] = acc;
        }
        return out;
    }

    double operator()(std::size_t r, std::size_t c) const {
        if (r == c) return diag[r];
        if (r == c + 1) return sub[c];
        if (c == r + 1) return sup[r];
        return 0.0;
    }
};

/// Jacobian of the shifted field at x.
inline Tridiagonal jacobian(const ShiftedState& x, double lambda, std::size_t n) {
    detail::check_dim(x.size(), n, "jacobian");
    const auto star = equilibrium(lambda, n);
    Tridiagonal j;
    j.diag.resize(n);
    j.sub.resize(n - 1);
    j.sup.assign(n - 1, 1.0);
    for (std::size_t k = 0; k < n; ++k) {
        const double a = 2.0 * lambda * (x[k] + star[k]);
        j.diag[k] = -a - 1.0;
        if (k + 1 < n) j.sub[k] = a;
    }
    return j;
}

struct SensitivitySetup {
    ShiftedState x0;
    std::vector<double> z;
    double epsilon = 0.0;
};

namespace detail {

/// Base flow, its variational flow, the rescaled remainder r = e / eps^2, and
/// running integrals of sum x^2 and 2 sum x x^(1). Since the field is
/// quadratic, f(x + u) - f(x) - J(x) u has components lambda (u_{k-1}^2 - u_k^2)
/// and r obeys r' = J(x) r + lambda (v_{k-1}^2 - v_k^2) with v = x^(1) + eps r.
struct AugmentedLayout {
    std::size_t n = 0;
    bool sensitivity = false;
    bool remainder = false;
    bool integrals = false;

    std::size_t blocks() const { return 1 + (sensitivity ? 1 : 0) + (remainder ? 1 : 0); }
    std::size_t x1_offset() const { return n; }
    std::size_t r_offset() const { return n * (sensitivity ? 2 : 1); }
    std::size_t integral_offset() const { return n * blocks(); }
    std::size_t dim() const { return n * blocks() + (integrals ? (sensitivity ? 2 : 1) : 0); }
};

class AugmentedField {
public:
    AugmentedField(double lambda, AugmentedLayout layout, double eps)
        : lambda_(lambda), lay_(layout), eps_(eps), star_(equilibrium(lambda, layout.n)) {}

    void operator()(double, std::span<const double> y, std::span<double> dy) const {
        const std::size_t n = lay_.n;
        const double* x = y.data();
        double q_prev = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            const double q = x[k] * x[k] + 2.0 * star_[k] * x[k];
            const double next = k + 1 < n ? x[k + 1] : 0.0;
            dy[k] = lambda_ * (q_prev - q) - x[k] + next;
            q_prev = q;
        }
        if (lay_.sensitivity) jv(x, y.data() + lay_.x1_offset(), dy.data() + lay_.x1_offset());
        if (lay_.remainder) {
            const double* x1 = y.data() + lay_.x1_offset();
            const double* r = y.data() + lay_.r_offset();
            double* dr = dy.data() + lay_.r_offset();
            jv(x, r, dr);
            double sq_prev = 0.0;
            for (std::size_t k = 0; k < n; ++k) {
                const double v = x1[k] + eps_ * r[k];
                const double sq = v * v;
                dr[k] += lambda_ * (sq_prev - sq);
                sq_prev = sq;
            }
        }
        if (lay_.integrals) {
            double s2 = 0.0, cross = 0.0;
            for (std::size_t k = 0; k < n; ++k) s2 += x[k] * x[k];
            dy[lay_.integral_offset()] = s2;
            if (lay_.sensitivity) {
                const double* x1 = y.data() + lay_.x1_offset();
                for (std::size_t k = 0; k < n; ++k) cross += 2.0 * x[k] * x1[k];
                dy[lay_.integral_offset() + 1] = cross;
            }
        }
    }

private:
    void jv(const double* x, const double* v, double* out) const {
        const std::size_t n = lay_.n;
        double inflow = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            const double a = 2.0 * lambda_ * (x[k] + star_[k]);
            const double next = k + 1 < n ? v[k + 1] : 0.0;
            out[k] = inflow - (a + 1.0) * v[k] + next;
            inflow = a * v[k];
        }
    }

    double lambda_;
    AugmentedLayout lay_;
    double eps_;
    std::vector<double> star_;
};

/// Solves the augmented system, either on [0, cfg.t_max] or until the l1 mass
/// of all state blocks drops below settle_tol.
inline ode::DenseSolution solve_augmented(const ShiftedState& x0, std::span<const double> z, double eps,
                                          double lambda, const AugmentedLayout& lay, const IntegratorConfig& cfg) {
    cfg.validate();
    require_valid_start(x0, lambda, lay.n, "solve_augmented");
    std::vector<double> y0(lay.dim(), 0.0);
    std::copy(x0.x.begin(), x0.x.end(), y0.begin());
    if (lay.sensitivity) {
        if (z.size() != lay.n) throw DomainError("sensitivity direction length does not match n");
        std::copy(z.begin(), z.end(), y0.begin() + static_cast<std::ptrdiff_t>(lay.x1_offset()));
    }
    AugmentedField field(lambda, lay, eps);
    const std::size_t state_len = lay.n * lay.blocks();
    if (cfg.t_max > 0.0) {
        auto opt = cfg.settling_options(state_len);
        return ode::integrate(field, std::move(y0), 0.0, cfg.t_max, opt);
    }
    const double tol = cfg.settle_tol;
    auto stop = [tol, state_len](double, std::span<const double> y) { return l1(y.first(state_len)) < tol; };
    auto sol = ode::integrate(field, std::move(y0), 0.0, default_t_max(lambda, lay.n, tol),
                              cfg.settling_options(state_len), stop);
    const double residual = l1(sol.state(sol.points() - 1).first(state_len));
    if (!(residual < tol)) throw ConvergenceTimeout("augmented system did not settle before t_max", residual);
    return sol;
}

}  // namespace detail

/// Jointly integrated x^(0), x^(1) and, optionally, the Taylor remainder e.
class AugmentedTrajectory {
public:
    AugmentedTrajectory(ode::DenseSolution sol, detail::AugmentedLayout lay, double lambda, double eps)
        : sol_(std::move(sol)), lay_(lay), lambda_(lambda), eps_(eps) {}

    std::size_t n() const noexcept { return lay_.n; }
    double lambda() const noexcept { return lambda_; }
    double epsilon() const noexcept { return eps_; }
    bool has_remainder() const noexcept { return lay_.remainder; }
    double t_end() const { return sol_.t_end(); }
    std::size_t points() const noexcept { return sol_.points(); }
    double time(std::size_t i) const { return sol_.time(i); }
    const ode::DenseSolution& solution() const noexcept { return sol_; }

    std::vector<double> base(double t) const { return block(t, 0, 1.0); }
    std::vector<double> first_order(double t) const { return block(t, lay_.x1_offset(), 1.0); }

    /// e(t); exactly zero at t = 0.
    std::vector<double> remainder(double t) const {
        if (!lay_.remainder) throw DomainError("AugmentedTrajectory: remainder was not integrated");
        return block(t, lay_.r_offset(), eps_ * eps_);
    }

    /// x(t, eps) = x^(0)(t) + eps x^(1)(t) + e(t).
    std::vector<double> perturbed(double t) const {
        auto x = base(t);
        const auto x1 = first_order(t);
        const auto e = remainder(t);
        for (std::size_t k = 0; k < x.size(); ++k) x[k] += eps_ * x1[k] + e[k];
        return x;
    }

    double base_l1(double t) const { return detail::l1(base(t)); }
    double first_order_l1(double t) const { return detail::l1(first_order(t)); }
    double remainder_l1(double t) const { return detail::l1(remainder(t)); }

    /// first_order_l1 at accepted step i, without interpolation.
    double first_order_l1_at_point(std::size_t i) const {
        return detail::l1(sol_.state(i).subspan(lay_.x1_offset(), lay_.n));
    }

    /// Rescaled remainder integral int_0^T |e(t)|_1 dt / eps^2, summed per accepted step.
    double scaled_remainder_l1_integral(double* error_estimate = nullptr) const {
        if (!lay_.remainder) throw DomainError("AugmentedTrajectory: remainder was not integrated");
        std::vector<double> buf(sol_.dim());
        double total = 0.0, err_total = 0.0;
        for (std::size_t s = 0; s + 1 < sol_.points(); ++s) {
            auto f = [&](double t) {
                sol_.eval_in_step(s, t, buf);
                return detail::l1(std::span<const double>(buf).subspan(lay_.r_offset(), lay_.n));
            };
            double err = 0.0;
            total += boost::math::quadrature::gauss_kronrod<double, 15>::integrate(f, sol_.time(s), sol_.time(s + 1), 10,
                                                                                  1e-10, &err);
            err_total += err;
        }
        if (error_estimate) *error_estimate = err_total;
        return total;
    }

private:
    std::vector<double> block(double t, std::size_t offset, double scale) const {
        std::vector<double> buf(sol_.dim());
        sol_.eval(t, buf);
        std::vector<double> out(buf.begin() + static_cast<std::ptrdiff_t>(offset),
                                buf.begin() + static_cast<std::ptrdiff_t>(offset + lay_.n));
        if (scale != 1.0)
            for (double& v : out) v *= scale;
        return out;
    }

    ode::DenseSolution sol_;
    detail::AugmentedLayout lay_;
    double lambda_;
    double eps_;
};

inline AugmentedTrajectory integrate_sensitivity(const SensitivitySetup& setup, double lambda, std::size_t n,
                                                 const IntegratorConfig& cfg, bool with_remainder = false) {
    detail::AugmentedLayout lay{n, true, with_remainder, false};
    auto sol = detail::solve_augmented(setup.x0, setup.z, setup.epsilon, lambda, lay, cfg);
    return AugmentedTrajectory(std::move(sol), lay, lambda, setup.epsilon);
}

struct EnvelopeReport {
    bool passed = true;
    double max_excess = 0.0;          // max of |x^(1)(t)|_1 - |z|_1 * envelope(t)
    double max_expansion = 0.0;       // max of |x^(1)(t)|_1 - |z|_1 over checkpoints
    std::size_t grid_points = 0;
    double t_tilde = 0.0;
};

/// 1 for t <= t_tilde, min(1, 4 e^{-delta_tilde (t - t_tilde)}) afterwards.
inline double sensitivity_envelope(const LyapunovCert& tilde, double t) {
    if (t <= tilde.t_tilde) return 1.0;
    return std::min(1.0, 4.0 * std::exp(-tilde.delta_tilde * (t - tilde.t_tilde)));
}

/// Upper bound t_tilde + 4 / delta_tilde on the time integral of the envelope.
inline double envelope_integral_bound(const LyapunovCert& tilde) { return tilde.t_tilde + 4.0 / tilde.delta_tilde; }

/// Checks the envelope on a uniform grid plus every accepted step. Beyond the
/// end of the trajectory the variational flow is l1 non-expansive, so
/// |x^(1)(t_end)|_1 bounds it there.
inline EnvelopeReport sensitivity_envelope_check(const AugmentedTrajectory& traj, const LyapunovCert& tilde,
                                                 double tolerance = 1e-6, std::size_t grid_points = 400) {
    if (tilde.variant != CertVariant::tilde) throw DomainError("sensitivity_envelope_check: needs a tilde certificate");
    EnvelopeReport r;
    r.t_tilde = tilde.t_tilde;
    const double z1 = traj.first_order_l1_at_point(0);
    for (std::size_t i = 0; i < traj.points(); ++i) {
        const double v = traj.first_order_l1_at_point(i);
        r.max_expansion = std::max(r.max_expansion, v - z1);
        r.max_excess = std::max(r.max_excess, v - z1 * sensitivity_envelope(tilde, traj.time(i)));
    }
    const double t_far = std::max(traj.t_end(), tilde.t_tilde + std::log(4.0 * z1 / std::max(tolerance, 1e-300)) /
                                                                    tilde.delta_tilde);
    for (std::size_t i = 0; i < grid_points; ++i) {
        const double t = t_far * static_cast<double>(i) / static_cast<double>(grid_points - 1);
        const double v = traj.first_order_l1(std::min(t, traj.t_end()));
        r.max_excess = std::max(r.max_excess, v - z1 * sensitivity_envelope(tilde, t));
    }
    r.grid_points = grid_points + traj.points();
    r.passed = r.max_excess <= tolerance && r.max_expansion <= tolerance;
    return r;
}

/// The envelope for every unit direction 1_j, i.e. for each partial derivative.
inline EnvelopeReport partial_derivative_envelope_check(const ShiftedState& x0, double lambda, std::size_t n,
                                                        const IntegratorConfig& cfg, double tolerance = 1e-6) {
    const auto tilde = tilde_weights(lambda, n);
    EnvelopeReport worst;
    worst.t_tilde = tilde.t_tilde;
    for (std::size_t j = 0; j < n; ++j) {
        SensitivitySetup s{x0, std::vector<double>(n, 0.0), 0.0};
        s.z[j] = 1.0;
        const auto r = sensitivity_envelope_check(integrate_sensitivity(s, lambda, n, cfg), tilde, tolerance);
        worst.max_excess = std::max(worst.max_excess, r.max_excess);
        worst.max_expansion = std::max(worst.max_expansion, r.max_expansion);
        worst.grid_points += r.grid_points;
        worst.passed = worst.passed && r.passed;
    }
    return worst;
}

struct RemainderResult {
    AugmentedTrajectory trajectory;
    double l1_integral = 0.0;     // int_0^inf |e(t)|_1 dt including the tail bound
    double tail_bound = 0.0;      // contribution beyond the last checkpoint
    double quadrature_error = 0.0;
};

inline RemainderResult remainder(const SensitivitySetup& setup, double lambda, std::size_t n,
                                 const IntegratorConfig& cfg) {
    auto traj = integrate_sensitivity(setup, lambda, n, cfg, true);
    const double e2 = setup.epsilon * setup.epsilon;
    double qerr = 0.0;
    const double body = traj.scaled_remainder_l1_integral(&qerr) * e2;
    // The weighted remainder decays at least at the tilde rate once the base
    // and variational flows have settled; weights lie in [1, 4].
    const double tail = 4.0 * traj.remainder_l1(traj.t_end()) / tilde_decay_rate(lambda, n);
    return RemainderResult{std::move(traj), body + tail, tail, qerr * e2};
}

struct RemainderBoundReport {
    double epsilon = 0.0;
    double t_tilde = 0.0;
    double small_time_sup = 0.0;   // sup_{t <= t_tilde} |e(t)|_1
    double small_time_bound = 0.0; // 2 t_tilde eps^2
    bool small_time_ok = true;
    bool large_time_exercised = false;
    double large_time_max_ratio = 0.0;  // max |e(t)|_1 / envelope(t) on [t_tilde, t_end]
    bool large_time_ok = true;
    double integral = 0.0;
    double integral_bound = 0.0;   // explicit sum of the two envelopes
    bool integral_ok = true;
    std::string large_time_rate = "delta_tilde";

    bool passed() const { return small_time_ok && large_time_ok && integral_ok; }
};

/// Small-time bound 2 t_tilde eps^2 and the large-time envelope
/// 4|e(t~)| e^{-d (t - t~)} + 128 lambda eps^2 e^{-d (t + t~)} (1 - e^{-d (t - t~)}) / d
/// with d = delta_tilde, and the integral of both.
inline RemainderBoundReport remainder_bound_check(const RemainderResult& rem, const LyapunovCert& tilde,
                                                  std::size_t grid_points = 400, double tolerance = 1e-12) {
    if (tilde.variant != CertVariant::tilde) throw DomainError("remainder_bound_check: needs a tilde certificate");
    const auto& tr = rem.trajectory;
    RemainderBoundReport r;
    const double eps = tr.epsilon();
    const double tt = tilde.t_tilde;
    const double d = tilde.delta_tilde;
    r.epsilon = eps;
    r.t_tilde = tt;
    r.small_time_bound = 2.0 * tt * eps * eps;

    const double t_small = std::min(tt, tr.t_end());
    for (std::size_t i = 0; i < tr.points() && tr.time(i) <= t_small; ++i)
        r.small_time_sup = std::max(r.small_time_sup, tr.remainder_l1(tr.time(i)));
    for (std::size_t i = 0; i < grid_points; ++i)
        r.small_time_sup = std::max(r.small_time_sup,
                                    tr.remainder_l1(t_small * static_cast<double>(i) / static_cast<double>(grid_points - 1)));
    r.small_time_ok = r.small_time_sup <= r.small_time_bound + tolerance * eps * eps;

    const double e_tt = tr.remainder_l1(t_small);
    auto envelope = [&](double t) {
        const double s = t - tt;
        return 4.0 * e_tt * std::exp(-d * s) +
               128.0 * tilde.lambda * eps * eps * std::exp(-d * (t + tt)) / d * (1.0 - std::exp(-d * s));
    };
    if (tr.t_end() > tt) {
        r.large_time_exercised = true;
        for (std::size_t i = 0; i < grid_points; ++i) {
            const double t = tt + (tr.t_end() - tt) * static_cast<double>(i) / static_cast<double>(grid_points - 1);
            const double v = tr.remainder_l1(t);
            const double env = envelope(t);
            if (v > 0.0) r.large_time_max_ratio = std::max(r.large_time_max_ratio, env > 0.0 ? v / env : HUGE_VAL);
        }
        r.large_time_ok = r.large_time_max_ratio <= 1.0 + 1e-6;
    }

    r.integral = rem.l1_integral;
    r.integral_bound = 2.0 * tt * tt * eps * eps + 4.0 * r.small_time_bound / d + 128.0 * tilde.lambda * eps * eps / (d * d);
    r.integral_ok = r.integral <= r.integral_bound;
    return r;
}

struct ScalingCheck {
    double constant = 0.0;  // C fitted at the smallest M
    std::vector<double> ratios;  // integral / (C (n ln n)^2 / M^2) per M
    bool passed = true;
};

/// Integral <= slack * C (n ln n)^2 / M^2 at every M, with C calibrated at the smallest M.
inline ScalingCheck integral_scaling_check(std::span<const double> Ms, std::span<const double> integrals, std::size_t n,
                                           double slack = 1.25) {
    if (Ms.size() != integrals.size() || Ms.empty()) throw DomainError("integral_scaling_check: mismatched inputs");
    const double nl = static_cast<double>(n) * std::log(static_cast<double>(std::max<std::size_t>(n, 2)));
    const auto envelope = [nl](double M) { return nl * nl / (M * M); };
    const std::size_t first = static_cast<std::size_t>(std::min_element(Ms.begin(), Ms.end()) - Ms.begin());
    ScalingCheck c;
    c.constant = integrals[first] / envelope(Ms[first]);
    for (std::size_t i = 0; i < Ms.size(); ++i) {
        const double ratio = integrals[i] / (c.constant * envelope(Ms[i]));
        c.ratios.push_back(ratio);
        if (ratio > slack) c.passed = false;
    }
    return c;
}

}  // namespace supermarket

#endif  // SUPERMARKET_PERTURBATION_HPP
