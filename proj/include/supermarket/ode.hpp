#ifndef SUPERMARKET_ODE_HPP
#define SUPERMARKET_ODE_HPP

// Dormand-Prince 5(4) with the standard fourth-order continuous extension.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "supermarket/error.hpp"

namespace supermarket::ode {

struct Options {
    double rel_tol = 1e-8;
    double abs_tol = 1e-10;
    double h_init = 0.0;  // 0 selects automatically
    double h_max = std::numeric_limits<double>::infinity();
    std::size_t max_steps = 50'000'000;
};

struct StepStats {
    std::size_t accepted = 0;
    std::size_t rejected = 0;
    std::size_t rhs_evals = 0;
};

/// Accepted step endpoints plus the per-step interpolation coefficients.
class DenseSolution {
public:
    DenseSolution() = default;
    explicit DenseSolution(std::size_t dim) : dim_(dim) {}

    std::size_t dim() const noexcept { return dim_; }
    std::size_t points() const noexcept { return t_.size(); }
    double t_begin() const { return t_.front(); }
    double t_end() const { return t_.back(); }
    double time(std::size_t i) const { return t_[i]; }
    std::span<const double> times() const noexcept { return t_; }
    std::span<const double> state(std::size_t i) const { return {y_.data() + i * dim_, dim_}; }
    const StepStats& stats() const noexcept { return stats_; }

    /// Interpolated state at t (clamped to the covered interval).
    void eval(double t, std::span<double> out) const {
        if (t_.size() == 1 || t <= t_.front()) {
            std::copy_n(y_.begin(), dim_, out.begin());
            return;
        }
        if (t >= t_.back()) {
            std::copy_n(y_.end() - static_cast<std::ptrdiff_t>(dim_), dim_, out.begin());
            return;
        }
        const auto it = std::upper_bound(t_.begin(), t_.end(), t);
        const std::size_t step = static_cast<std::size_t>(it - t_.begin()) - 1;
        eval_in_step(step, t, out);
    }

    std::vector<double> at(double t) const {
        std::vector<double> out(dim_);
        eval(t, out);
        return out;
    }

    /// Interpolant within accepted step `step` (t in [time(step), time(step+1)]).
    void eval_in_step(std::size_t step, double t, std::span<double> out) const {
        const double h = t_[step + 1] - t_[step];
        const double th = (t - t_[step]) / h;
        const double th1 = 1.0 - th;
        const double* r1 = y_.data() + step * dim_;
        const double* c = coef_.data() + step * 4 * dim_;
        for (std::size_t i = 0; i < dim_; ++i) {
            const double r2 = c[i], r3 = c[dim_ + i], r4 = c[2 * dim_ + i], r5 = c[3 * dim_ + i];
            out[i] = r1[i] + th * (r2 + th1 * (r3 + th * (r4 + th1 * r5)));
        }
    }

    void push_point(double t, std::span<const double> y) {
        t_.push_back(t);
        y_.insert(y_.end(), y.begin(), y.end());
    }
    void push_coefficients(std::span<const double> c) { coef_.insert(coef_.end(), c.begin(), c.end()); }
    StepStats& mutable_stats() noexcept { return stats_; }

    /// Drops every step after `last_point`.
    void truncate(std::size_t last_point) {
        t_.resize(last_point + 1);
        y_.resize((last_point + 1) * dim_);
        coef_.resize(last_point * 4 * dim_);
    }

private:
    std::size_t dim_ = 0;
    std::vector<double> t_;
    std::vector<double> y_;
    std::vector<double> coef_;
    StepStats stats_;
};

namespace detail {

struct DP5 {
    static constexpr double c2 = 0.2, c3 = 0.3, c4 = 0.8, c5 = 8.0 / 9.0;
    static constexpr double a21 = 0.2;
    static constexpr double a31 = 3.0 / 40.0, a32 = 9.0 / 40.0;
    static constexpr double a41 = 44.0 / 45.0, a42 = -56.0 / 15.0, a43 = 32.0 / 9.0;
    static constexpr double a51 = 19372.0 / 6561.0, a52 = -25360.0 / 2187.0, a53 = 64448.0 / 6561.0,
                            a54 = -212.0 / 729.0;
    static constexpr double a61 = 9017.0 / 3168.0, a62 = -355.0 / 33.0, a63 = 46732.0 / 5247.0,
                            a64 = 49.0 / 176.0, a65 = -5103.0 / 18656.0;
    static constexpr double a71 = 35.0 / 384.0, a73 = 500.0 / 1113.0, a74 = 125.0 / 192.0,
                            a75 = -2187.0 / 6784.0, a76 = 11.0 / 84.0;
    static constexpr double e1 = 71.0 / 57600.0, e3 = -71.0 / 16695.0, e4 = 71.0 / 1920.0,
                            e5 = -17253.0 / 339200.0, e6 = 22.0 / 525.0, e7 = -1.0 / 40.0;
    static constexpr double d1 = -12715105075.0 / 11282082432.0, d3 = 87487479700.0 / 32700410799.0,
                            d4 = -10690763975.0 / 1880347072.0, d5 = 701980252875.0 / 199316789632.0,
                            d6 = -1453857185.0 / 822651844.0, d7 = 69997945.0 / 29380423.0;
};

}  // namespace detail

struct NeverStop {
    bool operator()(double, std::span<const double>) const noexcept { return false; }
};

/// Integrates y' = f(t, y) from t0 to t_end. After every accepted step the
/// predicate `stop(t, y)` is consulted; integration ends at the first step
/// where it returns true. `f` has signature void(double, span<const double>, span<double>).
template <class Rhs, class Stop = NeverStop>
DenseSolution integrate(Rhs&& f, std::vector<double> y0, double t0, double t_end, const Options& opt,
                        Stop&& stop = Stop{}) {
    using C = detail::DP5;
    if (!(opt.rel_tol > 0.0) || !(opt.abs_tol > 0.0)) throw DomainError("ode: tolerances must be positive");
    if (!(t_end >= t0)) throw DomainError("ode: t_end must not precede t0");
    const std::size_t n = y0.size();
    DenseSolution sol(n);
    auto& st = sol.mutable_stats();
    sol.push_point(t0, y0);
    if (t_end == t0 || stop(t0, std::span<const double>(y0))) return sol;

    std::vector<double> y(y0), y1(n), ytmp(n), k1(n), k2(n), k3(n), k4(n), k5(n), k6(n), k7(n), err(n),
        coef(4 * n);
    auto call = [&](double t, const std::vector<double>& yy, std::vector<double>& out) {
        f(t, std::span<const double>(yy), std::span<double>(out));
        ++st.rhs_evals;
    };
    auto scale = [&](double a, double b) {
        return opt.abs_tol + opt.rel_tol * std::max(std::abs(a), std::abs(b));
    };

    double t = t0;
    call(t, y, k1);

    double h = opt.h_init;
    if (h <= 0.0) {
        // Initial step heuristic (Hairer, Norsett & Wanner).
        double d0 = 0.0, d1 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double sk = scale(y[i], y[i]);
            d0 += (y[i] / sk) * (y[i] / sk);
            d1 += (k1[i] / sk) * (k1[i] / sk);
        }
        d0 = std::sqrt(d0 / static_cast<double>(std::max<std::size_t>(n, 1)));
        d1 = std::sqrt(d1 / static_cast<double>(std::max<std::size_t>(n, 1)));
        double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
        h0 = std::min(h0, t_end - t0);
        for (std::size_t i = 0; i < n; ++i) ytmp[i] = y[i] + h0 * k1[i];
        call(t + h0, ytmp, k2);
        double d2 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double sk = scale(y[i], y[i]);
            d2 += ((k2[i] - k1[i]) / sk) * ((k2[i] - k1[i]) / sk);
        }
        d2 = std::sqrt(d2 / static_cast<double>(std::max<std::size_t>(n, 1))) / h0;
        const double dm = std::max(d1, d2);
        const double h1 = dm <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dm, 0.2);
        h = std::min(100.0 * h0, h1);
    }
    h = std::min(h, opt.h_max);

    constexpr double safe = 0.9, fac_min = 0.2, fac_max = 10.0, beta = 0.04;
    const double expo = 0.2 - beta * 0.75;
    double err_old = 1e-4;
    bool rejected_last = false;

    while (t < t_end) {
        if (st.accepted + st.rejected >= opt.max_steps) throw StiffnessError("ode: step budget exhausted");
        if (t + 1.01 * h >= t_end) h = t_end - t;
        if (h < 1e-14 * std::max(1.0, std::abs(t))) throw StiffnessError("ode: step size underflow");

        for (std::size_t i = 0; i < n; ++i) ytmp[i] = y[i] + h * C::a21 * k1[i];
        call(t + C::c2 * h, ytmp, k2);
        for (std::size_t i = 0; i < n; ++i) ytmp[i] = y[i] + h * (C::a31 * k1[i] + C::a32 * k2[i]);
        call(t + C::c3 * h, ytmp, k3);
        for (std::size_t i = 0; i < n; ++i) ytmp[i] = y[i] + h * (C::a41 * k1[i] + C::a42 * k2[i] + C::a43 * k3[i]);
        call(t + C::c4 * h, ytmp, k4);
        for (std::size_t i = 0; i < n; ++i)
            ytmp[i] = y[i] + h * (C::a51 * k1[i] + C::a52 * k2[i] + C::a53 * k3[i] + C::a54 * k4[i]);
        call(t + C::c5 * h, ytmp, k5);
        for (std::size_t i = 0; i < n; ++i)
            ytmp[i] = y[i] + h * (C::a61 * k1[i] + C::a62 * k2[i] + C::a63 * k3[i] + C::a64 * k4[i] + C::a65 * k5[i]);
        call(t + h, ytmp, k6);
        for (std::size_t i = 0; i < n; ++i)
            y1[i] = y[i] + h * (C::a71 * k1[i] + C::a73 * k3[i] + C::a74 * k4[i] + C::a75 * k5[i] + C::a76 * k6[i]);
        call(t + h, y1, k7);

        double e = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            err[i] = h * (C::e1 * k1[i] + C::e3 * k3[i] + C::e4 * k4[i] + C::e5 * k5[i] + C::e6 * k6[i] + C::e7 * k7[i]);
            const double r = err[i] / scale(y[i], y1[i]);
            e += r * r;
        }
        e = std::sqrt(e / static_cast<double>(std::max<std::size_t>(n, 1)));

        if (e <= 1.0) {
            for (std::size_t i = 0; i < n; ++i) {
                const double r2 = y1[i] - y[i];
                const double r3 = h * k1[i] - r2;
                coef[i] = r2;
                coef[n + i] = r3;
                coef[2 * n + i] = r2 - h * k7[i] - r3;
                coef[3 * n + i] = h * (C::d1 * k1[i] + C::d3 * k3[i] + C::d4 * k4[i] + C::d5 * k5[i] +
                                       C::d6 * k6[i] + C::d7 * k7[i]);
            }
            sol.push_coefficients(coef);
            t = (t + h >= t_end) ? t_end : t + h;
            y.swap(y1);
            k1.swap(k7);
            sol.push_point(t, y);
            ++st.accepted;

            double fac = std::pow(e, expo) * std::pow(err_old, -beta) / safe;
            fac = std::clamp(1.0 / fac, fac_min, fac_max);
            if (e == 0.0) fac = fac_max;
            if (rejected_last) fac = std::min(fac, 1.0);
            err_old = std::max(e, 1e-4);
            h = std::min(h * fac, opt.h_max);
            rejected_last = false;

            if (stop(t, std::span<const double>(y))) break;
        } else {
            ++st.rejected;
            h *= std::max(fac_min, safe * std::pow(e, -expo));
            rejected_last = true;
        }
    }
    return sol;
}

}  // namespace supermarket::ode

#endif  // SUPERMARKET_ODE_HPP
