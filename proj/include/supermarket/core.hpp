#ifndef SUPERMARKET_CORE_HPP
#define SUPERMARKET_CORE_HPP

#include <cfloat>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "supermarket/error.hpp"

namespace supermarket {

/// Parameters of the M-server supermarket model with power-of-d routing.
/// Service rate is fixed at 1.
struct ModelParams {
    double lambda = 0.5;
    std::int64_t M = 100;
    int d = 2;

    static constexpr double mu = 1.0;

    void validate() const {
        if (!(lambda > 0.0 && lambda < 1.0))
            throw DomainError("lambda must lie in (0,1), got " + std::to_string(lambda));
        if (M < 1) throw DomainError("M must be >= 1");
        if (d < 1) throw DomainError("d must be >= 1");
    }
};

/// s_k for k = 1..n (index 0 holds s_1). s_0 = 1 is implicit.
struct TailState {
    std::vector<double> s;

    std::size_t size() const noexcept { return s.size(); }
    double operator[](std::size_t i) const { return s[i]; }
    double& operator[](std::size_t i) { return s[i]; }

    /// s_k with the conventions s_0 = 1 and s_k = 0 past the stored range.
    double level(std::size_t k) const noexcept {
        if (k == 0) return 1.0;
        return k <= s.size() ? s[k - 1] : 0.0;
    }

    bool is_monotone(double tol = 0.0) const noexcept {
        double prev = 1.0;
        for (double v : s) {
            if (v > prev + tol || v < -tol) return false;
            prev = v;
        }
        return true;
    }
};

/// Deviation from the mean-field equilibrium, x_k = s_k - s*_k (index 0 holds x_1).
struct ShiftedState {
    std::vector<double> x;

    std::size_t size() const noexcept { return x.size(); }
    double operator[](std::size_t i) const { return x[i]; }
    double& operator[](std::size_t i) { return x[i]; }

    double l1() const noexcept {
        double acc = 0.0;
        for (double v : x) acc += std::abs(v);
        return acc;
    }
};

/// s*_k = lambda^(2^k - 1) for k = 1..n. Entries that would be subnormal are
/// flushed to exactly zero.
inline std::vector<double> equilibrium(double lambda, std::size_t n) {
    if (!(lambda > 0.0 && lambda < 1.0)) throw DomainError("equilibrium: lambda must lie in (0,1)");
    if (n < 1) throw DomainError("equilibrium: n must be >= 1");
    std::vector<double> out(n, 0.0);
    for (std::size_t k = 1; k <= n; ++k) {
        // pow with a floating exponent works in log space; 2^k never touches integer arithmetic.
        double v = std::pow(lambda, std::ldexp(1.0, static_cast<int>(std::min<std::size_t>(k, 1100))) - 1.0);
        if (v < DBL_MIN) break;
        out[k - 1] = v;
    }
    return out;
}

/// s*_k for a single level k >= 0 (s*_0 = 1).
inline double equilibrium_level(double lambda, std::size_t k) {
    if (k == 0) return 1.0;
    if (k > 1100) return 0.0;
    double v = std::pow(lambda, std::ldexp(1.0, static_cast<int>(k)) - 1.0);
    return v < DBL_MIN ? 0.0 : v;
}

/// Number of servers holding exactly k jobs, for k = 0..max_level.
class OccupancyState {
public:
    OccupancyState() = default;

    explicit OccupancyState(std::vector<std::int64_t> counts) : counts_(std::move(counts)) {
        if (counts_.empty()) throw DomainError("occupancy: empty count vector");
        M_ = 0;
        for (auto c : counts_) {
            if (c < 0) throw DomainError("occupancy: negative count");
            M_ += c;
        }
        if (M_ < 1) throw DomainError("occupancy: no servers");
        trim();
    }

    static OccupancyState empty(std::int64_t M) {
        if (M < 1) throw DomainError("occupancy: M must be >= 1");
        return OccupancyState(std::vector<std::int64_t>{M});
    }

    std::int64_t servers() const noexcept { return M_; }
    std::size_t max_level() const noexcept { return counts_.size() - 1; }
    std::span<const std::int64_t> counts() const noexcept { return counts_; }

    std::int64_t count(std::size_t k) const noexcept { return k < counts_.size() ? counts_[k] : 0; }

    /// Servers with at least k jobs.
    std::int64_t tail_count(std::size_t k) const noexcept {
        std::int64_t acc = 0;
        for (std::size_t j = k; j < counts_.size(); ++j) acc += counts_[j];
        return acc;
    }

    /// Move one server from level `from` to the adjacent level `to`.
    void move(std::size_t from, std::size_t to) {
        if (count(from) <= 0) throw std::logic_error("occupancy: infeasible move from empty level");
        if (to >= counts_.size()) counts_.resize(to + 1, 0);
        --counts_[from];
        ++counts_[to];
        trim();
    }

    bool operator==(const OccupancyState&) const = default;

private:
    void trim() {
        while (counts_.size() > 1 && counts_.back() == 0) counts_.pop_back();
    }

    std::vector<std::int64_t> counts_{1};
    std::int64_t M_ = 1;
};

/// s_k = (servers with >= k jobs) / M for k = 1..n.
inline TailState to_tail(const OccupancyState& occ, std::size_t n) {
    TailState t{std::vector<double>(n, 0.0)};
    const double M = static_cast<double>(occ.servers());
    std::int64_t acc = 0;
    const std::size_t top = occ.max_level();
    // Suffix sums from the top level downward.
    for (std::size_t k = top; k >= 1; --k) {
        acc += occ.count(k);
        if (k <= n) t.s[k - 1] = static_cast<double>(acc) / M;
    }
    return t;
}

inline ShiftedState shift(const TailState& s, double lambda) {
    const auto star = equilibrium(lambda, std::max<std::size_t>(s.size(), 1));
    ShiftedState x{std::vector<double>(s.size())};
    for (std::size_t i = 0; i < s.size(); ++i) x.x[i] = s.s[i] - star[i];
    return x;
}

inline TailState unshift(const ShiftedState& x, double lambda) {
    const auto star = equilibrium(lambda, std::max<std::size_t>(x.size(), 1));
    TailState s{std::vector<double>(x.size())};
    for (std::size_t i = 0; i < x.size(); ++i) s.s[i] = x.x[i] + star[i];
    return s;
}

/// Invariant box -s*_k <= x_k <= 1 - s*_k of the shifted system, widened by tol.
inline bool in_box(const ShiftedState& x, std::span<const double> star, double tol = 0.0) {
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (x.x[i] < -star[i] - tol || x.x[i] > 1.0 - star[i] + tol) return false;
    }
    return true;
}

/// Truncation level ceil(3 ln M / ln(1/lambda)), at least 1.
inline std::size_t default_truncation(double lambda, std::int64_t M) {
    if (!(lambda > 0.0 && lambda < 1.0)) throw DomainError("default_truncation: lambda must lie in (0,1)");
    if (M < 2) return 1;
    // The slack keeps exact integers (e.g. lambda = 1/2, M = 2^j) from rounding up.
    const double n = std::ceil(3.0 * std::log(static_cast<double>(M)) / std::log(1.0 / lambda) - 1e-9);
    return std::max<std::size_t>(1, static_cast<std::size_t>(n));
}

}  // namespace supermarket

#endif  // SUPERMARKET_CORE_HPP
