#ifndef SUPERMARKET_STEIN_HPP
#define SUPERMARKET_STEIN_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "supermarket/core.hpp"
#include "supermarket/error.hpp"
#include "supermarket/meanfield.hpp"
#include "supermarket/perturbation.hpp"
#include "supermarket/simulator.hpp"
#include "supermarket/stats.hpp"

namespace supermarket {

struct GEvaluation {
    double value = 0.0;
    double settle_time = 0.0;
    double quadrature_error_estimate = 0.0;
};

namespace detail {

/// Beyond the settle time, |x(t)|_1 <= 4 |x(T)|_1 e^{-delta (t - T)} by the
/// weight sandwich, so int_T^inf sum x_k^2 <= 8 |x(T)|_1^2 / delta.
inline double square_tail_bound(double l1_end, double lambda, std::size_t n) {
    return 8.0 * l1_end * l1_end / weighted_decay_rate(lambda, n);
}

inline double settle_time_of(const ode::DenseSolution& sol, std::size_t n, double tol) {
    return sol.points() == 1 ? 0.0 : refine_crossing(sol, n, tol);
}

}  // namespace detail

/// g(x) = -int_0^inf sum_k x_k(t, x)^2 dt, integrated as an extra state component.
inline GEvaluation g_value(const ShiftedState& x, double lambda, std::size_t n, const IntegratorConfig& cfg) {
    IntegratorConfig run = cfg;
    run.t_max = 0.0;
    detail::AugmentedLayout lay{n, false, false, true};
    const auto sol = detail::solve_augmented(x, {}, 0.0, lambda, lay, run);
    const auto last = sol.state(sol.points() - 1);
    const double integral = last[lay.integral_offset()];
    const double tail = detail::square_tail_bound(detail::l1(last.first(n)), lambda, n);
    GEvaluation g;
    g.value = -(integral + tail);
    g.settle_time = detail::settle_time_of(sol, n, cfg.settle_tol);
    g.quadrature_error_estimate = tail + cfg.rel_tol * integral + cfg.settling_options(n).abs_tol * sol.t_end();
    return g;
}

/// grad g(x) . v = -int_0^inf sum_k 2 x_k(t) x^(1)_k(t) dt with x^(1)(0) = v.
inline double g_gradient_dir(const ShiftedState& x, std::span<const double> v, double lambda, std::size_t n,
                             const IntegratorConfig& cfg) {
    IntegratorConfig run = cfg;
    run.t_max = 0.0;
    detail::AugmentedLayout lay{n, true, false, true};
    const auto sol = detail::solve_augmented(x, v, 0.0, lambda, lay, run);
    return -sol.state(sol.points() - 1)[lay.integral_offset() + 1];
}

/// Full gradient by one sensitivity solve per coordinate direction.
inline std::vector<double> g_gradient(const ShiftedState& x, double lambda, std::size_t n, const IntegratorConfig& cfg) {
    std::vector<double> grad(n);
    std::vector<double> e(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        e[j] = 1.0;
        grad[j] = g_gradient_dir(x, e, lambda, n, cfg);
        e[j] = 0.0;
    }
    return grad;
}

struct Transition {
    double rate = 0.0;
    EventKind kind = EventKind::arrival;
    std::size_t level = 1;
    TailState neighbor;
};

namespace detail {

inline double tail_at(const TailState& s, std::size_t k) {
    if (k == 0) return 1.0;
    return k <= s.size() ? s.s[k - 1] : 0.0;
}

inline void require_quantized(const TailState& s, std::int64_t M) {
    const double m = static_cast<double>(M);
    for (double v : s.s) {
        const double c = v * m;
        if (std::abs(c - std::round(c)) > 1e-9 * m)
            throw DomainError("generator_neighbors: tail is not a multiple of 1/M");
    }
    if (!s.is_monotone(1e-12)) throw DomainError("generator_neighbors: tail is not monotone in [0,1]");
}

}  // namespace detail

/// Every transition with positive rate out of the tail state s (levels beyond
/// s.size() are empty): arrivals lambda M (s_{k-1}^d - s_k^d) to s + 1_k/M and
/// departures M (s_k - s_{k+1}) to s - 1_k/M.
inline std::vector<Transition> generator_neighbors(const TailState& s, const ModelParams& params) {
    params.validate();
    detail::require_quantized(s, params.M);
    const double M = static_cast<double>(params.M);
    const double step = 1.0 / M;
    std::vector<Transition> out;
    for (std::size_t k = 1; k <= s.size() + 1; ++k) {
        const double prev = detail::tail_at(s, k - 1), cur = detail::tail_at(s, k);
        if (prev > cur) {
            Transition t;
            t.rate = params.lambda * M * (std::pow(prev, params.d) - std::pow(cur, params.d));
            t.kind = EventKind::arrival;
            t.level = k;
            t.neighbor = s;
            if (k > t.neighbor.size()) t.neighbor.s.resize(k, 0.0);
            t.neighbor.s[k - 1] = (std::round(cur * M) + 1.0) * step;
            out.push_back(std::move(t));
        }
        const double next = detail::tail_at(s, k + 1);
        if (k <= s.size() && cur > next) {
            Transition t;
            t.rate = M * (cur - next);
            t.kind = EventKind::departure;
            t.level = k;
            t.neighbor = s;
            t.neighbor.s[k - 1] = (std::round(cur * M) - 1.0) * step;
            out.push_back(std::move(t));
        }
    }
    return out;
}

/// Full tail s_1..s_L of an occupancy state, L = deepest occupied level.
inline TailState full_tail(const OccupancyState& occ) { return to_tail(occ, occ.max_level()); }

/// Memo of g and grad g keyed on the integer tail counts M s_1..M s_n. One memo
/// serves a single (lambda, M, n, integrator config). Lookups take a shared
/// lock; inserts are serialized.
class GMemo {
public:
    using Key = std::vector<std::int64_t>;

    std::optional<double> value(const Key& k) const {
        std::shared_lock lock(mu_);
        auto it = values_.find(k);
        if (it == values_.end()) return std::nullopt;
        return it->second;
    }
    void store_value(const Key& k, double v) {
        std::unique_lock lock(mu_);
        values_.emplace(k, v);
    }
    std::optional<std::vector<double>> gradient(const Key& k) const {
        std::shared_lock lock(mu_);
        auto it = grads_.find(k);
        if (it == grads_.end()) return std::nullopt;
        return it->second;
    }
    void store_gradient(const Key& k, std::vector<double> g) {
        std::unique_lock lock(mu_);
        grads_.emplace(k, std::move(g));
    }
    std::size_t size() const {
        std::shared_lock lock(mu_);
        return values_.size();
    }

private:
    mutable std::shared_mutex mu_;
    std::map<Key, double> values_;
    std::map<Key, std::vector<double>> grads_;
};

namespace detail {

inline GMemo::Key memo_key(const TailState& s, std::size_t n, std::int64_t M) {
    GMemo::Key k(n);
    for (std::size_t i = 0; i < n; ++i) k[i] = static_cast<std::int64_t>(std::llround(tail_at(s, i + 1) * static_cast<double>(M)));
    return k;
}

/// First n levels of s in deviation coordinates.
inline ShiftedState truncated_shift(const TailState& s, double lambda, std::size_t n) {
    TailState t{std::vector<double>(n)};
    for (std::size_t k = 1; k <= n; ++k) t.s[k - 1] = tail_at(s, k);
    return shift(t, lambda);
}

}  // namespace detail

/// g and grad g at a quantized tail, memoized.
class GEvaluator {
public:
    GEvaluator(const ModelParams& params, std::size_t n, IntegratorConfig cfg, GMemo* memo = nullptr)
        : params_(params), n_(n), cfg_(cfg), memo_(memo ? memo : &own_) {
        if (n < 1) throw DomainError("GEvaluator: n must be >= 1");
    }
    GEvaluator(const GEvaluator&) = delete;
    GEvaluator& operator=(const GEvaluator&) = delete;

    std::size_t n() const noexcept { return n_; }
    const GMemo& memo() const noexcept { return *memo_; }

    double g(const TailState& s) {
        const auto key = detail::memo_key(s, n_, params_.M);
        if (auto v = memo_->value(key)) return *v;
        const double v = g_value(detail::truncated_shift(s, params_.lambda, n_), params_.lambda, n_, cfg_).value;
        memo_->store_value(key, v);
        return v;
    }

    std::vector<double> gradient(const TailState& s) {
        const auto key = detail::memo_key(s, n_, params_.M);
        if (auto v = memo_->gradient(key)) return *v;
        auto grad = g_gradient(detail::truncated_shift(s, params_.lambda, n_), params_.lambda, n_, cfg_);
        memo_->store_gradient(key, grad);
        return grad;
    }

private:
    ModelParams params_;
    std::size_t n_;
    IntegratorConfig cfg_;
    GMemo own_;
    GMemo* memo_;
};

/// G_M g(s) = sum over neighbors y of Q_{s,y} (g(y) - g(s)), with g read on the
/// first n levels.
inline double generator_apply_g(const TailState& s, const ModelParams& params, std::size_t n, GEvaluator& eval) {
    const double gx = eval.g(s);
    double acc = 0.0;
    for (const auto& t : generator_neighbors(s, params))
        if (t.level <= n) acc += t.rate * (eval.g(t.neighbor) - gx);
    return acc;
}

inline double generator_apply_g(const TailState& s, const ModelParams& params, std::size_t n,
                                const IntegratorConfig& cfg) {
    GEvaluator eval(params, n, cfg);
    return generator_apply_g(s, params, n, eval);
}

/// Pointwise terms of the decomposition at one CTMC state.
struct StateTerms {
    double lhs = 0.0;               // sum_{k<=n} x_k^2
    double truncation = 0.0;        // -dg/dx_n x_{n+1}
    double second_order = 0.0;      // -sum_y Q (g(y) - g(x) - grad g . (y - x))
    double generator = 0.0;         // G_M g(x)
    double residual() const { return truncation + second_order - lhs; }
};

inline StateTerms state_terms(const OccupancyState& occ, const ModelParams& params, std::size_t n, GEvaluator& eval) {
    const TailState s = full_tail(occ);
    const auto x = detail::truncated_shift(s, params.lambda, n);
    StateTerms out;
    for (double v : x.x) out.lhs += v * v;
    const auto grad = eval.gradient(s);
    const double x_next = detail::tail_at(s, n + 1) - equilibrium_level(params.lambda, n + 1);
    out.truncation = -grad[n - 1] * x_next;
    const double gx = eval.g(s);
    const double step = 1.0 / static_cast<double>(params.M);
    for (const auto& t : generator_neighbors(s, params)) {
        if (t.level > n) continue;  // g and its gradient ignore levels beyond n
        const double dg = eval.g(t.neighbor) - gx;
        const double lin = (t.kind == EventKind::arrival ? step : -step) * grad[t.level - 1];
        out.generator += t.rate * dg;
        out.second_order -= t.rate * (dg - lin);
    }
    return out;
}

struct SteinConfig {
    std::size_t samples = 200;            // expected number of Poisson inspections
    std::size_t max_distinct_states = 2000;
};

struct Estimate {
    double mean = 0.0;
    double ci = 0.0;      // 95% batch-means half-width
    double std_error = 0.0; // ci / t quantile

    double sigmas() const { return std_error > 0.0 ? std::abs(mean) / std_error : (mean == 0.0 ? 0.0 : HUGE_VAL); }
};

struct SteinReport {
    Estimate lhs_mse;
    Estimate truncation_term;
    Estimate second_order_term;
    Estimate bar_residual;
    Estimate identity_residual;  // truncation + second_order - lhs, paired per sample
    std::size_t samples = 0;
    std::size_t distinct_states = 0;
    std::size_t batches_used = 0;
    bool partial = false;
    std::uint64_t seed = 0;
    double lambda = 0.0;
    std::int64_t M = 0;
    std::size_t n = 0;
};

namespace detail {

inline Estimate batch_estimate(const std::vector<double>& values, const std::vector<std::size_t>& batch,
                               std::size_t batches) {
    Estimate e;
    if (values.empty()) return e;
    std::vector<double> sum(batches, 0.0);
    std::vector<std::size_t> cnt(batches, 0);
    double total = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        sum[batch[i]] += values[i];
        ++cnt[batch[i]];
        total += values[i];
    }
    e.mean = total / static_cast<double>(values.size());
    std::vector<double> means;
    for (std::size_t b = 0; b < batches; ++b)
        if (cnt[b] > 0) means.push_back(sum[b] / static_cast<double>(cnt[b]));
    if (means.size() >= 2) {
        e.ci = stats::mean_ci(means).halfwidth;
        e.std_error = e.ci / stats::t975(means.size() - 1);
    }
    return e;
}

inline nlohmann::json to_json(const Estimate& e) {
    return {{"mean", e.mean}, {"ci", e.ci}, {"stderr", e.std_error}, {"sigmas", e.sigmas()}};
}

}  // namespace detail

/// Both sides of the decomposition and the BAR average on one thinned
/// stationary sample.
inline SteinReport stein_decomposition(const ModelParams& params, const SimConfig& sim, std::size_t n,
                                       const IntegratorConfig& cfg, const SteinConfig& stein = {},
                                       GMemo* memo = nullptr) {
    if (n < 1) throw DomainError("stein_decomposition: n must be >= 1");
    const auto [inspections, est] = inspect_stationary(params, sim, stein.samples);
    (void)est;
    GEvaluator eval(params, n, cfg, memo);
    std::vector<double> lhs, trunc, second, gen, resid;
    std::vector<std::size_t> batch;
    SteinReport r;
    r.seed = sim.seed;
    r.lambda = params.lambda;
    r.M = params.M;
    r.n = n;
    for (const auto& ins : inspections) {
        if (eval.memo().size() >= stein.max_distinct_states) {
            r.partial = true;
            break;
        }
        const auto t = state_terms(ins.state, params, n, eval);
        lhs.push_back(t.lhs);
        trunc.push_back(t.truncation);
        second.push_back(t.second_order);
        gen.push_back(t.generator);
        resid.push_back(t.residual());
        batch.push_back(std::min(ins.batch, sim.batches - 1));
    }
    r.samples = lhs.size();
    r.distinct_states = eval.memo().size();
    r.lhs_mse = detail::batch_estimate(lhs, batch, sim.batches);
    r.truncation_term = detail::batch_estimate(trunc, batch, sim.batches);
    r.second_order_term = detail::batch_estimate(second, batch, sim.batches);
    r.bar_residual = detail::batch_estimate(gen, batch, sim.batches);
    r.identity_residual = detail::batch_estimate(resid, batch, sim.batches);
    std::vector<bool> seen(sim.batches, false);
    for (auto b : batch) seen[b] = true;
    r.batches_used = static_cast<std::size_t>(std::count(seen.begin(), seen.end(), true));
    return r;
}

/// Time average of G_M g over the thinned stationary sample.
inline Estimate bar_check(const ModelParams& params, const SimConfig& sim, std::size_t n, const IntegratorConfig& cfg,
                          const SteinConfig& stein = {}) {
    return stein_decomposition(params, sim, n, cfg, stein).bar_residual;
}

inline nlohmann::json to_json(const SteinReport& r) {
    nlohmann::json j;
    j["lambda"] = r.lambda;
    j["M"] = r.M;
    j["n"] = r.n;
    j["seed"] = r.seed;
    j["samples"] = r.samples;
    j["distinct_states"] = r.distinct_states;
    j["batches_used"] = r.batches_used;
    j["partial"] = r.partial;
    j["lhs_mse"] = detail::to_json(r.lhs_mse);
    j["truncation_term"] = detail::to_json(r.truncation_term);
    j["second_order_term"] = detail::to_json(r.second_order_term);
    j["bar_residual"] = detail::to_json(r.bar_residual);
    j["identity_residual"] = detail::to_json(r.identity_residual);
    return j;
}

}  // namespace supermarket

#endif  // SUPERMARKET_STEIN_HPP
