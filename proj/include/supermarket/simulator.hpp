#ifndef SUPERMARKET_SIMULATOR_HPP
#define SUPERMARKET_SIMULATOR_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

#include "supermarket/core.hpp"
#include "supermarket/error.hpp"
#include "supermarket/rng.hpp"
#include "supermarket/stats.hpp"

namespace supermarket {

struct SimConfig {
    std::uint64_t seed = 1;
    std::uint64_t stream = 0;  // replication index
    double warmup_time = 100.0;
    double horizon_time = 10000.0;  // absolute end time; averages cover (warmup, horizon]
    std::size_t batches = 20;
    std::size_t n_report = 10;

    void validate() const {
        if (!(horizon_time > 0.0)) throw ConfigError("simulate: horizon_time must be positive");
        if (!(warmup_time >= 0.0)) throw ConfigError("simulate: warmup_time must be nonnegative");
        if (!(horizon_time > warmup_time)) throw ConfigError("simulate: horizon_time must exceed warmup_time");
        if (batches < 2) throw ConfigError("simulate: need at least two batches");
        if (n_report < 1) throw ConfigError("simulate: n_report must be >= 1");
    }

    /// Warmup max(100, 10 ln M / (1 - lambda)), horizon 100x warmup.
    static SimConfig defaults(const ModelParams& p, std::size_t n_report, std::uint64_t seed = 1) {
        SimConfig c;
        c.seed = seed;
        c.n_report = n_report;
        c.warmup_time = std::max(100.0, 10.0 * std::log(static_cast<double>(p.M)) / (1.0 - p.lambda));
        c.horizon_time = 100.0 * c.warmup_time;
        return c;
    }
};

enum class EventKind { arrival, departure };

/// Arrival to a queue of size level-1, or departure from a queue of size level.
struct Event {
    EventKind kind = EventKind::arrival;
    std::size_t level = 1;

    bool operator==(const Event&) const = default;
};

struct StationaryEstimate {
    std::vector<double> mean_tail;  // time-averaged s_k, k = 1..n_report
    std::vector<double> tail_ci;
    double mean_square_error = 0.0;  // sum_{k<=n_report} x_k^2
    double mean_square_error_ci = 0.0;
    double full_mse = 0.0;  // sum over all levels, including the equilibrium tail
    double full_mse_ci = 0.0;
    std::vector<double> batch_full_mse;
    std::uint64_t total_events = 0;
    std::uint64_t seed_used = 0;
    std::uint64_t stream_used = 0;
    std::size_t deepest_level = 0;
};

namespace detail {

/// Level of the server with (0-based) rank `idx` when servers are ordered by level,
/// starting the scan at `from`.
inline std::size_t level_of_rank(const OccupancyState& st, std::uint64_t idx, std::size_t from) {
    const auto counts = st.counts();
    std::uint64_t acc = 0;
    for (std::size_t k = from; k < counts.size(); ++k) {
        acc += static_cast<std::uint64_t>(counts[k]);
        if (idx < acc) return k;
    }
    throw std::logic_error("level_of_rank: rank out of range");
}

}  // namespace detail

/// Draws the holding time and the next transition. Arrivals sample d servers
/// uniformly with replacement and join the shortest.
inline std::pair<double, Event> next_event(const OccupancyState& state, const ModelParams& params, Rng& rng) {
    const auto M = static_cast<double>(state.servers());
    const std::int64_t busy = state.servers() - state.count(0);
    const double arrival_rate = params.lambda * M;
    const double total = arrival_rate + static_cast<double>(busy);
    const double dt = rng.exponential(total);
    if (busy == 0 || rng.uniform() * total < arrival_rate) {
        std::size_t shortest = std::numeric_limits<std::size_t>::max();
        for (int i = 0; i < params.d; ++i) {
            const auto idx = rng.below(static_cast<std::uint64_t>(state.servers()));
            shortest = std::min(shortest, detail::level_of_rank(state, idx, 0));
        }
        return {dt, Event{EventKind::arrival, shortest + 1}};
    }
    const auto idx = rng.below(static_cast<std::uint64_t>(busy));
    return {dt, Event{EventKind::departure, detail::level_of_rank(state, idx, 1)}};
}

inline OccupancyState apply_event(OccupancyState state, const Event& e) {
    if (e.level < 1) throw std::logic_error("apply_event: level must be >= 1");
    if (e.kind == EventKind::arrival)
        state.move(e.level - 1, e.level);
    else
        state.move(e.level, e.level - 1);
    return state;
}

/// One stationary-regime observation taken at a Poisson inspection time.
struct Inspection {
    double time = 0.0;
    std::size_t batch = 0;
    OccupancyState state;
};

namespace detail {

/// Event loop with time-weighted batch accumulators. Runs from the empty
/// system; averaging covers (warmup, horizon] split into equal-time batches.
class SimulationRun {
public:
    SimulationRun(const ModelParams& params, const SimConfig& cfg)
        : params_(params), cfg_(cfg), rng_(cfg.seed, cfg.stream), state_(OccupancyState::empty(params.M)) {
        params.validate();
        cfg.validate();
        M_ = static_cast<double>(params.M);
        // Equilibrium levels until underflow.
        for (std::size_t k = 1;; ++k) {
            const double v = equilibrium_level(params.lambda, k);
            if (v == 0.0) break;
            star_.push_back(v);
        }
        tail_.assign(std::max(star_.size(), cfg.n_report) + 2, 0);
        batch_len_ = (cfg.horizon_time - cfg.warmup_time) / static_cast<double>(cfg.batches);
        next_boundary_ = cfg.warmup_time;
        recompute_squares();
        level_area_.assign(cfg.n_report, 0.0);
        level_last_.assign(cfg.n_report, 0.0);
    }

    /// Runs to the horizon. `on_inspect` fires at Poisson(inspect_rate) times
    /// inside the averaging window.
    void run(double inspect_rate = 0.0, const std::function<void(const Inspection&)>& on_inspect = {}) {
        double t = 0.0;
        double next_inspect = std::numeric_limits<double>::infinity();
        Rng inspect_rng(cfg_.seed ^ 0x9e3779b97f4a7c15ULL, cfg_.stream);
        if (inspect_rate > 0.0 && on_inspect) next_inspect = cfg_.warmup_time + inspect_rng.exponential(inspect_rate);

        while (true) {
            auto [dt, ev] = next_event(state_, params_, rng_);
            const double t_event = t + dt;
            while (next_inspect < t_event && next_inspect <= cfg_.horizon_time) {
                advance(next_inspect);
                on_inspect(Inspection{next_inspect, current_batch(), state_});
                next_inspect += inspect_rng.exponential(inspect_rate);
            }
            advance(std::min(t_event, cfg_.horizon_time));
            if (t_event > cfg_.horizon_time || done_) break;
            t = t_event;
            apply(ev, t);
            ++events_;
        }
    }

    StationaryEstimate estimate() const {
        StationaryEstimate est;
        const std::size_t nr = cfg_.n_report;
        est.mean_tail.resize(nr);
        est.tail_ci.resize(nr);
        std::vector<double> col(batch_tail_.size());
        for (std::size_t k = 0; k < nr; ++k) {
            for (std::size_t b = 0; b < batch_tail_.size(); ++b) col[b] = batch_tail_[b][k];
            const auto ci = stats::mean_ci(col);
            est.mean_tail[k] = ci.mean;
            est.tail_ci[k] = ci.halfwidth;
        }
        const auto rep = stats::mean_ci(batch_sq_report_);
        est.mean_square_error = rep.mean;
        est.mean_square_error_ci = rep.halfwidth;
        const auto full = stats::mean_ci(batch_sq_full_);
        est.full_mse = full.mean;
        est.full_mse_ci = full.halfwidth;
        est.batch_full_mse = batch_sq_full_;
        est.total_events = events_;
        est.seed_used = cfg_.seed;
        est.stream_used = cfg_.stream;
        est.deepest_level = deepest_;
        return est;
    }

private:
    std::size_t current_batch() const { return batches_done_; }

    double star(std::size_t k) const { return k >= 1 && k <= star_.size() ? star_[k - 1] : 0.0; }

    void recompute_squares() {
        sq_full_ = 0.0;
        sq_report_ = 0.0;
        const std::size_t top = std::max(star_.size(), tail_.size() - 1);
        for (std::size_t k = 1; k <= top; ++k) {
            const double c = k < tail_.size() ? static_cast<double>(tail_[k]) : 0.0;
            const double dev = c / M_ - star(k);
            sq_full_ += dev * dev;
            if (k <= cfg_.n_report) sq_report_ += dev * dev;
        }
    }

    void open_batch(double at) {
        active_ = true;
        std::fill(level_area_.begin(), level_area_.end(), 0.0);
        std::fill(level_last_.begin(), level_last_.end(), at);
        area_sq_full_ = 0.0;
        area_sq_report_ = 0.0;
    }

    void close_batch(double at) {
        std::vector<double> means(cfg_.n_report);
        for (std::size_t i = 0; i < cfg_.n_report; ++i) {
            const double c = static_cast<double>(tail_[i + 1]);
            level_area_[i] += c * (at - level_last_[i]);
            level_last_[i] = at;
            means[i] = level_area_[i] / (M_ * batch_len_);
        }
        batch_tail_.push_back(std::move(means));
        batch_sq_full_.push_back(area_sq_full_ / batch_len_);
        batch_sq_report_.push_back(area_sq_report_ / batch_len_);
        ++batches_done_;
        active_ = false;
        recompute_squares();
    }

    /// Accumulates the current (constant) state over [clock_, t].
    void advance(double t) {
        while (!done_ && t >= next_boundary_) {
            if (active_) {
                area_sq_full_ += sq_full_ * (next_boundary_ - clock_);
                area_sq_report_ += sq_report_ * (next_boundary_ - clock_);
                close_batch(next_boundary_);
            }
            clock_ = next_boundary_;
            if (batches_done_ < cfg_.batches) {
                open_batch(clock_);
                next_boundary_ = batches_done_ + 1 == cfg_.batches
                                     ? cfg_.horizon_time
                                     : cfg_.warmup_time + static_cast<double>(batches_done_ + 1) * batch_len_;
            } else {
                done_ = true;
            }
        }
        if (active_ && t > clock_) {
            area_sq_full_ += sq_full_ * (t - clock_);
            area_sq_report_ += sq_report_ * (t - clock_);
        }
        clock_ = std::max(clock_, t);
    }

    void apply(const Event& ev, double t) {
        state_ = apply_event(std::move(state_), ev);
        const std::size_t k = ev.level;
        if (k + 1 >= tail_.size()) tail_.resize(k + 2, 0);
        deepest_ = std::max(deepest_, state_.max_level());
        if (active_ && k <= cfg_.n_report) {
            const double c = static_cast<double>(tail_[k]);
            level_area_[k - 1] += c * (t - level_last_[k - 1]);
            level_last_[k - 1] = t;
        }
        const double before = static_cast<double>(tail_[k]) / M_ - star(k);
        tail_[k] += ev.kind == EventKind::arrival ? 1 : -1;
        const double after = static_cast<double>(tail_[k]) / M_ - star(k);
        const double delta = after * after - before * before;
        sq_full_ += delta;
        if (k <= cfg_.n_report) sq_report_ += delta;
    }

    ModelParams params_;
    SimConfig cfg_;
    Rng rng_;
    OccupancyState state_;
    double M_ = 1.0;
    std::vector<double> star_;
    std::vector<std::int64_t> tail_;  // tail_[k] = servers with >= k jobs
    double sq_full_ = 0.0;
    double sq_report_ = 0.0;

    double batch_len_ = 0.0;
    double next_boundary_ = 0.0;
    double clock_ = 0.0;
    bool active_ = false;
    bool done_ = false;
    std::size_t batches_done_ = 0;

    std::vector<double> level_area_;
    std::vector<double> level_last_;
    double area_sq_full_ = 0.0;
    double area_sq_report_ = 0.0;

    std::vector<std::vector<double>> batch_tail_;
    std::vector<double> batch_sq_full_;
    std::vector<double> batch_sq_report_;
    std::uint64_t events_ = 0;
    std::size_t deepest_ = 0;
};

}  // namespace detail

/// Time-averaged stationary moments from one replication started empty.
inline StationaryEstimate simulate(const ModelParams& params, const SimConfig& config) {
    detail::SimulationRun run(params, config);
    run.run();
    return run.estimate();
}

struct MseEstimate {
    double mse = 0.0;
    double ci = 0.0;
};

/// Time average of sum_k (s_k - s*_k)^2 over every level, including the
/// equilibrium mass beyond the deepest occupied level.
inline MseEstimate estimate_mse(const ModelParams& params, SimConfig config, std::size_t n) {
    if (n < 1) throw DomainError("estimate_mse: n must be >= 1");
    config.n_report = n;
    const auto est = simulate(params, config);
    return {est.full_mse, est.full_mse_ci};
}

/// States seen at Poisson inspection times inside the averaging window,
/// together with the regular estimate of the same run.
inline std::pair<std::vector<Inspection>, StationaryEstimate> inspect_stationary(const ModelParams& params,
                                                                                const SimConfig& config,
                                                                                std::size_t expected_samples) {
    detail::SimulationRun run(params, config);
    std::vector<Inspection> out;
    const double rate = static_cast<double>(expected_samples) / (config.horizon_time - config.warmup_time);
    run.run(rate, [&](const Inspection& ins) { out.push_back(ins); });
    return {std::move(out), run.estimate()};
}

}  // namespace supermarket

#endif  // SUPERMARKET_SIMULATOR_HPP
