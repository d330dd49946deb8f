#ifndef SUPERMARKET_HARNESS_HPP
#define SUPERMARKET_HARNESS_HPP

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "supermarket/core.hpp"
#include "supermarket/error.hpp"
#include "supermarket/meanfield.hpp"
#include "supermarket/simulator.hpp"
#include "supermarket/stats.hpp"

#ifndef SUPERMARKET_VERSION
#define SUPERMARKET_VERSION "0.1.0-unknown"
#endif

namespace supermarket {

inline const char* version_string() { return SUPERMARKET_VERSION; }

struct SimOverrides {
    std::optional<double> warmup_time;
    std::optional<double> horizon_time;
    std::optional<std::size_t> batches;
};

/// Parameters shared by every subcommand. Scalar-valued commands use the first
/// entry of the lambda and M lists.
struct ExperimentConfig {
    std::vector<double> lambdas{0.5};
    std::vector<std::int64_t> Ms{100};
    std::optional<std::size_t> n;  // empty selects the automatic truncation
    int d = 2;
    std::uint64_t seed = 1;
    std::size_t replications = 8;
    std::size_t threads = 0;  // 0 uses the hardware concurrency
    std::string output_dir = ".";
    std::string format = "csv";
    SimOverrides sim;
    IntegratorConfig integrator;
    std::string x0 = "random";
    std::size_t samples = 200;
    std::size_t max_distinct_states = 2000;
    std::size_t grid_points = 400;
    double tolerance = 1e-6;
    double epsilon = 1e-3;

    void validate(bool rate_study = false) const {
        if (lambdas.empty()) throw ConfigError("config: lambda list is empty");
        if (Ms.empty()) throw ConfigError("config: M list is empty");
        for (double l : lambdas)
            if (!(l > 0.0 && l < 1.0)) throw ConfigError("config: lambda must lie in (0,1)");
        for (auto m : Ms)
            if (m < 1) throw ConfigError("config: M must be >= 1");
        if (n && *n < 1) throw ConfigError("config: n must be >= 1");
        if (d < 1) throw ConfigError("config: d must be >= 1");
        if (replications < 1) throw ConfigError("config: replications must be >= 1");
        if (format != "csv" && format != "json") throw ConfigError("config: format must be csv or json");
        if (x0 != "random" && x0 != "empty" && x0 != "full") throw ConfigError("config: x0 must be random, empty or full");
        if (grid_points < 2) throw ConfigError("config: grid_points must be >= 2");
        if (samples < 1) throw ConfigError("config: samples must be >= 1");
        if (!(tolerance > 0.0)) throw ConfigError("config: tolerance must be positive");
        if (!(epsilon >= 0.0)) throw ConfigError("config: epsilon must be nonnegative");
        integrator.validate();
        if (rate_study)
            for (std::size_t i = 1; i < Ms.size(); ++i)
                if (Ms[i] <= Ms[i - 1]) throw ConfigError("config: M values must be distinct and increasing");
    }

    ModelParams params(double lambda, std::int64_t M) const {
        ModelParams p;
        p.lambda = lambda;
        p.M = M;
        p.d = d;
        return p;
    }

    std::size_t truncation(double lambda, std::int64_t M) const { return n ? *n : default_truncation(lambda, M); }

    SimConfig sim_config(const ModelParams& p, std::size_t n_report, std::uint64_t stream = 0) const {
        SimConfig c = SimConfig::defaults(p, n_report, seed);
        c.stream = stream;
        if (sim.warmup_time) c.warmup_time = *sim.warmup_time;
        if (sim.horizon_time) c.horizon_time = *sim.horizon_time;
        if (sim.batches) c.batches = *sim.batches;
        c.validate();
        return c;
    }
};

namespace detail {

template <class T>
std::vector<T> scalar_or_list(const nlohmann::json& j, const char* key) {
    const auto& v = j.at(key);
    if (v.is_array()) return v.get<std::vector<T>>();
    return {v.get<T>()};
}

}  // namespace detail

/// Parses the JSON config schema documented in docs/config.md.
inline ExperimentConfig parse_config(const nlohmann::json& j) {
    static const char* known[] = {"lambda", "M", "n", "d", "seed", "replications", "threads", "output_dir",
                                  "format", "sim", "integrator", "x0", "samples", "max_distinct_states",
                                  "grid_points", "tolerance", "epsilon"};
    if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return it.key() == k; }) ==
            std::end(known))
            throw ConfigError("config: unknown key '" + it.key() + "'");
    ExperimentConfig c;
    try {
        if (j.contains("lambda")) c.lambdas = detail::scalar_or_list<double>(j, "lambda");
        if (j.contains("M")) c.Ms = detail::scalar_or_list<std::int64_t>(j, "M");
        if (j.contains("n")) {
            const auto& v = j.at("n");
            if (v.is_string()) {
                if (v.get<std::string>() != "auto") throw ConfigError("config: n must be an integer or \"auto\"");
            } else {
                c.n = v.get<std::size_t>();
            }
        }
        if (j.contains("d")) c.d = j.at("d").get<int>();
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("replications")) c.replications = j.at("replications").get<std::size_t>();
        if (j.contains("threads")) c.threads = j.at("threads").get<std::size_t>();
        if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
        if (j.contains("format")) c.format = j.at("format").get<std::string>();
        if (j.contains("x0")) c.x0 = j.at("x0").get<std::string>();
        if (j.contains("samples")) c.samples = j.at("samples").get<std::size_t>();
        if (j.contains("max_distinct_states")) c.max_distinct_states = j.at("max_distinct_states").get<std::size_t>();
        if (j.contains("grid_points")) c.grid_points = j.at("grid_points").get<std::size_t>();
        if (j.contains("tolerance")) c.tolerance = j.at("tolerance").get<double>();
        if (j.contains("epsilon")) c.epsilon = j.at("epsilon").get<double>();
        if (j.contains("sim")) {
            const auto& s = j.at("sim");
            if (s.contains("warmup_time")) c.sim.warmup_time = s.at("warmup_time").get<double>();
            if (s.contains("horizon_time")) c.sim.horizon_time = s.at("horizon_time").get<double>();
            if (s.contains("batches")) c.sim.batches = s.at("batches").get<std::size_t>();
        }
        if (j.contains("integrator")) {
            const auto& s = j.at("integrator");
            if (s.contains("rel_tol")) c.integrator.rel_tol = s.at("rel_tol").get<double>();
            if (s.contains("abs_tol")) c.integrator.abs_tol = s.at("abs_tol").get<double>();
            if (s.contains("t_max")) c.integrator.t_max = s.at("t_max").get<double>();
            if (s.contains("settle_tol")) c.integrator.settle_tol = s.at("settle_tol").get<double>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config file not found or unreadable: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
    return parse_config(j);
}

// ---------------------------------------------------------------------------
// Output helpers

/// "# generated: <UTC timestamp>" line; the only non-deterministic line of any output.
inline std::string generated_line() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream os;
    os << "# generated: " << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

/// 17 significant digits, enough to round-trip a double.
inline std::string fmt17(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& body) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot open output file: " + path.string());
    out << body;
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

inline void write_json(const std::filesystem::path& path, nlohmann::json j) {
    j["generated"] = generated_line().substr(std::string("# generated: ").size());
    j["version"] = version_string();
    write_text(path, j.dump(2) + "\n");
}

inline nlohmann::json provenance(const ExperimentConfig& c) {
    return {{"seed", c.seed},
            {"rel_tol", c.integrator.rel_tol},
            {"abs_tol", c.integrator.abs_tol},
            {"settle_tol", c.integrator.settle_tol},
            {"version", version_string()}};
}

/// Trajectory CSV: timestamp line, provenance comment, then t,x_1..x_n.
inline std::string trajectory_csv(const Trajectory& tr, const ExperimentConfig& c) {
    std::ostringstream os;
    os << generated_line() << '\n';
    os << "# lambda=" << fmt17(tr.lambda()) << " n=" << tr.n() << " seed=" << c.seed
       << " rel_tol=" << fmt17(tr.config().rel_tol) << " abs_tol=" << fmt17(tr.config().abs_tol)
       << " settle_tol=" << fmt17(tr.config().settle_tol) << " version=" << version_string() << '\n';
    tr.write_csv(os);
    return os.str();
}

// ---------------------------------------------------------------------------
// Worker pool

/// Runs task(i) for i in [0, count) on `threads` workers. Exceptions are
/// captured per task and returned.
template <class Task>
std::vector<std::string> run_parallel(std::size_t count, std::size_t threads, Task&& task) {
    if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
    threads = std::min(threads, std::max<std::size_t>(count, 1));
    std::vector<std::string> errors(count);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < count; i = next++) {
            try {
                task(i);
            } catch (const std::exception& e) {
                errors[i] = e.what();
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();
    return errors;
}

// ---------------------------------------------------------------------------
// Rate study

struct RateRow {
    double lambda = 0.0;
    std::int64_t M = 0;
    std::size_t n = 0;
    double mse = 0.0;
    double ci = 0.0;
    std::size_t reps = 0;
    std::vector<double> replicate_mse;
    bool failed = false;
    std::string error;
};

struct RateFit {
    double lambda = 0.0;
    double slope = std::numeric_limits<double>::quiet_NaN();
    double slope_stderr = std::numeric_limits<double>::quiet_NaN();
    double corrected_slope = std::numeric_limits<double>::quiet_NaN();
    double corrected_slope_stderr = std::numeric_limits<double>::quiet_NaN();
    double envelope_constant = std::numeric_limits<double>::quiet_NaN();  // C at the smallest M
    double max_envelope_ratio = std::numeric_limits<double>::quiet_NaN(); // max over M of mse / (C env(M))
};

struct RateStudyResult {
    std::vector<RateRow> rows;  // sorted by (lambda, M)
    std::vector<RateFit> fits;  // one per lambda
    ExperimentConfig config;

    bool any_failed() const {
        return std::any_of(rows.begin(), rows.end(), [](const RateRow& r) { return r.failed; });
    }
};

/// (ln M)^3 (ln ln M)^2 / M, NaN where ln ln M <= 0.
inline double rate_envelope(double M) {
    const double l = std::log(M);
    const double ll = std::log(l);
    if (!(ll > 0.0)) return std::numeric_limits<double>::quiet_NaN();
    return l * l * l * ll * ll / M;
}

namespace detail {

inline RateFit fit_rows(double lambda, const std::vector<const RateRow*>& rows) {
    RateFit f;
    f.lambda = lambda;
    std::vector<double> x, y, xc, yc;
    for (const auto* r : rows) {
        if (r->failed || !(r->mse > 0.0)) continue;
        const double M = static_cast<double>(r->M);
        x.push_back(std::log(M));
        y.push_back(std::log(r->mse));
        const double env = rate_envelope(M);
        if (std::isfinite(env)) {
            xc.push_back(std::log(M));
            yc.push_back(std::log(r->mse / (env * M)));
            if (!std::isfinite(f.envelope_constant)) {
                f.envelope_constant = r->mse / env;
                f.max_envelope_ratio = 1.0;
            } else {
                f.max_envelope_ratio = std::max(f.max_envelope_ratio, r->mse / (f.envelope_constant * env));
            }
        }
    }
    if (x.size() >= 2) {
        const auto fit = stats::ols(x, y);
        f.slope = fit.slope;
        f.slope_stderr = fit.slope_stderr;
    }
    if (xc.size() >= 2) {
        const auto fit = stats::ols(xc, yc);
        f.corrected_slope = fit.slope;
        f.corrected_slope_stderr = fit.slope_stderr;
    }
    return f;
}

}  // namespace detail

/// Mean-square error at every (lambda, M) from independent replications
/// (stream = replication index), pooled as a t-interval over replications.
inline RateStudyResult rate_study(const ExperimentConfig& cfg) {
    cfg.validate(true);
    struct Cell {
        double lambda;
        std::int64_t M;
        std::size_t n;
    };
    std::vector<Cell> cells;
    for (double l : cfg.lambdas)
        for (auto M : cfg.Ms) cells.push_back({l, M, cfg.truncation(l, M)});
    const std::size_t reps = cfg.replications;
    std::vector<MseEstimate> results(cells.size() * reps);
    // Largest cells first keeps the pool busy until the end.
    std::vector<std::size_t> order(results.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return cells[a / reps].M > cells[b / reps].M; });
    const auto errors = run_parallel(order.size(), cfg.threads, [&](std::size_t i) {
        const std::size_t task = order[i];
        const auto& c = cells[task / reps];
        const auto p = cfg.params(c.lambda, c.M);
        results[task] = estimate_mse(p, cfg.sim_config(p, c.n, task % reps), c.n);
    });
    std::vector<std::string> task_errors(results.size());
    for (std::size_t i = 0; i < order.size(); ++i) task_errors[order[i]] = errors[i];

    RateStudyResult out;
    out.config = cfg;
    for (std::size_t ci = 0; ci < cells.size(); ++ci) {
        RateRow row;
        row.lambda = cells[ci].lambda;
        row.M = cells[ci].M;
        row.n = cells[ci].n;
        row.reps = reps;
        for (std::size_t r = 0; r < reps; ++r) {
            const std::size_t task = ci * reps + r;
            if (!task_errors[task].empty()) {
                row.failed = true;
                row.error = task_errors[task];
                break;
            }
            row.replicate_mse.push_back(results[task].mse);
        }
        if (row.failed) {
            row.mse = row.ci = std::numeric_limits<double>::quiet_NaN();
        } else if (reps >= 2) {
            const auto m = stats::mean_ci(row.replicate_mse);
            row.mse = m.mean;
            row.ci = m.halfwidth;
        } else {
            row.mse = results[ci * reps].mse;
            row.ci = results[ci * reps].ci;
        }
        out.rows.push_back(std::move(row));
    }
    std::sort(out.rows.begin(), out.rows.end(),
              [](const RateRow& a, const RateRow& b) { return std::tie(a.lambda, a.M) < std::tie(b.lambda, b.M); });
    std::vector<double> lambdas = cfg.lambdas;
    std::sort(lambdas.begin(), lambdas.end());
    lambdas.erase(std::unique(lambdas.begin(), lambdas.end()), lambdas.end());
    for (double l : lambdas) {
        std::vector<const RateRow*> rows;
        for (const auto& r : out.rows)
            if (r.lambda == l) rows.push_back(&r);
        out.fits.push_back(detail::fit_rows(l, rows));
    }
    return out;
}

inline std::string rate_study_csv(const RateStudyResult& r) {
    std::ostringstream os;
    os << generated_line() << '\n';
    os << "lambda,M,n,mse,ci,reps,seed,warmup_time,horizon_time,batches,rel_tol,abs_tol,failed,version\n";
    for (const auto& row : r.rows) {
        const auto sim = r.config.sim_config(r.config.params(row.lambda, row.M), row.n);
        os << fmt17(row.lambda) << ',' << row.M << ',' << row.n << ',' << fmt17(row.mse) << ',' << fmt17(row.ci) << ','
           << row.reps << ',' << r.config.seed << ',' << fmt17(sim.warmup_time) << ',' << fmt17(sim.horizon_time) << ','
           << sim.batches << ',' << fmt17(r.config.integrator.rel_tol) << ',' << fmt17(r.config.integrator.abs_tol)
           << ',' << (row.failed ? 1 : 0) << ',' << version_string() << '\n';
    }
    return os.str();
}

inline nlohmann::json to_json(const RateStudyResult& r) {
    nlohmann::json j;
    j["provenance"] = provenance(r.config);
    j["replications"] = r.config.replications;
    auto& rows = j["rows"] = nlohmann::json::array();
    for (const auto& row : r.rows) {
        nlohmann::json o{{"lambda", row.lambda}, {"M", row.M},     {"n", row.n},
                         {"reps", row.reps},     {"failed", row.failed}};
        if (!row.failed) {
            o["mse"] = row.mse;
            o["ci"] = row.ci;
            o["replicate_mse"] = row.replicate_mse;
        } else {
            o["error"] = row.error;
        }
        rows.push_back(o);
    }
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    auto& fits = j["fits"] = nlohmann::json::array();
    for (const auto& f : r.fits)
        fits.push_back({{"lambda", f.lambda},
                        {"slope", num(f.slope)},
                        {"slope_stderr", num(f.slope_stderr)},
                        {"corrected_slope", num(f.corrected_slope)},
                        {"corrected_slope_stderr", num(f.corrected_slope_stderr)},
                        {"envelope_constant", num(f.envelope_constant)},
                        {"max_envelope_ratio", num(f.max_envelope_ratio)}});
    return j;
}

}  // namespace supermarket

#endif  // SUPERMARKET_HARNESS_HPP
