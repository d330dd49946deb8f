#ifndef SUPERMARKET_CLI_HPP
#define SUPERMARKET_CLI_HPP

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "supermarket/core.hpp"
#include "supermarket/error.hpp"
#include "supermarket/harness.hpp"
#include "supermarket/lyapunov.hpp"
#include "supermarket/meanfield.hpp"
#include "supermarket/perturbation.hpp"
#include "supermarket/rng.hpp"
#include "supermarket/simulator.hpp"
#include "supermarket/stein.hpp"

namespace supermarket {

enum ExitCode : int { exit_ok = 0, exit_config = 1, exit_contract = 2 };

inline constexpr const char* cli_schema_help = R"(Outputs (floats carry 17 significant digits; CSV files start with a
"# generated: <UTC time>" line, the only line that differs between reruns):
  simulate        simulate.csv    k,s_k,ci,s_star_k    (format=json: simulate.json)
  meanfield       traj.csv        t,x_1..x_n           (format=json: traj.json)
  lyapunov-check  decay_report.json
  perturb-check   perturb_report.json
  stein-check     stein_report.json
  rate-study      rate_study.csv  lambda,M,n,mse,ci,reps,seed,warmup_time,
                                  horizon_time,batches,rel_tol,abs_tol,failed,version
                  summary.json    rows, per-lambda slope fits, provenance
--out names the output file; for rate-study it names the output directory.
Without --out, files go to output_dir from the config (default ".").
Exit status: 0 success, 1 configuration error, 2 numerical contract failure.
The config schema is described in docs/config.md.)";

namespace detail {

struct CliOverrides {
    std::string config;
    std::vector<double> lambdas;
    std::vector<std::int64_t> Ms;
    std::string n;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string x0;
    std::string format;
    std::optional<std::size_t> replications;
    std::optional<std::size_t> threads;
};

inline void add_common_flags(CLI::App* sub, CliOverrides& o) {
    sub->add_option("--config", o.config, "JSON config file (see docs/config.md)");
    sub->add_option("--lambda", o.lambdas, "Arrival rate per server in (0,1); a list for rate-study");
    sub->add_option("--M", o.Ms, "Number of servers; a list for rate-study");
    sub->add_option("--n", o.n, "Truncation level, or \"auto\" for ceil(3 ln M / ln(1/lambda))");
    sub->add_option("--seed", o.seed, "Base RNG seed");
    sub->add_option("--out", o.out, "Output file (output directory for rate-study)");
    sub->add_option("--x0", o.x0, "Initial condition: random, empty or full");
    sub->add_option("--format", o.format, "csv or json");
    sub->add_option("--replications", o.replications, "Independent replications per (lambda, M) cell");
    sub->add_option("--threads", o.threads, "Worker threads, 0 for all cores");
}

inline ExperimentConfig resolve_config(const CliOverrides& o) {
    ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
    if (!o.lambdas.empty()) c.lambdas = o.lambdas;
    if (!o.Ms.empty()) c.Ms = o.Ms;
    if (o.n == "auto") {
        c.n.reset();
    } else if (!o.n.empty()) {
        try {
            std::size_t used = 0;
            const long v = std::stol(o.n, &used);
            if (used != o.n.size() || v < 1) throw std::invalid_argument(o.n);
            c.n = static_cast<std::size_t>(v);
        } catch (const std::logic_error&) {
            throw ConfigError("--n must be a positive integer or \"auto\", got '" + o.n + "'");
        }
    }
    if (o.seed) c.seed = *o.seed;
    if (!o.x0.empty()) c.x0 = o.x0;
    if (!o.format.empty()) c.format = o.format;
    if (o.replications) c.replications = *o.replications;
    if (o.threads) c.threads = *o.threads;
    return c;
}

inline std::filesystem::path output_path(const CliOverrides& o, const ExperimentConfig& c, const std::string& name) {
    if (!o.out.empty()) return o.out;
    return std::filesystem::path(c.output_dir) / name;
}

inline ShiftedState initial_state(const ExperimentConfig& c, double lambda, std::size_t n) {
    if (c.x0 == "empty") return shift(TailState{std::vector<double>(n, 0.0)}, lambda);
    if (c.x0 == "full") return shift(TailState{std::vector<double>(n, 1.0)}, lambda);
    Rng rng(c.seed, 0);
    return random_valid_state(lambda, n, rng);
}

inline nlohmann::json cert_json(const LyapunovCert& cert) {
    nlohmann::json j{{"lambda", cert.lambda}, {"n", cert.n}, {"certified", cert.certified},
                     {"violations", cert.violations}};
    if (cert.variant == CertVariant::base) {
        j["k_lambda"] = cert.k_lambda;
        j["weights"] = cert.weights;
        j["delta"] = cert.delta;
    } else {
        j["k_tilde"] = cert.k_tilde;
        j["weights_tilde"] = cert.weights_tilde;
        j["delta_tilde"] = cert.delta_tilde;
        j["t_tilde"] = cert.t_tilde;
    }
    return j;
}

inline int cmd_simulate(const CliOverrides& o, std::ostream& out) {
    auto c = resolve_config(o);
    c.validate();
    const double lambda = c.lambdas.front();
    const auto M = c.Ms.front();
    const std::size_t n = c.truncation(lambda, M);
    const auto p = c.params(lambda, M);
    const auto sim = c.sim_config(p, n);
    const auto est = simulate(p, sim);
    const auto star = equilibrium(lambda, n);
    const bool json = c.format == "json";
    const auto path = output_path(o, c, json ? "simulate.json" : "simulate.csv");
    if (json) {
        auto j = nlohmann::json{{"lambda", lambda},
                                {"M", M},
                                {"n", n},
                                {"mean_tail", est.mean_tail},
                                {"tail_ci", est.tail_ci},
                                {"s_star", star},
                                {"mse", est.full_mse},
                                {"mse_ci", est.full_mse_ci},
                                {"total_events", est.total_events},
                                {"provenance", provenance(c)}};
        write_json(path, j);
    } else {
        std::ostringstream os;
        os << generated_line() << '\n';
        os << "# lambda=" << fmt17(lambda) << " M=" << M << " n=" << n << " seed=" << c.seed
           << " warmup_time=" << fmt17(sim.warmup_time) << " horizon_time=" << fmt17(sim.horizon_time)
           << " mse=" << fmt17(est.full_mse) << " mse_ci=" << fmt17(est.full_mse_ci) << " version=" << version_string()
           << '\n';
        os << "k,s_k,ci,s_star_k\n";
        for (std::size_t k = 0; k < n; ++k)
            os << k + 1 << ',' << fmt17(est.mean_tail[k]) << ',' << fmt17(est.tail_ci[k]) << ',' << fmt17(star[k])
               << '\n';
        write_text(path, os.str());
    }
    out << "simulate: lambda=" << lambda << " M=" << M << " n=" << n << " mse=" << est.full_mse << " +/- "
        << est.full_mse_ci << " -> " << path.string() << '\n';
    return exit_ok;
}

inline int cmd_meanfield(const CliOverrides& o, std::ostream& out) {
    auto c = resolve_config(o);
    c.validate();
    const double lambda = c.lambdas.front();
    const std::size_t n = c.truncation(lambda, c.Ms.front());
    const auto traj = integrate(initial_state(c, lambda, n), lambda, n, c.integrator);
    const bool json = c.format == "json";
    const auto path = output_path(o, c, json ? "traj.json" : "traj.csv");
    if (json) {
        nlohmann::json j{{"lambda", lambda}, {"n", n}, {"provenance", provenance(c)}};
        auto& t = j["t"] = nlohmann::json::array();
        auto& x = j["x"] = nlohmann::json::array();
        for (std::size_t i = 0; i < traj.points(); ++i) {
            t.push_back(traj.time(i));
            x.push_back(traj.state(i).x);
        }
        write_json(path, j);
    } else {
        write_text(path, trajectory_csv(traj, c));
    }
    const double final_l1 = traj.l1_at(traj.t_end());
    out << "meanfield: lambda=" << lambda << " n=" << n << " t_end=" << traj.t_end() << " |x(t_end)|_1=" << final_l1
        << " -> " << path.string() << '\n';
    if (c.integrator.t_max == 0.0 && !(final_l1 < c.integrator.settle_tol)) {
        out << "meanfield: trajectory did not settle below " << c.integrator.settle_tol << '\n';
        return exit_contract;
    }
    return exit_ok;
}

inline int cmd_lyapunov(const CliOverrides& o, std::ostream& out) {
    auto c = resolve_config(o);
    c.validate();
    const double lambda = c.lambdas.front();
    const std::size_t n = c.truncation(lambda, c.Ms.front());
    const auto cert = base_weights(lambda, n);
    const auto x0 = initial_state(c, lambda, n);
    const auto traj = integrate(x0, lambda, n, c.integrator);
    const auto report = verify_decay(traj, cert, 0.0, c.grid_points, c.tolerance);
    bool sandwich = true;
    for (std::size_t i = 0; i < c.grid_points; ++i) {
        const double t = traj.t_end() * static_cast<double>(i) / static_cast<double>(c.grid_points - 1);
        sandwich = sandwich && sandwich_holds(cert, traj.at(t).x, 1e-12);
    }
    auto j = to_json(report);
    j["certificate"] = cert_json(cert);
    j["sandwich_holds"] = sandwich;
    j["t_end"] = traj.t_end();
    j["x0"] = x0.x;
    j["provenance"] = provenance(c);
    const auto path = output_path(o, c, "decay_report.json");
    write_json(path, j);
    const bool ok = report.passed() && sandwich;
    out << "lyapunov-check: lambda=" << lambda << " n=" << n << " delta=" << cert.delta
        << " max_ratio=" << report.max_ratio << " certified_regime=" << (cert.certified ? "yes" : "no")
        << (ok ? " PASS" : " FAIL") << " -> " << path.string() << '\n';
    return ok ? exit_ok : exit_contract;
}

inline int cmd_perturb(const CliOverrides& o, std::ostream& out) {
    auto c = resolve_config(o);
    c.validate();
    const double lambda = c.lambdas.front();
    const std::size_t n = c.truncation(lambda, c.Ms.front());
    const auto tilde = tilde_weights(lambda, n);
    SensitivitySetup setup{initial_state(c, lambda, n), std::vector<double>(n, 0.0), c.epsilon};
    setup.z[0] = 1.0;
    const auto rem = remainder(setup, lambda, n, c.integrator);
    const auto env = sensitivity_envelope_check(rem.trajectory, tilde, c.tolerance, c.grid_points);
    const auto bounds = remainder_bound_check(rem, tilde, c.grid_points);
    nlohmann::json j;
    j["certificate"] = cert_json(tilde);
    j["epsilon"] = c.epsilon;
    j["envelope"] = {{"passed", env.passed},
                     {"max_excess", env.max_excess},
                     {"max_expansion", env.max_expansion},
                     {"grid_points", env.grid_points},
                     {"integral_bound", envelope_integral_bound(tilde)}};
    j["remainder"] = {{"passed", bounds.passed()},
                      {"small_time_sup", bounds.small_time_sup},
                      {"small_time_bound", bounds.small_time_bound},
                      {"large_time_exercised", bounds.large_time_exercised},
                      {"large_time_max_ratio", bounds.large_time_max_ratio},
                      {"large_time_rate", bounds.large_time_rate},
                      {"integral", bounds.integral},
                      {"integral_bound", bounds.integral_bound},
                      {"tail_bound", rem.tail_bound},
                      {"quadrature_error", rem.quadrature_error}};
    j["provenance"] = provenance(c);
    const auto path = output_path(o, c, "perturb_report.json");
    write_json(path, j);
    const bool ok = env.passed && bounds.passed();
    out << "perturb-check: lambda=" << lambda << " n=" << n << " eps=" << c.epsilon
        << " envelope=" << (env.passed ? "ok" : "violated") << " remainder_integral=" << bounds.integral << " <= "
        << bounds.integral_bound << (ok ? " PASS" : " FAIL") << " -> " << path.string() << '\n';
    return ok ? exit_ok : exit_contract;
}

inline int cmd_stein(const CliOverrides& o, std::ostream& out) {
    auto c = resolve_config(o);
    c.validate();
    const double lambda = c.lambdas.front();
    const auto M = c.Ms.front();
    const std::size_t n = c.truncation(lambda, M);
    const auto p = c.params(lambda, M);
    SteinConfig sc;
    sc.samples = c.samples;
    sc.max_distinct_states = c.max_distinct_states;
    const auto r = stein_decomposition(p, c.sim_config(p, n), n, c.integrator, sc);
    auto j = to_json(r);
    j["provenance"] = provenance(c);
    const auto path = output_path(o, c, "stein_report.json");
    write_json(path, j);
    const bool ok = !r.partial && r.bar_residual.sigmas() <= 3.0 && r.identity_residual.sigmas() <= 3.0;
    out << "stein-check: lambda=" << lambda << " M=" << M << " n=" << n << " samples=" << r.samples
        << " mse=" << r.lhs_mse.mean << " bar_sigmas=" << r.bar_residual.sigmas()
        << " identity_sigmas=" << r.identity_residual.sigmas() << (r.partial ? " partial" : "")
        << (ok ? " PASS" : " FAIL") << " -> " << path.string() << '\n';
    return ok ? exit_ok : exit_contract;
}

inline int cmd_rate_study(const CliOverrides& o, std::ostream& out) {
    auto c = resolve_config(o);
    if (!o.out.empty()) c.output_dir = o.out;
    c.validate(true);
    const auto r = rate_study(c);
    const std::filesystem::path dir = c.output_dir;
    write_text(dir / "rate_study.csv", rate_study_csv(r));
    write_json(dir / "summary.json", to_json(r));
    for (const auto& f : r.fits)
        out << "rate-study: lambda=" << f.lambda << " slope=" << f.slope << " +/- " << f.slope_stderr
            << " corrected_slope=" << f.corrected_slope << " max_envelope_ratio=" << f.max_envelope_ratio << '\n';
    for (const auto& row : r.rows)
        if (row.failed) out << "rate-study: cell lambda=" << row.lambda << " M=" << row.M << " failed: " << row.error << '\n';
    out << "rate-study: wrote " << (dir / "rate_study.csv").string() << " and " << (dir / "summary.json").string()
        << '\n';
    return r.any_failed() ? exit_contract : exit_ok;
}

}  // namespace detail

/// Entry point of the `supermarket` tool; returns the process exit status.
inline int cli_dispatch(int argc, const char* const* argv, std::ostream& out = std::cout,
                        std::ostream& err = std::cerr) {
    CLI::App app{"Supermarket model: simulation, mean-field ODE and error-bound checks"};
    app.footer(cli_schema_help);
    app.set_version_flag("--version", version_string());
    app.require_subcommand(1);
    detail::CliOverrides o;
    struct Entry {
        const char* name;
        const char* help;
        int (*run)(const detail::CliOverrides&, std::ostream&);
    };
    const Entry entries[] = {
        {"simulate", "Stationary tail and mean-square error from one CTMC run", detail::cmd_simulate},
        {"meanfield", "Integrate the mean-field ODE and write the trajectory", detail::cmd_meanfield},
        {"lyapunov-check", "Check the weighted l1 decay certificate along an ODE trajectory", detail::cmd_lyapunov},
        {"perturb-check", "Check the sensitivity envelope and second-order remainder bounds", detail::cmd_perturb},
        {"stein-check", "Stein decomposition and BAR residual on a stationary sample", detail::cmd_stein},
        {"rate-study", "Mean-square error across M and fitted convergence rate", detail::cmd_rate_study},
    };
    std::vector<std::pair<CLI::App*, const Entry*>> subs;
    for (const auto& e : entries) {
        auto* sub = app.add_subcommand(e.name, e.help);
        sub->footer(cli_schema_help);
        detail::add_common_flags(sub, o);
        subs.emplace_back(sub, &e);
    }
    if (argc > 1 && argv[1][0] != '-' &&
        std::none_of(std::begin(entries), std::end(entries), [&](const Entry& e) { return std::string(argv[1]) == e.name; })) {
        err << "error: unknown subcommand '" << argv[1] << "'\n\n" << app.help();
        return exit_config;
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        // Help and version requests carry exit code 0 and print through app.exit.
        if (app.exit(e, out, err) == 0) return exit_ok;
        err << '\n' << app.help();
        return exit_config;
    }
    for (auto& [sub, entry] : subs) {
        if (!sub->parsed()) continue;
        try {
            return entry->run(o, out);
        } catch (const ConfigError& e) {
            err << entry->name << ": " << e.what() << '\n';
            return exit_config;
        } catch (const DomainError& e) {
            err << entry->name << ": " << e.what() << '\n';
            return exit_config;
        } catch (const std::exception& e) {
            err << entry->name << ": " << e.what() << '\n';
            return exit_contract;
        }
    }
    err << app.help();
    return exit_config;
}

}  // namespace supermarket

#endif  // SUPERMARKET_CLI_HPP
