#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "supermarket/cli.hpp"
#include "supermarket/harness.hpp"

using namespace supermarket;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("supermarket_test_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
                ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& s) const { return (path / s).string(); }
};

struct CliResult {
    int code;
    std::string out;
    std::string err;
};

CliResult run(std::vector<std::string> args) {
    args.insert(args.begin(), "supermarket");
    std::vector<const char*> argv;
    for (auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli_dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> lines(const std::string& s) {
    std::vector<std::string> v;
    std::istringstream in(s);
    for (std::string l; std::getline(in, l);) v.push_back(l);
    return v;
}

std::string drop_first_line(const std::string& s) { return s.substr(s.find('\n') + 1); }

void write_file(const std::string& path, const std::string& body) { std::ofstream(path) << body; }

// Small and fast: short horizon, two M values.
ExperimentConfig tiny_study() {
    ExperimentConfig c;
    c.lambdas = {0.5};
    c.Ms = {8, 32};
    c.replications = 3;
    c.sim.warmup_time = 20.0;
    c.sim.horizon_time = 400.0;
    c.sim.batches = 5;
    c.threads = 1;
    return c;
}

}  // namespace

TEST(Config, ScalarsAndListsParse) {
    const auto c = parse_config(nlohmann::json::parse(R"({"lambda": 0.7, "M": [16, 64], "n": "auto", "seed": 9,
        "sim": {"horizon_time": 500, "batches": 10}, "integrator": {"rel_tol": 1e-9}})"));
    EXPECT_EQ(c.lambdas, std::vector<double>{0.7});
    EXPECT_EQ(c.Ms, (std::vector<std::int64_t>{16, 64}));
    EXPECT_FALSE(c.n.has_value());
    EXPECT_EQ(c.seed, 9u);
    EXPECT_EQ(*c.sim.horizon_time, 500.0);
    EXPECT_EQ(*c.sim.batches, 10u);
    EXPECT_EQ(c.integrator.rel_tol, 1e-9);
    EXPECT_EQ(c.truncation(0.7, 16), default_truncation(0.7, 16));
}

TEST(Config, IntegerTruncationOverrides) {
    const auto c = parse_config(nlohmann::json::parse(R"({"n": 12})"));
    EXPECT_EQ(c.truncation(0.5, 1000), 12u);
}

TEST(Config, RejectsBadInput) {
    EXPECT_THROW(parse_config(nlohmann::json::parse(R"({"lambda": []})")).validate(), ConfigError);
    EXPECT_THROW(parse_config(nlohmann::json::parse(R"({"lambda": 1.2})")).validate(), ConfigError);
    EXPECT_THROW(parse_config(nlohmann::json::parse(R"({"n": "many"})")), ConfigError);
    EXPECT_THROW(parse_config(nlohmann::json::parse(R"({"lamda": 0.5})")), ConfigError);
    EXPECT_THROW(parse_config(nlohmann::json::parse(R"({"M": "ten"})")), ConfigError);
    EXPECT_THROW(parse_config(nlohmann::json::parse(R"({"format": "xml"})")).validate(), ConfigError);
    EXPECT_THROW(parse_config(nlohmann::json::parse("[1, 2]")), ConfigError);
}

TEST(Config, RateStudyNeedsIncreasingM) {
    const auto c = parse_config(nlohmann::json::parse(R"({"M": [64, 16]})"));
    EXPECT_NO_THROW(c.validate());
    EXPECT_THROW(c.validate(true), ConfigError);
    const auto d = parse_config(nlohmann::json::parse(R"({"M": [16, 16]})"));
    EXPECT_THROW(d.validate(true), ConfigError);
}

TEST(Config, MissingFileNamesPath) {
    try {
        load_config("/nonexistent/dir/cfg.json");
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/cfg.json"), std::string::npos);
    }
}

TEST(Output, SeventeenDigitsRoundTrip) {
    for (double v : {0.1, 1.0 / 3.0, 2.0 / 7.0 * 1e-12, 0.7}) EXPECT_EQ(std::stod(fmt17(v)), v);
    EXPECT_EQ(fmt17(0.7), "0.69999999999999996");
}

TEST(Output, GeneratedLinePrefix) { EXPECT_EQ(generated_line().rfind("# generated: ", 0), 0u); }

TEST(RateEnvelope, MatchesDirectFormula) {
    for (double M : {16.0, 100.0, 4096.0}) {
        const double l = std::log(M);
        EXPECT_NEAR(rate_envelope(M), std::pow(l, 3) * std::pow(std::log(l), 2) / M, 1e-15);
    }
    EXPECT_TRUE(std::isnan(rate_envelope(2.0)));
    EXPECT_TRUE(std::isnan(rate_envelope(1.0)));
    EXPECT_TRUE(std::isfinite(rate_envelope(3.0)));
}

TEST(RateFit, RecoversSyntheticPowerLaw) {
    std::vector<RateRow> rows;
    for (std::int64_t M : {16, 64, 256, 1024}) {
        RateRow r;
        r.lambda = 0.5;
        r.M = M;
        r.mse = 3.0 * rate_envelope(static_cast<double>(M));
        rows.push_back(r);
    }
    std::vector<const RateRow*> ptrs;
    for (auto& r : rows) ptrs.push_back(&r);
    const auto f = detail::fit_rows(0.5, ptrs);
    EXPECT_NEAR(f.corrected_slope, -1.0, 1e-12);
    EXPECT_NEAR(f.envelope_constant, 3.0, 1e-12);
    EXPECT_NEAR(f.max_envelope_ratio, 1.0, 1e-12);
    EXPECT_GT(f.slope, -1.0);  // log factors flatten the raw slope
}

TEST(RateFit, PureInverseMHasUnitSlope) {
    std::vector<RateRow> rows;
    for (std::int64_t M : {10, 100, 1000}) {
        RateRow r;
        r.M = M;
        r.mse = 0.2 / static_cast<double>(M);
        rows.push_back(r);
    }
    std::vector<const RateRow*> ptrs;
    for (auto& r : rows) ptrs.push_back(&r);
    const auto f = detail::fit_rows(0.5, ptrs);
    EXPECT_NEAR(f.slope, -1.0, 1e-12);
    EXPECT_NEAR(f.slope_stderr, 0.0, 1e-9);
}

TEST(WorkerPool, CapturesErrorsPerTask) {
    std::vector<int> hit(10, 0);
    const auto errors = run_parallel(10, 3, [&](std::size_t i) {
        if (i == 4) throw std::runtime_error("boom");
        hit[i] = 1;
    });
    EXPECT_EQ(errors[4], "boom");
    for (std::size_t i = 0; i < 10; ++i) {
        if (i != 4) {
            EXPECT_EQ(hit[i], 1);
        }
    }
}

TEST(RateStudy, RowsCompleteAndSorted) {
    auto c = tiny_study();
    c.lambdas = {0.6, 0.4};
    c.Ms = {8, 16};
    const auto r = rate_study(c);
    ASSERT_EQ(r.rows.size(), 4u);
    EXPECT_EQ(r.rows[0].lambda, 0.4);
    EXPECT_EQ(r.rows[0].M, 8);
    EXPECT_EQ(r.rows[3].lambda, 0.6);
    EXPECT_EQ(r.rows[3].M, 16);
    for (const auto& row : r.rows) {
        EXPECT_FALSE(row.failed);
        EXPECT_EQ(row.replicate_mse.size(), 3u);
        EXPECT_EQ(row.n, default_truncation(row.lambda, row.M));
        EXPECT_GT(row.mse, 0.0);
    }
    EXPECT_EQ(r.fits.size(), 2u);
}

TEST(RateStudy, ThreadCountDoesNotChangeResults) {
    auto c = tiny_study();
    const auto a = rate_study(c);
    c.threads = 3;
    const auto b = rate_study(c);
    EXPECT_EQ(drop_first_line(rate_study_csv(a)), drop_first_line(rate_study_csv(b)));
}

TEST(RateStudy, ReplicationsAreIndependentStreams) {
    const auto r = rate_study(tiny_study());
    const auto& v = r.rows.front().replicate_mse;
    EXPECT_NE(v[0], v[1]);
    EXPECT_NE(v[1], v[2]);
}

TEST(RateStudy, HeavierTrafficLogged) {
    auto c = tiny_study();
    c.lambdas = {0.5, 0.9};
    c.Ms = {16};
    const auto r = rate_study(c);
    ASSERT_EQ(r.rows.size(), 2u);
    // Recorded only; short runs at lambda = 0.9 are not reliably ordered.
    RecordProperty("mse_lambda_0_5", std::to_string(r.rows[0].mse));
    RecordProperty("mse_lambda_0_9", std::to_string(r.rows[1].mse));
    std::cout << "mse(0.5)=" << r.rows[0].mse << " mse(0.9)=" << r.rows[1].mse << '\n';
}

TEST(RateStudy, PooledIntervalShrinksWithReplications) {
    auto c = tiny_study();
    c.Ms = {8};
    c.replications = 4;
    const double ci4 = rate_study(c).rows[0].ci;
    c.replications = 16;
    const double ci16 = rate_study(c).rows[0].ci;
    // sqrt(4) from the sample size times t(3)/t(15) = 1.49; sample spread is noisy.
    EXPECT_GT(ci4 / ci16, 1.5);
    EXPECT_LT(ci4 / ci16, 8.0);
}

TEST(RateStudy, FailedCellIsFlagged) {
    RateStudyResult r;
    r.config = tiny_study();
    RateRow row;
    row.lambda = 0.5;
    row.M = 8;
    row.n = 1;
    row.failed = true;
    row.error = "x";
    row.mse = row.ci = std::nan("");
    r.rows.push_back(row);
    EXPECT_TRUE(r.any_failed());
    const auto csv = lines(rate_study_csv(r));
    ASSERT_EQ(csv.size(), 3u);
    EXPECT_NE(csv[2].find(std::string(",1,") + version_string()), std::string::npos);
    EXPECT_TRUE(to_json(r)["rows"][0]["failed"].get<bool>());
}

TEST(Cli, HelpExitsZeroAndDocumentsFlags) {
    const auto r = run({"rate-study", "--help"});
    EXPECT_EQ(r.code, 0);
    for (const char* flag : {"--config", "--lambda", "--M", "--n", "--seed", "--out", "--x0"})
        EXPECT_NE(r.out.find(flag), std::string::npos) << flag;
    EXPECT_NE(r.out.find("lambda,M,n,mse,ci,reps"), std::string::npos);
    EXPECT_EQ(run({"--help"}).code, 0);
}

TEST(Cli, UnknownSubcommandPrintsUsage) {
    const auto r = run({"frobnicate"});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("frobnicate"), std::string::npos);
    EXPECT_NE(r.err.find("Usage"), std::string::npos);
    EXPECT_EQ(run({}).code, 1);
}

TEST(Cli, MissingConfigNamesPath) {
    TempDir tmp;
    const auto path = tmp / "missing.json";
    const auto r = run({"rate-study", "--config", path});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find(path), std::string::npos);
}

TEST(Cli, BadFlagValueIsConfigError) {
    EXPECT_EQ(run({"meanfield", "--lambda", "1.5"}).code, 1);
    EXPECT_EQ(run({"meanfield", "--n", "abc"}).code, 1);
    EXPECT_EQ(run({"meanfield", "--x0", "sideways"}).code, 1);
    EXPECT_EQ(run({"meanfield", "--bogus-flag"}).code, 1);
}

TEST(Cli, MeanfieldWritesTrajectoryCsv) {
    TempDir tmp;
    const auto out = tmp / "traj.csv";
    const auto r = run({"meanfield", "--lambda", "0.5", "--n", "10", "--x0", "random", "--out", out});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto ls = lines(slurp(out));
    ASSERT_GT(ls.size(), 4u);
    EXPECT_EQ(ls[0].rfind("# generated: ", 0), 0u);
    EXPECT_EQ(ls[1].rfind("# lambda=", 0), 0u);
    EXPECT_NE(ls[1].find("version="), std::string::npos);
    EXPECT_EQ(ls[2], "t,x_1,x_2,x_3,x_4,x_5,x_6,x_7,x_8,x_9,x_10");
    std::size_t commas = 0;
    for (char ch : ls[3]) commas += ch == ',';
    EXPECT_EQ(commas, 10u);
}

TEST(Cli, OutputsDeterministicModuloTimestamp) {
    TempDir tmp;
    ASSERT_EQ(run({"meanfield", "--seed", "3", "--n", "8", "--out", tmp / "a.csv"}).code, 0);
    ASSERT_EQ(run({"meanfield", "--seed", "3", "--n", "8", "--out", tmp / "b.csv"}).code, 0);
    EXPECT_EQ(drop_first_line(slurp(tmp / "a.csv")), drop_first_line(slurp(tmp / "b.csv")));
    ASSERT_EQ(run({"meanfield", "--seed", "4", "--n", "8", "--out", tmp / "c.csv"}).code, 0);
    EXPECT_NE(drop_first_line(slurp(tmp / "a.csv")), drop_first_line(slurp(tmp / "c.csv")));
}

TEST(Cli, RateStudyWritesCsvAndSummary) {
    TempDir tmp;
    write_file(tmp / "cfg.json", R"({"lambda": 0.5, "M": [8, 32], "replications": 2, "threads": 1,
        "sim": {"warmup_time": 20, "horizon_time": 300, "batches": 4}})");
    const auto r = run({"rate-study", "--config", tmp / "cfg.json", "--out", tmp / "out"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto csv = lines(slurp(tmp / "out/rate_study.csv"));
    ASSERT_EQ(csv.size(), 4u);
    EXPECT_EQ(csv[1].rfind("lambda,M,n,mse,ci,reps,", 0), 0u);
    EXPECT_EQ(csv[2].rfind("0.5,8,", 0), 0u);
    const auto j = nlohmann::json::parse(slurp(tmp / "out/summary.json"));
    EXPECT_EQ(j["rows"].size(), 2u);
    EXPECT_EQ(j["fits"].size(), 1u);
    EXPECT_TRUE(j["provenance"].contains("version"));
    EXPECT_EQ(j["provenance"]["seed"], 1);
}

TEST(Cli, FlagsOverrideConfig) {
    TempDir tmp;
    write_file(tmp / "cfg.json", R"({"lambda": 0.9, "n": 5, "output_dir": ")" + tmp.path.string() + R"("})");
    const auto r = run({"meanfield", "--config", tmp / "cfg.json", "--lambda", "0.3"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto ls = lines(slurp(tmp / "traj.csv"));
    EXPECT_EQ(ls[1].rfind("# lambda=0.29999999999999999 n=5", 0), 0u) << ls[1];
}

TEST(Cli, LyapunovCheckPassesAndReports) {
    TempDir tmp;
    const auto r = run({"lyapunov-check", "--lambda", "0.5", "--n", "12", "--out", tmp / "decay.json"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto j = nlohmann::json::parse(slurp(tmp / "decay.json"));
    EXPECT_TRUE(j["passed"].get<bool>());
    EXPECT_LE(j["max_ratio"].get<double>(), 1.0 + 1e-6);
    EXPECT_EQ(j["certificate"]["weights"].size(), 13u);
}

TEST(Cli, LyapunovCheckBelowThresholdIsConfigError) {
    EXPECT_EQ(run({"lyapunov-check", "--lambda", "0.9", "--n", "1"}).code, 1);
}

TEST(Cli, ContractFailureExitsTwo) {
    TempDir tmp;
    // A one-state budget cuts the Stein sample short.
    write_file(tmp / "cfg.json", R"({"samples": 50, "max_distinct_states": 1, "M": 10, "n": 4})");
    const auto r = run({"stein-check", "--config", tmp / "cfg.json", "--out", tmp / "s.json"});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.out.find("FAIL"), std::string::npos);
}

TEST(Cli, FixedHorizonMeanfieldSucceeds) {
    TempDir tmp;
    write_file(tmp / "cfg.json", R"({"integrator": {"t_max": 0.5}, "n": 6})");
    EXPECT_EQ(run({"meanfield", "--config", tmp / "cfg.json", "--out", tmp / "t.csv"}).code, 0);
}

TEST(Cli, PerturbAndSteinReportsWritten) {
    TempDir tmp;
    ASSERT_EQ(run({"perturb-check", "--lambda", "0.5", "--n", "10", "--out", tmp / "p.json"}).code, 0);
    const auto p = nlohmann::json::parse(slurp(tmp / "p.json"));
    EXPECT_TRUE(p["envelope"]["passed"].get<bool>());
    EXPECT_TRUE(p["remainder"]["passed"].get<bool>());
    const auto r = run({"stein-check", "--lambda", "0.5", "--M", "20", "--n", "6", "--seed", "7", "--out", tmp / "s.json"});
    ASSERT_EQ(r.code, 0) << r.out << r.err;
    const auto s = nlohmann::json::parse(slurp(tmp / "s.json"));
    for (const char* key : {"lhs_mse", "truncation_term", "second_order_term", "bar_residual", "provenance"})
        EXPECT_TRUE(s.contains(key)) << key;
}

TEST(Cli, SimulateJsonFormat) {
    TempDir tmp;
    write_file(tmp / "cfg.json", R"({"lambda": 0.5, "M": 10, "format": "json",
        "sim": {"warmup_time": 10, "horizon_time": 200, "batches": 4}})");
    ASSERT_EQ(run({"simulate", "--config", tmp / "cfg.json", "--out", tmp / "sim.json"}).code, 0);
    const auto j = nlohmann::json::parse(slurp(tmp / "sim.json"));
    EXPECT_EQ(j["mean_tail"].size(), default_truncation(0.5, 10));
    EXPECT_GT(j["mse"].get<double>(), 0.0);
}
