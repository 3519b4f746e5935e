#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "stochtransport/cli.hpp"

using namespace stochtransport;
using cli::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("stochtransport_test_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

fs::path write_config(const fs::path& dir, const json& j) {
    const fs::path p = dir / "config.json";
    std::ofstream(p) << j.dump(2);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

int run(const fs::path& config, const fs::path& out, std::string& log, unsigned workers = 1) {
    cli::RunRequest req;
    req.config = config;
    req.out = out;
    req.workers = workers;
    std::ostringstream os;
    const int code = cli::run(req, os);
    log = os.str();
    return code;
}

json veps_bm() {
    return {{"experiment", "veps"},
            {"kernel", {{"type", "bm"}}},
            {"veps", {{"epsilons", {0.1, 0.05}}, {"t_max", 0.5}, {"dt", 0.01}, {"window", {0.1, 0.5}}}}};
}

}  // namespace

TEST_CASE("git blob hash") {
    CHECK(cli::git_blob_sha1("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    CHECK(cli::git_blob_sha1("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST_CASE("missing kernel block is an invalid config naming the field") {
    const auto dir = scratch("missing_kernel");
    json c = veps_bm();
    c.erase("kernel");
    std::string log;
    CHECK(run(write_config(dir, c), dir / "out", log) == cli::kInvalidConfig);
    CHECK(log.find("kernel") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "out" / "manifest.json"));
}

TEST_CASE("unknown keys and bad values are rejected") {
    const auto dir = scratch("unknown");
    std::string log;
    json c = veps_bm();
    c["veps"]["bogus"] = 1;
    CHECK(run(write_config(dir, c), dir / "out", log) == cli::kInvalidConfig);
    CHECK(log.find("veps.bogus") != std::string::npos);

    c = veps_bm();
    c["kernel"] = {{"type", "fbm"}, {"hurst", 1.5}};
    CHECK(run(write_config(dir, c), dir / "out", log) == cli::kInvalidConfig);
    CHECK(log.find("kernel") != std::string::npos);

    c = veps_bm();
    c["mean"] = json::object();
    CHECK(run(write_config(dir, c), dir / "out", log) == cli::kInvalidConfig);
    CHECK(log.find("mean") != std::string::npos);

    c = veps_bm();
    c["experiment"] = "nope";
    CHECK(run(write_config(dir, c), dir / "out", log) == cli::kInvalidConfig);
    CHECK(log.find("experiment") != std::string::npos);

    std::ofstream(dir / "broken.json") << "{";
    CHECK(run(dir / "broken.json", dir / "out", log) == cli::kInvalidConfig);
    CHECK(run(dir / "absent.json", dir / "out", log) == cli::kInvalidConfig);
}

TEST_CASE("resolved config records every default") {
    const json r = cli::resolve_config({{"experiment", "veps"}, {"kernel", {{"type", "bm"}}}});
    CHECK(r["seed"] == 0);
    CHECK(r["veps"]["epsilons"].size() == 3);
    CHECK(r["problem"].contains("sigmas"));
    CHECK(cli::resolve_config(r) == r);
}

TEST_CASE("Brownian veps run reports the one half plateau") {
    const auto dir = scratch("veps_bm");
    std::string log;
    CHECK(run(write_config(dir, veps_bm()), dir / "out", log) == cli::kOk);
    const json s = read_json(dir / "out" / "summary.json");
    CHECK(s["pass"] == true);
    bool found = false;
    for (const auto& c : s["checks"])
        if (c["name"] == "bm_plateau") {
            found = true;
            CHECK(c["pass"] == true);
            CHECK(c["value"].get<double>() <= 1e-10);
        }
    CHECK(found);
    std::istringstream csv(slurp(dir / "out" / "veps_eps0.csv"));
    std::string line;
    std::getline(csv, line);
    CHECK(line == "t,vdot,v,gamma_half,residual");
    int rows = 0;
    while (std::getline(csv, line)) {
        const double t = std::stod(line);
        const double vdot = std::stod(line.substr(line.find(',') + 1));
        if (t >= 0.2 - 1e-12) CHECK(std::abs(vdot - 0.5) <= 1e-10);
        ++rows;
    }
    CHECK(rows == 51);
}

TEST_CASE("a failing check gives exit code 1") {
    // Equal epsilons cannot show a strictly decreasing residual.
    const auto dir = scratch("check_failed");
    json c = veps_bm();
    c["veps"]["epsilons"] = {0.1, 0.1};
    std::string log;
    CHECK(run(write_config(dir, c), dir / "out", log) == cli::kCheckFailed);
    CHECK(log.find("FAIL sup_residual_monotone_violations") != std::string::npos);
    CHECK(read_json(dir / "out" / "summary.json")["pass"] == false);
}

TEST_CASE("a refused time step gives exit code 3") {
    const auto dir = scratch("cfl");
    const json c = {{"experiment", "twoscale"},
                    {"kernel", {{"type", "bm"}}},
                    {"problem", {{"sigmas", {{0.3, 0.0}}}}},
                    {"twoscale", {{"n", 32}, {"N", 4}, {"dt", 0.02}, {"epsilon", 0.02}, {"horizon", 0.1}}}};
    std::string log;
    CHECK(run(write_config(dir, c), dir / "out", log) == cli::kNumericalFailure);
    CHECK(log.find("use dt <=") != std::string::npos);
}

TEST_CASE("runs are deterministic and reproducible from the manifest") {
    const auto dir = scratch("determinism");
    const json c = {{"experiment", "ensemble"},
                    {"seed", 9},
                    {"kernel", {{"type", "fbm"}, {"hurst", 0.75}}},
                    {"problem", {{"kappa", 0.01}, {"sigmas", {{1.0, 0.0}}}}},
                    {"ensemble", {{"replicas", 64}, {"dt", 0.01}, {"times", {0.5}}}}};
    const auto cfg = write_config(dir, c);
    std::string log;
    const int a = run(cfg, dir / "a", log);
    CHECK(a != cli::kInvalidConfig);
    CHECK(a != cli::kNumericalFailure);
    CHECK(run(cfg, dir / "b", log, 3) == a);
    const json ma = read_json(dir / "a" / "manifest.json"), mb = read_json(dir / "b" / "manifest.json");
    CHECK(ma["content_hashes"] == mb["content_hashes"]);
    CHECK(ma["seed"] == 9);
    for (const auto& [name, hash] : ma["content_hashes"].items())
        CHECK(cli::git_blob_sha1(slurp(dir / "a" / name)) == hash.get<std::string>());

    CHECK(run(dir / "a" / "manifest.json", dir / "c", log) == a);
    for (const auto& [name, hash] : ma["content_hashes"].items())
        CHECK(slurp(dir / "c" / name) == slurp(dir / "a" / name));

    cli::RunRequest req;
    req.config = cfg;
    req.out = dir / "d";
    req.seed = 10;
    std::ostringstream os;
    cli::run(req, os);
    const json md = read_json(dir / "d" / "manifest.json");
    CHECK(md["seed"] == 10);
    CHECK(md["content_hashes"] != ma["content_hashes"]);
}

TEST_CASE("sweep writes one run per value and a combined table") {
    const auto dir = scratch("sweep");
    json c = veps_bm();
    c["kernel"] = {{"type", "fbm"}, {"hurst", 0.75}};
    cli::RunRequest req;
    req.config = write_config(dir, c);
    req.out = dir / "out";
    req.sweep = "kernel.hurst=0.6,0.75,0.9";
    std::ostringstream os;
    CHECK(cli::run(req, os) == cli::kOk);
    for (const char* v : {"0.6", "0.75", "0.9"})
        CHECK(fs::exists(dir / "out" / (std::string("kernel.hurst=") + v) / "manifest.json"));
    std::istringstream csv(slurp(dir / "out" / "sweep.csv"));
    std::string line;
    std::getline(csv, line);
    CHECK(line.rfind("kernel.hurst,epsilon,", 0) == 0);
    int rows = 0;
    while (std::getline(csv, line)) ++rows;
    CHECK(rows == 6);
    CHECK(read_json(dir / "out" / "sweep_summary.json")["runs"].size() == 3);

    req.sweep = "kernel.hurst";
    CHECK(cli::run(req, os) == cli::kInvalidConfig);
}

TEST_CASE("command line flags") {
    const auto dir = scratch("flags");
    const auto cfg = write_config(dir, veps_bm());
    const std::string c = cfg.string(), o = (dir / "out").string();
    {
        const char* argv[] = {"prog", "--config", c.c_str(), "--out", o.c_str(), "--workers", "2"};
        CHECK(cli::main_entry(7, const_cast<char**>(argv)) == cli::kOk);
    }
    {
        const char* argv[] = {"prog", "--config", c.c_str()};
        CHECK(cli::main_entry(3, const_cast<char**>(argv)) == cli::kInvalidConfig);
    }
    {
        const char* argv[] = {"prog", "--config", c.c_str(), "--out", o.c_str(), "--workers", "0"};
        CHECK(cli::main_entry(7, const_cast<char**>(argv)) == cli::kInvalidConfig);
    }
    {
        const char* argv[] = {"prog", "--config", c.c_str(), "--out", o.c_str(), "--frobnicate"};
        CHECK(cli::main_entry(6, const_cast<char**>(argv)) == cli::kInvalidConfig);
    }
}
