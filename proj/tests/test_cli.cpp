#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>

#include "catch_amalgamated.hpp"

#include "aubry/cli.hpp"

using namespace aubry::cli;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::string config_error_of(const std::string& text) {
    try {
        RunConfig c = parse_config(text, "t.cfg");
        validate(c, "t.cfg");
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

fs::path scratch_dir(const std::string& name) {
    fs::path d = fs::temp_directory_path() / ("aubry_test_cli_" + std::to_string(::getpid())) / name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

int run_cli(const std::string& args) {
    std::string cmd = std::string(AUBRY_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    int s = std::system(cmd.c_str());
    return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
}

const char* tiny_config = R"(# tiny pendulum run
[model]
name = pendulum

[grid]
n = 32
K = 8
nq = 16
np = 16

[phase]
eps_factors = 4, 3

[checks]
biasymptotic_samples = 4
biasymptotic_T = 20

[invariance]
pair_sources = 4
pair_targets = 4
)";

}  // namespace

TEST_CASE("config text parses into typed fields", "[cli]") {
    auto c = parse_config("[model]\nname = double_well ; trailing comment\nk = 2.5\n[grid]\nn = 48\n"
                          "local_refine = false\n[phase]\neps_factors = 5, 4.5\n[tolerances]\ntol_gap = auto\n"
                          "tol_diag = 1e-3\n");
    CHECK(c.model == "double_well");
    CHECK(c.k == 2.5);
    CHECK(c.n == 48);
    CHECK_FALSE(c.local_refine);
    CHECK(c.eps_factors == std::vector<double>{5.0, 4.5});
    CHECK_FALSE(c.tol_gap);
    REQUIRE(c.tol_diag);
    CHECK(*c.tol_diag == 1e-3);
    CHECK(c.key_lines.at("grid.n") == 5);
    CHECK_NOTHROW(validate(c));
    auto e = echo(c);
    CHECK(e.at("model.name") == "double_well");
    CHECK(e.at("tolerances.tol_gap") == "auto");
}

TEST_CASE("config errors name the offending line", "[cli]") {
    CHECK(config_error_of("[model]\nname = pendulum\nbogus = 1\n").find("t.cfg:3:") != std::string::npos);
    CHECK(config_error_of("[model]\nname = pendulum\nbogus = 1\n").find("unknown key 'bogus'") != std::string::npos);
    CHECK(config_error_of("[nowhere]\n").find("t.cfg:1: unknown section") != std::string::npos);
    CHECK(config_error_of("[grid]\n\nn = abc\n").find("t.cfg:3:") != std::string::npos);
    CHECK(config_error_of("[grid]\nn\n").find("t.cfg:2: expected key = value") != std::string::npos);
    CHECK(config_error_of("n = 3\n").find("t.cfg:1: key outside") != std::string::npos);
    CHECK(config_error_of("[grid]\nn = 4\n").find("t.cfg:2: grid.n") != std::string::npos);
    CHECK(config_error_of("[model]\nname = rotor\n").find("t.cfg:2: model.name") != std::string::npos);
    CHECK(config_error_of("[phase]\nsubsteps = 64\nsamples_per_edge = 10\n").find("t.cfg:3:") != std::string::npos);
    CHECK(config_error_of("[tolerances]\ntol_gap = -1\n").find("t.cfg:2: tolerances.tol_gap") != std::string::npos);
    CHECK(config_error_of("[grid]\nn = 64\n").empty());
}

TEST_CASE("environment overrides config keys", "[cli]") {
    CHECK(env_name("grid.n") == "AUBRY_GRID_N");
    CHECK(env_name("tolerances.tol_gap") == "AUBRY_TOLERANCES_TOL_GAP");
    std::map<std::string, std::string> env{{"AUBRY_GRID_N", "96"}, {"AUBRY_MODEL_NAME", "free"}};
    auto lookup = [&](const char* k) -> const char* {
        auto it = env.find(k);
        return it == env.end() ? nullptr : it->second.c_str();
    };
    auto c = parse_config("[grid]\nn = 64\n");
    apply_env_overrides(c, lookup);
    CHECK(c.n == 96);
    CHECK(c.model == "free");
    env["AUBRY_GRID_N"] = "2";
    auto d = parse_config("[grid]\nn = 64\n");
    apply_env_overrides(d, lookup);
    try {
        validate(d, "t.cfg");
        FAIL("expected a validation error");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("environment AUBRY_GRID_N") != std::string::npos);
    }
    env["AUBRY_GRID_N"] = "x";
    auto f = parse_config("");
    CHECK_THROWS_AS(apply_env_overrides(f, lookup), ConfigError);
}

TEST_CASE("sha256 of known strings", "[cli]") {
    CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("binary exit statuses for usage and config errors", "[cli]") {
    fs::path d = scratch_dir("errors");
    CHECK(run_cli("") == Exit::usage);
    CHECK(run_cli("--config " + (d / "missing.cfg").string()) == Exit::config_error);
    std::ofstream(d / "bad.cfg") << "[grid]\nwidth = 3\n";
    CHECK(run_cli("--config " + (d / "bad.cfg").string()) == Exit::config_error);
    std::ofstream(d / "ok.cfg") << tiny_config;
    CHECK(run_cli("--config " + (d / "ok.cfg").string() + " --command nonsense") == Exit::usage);
}

TEST_CASE("binary run writes hashed artifacts deterministically", "[cli]") {
    fs::path d = scratch_dir("run");
    std::ofstream(d / "tiny.cfg") << tiny_config;
    for (const char* sub : {"a", "b"})
        REQUIRE(run_cli("--config " + (d / "tiny.cfg").string() + " --out " + (d / sub).string()) == Exit::ok);
    auto ma = nlohmann::json::parse(slurp(d / "a" / "manifest.json"));
    auto mb = nlohmann::json::parse(slurp(d / "b" / "manifest.json"));
    CHECK(ma["exit_status"] == 0);
    CHECK(ma["config"]["grid.n"] == "32");
    REQUIRE(ma["artifacts"].size() >= 6);
    for (auto& art : ma["artifacts"]) {
        std::string rel = art["path"];
        std::string bytes = slurp(d / "a" / rel);
        CHECK(art["sha256"] == sha256_hex(bytes));
        CHECK(art["bytes"] == bytes.size());
        CHECK(bytes == slurp(d / "b" / rel));
    }
    for (auto& k : ma["checks"]) {
        INFO(k["name"]);
        CHECK(k["pass"] == true);
    }
    // only wall-clock timings and the output directory may differ
    for (auto* m : {&ma, &mb}) {
        m->erase("timings");
        (*m)["config"].erase("output.dir");
    }
    CHECK(ma == mb);
    fs::remove_all(d.parent_path());
}

TEST_CASE("single commands produce their own artifacts", "[cli]") {
    fs::path d = scratch_dir("single");
    std::ofstream(d / "tiny.cfg") << tiny_config;
    REQUIRE(run_cli("--config " + (d / "tiny.cfg").string() + " --command alpha --out " + (d / "alpha").string()) ==
            Exit::ok);
    auto m = nlohmann::json::parse(slurp(d / "alpha" / "manifest.json"));
    CHECK(m["command"] == "alpha");
    CHECK(std::abs(double(m["results"]["alpha"]["alpha"]) - 1.0) <= 0.05);
    CHECK(fs::exists(d / "alpha" / "kernel.csv"));
    CHECK_FALSE(fs::exists(d / "alpha" / "sets.json"));
    fs::remove_all(d.parent_path());
}
