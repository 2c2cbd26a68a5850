#pragma once

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "aubry/action.hpp"
#include "aubry/barrier.hpp"
#include "aubry/critical.hpp"
#include "aubry/dynamics.hpp"
#include "aubry/phase.hpp"
#include "aubry/pipeline.hpp"
#include "aubry/symplectic.hpp"
#include "aubry/util.hpp"

namespace aubry::cli {

inline constexpr const char* version = "1.0.0";

enum Exit { ok = 0, usage = 1, config_error = 2, unconverged = 3, violation = 4 };

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RunConfig {
    // [model]
    std::string model = "pendulum";
    double k = 1.0;
    int mode = 1;
    double forcing = 0.1;
    // [grid]
    int n = 256;
    int K = 16;
    bool local_refine = true;
    int nq = 128;
    int np = 128;
    double p_max = 2.5;
    // [iteration]
    long N_min = 0;
    long N_max = 0;
    int window = 16;
    long phase_n_min = 0;
    long phase_n_max = 0;
    int phase_window = 8;
    // [phase]
    std::vector<double> eps_factors{5.0, 4.0, 3.0};
    int levels = 16;
    int steps_per_period = 4;
    int flow_substeps = 64;
    int samples_per_edge = 16;
    // [tolerances]; nullopt means the grid-derived default
    std::optional<double> tol_diag, tol_gap, tol_class, phase_tol_diag;
    double tol_energy = 0.05;
    double tol_fix = 1e-12;
    double tol_cross = 0.05;
    double tol_triangle = 1e-9;
    double tol_weak_kam = 1e-6;
    double kink_tol = 0.5;
    double tol_alpha = 0.02;
    double tol_identity = 0.05;
    double tol_isometry = 0.05;
    double tol_cells = 2.0;
    // [phase_barrier]
    double q0 = 0.0, p0 = 0.0, q1 = 0.5, p1 = 2.0;
    // [invariance]
    std::string map = "sine_shift";
    double shift_a = 0.3;
    int pair_sources = 10;
    int pair_targets = 10;
    bool covariant_grid = true;
    // [checks]
    int biasymptotic_samples = 20;
    double biasymptotic_T = 50.0;
    // [output]
    std::string out_dir = "out";
    std::uint64_t seed = 1;
    // [run]
    int threads = 1;

    std::map<std::string, int> key_lines;  // "section.key" -> line of the last assignment
};

namespace detail {

inline std::string trim(const std::string& s) {
    auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline double parse_real(const std::string& v) {
    std::size_t pos = 0;
    double x = 0.0;
    try {
        x = std::stod(v, &pos);
    } catch (const std::exception&) {
        throw std::invalid_argument("expected a real number, got '" + v + "'");
    }
    if (pos != v.size() || !std::isfinite(x)) throw std::invalid_argument("expected a real number, got '" + v + "'");
    return x;
}

inline long parse_int(const std::string& v) {
    std::size_t pos = 0;
    long x = 0;
    try {
        x = std::stol(v, &pos);
    } catch (const std::exception&) {
        throw std::invalid_argument("expected an integer, got '" + v + "'");
    }
    if (pos != v.size()) throw std::invalid_argument("expected an integer, got '" + v + "'");
    return x;
}

inline bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw std::invalid_argument("expected true or false, got '" + v + "'");
}

inline std::vector<double> parse_list(const std::string& v) {
    std::vector<double> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_real(trim(item)));
    if (out.empty()) throw std::invalid_argument("expected a comma-separated list of reals");
    return out;
}

inline std::string list_text(const std::vector<double>& v) {
    std::string s;
    for (std::size_t k = 0; k < v.size(); ++k) s += (k ? "," : "") + fmt_real(v[k]);
    return s;
}

struct Field {
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

inline std::string opt_text(const std::optional<double>& x) { return x ? fmt_real(*x) : "auto"; }

inline std::optional<double> parse_opt(const std::string& v) {
    if (v == "auto") return std::nullopt;
    return parse_real(v);
}

#define AUBRY_REAL(name) \
    Field { [](RunConfig& c, const std::string& v) { c.name = parse_real(v); }, [](const RunConfig& c) { return fmt_real(c.name); } }
#define AUBRY_INT(name) \
    Field { [](RunConfig& c, const std::string& v) { c.name = decltype(c.name)(parse_int(v)); }, [](const RunConfig& c) { return std::to_string(c.name); } }
#define AUBRY_OPT(name) \
    Field { [](RunConfig& c, const std::string& v) { c.name = parse_opt(v); }, [](const RunConfig& c) { return opt_text(c.name); } }
#define AUBRY_STR(name) \
    Field { [](RunConfig& c, const std::string& v) { c.name = v; }, [](const RunConfig& c) { return c.name; } }

// Schema: "section.key" -> field accessors. Ordered, so echoes are deterministic.
inline const std::map<std::string, Field>& schema() {
    static const std::map<std::string, Field> s = {
        {"model.name", AUBRY_STR(model)},
        {"model.k", AUBRY_REAL(k)},
        {"model.mode", AUBRY_INT(mode)},
        {"model.eps", AUBRY_REAL(forcing)},
        {"grid.n", AUBRY_INT(n)},
        {"grid.K", AUBRY_INT(K)},
        {"grid.local_refine",
         Field{[](RunConfig& c, const std::string& v) { c.local_refine = parse_bool(v); },
               [](const RunConfig& c) { return std::string(c.local_refine ? "true" : "false"); }}},
        {"grid.nq", AUBRY_INT(nq)},
        {"grid.np", AUBRY_INT(np)},
        {"grid.p_max", AUBRY_REAL(p_max)},
        {"iteration.N_min", AUBRY_INT(N_min)},
        {"iteration.N_max", AUBRY_INT(N_max)},
        {"iteration.window", AUBRY_INT(window)},
        {"iteration.phase_n_min", AUBRY_INT(phase_n_min)},
        {"iteration.phase_n_max", AUBRY_INT(phase_n_max)},
        {"iteration.phase_window", AUBRY_INT(phase_window)},
        {"phase.eps_factors",
         Field{[](RunConfig& c, const std::string& v) { c.eps_factors = parse_list(v); },
               [](const RunConfig& c) { return list_text(c.eps_factors); }}},
        {"phase.levels", AUBRY_INT(levels)},
        {"phase.steps_per_period", AUBRY_INT(steps_per_period)},
        {"phase.substeps", AUBRY_INT(flow_substeps)},
        {"phase.samples_per_edge", AUBRY_INT(samples_per_edge)},
        {"tolerances.tol_diag", AUBRY_OPT(tol_diag)},
        {"tolerances.tol_gap", AUBRY_OPT(tol_gap)},
        {"tolerances.tol_class", AUBRY_OPT(tol_class)},
        {"tolerances.phase_tol_diag", AUBRY_OPT(phase_tol_diag)},
        {"tolerances.tol_energy", AUBRY_REAL(tol_energy)},
        {"tolerances.tol_fix", AUBRY_REAL(tol_fix)},
        {"tolerances.tol_cross", AUBRY_REAL(tol_cross)},
        {"tolerances.tol_triangle", AUBRY_REAL(tol_triangle)},
        {"tolerances.tol_weak_kam", AUBRY_REAL(tol_weak_kam)},
        {"tolerances.kink_tol", AUBRY_REAL(kink_tol)},
        {"tolerances.tol_alpha", AUBRY_REAL(tol_alpha)},
        {"tolerances.tol_identity", AUBRY_REAL(tol_identity)},
        {"tolerances.tol_isometry", AUBRY_REAL(tol_isometry)},
        {"tolerances.tol_cells", AUBRY_REAL(tol_cells)},
        {"phase_barrier.q0", AUBRY_REAL(q0)},
        {"phase_barrier.p0", AUBRY_REAL(p0)},
        {"phase_barrier.q1", AUBRY_REAL(q1)},
        {"phase_barrier.p1", AUBRY_REAL(p1)},
        {"invariance.map", AUBRY_STR(map)},
        {"invariance.a", AUBRY_REAL(shift_a)},
        {"invariance.pair_sources", AUBRY_INT(pair_sources)},
        {"invariance.pair_targets", AUBRY_INT(pair_targets)},
        {"invariance.covariant_grid",
         Field{[](RunConfig& c, const std::string& v) { c.covariant_grid = parse_bool(v); },
               [](const RunConfig& c) { return std::string(c.covariant_grid ? "true" : "false"); }}},
        {"checks.biasymptotic_samples", AUBRY_INT(biasymptotic_samples)},
        {"checks.biasymptotic_T", AUBRY_REAL(biasymptotic_T)},
        {"output.dir", AUBRY_STR(out_dir)},
        {"output.seed", AUBRY_INT(seed)},
        {"run.threads", AUBRY_INT(threads)},
    };
    return s;
}

#undef AUBRY_REAL
#undef AUBRY_INT
#undef AUBRY_OPT
#undef AUBRY_STR

inline std::string where(const std::string& source, int line) { return source + ":" + std::to_string(line) + ": "; }

}  // namespace detail

// Sectioned key = value text; '#' and ';' start comments. Unknown sections or
// keys, malformed lines and malformed values are errors naming the line.
inline void parse_config_into(RunConfig& c, const std::string& text, const std::string& source = "config") {
    std::stringstream in(text);
    std::string raw, section;
    int line = 0;
    const auto& sch = detail::schema();
    while (std::getline(in, raw)) {
        ++line;
        std::string s = raw;
        auto hash = s.find_first_of("#;");
        if (hash != std::string::npos) s = s.substr(0, hash);
        s = detail::trim(s);
        if (s.empty()) continue;
        if (s.front() == '[') {
            if (s.back() != ']') throw ConfigError(detail::where(source, line) + "malformed section header '" + s + "'");
            section = detail::trim(s.substr(1, s.size() - 2));
            bool known = std::any_of(sch.begin(), sch.end(),
                                     [&](const auto& kv) { return kv.first.rfind(section + ".", 0) == 0; });
            if (!known) throw ConfigError(detail::where(source, line) + "unknown section [" + section + "]");
            continue;
        }
        auto eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError(detail::where(source, line) + "expected key = value, got '" + s + "'");
        if (section.empty()) throw ConfigError(detail::where(source, line) + "key outside of any section");
        std::string key = detail::trim(s.substr(0, eq)), value = detail::trim(s.substr(eq + 1));
        std::string full = section + "." + key;
        auto it = sch.find(full);
        if (it == sch.end())
            throw ConfigError(detail::where(source, line) + "unknown key '" + key + "' in section [" + section + "]");
        try {
            it->second.set(c, value);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(detail::where(source, line) + full + ": " + e.what());
        }
        c.key_lines[full] = line;
    }
}

inline RunConfig parse_config(const std::string& text, const std::string& source = "config") {
    RunConfig c;
    parse_config_into(c, text, source);
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError(path + ": cannot open config file");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str(), path);
}

// AUBRY_<SECTION>_<KEY> (upper case) overrides a config key.
inline std::string env_name(const std::string& full_key) {
    std::string s = "AUBRY_";
    for (char ch : full_key) s += ch == '.' ? '_' : char(std::toupper(static_cast<unsigned char>(ch)));
    return s;
}

inline void apply_env_overrides(RunConfig& c, const std::function<const char*(const char*)>& getenv_fn = std::getenv) {
    for (const auto& [key, field] : detail::schema()) {
        std::string name = env_name(key);
        const char* v = getenv_fn(name.c_str());
        if (!v) continue;
        try {
            field.set(c, detail::trim(v));
        } catch (const std::invalid_argument& e) {
            throw ConfigError("environment " + name + ": " + e.what());
        }
        c.key_lines[key] = 0;
    }
}

// Bounds and positivity; the message names the line that set the offending key.
inline void validate(const RunConfig& c, const std::string& source = "config") {
    auto fail = [&](const std::string& key, const std::string& msg) {
        auto it = c.key_lines.find(key);
        std::string at = it == c.key_lines.end() ? source + ": (default) "
                         : it->second == 0   ? "environment " + env_name(key) + ": "
                                             : detail::where(source, it->second);
        throw ConfigError(at + key + ": " + msg);
    };
    static const std::vector<std::string> models{"pendulum", "double_well", "free", "cosine", "forced_pendulum"};
    if (std::find(models.begin(), models.end(), c.model) == models.end())
        fail("model.name", "unknown model '" + c.model + "' (pendulum, double_well, free, cosine, forced_pendulum)");
    if (!(c.k > 0.0)) fail("model.k", "must be > 0");
    if (c.mode < 1 || c.mode > 16) fail("model.mode", "must be in [1, 16]");
    if (c.n < 8 || c.n > 1024) fail("grid.n", "must be in [8, 1024]");
    if (c.K < 4 || c.K > 256) fail("grid.K", "must be in [4, 256]");
    if (c.nq < 8) fail("grid.nq", "must be >= 8");
    if (c.np < 8) fail("grid.np", "must be >= 8");
    if (long(c.nq) * c.np > 65536) fail("grid.np", "nq * np must be <= 65536");
    if (!(c.p_max > 0.0)) fail("grid.p_max", "must be > 0");
    if (c.N_min < 0) fail("iteration.N_min", "must be >= 0 (0 selects n)");
    if (c.N_max < 0 || (c.N_max > 0 && c.N_max < c.N_min)) fail("iteration.N_max", "must be 0 or >= N_min");
    if (c.window < 1) fail("iteration.window", "must be >= 1");
    if (c.phase_n_min < 0) fail("iteration.phase_n_min", "must be >= 0");
    if (c.phase_n_max < 0 || (c.phase_n_max > 0 && c.phase_n_max < c.phase_n_min))
        fail("iteration.phase_n_max", "must be 0 or >= phase_n_min");
    if (c.phase_window < 1) fail("iteration.phase_window", "must be >= 1");
    for (double f : c.eps_factors)
        if (!(f > 0.0)) fail("phase.eps_factors", "factors must be > 0");
    if (c.levels < 1 || c.levels > 200) fail("phase.levels", "must be in [1, 200]");
    if (c.steps_per_period < 1 || c.steps_per_period > 64) fail("phase.steps_per_period", "must be in [1, 64]");
    if (c.flow_substeps < 1) fail("phase.substeps", "must be >= 1");
    if (c.samples_per_edge < 1 || c.flow_substeps % c.samples_per_edge != 0)
        fail("phase.samples_per_edge", "must divide phase.substeps");
    for (auto [key, v] : std::vector<std::pair<std::string, std::optional<double>>>{
             {"tolerances.tol_diag", c.tol_diag},
             {"tolerances.tol_gap", c.tol_gap},
             {"tolerances.tol_class", c.tol_class},
             {"tolerances.phase_tol_diag", c.phase_tol_diag}})
        if (v && !(*v > 0.0)) fail(key, "tolerances must be > 0");
    for (auto [key, v] : std::vector<std::pair<std::string, double>>{{"tolerances.tol_energy", c.tol_energy},
                                                                     {"tolerances.tol_fix", c.tol_fix},
                                                                     {"tolerances.tol_cross", c.tol_cross},
                                                                     {"tolerances.tol_triangle", c.tol_triangle},
                                                                     {"tolerances.tol_weak_kam", c.tol_weak_kam},
                                                                     {"tolerances.kink_tol", c.kink_tol},
                                                                     {"tolerances.tol_alpha", c.tol_alpha},
                                                                     {"tolerances.tol_identity", c.tol_identity},
                                                                     {"tolerances.tol_isometry", c.tol_isometry},
                                                                     {"tolerances.tol_cells", c.tol_cells}})
        if (!(v > 0.0)) fail(key, "tolerances must be > 0");
    if (c.map != "sine_shift" && c.map != "identity") fail("invariance.map", "must be sine_shift or identity");
    if (c.pair_sources < 1) fail("invariance.pair_sources", "must be >= 1");
    if (c.pair_targets < 1) fail("invariance.pair_targets", "must be >= 1");
    if (c.biasymptotic_samples < 0) fail("checks.biasymptotic_samples", "must be >= 0");
    if (!(c.biasymptotic_T > 0.0)) fail("checks.biasymptotic_T", "must be > 0");
    if (c.threads < 1 || c.threads > 256) fail("run.threads", "must be in [1, 256]");
    if (c.out_dir.empty()) fail("output.dir", "must not be empty");
}

// Effective configuration as "section.key" -> text.
inline std::map<std::string, std::string> echo(const RunConfig& c) {
    std::map<std::string, std::string> m;
    for (const auto& [key, field] : detail::schema()) m[key] = field.get(c);
    return m;
}

inline MechanicalModel make_model(const RunConfig& c) {
    if (c.model == "pendulum") return pendulum(c.k);
    if (c.model == "double_well") return double_well(c.k);
    if (c.model == "free") return free_particle();
    if (c.model == "cosine") return cosine_potential("cosine", c.k, c.mode);
    if (c.model == "forced_pendulum") return forced_pendulum(c.forcing);
    throw ConfigError("unknown model '" + c.model + "'");
}

inline ClassicalOptions classical_options(const RunConfig& c) {
    ClassicalOptions o;
    o.n = c.n;
    o.K = c.K;
    o.local_refine = c.local_refine;
    o.N_min = c.N_min;
    o.N_max = c.N_max;
    o.window = c.window;
    o.tol_fix = c.tol_fix;
    o.tol_diag = c.tol_diag.value_or(0.0);
    o.tol_gap = c.tol_gap.value_or(0.0);
    o.tol_class = c.tol_class.value_or(0.0);
    o.kink_tol = c.kink_tol;
    o.threads = c.threads;
    return o;
}

inline PhaseConfig phase_config(const RunConfig& c) {
    PhaseConfig p;
    p.nq = c.nq;
    p.np = c.np;
    p.p_max = c.p_max;
    p.eps_factors = c.eps_factors;
    p.levels = c.levels;
    p.flow.steps_per_period = c.steps_per_period;
    p.flow.substeps = c.flow_substeps;
    p.flow.samples_per_edge = c.samples_per_edge;
    p.n_min = c.phase_n_min;
    p.n_max = c.phase_n_max;
    p.window = c.phase_window;
    p.tol_fix = c.tol_fix;
    return p;
}

inline PhaseSetTolerances phase_tolerances(const RunConfig& c) {
    PhaseSetTolerances t;
    t.tol_diag = c.phase_tol_diag.value_or(0.0);
    t.tol_gap = c.tol_gap.value_or(0.0);
    t.tol_class = c.tol_class.value_or(0.0);
    t.tol_energy = c.tol_energy;
    return t;
}

inline std::string sha256_hex(const std::string& bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("sha256 failed");
    static const char* hex = "0123456789abcdef";
    std::string s;
    for (unsigned int k = 0; k < len; ++k) {
        s += hex[md[k] >> 4];
        s += hex[md[k] & 15];
    }
    return s;
}

using nlohmann::ordered_json;

// Non-finite reals become the strings "inf", "-inf", "nan".
inline ordered_json jreal(double x) {
    if (std::isfinite(x)) return x;
    return fmt_real(x);
}

struct Check {
    std::string name;
    double value = 0.0;
    double tolerance = 0.0;
    bool pass = false;
    std::string note;
};

struct RunState {
    RunConfig cfg;
    std::string command;
    std::filesystem::path out;
    bool verbose = false;
    std::ostream* log = &std::cerr;

    ordered_json results = ordered_json::object();
    ordered_json timings = ordered_json::object();
    ordered_json convergence = ordered_json::object();
    std::vector<Check> checks;
    std::vector<std::string> artifacts;  // relative paths in write order
    bool unconverged = false;
    std::vector<std::string> diagnostics;

    std::optional<ActionKernel> kernel;
    std::optional<CriticalResult> crit;
    std::optional<ClassicalAnalysis> classical;
    std::optional<PhaseAnalysis> phase;

    void say(const std::string& s) const {
        if (verbose) *log << "[aubry] " << s << "\n";
    }
    void check(const std::string& name, double value, double tol, const std::string& note = "", bool pass_if_le = true) {
        bool pass = std::isfinite(value) && (pass_if_le ? value <= tol : value >= tol);
        checks.push_back({name, value, tol, pass, note});
    }
    void flag(const std::string& what, bool converged, const std::string& diagnostic) {
        convergence[what] = converged;
        if (!converged) {
            unconverged = true;
            diagnostics.push_back(what + ": " + diagnostic);
        }
    }
    void write(const std::string& rel, const std::string& content) {
        std::filesystem::path p = out / rel;
        std::filesystem::create_directories(p.parent_path());
        std::ofstream f(p, std::ios::binary);
        if (!f) throw std::runtime_error("cannot write " + p.string());
        f << content;
        if (std::find(artifacts.begin(), artifacts.end(), rel) == artifacts.end()) artifacts.push_back(rel);
    }
};

class Stopwatch {
public:
    Stopwatch() : t0_(std::chrono::steady_clock::now()) {}
    double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

private:
    std::chrono::steady_clock::time_point t0_;
};

inline std::string dump(const ordered_json& j) { return j.dump(2) + "\n"; }

// ---- pipeline steps ----

inline void step_alpha(RunState& st) {
    if (st.crit) return;
    Stopwatch sw;
    MechanicalModel m = make_model(st.cfg);
    st.say("kernel n=" + std::to_string(st.cfg.n) + " K=" + std::to_string(st.cfg.K));
    st.kernel = build_kernel(m, ConfigGrid(st.cfg.n, 0.0), st.cfg.K, st.cfg.local_refine, st.cfg.threads);
    st.crit = min_mean_cycle(*st.kernel, st.cfg.threads);
    st.timings["alpha"] = sw.seconds();
    const auto& g = st.kernel->grid;
    std::string csv = "i,j,q0,q1,A\n";
    for (int i = 0; i < g.n; ++i)
        for (int j = 0; j < g.n; ++j)
            csv += std::to_string(i) + "," + std::to_string(j) + "," + fmt_real(g.q(i)) + "," + fmt_real(g.q(j)) +
                   "," + fmt_real(st.kernel->A(i, j)) + "\n";
    st.write("kernel.csv", csv);
    ordered_json cyc = ordered_json::array(), cq = ordered_json::array();
    for (int i : st.crit->cycle) {
        cyc.push_back(i);
        cq.push_back(g.q(i));
    }
    st.results["alpha"] = {{"alpha", st.crit->alpha},
                           {"cycle", cyc},
                           {"cycle_q", cq},
                           {"karp_mean", st.crit->karp_mean},
                           {"mean_residual", st.crit->mean_residual}};
    st.check("cycle_mean_residual", st.crit->mean_residual, 1e-9);
}

inline void write_plots_classical(RunState& st) {
    std::string heat =
        "# Barrier heatmap h(q0, q1). Run from the output directory: gnuplot plots/barrier_heatmap.plt\n"
        "set datafile separator ','\n"
        "set terminal pngcairo size 800,700\n"
        "set output 'plots/barrier_heatmap.png'\n"
        "set xlabel 'q0'\nset ylabel 'q1'\nset cblabel 'h'\n"
        "set xrange [0:1]\nset yrange [0:1]\nset size ratio 1\n"
        "set title 'Peierls barrier'\n"
        "plot 'barrier.csv' skip 1 using 3:4:5 with image notitle\n";
    std::string diag =
        "# Diagonal profile h(q, q). Run from the output directory: gnuplot plots/diagonal.plt\n"
        "set datafile separator ','\n"
        "set terminal pngcairo size 800,500\n"
        "set output 'plots/diagonal.png'\n"
        "set xlabel 'q'\nset ylabel 'h(q,q)'\n"
        "set title 'Barrier diagonal'\n"
        "plot 'barrier.csv' skip 1 using ($1 == $2 ? $3 : 1/0):5 with linespoints pt 7 ps 0.4 title 'h(q,q)'\n";
    st.write("plots/barrier_heatmap.plt", heat);
    st.write("plots/diagonal.plt", diag);
}

inline void step_barrier(RunState& st) {
    step_alpha(st);
    if (st.classical) return;
    Stopwatch sw;
    MechanicalModel m = make_model(st.cfg);
    ClassicalOptions o = classical_options(st.cfg);
    ClassicalAnalysis a;
    a.kernel = *st.kernel;
    a.crit = *st.crit;
    a.tol_diag = o.diag_tol();
    a.tol_gap = o.gap_tol();
    a.tol_class = o.class_tol();
    st.say("barrier value iteration");
    a.table = peierls_barrier(a.kernel, a.crit.alpha, o.N_min, o.N_max, o.window, o.tol_fix, o.threads);
    try {
        a.aubry = aubry_momenta(a.table, m, a.tol_diag, o.kink_tol);
        a.mane = mane_set(a.table, a.aubry.projected, a.tol_gap, o.kink_tol);
        a.mather = mather_set(a.table, a.kernel, a.aubry.projected, a.tol_diag);
        a.classes = static_classes(a.table, a.aubry.projected, a.tol_class);
    } catch (const EmptyAubrySet& e) {
        a.aubry_empty = true;
        st.diagnostics.push_back(e.what());
    }
    st.timings["barrier"] = sw.seconds();
    const auto& t = a.table;
    st.flag("barrier", t.converged,
            "running minimum still moving by " + fmt_real(t.last_decrement) + " after " +
                std::to_string(t.iterations) + " iterations; raise iteration.N_max");
    std::string csv = "i,j,q0,q1,h\n";
    for (int i = 0; i < t.grid.n; ++i)
        for (int j = 0; j < t.grid.n; ++j)
            csv += std::to_string(i) + "," + std::to_string(j) + "," + fmt_real(t.grid.q(i)) + "," +
                   fmt_real(t.grid.q(j)) + "," + fmt_real(t.h(i, j)) + "\n";
    st.write("barrier.csv", csv);
    write_plots_classical(st);
    double dmin = inf;
    for (int i = 0; i < t.grid.n; ++i) dmin = std::min(dmin, t.h(i, i));
    st.results["barrier"] = {{"iterations", t.iterations},
                             {"converged", t.converged},
                             {"last_decrement", jreal(t.last_decrement)},
                             {"min_diagonal", jreal(dmin)}};
    st.check("triangle_inequality", triangle_violation(t.h, o.threads), st.cfg.tol_triangle);
    st.check("min_diagonal_zero", std::abs(dmin), a.tol_diag);
    st.check("weak_kam_residual", weak_kam_residual(t, a.kernel, a.crit.alpha, o.threads), st.cfg.tol_weak_kam);
    st.classical = std::move(a);
}

inline bool subset(std::vector<int> a, std::vector<int> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    return std::includes(b.begin(), b.end(), a.begin(), a.end());
}

inline void step_sets(RunState& st) {
    step_barrier(st);
    if (st.results.contains("sets")) return;
    const ClassicalAnalysis& a = *st.classical;
    const ConfigGrid& g = a.table.grid;
    ordered_json j;
    j["alpha"] = a.crit.alpha;
    j["tolerances"] = {{"tol_diag", a.tol_diag}, {"tol_gap", a.tol_gap}, {"tol_class", a.tol_class}};
    j["converged"] = a.table.converged;
    j["aubry_empty"] = a.aubry_empty;
    ordered_json au = ordered_json::array(), ma = ordered_json::array(), mt = ordered_json::array();
    for (auto& p : a.aubry.lifted)
        au.push_back({{"node", p.node},
                      {"q", p.q},
                      {"p", p.p},
                      {"t", p.t},
                      {"E", p.E},
                      {"energy_residual", p.energy_residual},
                      {"one_sided", p.one_sided}});
    for (auto& m : a.mane)
        ma.push_back({{"node", m.node},
                      {"q", g.q(m.node)},
                      {"p", m.momentum},
                      {"from", m.from},
                      {"to", m.to},
                      {"gap", jreal(m.gap)}});
    for (int i : a.mather) mt.push_back({{"node", i}, {"q", g.q(i)}});
    j["aubry"] = au;
    j["aubry_lipschitz"] = a.aubry.lipschitz;
    j["mane"] = ma;
    j["mather"] = mt;
    ordered_json cls = ordered_json::array(), quo = ordered_json::array();
    for (auto& c : a.classes.classes) cls.push_back(c);
    for (int r = 0; r < a.classes.quotient.n; ++r) {
        ordered_json row = ordered_json::array();
        for (int c = 0; c < a.classes.quotient.n; ++c) row.push_back(jreal(a.classes.quotient(r, c)));
        quo.push_back(row);
    }
    j["static_classes"] = cls;
    j["quotient"] = quo;
    st.write("sets.json", dump(j));
    st.results["sets"] = {{"aubry", a.aubry.lifted.size()},
                          {"mane", a.mane.size()},
                          {"mather", a.mather.size()},
                          {"classes", a.classes.classes.size()}};
    if (a.aubry_empty) {
        st.flag("aubry", false, "projected Aubry set is empty at tol_diag " + fmt_real(a.tol_diag));
        return;
    }
    std::vector<int> mane_n = mane_nodes(a.mane);
    st.check("mather_in_aubry", subset(a.mather, a.aubry.projected) ? 0.0 : 1.0, 0.0);
    st.check("aubry_in_mane", subset(a.aubry.projected, mane_n) ? 0.0 : 1.0, 0.0);
    st.check("mather_nonempty", double(a.mather.size()), 1.0, "", false);
}

inline std::optional<double> separatrix_amplitude(const RunConfig& c) {
    // p = +-sqrt(2 (alpha - V)) = +-2 sqrt(k) |sin(pi mode q)| for V = k cos(2 pi mode q)
    if (c.model == "pendulum" || c.model == "double_well" || c.model == "cosine") return 2.0 * std::sqrt(c.k);
    return std::nullopt;
}

inline int separatrix_mode(const RunConfig& c) {
    if (c.model == "double_well") return 2;
    if (c.model == "cosine") return c.mode;
    return 1;
}

inline void write_phase_plot(RunState& st, bool have_mane) {
    const auto& c = st.cfg;
    std::string s =
        "# Phase portrait with symplectic Aubry and Mane cells. Run from the output directory:\n"
        "#   gnuplot plots/phase_portrait.plt\n"
        "set datafile separator ','\n"
        "set terminal pngcairo size 900,700\n"
        "set output 'plots/phase_portrait.png'\n"
        "set xlabel 'q'\nset ylabel 'p'\n"
        "set xrange [0:1]\nset yrange [" +
        fmt_real(-c.p_max) + ":" + fmt_real(c.p_max) + "]\n" + "set title 'Symplectic sets, model " + c.model + "'\n";
    std::vector<std::string> layers;
    if (have_mane)
        layers.push_back("'phase_sets.csv' skip 1 using ($5 == 1 ? $3 : 1/0):4 with points pt 5 ps 0.35 lc rgb '#7f7fff' title 'Mane'");
    else
        s += "# Mane layer omitted: the computed Mane set is empty or was not requested.\n";
    layers.push_back("'phase_sets.csv' skip 1 using ($6 == 1 ? $3 : 1/0):4 with points pt 7 ps 0.5 lc rgb '#d62728' title 'Aubry'");
    if (auto amp = separatrix_amplitude(c)) {
        std::string w = fmt_real(std::numbers::pi * separatrix_mode(c));
        s += "sep(x) = " + fmt_real(*amp) + " * abs(sin(" + w + " * x))\n";
        layers.push_back("sep(x) with lines lw 1.5 lc rgb 'black' title 'separatrix'");
        layers.push_back("-sep(x) with lines lw 1.5 lc rgb 'black' notitle");
    } else {
        s += "# No analytic separatrix for this model.\n";
    }
    s += "plot ";
    for (std::size_t k = 0; k < layers.size(); ++k) s += (k ? ", \\\n     " : "") + layers[k];
    s += "\n";
    st.write("plots/phase_portrait.plt", s);
}

inline void step_phase_sets(RunState& st) {
    step_alpha(st);
    if (st.phase) return;
    Stopwatch sw;
    MechanicalModel m = make_model(st.cfg);
    PhaseConfig pc = phase_config(st.cfg);
    st.say("phase sets " + std::to_string(pc.nq) + "x" + std::to_string(pc.np));
    st.phase = analyze_phase(m, st.crit->alpha, pc, phase_tolerances(st.cfg), true, st.cfg.threads);
    st.timings["phase_sets"] = sw.seconds();
    const PhaseAnalysis& a = *st.phase;
    const PhaseFlow& f = *a.setup.flow;
    st.flag("phase_sets", a.converged, "chain value iteration did not stabilize; raise iteration.phase_n_max");
    std::vector<char> is_a(f.nodes(), 0), is_m(f.nodes(), 0), is_t(f.nodes(), 0);
    std::vector<int> cls(f.nodes(), -1);
    for (int x : a.aubry.cells) is_a[x] = 1;
    for (auto& x : a.mane) is_m[x.cell] = 1;
    for (int x : a.mather) is_t[x] = 1;
    for (std::size_t k = 0; k < a.classes.classes.size(); ++k)
        for (int x : a.classes.classes[k]) cls[x] = int(k);
    std::string csv = "cell,i,q,p,mane,aubry,mather,class,diag\n";
    for (int x = 0; x < f.grid.cells(); ++x) {
        if (!is_a[x] && !is_m[x]) continue;
        csv += std::to_string(x) + "," + std::to_string(x / f.grid.np) + "," + fmt_real(f.q(x)) + "," +
               fmt_real(f.p(x)) + "," + std::to_string(int(is_m[x])) + "," + std::to_string(int(is_a[x])) + "," +
               std::to_string(int(is_t[x])) + "," + std::to_string(cls[x]) + "," + fmt_real(a.aubry.diag[x]) + "\n";
    }
    st.write("phase_sets.csv", csv);
    write_phase_plot(st, !a.mane.empty());
    ordered_json quo = ordered_json::array();
    for (int r = 0; r < a.classes.quotient.n; ++r) {
        ordered_json row = ordered_json::array();
        for (int c = 0; c < a.classes.quotient.n; ++c) row.push_back(jreal(a.classes.quotient(r, c)));
        quo.push_back(row);
    }
    st.results["phase_sets"] = {{"alpha", st.crit->alpha},
                                {"delta", f.grid.delta()},
                                {"eps", a.setup.finest().eps},
                                {"hubs", a.aubry.hubs.representatives.size()},
                                {"aubry", a.aubry.cells.size()},
                                {"mane", a.mane.size()},
                                {"mather", a.mather.size()},
                                {"classes", a.classes.classes.size()},
                                {"quotient", quo},
                                {"converged", a.converged}};
    st.check("phase_aubry_nonempty", double(a.aubry.cells.size()), 1.0, "", false);
    st.check("phase_aubry_in_mane", subset(a.aubry.cells, phase_mane_cells(a.mane)) ? 0.0 : 1.0, 0.0);

    if (st.cfg.biasymptotic_samples > 0 && !a.aubry.cells.empty()) {
        Stopwatch sb;
        std::vector<int> pool = phase_mane_cells(a.mane);
        std::mt19937_64 rng(st.cfg.seed);
        std::shuffle(pool.begin(), pool.end(), rng);
        pool.resize(std::min<std::size_t>(pool.size(), std::size_t(st.cfg.biasymptotic_samples)));
        std::sort(pool.begin(), pool.end());
        std::vector<BiasymptoticResult> res(pool.size());
        parallel_for(pool.size(), st.cfg.threads, [&](std::size_t k) {
            res[k] = biasymptotic_check(m, f, pool[k], a.aubry.cells, st.cfg.biasymptotic_T, st.cfg.flow_substeps);
        });
        double worst = 0.0;
        int escaped = 0;
        ordered_json rows = ordered_json::array();
        for (std::size_t k = 0; k < pool.size(); ++k) {
            worst = std::max({worst, res[k].forward, res[k].backward});
            escaped += res[k].escaped;
            rows.push_back({{"cell", pool[k]},
                            {"forward", jreal(res[k].forward)},
                            {"backward", jreal(res[k].backward)},
                            {"escaped", res[k].escaped}});
        }
        st.results["biasymptotic"] = {{"T_max", st.cfg.biasymptotic_T}, {"samples", rows}};
        st.timings["biasymptotic"] = sb.seconds();
        st.check("biasymptotic_tail", escaped ? inf : worst, 2.0 * f.grid.delta(),
                 std::to_string(pool.size()) + " Mane cells");
    }
}

inline void step_phase_barrier(RunState& st) {
    step_alpha(st);
    Stopwatch sw;
    MechanicalModel m = make_model(st.cfg);
    PhaseConfig pc = phase_config(st.cfg);
    PhaseSetup setup = st.phase ? st.phase->setup : build_phase(m, st.crit->alpha, pc, st.cfg.threads);
    PhaseBarrierOptions bo;
    bo.chain = setup.chain;
    bo.tol_energy = st.cfg.tol_energy;
    const auto& c = st.cfg;
    PhaseEndpoint X0 = PhaseEndpoint::at_point(c.q0, c.p0), X1 = PhaseEndpoint::at_point(c.q1, c.p1);
    PhaseBarrierEstimate e = phase_barrier(setup.graphs, X0, X1, bo);
    st.timings["phase_barrier"] = sw.seconds();
    st.flag("phase_barrier", e.converged, "chain value iteration did not stabilize; raise iteration.phase_n_max");
    ordered_json trend = ordered_json::array();
    for (std::size_t k = 0; k < e.eps.size(); ++k)
        trend.push_back({{"eps", e.eps[k]},
                         {"value", jreal(e.values[k])},
                         {"periods", e.periods[k]},
                         {"budget_levels", e.budget_used[k]}});
    ordered_json j = {{"X0", {{"q", c.q0}, {"p", c.p0}}},
                      {"X1", {{"q", c.q1}, {"p", c.p1}}},
                      {"alpha", st.crit->alpha},
                      {"value", jreal(e.value)},
                      {"converged", e.converged},
                      {"level_jump", jreal(e.level_jump)},
                      {"budget_refined", e.budget_refined},
                      {"energy_blocked", e.energy_blocked},
                      {"invalid_endpoint", e.invalid_endpoint},
                      {"trend", trend}};
    st.write("phase_barrier.json", dump(j));
    st.results["phase_barrier"] = {{"value", jreal(e.value)}, {"converged", e.converged}};
}

inline void step_invariance(RunState& st) {
    Stopwatch sw;
    MechanicalModel m = make_model(st.cfg);
    ExactMap map = st.cfg.map == "identity" ? identity_map() : sine_shift_map(st.cfg.shift_a);
    InvarianceOptions o;
    o.classical = classical_options(st.cfg);
    o.phase_cfg = phase_config(st.cfg);
    o.phase_tol = phase_tolerances(st.cfg);
    o.pair_sources = st.cfg.pair_sources;
    o.pair_targets = st.cfg.pair_targets;
    o.seed = st.cfg.seed;
    o.tol_alpha = st.cfg.tol_alpha;
    o.tol_cells = st.cfg.tol_cells;
    o.tol_identity = st.cfg.tol_identity;
    o.tol_isometry = st.cfg.tol_isometry;
    o.covariant_grid = st.cfg.covariant_grid;
    o.threads = st.cfg.threads;
    st.say("invariance under " + map.label);
    InvarianceReport r = invariance_report(m, map, o);
    st.timings["invariance"] = sw.seconds();
    st.flag("invariance", !r.inconclusive, "a barrier or chain computation did not converge; report inconclusive");
    ordered_json checks = ordered_json::array();
    for (auto& c : r.checks) {
        checks.push_back({{"name", c.name},
                          {"value", jreal(c.value)},
                          {"tolerance", c.tolerance},
                          {"pass", c.pass},
                          {"note", c.note}});
        st.checks.push_back({"invariance." + c.name, c.value, c.tolerance, c.pass, c.note});
    }
    ordered_json pairs = ordered_json::array();
    for (auto& p : r.pairs)
        pairs.push_back({{"source", p.source},
                         {"target", p.target},
                         {"h_base", jreal(p.h_base)},
                         {"h_pulled", jreal(p.h_pulled)},
                         {"S0", p.S0},
                         {"S1", p.S1},
                         {"residual", jreal(p.residual)}});
    ordered_json j = {{"model", r.model},
                      {"map", r.map},
                      {"alpha", r.base.crit.alpha},
                      {"alpha_pulled", r.pulled.crit.alpha},
                      {"inconclusive", r.inconclusive},
                      {"pass", r.pass},
                      {"checks", checks},
                      {"pairs", pairs}};
    st.write("invariance.json", dump(j));
    st.results["invariance"] = {{"pass", r.pass}, {"inconclusive", r.inconclusive}};
}

inline const std::vector<std::string>& commands() {
    static const std::vector<std::string> c{"alpha", "barrier", "aubry", "mane", "mather",
                                            "phase-barrier", "phase-sets", "invariance", "all"};
    return c;
}

// Runs one command and writes the artifacts plus manifest.json into st.out.
// Returns the exit status: 4 on a failed check, 3 on an unconverged
// computation, 0 otherwise.
inline int run(RunState& st) {
    Stopwatch total;
    std::filesystem::create_directories(st.out);
    const std::string& c = st.command;
    if (c == "alpha") step_alpha(st);
    else if (c == "barrier") step_barrier(st);
    else if (c == "aubry" || c == "mane" || c == "mather") step_sets(st);
    else if (c == "phase-barrier") step_phase_barrier(st);
    else if (c == "phase-sets") step_phase_sets(st);
    else if (c == "invariance") step_invariance(st);
    else if (c == "all") {
        step_sets(st);
        step_phase_sets(st);
        step_phase_barrier(st);
        step_invariance(st);
    } else
        throw ConfigError("unknown command '" + c + "'");
    st.timings["total"] = total.seconds();

    bool failed = std::any_of(st.checks.begin(), st.checks.end(), [](const Check& k) { return !k.pass; });
    int status = failed ? violation : st.unconverged ? unconverged : ok;

    ordered_json manifest;
    manifest["tool"] = "aubry_cli";
    manifest["version"] = version;
#ifdef __VERSION__
    manifest["compiler"] = __VERSION__;
#endif
    manifest["command"] = c;
    ordered_json cfg = ordered_json::object();
    for (auto& [k, v] : echo(st.cfg)) cfg[k] = v;
    manifest["config"] = cfg;
    ordered_json checks = ordered_json::array();
    for (auto& k : st.checks)
        checks.push_back({{"name", k.name},
                          {"value", jreal(k.value)},
                          {"tolerance", k.tolerance},
                          {"pass", k.pass},
                          {"note", k.note}});
    manifest["checks"] = checks;
    manifest["convergence"] = st.convergence;
    manifest["diagnostics"] = st.diagnostics;
    manifest["results"] = st.results;
    ordered_json arts = ordered_json::array();
    std::vector<std::string> sorted = st.artifacts;
    std::sort(sorted.begin(), sorted.end());
    for (auto& rel : sorted) {
        std::ifstream f(st.out / rel, std::ios::binary);
        std::stringstream ss;
        ss << f.rdbuf();
        std::string bytes = ss.str();
        arts.push_back({{"path", rel}, {"sha256", sha256_hex(bytes)}, {"bytes", bytes.size()}});
    }
    manifest["artifacts"] = arts;
    manifest["exit_status"] = status;
    manifest["timings"] = st.timings;
    std::ofstream mf(st.out / "manifest.json", std::ios::binary);
    mf << dump(manifest);
    return status;
}

}  // namespace aubry::cli
