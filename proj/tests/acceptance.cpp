// Acceptance run: one PASS/FAIL line per criterion, details indented below.
// Exit status 0 iff every criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <thread>
#include <unistd.h>
#include <vector>

#include "aubry/pipeline.hpp"
#include "aubry/symplectic.hpp"

using namespace aubry;
namespace fs = std::filesystem;

namespace {

const double pi = std::numbers::pi;

class Clock {
public:
    double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

private:
    std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

struct Criterion {
    int id;
    std::string title;
    bool pass = true;
    std::vector<std::string> lines;

    Criterion(int i, std::string t) : id(i), title(std::move(t)) {}

    // Records one sub-check and folds it into the verdict.
    void check(bool ok, const std::string& what) {
        pass = pass && ok;
        lines.push_back(std::string(ok ? "ok   " : "FAIL ") + what);
    }
    void note(const std::string& what) { lines.push_back("     " + what); }
};

std::vector<Criterion> results;

void report(const Criterion& c) {
    std::printf("criterion %2d %s  %s\n", c.id, c.pass ? "PASS" : "FAIL", c.title.c_str());
    for (auto& l : c.lines) std::printf("    %s\n", l.c_str());
    std::fflush(stdout);
    results.push_back(c);
}

std::string num(double x, int prec = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", prec, x);
    return buf;
}

bool subset(std::vector<int> a, std::vector<int> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    return std::includes(b.begin(), b.end(), a.begin(), a.end());
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// Separatrix p = +-2 sin(pi q) of the unit pendulum, densely sampled.
std::vector<PhasePoint> separatrix_points(int samples) {
    std::vector<PhasePoint> v;
    for (int k = 0; k < samples; ++k) {
        double q = double(k) / samples, p = 2.0 * std::sin(pi * q);
        v.push_back({q, p});
        v.push_back({q, -p});
    }
    return v;
}

// Pendulum k = 1 on n = 256, K = 16: shared by criteria 1 to 4 and 8.
ClassicalAnalysis pendulum256;

void criterion1() {
    Criterion c{1, "critical value of the pendulum"};
    ClassicalOptions o;
    o.n = 256;
    o.K = 16;
    Clock clk;
    pendulum256 = analyze_classical(pendulum(), o);
    double t256 = clk.seconds();
    double a256 = pendulum256.crit.alpha;
    c.check(std::abs(a256 - 1.0) <= 0.02, "alpha(n=256) = " + num(a256) + ", oracle max V = 1, tolerance 0.02");
    Clock clk2;
    double a512 = critical_value(pendulum(), ConfigGrid(512), 16).alpha;
    double t512 = clk2.seconds();
    c.check(std::abs(a512 - a256) <= 0.01, "alpha(n=512) = " + num(a512) + ", change " + num(std::abs(a512 - a256)) +
                                               " <= 0.01");
    c.check(t256 <= 60.0, "n=256 kernel, alpha, barrier and sets: " + num(t256, 3) + " s on " +
                              std::to_string(std::max(1u, std::thread::hardware_concurrency())) +
                              " core(s), limit 60 s");
    c.note("n=512 critical value alone: " + num(t512, 3) + " s");
    report(c);
}

void criterion2() {
    Criterion c{2, "barrier values against the Maupertuis quadrature"};
    const auto& a = pendulum256;
    const auto& g = a.table.grid;
    double h05 = a.table.h(g.nearest(0.0), g.nearest(0.5));
    double h2575 = a.table.h(g.nearest(0.25), g.nearest(0.75));
    double o1 = 2.0 / pi, o2 = (4.0 / pi) * (1.0 - std::sqrt(2.0) / 2.0);
    c.check(a.table.converged, "barrier iteration converged after " + std::to_string(a.table.iterations) + " steps");
    c.check(std::abs(h05 - o1) <= 0.02, "h(0, 0.5) = " + num(h05) + ", oracle 2/pi = " + num(o1));
    c.check(std::abs(h2575 - o2) <= 0.02, "h(0.25, 0.75) = " + num(h2575) + ", oracle " + num(o2));
    report(c);
}

void criterion3() {
    Criterion c{3, "min-plus properties of the barrier table"};
    const auto& a = pendulum256;
    double tri = triangle_violation(a.table.h);
    double dmin = inf;
    for (int i = 0; i < a.table.grid.n; ++i) dmin = std::min(dmin, a.table.h(i, i));
    double wk = weak_kam_residual(a.table, a.kernel, a.crit.alpha);
    c.check(tri <= 1e-9, "triangle slack " + num(tri) + " <= 1e-9");
    c.check(std::abs(dmin) <= a.tol_diag, "min diagonal " + num(dmin) + ", |.| <= tol_diag = " + num(a.tol_diag));
    c.check(wk <= 1e-6, "weak-KAM fixed-point residual " + num(wk) + " <= 1e-6");
    report(c);
}

void criterion4() {
    Criterion c{4, "set structure and static classes"};
    const auto& a = pendulum256;
    const auto& g = a.table.grid;
    double far = 0.0;
    for (int i : a.aubry.projected) far = std::max(far, circ_dist(g.q(i), 0.0));
    c.check(!a.aubry_empty && far <= 2.0 * g.step(),
            "pendulum Aubry set: " + std::to_string(a.aubry.projected.size()) + " node(s), farthest " + num(far) +
                " from q = 0, limit 2 cells = " + num(2.0 * g.step()));
    c.check(subset(a.mather, a.aubry.projected), "Mather subset of Aubry (" + std::to_string(a.mather.size()) + " in " +
                                                     std::to_string(a.aubry.projected.size()) + ")");
    c.check(subset(a.aubry.projected, mane_nodes(a.mane)),
            "Aubry subset of Mane (" + std::to_string(mane_nodes(a.mane).size()) + " Mane nodes)");
    ClassicalOptions o;
    o.n = 256;
    o.K = 16;
    auto dw = analyze_classical(double_well(), o);
    c.check(dw.classes.classes.size() == 2,
            "double well: " + std::to_string(dw.classes.classes.size()) + " static classes, expected 2");
    if (dw.classes.classes.size() == 2) {
        const Matrix& Q = dw.classes.quotient;
        c.check(Q(0, 1) == Q(1, 0), "quotient symmetric: d(0,1) = " + num(Q(0, 1)) + ", d(1,0) = " + num(Q(1, 0)));
        c.check(std::abs(Q(0, 1) - 4.0 / pi) <= 0.05, "quotient distance " + num(Q(0, 1)) + ", oracle 4/pi = " +
                                                           num(4.0 / pi) + ", tolerance 0.05");
    }
    c.check(subset(dw.mather, dw.aubry.projected) && subset(dw.aubry.projected, mane_nodes(dw.mane)),
            "double well inclusions Mather in Aubry in Mane");
    report(c);
}

// 128 x 128 pendulum phase analysis: shared by criteria 5, 6 and 9.
std::optional<PhaseAnalysis> phase128;

void criterion5() {
    Criterion c{5, "phase engine against the classical engine on the pendulum"};
    Clock clk;
    PhaseConfig cfg;
    cfg.nq = 128;
    cfg.np = 128;
    phase128 = analyze_phase(pendulum(), pendulum256.crit.alpha, cfg, PhaseSetTolerances{}, true);
    const PhaseAnalysis& P = *phase128;
    const PhaseGraph& g = P.setup.finest();
    const PhaseFlow& f = *g.flow;
    const double delta = f.grid.delta();
    double t_sets = clk.seconds();
    c.note("grid 128 x 128, cell diameter delta = " + num(delta) + ", eps = " + num(g.eps) + ", " +
           std::to_string(P.aubry.cells.size()) + " Aubry cells, " + std::to_string(P.mane.size()) + " Mane cells");
    c.check(P.converged, "chain iterations converged");

    std::vector<int> columns;
    for (int i = 0; i < 128; i += 16) columns.push_back(i);
    auto pc = projection_check(g, pendulum256.table, columns, P.setup.chain);
    c.check(pc.converged && pc.max_residual <= 0.05, "min over momentum of h~ vs h: max residual " +
                                                         num(pc.max_residual) + " <= 0.05 over " +
                                                         std::to_string(pc.pairs) + " matched pairs");

    double haus = hausdorff_qp(cell_points(f, phase_mane_cells(P.mane)), separatrix_points(4096));
    c.check(haus <= 2.0 * delta, "Hausdorff(Mane cells, separatrix) = " + num(haus) + " = " + num(haus / delta, 3) +
                                     " cell diameters, limit 2");
    double radius = 0.0;
    for (int a : P.aubry.cells) radius = std::max(radius, std::hypot(circ_diff(f.q(a), 0.0), f.p(a)));
    c.check(radius <= 2.0 * delta, "Aubry cluster radius about (0,0) = " + num(radius) + " = " +
                                       num(radius / delta, 3) + " cell diameters, limit 2");
    c.note("jump-area bound on the cluster radius: pi eps + delta = " + num(pi * g.eps + delta));
    double t = clk.seconds();
    c.check(t <= 600.0, "phase sets " + num(t_sets, 4) + " s, with projection " + num(t, 4) + " s, limit 600 s");
    report(c);
}

void criterion6() {
    Criterion c{6, "dominance of the phase barrier over the classical barrier"};
    const PhaseAnalysis& P = *phase128;
    const PhaseGraph& g = P.setup.finest();
    const PhaseFlow& f = *g.flow;
    std::vector<int> valid;
    for (int k = 0; k < f.nodes(); ++k)
        if (f.land[k] >= 0) valid.push_back(k);
    std::mt19937_64 rng(6);
    std::uniform_int_distribution<std::size_t> pick(0, valid.size() - 1);
    std::vector<int> src, dst;
    for (int k = 0; k < 20; ++k) src.push_back(valid[pick(rng)]);
    for (int k = 0; k < 25; ++k) dst.push_back(valid[pick(rng)]);
    auto d = dominance_check(g, pendulum256.table, src, dst, P.setup.chain);
    c.check(d.pairs == 500, std::to_string(d.pairs) + " sampled pairs, " + std::to_string(d.finite) + " finite");
    c.check(d.converged, "chain iterations converged");
    c.check(d.finite == 0 || d.worst >= -0.02, "min over finite pairs of h~ - h = " + num(d.worst) + " >= -0.02");
    report(c);
}

void criterion7() {
    Criterion c{7, "symplectic invariance under a momentum shift"};
    InvarianceOptions o;
    o.classical.n = 256;
    o.classical.K = 16;
    o.phase_cfg.nq = 64;
    o.phase_cfg.np = 64;
    Clock clk;
    auto r = invariance_report(pendulum(), sine_shift_map(0.3), o);
    c.note("pendulum, shift a = 0.3, classical n = 256, phase grid 64 x 64, " + num(clk.seconds(), 4) + " s");
    c.check(!r.inconclusive, "pendulum runs converged");
    for (auto& k : r.checks)
        c.check(k.pass, "pendulum " + k.name + " = " + num(k.value) + ", tolerance " + num(k.tolerance) +
                            (k.note.empty() ? "" : " (" + k.note + ")"));
    Clock clk2;
    auto w = invariance_report(double_well(), sine_shift_map(0.3), o);
    c.note("double well, same settings, " + num(clk2.seconds(), 4) + " s");
    c.check(!w.inconclusive, "double well runs converged");
    for (auto& k : w.checks)
        if (k.name.rfind("quotient_isometry", 0) == 0)
            c.check(k.pass, "double well " + k.name + " = " + num(k.value) + ", tolerance " + num(k.tolerance) +
                                (k.note.empty() ? "" : " (" + k.note + ")"));
    report(c);
}

void criterion8() {
    Criterion c{8, "criticality trichotomy"};
    const auto& a = pendulum256;
    auto up = criticality_class(a.kernel.A, a.crit.alpha + 0.5);
    auto down = criticality_class(a.kernel.A, a.crit.alpha - 0.5);
    auto crit = criticality_class(a.kernel.A, a.crit.alpha);
    c.check(up.cls == Criticality::super_critical && std::abs(up.slope - 0.5) <= 0.01,
            "alpha + 0.5: slope " + num(up.slope) + ", expected +0.5 +- 0.01");
    c.check(down.cls == Criticality::sub_critical && std::abs(down.slope + 0.5) <= 0.01,
            "alpha - 0.5: slope " + num(down.slope) + ", expected -0.5 +- 0.01");
    c.check(crit.cls == Criticality::critical, "alpha itself: slope " + num(crit.slope) + ", classified critical");
    report(c);
}

void criterion9() {
    Criterion c{9, "biasymptotics of Mane orbits"};
    const PhaseAnalysis& P = *phase128;
    const PhaseFlow& f = *P.setup.flow;
    const double delta = f.grid.delta();
    std::vector<int> cells = phase_mane_cells(P.mane);
    std::mt19937_64 rng(9);
    std::shuffle(cells.begin(), cells.end(), rng);
    if (cells.size() > 20) cells.resize(20);
    double worst_f = 0.0, worst_b = 0.0;
    int escaped = 0;
    for (int cell : cells) {
        auto r = biasymptotic_check(pendulum(), f, cell, P.aubry.cells, 50.0, 64);
        worst_f = std::max(worst_f, r.forward);
        worst_b = std::max(worst_b, r.backward);
        escaped += r.escaped;
    }
    c.check(!cells.empty(), std::to_string(cells.size()) + " sampled Mane cells, T_max = 50");
    c.check(escaped == 0, std::to_string(escaped) + " orbit(s) left the momentum window");
    c.check(worst_f <= 2.0 * delta, "worst forward tail distance " + num(worst_f) + " <= 2 delta = " + num(2.0 * delta));
    c.check(worst_b <= 2.0 * delta, "worst backward tail distance " + num(worst_b) + " <= 2 delta");
    // census over every Mane cell: a center off the level H = alpha lies on a
    // periodic orbit and cannot approach the saddle arbitrarily closely
    int over = 0;
    double dh_min = inf, dh_max = 0.0;
    for (auto& m : P.mane) {
        auto r = biasymptotic_check(pendulum(), f, m.cell, P.aubry.cells, 50.0, 64);
        if (std::max(r.forward, r.backward) > 2.0 * delta) {
            ++over;
            double dh = std::abs(pendulum().H(f.q(m.cell), f.p(m.cell), 0.0) - P.setup.flow->alpha);
            dh_min = std::min(dh_min, dh);
            dh_max = std::max(dh_max, dh);
        }
    }
    c.note("all " + std::to_string(P.mane.size()) + " Mane cells: " + std::to_string(over) + " exceed 2 delta" +
           (over ? ", their |H - alpha| in [" + num(dh_min, 3) + ", " + num(dh_max, 3) + "]" : ""));
    report(c);
}

int run_cli(const std::string& args) {
    std::string cmd = std::string(AUBRY_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    int s = std::system(cmd.c_str());
    return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
}

void criterion10() {
    Criterion c{10, "determinism of the command-line run"};
    fs::path root = fs::temp_directory_path() / ("aubry_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(root);
    fs::create_directories(root);
    std::ofstream(root / "run.cfg") << "[model]\nname = pendulum\n[grid]\nn = 64\nK = 8\nnq = 32\nnp = 32\n"
                                       "[phase]\neps_factors = 4, 3\n[checks]\nbiasymptotic_samples = 8\n"
                                       "biasymptotic_T = 20\n";
    int s1 = run_cli("--config " + (root / "run.cfg").string() + " --out " + (root / "a").string());
    int s2 = run_cli("--config " + (root / "run.cfg").string() + " --out " + (root / "b").string());
    c.check(s1 == 0 && s2 == 0, "exit statuses " + std::to_string(s1) + " and " + std::to_string(s2));
    int files = 0, differ = 0;
    for (auto& e : fs::recursive_directory_iterator(root / "a")) {
        if (!e.is_regular_file()) continue;
        fs::path rel = fs::relative(e.path(), root / "a");
        if (rel == "manifest.json") continue;  // carries wall-clock timings
        ++files;
        if (slurp(e.path()) != slurp(root / "b" / rel)) {
            ++differ;
            c.note("differs: " + rel.string());
        }
    }
    c.check(files >= 6 && differ == 0,
            std::to_string(files) + " artifacts compared byte for byte, " + std::to_string(differ) + " differ");
    fs::remove_all(root);
    report(c);
}

}  // namespace

int main() {
    Clock total;
    criterion1();
    criterion2();
    criterion3();
    criterion4();
    criterion5();
    criterion6();
    criterion7();
    criterion8();
    criterion9();
    criterion10();
    int passed = int(std::count_if(results.begin(), results.end(), [](auto& c) { return c.pass; }));
    std::printf("\nsummary: %d of %zu criteria pass (%.0f s)\n", passed, results.size(), total.seconds());
    for (auto& c : results) std::printf("  %2d %s\n", c.id, c.pass ? "PASS" : "FAIL");
    return passed == int(results.size()) ? 0 : 1;
}
