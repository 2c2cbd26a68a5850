#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "aubry/action.hpp"
#include "aubry/barrier.hpp"
#include "aubry/critical.hpp"
#include "aubry/phase.hpp"

namespace aubry {

struct ClassicalOptions {
    int n = 256;
    int K = 16;
    bool local_refine = true;
    long N_min = 0;  // 0: n
    long N_max = 0;  // 0: 4n
    int window = 16;
    double tol_fix = 1e-12;
    double tol_diag = 0.0;   // 0: 1/n^2
    double tol_gap = 0.0;    // 0: 1/n
    double tol_class = 0.0;  // 0: 1/n
    double kink_tol = 0.5;
    int threads = 1;

    double diag_tol() const { return tol_diag > 0 ? tol_diag : 1.0 / (double(n) * n); }
    double gap_tol() const { return tol_gap > 0 ? tol_gap : 1.0 / n; }
    double class_tol() const { return tol_class > 0 ? tol_class : 1.0 / n; }
};

struct ClassicalAnalysis {
    ActionKernel kernel;
    CriticalResult crit;
    BarrierTable table;
    bool aubry_empty = false;
    AubryData aubry;
    std::vector<ManeMember> mane;
    std::vector<int> mather;
    StaticClassPartition classes;
    double tol_diag = 0.0, tol_gap = 0.0, tol_class = 0.0;
};

// Kernel, critical value, barrier, sets and static classes on one grid.
template <class M>
ClassicalAnalysis analyze_classical(const M& model, const ClassicalOptions& o) {
    ClassicalAnalysis a;
    a.tol_diag = o.diag_tol();
    a.tol_gap = o.gap_tol();
    a.tol_class = o.class_tol();
    a.kernel = build_kernel(model, ConfigGrid(o.n, 0.0), o.K, o.local_refine, o.threads);
    a.crit = min_mean_cycle(a.kernel, o.threads);
    a.table = peierls_barrier(a.kernel, a.crit.alpha, o.N_min, o.N_max, o.window, o.tol_fix, o.threads);
    try {
        a.aubry = aubry_momenta(a.table, model, a.tol_diag, o.kink_tol);
    } catch (const EmptyAubrySet&) {
        a.aubry_empty = true;
        return a;
    }
    a.mane = mane_set(a.table, a.aubry.projected, a.tol_gap, o.kink_tol);
    a.mather = mather_set(a.table, a.kernel, a.aubry.projected, a.tol_diag);
    a.classes = static_classes(a.table, a.aubry.projected, a.tol_class);
    return a;
}

struct PhaseAnalysis {
    PhaseSetup setup;
    SymplecticAubry aubry;
    bool with_mane = false;
    AubryProfiles profiles;
    std::vector<PhaseManeMember> mane;
    std::vector<int> mather;
    StaticClassPartition classes;
    bool converged = true;
    double tol_diag = 0.0, tol_gap = 0.0, tol_class = 0.0;
};

struct PhaseSetTolerances {
    double tol_diag = 0.0;   // 0: 1/(nq np)
    double tol_gap = 0.0;    // 0: 1/nq
    double tol_class = 0.0;  // 0: 1/nq
    double tol_energy = 0.05;
};

// Symplectic Aubry, Mather and (optionally) Mane sets with static classes, on
// the finest graph of the schedule.
template <class M>
PhaseAnalysis analyze_phase(const M& model, double alpha, const PhaseConfig& cfg, const PhaseSetTolerances& tol,
                            bool with_mane, int threads = 1) {
    PhaseAnalysis a;
    a.setup = build_phase(model, alpha, cfg, threads);
    a.tol_diag = tol.tol_diag > 0 ? tol.tol_diag : 1.0 / (double(cfg.nq) * cfg.np);
    a.tol_gap = tol.tol_gap > 0 ? tol.tol_gap : 1.0 / cfg.nq;
    a.tol_class = tol.tol_class > 0 ? tol.tol_class : 1.0 / cfg.nq;
    PhaseSetOptions so;
    so.chain = a.setup.chain;
    so.tol_diag = a.tol_diag;
    so.tol_gap = a.tol_gap;
    so.tol_class = a.tol_class;
    so.tol_energy = tol.tol_energy;
    const PhaseGraph& g = a.setup.finest();
    a.aubry = symplectic_aubry_set(g, so);
    a.converged = a.aubry.converged;
    a.mather = symplectic_mather_set(a.aubry);
    a.with_mane = with_mane;
    a.profiles = aubry_profiles(g, a.aubry.cells, so.chain, threads, !with_mane);
    a.converged = a.converged && a.profiles.converged;
    if (with_mane) a.mane = symplectic_mane_set(a.profiles, a.tol_gap, g.flow->grid.cells());
    a.classes = static_classes_phase(a.profiles, a.tol_class);
    return a;
}

inline std::vector<int> phase_mane_cells(const std::vector<PhaseManeMember>& m) {
    std::vector<int> v;
    for (auto& x : m) v.push_back(x.cell);
    return v;
}

inline std::vector<PhasePoint> lifted_points(const AubryData& a) {
    std::vector<PhasePoint> v;
    for (auto& x : a.lifted) v.push_back({x.q, x.p});
    return v;
}

inline std::vector<PhasePoint> lifted_points(const std::vector<ManeMember>& m, const ConfigGrid& grid) {
    std::vector<PhasePoint> v;
    for (auto& x : m) v.push_back({grid.q(x.node), x.momentum});
    return v;
}

}  // namespace aubry
