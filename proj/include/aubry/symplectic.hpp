#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "aubry/dynamics.hpp"
#include "aubry/pipeline.hpp"
#include "aubry/util.hpp"

namespace aubry {

enum class MapKind { identity, momentum_shift, composition };

inline std::string to_string(MapKind k) {
    switch (k) {
        case MapKind::identity: return "identity";
        case MapKind::momentum_shift: return "momentum_shift";
        default: return "composition";
    }
}

// p -> p + f'(q) with primitive S = f(q); f is one-periodic.
struct MomentumShift {
    std::function<double(double)> f;
    std::function<double(double)> df;
    std::function<double(double)> d2f;
};

// Exact diffeomorphism of the extended phase space with primitive S:
// Psi^* lambda - lambda = dS.
struct ExactMap {
    MapKind kind = MapKind::identity;
    std::string label = "identity";
    std::function<ExtendedState(const ExtendedState&)> forward;
    std::function<ExtendedState(const ExtendedState&)> inverse;
    std::function<double(const ExtendedState&)> primitive_S;
    std::optional<MomentumShift> shift;  // present when the map is a momentum shift

    ExtendedState operator()(const ExtendedState& x) const { return forward(x); }
};

inline ExactMap momentum_shift_map(MomentumShift s, std::string label) {
    ExactMap m;
    m.kind = MapKind::momentum_shift;
    m.label = std::move(label);
    auto df = s.df;
    auto f = s.f;
    m.forward = [df](const ExtendedState& x) { return ExtendedState{x.q, x.p + df(x.q), x.t, x.E}; };
    m.inverse = [df](const ExtendedState& x) { return ExtendedState{x.q, x.p - df(x.q), x.t, x.E}; };
    m.primitive_S = [f](const ExtendedState& x) { return f(x.q); };
    m.shift = std::move(s);
    return m;
}

inline ExactMap identity_map() {
    MomentumShift z{[](double) { return 0.0; }, [](double) { return 0.0; }, [](double) { return 0.0; }};
    ExactMap m = momentum_shift_map(z, "identity");
    m.kind = MapKind::identity;
    return m;
}

// f(q) = -(a / 2 pi) cos(2 pi q), so p -> p + a sin(2 pi q).
inline ExactMap sine_shift_map(double a) {
    if (a == 0.0) return identity_map();
    MomentumShift s{[a](double q) { return -a / two_pi * std::cos(two_pi * q); },
                    [a](double q) { return a * std::sin(two_pi * q); },
                    [a](double q) { return a * two_pi * std::cos(two_pi * q); }};
    return momentum_shift_map(s, "sine_shift(a=" + fmt_real(a) + ")");
}

// outer o inner, with S = S_outer o inner + S_inner.
inline ExactMap compose(const ExactMap& outer, const ExactMap& inner) {
    ExactMap m;
    m.kind = MapKind::composition;
    m.label = outer.label + " o " + inner.label;
    auto of = outer.forward, inf_ = inner.forward, oi = outer.inverse, ii = inner.inverse;
    auto os = outer.primitive_S, is = inner.primitive_S;
    m.forward = [of, inf_](const ExtendedState& x) { return of(inf_(x)); };
    m.inverse = [oi, ii](const ExtendedState& x) { return ii(oi(x)); };
    m.primitive_S = [os, is, inf_](const ExtendedState& x) { return os(inf_(x)) + is(x); };
    if (outer.shift && inner.shift) {
        MomentumShift a = *outer.shift, b = *inner.shift;
        m.shift = MomentumShift{[a, b](double q) { return a.f(q) + b.f(q); },
                                [a, b](double q) { return a.df(q) + b.df(q); },
                                [a, b](double q) { return a.d2f(q) + b.d2f(q); }};
    }
    return m;
}

namespace detail {

inline ExtendedState random_state(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u01(0.0, 1.0), up(-3.0, 3.0), uE(-2.0, 2.0);
    return {u01(rng), up(rng), u01(rng), uE(rng)};
}

inline double state_distance(const ExtendedState& a, const ExtendedState& b) {
    return std::max({circ_dist(a.q, b.q), std::abs(a.p - b.p), circ_dist(a.t, b.t), std::abs(a.E - b.E)});
}

}  // namespace detail

// max |inverse(forward(x)) - x| over random states.
inline double round_trip_error(const ExactMap& m, int samples = 1000, std::uint64_t seed = 1) {
    std::mt19937_64 rng(seed);
    double worst = 0.0;
    for (int k = 0; k < samples; ++k) {
        ExtendedState x = detail::random_state(rng);
        worst = std::max(worst, detail::state_distance(m.inverse(m.forward(x)), x));
    }
    return worst;
}

// Loop integral of Psi^* lambda - lambda over {p = p0, t = 0}, q in [0,1), by the
// periodic trapezoid rule with centered differences for dq'/dq.
inline double exactness_loop_integral(const ExactMap& m, double p0 = 0.0, int samples = 4096) {
    const double h = 1.0 / samples, dh = 1e-6;
    double sum = 0.0;
    for (int k = 0; k < samples; ++k) {
        double q = k * h;
        ExtendedState y = m.forward({q, p0, 0.0, 0.0});
        double qa = m.forward({q - dh, p0, 0.0, 0.0}).q, qb = m.forward({q + dh, p0, 0.0, 0.0}).q;
        double dq = circ_diff(qa, qb) / (2.0 * dh);
        sum += y.p * dq - p0;
    }
    return sum * h;
}

// Largest change of the base part of forward(q,p,t,E) when only E varies, plus
// the largest change of E' - E. Zero for maps whose pullback is E-independent.
inline double energy_dependence(const ExactMap& m, int samples = 200, std::uint64_t seed = 2) {
    std::mt19937_64 rng(seed);
    double worst = 0.0;
    for (int k = 0; k < samples; ++k) {
        ExtendedState x = detail::random_state(rng);
        ExtendedState a = m.forward(x), b = m.forward({x.q, x.p, x.t, x.E + 1.0});
        worst = std::max({worst, circ_dist(a.q, b.q), std::abs(a.p - b.p), circ_dist(a.t, b.t),
                          std::abs((b.E - (x.E + 1.0)) - (a.E - x.E))});
    }
    return worst;
}

// (q,p,t) -> H(Psi(q,p,t,E)) for a momentum shift stays mechanical: the gauge
// field gains f'.
inline MechanicalModel pullback_hamiltonian(const MechanicalModel& model, const ExactMap& map) {
    if (!map.shift) throw std::invalid_argument("pullback of a mechanical model needs a momentum-shift map");
    if (map.kind == MapKind::identity) return model;
    MechanicalModel m = model;
    MomentumShift s = *map.shift;
    auto g0 = model.g, dg0 = model.dg_dq;
    m.g = [g0, s](double q) { return (g0 ? g0(q) : 0.0) + s.df(q); };
    m.dg_dq = [dg0, s](double q) { return (dg0 ? dg0(q) : 0.0) + s.d2f(q); };
    m.name = model.name + "_pulled";
    return m;
}

// Generic pullback through the map with derivatives by centered differences.
// Rejects maps whose pullback depends on E.
template <class M>
CallableModel pullback_callable(const M& model, const ExactMap& map, double tol_E = 1e-12) {
    if (energy_dependence(map) > tol_E)
        throw std::invalid_argument("pullback rejected: the map makes the Hamiltonian depend on E");
    CallableModel c;
    c.name = model.name + "_pulled";
    c.parameters = model.parameters;
    auto fw = map.forward;
    auto H = [model, fw](double q, double p, double t) {
        ExtendedState y = fw({q, p, t, 0.0});
        return model.H(y.q, y.p, y.t) + y.E;
    };
    const double h = 1e-6;
    c.H_fn = H;
    c.dH_dp_fn = [H, h](double q, double p, double t) { return (H(q, p + h, t) - H(q, p - h, t)) / (2 * h); };
    c.dH_dq_fn = [H, h](double q, double p, double t) { return (H(q + h, p, t) - H(q - h, p, t)) / (2 * h); };
    c.dH_dt_fn = [H, h](double q, double p, double t) { return (H(q, p, t + h) - H(q, p, t - h)) / (2 * h); };
    c.convex = model.convex_in_p();
    c.time_dependent = model.time_dependent;
    return c;
}

// max |Psi(Phi'_T(x)) - Phi_T(Psi(x))| over random states with |p| <= 2, where
// Phi' is the flow of the pulled-back model.
template <class M, class MP>
double conjugacy_error(const M& model, const MP& pulled, const ExactMap& map, double T = 1.0, int samples = 50,
                       int substeps = 400, std::uint64_t seed = 3) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0), up(-2.0, 2.0);
    double worst = 0.0;
    for (int k = 0; k < samples; ++k) {
        ExtendedState x{u01(rng), up(rng), u01(rng), 0.0};
        x.E = -pulled.H(x.q, x.p, x.t);
        ExtendedState a = map.forward(integrate_flow(pulled, x, T, substeps).state);
        ExtendedState b = integrate_flow(model, map.forward(x), T, substeps).state;
        worst = std::max(worst, detail::state_distance(a, b));
    }
    return worst;
}

struct InvarianceCheck {
    std::string name;
    double value = 0.0;
    double tolerance = 0.0;
    bool pass = false;
    std::string note;
};

struct InvarianceOptions {
    ClassicalOptions classical;
    bool phase = true;
    PhaseConfig phase_cfg;
    PhaseSetTolerances phase_tol;
    int pair_sources = 10;
    int pair_targets = 10;
    std::uint64_t seed = 1;
    double tol_alpha = 0.02;
    double tol_cells = 2.0;  // set distances in phase cell diameters
    double tol_identity = 0.05;
    double tol_isometry = 0.05;
    double tol_roundtrip = 1e-10;
    double tol_exact = 1e-8;
    double tol_flow = 1e-8;
    bool covariant_grid = true;  // false: both sides use the axis-aligned grid
    int threads = 1;
};

struct PairResidual {
    int source = 0;  // cells of the base model's phase grid
    int target = 0;
    double h_base = 0.0;    // h~_G(Y0, Y1)
    double h_pulled = 0.0;  // h~_{G o Psi}(Psi^-1 Y0, Psi^-1 Y1)
    double S0 = 0.0, S1 = 0.0;
    double residual = 0.0;
};

struct InvarianceReport {
    std::string model;
    std::string map;
    ClassicalAnalysis base, pulled;
    std::optional<PhaseAnalysis> phase_base, phase_pulled;
    std::vector<PairResidual> pairs;
    std::vector<InvarianceCheck> checks;
    bool inconclusive = false;
    bool pass = false;
};

// Phase configuration for G o Psi on the preimage of the base grid: cells and
// jump lengths are measured in the coordinates of Psi, so cell k of the pulled
// grid is Psi^-1 of cell k of the base grid.
inline PhaseConfig pulled_phase_config(PhaseConfig cfg, const ExactMap& map) {
    if (!map.shift || map.kind == MapKind::identity) return cfg;
    cfg.chart.shift = map.shift->df;
    return cfg;
}

namespace detail {

// Matches classes of the pulled side to base classes through shared members
// (after mapping) and returns max |d'(i,j) - d(match i, match j)|.
inline double quotient_isometry_residual(const StaticClassPartition& base, const StaticClassPartition& pulled,
                                         const std::function<int(int)>& to_base_class) {
    const int c = int(pulled.classes.size());
    if (c != int(base.classes.size())) return inf;
    std::vector<int> match(c, -1);
    for (int k = 0; k < c; ++k) {
        std::vector<int> votes(base.classes.size(), 0);
        for (int x : pulled.classes[k]) {
            int b = to_base_class(x);
            if (b >= 0) ++votes[b];
        }
        match[k] = int(std::max_element(votes.begin(), votes.end()) - votes.begin());
        if (votes[match[k]] == 0) return inf;
    }
    std::vector<int> sorted = match;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) return inf;
    double worst = 0.0;
    for (int i = 0; i < c; ++i)
        for (int j = 0; j < c; ++j) {
            double a = pulled.quotient(i, j), b = base.quotient(match[i], match[j]);
            if (a == inf && b == inf) continue;
            worst = std::max(worst, std::abs(a - b));
        }
    return worst;
}

inline InvarianceCheck check(std::string name, double value, double tol, std::string note = "") {
    return {std::move(name), value, tol, std::isfinite(value) && value <= tol, std::move(note)};
}

}  // namespace detail

// Runs the classical and phase pipelines on H and on Psi^* H and compares them.
inline InvarianceReport invariance_report(const MechanicalModel& model, const ExactMap& map,
                                          const InvarianceOptions& o) {
    InvarianceReport r;
    r.model = model.name;
    r.map = map.label;
    if (!model.convex_in_p()) throw std::invalid_argument("invariance_report: model must be convex in p");
    MechanicalModel pulled = pullback_hamiltonian(model, map);
    ClassicalOptions co = o.classical;
    co.threads = o.threads;
    r.base = analyze_classical(model, co);
    r.pulled = analyze_classical(pulled, co);
    if (!r.base.table.converged || !r.pulled.table.converged) r.inconclusive = true;

    r.checks.push_back(detail::check("round_trip", round_trip_error(map), o.tol_roundtrip));
    r.checks.push_back(detail::check("exactness_loop", std::abs(exactness_loop_integral(map, 0.3)), o.tol_exact));
    r.checks.push_back(detail::check("energy_independence", energy_dependence(map), 1e-12));
    r.checks.push_back(detail::check("conjugacy", conjugacy_error(model, pulled, map), 10.0 * o.tol_flow));
    r.checks.push_back(detail::check("alpha", std::abs(r.base.crit.alpha - r.pulled.crit.alpha), o.tol_alpha));

    const double delta = PhaseGrid(o.phase_cfg.nq, o.phase_cfg.np, o.phase_cfg.p_max).delta();
    const double set_tol = o.tol_cells * delta;
    auto mapped = [&](std::vector<PhasePoint> v) {
        for (auto& x : v) x.p += map.forward({x.q, x.p, 0.0, 0.0}).p - x.p;
        return v;
    };
    if (r.base.aubry_empty || r.pulled.aubry_empty) {
        r.checks.push_back({"aubry_image_classical", inf, set_tol, false, "empty Aubry set"});
    } else {
        r.checks.push_back(detail::check("aubry_image_classical",
                                         hausdorff_qp(mapped(lifted_points(r.pulled.aubry)), lifted_points(r.base.aubry)),
                                         set_tol));
        r.checks.push_back(detail::check(
            "mane_image_classical",
            hausdorff_qp(mapped(lifted_points(r.pulled.mane, r.pulled.table.grid)),
                         lifted_points(r.base.mane, r.base.table.grid)),
            set_tol));
        const ConfigGrid& g = r.base.table.grid;
        std::vector<int> base_class(g.n, -1);
        for (std::size_t k = 0; k < r.base.classes.classes.size(); ++k)
            for (int x : r.base.classes.classes[k]) base_class[x] = int(k);
        double iso = detail::quotient_isometry_residual(r.base.classes, r.pulled.classes,
                                                        [&](int node) { return base_class[node]; });
        r.checks.push_back(detail::check("quotient_isometry_classical", iso, o.tol_isometry,
                                         std::to_string(r.base.classes.classes.size()) + " classes"));
    }

    if (o.phase) {
        PhaseSetTolerances pt = o.phase_tol;
        r.phase_base = analyze_phase(model, r.base.crit.alpha, o.phase_cfg, pt, true, o.threads);
        PhaseConfig pulled_cfg = o.covariant_grid ? pulled_phase_config(o.phase_cfg, map) : o.phase_cfg;
        r.phase_pulled = analyze_phase(pulled, r.pulled.crit.alpha, pulled_cfg, pt, true, o.threads);
        const PhaseAnalysis& B = *r.phase_base;
        const PhaseAnalysis& P = *r.phase_pulled;
        if (!B.converged || !P.converged) r.inconclusive = true;
        const PhaseFlow& fb = *B.setup.flow;
        const PhaseFlow& fp = *P.setup.flow;
        r.checks.push_back(detail::check("aubry_image_phase",
                                         hausdorff_qp(mapped(cell_points(fp, P.aubry.cells)), cell_points(fb, B.aubry.cells)),
                                         set_tol));
        r.checks.push_back(detail::check(
            "mane_image_phase",
            hausdorff_qp(mapped(cell_points(fp, phase_mane_cells(P.mane))), cell_points(fb, phase_mane_cells(B.mane))),
            set_tol));

        // Identity h~_{G o Psi}(X0,X1) = h~_G(Psi X0, Psi X1) + S(X0) - S(X1) on pairs of
        // base Aubry/Mane cells Y = Psi X.
        std::vector<int> pool = phase_mane_cells(B.mane);
        pool.insert(pool.end(), B.aubry.cells.begin(), B.aubry.cells.end());
        std::sort(pool.begin(), pool.end());
        pool.erase(std::unique(pool.begin(), pool.end()), pool.end());
        std::mt19937_64 rng(o.seed);
        std::vector<int> src, dst;
        if (!pool.empty()) {
            std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
            for (int k = 0; k < o.pair_sources; ++k) src.push_back(pool[pick(rng)]);
            for (int k = 0; k < o.pair_targets; ++k) dst.push_back(pool[pick(rng)]);
        }
        const PhaseGraph& gb = B.setup.finest();
        const PhaseGraph& gp = P.setup.finest();
        auto inv_point = [&](int cell) {
            if (o.covariant_grid) return PhaseEndpoint::at_node(cell);
            ExtendedState x = map.inverse({fb.q(cell), fb.p(cell), 0.0, 0.0});
            return PhaseEndpoint::at_point(x.q, x.p);
        };
        auto coords = [&](const PhaseEndpoint& e) {
            return e.node >= 0 ? ExtendedState{fp.q(e.node), fp.p(e.node), 0.0, 0.0} : ExtendedState{e.q, e.p, 0.0, 0.0};
        };
        std::vector<std::vector<PairResidual>> rows(src.size());
        parallel_for(src.size(), o.threads, [&](std::size_t k) {
            ChainRun rb = forward_from(gb, PhaseEndpoint::at_node(src[k]), B.setup.chain);
            PhaseEndpoint x0 = inv_point(src[k]);
            ChainRun rp = forward_from(gp, x0, P.setup.chain);
            for (int y : dst) {
                PairResidual pr;
                pr.source = src[k];
                pr.target = y;
                pr.h_base = forward_value(gb, rb, PhaseEndpoint::at_node(y), gb.levels);
                PhaseEndpoint x1 = inv_point(y);
                pr.h_pulled = forward_value(gp, rp, x1, gp.levels);
                pr.S0 = map.primitive_S(coords(x0));
                pr.S1 = map.primitive_S(coords(x1));
                if (std::isfinite(pr.h_base) && std::isfinite(pr.h_pulled))
                    pr.residual = std::abs(pr.h_pulled - pr.h_base - pr.S0 + pr.S1);
                else
                    pr.residual = std::isfinite(pr.h_base) == std::isfinite(pr.h_pulled) ? 0.0 : inf;
                rows[k].push_back(pr);
            }
        });
        double worst = 0.0;
        int finite = 0;
        for (auto& row : rows)
            for (auto& pr : row) {
                r.pairs.push_back(pr);
                worst = std::max(worst, pr.residual);
                if (std::isfinite(pr.h_base) && std::isfinite(pr.h_pulled)) ++finite;
            }
        if (r.pairs.empty()) worst = inf;
        r.checks.push_back(detail::check("phase_identity", worst, o.tol_identity,
                                         std::to_string(finite) + " finite of " + std::to_string(r.pairs.size()) +
                                             " pairs"));
        // Classes of the pulled side map to base classes through the nearest base Aubry cell.
        std::vector<int> cell_class(fb.nodes(), -1);
        for (std::size_t k = 0; k < B.classes.classes.size(); ++k)
            for (int x : B.classes.classes[k]) cell_class[x] = int(k);
        auto to_base = [&](int cell) {
            ExtendedState y = map.forward({fp.q(cell), fp.p(cell), 0.0, 0.0});
            double best = inf;
            int cls = -1;
            for (int a : B.aubry.cells) {
                double d = std::hypot(circ_diff(y.q, fb.q(a)), y.p - fb.p(a));
                if (d < best) {
                    best = d;
                    cls = cell_class[a];
                }
            }
            return cls;
        };
        r.checks.push_back(detail::check("quotient_isometry_phase",
                                         detail::quotient_isometry_residual(B.classes, P.classes, to_base),
                                         o.tol_isometry,
                                         std::to_string(B.classes.classes.size()) + " classes"));
    }
    r.pass = !r.inconclusive;
    for (auto& c : r.checks) r.pass = r.pass && c.pass;
    return r;
}

}  // namespace aubry
