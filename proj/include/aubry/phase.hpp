#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "aubry/barrier.hpp"
#include "aubry/dynamics.hpp"
#include "aubry/util.hpp"

namespace aubry {

// Chart (q, p) -> (q, p + shift(q)) in which the grid is uniform and jump
// lengths are measured. The empty chart is the identity.
struct GridChart {
    std::function<double(double)> shift;

    double operator()(double q) const { return shift ? shift(q) : 0.0; }
    // Length of (dq, dp, dE) from (q0, p0) to (q0 + dq, p1) in chart coordinates.
    double distance(double q0, double p0, double E0, double dq, double p1, double E1) const {
        double dp = p1 - p0 + (shift ? shift(q0 + dq) - shift(q0) : 0.0), dE = E1 - E0;
        return std::sqrt(dq * dq + dp * dp + dE * dE);
    }
};

// nq x np cells, uniform in the chart: centers (q_i, v_j - shift(q_i)) with
// q_i = i/nq, v_j = -p_max + j dv and dv = 2 p_max / np, so v = 0 is a center
// when np is even.
struct PhaseGrid {
    int nq = 0;
    int np = 0;
    double p_max = 2.5;
    GridChart chart;

    PhaseGrid() = default;
    PhaseGrid(int nq_, int np_, double pmax, GridChart ch = {}) : nq(nq_), np(np_), p_max(pmax), chart(std::move(ch)) {
        if (nq < 4 || np < 4) throw std::invalid_argument("PhaseGrid: need at least 4 cells per axis");
        if (!(pmax > 0.0)) throw std::invalid_argument("PhaseGrid: p_max must be positive");
    }
    double dq() const { return 1.0 / nq; }
    double dp() const { return 2.0 * p_max / np; }
    double q(int i) const { return double(i) / nq; }
    double v(int j) const { return -p_max + j * dp(); }
    double p(int i, int j) const { return v(j) - chart(q(i)); }
    int cells() const { return nq * np; }
    int cell(int i, int j) const { return i * np + j; }
    // Cell diameter in chart coordinates.
    double delta() const { return std::hypot(dq(), dp()); }
    // Row and column of the nearest center in chart coordinates (column unclamped).
    std::pair<int, long> nearest(double qq, double pp) const {
        return {int(std::lround(wrap01(qq) * nq)) % nq, std::lround((pp + chart(qq) + p_max) / dp())};
    }
    std::optional<int> locate(double qq, double pp) const {
        auto [i, j] = nearest(qq, pp);
        if (!(j >= 0 && j < np)) return std::nullopt;
        return cell(i, int(j));
    }
};

struct PhaseFlowOptions {
    int steps_per_period = 4;  // flow edges per period
    int substeps = 64;         // RK4 substeps per flow edge
    int samples_per_edge = 16; // stored points per edge where a chain may stop (autonomous models)
};

// Flow part of the phase graph, shared by every jump radius. Node ids are
// section * cells + cell; autonomous models use a single section.
struct PhaseFlow {
    PhaseGrid grid;
    double alpha = 0.0;
    int m = 4;
    int sections = 1;
    int substeps = 64;
    std::vector<double> E;       // energy coordinate -(H - alpha) of each center
    std::vector<int> land;       // landing node or -1 when the orbit leaves the window
    std::vector<double> action;  // integral of (p dq - (H - alpha) dt) along the edge
    std::vector<double> weight;  // action plus the chord integral of p dq to the landing center
    std::vector<double> snap;    // (q,p) distance from orbit endpoint to the landing center
    std::vector<int> pre_off, pre;  // preimages of `land` (CSR)
    // Points along each edge (autonomous models only): sample k of node x sits at
    // index x * samples + k, with the action accumulated up to it. sample_off and
    // sample_ids list samples by nearest cell.
    int samples = 0;
    std::vector<double> sq, sp, sa;
    std::vector<int> sample_off, sample_ids;
    std::function<double(double, double, double)> H;

    int nodes() const { return sections * grid.cells(); }
    int cell_of(int node) const { return node % grid.cells(); }
    int section_of(int node) const { return node / grid.cells(); }
    double tau() const { return 1.0 / m; }
    double t(int node) const { return sections == 1 ? 0.0 : double(section_of(node)) / m; }
    double q(int node) const { return grid.q(cell_of(node) / grid.np); }
    double p(int node) const {
        int c = cell_of(node);
        return grid.p(c / grid.np, c % grid.np);
    }
    int valid_count() const { return int(std::count_if(land.begin(), land.end(), [](int x) { return x >= 0; })); }
};

// Chord integral of p dq along the straight segment (q0,p0) -> (q1,p1).
inline double chord(double q0, double p0, double q1, double p1) {
    return 0.5 * (p0 + p1) * circ_diff(q0, q1);
}

template <class M>
std::shared_ptr<PhaseFlow> build_phase_flow(const M& model, const PhaseGrid& grid, double alpha,
                                            const PhaseFlowOptions& opt = {}, int threads = 1) {
    if (opt.steps_per_period < 1) throw std::invalid_argument("phase flow: steps_per_period must be >= 1");
    auto f = std::make_shared<PhaseFlow>();
    f->grid = grid;
    f->alpha = alpha;
    f->m = opt.steps_per_period;
    f->sections = model.time_dependent ? opt.steps_per_period : 1;
    f->substeps = opt.substeps;
    f->H = [model](double q, double p, double t) { return model.H(q, p, t); };
    const int N = f->nodes();
    f->E.resize(N);
    f->land.assign(N, -1);
    f->action.assign(N, inf);
    f->weight.assign(N, inf);
    f->snap.assign(N, inf);
    const double bound = 4.0 * grid.p_max + 10.0;
    const int S = f->sections == 1 && opt.samples_per_edge > 0 ? opt.samples_per_edge : 0;
    if (S > 0 && opt.substeps % S != 0)
        throw std::invalid_argument("phase flow: substeps must be a multiple of samples_per_edge");
    f->samples = S;
    f->sq.assign(std::size_t(N) * S, 0.0);
    f->sp.assign(std::size_t(N) * S, 0.0);
    f->sa.assign(std::size_t(N) * S, inf);
    const double h = f->tau() / opt.substeps;
    parallel_for(std::size_t(N), threads, [&](std::size_t nn) {
        int node = int(nn);
        double q = f->q(node), p = f->p(node), t = f->t(node);
        f->E[node] = -(model.H(q, p, t) - alpha);
        try {
            auto observe = [&](int k, const double* y) {
                if (S == 0 || k % (opt.substeps / S) != 0) return;
                std::size_t at = std::size_t(node) * S + (k / (opt.substeps / S) - 1);
                f->sq[at] = wrap01(y[0]);
                f->sp[at] = y[1];
                f->sa[at] = y[4] + alpha * k * h;
            };
            FlowResult r = integrate_flow_observed(model, ExtendedState{q, p, t, f->E[node]}, f->tau(), opt.substeps,
                                                   bound, observe);
            auto c = grid.locate(r.state.q, r.state.p);
            if (!c) return;
            int sec = f->sections == 1 ? 0 : (f->section_of(node) + 1) % f->sections;
            int target = sec * grid.cells() + *c;
            double qc = f->q(target), pc = f->p(target);
            f->land[node] = target;
            f->action[node] = r.action + alpha * f->tau();
            f->weight[node] = f->action[node] + chord(r.state.q, r.state.p, qc, pc);
            f->snap[node] = grid.chart.distance(r.state.q, r.state.p, 0.0, circ_diff(r.state.q, qc), pc, 0.0);
        } catch (const WindowError&) {
            if (S > 0) std::fill_n(f->sa.begin() + std::size_t(node) * S, S, inf);
        }
    });
    if (S > 0) {
        const int C = grid.cells();
        std::vector<int> near(std::size_t(N) * S, -1);
        f->sample_off.assign(C + 1, 0);
        for (std::size_t k = 0; k < near.size(); ++k) {
            if (f->sa[k] == inf) continue;
            if (auto c = grid.locate(f->sq[k], f->sp[k])) {
                near[k] = *c;
                ++f->sample_off[*c + 1];
            }
        }
        for (int c = 0; c < C; ++c) f->sample_off[c + 1] += f->sample_off[c];
        f->sample_ids.resize(f->sample_off[C]);
        std::vector<int> fill(f->sample_off.begin(), f->sample_off.end() - 1);
        for (std::size_t k = 0; k < near.size(); ++k)
            if (near[k] >= 0) f->sample_ids[fill[near[k]]++] = int(k);
    }
    f->pre_off.assign(N + 1, 0);
    for (int x = 0; x < N; ++x)
        if (f->land[x] >= 0) ++f->pre_off[f->land[x] + 1];
    for (int x = 0; x < N; ++x) f->pre_off[x + 1] += f->pre_off[x];
    f->pre.resize(f->pre_off[N]);
    std::vector<int> fill(f->pre_off.begin(), f->pre_off.end() - 1);
    for (int x = 0; x < N; ++x)
        if (f->land[x] >= 0) f->pre[fill[f->land[x]]++] = x;
    return f;
}

// Largest change of a flow edge's action when recomputed with `substeps2` substeps.
template <class M>
double flow_edge_check(const M& model, const PhaseFlow& f, int substeps2) {
    double worst = 0.0;
    const double bound = 4.0 * f.grid.p_max + 10.0;
    for (int node = 0; node < f.nodes(); ++node) {
        if (f.land[node] < 0) continue;
        FlowResult r = integrate_flow(model, ExtendedState{f.q(node), f.p(node), f.t(node), f.E[node]}, f.tau(),
                                      substeps2, bound);
        worst = std::max(worst, std::abs(r.action + f.alpha * f.tau() - f.action[node]));
    }
    return worst;
}

// Flow part plus jump edges of radius eps in the metric D of the grid chart.
// Jump costs are measured in `levels` budget units of eps / levels, rounded up;
// a chain may spend at most `levels` units. Jumps carry the chord integral of p dq.
struct PhaseGraph {
    std::shared_ptr<const PhaseFlow> flow;
    double eps = 0.0;
    int levels = 8;
    std::vector<int> off;
    std::vector<int> to;
    std::vector<double> w;
    std::vector<std::uint8_t> cost;
    std::vector<double> dist;

    int nodes() const { return flow->nodes(); }
    double unit() const { return eps / levels; }
    std::size_t jump_count() const { return to.size(); }
};

inline int jump_levels(double D, double eps, int levels) {
    if (D <= 0.0) return 0;
    return std::max(1, int(std::ceil(D * levels / eps - 1e-9)));
}

inline PhaseGraph build_phase_graph(std::shared_ptr<const PhaseFlow> flow, double eps, int levels = 8) {
    if (!(eps > 0.0)) throw std::invalid_argument("phase graph: eps must be positive");
    if (levels < 1 || levels > 200) throw std::invalid_argument("phase graph: levels must be in [1,200]");
    PhaseGraph g;
    g.flow = flow;
    g.eps = eps;
    g.levels = levels;
    const PhaseGrid& gr = flow->grid;
    const int N = flow->nodes();
    const int Ri = std::min(int(std::floor(eps / gr.dq())), (gr.nq - 1) / 2);
    const int Rj = std::min(int(std::floor(eps / gr.dp())), gr.np - 1);
    g.off.assign(N + 1, 0);
    for (int x = 0; x < N; ++x) {
        int cx = flow->cell_of(x), base = x - cx;
        int i = cx / gr.np, j = cx % gr.np;
        double px = gr.p(i, j);
        for (int di = -Ri; di <= Ri; ++di) {
            int ii = ((i + di) % gr.nq + gr.nq) % gr.nq;
            double dq = di * gr.dq();
            for (int dj = -Rj; dj <= Rj; ++dj) {
                int jj = j + dj;
                if ((di == 0 && dj == 0) || jj < 0 || jj >= gr.np) continue;
                int y = base + gr.cell(ii, jj);
                double py = gr.p(ii, jj), dv = dj * gr.dp(), dE = flow->E[y] - flow->E[x];
                double D = std::sqrt(dq * dq + dv * dv + dE * dE);
                if (D > eps * (1.0 + 1e-12)) continue;
                g.to.push_back(y);
                g.w.push_back(0.5 * (px + py) * dq);
                g.cost.push_back(std::uint8_t(jump_levels(D, eps, levels)));
                g.dist.push_back(D);
            }
        }
        g.off[x + 1] = int(g.to.size());
    }
    return g;
}

// Endpoint of a chain: a graph node, or an arbitrary phase point at section 0
// (energy -(H - alpha) unless given).
struct PhaseEndpoint {
    int node = -1;
    double q = 0.0;
    double p = 0.0;
    std::optional<double> E;

    static PhaseEndpoint at_node(int n) {
        PhaseEndpoint e;
        e.node = n;
        return e;
    }
    static PhaseEndpoint at_point(double q, double p) {
        PhaseEndpoint e;
        e.q = q;
        e.p = p;
        return e;
    }
};

struct ChainOptions {
    long n_min = 128;   // periods before the running minimum starts
    long n_max = 256;   // last period considered
    int window = 8;     // periods without change that declare convergence
    double tol_fix = 1e-12;
};

// Running minimum, over horizons of whole periods in [n_min, n_stop], of the
// cheapest chain value per (node, budget level).
struct ChainRun {
    int levels = 0;
    std::vector<double> M;  // M[node * (levels + 1) + b]
    long periods = 0;
    bool converged = false;
    bool stationary = false;  // value iteration reached an exact fixed point
    double last_decrement = 0.0;

    double at(int node, int b) const { return M[std::size_t(node) * (levels + 1) + b]; }
    double best(int node) const {
        double v = inf;
        for (int b = 0; b <= levels; ++b) v = std::min(v, at(node, b));
        return v;
    }
};

struct Seed {
    int node;
    int level;
    double value;
};

namespace detail {

inline double endpoint_E(const PhaseFlow& f, const PhaseEndpoint& e) {
    if (e.node >= 0) return f.E[e.node];
    return e.E ? *e.E : -(f.H(e.q, e.p, 0.0) - f.alpha);
}

// Visits cells of the target's section within eps of (q,p,E) in the metric D:
// visit(cell, level, dq, dp) with dq, dp measured from (q,p) to the cell center.
template <class Visit>
void cells_near(const PhaseGraph& g, int section, double q, double p, double E, Visit&& visit) {
    const PhaseFlow& f = *g.flow;
    const PhaseGrid& gr = f.grid;
    auto [ci, cj] = gr.nearest(q, p);
    const int Ri = std::min(int(std::ceil(g.eps / gr.dq())) + 1, (gr.nq - 1) / 2);
    const int Rj = int(std::ceil(g.eps / gr.dp())) + 1;
    const int base = section * gr.cells();
    for (int di = -Ri; di <= Ri; ++di) {
        int ii = ((ci + di) % gr.nq + gr.nq) % gr.nq;
        double dq = circ_diff(q, gr.q(ii));
        if (std::abs(dq) > g.eps) continue;
        for (int dj = -Rj; dj <= Rj; ++dj) {
            long jj = cj + dj;
            if (jj < 0 || jj >= gr.np) continue;
            int y = base + gr.cell(ii, int(jj));
            double py = gr.p(ii, int(jj)), dp = py - p;
            double D = gr.chart.distance(q, p, E, dq, py, f.E[y]);
            if (D > g.eps * (1.0 + 1e-12)) continue;
            visit(y, jump_levels(D, g.eps, g.levels), dq, dp);
        }
    }
}

// Ways to leave (outgoing) or reach (incoming) an endpoint. Leaving: stay, or
// jump to a nearby node. Reaching from a node y: be the target, jump from y, or
// run part of y's next flow edge and jump from there (autonomous models).
inline std::vector<Seed> endpoint_links(const PhaseGraph& g, const PhaseEndpoint& e, bool outgoing) {
    std::vector<Seed> out;
    const PhaseFlow& f = *g.flow;
    const double E = endpoint_E(f, e);
    double q = e.q, p = e.p;
    if (e.node >= 0) {
        q = f.q(e.node);
        p = f.p(e.node);
        out.push_back({e.node, 0, 0.0});
        for (int k = g.off[e.node]; k < g.off[e.node + 1]; ++k)
            out.push_back({g.to[k], g.cost[k], outgoing ? g.w[k] : -g.w[k]});
    } else {
        cells_near(g, 0, q, p, E, [&](int y, int lev, double dq, double dp) {
            double qy = q + dq, py = p + dp;
            out.push_back({y, lev, outgoing ? chord(q, p, qy, py) : chord(qy, py, q, p)});
        });
    }
    if (outgoing || f.samples == 0) return out;
    // Samples are indexed by nearest cell; any sample within eps of the target
    // lies in a cell whose center is within eps + half a cell diagonal.
    const PhaseGrid& gr = f.grid;
    const double reach = g.eps + 0.5 * gr.delta();
    auto [ci, cj] = gr.nearest(q, p);
    const int Ri = std::min(int(std::ceil(reach / gr.dq())) + 1, (gr.nq - 1) / 2);
    const int Rj = int(std::ceil(reach / gr.dp())) + 1;
    for (int di = -Ri; di <= Ri; ++di) {
        int ii = ((ci + di) % gr.nq + gr.nq) % gr.nq;
        for (int dj = -Rj; dj <= Rj; ++dj) {
            long jj = cj + dj;
            if (jj < 0 || jj >= gr.np) continue;
            int c = gr.cell(ii, int(jj));
            for (int k = f.sample_off[c]; k < f.sample_off[c + 1]; ++k) {
                int id = f.sample_ids[k];
                int y = id / f.samples;
                double D = gr.chart.distance(f.sq[id], f.sp[id], f.E[y], circ_diff(f.sq[id], q), p, E);
                if (D > g.eps * (1.0 + 1e-12)) continue;
                out.push_back({y, jump_levels(D, g.eps, g.levels), f.sa[id] + chord(f.sq[id], f.sp[id], q, p)});
            }
        }
    }
    return out;
}

}  // namespace detail

// Value iteration over chains. Forward: seeds are chain starts and the result
// holds values of chains ending at each node (before any final jump). Backward:
// seeds are the final links into the target and the result holds values of
// chains starting at each node.
inline ChainRun run_chains(const PhaseGraph& g, const std::vector<Seed>& seeds, bool backward,
                           const ChainOptions& opt) {
    const PhaseFlow& f = *g.flow;
    const int N = g.nodes();
    const int L = g.levels + 1;
    const int B = g.levels;
    ChainRun r;
    r.levels = g.levels;
    r.M.assign(std::size_t(N) * L, inf);
    std::vector<double> V(std::size_t(N) * L, inf), T(std::size_t(N) * L, inf);
    std::vector<char> inV(N, 0), inT(N, 0);
    std::vector<int> actV, actT;
    auto touch = [](std::vector<char>& flag, std::vector<int>& act, int x) {
        if (!flag[x]) {
            flag[x] = 1;
            act.push_back(x);
        }
    };
    for (const Seed& s : seeds) {
        if (s.level > B) continue;
        double& v = V[std::size_t(s.node) * L + s.level];
        v = std::min(v, s.value);
        touch(inV, actV, s.node);
    }
    auto clear_rows = [&](std::vector<double>& A, std::vector<char>& flag, std::vector<int>& act) {
        for (int x : act) {
            std::fill_n(A.begin() + std::size_t(x) * L, L, inf);
            flag[x] = 0;
        }
        act.clear();
    };
    // Jump relaxation from rows of `src` listed in `act` into `dst`; backward
    // traversal uses reversed edges (negated chord weight, same cost).
    auto jump = [&](const std::vector<double>& src, const std::vector<int>& act, std::vector<double>& dst,
                    std::vector<char>& flag, std::vector<int>& dact) {
        for (int x : act) {
            const double* sx = &src[std::size_t(x) * L];
            double* dx = &dst[std::size_t(x) * L];
            for (int b = 0; b < L; ++b) dx[b] = std::min(dx[b], sx[b]);
            touch(flag, dact, x);
            int bmax = -1;
            for (int b = 0; b < L; ++b)
                if (sx[b] < inf) bmax = b;
            if (bmax < 0) continue;
            int bmin = 0;
            while (sx[bmin] == inf) ++bmin;
            for (int k = g.off[x]; k < g.off[x + 1]; ++k) {
                int c = g.cost[k];
                if (bmin + c > B) continue;
                int y = g.to[k];
                double w = backward ? -g.w[k] : g.w[k];
                double* dy = &dst[std::size_t(y) * L];
                bool any = false;
                for (int b = bmin; b + c <= B && b <= bmax; ++b) {
                    double v = sx[b] + w;
                    if (v < dy[b + c]) {
                        dy[b + c] = v;
                        any = true;
                    }
                }
                if (any) touch(flag, dact, y);
            }
        }
    };
    const int m = f.m;
    // Autonomous models carry no time coordinate, so every flow step is a valid
    // horizon; time-dependent models only close at whole periods.
    const int stride = f.sections == 1 ? 1 : m;
    long steps = 0, finish_at = 0;
    int stable = 0;
    double period_dec = 0.0;
    std::vector<double> window_dec;
    std::vector<double> snapshot;
    std::vector<int> snapshot_act;
    auto same_as_snapshot = [&]() {
        if (snapshot_act.size() != actV.size()) return false;
        std::vector<int> a = actV;
        std::sort(a.begin(), a.end());
        if (a != snapshot_act) return false;
        for (std::size_t k = 0; k < a.size(); ++k)
            for (int b = 0; b < L; ++b)
                if (V[std::size_t(a[k]) * L + b] != snapshot[k * L + b]) return false;
        return true;
    };
    auto take_snapshot = [&]() {
        snapshot_act = actV;
        std::sort(snapshot_act.begin(), snapshot_act.end());
        snapshot.resize(snapshot_act.size() * L);
        for (std::size_t k = 0; k < snapshot_act.size(); ++k)
            std::copy_n(V.begin() + std::size_t(snapshot_act[k]) * L, L, snapshot.begin() + k * L);
    };
    auto record = [&]() {
        double dec = 0.0;
        for (int x : actV)
            for (int b = 0; b < L; ++b) {
                std::size_t k = std::size_t(x) * L + b;
                if (V[k] < r.M[k]) {
                    dec = std::max(dec, r.M[k] == inf ? inf : r.M[k] - V[k]);
                    r.M[k] = V[k];
                }
            }
        return dec;
    };
    take_snapshot();
    while (true) {
        if (actV.empty()) {
            r.converged = true;
            break;
        }
        if (!backward) {
            jump(V, actV, T, inT, actT);
            clear_rows(V, inV, actV);
            for (int y : actT) {
                int z = f.land[y];
                if (z < 0) continue;
                const double* ty = &T[std::size_t(y) * L];
                double* vz = &V[std::size_t(z) * L];
                double wf = f.weight[y];
                bool any = false;
                for (int b = 0; b < L; ++b) {
                    double v = ty[b] + wf;
                    if (v < vz[b]) {
                        vz[b] = v;
                        any = true;
                    }
                }
                if (any) touch(inV, actV, z);
            }
            clear_rows(T, inT, actT);
        } else {
            for (int z : actV)
                for (int k = f.pre_off[z]; k < f.pre_off[z + 1]; ++k) {
                    int y = f.pre[k];
                    const double* uz = &V[std::size_t(z) * L];
                    double* ty = &T[std::size_t(y) * L];
                    double wf = f.weight[y];
                    for (int b = 0; b < L; ++b) ty[b] = uz[b] + wf;
                    touch(inT, actT, y);
                }
            clear_rows(V, inV, actV);
            jump(T, actT, V, inV, actV);
            clear_rows(T, inT, actT);
        }
        ++steps;
        const bool rec_time = steps % stride == 0;
        if (finish_at > 0) {
            if (rec_time) record();
            if (steps >= finish_at) {
                r.converged = true;
                r.stationary = true;
                break;
            }
            continue;
        }
        if (rec_time && steps >= opt.n_min * m) period_dec = std::max(period_dec, record());
        if (steps % m != 0) continue;
        long period = steps / m;
        r.periods = period;
        if (same_as_snapshot()) {
            // V repeats with the period, so one more period of records covers
            // every later horizon.
            if (stride == m) {
                record();
                r.converged = true;
                r.stationary = true;
                break;
            }
            finish_at = steps + m;
            continue;
        }
        take_snapshot();
        if (period < opt.n_min) continue;
        window_dec.push_back(period_dec);
        stable = period_dec <= opt.tol_fix ? stable + 1 : 0;
        period_dec = 0.0;
        if (stable >= opt.window) {
            r.converged = true;
            break;
        }
        if (period >= opt.n_max) break;
    }
    std::size_t w = std::min<std::size_t>(window_dec.size(), std::size_t(std::max(1, opt.window)));
    for (std::size_t k = window_dec.size() - w; k < window_dec.size(); ++k)
        r.last_decrement = std::max(r.last_decrement, window_dec[k]);
    return r;
}

// Values of chains from the forward run's sources, per target node and budget
// level, after an optional final jump.
inline std::vector<double> close_forward(const PhaseGraph& g, const ChainRun& run) {
    const int N = g.nodes(), L = g.levels + 1, B = g.levels;
    std::vector<double> Q = run.M;
    for (int x = 0; x < N; ++x) {
        const double* mx = &run.M[std::size_t(x) * L];
        for (int k = g.off[x]; k < g.off[x + 1]; ++k) {
            int c = g.cost[k], y = g.to[k];
            double* qy = &Q[std::size_t(y) * L];
            for (int b = 0; b + c <= B; ++b)
                if (mx[b] < inf) qy[b + c] = std::min(qy[b + c], mx[b] + g.w[k]);
        }
    }
    const PhaseFlow& f = *g.flow;
    for (int x = 0; x < N && f.samples > 0; ++x) {
        const double* mx = &run.M[std::size_t(x) * L];
        int bmin = 0;
        while (bmin < L && mx[bmin] == inf) ++bmin;
        if (bmin == L) continue;
        for (int j = 0; j < f.samples; ++j) {
            std::size_t id = std::size_t(x) * f.samples + j;
            if (f.sa[id] == inf) break;
            double qs = f.sq[id], ps = f.sp[id], as = f.sa[id];
            detail::cells_near(g, 0, qs, ps, f.E[x], [&](int y, int c, double dq, double dp) {
                double w = as + chord(qs, ps, qs + dq, ps + dp);
                double* qy = &Q[std::size_t(y) * L];
                for (int b = bmin; b + c <= B; ++b)
                    if (mx[b] < inf) qy[b + c] = std::min(qy[b + c], mx[b] + w);
            });
        }
    }
    return Q;
}

inline double best_level(const std::vector<double>& Q, int node, int levels) {
    double v = inf;
    for (int b = 0; b <= levels; ++b) v = std::min(v, Q[std::size_t(node) * (levels + 1) + b]);
    return v;
}

// Forward run from one endpoint.
inline ChainRun forward_from(const PhaseGraph& g, const PhaseEndpoint& src, const ChainOptions& opt) {
    return run_chains(g, detail::endpoint_links(g, src, true), false, opt);
}

// Backward run into one endpoint.
inline ChainRun backward_to(const PhaseGraph& g, const PhaseEndpoint& dst, const ChainOptions& opt) {
    return run_chains(g, detail::endpoint_links(g, dst, false), true, opt);
}

// Value of a forward run at a target endpoint, restricted to budget <= max_level.
inline double forward_value(const PhaseGraph& g, const ChainRun& run, const PhaseEndpoint& dst, int max_level) {
    const int L = g.levels + 1;
    double best = inf;
    for (const Seed& s : detail::endpoint_links(g, dst, false)) {
        const double* mx = &run.M[std::size_t(s.node) * L];
        for (int b = 0; b + s.level <= max_level; ++b) best = std::min(best, mx[b] + s.value);
    }
    return best;
}

struct PhaseBarrierEstimate {
    std::vector<double> eps;
    std::vector<double> values;       // per eps
    std::vector<long> periods;
    std::vector<int> budget_used;     // smallest level count achieving the value
    double value = inf;               // value at the smallest eps
    bool converged = true;
    double level_jump = 0.0;          // value(B-1 levels) - value(B levels) at the smallest eps
    bool budget_refined = false;
    bool energy_blocked = false;      // an endpoint is off the level G_c = 0
    bool invalid_endpoint = false;    // an endpoint cell left the window or p is outside it
};

struct PhaseBarrierOptions {
    ChainOptions chain;
    double tol_energy = 0.05;
    double budget_step = 0.05;  // refine levels once when the last level buys more than this
};

// G_c = E + H - alpha at an endpoint (zero for cells and on-shell points).
inline double endpoint_G(const PhaseFlow& f, const PhaseEndpoint& e) {
    if (e.node >= 0 || !e.E) return 0.0;
    return *e.E + f.H(e.q, e.p, 0.0) - f.alpha;
}

inline bool endpoint_valid(const PhaseFlow& f, const PhaseEndpoint& e) {
    if (e.node >= 0) return e.node < f.nodes() && f.land[e.node] >= 0;
    double v = e.p + f.grid.chart(e.q);
    return v >= -f.grid.p_max && v <= f.grid.p_max;
}

// h~(X0, X1) over the eps schedule; the estimate is the value at the smallest eps.
inline PhaseBarrierEstimate phase_barrier(const std::vector<PhaseGraph>& graphs, const PhaseEndpoint& X0,
                                          const PhaseEndpoint& X1, const PhaseBarrierOptions& opt) {
    if (graphs.empty()) throw std::invalid_argument("phase_barrier: empty eps schedule");
    PhaseBarrierEstimate est;
    const PhaseFlow& f = *graphs.front().flow;
    bool blocked = std::abs(endpoint_G(f, X0)) > opt.tol_energy || std::abs(endpoint_G(f, X1)) > opt.tol_energy;
    bool invalid = !endpoint_valid(f, X0) || !endpoint_valid(f, X1);
    if (blocked || invalid) {
        est.energy_blocked = blocked;
        est.invalid_endpoint = invalid;
        for (auto& g : graphs) {
            est.eps.push_back(g.eps);
            est.values.push_back(inf);
            est.periods.push_back(0);
            est.budget_used.push_back(-1);
        }
        return est;
    }
    std::size_t smallest = 0;
    for (std::size_t k = 0; k < graphs.size(); ++k)
        if (graphs[k].eps < graphs[smallest].eps) smallest = k;
    for (std::size_t k = 0; k < graphs.size(); ++k) {
        const PhaseGraph& g = graphs[k];
        ChainRun run = forward_from(g, X0, opt.chain);
        double v = forward_value(g, run, X1, g.levels);
        int used = -1;
        for (int b = 0; b <= g.levels && v < inf; ++b)
            if (forward_value(g, run, X1, b) <= v) {
                used = b;
                break;
            }
        est.eps.push_back(g.eps);
        est.values.push_back(v);
        est.periods.push_back(run.periods);
        est.budget_used.push_back(used);
        est.converged = est.converged && run.converged;
        if (k == smallest) {
            double coarser = forward_value(g, run, X1, g.levels - 1);
            est.level_jump = coarser == inf ? (v == inf ? 0.0 : inf) : coarser - v;
            est.value = v;
            if (est.level_jump > opt.budget_step && v < inf) {
                PhaseGraph fine = build_phase_graph(g.flow, g.eps, g.levels * 2);
                ChainRun r2 = forward_from(fine, X0, opt.chain);
                est.value = std::min(v, forward_value(fine, r2, X1, fine.levels));
                est.values[k] = est.value;
                est.budget_refined = true;
                est.converged = est.converged && r2.converged;
            }
        }
    }
    return est;
}

// Grid, schedule and horizon settings of the phase engine.
struct PhaseConfig {
    int nq = 128;
    int np = 128;
    double p_max = 2.5;
    std::vector<double> eps_factors{5.0, 4.0, 3.0};  // eps = factor * cell diameter
    int levels = 16;
    PhaseFlowOptions flow;
    GridChart chart;  // empty: the axis-aligned grid
    long n_min = 0;  // 0: max(nq, np)
    long n_max = 0;  // 0: 2 * n_min
    int window = 8;
    double tol_fix = 1e-12;

    ChainOptions chain() const {
        ChainOptions c;
        c.n_min = n_min > 0 ? n_min : std::max(nq, np);
        c.n_max = n_max > 0 ? n_max : 2 * c.n_min;
        c.window = window;
        c.tol_fix = tol_fix;
        return c;
    }
};

struct PhaseSetup {
    std::shared_ptr<const PhaseFlow> flow;
    std::vector<PhaseGraph> graphs;  // in schedule order
    ChainOptions chain;

    const PhaseGraph& finest() const {
        std::size_t k = 0;
        for (std::size_t j = 1; j < graphs.size(); ++j)
            if (graphs[j].eps < graphs[k].eps) k = j;
        return graphs[k];
    }
};

template <class M>
PhaseSetup build_phase(const M& model, double alpha, const PhaseConfig& cfg, int threads = 1) {
    if (cfg.eps_factors.empty()) throw std::invalid_argument("phase: empty eps schedule");
    PhaseSetup s;
    PhaseGrid grid(cfg.nq, cfg.np, cfg.p_max, cfg.chart);
    s.flow = build_phase_flow(model, grid, alpha, cfg.flow, threads);
    for (double k : cfg.eps_factors) {
        if (!(k > 0.0)) throw std::invalid_argument("phase: eps factors must be positive");
        s.graphs.push_back(build_phase_graph(s.flow, k * grid.delta(), cfg.levels));
    }
    s.chain = cfg.chain();
    return s;
}

// ---- cell-map cycles ----

struct FlowCycle {
    std::vector<int> nodes;
    double weight = 0.0;         // total weight around the cycle
    double mean_per_period = 0.0;
};

inline std::vector<FlowCycle> flow_cycles(const PhaseFlow& f) {
    const int N = f.nodes();
    std::vector<int> color(N, 0);  // 0 new, 1 on stack, 2 done
    std::vector<FlowCycle> out;
    std::vector<int> path;
    for (int s = 0; s < N; ++s) {
        if (color[s]) continue;
        path.clear();
        int x = s;
        while (x >= 0 && color[x] == 0) {
            color[x] = 1;
            path.push_back(x);
            x = f.land[x];
        }
        if (x >= 0 && color[x] == 1) {
            FlowCycle c;
            auto it = std::find(path.begin(), path.end(), x);
            c.nodes.assign(it, path.end());
            for (int y : c.nodes) c.weight += f.weight[y];
            c.mean_per_period = c.weight * f.m / double(c.nodes.size());
            out.push_back(std::move(c));
        }
        for (int y : path) color[y] = 2;
    }
    return out;
}

// Minimum mean per period over cycles of the cell map (the discrete growth rate
// of the cheapest unbroken recurrent chain).
inline double flow_min_cycle_mean(const PhaseFlow& f) {
    double m = inf;
    for (auto& c : flow_cycles(f)) m = std::min(m, c.mean_per_period);
    return m;
}

// ---- symplectic sets ----

struct PhaseSetOptions {
    ChainOptions chain;
    double tol_diag = 1e-4;
    double tol_gap = 1e-2;
    double tol_class = 1e-2;
    double tol_energy = 0.05;
    double tol_hub = -1.0;   // cycle mean per period; default tol_diag / n_min
    int max_hubs = 64;
};

struct HubInfo {
    std::vector<int> representatives;  // section-0 node of each zero-mean cycle
    std::vector<FlowCycle> cycles;
    bool truncated = false;
};

inline HubInfo find_hubs(const PhaseFlow& f, double tol_mean, int max_hubs) {
    HubInfo h;
    for (auto& c : flow_cycles(f)) {
        if (c.mean_per_period > tol_mean) continue;
        int rep = -1;
        for (int x : c.nodes)
            if (f.section_of(x) == 0 && (rep < 0 || x < rep)) rep = x;
        if (rep < 0) continue;
        if (int(h.representatives.size()) >= max_hubs) {
            h.truncated = true;
            continue;
        }
        h.representatives.push_back(rep);
        h.cycles.push_back(c);
    }
    return h;
}

struct SymplecticAubry {
    std::vector<int> cells;      // section-0 nodes with h~(X,X) <= tol_diag
    std::vector<double> diag;    // h~(X,X) through the hubs, every section-0 node
    HubInfo hubs;
    bool converged = true;
};

// h~(X,X) as the cheapest closed chain through a zero-mean cycle of the cell map:
// min over hubs z and budget splits of [X -> z] + [z -> X]. Long closed chains
// with a bounded number of jumps must idle on a cycle of the cell map; cycles of
// positive mean cost at least mean * n_min, so only zero-mean cycles matter.
inline SymplecticAubry symplectic_aubry_set(const PhaseGraph& g, const PhaseSetOptions& opt) {
    const PhaseFlow& f = *g.flow;
    const int C = f.grid.cells(), L = g.levels + 1, B = g.levels;
    double tol_hub = opt.tol_hub >= 0 ? opt.tol_hub : opt.tol_diag / double(std::max<long>(1, opt.chain.n_min));
    SymplecticAubry a;
    a.hubs = find_hubs(f, tol_hub, opt.max_hubs);
    a.diag.assign(C, inf);
    for (int z : a.hubs.representatives) {
        ChainRun fw = forward_from(g, PhaseEndpoint::at_node(z), opt.chain);
        ChainRun bw = backward_to(g, PhaseEndpoint::at_node(z), opt.chain);
        a.converged = a.converged && fw.converged && bw.converged;
        std::vector<double> Q = close_forward(g, fw);
        for (int x = 0; x < C; ++x) {
            if (f.land[x] < 0) continue;
            // prefix minima over levels
            double qf[256], qb[256];
            double runf = inf, runb = inf;
            for (int b = 0; b < L; ++b) {
                runf = std::min(runf, Q[std::size_t(x) * L + b]);
                runb = std::min(runb, bw.M[std::size_t(x) * L + b]);
                qf[b] = runf;
                qb[b] = runb;
            }
            double best = inf;
            for (int b = 0; b <= B; ++b) best = std::min(best, qb[b] + qf[B - b]);
            a.diag[x] = std::min(a.diag[x], best);
        }
    }
    for (int x = 0; x < C; ++x)
        if (a.diag[x] <= opt.tol_diag) a.cells.push_back(x);
    return a;
}

struct PhaseManeMember {
    int cell = 0;
    int from = 0;
    int to = 0;
    double gap = 0.0;
};

// Per Aubry cell: forward values h~(a, .) and backward values h~(., a).
struct AubryProfiles {
    std::vector<int> cells;
    std::vector<std::vector<double>> from;  // from[k][x] = h~(cells[k], x)
    std::vector<std::vector<double>> to;    // to[k][x] = h~(x, cells[k])
    bool converged = true;
};

inline AubryProfiles aubry_profiles(const PhaseGraph& g, const std::vector<int>& aubry, const ChainOptions& chain,
                                    int threads = 1, bool forward_only = false) {
    const int C = g.flow->grid.cells();
    AubryProfiles pr;
    pr.cells = aubry;
    pr.from.assign(aubry.size(), std::vector<double>(C, inf));
    pr.to.assign(aubry.size(), std::vector<double>(C, inf));
    const std::size_t per = forward_only ? 1 : 2;
    std::vector<char> conv(aubry.size() * per, 1);
    parallel_for(aubry.size() * per, threads, [&](std::size_t job) {
        std::size_t k = job / per;
        if (job % per == 0) {
            ChainRun fw = forward_from(g, PhaseEndpoint::at_node(aubry[k]), chain);
            std::vector<double> Q = close_forward(g, fw);
            for (int x = 0; x < C; ++x) pr.from[k][x] = best_level(Q, x, g.levels);
            conv[job] = fw.converged;
        } else {
            ChainRun bw = backward_to(g, PhaseEndpoint::at_node(aubry[k]), chain);
            for (int x = 0; x < C; ++x) pr.to[k][x] = bw.best(x);
            conv[job] = bw.converged;
        }
    });
    for (char c : conv) pr.converged = pr.converged && c;
    return pr;
}

// Cells X with h~(X0,X) + h~(X,X1) <= h~(X0,X1) + tol_gap for Aubry cells X0, X1.
inline std::vector<PhaseManeMember> symplectic_mane_set(const AubryProfiles& pr, double tol_gap, int cells) {
    std::vector<PhaseManeMember> out;
    const std::size_t A = pr.cells.size();
    for (int x = 0; x < cells; ++x) {
        double best = inf;
        int bi = -1, bk = -1;
        for (std::size_t i = 0; i < A; ++i) {
            double a = pr.from[i][x];
            if (a == inf) continue;
            for (std::size_t k = 0; k < A; ++k) {
                double b = pr.to[k][x];
                double ref = pr.from[i][pr.cells[k]];
                if (b == inf || ref == inf) continue;
                double gap = a + b - ref;
                if (gap < best) {
                    best = gap;
                    bi = int(i);
                    bk = int(k);
                }
            }
        }
        if (bi >= 0 && best <= tol_gap) out.push_back({x, pr.cells[bi], pr.cells[bk], best});
    }
    return out;
}

// Symmetrized h~ between Aubry cells; +inf entries are allowed.
inline StaticClassPartition static_classes_phase(const AubryProfiles& pr, double tol_class) {
    const auto& c = pr.cells;
    return static_classes_from(
        c, [&](int a, int b) { return pr.from[a][c[b]] + pr.from[b][c[a]]; }, tol_class);
}

// Aubry cells lying on zero-mean cycles of the cell map.
inline std::vector<int> symplectic_mather_set(const SymplecticAubry& a) {
    std::vector<int> out;
    for (auto& c : a.hubs.cycles)
        for (int x : c.nodes)
            if (std::binary_search(a.cells.begin(), a.cells.end(), x)) out.push_back(x);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

struct BiasymptoticResult {
    double forward = inf;
    double backward = inf;
    bool escaped = false;
};

// Distance in the (q,p) plane from the last 10% of orbit samples (one sample
// per flow edge) to the nearest Aubry cell center, forward and backward in time.
template <class M>
BiasymptoticResult biasymptotic_check(const M& model, const PhaseFlow& f, int cell,
                                      const std::vector<int>& aubry_cells, double T_max, int substeps = 32) {
    BiasymptoticResult r;
    const double bound = 4.0 * f.grid.p_max + 10.0;
    auto dist_to_set = [&](double q, double p) {
        double best = inf;
        for (int a : aubry_cells) best = std::min(best, std::hypot(circ_diff(q, f.q(a)), p - f.p(a)));
        return best;
    };
    for (int dir : {1, -1}) {
        ExtendedState s{f.q(cell), f.p(cell), 0.0, f.E[cell]};
        long samples = std::max(1L, std::lround(T_max * f.m));
        long tail_start = samples - std::max(1L, samples / 10);
        double best = inf;
        try {
            for (long k = 1; k <= samples; ++k) {
                s = flow_step(model, s, dir * f.tau(), substeps, bound);
                if (k > tail_start) best = std::min(best, dist_to_set(s.q, s.p));
            }
        } catch (const WindowError&) {
            r.escaped = true;
        }
        (dir > 0 ? r.forward : r.backward) = best;
    }
    return r;
}

// ---- cross-engine checks ----

inline std::vector<Seed> column_seeds(const PhaseFlow& f, int i) {
    std::vector<Seed> s;
    for (int j = 0; j < f.grid.np; ++j) {
        int c = f.grid.cell(i, j);
        if (f.land[c] >= 0) s.push_back({c, 0, 0.0});
    }
    return s;
}

// min over momentum cells of h~((q_i0, p0), (q_i1, p1)) for every column i1,
// from one multi-source run.
inline std::vector<double> column_minima(const PhaseGraph& g, int i0, const ChainOptions& opt, bool* converged = nullptr) {
    const PhaseFlow& f = *g.flow;
    ChainRun run = run_chains(g, column_seeds(f, i0), false, opt);
    if (converged) *converged = run.converged;
    std::vector<double> Q = close_forward(g, run);
    std::vector<double> out(f.grid.nq, inf);
    for (int i = 0; i < f.grid.nq; ++i)
        for (int j = 0; j < f.grid.np; ++j) {
            int c = f.grid.cell(i, j);
            if (f.land[c] >= 0) out[i] = std::min(out[i], best_level(Q, c, g.levels));
        }
    return out;
}

struct ProjectionCheck {
    double max_residual = 0.0;  // max |min_p h~ - h| over compared pairs
    int pairs = 0;
    bool converged = true;
};

// Compares column minima of h~ with the classical barrier. The classical grid
// size must be a multiple of nq.
inline ProjectionCheck projection_check(const PhaseGraph& g, const BarrierTable& t, const std::vector<int>& base_columns,
                                        const ChainOptions& opt, int threads = 1) {
    const PhaseFlow& f = *g.flow;
    if (t.grid.n % f.grid.nq != 0) throw std::invalid_argument("projection_check: barrier grid must refine the phase grid");
    const int r = t.grid.n / f.grid.nq;
    std::vector<std::vector<double>> rows(base_columns.size());
    std::vector<char> conv(base_columns.size(), 1);
    parallel_for(base_columns.size(), threads, [&](std::size_t k) {
        bool c = true;
        rows[k] = column_minima(g, base_columns[k], opt, &c);
        conv[k] = c;
    });
    ProjectionCheck pc;
    for (std::size_t k = 0; k < base_columns.size(); ++k) {
        pc.converged = pc.converged && conv[k];
        for (int i1 = 0; i1 < f.grid.nq; ++i1) {
            double ht = rows[k][i1];
            double h = t.h(base_columns[k] * r, i1 * r);
            if (!std::isfinite(ht)) {
                pc.max_residual = inf;
                continue;
            }
            pc.max_residual = std::max(pc.max_residual, std::abs(ht - h));
            ++pc.pairs;
        }
    }
    return pc;
}

struct DominanceCheck {
    int pairs = 0;
    int finite = 0;
    double worst = inf;  // min over finite pairs of h~ - h
    bool converged = true;
};

// h~(X0, X1) - h(pi X0, pi X1) over sources x targets.
inline DominanceCheck dominance_check(const PhaseGraph& g, const BarrierTable& t, const std::vector<int>& sources,
                                      const std::vector<int>& targets, const ChainOptions& opt, int threads = 1) {
    const PhaseFlow& f = *g.flow;
    if (t.grid.n % f.grid.nq != 0) throw std::invalid_argument("dominance_check: barrier grid must refine the phase grid");
    const int r = t.grid.n / f.grid.nq;
    std::vector<std::vector<double>> vals(sources.size());
    std::vector<char> conv(sources.size(), 1);
    parallel_for(sources.size(), threads, [&](std::size_t k) {
        ChainRun run = forward_from(g, PhaseEndpoint::at_node(sources[k]), opt);
        conv[k] = run.converged;
        for (int y : targets) vals[k].push_back(forward_value(g, run, PhaseEndpoint::at_node(y), g.levels));
    });
    DominanceCheck d;
    for (std::size_t k = 0; k < sources.size(); ++k) {
        d.converged = d.converged && conv[k];
        int i0 = f.cell_of(sources[k]) / f.grid.np;
        for (std::size_t l = 0; l < targets.size(); ++l) {
            ++d.pairs;
            double v = vals[k][l];
            if (!std::isfinite(v)) continue;
            ++d.finite;
            int i1 = f.cell_of(targets[l]) / f.grid.np;
            d.worst = std::min(d.worst, v - t.h(i0 * r, i1 * r));
        }
    }
    return d;
}

// Hausdorff distance between two finite point sets in the (q,p) plane.
inline double hausdorff_qp(const std::vector<PhasePoint>& A, const std::vector<PhasePoint>& B) {
    if (A.empty() && B.empty()) return 0.0;
    if (A.empty() || B.empty()) return inf;
    auto one = [](const std::vector<PhasePoint>& X, const std::vector<PhasePoint>& Y) {
        double worst = 0.0;
        for (auto& x : X) {
            double best = inf;
            for (auto& y : Y) best = std::min(best, std::hypot(circ_diff(x.q, y.q), x.p - y.p));
            worst = std::max(worst, best);
        }
        return worst;
    };
    return std::max(one(A, B), one(B, A));
}

inline std::vector<PhasePoint> cell_points(const PhaseFlow& f, const std::vector<int>& cells) {
    std::vector<PhasePoint> v;
    for (int c : cells) v.push_back({f.q(c), f.p(c)});
    return v;
}

}  // namespace aubry
