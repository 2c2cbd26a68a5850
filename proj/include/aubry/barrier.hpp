#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "aubry/action.hpp"
#include "aubry/critical.hpp"
#include "aubry/dynamics.hpp"
#include "aubry/util.hpp"

namespace aubry {

struct BarrierTable {
    ConfigGrid grid;
    Matrix h;
    double alpha_used = 0.0;
    long iterations = 0;
    bool converged = false;
    int stabilization_window = 0;
    double last_decrement = 0.0;  // largest running-min decrease over the final window
};

// Peierls barrier of the critical kernel: B = A + alpha, V(n) = B^n, h is the
// running minimum over n in [N_min, n_stop]. Stops once the running minimum moved
// by at most tol_fix for `window` consecutive iterations.
inline BarrierTable peierls_barrier(const ActionKernel& kernel, double alpha, long N_min = 0, long N_max = 0,
                                    int window = 16, double tol_fix = 1e-12, int threads = 1) {
    const int n = kernel.grid.n;
    if (N_min <= 0) N_min = n;
    if (N_max <= 0) N_max = 4L * n;
    if (N_max < N_min) throw std::invalid_argument("peierls_barrier: N_max < N_min");
    Matrix B = kernel.A;
    for (double& x : B.a) x += alpha;
    Matrix V = minplus_power(B, N_min, threads);
    BarrierTable t;
    t.grid = kernel.grid;
    t.alpha_used = alpha;
    t.stabilization_window = window;
    t.h = V;
    long it = N_min;
    int stable = 0;
    std::vector<double> window_dec;
    while (it < N_max) {
        V = minplus(V, B, threads);
        ++it;
        double dec = 0.0;
        for (std::size_t k = 0; k < V.a.size(); ++k) {
            if (V.a[k] < t.h.a[k]) {
                dec = std::max(dec, t.h.a[k] - V.a[k]);
                t.h.a[k] = V.a[k];
            }
        }
        window_dec.push_back(dec);
        stable = dec <= tol_fix ? stable + 1 : 0;
        if (stable >= window) {
            t.converged = true;
            break;
        }
    }
    t.iterations = it;
    std::size_t w = std::min<std::size_t>(window_dec.size(), std::size_t(std::max(1, window)));
    for (std::size_t k = window_dec.size() - w; k < window_dec.size(); ++k)
        t.last_decrement = std::max(t.last_decrement, window_dec[k]);
    return t;
}

// max over (i,k) of |h[i][k] - min_j (h[i][j] + A_c[j][k])|.
inline double weak_kam_residual(const BarrierTable& t, const ActionKernel& kernel, double alpha, int threads = 1) {
    Matrix B = kernel.A;
    for (double& x : B.a) x += alpha;
    Matrix hb = minplus(t.h, B, threads);
    double r = 0.0;
    for (std::size_t k = 0; k < hb.a.size(); ++k) r = std::max(r, std::abs(hb.a[k] - t.h.a[k]));
    return r;
}

// Largest violation of h[i][k] <= h[i][j] + h[j][k].
inline double triangle_violation(const Matrix& h, int threads = 1) {
    Matrix hh = minplus(h, h, threads);
    double v = -inf;
    for (std::size_t k = 0; k < h.a.size(); ++k) v = std::max(v, h.a[k] - hh.a[k]);
    return v;
}

struct EmptyAubrySet : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::vector<int> projected_aubry_set(const BarrierTable& t, double tol_diag) {
    std::vector<int> s;
    for (int i = 0; i < t.grid.n; ++i)
        if (t.h(i, i) <= tol_diag) s.push_back(i);
    if (s.empty())
        throw EmptyAubrySet("projected Aubry set is empty: tol_diag is below the discretization error, increase it");
    return s;
}

struct LiftedPoint {
    int node = 0;
    double q = 0.0;
    double p = 0.0;
    double t = 0.0;
    double E = 0.0;             // -(H - alpha), so G_c = E + H - alpha = 0
    double energy_residual = 0.0;  // |H(q,p,t) - alpha|
    bool one_sided = false;     // finite difference fell back to one side
};

struct AubryData {
    std::vector<int> projected;
    std::vector<LiftedPoint> lifted;
    double lipschitz = 0.0;  // max |P_i - P_j| / dist over adjacent Aubry nodes
};

namespace detail {

// Momentum d/dq' h(q_from, q') at q' = q_node: centered difference, with a
// one-sided fallback when the two one-sided slopes disagree by more than
// kink_tol (a corner of h).
inline std::pair<double, bool> barrier_slope(const Matrix& h, int from, int node, double kink_tol) {
    const int n = h.n;
    int r = (node + 1) % n, l = (node + n - 1) % n;
    double fwd = (h(from, r) - h(from, node)) * n;
    double bwd = (h(from, node) - h(from, l)) * n;
    double cen = 0.5 * (h(from, r) - h(from, l)) * n;
    if (std::abs(fwd - bwd) <= kink_tol) return {cen, false};
    return {std::abs(fwd) < std::abs(bwd) ? fwd : bwd, true};
}

}  // namespace detail

template <class M>
AubryData aubry_momenta(const BarrierTable& t, const M& model, double tol_diag, double kink_tol = 0.5) {
    AubryData d;
    d.projected = projected_aubry_set(t, tol_diag);
    const double t0 = t.grid.section_time;
    for (int i : d.projected) {
        auto [P, one_sided] = detail::barrier_slope(t.h, i, i, kink_tol);
        LiftedPoint lp;
        lp.node = i;
        lp.q = t.grid.q(i);
        lp.p = P;
        lp.t = t0;
        double H = model.H(lp.q, P, t0);
        lp.E = -(H - t.alpha_used);
        lp.energy_residual = std::abs(H - t.alpha_used);
        lp.one_sided = one_sided;
        d.lifted.push_back(lp);
    }
    for (std::size_t a = 0; a + 1 < d.lifted.size(); ++a) {
        const auto& x = d.lifted[a];
        const auto& y = d.lifted[a + 1];
        if (y.node - x.node == 1)
            d.lipschitz = std::max(d.lipschitz, std::abs(x.p - y.p) * t.grid.n);
    }
    if (d.lifted.size() > 1 && d.lifted.front().node == 0 && d.lifted.back().node == t.grid.n - 1)
        d.lipschitz = std::max(d.lipschitz, std::abs(d.lifted.front().p - d.lifted.back().p) * t.grid.n);
    return d;
}

struct ManeMember {
    int node = 0;
    int from = 0;  // witness Aubry node i0
    int to = 0;    // witness Aubry node i1
    double gap = 0.0;
    double momentum = 0.0;  // d/dq h(i0, q) at the member node
};

// Nodes j with h[i0][j] + h[j][i1] <= h[i0][i1] + tol_gap for some Aubry i0, i1.
// A node reached from several sources can sit on several branches (heteroclinic
// arcs in both directions); it gets one member per momentum, where momenta
// within two grid steps count as one branch and the smallest gap is kept.
inline std::vector<ManeMember> mane_set(const BarrierTable& t, const std::vector<int>& aubry, double tol_gap,
                                        double kink_tol = 0.5) {
    std::vector<ManeMember> out;
    const double same_branch = 2.0 * t.grid.step();
    for (int j = 0; j < t.grid.n; ++j) {
        std::vector<ManeMember> cand;
        for (int i0 : aubry) {
            double best = inf;
            int bk = -1;
            for (int i1 : aubry) {
                double gap = t.h(i0, j) + t.h(j, i1) - t.h(i0, i1);
                if (gap < best) {
                    best = gap;
                    bk = i1;
                }
            }
            if (bk >= 0 && best <= tol_gap)
                cand.push_back({j, i0, bk, best, detail::barrier_slope(t.h, i0, j, kink_tol).first});
        }
        std::stable_sort(cand.begin(), cand.end(), [](auto& a, auto& b) { return a.gap < b.gap; });
        std::vector<ManeMember> kept;
        for (auto& c : cand)
            if (std::none_of(kept.begin(), kept.end(),
                             [&](auto& k) { return std::abs(k.momentum - c.momentum) <= same_branch; }))
                kept.push_back(c);
        std::sort(kept.begin(), kept.end(), [](auto& a, auto& b) { return a.momentum < b.momentum; });
        out.insert(out.end(), kept.begin(), kept.end());
    }
    return out;
}

inline std::vector<int> mane_nodes(const std::vector<ManeMember>& m) {
    std::vector<int> v;
    for (auto& x : m)
        if (v.empty() || v.back() != x.node) v.push_back(x.node);
    return v;
}

// Aubry nodes lying on a cycle of the critical kernel A_c = A + alpha restricted
// to Aubry nodes, with mean weight at most tol. Cycle lengths up to
// min(|Aubry|, max_len) are examined through min-plus powers of the subgraph.
inline std::vector<int> mather_set(const BarrierTable& t, const ActionKernel& kernel, const std::vector<int>& aubry,
                                   double tol, int max_len = 64) {
    const int m = int(aubry.size());
    Matrix S(m);
    for (int a = 0; a < m; ++a)
        for (int b = 0; b < m; ++b) S(a, b) = kernel.A(aubry[a], aubry[b]) + t.alpha_used;
    std::vector<char> on(m, 0);
    int remaining = m;
    for (int a = 0; a < m; ++a)
        if (S(a, a) <= tol) {
            on[a] = 1;
            --remaining;
        }
    Matrix P = S;
    for (int L = 2; L <= std::min(m, max_len) && remaining > 0; ++L) {
        P = minplus(P, S);
        for (int a = 0; a < m; ++a)
            if (!on[a] && P(a, a) <= L * tol) {
                on[a] = 1;
                --remaining;
            }
    }
    std::vector<int> out;
    for (int a = 0; a < m; ++a)
        if (on[a]) out.push_back(aubry[a]);
    return out;
}

struct StaticClassPartition {
    std::vector<std::vector<int>> classes;
    Matrix quotient;  // class x class minimum of d over representatives
};

// Union-find over Aubry nodes with d[i][j] = h[i][j] + h[j][i] <= tol_class.
inline StaticClassPartition static_classes_from(const std::vector<int>& nodes,
                                                const std::function<double(int, int)>& d, double tol_class) {
    const int m = int(nodes.size());
    std::vector<int> parent(m);
    std::iota(parent.begin(), parent.end(), 0);
    std::function<int(int)> find = [&](int x) { return parent[x] == x ? x : parent[x] = find(parent[x]); };
    for (int a = 0; a < m; ++a)
        for (int b = a + 1; b < m; ++b)
            if (d(a, b) <= tol_class) {
                int ra = find(a), rb = find(b);
                if (ra != rb) parent[std::max(ra, rb)] = std::min(ra, rb);
            }
    std::vector<int> label(m, -1);
    StaticClassPartition p;
    for (int a = 0; a < m; ++a) {
        int r = find(a);
        if (label[r] < 0) {
            label[r] = int(p.classes.size());
            p.classes.emplace_back();
        }
        p.classes[label[r]].push_back(nodes[a]);
    }
    const int c = int(p.classes.size());
    p.quotient = Matrix(c, inf);
    for (int a = 0; a < m; ++a)
        for (int b = 0; b < m; ++b) {
            int ca = label[find(a)], cb = label[find(b)];
            p.quotient(ca, cb) = std::min(p.quotient(ca, cb), ca == cb ? 0.0 : d(a, b));
        }
    for (int k = 0; k < c; ++k) p.quotient(k, k) = 0.0;
    return p;
}

inline StaticClassPartition static_classes(const BarrierTable& t, const std::vector<int>& aubry, double tol_class) {
    return static_classes_from(
        aubry, [&](int a, int b) { return t.h(aubry[a], aubry[b]) + t.h(aubry[b], aubry[a]); }, tol_class);
}

}  // namespace aubry
