#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <vector>

#include "aubry/dynamics.hpp"
#include "aubry/util.hpp"

namespace aubry {

struct ConfigGrid {
    int n = 0;
    double section_time = 0.0;

    ConfigGrid() = default;
    explicit ConfigGrid(int size, double t0 = 0.0) : n(size), section_time(t0) {
        if (size < 8) throw std::invalid_argument("ConfigGrid: n must be >= 8");
    }
    double q(int i) const { return double(i) / n; }
    double step() const { return 1.0 / n; }
    int nearest(double x) const { return int(std::lround(wrap01(x) * n)) % n; }
};

struct RefineInfo {
    bool enabled = false;
    double max_gain = 0.0;   // largest decrease of an entry produced by refinement
    double mean_gain = 0.0;
};

struct ActionKernel {
    ConfigGrid grid;
    Matrix A;
    int substeps = 16;
    RefineInfo refine;
};

namespace detail {

// Straight segment from unwrapped position xa with displacement disp over
// [tmid - dt/2, tmid + dt/2], midpoint quadrature.
template <class M>
double segment_cost(const M& m, double xa, double disp, double tmid, double dt) {
    return dt * m.legendre(wrap01(xa + 0.5 * disp), disp / dt, tmid).L;
}

// Cheapest of the three lifts d, d - 1, d + 1 of the hop xa -> xb.
template <class M>
std::pair<double, double> best_hop(const M& m, double xa, double xb, double tmid, double dt) {
    double d0 = circ_diff(xa, xb);
    double best = inf, disp = d0;
    for (double lift : {0.0, -1.0, 1.0}) {
        double c = segment_cost(m, xa, d0 + lift, tmid, dt);
        if (c < best) {
            best = c;
            disp = d0 + lift;
        }
    }
    return {best, disp};
}

// Gradient of one segment's cost with respect to its two endpoints.
template <class M>
std::pair<double, double> segment_grad(const M& m, double a, double b, double tmid, double dt) {
    double disp = b - a;
    auto lp = lagrangian_with_partials(m, wrap01(a + 0.5 * disp), disp / dt, tmid);
    double Lv = lp[1], Lq = lp[2];
    return {-Lv + 0.5 * dt * Lq, Lv + 0.5 * dt * Lq};
}

// Damped Newton on the interior knots of a broken path with a tridiagonal
// Hessian (finite differences of analytic segment gradients) and backtracking,
// so the returned value never exceeds the starting value.
template <class M>
double refine_knots(const M& m, std::vector<double>& x, double t0, double dt) {
    const int K = int(x.size()) - 1;
    auto tmid = [&](int k) { return t0 + (k + 0.5) * dt; };
    auto total = [&](const std::vector<double>& y) {
        double s = 0.0;
        for (int k = 0; k < K; ++k) s += segment_cost(m, y[k], y[k + 1] - y[k], tmid(k), dt);
        return s;
    };
    double value = total(x);
    if (K < 2) return value;
    const int ni = K - 1;
    std::vector<double> G(ni), Dg(ni), Off(std::max(0, ni - 1)), step(ni), trial(x.size());
    std::vector<double> cp(ni), dp(ni);
    std::vector<double> saa(K), sab(K), sbb(K), ga(K), gb(K);
    for (int iter = 0; iter < 40; ++iter) {
        for (int k = 0; k < K; ++k) {
            double a = x[k], b = x[k + 1], tm = tmid(k);
            auto g0 = segment_grad(m, a, b, tm, dt);
            ga[k] = g0.first;
            gb[k] = g0.second;
            double h = 1e-6;
            auto gap = segment_grad(m, a + h, b, tm, dt), gam = segment_grad(m, a - h, b, tm, dt);
            auto gbp = segment_grad(m, a, b + h, tm, dt), gbm = segment_grad(m, a, b - h, tm, dt);
            saa[k] = (gap.first - gam.first) / (2 * h);
            sbb[k] = (gbp.second - gbm.second) / (2 * h);
            sab[k] = 0.25 * ((gap.second - gam.second) + (gbp.first - gbm.first)) / h;
        }
        double gmax = 0.0;
        for (int i = 0; i < ni; ++i) {
            int k = i + 1;
            G[i] = gb[k - 1] + ga[k];
            Dg[i] = sbb[k - 1] + saa[k];
            if (i + 1 < ni) Off[i] = sab[k];
            gmax = std::max(gmax, std::abs(G[i]));
        }
        if (gmax < 1e-14) break;
        bool improved = false;
        for (double mu = 0.0; mu < 1e8 && !improved;) {
            // Thomas algorithm on (H + mu I) step = -G.
            bool ok = true;
            for (int i = 0; i < ni; ++i) {
                double diag = Dg[i] + mu - (i > 0 ? Off[i - 1] * cp[i - 1] : 0.0);
                if (!(diag > 0.0)) {
                    ok = false;
                    break;
                }
                cp[i] = i + 1 < ni ? Off[i] / diag : 0.0;
                dp[i] = (-G[i] - (i > 0 ? Off[i - 1] * dp[i - 1] : 0.0)) / diag;
            }
            if (ok) {
                for (int i = ni - 1; i >= 0; --i) step[i] = dp[i] - (i + 1 < ni ? cp[i] * step[i + 1] : 0.0);
                double tstep = 1.0;
                for (int ls = 0; ls < 40; ++ls, tstep *= 0.5) {
                    trial = x;
                    for (int i = 0; i < ni; ++i) trial[i + 1] += tstep * step[i];
                    double v = total(trial);
                    if (v < value) {
                        x = trial;
                        value = v;
                        improved = true;
                        break;
                    }
                }
            }
            mu = mu == 0.0 ? 1e-6 * (1.0 + std::abs(Dg[0])) : mu * 100.0;
        }
        if (!improved) break;
        double smax = 0.0;
        for (int i = 0; i < ni; ++i) smax = std::max(smax, std::abs(step[i]));
        if (smax < 1e-13) break;
    }
    return value;
}

// Dynamic programming over broken paths with K hops between grid nodes at
// intermediate times, started from an arbitrary circle point.
template <class M>
class BrokenPathDP {
public:
    BrokenPathDP(const M& model, int n, double t0, double duration, int K)
        : m_(model), n_(n), t0_(t0), K_(K), dt_(duration / K) {
        if (K < 2) throw std::invalid_argument("BrokenPathDP: K must be >= 2");
        int distinct = model.time_dependent ? K : 1;
        C_.resize(distinct);
        for (int k = 0; k < distinct; ++k) {
            Matrix& C = C_[k];
            C = Matrix(n);
            double tm = tmid(k);
            for (int a = 0; a < n; ++a)
                for (int b = 0; b < n; ++b) C(a, b) = best_hop(m_, q(a), q(b), tm, dt_).first;
        }
    }

    double q(int i) const { return double(i) / n_; }
    double tmid(int k) const { return t0_ + (k + 0.5) * dt_; }
    double dt() const { return dt_; }
    int K() const { return K_; }
    const Matrix& cost(int k) const { return C_[C_.size() == 1 ? 0 : k]; }

    struct Row {
        std::vector<double> last;               // values after K - 1 hops
        std::vector<std::vector<int>> pred;     // pred[k][b] for hops k = 1..K-2 (index k-1)
    };

    Row solve(double x0) const {
        Row r;
        r.last.assign(n_, inf);
        for (int b = 0; b < n_; ++b) r.last[b] = best_hop(m_, x0, q(b), tmid(0), dt_).first;
        std::vector<double> next(n_);
        for (int k = 1; k < K_ - 1; ++k) {
            const Matrix& C = cost(k);
            std::vector<int> pr(n_, -1);
            std::fill(next.begin(), next.end(), inf);
            for (int a = 0; a < n_; ++a) {
                double da = r.last[a];
                const double* ca = C.row(a);
                for (int b = 0; b < n_; ++b) {
                    double v = da + ca[b];
                    if (v < next[b]) {
                        next[b] = v;
                        pr[b] = a;
                    }
                }
            }
            r.pred.push_back(std::move(pr));
            r.last.swap(next);
        }
        return r;
    }

    // Final hop to grid node j or point y: returns (value, node before the last hop).
    std::pair<double, int> finish_node(const Row& r, int j) const {
        const Matrix& C = cost(K_ - 1);
        double best = inf;
        int arg = -1;
        for (int a = 0; a < n_; ++a) {
            double v = r.last[a] + C(a, j);
            if (v < best) {
                best = v;
                arg = a;
            }
        }
        return {best, arg};
    }
    std::pair<double, int> finish_point(const Row& r, double y) const {
        double best = inf;
        int arg = -1;
        for (int a = 0; a < n_; ++a) {
            double v = r.last[a] + best_hop(m_, q(a), y, tmid(K_ - 1), dt_).first;
            if (v < best) {
                best = v;
                arg = a;
            }
        }
        return {best, arg};
    }

    // Unwrapped knot positions of the DP path ending at y via node `before`.
    std::vector<double> knots(const Row& r, double x0, int before, double y) const {
        std::vector<int> nodes(K_ + 1, -1);
        nodes[K_ - 1] = before;
        for (int k = K_ - 2; k >= 1; --k) nodes[k] = r.pred[k - 1][nodes[k + 1]];
        std::vector<double> x(K_ + 1);
        x[0] = x0;
        if (K_ == 1) {
            x[1] = x0 + best_hop(m_, x0, y, tmid(0), dt_).second;
            return x;
        }
        x[1] = x0 + best_hop(m_, x0, q(nodes[1]), tmid(0), dt_).second;
        for (int k = 1; k < K_ - 1; ++k) x[k + 1] = x[k] + best_hop(m_, q(nodes[k]), q(nodes[k + 1]), tmid(k), dt_).second;
        x[K_] = x[K_ - 1] + best_hop(m_, q(nodes[K_ - 1]), y, tmid(K_ - 1), dt_).second;
        return x;
    }

    double refine(std::vector<double>& x) const { return refine_knots(m_, x, t0_, dt_); }

private:
    const M& m_;
    int n_;
    double t0_;
    int K_;
    double dt_;
    std::vector<Matrix> C_;
};

}  // namespace detail

// Minimal action over broken paths from (q0, t0) to (q1, t0 + s) sampled at K
// uniform times; the spatial DP runs over a grid of n nodes.
template <class M>
double one_step_action(const M& model, int n, double q0, double t0, double q1, double s, int K,
                       bool local_refine) {
    if (s < 1.0) throw std::invalid_argument("one_step_action: s must be >= 1");
    if (K < 4) throw std::invalid_argument("one_step_action: K must be >= 4");
    if (n < 8) throw std::invalid_argument("one_step_action: grid must have n >= 8");
    detail::BrokenPathDP<M> dp(model, n, t0, s, K);
    auto row = dp.solve(q0);
    auto [value, before] = dp.finish_point(row, q1);
    if (!local_refine) return value;
    auto x = dp.knots(row, q0, before, q1);
    return std::min(value, dp.refine(x));
}

template <class M>
ActionKernel build_kernel(const M& model, const ConfigGrid& grid, int K = 16, bool local_refine = true,
                          int threads = 1) {
    if (K < 4) throw std::invalid_argument("build_kernel: K must be >= 4");
    const int n = grid.n;
    detail::BrokenPathDP<M> dp(model, n, grid.section_time, 1.0, K);
    ActionKernel ker;
    ker.grid = grid;
    ker.substeps = K;
    ker.A = Matrix(n);
    ker.refine.enabled = local_refine;
    std::vector<double> gain_max(n, 0.0), gain_sum(n, 0.0);
    parallel_for(std::size_t(n), threads, [&](std::size_t ii) {
        int i = int(ii);
        auto row = dp.solve(grid.q(i));
        for (int j = 0; j < n; ++j) {
            auto [value, before] = dp.finish_node(row, j);
            if (local_refine) {
                auto x = dp.knots(row, grid.q(i), before, grid.q(j));
                double r = dp.refine(x);
                if (r < value) {
                    gain_max[i] = std::max(gain_max[i], value - r);
                    gain_sum[i] += value - r;
                    value = r;
                }
            }
            ker.A(i, j) = value;
        }
    });
    for (int i = 0; i < n; ++i) {
        ker.refine.max_gain = std::max(ker.refine.max_gain, gain_max[i]);
        ker.refine.mean_gain += gain_sum[i];
    }
    ker.refine.mean_gain /= double(n) * n;
    return ker;
}

}  // namespace aubry
