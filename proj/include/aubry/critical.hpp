#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "aubry/action.hpp"
#include "aubry/util.hpp"

namespace aubry {

struct CriticalResult {
    double alpha = 0.0;
    std::vector<int> cycle;      // canonical rotation, starts at its smallest node
    double karp_mean = 0.0;      // minimum cycle mean from the recurrence
    double mean_residual = 0.0;  // |karp_mean - mean of the extracted cycle|
};

namespace detail {

inline double cycle_mean(const Matrix& A, const std::vector<int>& c) {
    double s = 0.0;
    for (std::size_t k = 0; k < c.size(); ++k) s += A(c[k], c[(k + 1) % c.size()]);
    return s / double(c.size());
}

inline std::vector<int> canonical_rotation(std::vector<int> c) {
    auto it = std::min_element(c.begin(), c.end());
    std::rotate(c.begin(), it, c.end());
    return c;
}

}  // namespace detail

// Karp's recurrence with a virtual source joined to every node by a zero edge,
// so D_0 = 0 everywhere and D_k[v] is the cheapest walk of exactly k edges
// ending at v. alpha is minus the mean of the extracted cycle.
inline CriticalResult min_mean_cycle(const Matrix& A, int threads = 1) {
    const int n = A.n;
    if (n < 1) throw std::invalid_argument("min_mean_cycle: empty kernel");
    for (double x : A.a)
        if (!std::isfinite(x)) throw std::invalid_argument("min_mean_cycle: kernel must be finite");
    std::vector<double> D(std::size_t(n + 1) * n, inf);
    std::vector<int> P(std::size_t(n + 1) * n, -1);
    for (int v = 0; v < n; ++v) D[v] = 0.0;
    for (int k = 1; k <= n; ++k) {
        const double* prev = &D[std::size_t(k - 1) * n];
        double* cur = &D[std::size_t(k) * n];
        int* pk = &P[std::size_t(k) * n];
        parallel_for(std::size_t(n), threads, [&](std::size_t vv) {
            int v = int(vv);
            double best = inf;
            int arg = -1;
            for (int u = 0; u < n; ++u) {
                double c = prev[u] + A(u, v);
                if (c < best) {
                    best = c;
                    arg = u;
                }
            }
            cur[v] = best;
            pk[v] = arg;
        });
    }
    double mu = inf;
    int vstar = -1;
    for (int v = 0; v < n; ++v) {
        double worst = -inf;
        for (int k = 0; k < n; ++k) worst = std::max(worst, (D[std::size_t(n) * n + v] - D[std::size_t(k) * n + v]) / double(n - k));
        if (worst < mu) {
            mu = worst;
            vstar = v;
        }
    }
    // Walk the optimal n-edge walk backward; the first repeated node closes a cycle.
    std::vector<int> walk(n + 1);
    walk[n] = vstar;
    for (int k = n; k >= 1; --k) walk[k - 1] = P[std::size_t(k) * n + walk[k]];
    std::vector<int> seen(n, -1);
    std::vector<int> cycle;
    for (int k = n; k >= 0; --k) {
        int v = walk[k];
        if (seen[v] >= 0) {
            for (int j = k; j < seen[v]; ++j) cycle.push_back(walk[j]);
            break;
        }
        seen[v] = k;
    }
    std::vector<std::vector<int>> candidates;
    candidates.push_back(detail::canonical_rotation(cycle));
    double cmean = detail::cycle_mean(A, cycle);
    double best_mean = std::min(cmean, mu);
    double tie = 1e-12 * (1.0 + std::abs(best_mean));
    for (int i = 0; i < n; ++i)
        if (A(i, i) <= best_mean + tie) candidates.push_back({i});
    std::vector<int> chosen;
    double chosen_mean = inf;
    for (auto& c : candidates) {
        double m = detail::cycle_mean(A, c);
        if (m > best_mean + tie) continue;
        if (chosen.empty() || c < chosen) {
            chosen = c;
            chosen_mean = m;
        }
    }
    CriticalResult r;
    r.cycle = chosen;
    r.alpha = -chosen_mean;
    r.karp_mean = mu;
    r.mean_residual = std::abs(mu - chosen_mean);
    return r;
}

inline CriticalResult min_mean_cycle(const ActionKernel& k, int threads = 1) { return min_mean_cycle(k.A, threads); }

template <class M>
CriticalResult critical_value(const M& model, const ConfigGrid& grid, int K = 16, int threads = 1) {
    return min_mean_cycle(build_kernel(model, grid, K, true, threads), threads);
}

enum class Criticality { sub_critical, critical, super_critical, indeterminate };

inline std::string to_string(Criticality c) {
    switch (c) {
        case Criticality::sub_critical: return "sub_critical";
        case Criticality::critical: return "critical";
        case Criticality::super_critical: return "super_critical";
        default: return "indeterminate";
    }
}

struct CriticalityResult {
    Criticality cls = Criticality::indeterminate;
    double slope = 0.0;                 // per-step growth over the last half of N steps
    double slope_q3 = 0.0, slope_q4 = 0.0;  // growth over the third and fourth quarters
    long steps = 0;
    double expected = 0.0;              // shift + minimum cycle mean
};

// Growth of d_m = min_i ((A + shift)^m)_ii, sampled at m = N/2, 3N/4, N with the
// powers formed by binary exponentiation (the same iterates value iteration
// produces). Positive slope means super-critical: the action of long closed
// loops diverges to +infinity.
inline CriticalityResult criticality_class(const Matrix& A, double shift, double tol_slope = 1e-4, long N = 0,
                                           int threads = 1) {
    const int n = A.n;
    if (N <= 0) N = 10L * n;
    N = std::max(4L, (N + 3) / 4 * 4);
    Matrix B = A;
    for (double& x : B.a) x += shift;
    Matrix P4 = minplus_power(B, N / 4, threads);
    Matrix P2 = minplus(P4, P4, threads);
    auto diag_min = [](const std::vector<double>& d) { return *std::min_element(d.begin(), d.end()); };
    std::vector<double> d2(n);
    for (int i = 0; i < n; ++i) d2[i] = P2(i, i);
    double m2 = diag_min(d2);
    double m3 = diag_min(minplus_diag(P2, P4));
    double m4 = diag_min(minplus_diag(P2, P2));
    CriticalityResult r;
    r.steps = N;
    r.slope = (m4 - m2) / double(N / 2);
    r.slope_q3 = (m3 - m2) / double(N / 4);
    r.slope_q4 = (m4 - m3) / double(N / 4);
    r.expected = shift + min_mean_cycle(A, threads).karp_mean;
    if (r.slope > tol_slope)
        r.cls = Criticality::super_critical;
    else if (r.slope < -tol_slope)
        r.cls = Criticality::sub_critical;
    else if ((r.slope_q3 > tol_slope && r.slope_q4 < -tol_slope) || (r.slope_q3 < -tol_slope && r.slope_q4 > tol_slope))
        r.cls = Criticality::indeterminate;
    else
        r.cls = Criticality::critical;
    return r;
}

}  // namespace aubry
