#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace aubry {

inline constexpr double two_pi = 2.0 * std::numbers::pi;
inline constexpr double inf = std::numeric_limits<double>::infinity();

// Canonical representative of q on R/Z, in [0,1).
inline double wrap01(double q) {
    double r = q - std::floor(q);
    return r >= 1.0 ? 0.0 : r;
}

// Signed shortest displacement from a to b on R/Z, in [-1/2, 1/2).
inline double circ_diff(double a, double b) {
    double d = b - a;
    d -= std::floor(d + 0.5);
    return d;
}

inline double circ_dist(double a, double b) { return std::abs(circ_diff(a, b)); }

// Static block partition of [0, count) over at most `threads` workers. Each
// index is visited exactly once, so writes to per-index slots stay deterministic.
template <class F>
void parallel_for(std::size_t count, int threads, F&& body) {
    if (count == 0) return;
    std::size_t workers = static_cast<std::size_t>(std::max(1, threads));
    workers = std::min(workers, count);
    if (workers == 1) {
        for (std::size_t i = 0; i < count; ++i) body(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    std::size_t chunk = (count + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        std::size_t lo = w * chunk, hi = std::min(count, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &body] {
            for (std::size_t i = lo; i < hi; ++i) body(i);
        });
    }
    for (auto& t : pool) t.join();
}

// Shortest round-trip decimal text for a double (17 significant digits at most),
// locale independent. Infinities are written as inf / -inf.
inline std::string fmt_real(double x) {
    if (std::isnan(x)) return "nan";
    if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, x, std::chars_format::general, 17);
    return std::string(buf, res.ptr);
}

// Dense row-major square matrix.
struct Matrix {
    int n = 0;
    std::vector<double> a;

    Matrix() = default;
    explicit Matrix(int size, double fill = 0.0) : n(size), a(std::size_t(size) * size, fill) {}

    double& operator()(int i, int j) { return a[std::size_t(i) * n + j]; }
    double operator()(int i, int j) const { return a[std::size_t(i) * n + j]; }
    double* row(int i) { return a.data() + std::size_t(i) * n; }
    const double* row(int i) const { return a.data() + std::size_t(i) * n; }
};

// Min-plus product C = A (x) B.
inline Matrix minplus(const Matrix& A, const Matrix& B, int threads = 1) {
    if (A.n != B.n) throw std::invalid_argument("minplus: size mismatch");
    const int n = A.n;
    Matrix C(n, inf);
    parallel_for(std::size_t(n), threads, [&](std::size_t i) {
        double* c = C.row(int(i));
        const double* ai = A.row(int(i));
        for (int k = 0; k < n; ++k) {
            const double aik = ai[k];
            if (aik == inf) continue;
            const double* bk = B.row(k);
            for (int j = 0; j < n; ++j) {
                double v = aik + bk[j];
                c[j] = v < c[j] ? v : c[j];
            }
        }
    });
    return C;
}

// Diagonal of the min-plus product without forming the full matrix.
inline std::vector<double> minplus_diag(const Matrix& A, const Matrix& B) {
    std::vector<double> d(A.n, inf);
    for (int i = 0; i < A.n; ++i) {
        const double* ai = A.row(i);
        double best = inf;
        for (int k = 0; k < A.n; ++k) best = std::min(best, ai[k] + B(k, i));
        d[i] = best;
    }
    return d;
}

// Min-plus power A^m (m >= 1) by binary exponentiation.
inline Matrix minplus_power(const Matrix& A, long m, int threads = 1) {
    if (m < 1) throw std::invalid_argument("minplus_power: exponent must be >= 1");
    Matrix result;
    bool have = false;
    Matrix base = A;
    while (m > 0) {
        if (m & 1) {
            result = have ? minplus(result, base, threads) : base;
            have = true;
        }
        m >>= 1;
        if (m > 0) base = minplus(base, base, threads);
    }
    return result;
}

}  // namespace aubry
