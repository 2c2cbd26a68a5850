#include <cmath>
#include <random>

#include "catch_amalgamated.hpp"

#include "aubry/critical.hpp"

using namespace aubry;
using Catch::Approx;

namespace {

Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    Matrix A(int(rows.size()));
    int i = 0;
    for (auto& r : rows) {
        int j = 0;
        for (double x : r) A(i, j++) = x;
        ++i;
    }
    return A;
}

// Exhaustive minimum cycle mean over simple cycles of a small matrix.
double brute_min_mean(const Matrix& A) {
    const int n = A.n;
    double best = inf;
    std::vector<int> path;
    std::vector<char> used(n, 0);
    auto rec = [&](auto&& self, int start, double w) -> void {
        int last = path.back();
        best = std::min(best, (w + A(last, start)) / double(path.size()));
        for (int v = start + 1; v < n; ++v)
            if (!used[v]) {
                used[v] = 1;
                path.push_back(v);
                self(self, start, w + A(last, v));
                path.pop_back();
                used[v] = 0;
            }
    };
    for (int s = 0; s < n; ++s) {
        path = {s};
        used.assign(n, 0);
        used[s] = 1;
        rec(rec, s, 0.0);
    }
    return best;
}

}  // namespace

TEST_CASE("constant kernel", "[critical]") {
    Matrix A(6, 2.5);
    auto r = min_mean_cycle(A);
    CHECK(r.alpha == -2.5);
    CHECK(r.cycle == std::vector<int>{0});
    CHECK(r.mean_residual <= 1e-12);
}

TEST_CASE("two-node kernel", "[critical]") {
    auto r = min_mean_cycle(from_rows({{0, 5}, {-2, 3}}));
    CHECK(r.alpha == Approx(0.0).margin(1e-15));
    CHECK(r.cycle == std::vector<int>{0});
}

TEST_CASE("Karp agrees with exhaustive cycle enumeration", "[critical]") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int trial = 0; trial < 20; ++trial) {
        Matrix A(6);
        for (double& x : A.a) x = u(rng);
        auto r = min_mean_cycle(A);
        CHECK(-r.alpha == Approx(brute_min_mean(A)).margin(1e-12));
        CHECK(r.mean_residual <= 1e-12);
        CHECK(!r.cycle.empty());
        CHECK(r.cycle.size() <= 6);
    }
}

TEST_CASE("tie-break picks the lexicographically smallest cycle", "[critical]") {
    Matrix A(4, 1.0);
    A(2, 2) = 0.0;
    A(1, 3) = 0.0;
    A(3, 1) = 0.0;
    auto r = min_mean_cycle(A);
    CHECK(r.alpha == Approx(0.0).margin(1e-15));
    CHECK(r.cycle == std::vector<int>{1, 3});
}

TEST_CASE("shift equivariance of the minimum cycle mean", "[critical]") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Matrix A(12);
    for (double& x : A.a) x = u(rng);
    Matrix B = A;
    for (double& x : B.a) x += 0.75;
    CHECK(min_mean_cycle(B).karp_mean == Approx(min_mean_cycle(A).karp_mean + 0.75).margin(1e-12));
}

TEST_CASE("free particle has critical value zero", "[critical]") {
    auto r = critical_value(free_particle(), ConfigGrid(32), 8);
    CHECK(r.alpha == Approx(0.0).margin(1e-12));
    REQUIRE(r.cycle.size() == 1);
}

TEST_CASE("pendulum critical value is max V", "[critical]") {
    auto r = critical_value(pendulum(), ConfigGrid(256), 16);
    CHECK(r.alpha == Approx(1.0).margin(0.02));
    REQUIRE(r.cycle.size() == 1);
    CHECK(r.cycle[0] == 0);
    auto r2 = critical_value(pendulum(2.0), ConfigGrid(64), 16);
    CHECK(r2.alpha == Approx(2.0).margin(0.04));
}

TEST_CASE("criticality trichotomy on the pendulum kernel", "[critical]") {
    auto k = build_kernel(pendulum(), ConfigGrid(64), 16);
    double alpha = min_mean_cycle(k).alpha;
    auto c0 = criticality_class(k.A, alpha);
    CHECK(c0.cls == Criticality::critical);
    CHECK(std::abs(c0.slope) <= 1e-6);
    auto up = criticality_class(k.A, alpha + 0.5);
    CHECK(up.cls == Criticality::super_critical);
    CHECK(up.slope == Approx(0.5).margin(1e-6));
    auto down = criticality_class(k.A, alpha - 0.5);
    CHECK(down.cls == Criticality::sub_critical);
    CHECK(down.slope == Approx(-0.5).margin(1e-6));
    for (auto* r : {&c0, &up, &down}) CHECK(r->slope == Approx(r->expected).margin(1e-6));
}
