#include <cmath>
#include <random>

#include "catch_amalgamated.hpp"

#include "aubry/symplectic.hpp"

using namespace aubry;
using Catch::Approx;

TEST_CASE("zero shift is the identity with zero primitive", "[symplectic]") {
    auto id = identity_map();
    CHECK(id.kind == MapKind::identity);
    CHECK(sine_shift_map(0.0).kind == MapKind::identity);
    ExtendedState x{0.25, -0.7, 0.4, 1.5};
    auto y = id(x);
    CHECK(y.q == x.q);
    CHECK(y.p == x.p);
    CHECK(y.t == x.t);
    CHECK(y.E == x.E);
    CHECK(id.primitive_S({0.25, 0.0, 0.0, 0.0}) == 0.0);
    auto m = pendulum();
    auto pm = pullback_hamiltonian(m, id);
    CHECK(pm.H(0.3, 0.2, 0.0) == m.H(0.3, 0.2, 0.0));
}

TEST_CASE("sine shift is an exact E-independent diffeomorphism", "[symplectic]") {
    auto s = sine_shift_map(0.3);
    CHECK(s.kind == MapKind::momentum_shift);
    CHECK(round_trip_error(s) <= 1e-12);
    CHECK(std::abs(exactness_loop_integral(s, 0.3)) <= 1e-8);
    CHECK(std::abs(exactness_loop_integral(s, -1.1)) <= 1e-8);
    CHECK(energy_dependence(s) == 0.0);
    auto y = s({0.25, 0.1, 0.0, 0.0});
    CHECK(y.p == Approx(0.4).margin(1e-15));
    CHECK(s.primitive_S({0.25, 0.0, 0.0, 0.0}) == Approx(0.0).margin(1e-15));
    CHECK(s.primitive_S({0.5, 0.0, 0.0, 0.0}) == Approx(0.3 / two_pi).margin(1e-15));
}

TEST_CASE("constant momentum translation is symplectic but not exact", "[symplectic]") {
    ExactMap m;
    m.kind = MapKind::composition;
    m.forward = [](const ExtendedState& x) { return ExtendedState{x.q, x.p + 0.2, x.t, x.E}; };
    m.inverse = [](const ExtendedState& x) { return ExtendedState{x.q, x.p - 0.2, x.t, x.E}; };
    m.primitive_S = [](const ExtendedState&) { return 0.0; };
    // flux through the loop equals the translation
    CHECK(exactness_loop_integral(m, 0.3) == Approx(0.2).margin(1e-9));
}

TEST_CASE("pullback adds the shift to the gauge field", "[symplectic]") {
    auto s = sine_shift_map(0.3);
    auto m = pendulum();
    auto pm = pullback_hamiltonian(m, s);
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> uq(0.0, 1.0), up(-2.0, 2.0);
    for (int k = 0; k < 100; ++k) {
        double q = uq(rng), p = up(rng);
        CHECK(pm.H(q, p, 0.0) == Approx(m.H(q, p + 0.3 * std::sin(two_pi * q), 0.0)).margin(1e-12));
    }
    auto pc = pullback_callable(m, s);
    for (double q : {0.1, 0.6})
        for (double p : {-1.0, 0.5}) {
            CHECK(pc.H(q, p, 0.0) == Approx(pm.H(q, p, 0.0)).margin(1e-12));
            CHECK(pc.dH_dq(q, p, 0.0) == Approx(pm.dH_dq(q, p, 0.0)).margin(1e-6));
            CHECK(pc.dH_dp(q, p, 0.0) == Approx(pm.dH_dp(q, p, 0.0)).margin(1e-6));
        }
}

TEST_CASE("pullback rejects maps that introduce E dependence", "[symplectic]") {
    ExactMap m;
    m.kind = MapKind::composition;
    m.forward = [](const ExtendedState& x) { return ExtendedState{x.q, x.p + 0.1 * x.E, x.t, x.E}; };
    m.inverse = [](const ExtendedState& x) { return ExtendedState{x.q, x.p - 0.1 * x.E, x.t, x.E}; };
    m.primitive_S = [](const ExtendedState&) { return 0.0; };
    CHECK(energy_dependence(m) > 1e-12);
    CHECK_THROWS_AS(pullback_callable(pendulum(), m), std::invalid_argument);
    CHECK_THROWS_AS(pullback_hamiltonian(pendulum(), m), std::invalid_argument);
}

TEST_CASE("composition of shifts adds primitives", "[symplectic]") {
    auto c = compose(sine_shift_map(0.2), sine_shift_map(0.1));
    auto s = sine_shift_map(0.3);
    CHECK(c.kind == MapKind::composition);
    REQUIRE(c.shift);
    CHECK(round_trip_error(c) <= 1e-12);
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int k = 0; k < 50; ++k) {
        ExtendedState x{u(rng), u(rng) - 0.5, u(rng), 0.0};
        CHECK(c(x).p == Approx(s(x).p).margin(1e-14));
        CHECK(c.primitive_S(x) == Approx(s.primitive_S(x)).margin(1e-14));
    }
}

TEST_CASE("pulled flow is conjugate to the original flow", "[symplectic]") {
    auto s = sine_shift_map(0.3);
    for (auto m : {pendulum(), double_well(), forced_pendulum(0.1)}) {
        auto pm = pullback_hamiltonian(m, s);
        CHECK(conjugacy_error(m, pm, s) <= 1e-7);
    }
}

TEST_CASE("shifted free particle has its Aubry set on the graph p = -f'", "[symplectic]") {
    auto s = sine_shift_map(0.3);
    auto pm = pullback_hamiltonian(free_particle(), s);
    ClassicalOptions o;
    o.n = 64;
    o.K = 8;
    auto a = analyze_classical(pm, o);
    REQUIRE(a.table.converged);
    CHECK(a.crit.alpha == Approx(0.0).margin(1e-9));
    REQUIRE(!a.aubry.lifted.empty());
    for (auto& l : a.aubry.lifted) {
        double q = a.table.grid.q(l.node);
        CHECK(l.p == Approx(-0.3 * std::sin(two_pi * q)).margin(2.0 / 64));
    }
}

TEST_CASE("classical invariance report on the pendulum", "[symplectic]") {
    InvarianceOptions o;
    o.classical.n = 64;
    o.classical.K = 8;
    o.phase = false;
    o.phase_cfg.nq = 32;
    o.phase_cfg.np = 32;
    auto r = invariance_report(pendulum(), sine_shift_map(0.3), o);
    CHECK_FALSE(r.inconclusive);
    for (auto& c : r.checks) {
        INFO(c.name << " " << c.value << " tol " << c.tolerance);
        CHECK(c.pass);
    }
    CHECK(r.pass);
    CHECK(std::abs(r.base.crit.alpha - r.pulled.crit.alpha) <= 1e-9);
}

TEST_CASE("phase invariance report on a coarse pendulum grid", "[symplectic]") {
    InvarianceOptions o;
    o.classical.n = 64;
    o.classical.K = 8;
    o.phase_cfg.nq = 24;
    o.phase_cfg.np = 24;
    auto r = invariance_report(pendulum(), sine_shift_map(0.3), o);
    REQUIRE(r.phase_base);
    REQUIRE(r.phase_pulled);
    CHECK(r.pairs.size() == 100);
    for (auto& c : r.checks) {
        INFO(c.name << " " << c.value << " tol " << c.tolerance << " " << c.note);
        CHECK(c.pass);
    }
    CHECK(r.pass);
}
