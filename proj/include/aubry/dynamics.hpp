#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

#include "aubry/util.hpp"

namespace aubry {

struct PhasePoint {
    double q = 0.0;
    double p = 0.0;
};

// Point of the extended phase space T*(T x T): position, momentum, time, energy.
struct ExtendedState {
    double q = 0.0;
    double p = 0.0;
    double t = 0.0;
    double E = 0.0;
};

struct LegendreResult {
    double L = 0.0;
    double p = 0.0;  // maximizer p*
};

struct LegendreError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct WindowError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// H(q,p,t) = (p + g(q))^2 / 2 + V(q,t). The Legendre transform is closed form:
// p* = v - g(q), L = v^2/2 - g(q) v - V(q,t).
struct MechanicalModel {
    std::string name;
    std::map<std::string, double> parameters;
    std::function<double(double, double)> V;
    std::function<double(double, double)> dV_dq;
    std::function<double(double, double)> dV_dt;
    std::function<double(double)> g;      // empty means g = 0
    std::function<double(double)> dg_dq;  // empty means g' = 0
    bool time_dependent = false;

    static constexpr bool mechanical = true;

    double gauge(double q) const { return g ? g(q) : 0.0; }
    double gauge_dq(double q) const { return dg_dq ? dg_dq(q) : 0.0; }

    double H(double q, double p, double t) const {
        double k = p + gauge(q);
        return 0.5 * k * k + V(q, t);
    }
    double dH_dp(double q, double p, double /*t*/) const { return p + gauge(q); }
    double dH_dq(double q, double p, double t) const {
        return (p + gauge(q)) * gauge_dq(q) + dV_dq(q, t);
    }
    double dH_dt(double q, double /*p*/, double t) const { return dV_dt ? dV_dt(q, t) : 0.0; }
    bool convex_in_p() const { return true; }

    LegendreResult legendre(double q, double v, double t) const {
        double gq = gauge(q);
        return {0.5 * v * v - gq * v - V(q, t), v - gq};
    }
};

// Scalar maximization of p v - H(q,p,t) for a convex H: golden-section search on
// an expanding bracket seeded at p = v, polished by Newton on dH/dp(p) = v.
template <class Hf, class Hp>
LegendreResult numeric_legendre(const Hf& H, const Hp& Hp_, double q, double v, double t) {
    auto phi = [&](double p) { return p * v - H(q, p, t); };
    double b = v, fb = phi(b);
    double step = 1.0;
    double a = b - step, c = b + step;
    double fa = phi(a), fc = phi(c);
    int expansions = 0;
    while (!(fb >= fa && fb >= fc)) {
        if (++expansions > 200 || !std::isfinite(fa) || !std::isfinite(fc)) {
            std::ostringstream os;
            os << "legendre transform: bracket expansion exhausted at q=" << q << " v=" << v
               << " t=" << t << " (model may violate superlinearity)";
            throw LegendreError(os.str());
        }
        step *= 2.0;
        if (fa > fb) {
            c = b; fc = fb;
            b = a; fb = fa;
            a = b - step; fa = phi(a);
        } else {
            a = b; fa = fb;
            b = c; fb = fc;
            c = b + step; fc = phi(c);
        }
    }
    const double r = (std::sqrt(5.0) - 1.0) / 2.0;
    double x1 = c - r * (c - a), x2 = a + r * (c - a);
    double f1 = phi(x1), f2 = phi(x2);
    for (int it = 0; it < 300 && (c - a) > 1e-10 * (1.0 + std::abs(b)); ++it) {
        if (f1 < f2) {
            a = x1; x1 = x2; f1 = f2;
            x2 = a + r * (c - a); f2 = phi(x2);
        } else {
            c = x2; x2 = x1; f2 = f1;
            x1 = c - r * (c - a); f1 = phi(x1);
        }
    }
    double p = 0.5 * (a + c);
    for (int it = 0; it < 30; ++it) {
        double res = Hp_(q, p, t) - v;
        double h = 1e-6 * (1.0 + std::abs(p));
        double slope = (Hp_(q, p + h, t) - Hp_(q, p - h, t)) / (2.0 * h);
        if (!(slope > 0.0)) break;
        double next = p - res / slope;
        if (!std::isfinite(next) || phi(next) < phi(p) - 1e-15 * (1.0 + std::abs(phi(p)))) break;
        bool done = std::abs(next - p) <= 1e-15 * (1.0 + std::abs(p));
        p = next;
        if (done) break;
    }
    return {phi(p), p};
}

// Model given by arbitrary callables; the Lagrangian goes through the numeric
// Legendre path.
struct CallableModel {
    std::string name;
    std::map<std::string, double> parameters;
    std::function<double(double, double, double)> H_fn;
    std::function<double(double, double, double)> dH_dp_fn;
    std::function<double(double, double, double)> dH_dq_fn;
    std::function<double(double, double, double)> dH_dt_fn;
    bool convex = true;
    bool time_dependent = false;

    static constexpr bool mechanical = false;

    double H(double q, double p, double t) const { return H_fn(q, p, t); }
    double dH_dp(double q, double p, double t) const { return dH_dp_fn(q, p, t); }
    double dH_dq(double q, double p, double t) const { return dH_dq_fn(q, p, t); }
    double dH_dt(double q, double p, double t) const { return dH_dt_fn ? dH_dt_fn(q, p, t) : 0.0; }
    bool convex_in_p() const { return convex; }

    LegendreResult legendre(double q, double v, double t) const {
        if (!convex) throw LegendreError("legendre transform requested for a non-convex model '" + name + "'");
        return numeric_legendre(H_fn, dH_dp_fn, q, v, t);
    }
};

// Wraps a model so the Lagrangian is always computed by the numeric path.
template <class M>
CallableModel as_callable(const M& m) {
    CallableModel c;
    c.name = m.name;
    c.parameters = m.parameters;
    c.H_fn = [m](double q, double p, double t) { return m.H(q, p, t); };
    c.dH_dp_fn = [m](double q, double p, double t) { return m.dH_dp(q, p, t); };
    c.dH_dq_fn = [m](double q, double p, double t) { return m.dH_dq(q, p, t); };
    c.dH_dt_fn = [m](double q, double p, double t) { return m.dH_dt(q, p, t); };
    c.convex = m.convex_in_p();
    c.time_dependent = m.time_dependent;
    return c;
}

// ---- built-in catalog ----

inline MechanicalModel free_particle() {
    MechanicalModel m;
    m.name = "free";
    m.V = [](double, double) { return 0.0; };
    m.dV_dq = [](double, double) { return 0.0; };
    return m;
}

// V = k cos(2 pi mode q); mode = 2 gives the double well.
inline MechanicalModel cosine_potential(std::string name, double k, int mode) {
    MechanicalModel m;
    m.name = std::move(name);
    m.parameters = {{"k", k}, {"mode", double(mode)}};
    double w = two_pi * mode;
    m.V = [k, w](double q, double) { return k * std::cos(w * q); };
    m.dV_dq = [k, w](double q, double) { return -k * w * std::sin(w * q); };
    return m;
}

inline MechanicalModel pendulum(double k = 1.0) { return cosine_potential("pendulum", k, 1); }

inline MechanicalModel double_well(double k = 1.0) { return cosine_potential("double_well", k, 2); }

// V = (1 + eps cos 2 pi t) cos 2 pi q.
inline MechanicalModel forced_pendulum(double eps) {
    MechanicalModel m;
    m.name = "forced_pendulum";
    m.parameters = {{"eps", eps}};
    m.time_dependent = eps != 0.0;
    m.V = [eps](double q, double t) { return (1.0 + eps * std::cos(two_pi * t)) * std::cos(two_pi * q); };
    m.dV_dq = [eps](double q, double t) {
        return -(1.0 + eps * std::cos(two_pi * t)) * two_pi * std::sin(two_pi * q);
    };
    m.dV_dt = [eps](double q, double t) { return -eps * two_pi * std::sin(two_pi * t) * std::cos(two_pi * q); };
    return m;
}

// ---- Lagrangian view ----

template <class M>
LegendreResult legendre_transform(const M& model, double q, double v, double t) {
    if (!model.convex_in_p()) throw LegendreError("legendre transform requires a convex model");
    if (!std::isfinite(v)) throw LegendreError("legendre transform: non-finite velocity");
    return model.legendre(q, v, t);
}

// Partial derivatives (dL/dv, dL/dq) by the envelope identities dL/dv = p*,
// dL/dq = -dH/dq(q, p*, t).
template <class M>
std::array<double, 3> lagrangian_with_partials(const M& model, double q, double v, double t) {
    LegendreResult r = model.legendre(q, v, t);
    return {r.L, r.p, -model.dH_dq(q, r.p, t)};
}

// ---- extended flow ----

template <class M>
std::array<double, 4> hamiltonian_vector_field(const M& model, const ExtendedState& s) {
    return {model.dH_dp(s.q, s.p, s.t), -model.dH_dq(s.q, s.p, s.t), 1.0, -model.dH_dt(s.q, s.p, s.t)};
}

template <class M>
double extended_G(const M& model, const ExtendedState& s) {
    return s.E + model.H(s.q, s.p, s.t);
}

struct FlowResult {
    ExtendedState state;  // q and t canonical
    double action = 0.0;  // integral of p dq/dt - H along the orbit
    double dq = 0.0;      // unwrapped displacement of q
};

// Classical fourth-order Runge-Kutta on (q, p, t, E, action). Negative durations
// integrate backward in time. observe(k, y) sees the unwrapped state after
// substep k.
template <class M, class Obs>
FlowResult integrate_flow_observed(const M& model, const ExtendedState& s, double duration, int substeps,
                                   double p_bound, Obs&& observe) {
    if (substeps < 1) throw std::invalid_argument("flow: substeps must be >= 1");
    const double h = duration / substeps;
    double y[5] = {s.q, s.p, s.t, s.E, 0.0};
    auto rhs = [&](const double* z, double* f) {
        double hp = model.dH_dp(z[0], z[1], z[2]);
        f[0] = hp;
        f[1] = -model.dH_dq(z[0], z[1], z[2]);
        f[2] = 1.0;
        f[3] = -model.dH_dt(z[0], z[1], z[2]);
        f[4] = z[1] * hp - model.H(z[0], z[1], z[2]);
    };
    double k1[5], k2[5], k3[5], k4[5], z[5];
    for (int step = 0; step < substeps; ++step) {
        rhs(y, k1);
        for (int c = 0; c < 5; ++c) z[c] = y[c] + 0.5 * h * k1[c];
        rhs(z, k2);
        for (int c = 0; c < 5; ++c) z[c] = y[c] + 0.5 * h * k2[c];
        rhs(z, k3);
        for (int c = 0; c < 5; ++c) z[c] = y[c] + h * k3[c];
        rhs(z, k4);
        for (int c = 0; c < 5; ++c) y[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
        if (!(std::abs(y[1]) <= p_bound)) {
            std::ostringstream os;
            os << "orbit left computational window (|p| > " << p_bound << ") from q=" << s.q << " p=" << s.p
               << " t=" << s.t;
            throw WindowError(os.str());
        }
        observe(step + 1, static_cast<const double*>(y));
    }
    FlowResult r;
    r.state = {wrap01(y[0]), y[1], wrap01(y[2]), y[3]};
    r.action = y[4];
    r.dq = y[0] - s.q;
    return r;
}

template <class M>
FlowResult integrate_flow(const M& model, const ExtendedState& s, double duration, int substeps,
                          double p_bound = 1e6) {
    return integrate_flow_observed(model, s, duration, substeps, p_bound, [](int, const double*) {});
}

template <class M>
ExtendedState flow_step(const M& model, const ExtendedState& s, double duration, int substeps,
                        double p_bound = 1e6) {
    return integrate_flow(model, s, duration, substeps, p_bound).state;
}

// Endpoint and accumulated action integral of L(q, dq/dt, t) = p dq/dt - H.
template <class M>
std::pair<ExtendedState, double> running_action(const M& model, const ExtendedState& s, double duration,
                                                int substeps = 200, double p_bound = 1e6) {
    FlowResult r = integrate_flow(model, s, duration, substeps, p_bound);
    return {r.state, r.action};
}

// Branches p = -g(q) +- sqrt(2 (c - V(q,0))) of the energy level H = c of an
// autonomous mechanical model; empty where V > c.
inline std::optional<std::pair<double, double>> energy_level_momenta(const MechanicalModel& m, double c,
                                                                     double q) {
    double r = 2.0 * (c - m.V(q, 0.0));
    if (r < -1e-12) return std::nullopt;
    double s = std::sqrt(std::max(0.0, r));
    double base = -m.gauge(q);
    return std::make_pair(base - s, base + s);
}

}  // namespace aubry
