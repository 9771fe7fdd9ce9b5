#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "gbdm/rng.hpp"
#include "gbdm/tape.hpp"
#include "gbdm/tensor.hpp"

namespace gbdm {

enum class SystemId { rlc, pendulum, reaction_diffusion, lorenz, bimodal_toy };

struct ParamRange {
    std::string name;
    double lo, hi;
};

// reaction-diffusion grid convention: 32x32 on [-1,1]^2, periodic boundaries
inline constexpr int64_t kRdGrid = 32;
inline constexpr double kRdDx = 2.0 / static_cast<double>(kRdGrid);
inline constexpr double kRdDiffU = 1e-3;  // fixed u-diffusion coefficient

struct SystemSpec {
    SystemId id;
    std::string name;
    Shape state_shape;   // stored (dataset) state shape
    int64_t internal_dim;  // simulator state dimension
    double dt;
    int64_t traj_len;    // points per trajectory (T+1)
    int64_t history;     // default history window h
    std::vector<ParamRange> param_ranges;   // full simulator parameters
    std::vector<int> theta_indices;         // which params the learner's f_p exposes
    int physics_order;   // 1: f_p is a state derivative, 2: an acceleration
    std::string input_signal;  // exogenous input description, "" if none
    int sim_substeps = 1;  // internal RK4 substeps per observation interval

    int64_t state_dim() const { return numel(state_shape); }
    int64_t theta_dim() const { return static_cast<int64_t>(theta_indices.size()); }
    std::vector<std::string> param_names() const {
        std::vector<std::string> out;
        for (const auto& p : param_ranges) out.push_back(p.name);
        return out;
    }
    std::vector<std::string> theta_names() const {
        std::vector<std::string> out;
        for (int i : theta_indices) out.push_back(param_ranges[static_cast<size_t>(i)].name);
        return out;
    }
};

inline SystemSpec system_spec(SystemId id) {
    SystemSpec s;
    s.id = id;
    switch (id) {
        case SystemId::rlc:
            s.name = "rlc";
            s.state_shape = {2};  // (U, I)
            s.internal_dim = 2;
            s.dt = 0.1;
            s.traj_len = 200;
            s.history = 25;
            s.param_ranges = {{"L", 1.0, 3.0}, {"C", 0.5, 1.5}, {"R", 1.0, 3.0}};
            s.theta_indices = {0, 1};
            s.physics_order = 1;
            s.input_signal = "unit_step";
            s.sim_substeps = 4;
            break;
        case SystemId::pendulum:
            s.name = "pendulum";
            s.state_shape = {1};  // angle; angular velocity is simulator-internal
            s.internal_dim = 2;
            s.dt = 0.1;
            s.traj_len = 200;
            s.history = 25;
            s.param_ranges = {{"omega", 0.785, 3.14}, {"xi", 0.6, 1.5}};
            s.theta_indices = {0};
            s.physics_order = 2;
            s.sim_substeps = 4;
            break;
        case SystemId::reaction_diffusion:
            s.name = "reaction_diffusion";
            s.state_shape = {2, kRdGrid, kRdGrid};
            s.internal_dim = 2 * kRdGrid * kRdGrid;
            s.dt = 0.1;
            s.traj_len = 11;  // t in [0, 1]
            s.history = 5;
            s.param_ranges = {{"b", 3e-3, 7e-3}, {"k", 3e-3, 7e-3}};
            s.theta_indices = {0};
            s.physics_order = 1;
            s.sim_substeps = 2;
            break;
        case SystemId::lorenz:
            s.name = "lorenz";
            s.state_shape = {3};
            s.internal_dim = 3;
            s.dt = 0.0339;
            s.traj_len = 60;  // t in [0, 2]
            s.history = 30;
            s.param_ranges = {{"sigma", 9.5, 10.5}, {"rho", 27.0, 29.0}, {"beta", 2.6, 2.8}};
            s.theta_indices = {0, 2};
            s.physics_order = 1;
            s.sim_substeps = 8;
            break;
        case SystemId::bimodal_toy:
            s.name = "bimodal_toy";
            s.state_shape = {1};
            s.internal_dim = 1;
            s.dt = 0.1;
            s.traj_len = 21;  // x0 = 0 plus 20 drift steps to the +/-2 endpoints
            s.history = 2;
            s.param_ranges = {{"s", -1.0, 1.0}};  // sign, sampled from {-1,+1}
            s.theta_indices = {};
            s.physics_order = 1;
            break;
    }
    return s;
}

inline SystemId system_from_name(const std::string& name) {
    if (name == "rlc") return SystemId::rlc;
    if (name == "pendulum") return SystemId::pendulum;
    if (name == "reaction_diffusion" || name == "rd") return SystemId::reaction_diffusion;
    if (name == "lorenz") return SystemId::lorenz;
    if (name == "bimodal_toy" || name == "toy") return SystemId::bimodal_toy;
    throw GbdmError("unknown system: " + name);
}

// RLC source voltage encoded in input_signal: "unit_step" (default), "zero",
// or "const:<value>". Recorded in the dataset header so learner and simulator
// always agree on the drive.
inline double input_voltage(const SystemSpec& spec) {
    if (spec.input_signal == "unit_step" || spec.input_signal.empty()) return 1.0;
    if (spec.input_signal == "zero") return 0.0;
    if (spec.input_signal.rfind("const:", 0) == 0) return std::stod(spec.input_signal.substr(6));
    throw GbdmError("unknown input signal: " + spec.input_signal);
}

// ---- complete dynamics (double precision, simulator side) ----

namespace dynamics {

inline void laplacian_periodic_grid(const double* s, double* out, double inv_dx2) {
    const int64_t H = kRdGrid, W = kRdGrid;
    for (int64_t i = 0; i < H; ++i) {
        int64_t up = (i + H - 1) % H, dn = (i + 1) % H;
        for (int64_t j = 0; j < W; ++j) {
            int64_t lf = (j + W - 1) % W, rt = (j + 1) % W;
            out[i * W + j] = inv_dx2 * (s[up * W + j] + s[dn * W + j] + s[i * W + lf] +
                                        s[i * W + rt] - 4.0 * s[i * W + j]);
        }
    }
}

// full governing equations; x is the internal state
inline void full_rhs(const SystemSpec& spec, const std::vector<double>& x,
                     const std::vector<double>& p, std::vector<double>& dx) {
    switch (spec.id) {
        case SystemId::rlc: {
            double L = p[0], C = p[1], R = p[2], V = input_voltage(spec);
            double U = x[0], I = x[1];
            dx[0] = I / C;
            dx[1] = (V - U - R * I) / L;
            break;
        }
        case SystemId::pendulum: {
            double omega = p[0], xi = p[1];
            dx[0] = x[1];
            dx[1] = -omega * omega * std::sin(x[0]) - xi * x[1];
            break;
        }
        case SystemId::lorenz: {
            double sigma = p[0], rho = p[1], beta = p[2];
            double u = x[0], v = x[1], w = x[2];
            dx[0] = sigma * (v - u);
            dx[1] = u * (rho - w) - v;
            dx[2] = u * v - beta * w;
            break;
        }
        case SystemId::reaction_diffusion: {
            double b = p[0], k = p[1];
            const int64_t n = kRdGrid * kRdGrid;
            double inv_dx2 = 1.0 / (kRdDx * kRdDx);
            std::vector<double> lap(static_cast<size_t>(n));
            laplacian_periodic_grid(x.data(), lap.data(), inv_dx2);
            for (int64_t i = 0; i < n; ++i) {
                double u = x[static_cast<size_t>(i)], v = x[static_cast<size_t>(n + i)];
                dx[static_cast<size_t>(i)] = kRdDiffU * lap[static_cast<size_t>(i)] + u - u * u * u - v - k;
            }
            laplacian_periodic_grid(x.data() + n, lap.data(), inv_dx2);
            for (int64_t i = 0; i < n; ++i) {
                double u = x[static_cast<size_t>(i)], v = x[static_cast<size_t>(n + i)];
                dx[static_cast<size_t>(n + i)] = b * lap[static_cast<size_t>(i)] + u - v;
            }
            break;
        }
        case SystemId::bimodal_toy:
            dx[0] = p[0];  // constant drift; the hold phase is handled by simulate()
            break;
    }
}

inline void rk4_step(const SystemSpec& spec, std::vector<double>& x, const std::vector<double>& p,
                     double dt) {
    size_t n = x.size();
    std::vector<double> k1(n), k2(n), k3(n), k4(n), tmp(n);
    full_rhs(spec, x, p, k1);
    for (size_t i = 0; i < n; ++i) tmp[i] = x[i] + 0.5 * dt * k1[i];
    full_rhs(spec, tmp, p, k2);
    for (size_t i = 0; i < n; ++i) tmp[i] = x[i] + 0.5 * dt * k2[i];
    full_rhs(spec, tmp, p, k3);
    for (size_t i = 0; i < n; ++i) tmp[i] = x[i] + dt * k3[i];
    full_rhs(spec, tmp, p, k4);
    for (size_t i = 0; i < n; ++i)
        x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
}

}  // namespace dynamics

struct Trajectory {
    Tensor states;  // [traj_len x state shape]
    double dt = 0.0;
    std::vector<float> true_params;  // evaluation only; never exposed to training
    SystemId system;
};

// maps internal simulator state to the stored state (pendulum keeps the angle only)
inline void store_state(const SystemSpec& spec, const std::vector<double>& x, float* out) {
    if (spec.id == SystemId::pendulum) {
        out[0] = static_cast<float>(x[0]);
        return;
    }
    for (int64_t i = 0; i < spec.state_dim(); ++i) out[i] = static_cast<float>(x[static_cast<size_t>(i)]);
}

inline constexpr double kBlowupThreshold = 1e6;

inline Trajectory simulate(const SystemSpec& spec, const std::vector<double>& params,
                           const std::vector<double>& x0) {
    if (params.size() != spec.param_ranges.size())
        throw GbdmError("simulate: expected " + std::to_string(spec.param_ranges.size()) +
                        " parameters for " + spec.name);
    Trajectory traj;
    traj.dt = spec.dt;
    traj.system = spec.id;
    for (double p : params) traj.true_params.push_back(static_cast<float>(p));

    Shape full_shape = {spec.traj_len};
    for (int64_t d : spec.state_shape) full_shape.push_back(d);
    traj.states = Tensor(full_shape);

    int64_t sd = spec.state_dim();
    std::vector<double> x = x0;
    store_state(spec, x, &traj.states.data[0]);
    for (int64_t k = 1; k < spec.traj_len; ++k) {
        if (spec.id == SystemId::bimodal_toy) {
            // exact solution of dx/dt = s: constant drift from the origin
            x[0] = params[0] * spec.dt * static_cast<double>(k);
        } else {
            // substep the observation interval so stored samples track the true
            // flow well below the learner's error floor (chaotic systems amplify
            // coarse-step error past any useful tolerance otherwise)
            for (int s = 0; s < spec.sim_substeps; ++s)
                dynamics::rk4_step(spec, x, params, spec.dt / spec.sim_substeps);
        }
        for (double v : x)
            if (!std::isfinite(v) || std::abs(v) > kBlowupThreshold)
                throw GbdmError("simulate: state blow-up at step " + std::to_string(k) + " in " +
                                spec.name);
        store_state(spec, x, &traj.states.data[static_cast<size_t>(k * sd)]);
    }
    return traj;
}

inline std::vector<double> sample_params(const SystemSpec& spec, Rng& rng) {
    std::vector<double> p;
    if (spec.id == SystemId::bimodal_toy) {
        p.push_back(rng.uniform() < 0.5 ? -1.0 : 1.0);
        return p;
    }
    for (const auto& r : spec.param_ranges) p.push_back(rng.uniform(r.lo, r.hi));
    return p;
}

inline std::vector<double> sample_initial(const SystemSpec& spec, Rng& rng) {
    std::vector<double> x(static_cast<size_t>(spec.internal_dim), 0.0);
    switch (spec.id) {
        case SystemId::rlc:
            x[0] = rng.normal();  // U0 ~ N(0,1), I0 = 0
            break;
        case SystemId::pendulum:
            x[0] = rng.uniform(-1.57, 1.57);  // released from rest
            break;
        case SystemId::lorenz:
            for (auto& v : x) v = 1.0 + rng.normal();
            break;
        case SystemId::reaction_diffusion:
            for (auto& v : x) v = rng.uniform(-1.0, 1.0);
            break;
        case SystemId::bimodal_toy:
            break;  // always starts at the origin
    }
    return x;
}

// ---- incomplete physics f_p, differentiable through the tape ----

// Moment-matched Gaussian prior over the learner-visible physics parameters:
// mean at the sampling-range midpoint, std of the uniform distribution.
struct ThetaPrior {
    Tensor mu;
    Tensor sigma;
};

inline ThetaPrior theta_prior(const SystemSpec& spec) {
    int64_t p = spec.theta_dim();
    ThetaPrior prior{Tensor({p}), Tensor({p})};
    for (int64_t i = 0; i < p; ++i) {
        const auto& r = spec.param_ranges[static_cast<size_t>(spec.theta_indices[static_cast<size_t>(i)])];
        prior.mu[i] = static_cast<float>(0.5 * (r.lo + r.hi));
        prior.sigma[i] = static_cast<float>((r.hi - r.lo) / std::sqrt(12.0));
    }
    return prior;
}

// f_p(x, theta): batched, x [B x d] (or [B,2,H,W] for reaction-diffusion),
// theta [B x p]. Returns a physical-time derivative; for the pendulum it is
// the acceleration of the frictionless physics.
inline Var physics_field(const SystemSpec& spec, Var x, Var theta) {
    switch (spec.id) {
        case SystemId::rlc: {
            // f_p = (I/C, (V - U)/L), theta = [L, C], V = 1
            Var U = slice_cols(x, 0, 1);
            Var I = slice_cols(x, 1, 1);
            Var L = slice_cols(theta, 0, 1);
            Var C = slice_cols(theta, 1, 1);
            Var dU = mul(I, recip(C));
            float V = static_cast<float>(input_voltage(spec));
            Var dI = mul(add_scalar(neg(U), V), recip(L));
            return concat_cols(dU, dI);
        }
        case SystemId::pendulum: {
            // acceleration of the frictionless pendulum, theta = [omega]
            Var omega = slice_cols(theta, 0, 1);
            return neg(mul(mul(omega, omega), vsin(x)));
        }
        case SystemId::lorenz: {
            // theta = [sigma, beta]; the u(rho - w) coupling is the missing physics
            Var u = slice_cols(x, 0, 1);
            Var v = slice_cols(x, 1, 1);
            Var w = slice_cols(x, 2, 1);
            Var sigma = slice_cols(theta, 0, 1);
            Var beta = slice_cols(theta, 1, 1);
            Var du = mul(sigma, sub(v, u));
            Var dv = neg(v);
            Var dw = sub(mul(u, v), mul(beta, w));
            return concat_cols(concat_cols(du, dv), dw);
        }
        case SystemId::reaction_diffusion: {
            // f_p omits the source parameter k; theta = [b]
            float inv_dx2 = static_cast<float>(1.0 / (kRdDx * kRdDx));
            Var u = slice_channels(x, 0, 1);
            Var v = slice_channels(x, 1, 1);
            Var b = slice_cols(theta, 0, 1);
            Var du = add(scale(laplacian_periodic(u, inv_dx2), static_cast<float>(kRdDiffU)),
                         sub(sub(u, mul(mul(u, u), u)), v));
            Var dv = add(mul_per_sample(laplacian_periodic(v, inv_dx2), b), sub(u, v));
            return concat_channels(du, dv);
        }
        case SystemId::bimodal_toy:
            throw GbdmError("bimodal_toy has no physics model");
    }
    throw GbdmError("physics_field: unreachable");
}

}  // namespace gbdm
