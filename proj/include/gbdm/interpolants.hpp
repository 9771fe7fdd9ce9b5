#pragma once

#include <cmath>

#include "gbdm/rng.hpp"
#include "gbdm/tensor.hpp"

namespace gbdm {

// Conditional path between consecutive trajectory points, sampled at a
// normalized time t in [0,1]. Targets are per-unit-normalized-time state
// differences; physical-unit conversion happens in the objectives.
struct BridgeSample {
    double t = 0.0;
    Tensor x_t;
    Tensor xdot_t;
    Tensor xddot_t;  // empty unless produced by the quadratic bridge
};

namespace detail {

inline void check_unit_interval(double t, const char* op) {
    if (t < 0.0 || t > 1.0)
        throw GbdmError(std::string(op) + ": t = " + std::to_string(t) + " outside [0,1]");
}

}  // namespace detail

// x_t = (1-t) x_k + t x_{k+1} (+ Gaussian noise, variance sigma^2 (1-t) t per
// component); xdot_t = x_{k+1} - x_k. sigma = 0 is the deterministic path.
inline BridgeSample linear_bridge(const Tensor& x_k, const Tensor& x_k1, double t, double sigma,
                                  Rng& rng) {
    detail::check_unit_interval(t, "linear_bridge");
    if (!x_k.same_shape(x_k1)) throw GbdmError("linear_bridge: endpoint shape mismatch");
    if (sigma < 0.0) throw GbdmError("linear_bridge: negative sigma");
    BridgeSample s;
    s.t = t;
    s.x_t = Tensor(x_k.shape);
    s.xdot_t = Tensor(x_k.shape);
    double noise_std = sigma * std::sqrt((1.0 - t) * t);
    for (int64_t i = 0; i < x_k.size(); ++i) {
        double xt = (1.0 - t) * x_k[i] + t * x_k1[i];
        if (noise_std > 0.0) xt += noise_std * rng.normal();
        s.x_t[i] = static_cast<float>(xt);
        s.xdot_t[i] = x_k1[i] - x_k[i];
    }
    return s;
}

// Quadratic through nodes at normalized times -1, 0, 1; evaluated at tau.
// No domain restriction: the bridge clamps to [0,1], tests may probe the nodes.
inline void lagrange_point(const Tensor& x_km1, const Tensor& x_k, const Tensor& x_k1, double tau,
                           Tensor& x_t, Tensor& xdot_t, Tensor& xddot_t) {
    x_t = Tensor(x_k.shape);
    xdot_t = Tensor(x_k.shape);
    xddot_t = Tensor(x_k.shape);
    for (int64_t i = 0; i < x_k.size(); ++i) {
        double c1 = 0.5 * (static_cast<double>(x_k1[i]) - x_km1[i]);       // first difference
        double c2 = static_cast<double>(x_k1[i]) - 2.0 * x_k[i] + x_km1[i];  // curvature
        x_t[i] = static_cast<float>(x_k[i] + tau * c1 + 0.5 * tau * tau * c2);
        xdot_t[i] = static_cast<float>(c1 + tau * c2);
        xddot_t[i] = static_cast<float>(c2);
    }
}

inline BridgeSample lagrange_bridge(const Tensor& x_km1, const Tensor& x_k, const Tensor& x_k1,
                                    double t) {
    detail::check_unit_interval(t, "lagrange_bridge");
    if (!x_km1.same_shape(x_k) || !x_k.same_shape(x_k1))
        throw GbdmError("lagrange_bridge: node shape mismatch");
    BridgeSample s;
    s.t = t;
    lagrange_point(x_km1, x_k, x_k1, t, s.x_t, s.xdot_t, s.xddot_t);
    return s;
}

}  // namespace gbdm
