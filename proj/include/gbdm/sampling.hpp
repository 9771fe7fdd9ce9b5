#pragma once

#include "gbdm/rng.hpp"
#include "gbdm/tape.hpp"

namespace gbdm {

struct GaussianSample {
    Var value;    // mu + sigma * eps, differentiable w.r.t. mu and sigma
    Tensor eps;   // the drawn standard-normal noise
};

// Reparameterized diagonal-Gaussian sample with caller-supplied noise
// (used to freeze the draw across finite-difference probes).
inline GaussianSample gaussian_sample(Var mu, Var sigma, Tensor eps) {
    ops::require_same_shape(mu, sigma, "gaussian_sample");
    if (eps.shape != mu.shape()) throw GbdmError("gaussian_sample: eps shape mismatch");
    for (float s : sigma.val().data)
        if (s < 0.0f) throw GbdmError("gaussian_sample: negative sigma");
    Var eps_leaf = mu.tape->leaf(eps, "eps");
    return {add(mu, mul(sigma, eps_leaf)), std::move(eps)};
}

inline GaussianSample gaussian_sample(Var mu, Var sigma, Rng& rng) {
    return gaussian_sample(mu, sigma, rng.normal_tensor(mu.shape()));
}

}  // namespace gbdm
