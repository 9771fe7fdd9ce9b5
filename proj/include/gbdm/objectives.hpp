#pragma once

#include <functional>
#include <utility>

#include "gbdm/interpolants.hpp"
#include "gbdm/nets.hpp"

namespace gbdm {

struct LossConfig {
    double dt = 0.1;          // physical step; converts f_p into per-segment units
    float alpha = 0.5f;       // acceleration-term weight (second-order objective)
    float sigma_bridge = 0.0f;
    float beta_theta = 1.0f;
    float beta_z = 1.0f;
    bool physics_enabled = true;
    bool latents_enabled = true;
    double fixed_t = -1.0;    // test hook: >= 0 pins the bridge time instead of sampling

    void validate() const {
        if (dt <= 0.0) throw GbdmError("loss config: dt must be positive");
        if (alpha < 0.0f) throw GbdmError("loss config: alpha must be >= 0");
        if (beta_theta < 0.0f || beta_z < 0.0f) throw GbdmError("loss config: beta must be >= 0");
        if (sigma_bridge < 0.0f) throw GbdmError("loss config: sigma_bridge must be >= 0");
    }
};

struct LossBreakdown {
    double fm = 0.0;
    double kl_theta = 0.0;
    double kl_z = 0.0;
    double total = 0.0;
    Var total_var;  // differentiable; total = fm + beta_theta*kl_theta + beta_z*kl_z
};

// One training batch of trajectory segments. The history's last frame is x_k;
// x_km1 is only populated for second-order systems.
struct SegmentBatch {
    Tensor history;  // [B, h+1, state...]
    Tensor x_km1;    // [B, state...] (second order only)
    Tensor x_k;      // [B, state...]
    Tensor x_k1;     // [B, state...]

    int64_t size() const { return history.shape.empty() ? 0 : history.shape[0]; }
};

// Additive grey-box composition: the network's per-segment velocity plus the
// physical derivative converted to normalized-time units.
inline Var compose(Var v_net, Var f_p, const LossConfig& cfg) {
    if (!cfg.physics_enabled) return v_net;
    return add(v_net, scale(f_p, static_cast<float>(cfg.dt)));
}

// Analytic KL between diagonal Gaussians, summed over every element of mu.
// mu0/sigma0 broadcast a per-dimension prior across the batch.
inline Var kl_diag_gaussian(Var mu, Var sigma, const Tensor& mu0, const Tensor& sigma0) {
    ops::require_same_shape(mu, sigma, "kl_diag_gaussian");
    const Shape s = mu.shape();  // by value: creating nodes may reallocate the tape
    if (s.size() != 2 || mu0.shape != Shape{s[1]} || sigma0.shape != Shape{s[1]})
        throw GbdmError("kl_diag_gaussian: prior shape mismatch");
    for (float v : sigma.val().data)
        if (v <= 0.0f) throw GbdmError("kl_diag_gaussian: non-positive sigma");
    for (float v : sigma0.data)
        if (v <= 0.0f) throw GbdmError("kl_diag_gaussian: non-positive prior sigma");

    Tape& tape = *mu.tape;
    int64_t B = s[0], k = s[1];
    Tensor mu0_b({B, k}), half_inv_var({B, k});
    double log_s0 = 0.0;
    for (int64_t j = 0; j < k; ++j) log_s0 += std::log(sigma0[j]);
    for (int64_t i = 0; i < B; ++i)
        for (int64_t j = 0; j < k; ++j) {
            mu0_b.at(i, j) = mu0[j];
            half_inv_var.at(i, j) = 0.5f / (sigma0[j] * sigma0[j]);
        }
    Var d = sub(mu, tape.leaf(mu0_b, "prior_mu"));
    Var quad = mul(add(square(sigma), square(d)), tape.leaf(half_inv_var, "prior_var"));
    Var per_el = sub(quad, vlog(sigma));
    // sum_el [log s0 - log s + quad - 1/2] over the batch
    return add_scalar(sum(per_el), static_cast<float>(B) * (static_cast<float>(log_s0) -
                                                            0.5f * static_cast<float>(k)));
}

using FieldFn = std::function<Var(Var x_t, Var t, Var theta, Var z)>;
using SecondFieldFn =
    std::function<std::pair<Var, Var>(Var x_t, Var xdot_t, Var t, Var theta, Var z)>;
using EncodeFn = std::function<EncodeResult(Tape&, const Tensor& history, Rng&)>;

namespace detail {

struct BridgeBatch {
    Tensor t;       // [B, 1]
    Tensor x_t;     // [B, state...]
    Tensor xdot_t;  // [B, state...]
    Tensor xddot_t; // [B, state...] (lagrange only)
};

inline Tensor row(const Tensor& batch, int64_t i) {
    int64_t per = numel(batch.shape) / batch.shape[0];
    Shape s(batch.shape.begin() + 1, batch.shape.end());
    Tensor out(s);
    std::copy_n(&batch.data[static_cast<size_t>(i * per)], per, out.data.begin());
    return out;
}

inline void set_row(Tensor& batch, int64_t i, const Tensor& v) {
    int64_t per = numel(batch.shape) / batch.shape[0];
    std::copy_n(v.data.begin(), per, &batch.data[static_cast<size_t>(i * per)]);
}

inline double draw_t(const LossConfig& cfg, Rng& rng) {
    return cfg.fixed_t >= 0.0 ? cfg.fixed_t : rng.uniform();
}

inline BridgeBatch linear_bridge_batch(const SegmentBatch& batch, const LossConfig& cfg,
                                       Rng& t_rng, Rng& bridge_rng) {
    int64_t B = batch.size();
    BridgeBatch out;
    out.t = Tensor({B, 1});
    out.x_t = Tensor(batch.x_k.shape);
    out.xdot_t = Tensor(batch.x_k.shape);
    for (int64_t i = 0; i < B; ++i) {
        double t = draw_t(cfg, t_rng);
        auto s = linear_bridge(row(batch.x_k, i), row(batch.x_k1, i), t, cfg.sigma_bridge,
                               bridge_rng);
        out.t.at(i, 0) = static_cast<float>(t);
        set_row(out.x_t, i, s.x_t);
        set_row(out.xdot_t, i, s.xdot_t);
    }
    return out;
}

inline BridgeBatch lagrange_bridge_batch(const SegmentBatch& batch, const LossConfig& cfg,
                                         Rng& t_rng) {
    if (batch.x_km1.shape != batch.x_k.shape)
        throw GbdmError("second_order_loss: batch is missing x_{k-1}");
    int64_t B = batch.size();
    BridgeBatch out;
    out.t = Tensor({B, 1});
    out.x_t = Tensor(batch.x_k.shape);
    out.xdot_t = Tensor(batch.x_k.shape);
    out.xddot_t = Tensor(batch.x_k.shape);
    for (int64_t i = 0; i < B; ++i) {
        double t = draw_t(cfg, t_rng);
        auto s = lagrange_bridge(row(batch.x_km1, i), row(batch.x_k, i), row(batch.x_k1, i), t);
        out.t.at(i, 0) = static_cast<float>(t);
        set_row(out.x_t, i, s.x_t);
        set_row(out.xdot_t, i, s.xdot_t);
        set_row(out.xddot_t, i, s.xddot_t);
    }
    return out;
}

inline void check_term(double v, const char* name) {
    if (!std::isfinite(v)) throw GbdmError(std::string("non-finite loss term: ") + name);
}

inline LossBreakdown assemble(Tape& tape, Var fm, const EncodeResult& enc,
                              const ThetaPrior& prior, const LossConfig& cfg, int64_t B,
                              int64_t h_z) {
    LossBreakdown out;
    Var total = fm;
    out.fm = fm.scalar();
    check_term(out.fm, "fm");
    if (cfg.latents_enabled) {
        Tensor z_mu0 = Tensor::zeros({h_z});
        Tensor z_sigma0 = Tensor::full({h_z}, 1.0f);
        Var kl_z = scale(kl_diag_gaussian(enc.mu_z, enc.sigma_z, z_mu0, z_sigma0),
                         1.0f / static_cast<float>(B));
        out.kl_z = kl_z.scalar();
        check_term(out.kl_z, "kl_z");
        total = add(total, scale(kl_z, cfg.beta_z));
        if (enc.has_theta) {
            Var kl_th = scale(kl_diag_gaussian(enc.mu_theta, enc.sigma_theta, prior.mu,
                                               prior.sigma),
                              1.0f / static_cast<float>(B));
            out.kl_theta = kl_th.scalar();
            check_term(out.kl_theta, "kl_theta");
            total = add(total, scale(kl_th, cfg.beta_theta));
        }
    }
    out.total_var = total;
    out.total = total.scalar();
    check_term(out.total, "total");
    (void)tape;
    return out;
}

}  // namespace detail

// First-order negative-ELBO estimate over one segment batch: bridge sampling,
// posterior sampling, velocity matching against the composed grey-box field,
// plus analytic KL terms (single-sample estimator).
inline LossBreakdown vgbdm_loss_core(Tape& tape, const SystemSpec& spec, const SegmentBatch& batch,
                                     const EncodeFn& encode, const FieldFn& field,
                                     const ThetaPrior& prior, const LossConfig& cfg, Rng& rng,
                                     int64_t h_z, Rng* bridge_rng_override = nullptr) {
    cfg.validate();
    int64_t B = batch.size();
    if (B < 1) throw GbdmError("vgbdm_loss: empty batch");

    Rng t_rng = rng.fork("t");
    Rng bridge_rng = rng.fork("bridge");
    Rng posterior_rng = rng.fork("posterior");
    auto bridge = detail::linear_bridge_batch(batch, cfg, t_rng,
                                              bridge_rng_override ? *bridge_rng_override
                                                                  : bridge_rng);

    EncodeResult enc = encode(tape, batch.history, posterior_rng);
    Var x_t = tape.leaf(bridge.x_t, "x_t");
    Var t_var = tape.leaf(bridge.t, "t");
    Var v = field(x_t, t_var, enc.theta, enc.z);
    if (cfg.physics_enabled && enc.has_theta)
        v = compose(v, physics_field(spec, x_t, enc.theta), cfg);
    Var target = tape.leaf(bridge.xdot_t, "xdot_target");
    Var fm = scale(sum(square(sub(v, target))), 1.0f / static_cast<float>(B));
    return detail::assemble(tape, fm, enc, prior, cfg, B, h_z);
}

// Second-order variant: Lagrange bridge, velocity head matched to the bridge
// velocity, acceleration head composed with the Dt^2-scaled physics.
inline LossBreakdown second_order_loss_core(Tape& tape, const SystemSpec& spec,
                                            const SegmentBatch& batch, const EncodeFn& encode,
                                            const SecondFieldFn& field, const ThetaPrior& prior,
                                            const LossConfig& cfg, Rng& rng, int64_t h_z) {
    cfg.validate();
    int64_t B = batch.size();
    if (B < 1) throw GbdmError("second_order_loss: empty batch");

    Rng t_rng = rng.fork("t");
    Rng posterior_rng = rng.fork("posterior");
    auto bridge = detail::lagrange_bridge_batch(batch, cfg, t_rng);

    EncodeResult enc = encode(tape, batch.history, posterior_rng);
    Var x_t = tape.leaf(bridge.x_t, "x_t");
    Var xdot_t = tape.leaf(bridge.xdot_t, "xdot_t");
    Var t_var = tape.leaf(bridge.t, "t");
    auto [v, a] = field(x_t, xdot_t, t_var, enc.theta, enc.z);
    if (cfg.physics_enabled && enc.has_theta) {
        float dt2 = static_cast<float>(cfg.dt * cfg.dt);
        a = add(a, scale(physics_field(spec, x_t, enc.theta), dt2));
    }
    Var v_target = tape.leaf(bridge.xdot_t, "xdot_target");
    Var a_target = tape.leaf(bridge.xddot_t, "xddot_target");
    Var matching = add(sum(square(sub(v, v_target))),
                       scale(sum(square(sub(a, a_target))), cfg.alpha));
    Var fm = scale(matching, 1.0f / static_cast<float>(B));
    return detail::assemble(tape, fm, enc, prior, cfg, B, h_z);
}

// Model-facing wrappers; dispatch on the system's physics order.

inline LossBreakdown vgbdm_loss(Tape& tape, const Model& m, const Binding& b,
                                const SegmentBatch& batch, const ThetaPrior& prior,
                                const LossConfig& cfg, Rng& rng) {
    if (cfg.physics_enabled != m.cfg.physics_enabled ||
        cfg.latents_enabled != m.cfg.latents_enabled)
        throw GbdmError("loss config / model config baseline flags disagree");
    EncodeFn enc = [&](Tape& t, const Tensor& h, Rng& r) { return m.encode(t, b, h, r); };
    FieldFn field = [&](Var x, Var t, Var th, Var z) { return m.velocity(b, x, t, th, z); };
    return vgbdm_loss_core(tape, m.spec, batch, enc, field, prior, cfg, rng, m.cfg.h_z);
}

inline LossBreakdown second_order_loss(Tape& tape, const Model& m, const Binding& b,
                                       const SegmentBatch& batch, const ThetaPrior& prior,
                                       const LossConfig& cfg, Rng& rng) {
    if (cfg.physics_enabled != m.cfg.physics_enabled ||
        cfg.latents_enabled != m.cfg.latents_enabled)
        throw GbdmError("loss config / model config baseline flags disagree");
    EncodeFn enc = [&](Tape& t, const Tensor& h, Rng& r) { return m.encode(t, b, h, r); };
    SecondFieldFn field = [&](Var x, Var xd, Var t, Var th, Var z) {
        return m.velocity_accel(b, x, xd, t, th, z);
    };
    return second_order_loss_core(tape, m.spec, batch, enc, field, prior, cfg, rng, m.cfg.h_z);
}

inline LossBreakdown model_loss(Tape& tape, const Model& m, const Binding& b,
                                const SegmentBatch& batch, const ThetaPrior& prior,
                                const LossConfig& cfg, Rng& rng) {
    return m.second_order() ? second_order_loss(tape, m, b, batch, prior, cfg, rng)
                            : vgbdm_loss(tape, m, b, batch, prior, cfg, rng);
}

}  // namespace gbdm
