#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "gbdm/optim.hpp"
#include "gbdm/sampling.hpp"
#include "gbdm/systems.hpp"
#include "gbdm/tape.hpp"

namespace gbdm {

inline constexpr float kSigmaFloor = 1e-5f;

struct NetConfig {
    int64_t h_z = 4;            // latent dimension (16 for reaction-diffusion)
    int64_t enc_hidden = 64;    // GRU hidden size
    int64_t field_hidden = 128;
    int field_layers = 4;       // hidden layers of the first-order field MLP
    int64_t so_width = 64;      // second-order backbone / head width
    bool latents_enabled = true;
    bool physics_enabled = true;  // false: no theta head, no theta conditioning

    int64_t theta_dim(const SystemSpec& spec) const {
        return physics_enabled ? spec.theta_dim() : 0;
    }

    static NetConfig defaults_for(const SystemSpec& spec) {
        NetConfig c;
        if (spec.id == SystemId::reaction_diffusion) c.h_z = 16;
        return c;
    }
};

namespace detail {

inline float inv_softplus(float y) {
    // softplus(x) = y  =>  x = log(expm1(y))
    return static_cast<float>(std::log(std::expm1(static_cast<double>(y))));
}

}  // namespace detail

// Fully connected layer; fan-in uniform init, optional exact-zero init for
// output layers that must start at the identity-with-physics solution.
struct Linear {
    ParamId W = 0, b = 0;
    int64_t in = 0, out = 0;

    Linear() = default;
    Linear(ParamStore& s, Rng& rng, const std::string& name, int64_t in_dim, int64_t out_dim,
           bool zero_init = false)
        : in(in_dim), out(out_dim) {
        double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
        Tensor w = zero_init ? Tensor::zeros({in_dim, out_dim})
                             : rng.uniform_tensor({in_dim, out_dim}, -bound, bound);
        W = s.add(name + ".W", std::move(w));
        b = s.add(name + ".b", Tensor::zeros({out_dim}));
    }

    Var operator()(const Binding& p, Var x) const { return add_bias(matmul(x, p[W]), p[b]); }
};

// Minimal gated recurrent unit; gate blocks ordered (reset, update, candidate).
struct Gru {
    Linear x2g, h2g;
    int64_t hidden = 0;

    Gru() = default;
    Gru(ParamStore& s, Rng& rng, const std::string& name, int64_t in_dim, int64_t hidden_dim)
        : x2g(s, rng, name + ".x2g", in_dim, 3 * hidden_dim),
          h2g(s, rng, name + ".h2g", hidden_dim, 3 * hidden_dim),
          hidden(hidden_dim) {}

    Var step(const Binding& p, Var x, Var h) const {
        Var gx = x2g(p, x);
        Var gh = h2g(p, h);
        Var r = vsigmoid(add(slice_cols(gx, 0, hidden), slice_cols(gh, 0, hidden)));
        Var u = vsigmoid(add(slice_cols(gx, hidden, hidden), slice_cols(gh, hidden, hidden)));
        Var n = vtanh(add(slice_cols(gx, 2 * hidden, hidden),
                          mul(r, slice_cols(gh, 2 * hidden, hidden))));
        return add(mul(one_minus(u), n), mul(u, h));
    }

    // history [B, T, d] -> final hidden state [B, hidden]
    Var run(Tape& tape, const Binding& p, const Tensor& history) const {
        if (history.shape.size() != 3) throw GbdmError("gru: expected history [B,T,d]");
        int64_t B = history.shape[0], T = history.shape[1], d = history.shape[2];
        Var flat = reshape(tape.leaf(history, "history"), {B, T * d});
        Var h = tape.leaf(Tensor::zeros({B, hidden}), "h0");
        for (int64_t k = 0; k < T; ++k) h = step(p, slice_cols(flat, k * d, d), h);
        return h;
    }
};

// One reparameterized draw from the structured posterior q(theta|history,z)q(z|history).
// With latents disabled both draws collapse to the posterior means (deterministic
// history embedding, no noise).
struct EncodeResult {
    Var mu_z, sigma_z, z;
    Var mu_theta, sigma_theta, theta;  // invalid Vars when the system has no physics params
    Tensor eps_z, eps_theta;
    bool has_theta = false;
};

namespace detail {

// splits a [B, 2k] head output into (mu, softplus sigma + floor)
inline std::pair<Var, Var> split_gaussian(Var raw, int64_t k) {
    Var mu = slice_cols(raw, 0, k);
    Var sigma = add_scalar(vsoftplus(slice_cols(raw, k, k)), kSigmaFloor);
    return {mu, sigma};
}

inline EncodeResult posterior_from_summary(Tape& tape, const Binding& p, Var summary,
                                           const Linear& head_z, const Linear& head_theta,
                                           int64_t h_z, int64_t theta_dim, Tensor eps_z,
                                           Tensor eps_theta, bool latents_enabled) {
    EncodeResult r;
    std::tie(r.mu_z, r.sigma_z) = split_gaussian(head_z(p, summary), h_z);
    if (latents_enabled) {
        auto gs = gaussian_sample(r.mu_z, r.sigma_z, std::move(eps_z));
        r.z = gs.value;
        r.eps_z = std::move(gs.eps);
    } else {
        r.z = r.mu_z;
    }
    if (theta_dim > 0) {
        r.has_theta = true;
        Var raw = head_theta(p, concat_cols(summary, r.z));
        std::tie(r.mu_theta, r.sigma_theta) = split_gaussian(raw, theta_dim);
        if (latents_enabled) {
            auto gs = gaussian_sample(r.mu_theta, r.sigma_theta, std::move(eps_theta));
            r.theta = gs.value;
            r.eps_theta = std::move(gs.eps);
        } else {
            r.theta = r.mu_theta;
        }
    }
    (void)tape;
    return r;
}

}  // namespace detail

// GRU history encoder for vector-valued systems.
class VectorEncoder {
public:
    VectorEncoder(ParamStore& s, Rng& rng, const SystemSpec& spec, const NetConfig& cfg)
        : spec_(spec), cfg_(cfg), gru_(s, rng, "enc.gru", spec.state_dim(), cfg.enc_hidden) {
        head_z_ = Linear(s, rng, "enc.head_z", cfg.enc_hidden, 2 * cfg.h_z);
        int64_t p = cfg.theta_dim(spec);
        if (p > 0) {
            head_theta_ = Linear(s, rng, "enc.head_theta", cfg.enc_hidden + cfg.h_z, 2 * p);
            // start the theta posterior at the physics prior: keeps early samples in
            // the physically sensible range (1/C, 1/L etc. stay finite)
            ThetaPrior prior = theta_prior(spec);
            Tensor& bias = s[head_theta_.b];
            for (int64_t i = 0; i < p; ++i) {
                bias[i] = prior.mu[i];
                bias[p + i] = detail::inv_softplus(prior.sigma[i] - kSigmaFloor);
            }
        }
    }

    EncodeResult encode(Tape& tape, const Binding& p, const Tensor& history, Tensor eps_z,
                        Tensor eps_theta, bool latents_enabled) const {
        if (history.shape.size() != 3 || history.shape[1] != spec_.history + 1 ||
            history.shape[2] != spec_.state_dim())
            throw GbdmError("encode: expected history [B," + std::to_string(spec_.history + 1) +
                            "," + std::to_string(spec_.state_dim()) + "], got " +
                            shape_str(history.shape));
        Var summary = gru_.run(tape, p, history);
        return detail::posterior_from_summary(tape, p, summary, head_z_, head_theta_, cfg_.h_z,
                                              cfg_.theta_dim(spec_), std::move(eps_z),
                                              std::move(eps_theta), latents_enabled);
    }

private:
    SystemSpec spec_;
    NetConfig cfg_;
    Gru gru_;
    Linear head_z_, head_theta_;
};

struct ConvLayer {
    ParamId W = 0, b = 0;
    int64_t stride = 1, pad = 1;

    ConvLayer() = default;
    ConvLayer(ParamStore& s, Rng& rng, const std::string& name, int64_t in_ch, int64_t out_ch,
              int64_t k, int64_t stride_, int64_t pad_, bool zero_init = false)
        : stride(stride_), pad(pad_) {
        double bound = 1.0 / std::sqrt(static_cast<double>(in_ch * k * k));
        Tensor w = zero_init ? Tensor::zeros({out_ch, in_ch, k, k})
                             : rng.uniform_tensor({out_ch, in_ch, k, k}, -bound, bound);
        W = s.add(name + ".W", std::move(w));
        b = s.add(name + ".b", Tensor::zeros({out_ch}));
    }

    Var operator()(const Binding& p, Var x) const { return conv2d(x, p[W], p[b], stride, pad); }
};

// Convolutional history encoder for the field system: history frames stacked as
// channels, four stride-2 convs, then the same posterior heads.
class ConvEncoder {
public:
    ConvEncoder(ParamStore& s, Rng& rng, const SystemSpec& spec, const NetConfig& cfg)
        : spec_(spec), cfg_(cfg) {
        int64_t in_ch = (spec.history + 1) * spec.state_shape[0];
        const int64_t chans[4] = {16, 32, 32, 64};
        int64_t c = in_ch;
        for (int i = 0; i < 4; ++i) {
            convs_[i] = ConvLayer(s, rng, "enc.conv" + std::to_string(i), c, chans[i], 3, 2, 1);
            c = chans[i];
        }
        int64_t side = kRdGrid >> 4;  // four stride-2 layers
        flat_dim_ = c * side * side;
        head_z_ = Linear(s, rng, "enc.head_z", flat_dim_, 2 * cfg.h_z);
        int64_t p = cfg.theta_dim(spec);
        if (p > 0) {
            head_theta_ = Linear(s, rng, "enc.head_theta", flat_dim_ + cfg.h_z, 2 * p);
            ThetaPrior prior = theta_prior(spec);
            Tensor& bias = s[head_theta_.b];
            for (int64_t i = 0; i < p; ++i) {
                bias[i] = prior.mu[i];
                bias[p + i] = detail::inv_softplus(prior.sigma[i] - kSigmaFloor);
            }
        }
    }

    // history [B, h+1, C, H, W]
    EncodeResult encode(Tape& tape, const Binding& p, const Tensor& history, Tensor eps_z,
                        Tensor eps_theta, bool latents_enabled) const {
        if (history.shape.size() != 5 || history.shape[1] != spec_.history + 1)
            throw GbdmError("encode: expected history [B," + std::to_string(spec_.history + 1) +
                            ",C,H,W], got " + shape_str(history.shape));
        int64_t B = history.shape[0];
        Var x = reshape(tape.leaf(history, "history"),
                        {B, history.shape[1] * history.shape[2], history.shape[3], history.shape[4]});
        for (const auto& conv : convs_) x = vtanh(conv(p, x));
        Var summary = reshape(x, {B, flat_dim_});
        return detail::posterior_from_summary(tape, p, summary, head_z_, head_theta_, cfg_.h_z,
                                              cfg_.theta_dim(spec_), std::move(eps_z),
                                              std::move(eps_theta), latents_enabled);
    }

private:
    SystemSpec spec_;
    NetConfig cfg_;
    ConvLayer convs_[4];
    int64_t flat_dim_ = 0;
    Linear head_z_, head_theta_;
};

namespace detail {

inline Var concat_conditioning(Var x_t, Var t, Var theta, Var z) {
    Var feats = concat_cols(x_t, t);
    if (theta.tape != nullptr) feats = concat_cols(feats, theta);
    if (z.tape != nullptr) feats = concat_cols(feats, z);
    return feats;
}

}  // namespace detail

// First-order conditional vector field: MLP over (x_t, t, theta, z), tanh
// activations, zero-initialized output so step 0 predicts pure physics.
class FieldMlp {
public:
    FieldMlp() = default;
    FieldMlp(ParamStore& s, Rng& rng, int64_t state_dim, int64_t cond_dim, const NetConfig& cfg) {
        int64_t in = state_dim + 1 + cond_dim;  // x_t, t, theta ++ z
        for (int i = 0; i < cfg.field_layers; ++i) {
            layers_.emplace_back(s, rng, "field.fc" + std::to_string(i), in, cfg.field_hidden);
            in = cfg.field_hidden;
        }
        out_ = Linear(s, rng, "field.out", in, state_dim, /*zero_init=*/true);
    }

    Var operator()(const Binding& p, Var x_t, Var t, Var theta, Var z) const {
        Var h = detail::concat_conditioning(x_t, t, theta, z);
        for (const auto& l : layers_) h = vtanh(l(p, h));
        return out_(p, h);
    }

private:
    std::vector<Linear> layers_;
    Linear out_;
};

// Shared-backbone two-head field for second-order systems. The backbone sees
// (x_t, t, theta, z); the acceleration head additionally consumes xdot_t.
class SecondOrderField {
public:
    SecondOrderField() = default;
    SecondOrderField(ParamStore& s, Rng& rng, int64_t state_dim, int64_t cond_dim,
                     const NetConfig& cfg) {
        int64_t w = cfg.so_width;
        backbone_[0] = Linear(s, rng, "field.bb0", state_dim + 1 + cond_dim, w);
        backbone_[1] = Linear(s, rng, "field.bb1", w, w);
        vhead_[0] = Linear(s, rng, "field.v0", w, w);
        vhead_[1] = Linear(s, rng, "field.v1", w, w);
        vout_ = Linear(s, rng, "field.v_out", w, state_dim, /*zero_init=*/true);
        ahead_[0] = Linear(s, rng, "field.a0", w + state_dim, w);
        ahead_[1] = Linear(s, rng, "field.a1", w, w);
        aout_ = Linear(s, rng, "field.a_out", w, state_dim, /*zero_init=*/true);
    }

    std::pair<Var, Var> operator()(const Binding& p, Var x_t, Var xdot_t, Var t, Var theta,
                                   Var z) const {
        Var h = detail::concat_conditioning(x_t, t, theta, z);
        for (const auto& l : backbone_) h = vtanh(l(p, h));
        Var hv = h;
        for (const auto& l : vhead_) hv = vtanh(l(p, hv));
        Var ha = concat_cols(h, xdot_t);
        for (const auto& l : ahead_) ha = vtanh(l(p, ha));
        return {vout_(p, hv), aout_(p, ha)};
    }

private:
    Linear backbone_[2];
    Linear vhead_[2], ahead_[2];
    Linear vout_, aout_;
};

// Convolutional field for grid states: (t, theta, z) broadcast as constant
// channels next to x_t, three convs, zero-initialized output.
class ConvField {
public:
    ConvField() = default;
    ConvField(ParamStore& s, Rng& rng, const SystemSpec& spec, int64_t cond_dim) {
        int64_t in_ch = spec.state_shape[0] + 1 + cond_dim;
        convs_[0] = ConvLayer(s, rng, "field.conv0", in_ch, 32, 3, 1, 1);
        convs_[1] = ConvLayer(s, rng, "field.conv1", 32, 32, 3, 1, 1);
        convs_[2] = ConvLayer(s, rng, "field.conv2", 32, spec.state_shape[0], 3, 1, 1,
                              /*zero_init=*/true);
    }

    Var operator()(const Binding& p, Var x_t, Var t, Var theta, Var z) const {
        const Shape xs = x_t.shape();  // by value: creating nodes may reallocate the tape
        Var cond = t;
        if (theta.tape != nullptr) cond = concat_cols(cond, theta);
        if (z.tape != nullptr) cond = concat_cols(cond, z);
        Var h = concat_channels(x_t, broadcast_channels(cond, xs[2], xs[3]));
        h = vtanh(convs_[0](p, h));
        h = vtanh(convs_[1](p, h));
        return convs_[2](p, h);
    }

private:
    ConvLayer convs_[3];
};

// Aggregate model: one encoder and one field per system, weights in a single
// ParamStore so the optimizer and checkpoints see a flat ordered list.
struct Model {
    SystemSpec spec;
    NetConfig cfg;
    ParamStore store;

    std::shared_ptr<VectorEncoder> vec_encoder;
    std::shared_ptr<ConvEncoder> conv_encoder;
    std::shared_ptr<FieldMlp> field;
    std::shared_ptr<SecondOrderField> field2;
    std::shared_ptr<ConvField> conv_field;

    bool second_order() const { return spec.physics_order == 2; }
    bool grid_state() const { return spec.state_shape.size() == 3; }
    int64_t cond_dim() const { return cfg.theta_dim(spec) + cfg.h_z; }

    EncodeResult encode(Tape& tape, const Binding& p, const Tensor& history, Rng& rng) const {
        int64_t B = history.shape[0];
        Tensor eps_z = rng.normal_tensor({B, cfg.h_z});
        Tensor eps_th = rng.normal_tensor({B, cfg.theta_dim(spec)});
        return encode_with_eps(tape, p, history, std::move(eps_z), std::move(eps_th));
    }

    EncodeResult encode_with_eps(Tape& tape, const Binding& p, const Tensor& history,
                                 Tensor eps_z, Tensor eps_th) const {
        if (conv_encoder)
            return conv_encoder->encode(tape, p, history, std::move(eps_z), std::move(eps_th),
                                        cfg.latents_enabled);
        return vec_encoder->encode(tape, p, history, std::move(eps_z), std::move(eps_th),
                                   cfg.latents_enabled);
    }

    Var velocity(const Binding& p, Var x_t, Var t, Var theta, Var z) const {
        if (conv_field) return (*conv_field)(p, x_t, t, theta, z);
        if (field) return (*field)(p, x_t, t, theta, z);
        throw GbdmError("model: first-order field not configured");
    }

    std::pair<Var, Var> velocity_accel(const Binding& p, Var x_t, Var xdot_t, Var t, Var theta,
                                       Var z) const {
        if (!field2) throw GbdmError("model: second-order field not configured");
        return (*field2)(p, x_t, xdot_t, t, theta, z);
    }
};

inline Model build_model(const SystemSpec& spec, const NetConfig& cfg, uint64_t seed) {
    Model m;
    m.spec = spec;
    m.cfg = cfg;
    Rng rng(seed, "init");
    if (m.grid_state()) {
        m.conv_encoder = std::make_shared<ConvEncoder>(m.store, rng, spec, cfg);
        m.conv_field = std::make_shared<ConvField>(m.store, rng, spec, m.cond_dim());
    } else {
        m.vec_encoder = std::make_shared<VectorEncoder>(m.store, rng, spec, cfg);
        if (spec.physics_order == 2)
            m.field2 = std::make_shared<SecondOrderField>(m.store, rng, spec.state_dim(),
                                                          m.cond_dim(), cfg);
        else
            m.field = std::make_shared<FieldMlp>(m.store, rng, spec.state_dim(), m.cond_dim(), cfg);
    }
    return m;
}

}  // namespace gbdm
