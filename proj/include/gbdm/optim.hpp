#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "gbdm/tape.hpp"
#include "gbdm/tensor.hpp"

namespace gbdm {

using ParamId = size_t;

// Named, ordered collection of trainable tensors. Order is the serialization
// order of the checkpoint format.
struct ParamStore {
    std::vector<std::string> names;
    std::vector<Tensor> tensors;

    ParamId add(std::string name, Tensor t) {
        names.push_back(std::move(name));
        tensors.push_back(std::move(t));
        return tensors.size() - 1;
    }

    Tensor& operator[](ParamId id) { return tensors[id]; }
    const Tensor& operator[](ParamId id) const { return tensors[id]; }
    size_t size() const { return tensors.size(); }
};

// Per-step view of the parameters as tape leaves.
struct Binding {
    std::vector<Var> vars;
    Var operator[](ParamId id) const { return vars[id]; }

    std::vector<Tensor> grads() const {
        std::vector<Tensor> out;
        out.reserve(vars.size());
        for (const Var& v : vars) out.push_back(v.grad());
        return out;
    }
};

inline Binding bind(Tape& tape, const ParamStore& store) {
    Binding b;
    b.vars.reserve(store.size());
    for (const Tensor& t : store.tensors) b.vars.push_back(tape.leaf(t, "param"));
    return b;
}

inline float cosine_lr(int64_t step, int64_t total_steps, float lr0, float lr_min) {
    if (total_steps < 1) throw GbdmError("cosine_lr: total_steps must be >= 1");
    if (step < 0 || step > total_steps)
        throw GbdmError("cosine_lr: step " + std::to_string(step) + " outside [0," +
                        std::to_string(total_steps) + "]");
    double frac = static_cast<double>(step) / static_cast<double>(total_steps);
    return static_cast<float>(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(M_PI * frac)));
}

// Scales all gradients in place when the global L2 norm exceeds max_norm.
// Returns the pre-clip norm.
inline double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
    double sq = 0.0;
    for (const Tensor& g : grads)
        for (float v : g.data) sq += static_cast<double>(v) * v;
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        float s = static_cast<float>(max_norm / norm);
        for (Tensor& g : grads)
            for (float& v : g.data) v *= s;
    }
    return norm;
}

// AdamW with decoupled weight decay and bias-corrected moments.
struct AdamW {
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.0f;

    std::vector<Tensor> m;
    std::vector<Tensor> v;
    int64_t step_count = 0;

    void init(const ParamStore& store) {
        m.clear();
        v.clear();
        for (const Tensor& t : store.tensors) {
            m.push_back(Tensor::zeros(t.shape));
            v.push_back(Tensor::zeros(t.shape));
        }
        step_count = 0;
    }

    void step(ParamStore& store, const std::vector<Tensor>& grads, float lr) {
        if (lr <= 0.0f) throw GbdmError("adamw: learning rate must be positive");
        if (grads.size() != store.size() || m.size() != store.size())
            throw GbdmError("adamw: parameter/gradient count mismatch");
        ++step_count;
        float bc1 = 1.0f - std::pow(beta1, static_cast<float>(step_count));
        float bc2 = 1.0f - std::pow(beta2, static_cast<float>(step_count));
        for (size_t p = 0; p < store.size(); ++p) {
            Tensor& w = store.tensors[p];
            const Tensor& g = grads[p];
            if (!w.same_shape(g))
                throw GbdmError("adamw: gradient shape mismatch for " + store.names[p]);
            check_finite(g, "adamw gradient for " + store.names[p]);
            for (int64_t i = 0; i < w.size(); ++i) {
                float mi = m[p][i] = beta1 * m[p][i] + (1.0f - beta1) * g[i];
                float vi = v[p][i] = beta2 * v[p][i] + (1.0f - beta2) * g[i] * g[i];
                float update = (mi / bc1) / (std::sqrt(vi / bc2) + eps);
                w[i] -= lr * weight_decay * w[i];
                w[i] -= lr * update;
            }
        }
    }
};

}  // namespace gbdm
