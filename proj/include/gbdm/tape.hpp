#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "gbdm/tensor.hpp"

namespace gbdm {

// Reverse-mode autodiff over a linear tape. Nodes are appended in program
// order, so reverse index order is a valid reverse topological order.
// One tape per training step; tensors written by an op are never mutated.
class Tape;

struct Var {
    Tape* tape = nullptr;
    int idx = -1;

    const Tensor& val() const;
    const Tensor& grad() const;
    const Shape& shape() const { return val().shape; }
    float scalar() const { return val()[0]; }
};

class Tape {
public:
    struct Node {
        Tensor val;
        Tensor grad;  // zero-initialized, accumulated during backward
        const char* op;
        std::vector<int> parents;
        std::function<void(Tape&, Node&)> backward;
    };

    Var push(Tensor val, const char* op, std::vector<int> parents,
             std::function<void(Tape&, Node&)> backward) {
        check_finite(val, op);
        Node n;
        n.grad = Tensor::zeros(val.shape);
        n.val = std::move(val);
        n.op = op;
        n.parents = std::move(parents);
        n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    Var leaf(Tensor val, const char* op = "leaf") {
        return push(std::move(val), op, {}, nullptr);
    }

    Node& node(int i) { return nodes_[static_cast<size_t>(i)]; }
    const Node& node(int i) const { return nodes_[static_cast<size_t>(i)]; }
    size_t size() const { return nodes_.size(); }

    // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse creation order.
    // Gradients accumulate across shared subexpressions.
    void backward(Var loss) {
        if (loss.tape != this) throw GbdmError("backward: variable from another tape");
        if (numel(node(loss.idx).val.shape) != 1)
            throw GbdmError("backward: loss must be scalar, got shape " +
                            shape_str(node(loss.idx).val.shape));
        node(loss.idx).grad.data[0] = 1.0f;
        for (int i = loss.idx; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (!n.backward) continue;
            n.backward(*this, n);
            for (int p : n.parents) {
                if (!nodes_[static_cast<size_t>(p)].grad.all_finite())
                    throw GbdmError(std::string("non-finite gradient in backward of ") + n.op);
            }
        }
    }

private:
    std::vector<Node> nodes_;
};

inline const Tensor& Var::val() const { return tape->node(idx).val; }
inline const Tensor& Var::grad() const { return tape->node(idx).grad; }

// ---- elementwise binary ----

namespace ops {

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.val().shape != b.val().shape)
        throw GbdmError(std::string(op) + ": shape mismatch " + shape_str(a.val().shape) +
                        " vs " + shape_str(b.val().shape));
}

}  // namespace ops

inline Var add(Var a, Var b) {
    ops::require_same_shape(a, b, "add");
    Tensor out = a.val();
    const auto& bv = b.val();
    for (int64_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return a.tape->push(std::move(out), "add", {a.idx, b.idx}, [a, b](Tape& t, Tape::Node& n) {
        auto& ga = t.node(a.idx).grad;
        auto& gb = t.node(b.idx).grad;
        for (int64_t i = 0; i < n.grad.size(); ++i) {
            ga[i] += n.grad[i];
            gb[i] += n.grad[i];
        }
    });
}

inline Var sub(Var a, Var b) {
    ops::require_same_shape(a, b, "sub");
    Tensor out = a.val();
    const auto& bv = b.val();
    for (int64_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return a.tape->push(std::move(out), "sub", {a.idx, b.idx}, [a, b](Tape& t, Tape::Node& n) {
        auto& ga = t.node(a.idx).grad;
        auto& gb = t.node(b.idx).grad;
        for (int64_t i = 0; i < n.grad.size(); ++i) {
            ga[i] += n.grad[i];
            gb[i] -= n.grad[i];
        }
    });
}

inline Var mul(Var a, Var b) {
    ops::require_same_shape(a, b, "mul");
    Tensor out = a.val();
    const auto& bv = b.val();
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return a.tape->push(std::move(out), "mul", {a.idx, b.idx}, [a, b](Tape& t, Tape::Node& n) {
        auto& ga = t.node(a.idx).grad;
        auto& gb = t.node(b.idx).grad;
        const auto& av = t.node(a.idx).val;
        const auto& bv2 = t.node(b.idx).val;
        for (int64_t i = 0; i < n.grad.size(); ++i) {
            ga[i] += n.grad[i] * bv2[i];
            gb[i] += n.grad[i] * av[i];
        }
    });
}

// ---- scalar-coefficient ops ----

inline Var scale(Var a, float c) {
    Tensor out = a.val();
    for (auto& v : out.data) v *= c;
    return a.tape->push(std::move(out), "scale", {a.idx}, [a, c](Tape& t, Tape::Node& n) {
        auto& ga = t.node(a.idx).grad;
        for (int64_t i = 0; i < n.grad.size(); ++i) ga[i] += c * n.grad[i];
    });
}

inline Var add_scalar(Var a, float c) {
    Tensor out = a.val();
    for (auto& v : out.data) v += c;
    return a.tape->push(std::move(out), "add_scalar", {a.idx}, [a](Tape& t, Tape::Node& n) {
        auto& ga = t.node(a.idx).grad;
        for (int64_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i];
    });
}

inline Var neg(Var a) { return scale(a, -1.0f); }
inline Var one_minus(Var a) { return add_scalar(scale(a, -1.0f), 1.0f); }

// ---- elementwise unary ----

namespace ops {

template <typename F, typename DF>
Var unary(Var a, const char* name, F f, DF df) {
    Tensor out = a.val();
    for (auto& v : out.data) v = f(v);
    return a.tape->push(std::move(out), name, {a.idx}, [a, df](Tape& t, Tape::Node& n) {
        auto& ga = t.node(a.idx).grad;
        const auto& av = t.node(a.idx).val;
        const auto& ov = n.val;
        for (int64_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i] * df(av[i], ov[i]);
    });
}

}  // namespace ops

inline Var vsin(Var a) {
    return ops::unary(a, "sin", [](float x) { return std::sin(x); },
                      [](float x, float) { return std::cos(x); });
}
inline Var vcos(Var a) {
    return ops::unary(a, "cos", [](float x) { return std::cos(x); },
                      [](float x, float) { return -std::sin(x); });
}
inline Var vtanh(Var a) {
    return ops::unary(a, "tanh", [](float x) { return std::tanh(x); },
                      [](float, float y) { return 1.0f - y * y; });
}
inline Var vsigmoid(Var a) {
    return ops::unary(a, "sigmoid", [](float x) { return 1.0f / (1.0f + std::exp(-x)); },
                      [](float, float y) { return y * (1.0f - y); });
}
inline Var vexp(Var a) {
    return ops::unary(a, "exp", [](float x) { return std::exp(x); },
                      [](float, float y) { return y; });
}
inline Var vlog(Var a) {
    return ops::unary(a, "log", [](float x) { return std::log(x); },
                      [](float x, float) { return 1.0f / x; });
}
inline Var vsoftplus(Var a) {
    return ops::unary(a, "softplus",
                      [](float x) { return x > 20.0f ? x : std::log1p(std::exp(x)); },
                      [](float x, float) { return 1.0f / (1.0f + std::exp(-x)); });
}
inline Var square(Var a) {
    return ops::unary(a, "square", [](float x) { return x * x; },
                      [](float x, float) { return 2.0f * x; });
}

// ---- reductions ----

inline Var sum(Var a) {
    double acc = 0.0;
    for (float v : a.val().data) acc += v;
    return a.tape->push(Tensor::scalar(static_cast<float>(acc)), "sum", {a.idx},
                        [a](Tape& t, Tape::Node& n) {
                            auto& ga = t.node(a.idx).grad;
                            float g = n.grad[0];
                            for (int64_t i = 0; i < ga.size(); ++i) ga[i] += g;
                        });
}

inline Var mean(Var a) {
    int64_t m = a.val().size();
    return scale(sum(a), 1.0f / static_cast<float>(m));
}

// ---- matrix ops ----

// [B x I] * [I x O] -> [B x O]; ikj loop order for vectorization
inline Var matmul(Var a, Var b) {
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    if (av.shape.size() != 2 || bv.shape.size() != 2 || av.shape[1] != bv.shape[0])
        throw GbdmError("matmul: incompatible shapes " + shape_str(av.shape) + " x " +
                        shape_str(bv.shape));
    int64_t B = av.shape[0], I = av.shape[1], O = bv.shape[1];
    Tensor out({B, O});
    for (int64_t i = 0; i < B; ++i) {
        const float* arow = &av.data[static_cast<size_t>(i * I)];
        float* orow = &out.data[static_cast<size_t>(i * O)];
        for (int64_t k = 0; k < I; ++k) {
            float aik = arow[k];
            const float* brow = &bv.data[static_cast<size_t>(k * O)];
            for (int64_t j = 0; j < O; ++j) orow[j] += aik * brow[j];
        }
    }
    return a.tape->push(std::move(out), "matmul", {a.idx, b.idx}, [a, b, B, I, O](Tape& t, Tape::Node& n) {
        const auto& av2 = t.node(a.idx).val;
        const auto& bv2 = t.node(b.idx).val;
        auto& ga = t.node(a.idx).grad;
        auto& gb = t.node(b.idx).grad;
        // dA = dOut * B^T
        for (int64_t i = 0; i < B; ++i) {
            const float* grow = &n.grad.data[static_cast<size_t>(i * O)];
            float* garow = &ga.data[static_cast<size_t>(i * I)];
            for (int64_t k = 0; k < I; ++k) {
                const float* brow = &bv2.data[static_cast<size_t>(k * O)];
                float acc = 0.0f;
                for (int64_t j = 0; j < O; ++j) acc += grow[j] * brow[j];
                garow[k] += acc;
            }
        }
        // dB = A^T * dOut
        for (int64_t i = 0; i < B; ++i) {
            const float* arow = &av2.data[static_cast<size_t>(i * I)];
            const float* grow = &n.grad.data[static_cast<size_t>(i * O)];
            for (int64_t k = 0; k < I; ++k) {
                float aik = arow[k];
                float* gbrow = &gb.data[static_cast<size_t>(k * O)];
                for (int64_t j = 0; j < O; ++j) gbrow[j] += aik * grow[j];
            }
        }
    });
}

// bias add: [B x D] + [D]
inline Var add_bias(Var a, Var bias) {
    const Tensor& av = a.val();
    const Tensor& bv = bias.val();
    if (av.shape.size() != 2 || bv.size() != av.shape[1])
        throw GbdmError("add_bias: shape mismatch " + shape_str(av.shape) + " + " +
                        shape_str(bv.shape));
    int64_t B = av.shape[0], D = av.shape[1];
    Tensor out = av;
    for (int64_t i = 0; i < B; ++i)
        for (int64_t j = 0; j < D; ++j) out.at(i, j) += bv[j];
    return a.tape->push(std::move(out), "add_bias", {a.idx, bias.idx},
                        [a, bias, B, D](Tape& t, Tape::Node& n) {
                            auto& ga = t.node(a.idx).grad;
                            auto& gb = t.node(bias.idx).grad;
                            for (int64_t i = 0; i < B; ++i)
                                for (int64_t j = 0; j < D; ++j) {
                                    float g = n.grad.at(i, j);
                                    ga.at(i, j) += g;
                                    gb[j] += g;
                                }
                        });
}

inline Var concat_cols(Var a, Var b) {
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    if (av.shape.size() != 2 || bv.shape.size() != 2 || av.shape[0] != bv.shape[0])
        throw GbdmError("concat_cols: shape mismatch " + shape_str(av.shape) + " | " +
                        shape_str(bv.shape));
    int64_t B = av.shape[0], Da = av.shape[1], Db = bv.shape[1];
    Tensor out({B, Da + Db});
    for (int64_t i = 0; i < B; ++i) {
        for (int64_t j = 0; j < Da; ++j) out.at(i, j) = av.at(i, j);
        for (int64_t j = 0; j < Db; ++j) out.at(i, Da + j) = bv.at(i, j);
    }
    return a.tape->push(std::move(out), "concat_cols", {a.idx, b.idx},
                        [a, b, B, Da, Db](Tape& t, Tape::Node& n) {
                            auto& ga = t.node(a.idx).grad;
                            auto& gb = t.node(b.idx).grad;
                            for (int64_t i = 0; i < B; ++i) {
                                for (int64_t j = 0; j < Da; ++j) ga.at(i, j) += n.grad.at(i, j);
                                for (int64_t j = 0; j < Db; ++j) gb.at(i, j) += n.grad.at(i, Da + j);
                            }
                        });
}

inline Var slice_cols(Var a, int64_t start, int64_t len) {
    const Tensor& av = a.val();
    if (av.shape.size() != 2 || start < 0 || start + len > av.shape[1])
        throw GbdmError("slice_cols: range [" + std::to_string(start) + "," +
                        std::to_string(start + len) + ") out of " + shape_str(av.shape));
    int64_t B = av.shape[0];
    Tensor out({B, len});
    for (int64_t i = 0; i < B; ++i)
        for (int64_t j = 0; j < len; ++j) out.at(i, j) = av.at(i, start + j);
    return a.tape->push(std::move(out), "slice_cols", {a.idx},
                        [a, start, len, B](Tape& t, Tape::Node& n) {
                            auto& ga = t.node(a.idx).grad;
                            for (int64_t i = 0; i < B; ++i)
                                for (int64_t j = 0; j < len; ++j)
                                    ga.at(i, start + j) += n.grad.at(i, j);
                        });
}

inline Var reshape(Var a, Shape s) {
    if (numel(s) != a.val().size())
        throw GbdmError("reshape: cannot view " + shape_str(a.val().shape) + " as " + shape_str(s));
    Tensor out(std::move(s), a.val().data);
    return a.tape->push(std::move(out), "reshape", {a.idx}, [a](Tape& t, Tape::Node& n) {
        auto& ga = t.node(a.idx).grad;
        for (int64_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i];
    });
}

// ---- convolution ----

// x: [B,C,H,W], w: [O,C,kh,kw], bias: [O]; zero padding, square stride
inline Var conv2d(Var x, Var w, Var bias, int64_t stride, int64_t pad) {
    const Tensor& xv = x.val();
    const Tensor& wv = w.val();
    if (xv.shape.size() != 4 || wv.shape.size() != 4 || xv.shape[1] != wv.shape[1])
        throw GbdmError("conv2d: bad shapes " + shape_str(xv.shape) + " conv " + shape_str(wv.shape));
    int64_t B = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    int64_t O = wv.shape[0], kh = wv.shape[2], kw = wv.shape[3];
    int64_t Ho = (H + 2 * pad - kh) / stride + 1;
    int64_t Wo = (W + 2 * pad - kw) / stride + 1;
    const Tensor& biasv = bias.val();
    if (biasv.size() != O) throw GbdmError("conv2d: bias size mismatch");

    auto x_at = [&](const Tensor& src, int64_t b, int64_t c, int64_t i, int64_t j) -> float {
        if (i < 0 || i >= H || j < 0 || j >= W) return 0.0f;
        return src.data[static_cast<size_t>(((b * C + c) * H + i) * W + j)];
    };

    Tensor out({B, O, Ho, Wo});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t o = 0; o < O; ++o)
            for (int64_t i = 0; i < Ho; ++i)
                for (int64_t j = 0; j < Wo; ++j) {
                    float acc = biasv[o];
                    for (int64_t c = 0; c < C; ++c)
                        for (int64_t u = 0; u < kh; ++u)
                            for (int64_t v = 0; v < kw; ++v)
                                acc += wv.data[static_cast<size_t>(((o * C + c) * kh + u) * kw + v)] *
                                       x_at(xv, b, c, i * stride + u - pad, j * stride + v - pad);
                    out.data[static_cast<size_t>(((b * O + o) * Ho + i) * Wo + j)] = acc;
                }

    return x.tape->push(
        std::move(out), "conv2d", {x.idx, w.idx, bias.idx},
        [x, w, bias, B, C, H, W, O, kh, kw, Ho, Wo, stride, pad](Tape& t, Tape::Node& n) {
            const auto& xv2 = t.node(x.idx).val;
            const auto& wv2 = t.node(w.idx).val;
            auto& gx = t.node(x.idx).grad;
            auto& gw = t.node(w.idx).grad;
            auto& gb = t.node(bias.idx).grad;
            for (int64_t b = 0; b < B; ++b)
                for (int64_t o = 0; o < O; ++o)
                    for (int64_t i = 0; i < Ho; ++i)
                        for (int64_t j = 0; j < Wo; ++j) {
                            float g = n.grad.data[static_cast<size_t>(((b * O + o) * Ho + i) * Wo + j)];
                            gb[o] += g;
                            for (int64_t c = 0; c < C; ++c)
                                for (int64_t u = 0; u < kh; ++u)
                                    for (int64_t v = 0; v < kw; ++v) {
                                        int64_t ii = i * stride + u - pad;
                                        int64_t jj = j * stride + v - pad;
                                        if (ii < 0 || ii >= H || jj < 0 || jj >= W) continue;
                                        size_t xi = static_cast<size_t>(((b * C + c) * H + ii) * W + jj);
                                        size_t wi = static_cast<size_t>(((o * C + c) * kh + u) * kw + v);
                                        gx.data[xi] += g * wv2.data[wi];
                                        gw.data[wi] += g * xv2.data[xi];
                                    }
                        }
        });
}

inline Var recip(Var a) {
    return ops::unary(a, "recip", [](float x) { return 1.0f / x; },
                      [](float, float y) { return -y * y; });
}

inline Var div(Var a, Var b) { return mul(a, recip(b)); }

// ---- channel ops on [B,C,H,W] ----

inline Var slice_channels(Var a, int64_t start, int64_t len) {
    const Tensor& av = a.val();
    if (av.shape.size() != 4 || start < 0 || start + len > av.shape[1])
        throw GbdmError("slice_channels: bad range on " + shape_str(av.shape));
    int64_t B = av.shape[0], C = av.shape[1], HW = av.shape[2] * av.shape[3];
    Tensor out({B, len, av.shape[2], av.shape[3]});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < len; ++c)
            std::copy_n(&av.data[static_cast<size_t>((b * C + start + c) * HW)], HW,
                        &out.data[static_cast<size_t>((b * len + c) * HW)]);
    return a.tape->push(std::move(out), "slice_channels", {a.idx},
                        [a, start, len, B, C, HW](Tape& t, Tape::Node& n) {
                            auto& ga = t.node(a.idx).grad;
                            for (int64_t b = 0; b < B; ++b)
                                for (int64_t c = 0; c < len; ++c) {
                                    const float* src = &n.grad.data[static_cast<size_t>((b * len + c) * HW)];
                                    float* dst = &ga.data[static_cast<size_t>((b * C + start + c) * HW)];
                                    for (int64_t i = 0; i < HW; ++i) dst[i] += src[i];
                                }
                        });
}

inline Var concat_channels(Var a, Var b) {
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    if (av.shape.size() != 4 || bv.shape.size() != 4 || av.shape[0] != bv.shape[0] ||
        av.shape[2] != bv.shape[2] || av.shape[3] != bv.shape[3])
        throw GbdmError("concat_channels: shape mismatch " + shape_str(av.shape) + " | " +
                        shape_str(bv.shape));
    int64_t B = av.shape[0], Ca = av.shape[1], Cb = bv.shape[1], HW = av.shape[2] * av.shape[3];
    Tensor out({B, Ca + Cb, av.shape[2], av.shape[3]});
    for (int64_t b = 0; b < B; ++b) {
        std::copy_n(&av.data[static_cast<size_t>(b * Ca * HW)], Ca * HW,
                    &out.data[static_cast<size_t>(b * (Ca + Cb) * HW)]);
        std::copy_n(&bv.data[static_cast<size_t>(b * Cb * HW)], Cb * HW,
                    &out.data[static_cast<size_t>((b * (Ca + Cb) + Ca) * HW)]);
    }
    return a.tape->push(std::move(out), "concat_channels", {a.idx, b.idx},
                        [a, b, B, Ca, Cb, HW](Tape& t, Tape::Node& n) {
                            auto& ga = t.node(a.idx).grad;
                            auto& gb = t.node(b.idx).grad;
                            for (int64_t bi = 0; bi < B; ++bi) {
                                const float* g0 = &n.grad.data[static_cast<size_t>(bi * (Ca + Cb) * HW)];
                                float* da = &ga.data[static_cast<size_t>(bi * Ca * HW)];
                                float* db = &gb.data[static_cast<size_t>(bi * Cb * HW)];
                                for (int64_t i = 0; i < Ca * HW; ++i) da[i] += g0[i];
                                for (int64_t i = 0; i < Cb * HW; ++i) db[i] += g0[Ca * HW + i];
                            }
                        });
}

// 5-point Laplacian with periodic boundaries, scaled by inv_dx2.
// Self-adjoint, so the backward pass is the same stencil applied to the grad.
inline Var laplacian_periodic(Var a, float inv_dx2) {
    const Tensor& av = a.val();
    if (av.shape.size() != 4) throw GbdmError("laplacian_periodic: expected [B,C,H,W]");
    int64_t B = av.shape[0], C = av.shape[1], H = av.shape[2], W = av.shape[3];
    auto stencil = [B, C, H, W, inv_dx2](const Tensor& src, Tensor& dst, bool accumulate) {
        for (int64_t bc = 0; bc < B * C; ++bc) {
            const float* s = &src.data[static_cast<size_t>(bc * H * W)];
            float* d = &dst.data[static_cast<size_t>(bc * H * W)];
            for (int64_t i = 0; i < H; ++i) {
                int64_t up = (i + H - 1) % H, dn = (i + 1) % H;
                for (int64_t j = 0; j < W; ++j) {
                    int64_t lf = (j + W - 1) % W, rt = (j + 1) % W;
                    float v = inv_dx2 * (s[up * W + j] + s[dn * W + j] + s[i * W + lf] +
                                         s[i * W + rt] - 4.0f * s[i * W + j]);
                    if (accumulate)
                        d[i * W + j] += v;
                    else
                        d[i * W + j] = v;
                }
            }
        }
    };
    Tensor out(av.shape);
    stencil(av, out, false);
    return a.tape->push(std::move(out), "laplacian_periodic", {a.idx},
                        [a, stencil](Tape& t, Tape::Node& n) {
                            stencil(n.grad, t.node(a.idx).grad, true);
                        });
}

// Broadcast per-sample features [B,K] to constant channel maps [B,K,H,W].
inline Var broadcast_channels(Var a, int64_t H, int64_t W) {
    const Tensor& av = a.val();
    if (av.shape.size() != 2) throw GbdmError("broadcast_channels: expected [B,K]");
    int64_t B = av.shape[0], K = av.shape[1];
    Tensor out({B, K, H, W});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t k = 0; k < K; ++k)
            std::fill_n(&out.data[static_cast<size_t>((b * K + k) * H * W)], H * W, av.at(b, k));
    return a.tape->push(std::move(out), "broadcast_channels", {a.idx},
                        [a, B, K, H, W](Tape& t, Tape::Node& n) {
                            auto& ga = t.node(a.idx).grad;
                            for (int64_t b = 0; b < B; ++b)
                                for (int64_t k = 0; k < K; ++k) {
                                    const float* g = &n.grad.data[static_cast<size_t>((b * K + k) * H * W)];
                                    double acc = 0.0;
                                    for (int64_t i = 0; i < H * W; ++i) acc += g[i];
                                    ga.at(b, k) += static_cast<float>(acc);
                                }
                        });
}

// Broadcast multiply of [B,C,H,W] by a per-sample scalar [B,1].
inline Var mul_per_sample(Var x, Var s) {
    const Tensor& xv = x.val();
    const Tensor& sv = s.val();
    if (xv.shape.size() != 4 || sv.shape.size() != 2 || sv.shape[0] != xv.shape[0] ||
        sv.shape[1] != 1)
        throw GbdmError("mul_per_sample: shape mismatch " + shape_str(xv.shape) + " * " +
                        shape_str(sv.shape));
    int64_t B = xv.shape[0];
    int64_t per = xv.size() / B;
    Tensor out = xv;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < per; ++i) out.data[static_cast<size_t>(b * per + i)] *= sv[b];
    return x.tape->push(std::move(out), "mul_per_sample", {x.idx, s.idx},
                        [x, s, B, per](Tape& t, Tape::Node& n) {
                            auto& gx = t.node(x.idx).grad;
                            auto& gs = t.node(s.idx).grad;
                            const auto& xv2 = t.node(x.idx).val;
                            const auto& sv2 = t.node(s.idx).val;
                            for (int64_t b = 0; b < B; ++b) {
                                double acc = 0.0;
                                for (int64_t i = 0; i < per; ++i) {
                                    size_t k = static_cast<size_t>(b * per + i);
                                    gx.data[k] += n.grad.data[k] * sv2[b];
                                    acc += static_cast<double>(n.grad.data[k]) * xv2.data[k];
                                }
                                gs[b] += static_cast<float>(acc);
                            }
                        });
}

// operator sugar for readability in the model code
inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(float c, Var a) { return scale(a, c); }
inline Var operator-(Var a) { return neg(a); }

}  // namespace gbdm
