#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "gbdm/dataset.hpp"
#include "gbdm/objectives.hpp"

namespace gbdm {

struct RolloutOptions {
    int64_t n_steps = 1;
    int euler_substeps = 10;
    bool per_window = true;      // re-encode the rolling window every step
    bool deterministic = false;  // test hook: posterior sampled at its means
};

struct Forecast {
    Tensor states;                // [n_steps, state...]
    std::vector<Tensor> thetas;   // per-step sampled theta [p] (empty without physics)
};

namespace detail {

inline Tensor window_frame(const Tensor& window, int64_t k) {
    int64_t per = numel(window.shape) / window.shape[0];
    Shape s(window.shape.begin() + 1, window.shape.end());
    Tensor out(s);
    std::copy_n(&window.data[static_cast<size_t>(k * per)], per, out.data.begin());
    return out;
}

inline void push_frame(Tensor& window, const Tensor& frame) {
    int64_t per = frame.size();
    int64_t n = window.shape[0];
    std::copy(window.data.begin() + per, window.data.end(), window.data.begin());
    std::copy_n(frame.data.begin(), per, &window.data[static_cast<size_t>((n - 1) * per)]);
}

inline void check_rollout_state(const Tensor& x, int64_t step) {
    for (float v : x.data)
        if (!std::isfinite(v) || std::abs(v) > kBlowupThreshold)
            throw GbdmError("rollout: state blow-up at step " + std::to_string(step));
}

}  // namespace detail

// Autoregressive forecast: encode the (rolling) history window, sample (z, theta),
// and integrate the composed field over one normalized step with explicit Euler.
// history: [h+1, state...]; the forecast starts right after its last frame.
inline Forecast rollout(const Model& m, const Tensor& history, const RolloutOptions& opt,
                        Rng& rng) {
    if (opt.n_steps < 1) throw GbdmError("rollout: n_steps must be >= 1");
    if (opt.euler_substeps < 1) throw GbdmError("rollout: euler_substeps must be >= 1");
    if (history.shape.empty() || history.shape[0] != m.spec.history + 1)
        throw GbdmError("rollout: history must hold " + std::to_string(m.spec.history + 1) +
                        " frames");

    const SystemSpec& spec = m.spec;
    int64_t h1 = history.shape[0];
    Shape frame_shape(history.shape.begin() + 1, history.shape.end());
    int64_t d = numel(frame_shape);

    Shape out_shape = {opt.n_steps};
    for (int64_t v : frame_shape) out_shape.push_back(v);
    Forecast fc;
    fc.states = Tensor(out_shape);

    Tensor window = history;
    Tensor cached_z, cached_theta;
    bool have_latents = false;

    auto batched = [&](const Tensor& frame) {
        Shape s = {1};
        for (int64_t v : frame.shape) s.push_back(v);
        return Tensor(s, frame.data);
    };

    for (int64_t step = 0; step < opt.n_steps; ++step) {
        Tape tape;
        Binding b = bind(tape, m.store);

        Shape win_shape = {1, h1};
        for (int64_t v : frame_shape) win_shape.push_back(v);
        Tensor win_b(win_shape, window.data);
        EncodeResult enc;
        bool encode_now = opt.per_window || !have_latents;
        if (encode_now) {
            if (opt.deterministic) {
                enc = m.encode_with_eps(tape, b, win_b, Tensor::zeros({1, m.cfg.h_z}),
                                        Tensor::zeros({1, m.cfg.theta_dim(spec)}));
            } else {
                enc = m.encode(tape, b, win_b, rng);
            }
            cached_z = enc.z.val();
            if (enc.has_theta) cached_theta = enc.theta.val();
            have_latents = true;
        } else {
            enc.z = tape.leaf(cached_z, "z");
            if (cached_theta.size() > 0) {
                enc.theta = tape.leaf(cached_theta, "theta");
                enc.has_theta = true;
            }
        }
        if (enc.has_theta) fc.thetas.push_back(enc.theta.val());

        Tensor x = detail::window_frame(window, h1 - 1);
        double inv = 1.0 / opt.euler_substeps;

        if (m.second_order()) {
            // per-step velocity from a one-sided difference over the window
            if (h1 < 3) throw GbdmError("rollout: second-order systems need history >= 3 frames");
            Tensor xm1 = detail::window_frame(window, h1 - 2);
            Tensor xm2 = detail::window_frame(window, h1 - 3);
            Tensor xd(x.shape);
            for (int64_t i = 0; i < d; ++i) xd[i] = 0.5f * (3.0f * x[i] - 4.0f * xm1[i] + xm2[i]);

            for (int s = 0; s < opt.euler_substeps; ++s) {
                Var xv = tape.leaf(batched(x), "x");
                Var xdv = tape.leaf(batched(xd), "xd");
                Var tv = tape.leaf(Tensor({1, 1}, {static_cast<float>(s * inv)}), "t");
                auto [v, a] = m.velocity_accel(b, xv, xdv, tv, enc.theta, enc.z);
                Tensor av = a.val();
                if (m.cfg.physics_enabled && enc.has_theta) {
                    Var fp = physics_field(spec, xv, enc.theta);
                    float dt2 = static_cast<float>(spec.dt * spec.dt);
                    for (int64_t i = 0; i < d; ++i) av[i] += dt2 * fp.val()[i];
                }
                for (int64_t i = 0; i < d; ++i) {
                    x[i] += static_cast<float>(inv) * v.val()[i];
                    xd[i] += static_cast<float>(inv) * av[i];
                }
            }
        } else {
            for (int s = 0; s < opt.euler_substeps; ++s) {
                Var xv = tape.leaf(batched(x), "x");
                Var tv = tape.leaf(Tensor({1, 1}, {static_cast<float>(s * inv)}), "t");
                Var v = m.velocity(b, xv, tv, enc.theta, enc.z);
                Tensor vv = v.val();
                if (m.cfg.physics_enabled && enc.has_theta) {
                    Var fp = physics_field(spec, xv, enc.theta);
                    float dt = static_cast<float>(spec.dt);
                    for (int64_t i = 0; i < d; ++i) vv[i] += dt * fp.val()[i];
                }
                for (int64_t i = 0; i < d; ++i) x[i] += static_cast<float>(inv) * vv[i];
            }
        }

        detail::check_rollout_state(x, step);
        std::copy_n(x.data.begin(), d, &fc.states.data[static_cast<size_t>(step * d)]);
        detail::push_frame(window, x);
    }
    return fc;
}

// ---- metrics ----

struct ForecastMetrics {
    double mse = 0.0;
    double log_mse = 0.0;
};

// Mean squared error over all steps, dimensions, and forecasts, plus its
// natural log. Predictions and truths are matched pairs of [n_steps, state...].
inline ForecastMetrics evaluate_forecasts(const std::vector<Tensor>& preds,
                                          const std::vector<Tensor>& truths) {
    if (preds.size() != truths.size() || preds.empty())
        throw GbdmError("evaluate_forecasts: prediction/truth count mismatch");
    double acc = 0.0;
    int64_t count = 0;
    for (size_t i = 0; i < preds.size(); ++i) {
        if (preds[i].shape != truths[i].shape)
            throw GbdmError("evaluate_forecasts: shape mismatch at trajectory " +
                            std::to_string(i));
        for (int64_t j = 0; j < preds[i].size(); ++j) {
            double dv = static_cast<double>(preds[i][j]) - truths[i][j];
            acc += dv * dv;
        }
        count += preds[i].size();
    }
    ForecastMetrics out;
    out.mse = acc / static_cast<double>(count);
    out.log_mse = std::log(out.mse);
    return out;
}

// ---- parameter consistency (sliding-window CV) ----

inline double cv_of(const std::vector<double>& xs) {
    double mean = 0.0;
    for (double v : xs) mean += v;
    mean /= static_cast<double>(xs.size());
    double sq = 0.0;
    for (double v : xs) sq += (v - mean) * (v - mean);
    double sd = std::sqrt(sq / static_cast<double>(xs.size() - 1));  // sample std
    if (std::abs(mean) < 1e-8) return std::numeric_limits<double>::quiet_NaN();
    return sd / std::abs(mean);
}

struct CvTable {
    std::vector<std::vector<double>> cv;  // [trajectory][param]; NaN when excluded
    std::vector<double> median;           // per param, over defined entries
    int64_t excluded = 0;
    int64_t windows = 0;
};

// Slides the h-window along each trajectory, records the posterior mean of theta
// per window, and reports CV = std/|mean| per trajectory and parameter.
inline CvTable parameter_consistency(const Model& m, const Dataset::TrainView& view, int64_t h) {
    int64_t p = m.cfg.theta_dim(m.spec);
    if (p == 0) throw GbdmError("parameter_consistency: model exposes no physics parameters");
    int64_t L = view.traj_len();
    int64_t n_windows = L - h;
    if (n_windows < 5)
        throw GbdmError("parameter_consistency: need >= 5 sliding windows, have " +
                        std::to_string(n_windows));
    int64_t d = view.state_dim();

    CvTable table;
    table.windows = n_windows;
    table.cv.resize(static_cast<size_t>(view.n_traj()));
    std::vector<std::vector<std::vector<double>>> estimates(
        static_cast<size_t>(view.n_traj()),
        std::vector<std::vector<double>>(static_cast<size_t>(p)));

    for (int64_t i = 0; i < view.n_traj(); ++i) {
        for (int64_t s = 0; s < n_windows; ++s) {
            Shape hs = {1, h + 1};
            for (int64_t v : m.spec.state_shape) hs.push_back(v);
            Tensor hist(hs);
            for (int64_t k = 0; k <= h; ++k)
                std::copy_n(view.state(i, s + k), d, &hist.data[static_cast<size_t>(k * d)]);
            Tape tape;
            Binding b = bind(tape, m.store);
            auto enc = m.encode_with_eps(tape, b, hist, Tensor::zeros({1, m.cfg.h_z}),
                                         Tensor::zeros({1, p}));
            for (int64_t j = 0; j < p; ++j)
                estimates[static_cast<size_t>(i)][static_cast<size_t>(j)].push_back(
                    enc.mu_theta.val()[j]);
        }
        for (int64_t j = 0; j < p; ++j) {
            double c = cv_of(estimates[static_cast<size_t>(i)][static_cast<size_t>(j)]);
            if (std::isnan(c)) ++table.excluded;
            table.cv[static_cast<size_t>(i)].push_back(c);
        }
    }

    for (int64_t j = 0; j < p; ++j) {
        std::vector<double> col;
        for (const auto& row : table.cv)
            if (!std::isnan(row[static_cast<size_t>(j)])) col.push_back(row[static_cast<size_t>(j)]);
        if (col.empty()) {
            table.median.push_back(std::numeric_limits<double>::quiet_NaN());
            continue;
        }
        std::sort(col.begin(), col.end());
        size_t n = col.size();
        table.median.push_back(n % 2 ? col[n / 2] : 0.5 * (col[n / 2 - 1] + col[n / 2]));
    }
    return table;
}

// ---- bimodal mode coverage ----

struct ModeCoverage {
    double frac_pos = 0.0;
    double frac_neg = 0.0;
    double mean_endpoint = 0.0;
};

// Rolls the model out n_realizations times from the all-zero toy history and
// classifies each endpoint to the nearer mode (+/- mode_abs).
inline ModeCoverage mode_coverage(const Model& m, int64_t n_realizations, int64_t n_steps,
                                  Rng& rng, bool per_window = true) {
    if (n_realizations < 20) throw GbdmError("mode_coverage: need >= 20 realizations");
    Tensor history = Tensor::zeros({m.spec.history + 1, 1});
    RolloutOptions opt;
    opt.n_steps = n_steps;
    opt.per_window = per_window;
    ModeCoverage out;
    for (int64_t r = 0; r < n_realizations; ++r) {
        Rng rr = rng.fork(static_cast<uint64_t>(r));
        Forecast fc = rollout(m, history, opt, rr);
        float end = fc.states[fc.states.size() - 1];
        out.mean_endpoint += end;
        (end >= 0.0f ? out.frac_pos : out.frac_neg) += 1.0;
    }
    out.frac_pos /= static_cast<double>(n_realizations);
    out.frac_neg /= static_cast<double>(n_realizations);
    out.mean_endpoint /= static_cast<double>(n_realizations);
    return out;
}

}  // namespace gbdm
