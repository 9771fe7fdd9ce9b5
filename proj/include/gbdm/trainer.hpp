#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>

#include "gbdm/checkpoint.hpp"
#include "gbdm/forecast.hpp"

namespace gbdm {

// Flat key = value run configuration, shared by every CLI subcommand.
// Unknown keys are a hard error so config typos never pass silently.
struct Config {
    std::string system;
    std::string dataset;
    std::string eval_dataset;  // convergence/eval data; falls back to `dataset`
    std::string out = ".";
    std::string resume;
    std::string checkpoint;  // eval input
    int64_t n_traj = 1000;
    uint64_t seed = 0;

    int64_t h = -1;    // -1: system default
    int64_t h_z = -1;  // -1: system default
    int64_t batch_size = 64;
    int64_t steps = 20000;
    int64_t stop_after = -1;  // pause the run at this step; lr schedule still spans `steps`
    float lr0 = 1e-3f;
    float lr_min = 0.0f;
    float weight_decay = 5e-7f;
    int64_t eval_every = 500;
    int64_t eval_subset = 32;
    double clip_norm = 10.0;

    float alpha = 0.5f;
    float sigma_bridge = 0.0f;
    float beta_theta = 1.0f;
    float beta_z = 1.0f;
    bool physics = true;
    bool latents = true;

    int64_t horizon = -1;  // forecast steps; -1: 4x history (capped by data)
    int64_t euler_substeps = 10;
    int64_t realizations = 10;
    // per_window: re-encode the rolling window and resample latents each step;
    // fixed: encode the seed window once and integrate with frozen (theta, z)
    std::string latent_mode = "per_window";

    void set(const std::string& key, const std::string& value) {
        auto to_i = [&] { return static_cast<int64_t>(std::stoll(value)); };
        auto to_f = [&] { return std::stof(value); };
        auto to_b = [&] {
            if (value == "true" || value == "1") return true;
            if (value == "false" || value == "0") return false;
            throw GbdmError("config: boolean key '" + key + "' got '" + value + "'");
        };
        if (key == "system") system = value;
        else if (key == "dataset") dataset = value;
        else if (key == "eval_dataset") eval_dataset = value;
        else if (key == "out") out = value;
        else if (key == "resume") resume = value;
        else if (key == "checkpoint") checkpoint = value;
        else if (key == "n_traj") n_traj = to_i();
        else if (key == "seed") seed = static_cast<uint64_t>(std::stoull(value));
        else if (key == "h") h = to_i();
        else if (key == "h_z") h_z = to_i();
        else if (key == "batch_size") batch_size = to_i();
        else if (key == "steps") steps = to_i();
        else if (key == "stop_after") stop_after = to_i();
        else if (key == "lr0") lr0 = to_f();
        else if (key == "lr_min") lr_min = to_f();
        else if (key == "weight_decay") weight_decay = to_f();
        else if (key == "eval_every") eval_every = to_i();
        else if (key == "eval_subset") eval_subset = to_i();
        else if (key == "clip_norm") clip_norm = to_f();
        else if (key == "alpha") alpha = to_f();
        else if (key == "sigma_bridge") sigma_bridge = to_f();
        else if (key == "beta_theta") beta_theta = to_f();
        else if (key == "beta_z") beta_z = to_f();
        else if (key == "physics") physics = to_b();
        else if (key == "latents") latents = to_b();
        else if (key == "horizon") horizon = to_i();
        else if (key == "euler_substeps") euler_substeps = to_i();
        else if (key == "realizations") realizations = to_i();
        else if (key == "latent_mode") {
            if (value != "per_window" && value != "fixed")
                throw GbdmError("config: latent_mode must be per_window or fixed, got '" + value +
                                "'");
            latent_mode = value;
        }
        else throw GbdmError("config: unknown key '" + key + "'");
    }

    static Config from_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw GbdmError("cannot open config: " + path);
        Config cfg;
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            auto trim = [](std::string s) {
                size_t a = s.find_first_not_of(" \t\r");
                if (a == std::string::npos) return std::string();
                size_t b = s.find_last_not_of(" \t\r");
                return s.substr(a, b - a + 1);
            };
            line = trim(line);
            if (line.empty()) continue;
            auto eq = line.find('=');
            if (eq == std::string::npos)
                throw GbdmError("config: line " + std::to_string(lineno) + " is not key = value");
            cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        }
        return cfg;
    }

    nlohmann::json to_json() const {
        return {{"system", system},       {"dataset", dataset},
                {"eval_dataset", eval_dataset}, {"out", out},
                {"resume", resume},       {"checkpoint", checkpoint},
                {"n_traj", n_traj},
                {"seed", seed},           {"h", h},
                {"h_z", h_z},             {"batch_size", batch_size},
                {"steps", steps},         {"stop_after", stop_after},
                {"lr0", lr0},
                {"lr_min", lr_min},       {"weight_decay", weight_decay},
                {"eval_every", eval_every}, {"eval_subset", eval_subset},
                {"clip_norm", clip_norm}, {"alpha", alpha},
                {"sigma_bridge", sigma_bridge}, {"beta_theta", beta_theta},
                {"beta_z", beta_z},       {"physics", physics},
                {"latents", latents},     {"horizon", horizon},
                {"euler_substeps", euler_substeps}, {"realizations", realizations},
                {"latent_mode", latent_mode}};
    }
};

// Resolved per-run objects derived from a Config + dataset header.
struct RunSetup {
    SystemSpec spec;
    NetConfig net;
    LossConfig loss;
};

inline RunSetup resolve_setup(const Config& cfg, const Dataset& data) {
    RunSetup s;
    s.spec = system_spec(data.train_view().system());
    s.spec.input_signal = data.header().value("input_signal", s.spec.input_signal);
    if (cfg.h > 0) s.spec.history = cfg.h;
    if (s.spec.history < (s.spec.physics_order == 2 ? 2 : 1))
        throw GbdmError("config: history too short for this system");
    s.net = NetConfig::defaults_for(s.spec);
    if (cfg.h_z > 0) s.net.h_z = cfg.h_z;
    s.net.physics_enabled = cfg.physics && s.spec.theta_dim() > 0;
    s.net.latents_enabled = cfg.latents;
    s.loss.dt = s.spec.dt;
    s.loss.alpha = cfg.alpha;
    s.loss.sigma_bridge = cfg.sigma_bridge;
    s.loss.beta_theta = cfg.beta_theta;
    s.loss.beta_z = cfg.beta_z;
    s.loss.physics_enabled = s.net.physics_enabled;
    s.loss.latents_enabled = s.net.latents_enabled;
    return s;
}

// Uniform segment sampling: trajectory ~ U over the dataset, k ~ U{h..T-1}
// (T = traj_len - 1), history frames k-h..k plus the target x_{k+1}.
// Segments are copied out of the dataset, never aliased.
inline SegmentBatch segment_batch(const Dataset::TrainView& view, int64_t h, int64_t batch_size,
                                  bool second_order, Rng& rng) {
    int64_t L = view.traj_len();
    if (L < h + 2)
        throw GbdmError("segment_batch: trajectories of length " + std::to_string(L) +
                        " too short for history " + std::to_string(h));
    int64_t d = view.state_dim();
    Shape frame = view.state_shape();

    SegmentBatch batch;
    Shape hist_shape = {batch_size, h + 1};
    for (int64_t v : frame) hist_shape.push_back(v);
    Shape row_shape = {batch_size};
    for (int64_t v : frame) row_shape.push_back(v);
    batch.history = Tensor(hist_shape);
    batch.x_k = Tensor(row_shape);
    batch.x_k1 = Tensor(row_shape);
    if (second_order) batch.x_km1 = Tensor(row_shape);

    for (int64_t i = 0; i < batch_size; ++i) {
        int64_t traj = static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(view.n_traj())));
        int64_t k = h + static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(L - 1 - h)));
        for (int64_t j = 0; j <= h; ++j)
            std::copy_n(view.state(traj, k - h + j), d,
                        &batch.history.data[static_cast<size_t>((i * (h + 1) + j) * d)]);
        std::copy_n(view.state(traj, k), d, &batch.x_k.data[static_cast<size_t>(i * d)]);
        std::copy_n(view.state(traj, k + 1), d, &batch.x_k1.data[static_cast<size_t>(i * d)]);
        if (second_order)
            std::copy_n(view.state(traj, k - 1), d, &batch.x_km1.data[static_cast<size_t>(i * d)]);
    }
    return batch;
}

// Forecast logMSE of the current weights on a fixed evaluation subset; used for
// the convergence log and by the eval subcommand.
inline ForecastMetrics forecast_eval(const Model& m, const Dataset::TrainView& view,
                                     int64_t horizon, int64_t max_traj, int64_t euler_substeps,
                                     Rng& rng, bool per_window = true) {
    int64_t h = m.spec.history;
    int64_t L = view.traj_len();
    int64_t avail = L - 1 - h;
    int64_t n_steps = horizon > 0 ? std::min(horizon, avail) : std::min(4 * h, avail);
    if (n_steps < 1) throw GbdmError("forecast_eval: no forecast steps available");
    int64_t n = std::min(max_traj, view.n_traj());
    int64_t d = view.state_dim();

    RolloutOptions opt;
    opt.n_steps = n_steps;
    opt.euler_substeps = static_cast<int>(euler_substeps);
    opt.per_window = per_window;

    std::vector<Tensor> preds(static_cast<size_t>(n)), truths(static_cast<size_t>(n));
    parallel_for(n, [&](int64_t i) {
        Shape hs = {h + 1};
        for (int64_t v : m.spec.state_shape) hs.push_back(v);
        Tensor hist(hs);
        for (int64_t k = 0; k <= h; ++k)
            std::copy_n(view.state(i, k), d, &hist.data[static_cast<size_t>(k * d)]);
        Rng rr = rng.fork(static_cast<uint64_t>(i));
        preds[static_cast<size_t>(i)] = rollout(m, hist, opt, rr).states;
        Shape ts = {n_steps};
        for (int64_t v : m.spec.state_shape) ts.push_back(v);
        Tensor truth(ts);
        for (int64_t k = 0; k < n_steps; ++k)
            std::copy_n(view.state(i, h + 1 + k), d, &truth.data[static_cast<size_t>(k * d)]);
        truths[static_cast<size_t>(i)] = std::move(truth);
    });
    return evaluate_forecasts(preds, truths);
}

struct TrainResult {
    std::string checkpoint_path;
    int64_t steps_done = 0;
    double final_total = 0.0;
    double final_fm = 0.0;
};

inline nlohmann::json model_meta(const Config& cfg, const RunSetup& setup) {
    return {{"system", setup.spec.name},
            {"h", setup.spec.history},
            {"h_z", setup.net.h_z},
            {"physics_enabled", setup.net.physics_enabled},
            {"latents_enabled", setup.net.latents_enabled},
            {"alpha", setup.loss.alpha},
            {"sigma_bridge", setup.loss.sigma_bridge},
            {"beta_theta", setup.loss.beta_theta},
            {"beta_z", setup.loss.beta_z},
            {"seed", cfg.seed}};
}

// Rebuilds a Model from checkpoint metadata and loads its weights.
inline Model load_model(const std::string& checkpoint_path) {
    Checkpoint ck = load_checkpoint(checkpoint_path);
    if (ck.extra.is_null()) throw GbdmError("checkpoint has no model metadata: " + checkpoint_path);
    SystemSpec spec = system_spec(system_from_name(ck.extra.at("system").get<std::string>()));
    spec.history = ck.extra.at("h").get<int64_t>();
    NetConfig net = NetConfig::defaults_for(spec);
    net.h_z = ck.extra.at("h_z").get<int64_t>();
    net.physics_enabled = ck.extra.at("physics_enabled").get<bool>();
    net.latents_enabled = ck.extra.at("latents_enabled").get<bool>();
    Model m = build_model(spec, net, 0);
    if (m.store.size() != ck.store.size())
        throw GbdmError("checkpoint parameter count mismatch");
    for (size_t i = 0; i < m.store.size(); ++i) {
        if (m.store.names[i] != ck.store.names[i] ||
            !m.store.tensors[i].same_shape(ck.store.tensors[i]))
            throw GbdmError("checkpoint parameter mismatch at " + ck.store.names[i]);
        m.store.tensors[i] = ck.store.tensors[i];
    }
    return m;
}

// The optimization loop. Deterministic in (config, seed): every step derives its
// own RNG from the step index, so resumed runs replay the same stream.
inline TrainResult train(const Config& cfg) {
    if (cfg.dataset.empty()) throw GbdmError("train: config needs a dataset path");
    if (cfg.steps < 0) throw GbdmError("train: steps must be >= 0");
    if (cfg.batch_size < 1) throw GbdmError("train: batch_size must be >= 1");

    Dataset data = Dataset::load(cfg.dataset);
    Dataset eval_data = cfg.eval_dataset.empty() ? Dataset::load(cfg.dataset)
                                                 : Dataset::load(cfg.eval_dataset);
    RunSetup setup = resolve_setup(cfg, data);
    auto view = data.train_view();
    ThetaPrior prior = theta_prior(setup.spec);

    std::filesystem::create_directories(cfg.out);
    std::string ck_path = cfg.out + "/checkpoint.gbck";
    std::ofstream loss_csv(cfg.out + "/loss.csv");
    loss_csv << "step,wall_seconds,fm,kl_theta,kl_z,total,lr\n";
    std::ofstream conv_csv(cfg.out + "/convergence.csv");
    conv_csv << "minutes,step,logmse\n";

    Model model = build_model(setup.spec, setup.net, cfg.seed);
    AdamW opt;
    opt.weight_decay = cfg.weight_decay;
    opt.init(model.store);
    int64_t start_step = 0;

    if (!cfg.resume.empty()) {
        Checkpoint ck = load_checkpoint(cfg.resume);
        if (ck.store.size() != model.store.size())
            throw GbdmError("resume: parameter count mismatch");
        for (size_t i = 0; i < model.store.size(); ++i) model.store.tensors[i] = ck.store.tensors[i];
        if (!ck.opt.m.empty()) {
            opt.m = ck.opt.m;
            opt.v = ck.opt.v;
            opt.step_count = ck.opt.step_count;
        }
        start_step = ck.step;
    }

    nlohmann::json meta = model_meta(cfg, setup);
    save_checkpoint(ck_path, model.store, opt, start_step, meta);

    Rng base(cfg.seed, "train");
    auto t0 = std::chrono::steady_clock::now();
    auto wall = [&] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };

    TrainResult result;
    result.checkpoint_path = ck_path;

    auto log_convergence = [&](int64_t step) {
        double logmse;
        try {
            Rng eval_rng(cfg.seed, "eval");
            auto metrics = forecast_eval(model, eval_data.train_view(), cfg.horizon,
                                         cfg.eval_subset, cfg.euler_substeps, eval_rng,
                                         cfg.latent_mode == "per_window");
            logmse = metrics.log_mse;
        } catch (const GbdmError&) {
            // a diverging rollout mid-training is data, not a fatal error
            logmse = std::numeric_limits<double>::infinity();
        }
        conv_csv << wall() / 60.0 << "," << step << "," << logmse << "\n";
        conv_csv.flush();
    };

    int64_t until = cfg.stop_after > 0 ? std::min(cfg.stop_after, cfg.steps) : cfg.steps;
    for (int64_t step = start_step; step < until; ++step) {
        Rng step_rng = base.fork(static_cast<uint64_t>(step));
        Rng batch_rng = step_rng.fork("batch");
        Rng loss_rng = step_rng.fork("loss");
        SegmentBatch batch = segment_batch(view, setup.spec.history, cfg.batch_size,
                                           model.second_order(), batch_rng);
        Tape tape;
        Binding b = bind(tape, model.store);
        auto out = model_loss(tape, model, b, batch, prior, setup.loss, loss_rng);
        tape.backward(out.total_var);
        auto grads = b.grads();
        clip_global_norm(grads, cfg.clip_norm);
        float lr = cosine_lr(step, std::max<int64_t>(cfg.steps, 1), cfg.lr0, cfg.lr_min);
        opt.step(model.store, grads, lr);

        loss_csv << step << "," << wall() << "," << out.fm << "," << out.kl_theta << ","
                 << out.kl_z << "," << out.total << "," << lr << "\n";

        result.steps_done = step + 1;
        result.final_total = out.total;
        result.final_fm = out.fm;

        bool at_eval = cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0;
        if (at_eval || step + 1 == until) {
            save_checkpoint(ck_path, model.store, opt, step + 1, meta);
            log_convergence(step + 1);
        }
    }
    loss_csv.flush();
    return result;
}

}  // namespace gbdm
