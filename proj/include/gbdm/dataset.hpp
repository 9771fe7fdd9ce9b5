#pragma once

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gbdm/checkpoint.hpp"  // shared little-endian io helpers
#include "gbdm/systems.hpp"
#include "gbdm/util.hpp"

namespace gbdm {

// GBDS trajectory file: "GBDS" | u32 version=1 | u64 JSON header length |
// JSON header | states float32 LE [trajectory][time][state] |
// true params float32 LE [trajectory][param].

inline constexpr uint32_t kDatasetVersion = 1;

class Dataset {
public:
    // Training code receives only this view; true parameters stay inaccessible.
    class TrainView {
    public:
        explicit TrainView(const Dataset* d) : d_(d) {}
        int64_t n_traj() const { return d_->n_traj_; }
        int64_t traj_len() const { return d_->traj_len_; }
        const Shape& state_shape() const { return d_->state_shape_; }
        int64_t state_dim() const { return numel(d_->state_shape_); }
        double dt() const { return d_->dt_; }
        SystemId system() const { return d_->system_; }
        // pointer to state vector at (trajectory, time)
        const float* state(int64_t traj, int64_t time) const {
            return &d_->states_[static_cast<size_t>((traj * traj_len() + time) * state_dim())];
        }

    private:
        const Dataset* d_;
    };

    class EvalView : public TrainView {
    public:
        explicit EvalView(const Dataset* d) : TrainView(d), d_(d) {}
        int64_t n_params() const { return static_cast<int64_t>(d_->param_names_.size()); }
        const std::vector<std::string>& param_names() const { return d_->param_names_; }
        const float* true_params(int64_t traj) const {
            return &d_->params_[static_cast<size_t>(traj * n_params())];
        }

    private:
        const Dataset* d_;
    };

    TrainView train_view() const { return TrainView(this); }
    EvalView eval_view() const { return EvalView(this); }
    const nlohmann::json& header() const { return header_; }

    static Dataset from_trajectories(const SystemSpec& spec, const std::vector<Trajectory>& trajs,
                                     uint64_t generator_seed) {
        Dataset d;
        d.system_ = spec.id;
        d.dt_ = spec.dt;
        d.n_traj_ = static_cast<int64_t>(trajs.size());
        d.traj_len_ = spec.traj_len;
        d.state_shape_ = spec.state_shape;
        d.param_names_ = spec.param_names();
        d.header_ = {{"system", spec.name},
                     {"dt", spec.dt},
                     {"n_traj", d.n_traj_},
                     {"traj_len", d.traj_len_},
                     {"state_shape", d.state_shape_},
                     {"param_names", d.param_names_},
                     {"input_signal", spec.input_signal},
                     {"generator_seed", generator_seed},
                     {"format_note", "states f32 LE [traj][time][state], then params f32 LE [traj][param]"}};
        int64_t sd = numel(d.state_shape_);
        d.states_.reserve(static_cast<size_t>(d.n_traj_ * d.traj_len_ * sd));
        for (const auto& t : trajs) {
            if (t.states.size() != d.traj_len_ * sd)
                throw GbdmError("dataset: trajectory length mismatch");
            d.states_.insert(d.states_.end(), t.states.data.begin(), t.states.data.end());
            d.params_.insert(d.params_.end(), t.true_params.begin(), t.true_params.end());
        }
        return d;
    }

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw GbdmError("cannot open dataset for writing: " + path);
        os.write("GBDS", 4);
        io::write_u32(os, kDatasetVersion);
        std::string hs = header_.dump();
        io::write_u64(os, hs.size());
        os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
        os.write(reinterpret_cast<const char*>(states_.data()),
                 static_cast<std::streamsize>(states_.size() * sizeof(float)));
        os.write(reinterpret_cast<const char*>(params_.data()),
                 static_cast<std::streamsize>(params_.size() * sizeof(float)));
        if (!os) throw GbdmError("write failure on dataset: " + path);
    }

    static Dataset load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw GbdmError("cannot open dataset: " + path);
        char magic[4];
        is.read(magic, 4);
        if (!is || std::memcmp(magic, "GBDS", 4) != 0)
            throw GbdmError("bad dataset magic in " + path);
        uint32_t version = io::read_u32(is);
        if (version != kDatasetVersion)
            throw GbdmError("unsupported dataset version " + std::to_string(version));
        uint64_t hlen = io::read_u64(is);
        std::string hs(hlen, '\0');
        is.read(hs.data(), static_cast<std::streamsize>(hlen));
        if (!is) throw GbdmError("truncated dataset header");

        Dataset d;
        d.header_ = nlohmann::json::parse(hs);
        d.system_ = system_from_name(d.header_.at("system").get<std::string>());
        d.dt_ = d.header_.at("dt").get<double>();
        d.n_traj_ = d.header_.at("n_traj").get<int64_t>();
        d.traj_len_ = d.header_.at("traj_len").get<int64_t>();
        d.state_shape_ = d.header_.at("state_shape").get<Shape>();
        d.param_names_ = d.header_.at("param_names").get<std::vector<std::string>>();

        size_t n_states = static_cast<size_t>(d.n_traj_ * d.traj_len_ * numel(d.state_shape_));
        size_t n_params = static_cast<size_t>(d.n_traj_) * d.param_names_.size();
        d.states_.resize(n_states);
        d.params_.resize(n_params);
        is.read(reinterpret_cast<char*>(d.states_.data()),
                static_cast<std::streamsize>(n_states * sizeof(float)));
        if (!is || static_cast<size_t>(is.gcount()) != n_states * sizeof(float))
            throw GbdmError("truncated payload in " + path);
        is.read(reinterpret_cast<char*>(d.params_.data()),
                static_cast<std::streamsize>(n_params * sizeof(float)));
        if (!is || static_cast<size_t>(is.gcount()) != n_params * sizeof(float))
            throw GbdmError("truncated payload in " + path);
        return d;
    }

private:
    nlohmann::json header_;
    SystemId system_ = SystemId::pendulum;
    double dt_ = 0.0;
    int64_t n_traj_ = 0;
    int64_t traj_len_ = 0;
    Shape state_shape_;
    std::vector<std::string> param_names_;
    std::vector<float> states_;
    std::vector<float> params_;
};

inline constexpr int kMaxResampleAttempts = 10;

// Samples parameters and initial conditions per the system protocol, simulates
// with RK4, and writes a GBDS file. Deterministic in (spec, n_traj, seed).
inline Dataset generate_dataset(const SystemSpec& spec, int64_t n_traj, uint64_t seed) {
    if (n_traj < 1) throw GbdmError("generate_dataset: n_traj must be >= 1");
    std::vector<Trajectory> trajs(static_cast<size_t>(n_traj));
    Rng base(seed, "data");
    parallel_for(n_traj, [&](int64_t i) {
        Rng rng = base.fork(static_cast<uint64_t>(i));
        for (int attempt = 0;; ++attempt) {
            try {
                auto params = sample_params(spec, rng);
                auto x0 = sample_initial(spec, rng);
                trajs[static_cast<size_t>(i)] = simulate(spec, params, x0);
                break;
            } catch (const GbdmError&) {
                if (attempt + 1 >= kMaxResampleAttempts) throw;
            }
        }
    });
    return Dataset::from_trajectories(spec, trajs, seed);
}

}  // namespace gbdm
