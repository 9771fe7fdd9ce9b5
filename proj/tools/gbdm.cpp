// gbdm: generate benchmark datasets, train grey-box dynamics-matching models,
// evaluate checkpoints, and aggregate runs into report figures.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gbdm/report.hpp"

namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion = "1.0.0";

// exit codes: 0 success, 1 user error (bad config / arguments), 2 runtime failure
struct UserError : gbdm::GbdmError {
    using GbdmError::GbdmError;
};

gbdm::Config merged_config(const std::string& config_path,
                           const std::vector<std::string>& overrides, const std::string& out) {
    gbdm::Config cfg;
    try {
        if (!config_path.empty()) cfg = gbdm::Config::from_file(config_path);
        for (const auto& kv : overrides) {
            auto eq = kv.find('=');
            if (eq == std::string::npos)
                throw gbdm::GbdmError("--set expects key=value, got '" + kv + "'");
            cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
        }
    } catch (const gbdm::GbdmError& e) {
        throw UserError(e.what());
    }
    if (!out.empty()) cfg.out = out;
    return cfg;
}

void write_run_json(const std::string& dir, const std::string& command,
                    const gbdm::Config& cfg, double wall_seconds, const std::string& status) {
    fs::create_directories(dir);
    nlohmann::json rj = {{"command", command},
                         {"version", kVersion},
                         {"config", cfg.to_json()},
                         {"seed", cfg.seed},
                         {"wall_seconds", wall_seconds},
                         {"status", status}};
    std::ofstream os(dir + "/run.json");
    os << rj.dump(2) << "\n";
}

int run_generate(const std::string& system, int64_t n, uint64_t seed, int64_t traj_len,
                 const std::string& input_signal, const std::string& out) {
    gbdm::SystemSpec spec = gbdm::system_spec(gbdm::system_from_name(system));
    if (traj_len > 0) spec.traj_len = traj_len;
    if (!input_signal.empty()) spec.input_signal = input_signal;
    if (out.empty()) throw UserError("generate: --out is required");
    gbdm::Dataset data = gbdm::generate_dataset(spec, n, seed);
    if (out.find('/') != std::string::npos)
        fs::create_directories(fs::path(out).parent_path());
    data.save(out);
    std::cout << "wrote " << n << " " << spec.name << " trajectories to " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"grey-box dynamics matching toolkit"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);

    // generate
    auto* gen = app.add_subcommand("generate", "simulate a benchmark dataset");
    std::string gen_system, gen_out, gen_signal;
    int64_t gen_n = 1000, gen_traj_len = 0;
    uint64_t gen_seed = 0;
    gen->add_option("--system", gen_system, "rlc | pendulum | reaction_diffusion | lorenz | bimodal_toy")
        ->required();
    gen->add_option("--n", gen_n, "number of trajectories");
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--traj-len", gen_traj_len, "override points per trajectory");
    gen->add_option("--input-signal", gen_signal, "override the exogenous input (rlc)");
    gen->add_option("--out", gen_out, "output .gbds path")->required();

    // shared train/eval options
    std::string config_path, out_dir;
    std::vector<std::string> overrides;
    auto add_cfg_opts = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "key = value config file");
        sub->add_option("--set", overrides, "override a config key (key=value, repeatable)");
        sub->add_option("--out", out_dir, "output directory");
    };
    auto* train_cmd = app.add_subcommand("train", "optimize a model on a dataset");
    add_cfg_opts(train_cmd);
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    add_cfg_opts(eval_cmd);

    // report
    auto* report_cmd = app.add_subcommand("report", "aggregate runs into figures and tables");
    std::vector<std::string> report_runs;
    std::string report_out;
    report_cmd->add_option("--runs", report_runs, "run directories")->required()->expected(-1);
    report_cmd->add_option("--out", report_out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    auto t0 = std::chrono::steady_clock::now();
    auto wall = [&] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };

    try {
        if (gen->parsed())
            return run_generate(gen_system, gen_n, gen_seed, gen_traj_len, gen_signal, gen_out);

        if (train_cmd->parsed() || eval_cmd->parsed()) {
            const char* command = train_cmd->parsed() ? "train" : "eval";
            gbdm::Config cfg = merged_config(config_path, overrides, out_dir);
            try {
                if (train_cmd->parsed()) {
                    gbdm::TrainResult res = gbdm::train(cfg);
                    write_run_json(cfg.out, command, cfg, wall(), "ok");
                    std::cout << "trained " << res.steps_done << " steps, final loss "
                              << res.final_total << ", checkpoint at " << res.checkpoint_path
                              << "\n";
                } else {
                    nlohmann::json metrics = gbdm::run_eval(cfg);
                    write_run_json(cfg.out, command, cfg, wall(), "ok");
                    std::cout << "eval mse " << metrics.at("mse").get<double>() << " (logMSE "
                              << metrics.at("log_mse").get<double>() << ") -> " << cfg.out << "\n";
                    if (metrics.contains("note"))
                        std::cout << "note: " << metrics.at("note").get<std::string>() << "\n";
                }
            } catch (const gbdm::GbdmError&) {
                write_run_json(cfg.out, command, cfg, wall(), "failed");
                throw;
            }
            return 0;
        }

        if (report_cmd->parsed()) {
            nlohmann::json agg = gbdm::write_report(report_runs, report_out);
            gbdm::Config dummy;
            dummy.out = report_out;
            write_run_json(report_out, "report", dummy, wall(), "ok");
            std::cout << "report written to " << report_out << " (" << agg.at("cells").size()
                      << " aggregated cells)\n";
            if (agg.contains("notes"))
                for (const auto& note : agg.at("notes"))
                    std::cout << "note: " << note.get<std::string>() << "\n";
            return 0;
        }
    } catch (const UserError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
