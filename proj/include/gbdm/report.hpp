#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "gbdm/svgplot.hpp"
#include "gbdm/trainer.hpp"

namespace gbdm {

// ---- CSV intake ----

struct CsvData {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;
};

inline CsvData read_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw GbdmError("missing CSV file: " + path);
    CsvData out;
    std::string line;
    if (!std::getline(is, line)) throw GbdmError("empty CSV file: " + path);
    std::stringstream hs(line);
    std::string cell;
    while (std::getline(hs, cell, ',')) out.header.push_back(cell);
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        std::stringstream ss(line);
        while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
        out.rows.push_back(std::move(row));
    }
    if (out.rows.empty()) throw GbdmError("CSV has a header but no data rows: " + path);
    return out;
}

namespace detail {

inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

inline std::string variant_name(bool physics, bool latents) {
    if (physics && latents) return "vgbdm";
    if (!physics && latents) return "vbbdm";
    if (!physics && !latents) return "tfm";
    return "gbdm-det";
}

}  // namespace detail

// ---- eval: one checkpoint against one dataset ----

// Runs forecasts, test-set loss decomposition, parameter recovery/consistency,
// and (for the toy system) mode coverage; writes metrics.json, forecasts.csv,
// and cv_table.csv under cfg.out.
inline nlohmann::json run_eval(const Config& cfg) {
    if (cfg.checkpoint.empty()) throw GbdmError("eval: config needs a checkpoint path");
    std::string data_path = cfg.eval_dataset.empty() ? cfg.dataset : cfg.eval_dataset;
    if (data_path.empty()) throw GbdmError("eval: config needs a dataset path");

    Model m = load_model(cfg.checkpoint);
    Dataset data = Dataset::load(data_path);
    auto view = data.train_view();
    auto eval_view = data.eval_view();
    if (view.system() != m.spec.id) throw GbdmError("eval: dataset/model system mismatch");
    int64_t h = m.spec.history;
    int64_t d = view.state_dim();
    int64_t avail = view.traj_len() - 1 - h;
    int64_t n_steps = cfg.horizon > 0 ? std::min(cfg.horizon, avail) : std::min(4 * h, avail);
    if (n_steps < 1) throw GbdmError("eval: no forecast steps available");
    int64_t n_eval = std::min(cfg.eval_subset, view.n_traj());
    int64_t n_real = std::max<int64_t>(cfg.realizations, 1);

    std::filesystem::create_directories(cfg.out);
    ThetaPrior prior = theta_prior(m.spec);

    // stochastic multi-realization forecasts; MSE aggregated over everything
    RolloutOptions opt;
    opt.n_steps = n_steps;
    opt.euler_substeps = static_cast<int>(cfg.euler_substeps);
    opt.per_window = cfg.latent_mode == "per_window";
    Rng fc_rng(cfg.seed, "evalfc");
    std::ofstream fcsv(cfg.out + "/forecasts.csv");
    fcsv << "trajectory,realization,step";
    for (int64_t j = 0; j < d; ++j) fcsv << ",x" << j;
    fcsv << "\n";

    std::vector<Tensor> preds, truths;
    int64_t csv_traj = std::min<int64_t>(n_eval, 5);  // keep the sample file small
    for (int64_t i = 0; i < n_eval; ++i) {
        Shape hs = {h + 1};
        for (int64_t v : m.spec.state_shape) hs.push_back(v);
        Tensor hist(hs);
        for (int64_t k = 0; k <= h; ++k)
            std::copy_n(view.state(i, k), d, &hist.data[static_cast<size_t>(k * d)]);
        Shape ts = {n_steps};
        for (int64_t v : m.spec.state_shape) ts.push_back(v);
        Tensor truth(ts);
        for (int64_t k = 0; k < n_steps; ++k)
            std::copy_n(view.state(i, h + 1 + k), d, &truth.data[static_cast<size_t>(k * d)]);
        if (i < csv_traj)
            for (int64_t k = 0; k < n_steps; ++k) {
                fcsv << i << ",-1," << k;  // realization -1 marks the ground truth
                for (int64_t j = 0; j < d; ++j) fcsv << "," << detail::fmt(truth[k * d + j]);
                fcsv << "\n";
            }
        for (int64_t r = 0; r < n_real; ++r) {
            Rng rr = fc_rng.fork(static_cast<uint64_t>(i)).fork(static_cast<uint64_t>(r));
            Forecast fc = rollout(m, hist, opt, rr);
            preds.push_back(fc.states);
            truths.push_back(truth);
            if (i < csv_traj)
                for (int64_t k = 0; k < n_steps; ++k) {
                    fcsv << i << "," << r << "," << k;
                    for (int64_t j = 0; j < d; ++j)
                        fcsv << "," << detail::fmt(fc.states[k * d + j]);
                    fcsv << "\n";
                }
        }
    }
    ForecastMetrics fm = evaluate_forecasts(preds, truths);

    // test-set loss decomposition, deterministic in the eval seed
    Rng loss_rng(cfg.seed, "evalloss");
    Rng batch_rng(cfg.seed, "evalbatch");
    LossConfig lcfg;
    lcfg.dt = m.spec.dt;
    lcfg.alpha = cfg.alpha;
    lcfg.sigma_bridge = cfg.sigma_bridge;
    lcfg.beta_theta = cfg.beta_theta;
    lcfg.beta_z = cfg.beta_z;
    lcfg.physics_enabled = m.cfg.physics_enabled;
    lcfg.latents_enabled = m.cfg.latents_enabled;
    SegmentBatch batch = segment_batch(view, h, std::min<int64_t>(64, view.n_traj() * 4),
                                       m.second_order(), batch_rng);
    Tape tape;
    Binding b = bind(tape, m.store);
    LossBreakdown loss = model_loss(tape, m, b, batch, prior, lcfg, loss_rng);

    nlohmann::json metrics = {
        {"system", m.spec.name},
        {"variant", detail::variant_name(m.cfg.physics_enabled, m.cfg.latents_enabled)},
        {"n_traj", view.n_traj()},
        {"eval_subset", n_eval},
        {"realizations", n_real},
        {"horizon", n_steps},
        {"latent_mode", cfg.latent_mode},
        {"seed", cfg.seed},
        {"mse", fm.mse},
        {"log_mse", fm.log_mse},
        {"loss_decomposition",
         {{"fm", loss.fm}, {"kl_theta", loss.kl_theta}, {"kl_z", loss.kl_z}, {"total", loss.total}}},
    };

    // physics-parameter diagnostics: sliding-window consistency + recovery RMSE
    std::ofstream cvcsv(cfg.out + "/cv_table.csv");
    if (m.cfg.physics_enabled && m.spec.theta_dim() > 0) {
        CvTable table = parameter_consistency(m, view, h);
        auto theta_names = m.spec.theta_names();
        cvcsv << "trajectory";
        for (const auto& name : theta_names) cvcsv << ",cv_" << name;
        cvcsv << "\n";
        for (size_t i = 0; i < table.cv.size(); ++i) {
            cvcsv << i;
            for (double c : table.cv[i]) cvcsv << "," << detail::fmt(c);
            cvcsv << "\n";
        }
        nlohmann::json med = nlohmann::json::object();
        for (size_t j = 0; j < theta_names.size(); ++j) med[theta_names[j]] = table.median[j];
        metrics["cv_median"] = med;
        metrics["cv_excluded"] = table.excluded;

        // posterior mean from the first window vs the generator's true values
        std::vector<double> sq(theta_names.size(), 0.0);
        for (int64_t i = 0; i < n_eval; ++i) {
            Shape hs = {1, h + 1};
            for (int64_t v : m.spec.state_shape) hs.push_back(v);
            Tensor hist(hs);
            for (int64_t k = 0; k <= h; ++k)
                std::copy_n(view.state(i, k), d, &hist.data[static_cast<size_t>(k * d)]);
            Tape t2;
            Binding b2 = bind(t2, m.store);
            auto enc = m.encode_with_eps(t2, b2, hist, Tensor::zeros({1, m.cfg.h_z}),
                                         Tensor::zeros({1, m.spec.theta_dim()}));
            for (size_t j = 0; j < theta_names.size(); ++j) {
                double truth = eval_view.true_params(i)[m.spec.theta_indices[j]];
                double dv = enc.mu_theta.val()[static_cast<int64_t>(j)] - truth;
                sq[j] += dv * dv;
            }
        }
        nlohmann::json rmse = nlohmann::json::object();
        for (size_t j = 0; j < theta_names.size(); ++j)
            rmse[theta_names[j]] = std::sqrt(sq[j] / static_cast<double>(n_eval));
        metrics["param_rmse"] = rmse;
    } else {
        cvcsv << "trajectory\n";  // no physics parameters to track
    }

    if (m.spec.id == SystemId::bimodal_toy) {
        Rng mc_rng(cfg.seed, "modes");
        ModeCoverage mc = mode_coverage(m, std::max<int64_t>(n_real, 20), n_steps, mc_rng,
                                        cfg.latent_mode == "per_window");
        metrics["mode_coverage"] = {{"frac_pos", mc.frac_pos},
                                    {"frac_neg", mc.frac_neg},
                                    {"mean_endpoint", mc.mean_endpoint}};
    }
    if (m.spec.id == SystemId::reaction_diffusion)
        metrics["note"] =
            "reaction-diffusion is a smoke benchmark in this artifact: validated by loss "
            "decrease and rollout stability only, because absolute MSE depends on "
            "parameter-range defaults that are not pinned by the reference results";

    std::ofstream mjson(cfg.out + "/metrics.json");
    mjson << metrics.dump(2) << "\n";
    return metrics;
}

// ---- report: aggregate run directories into plots and tables ----

// Convergence series per run; with several runs the plot carries the mean over
// the common step grid plus a min-max band.
inline std::string convergence_svg(const std::vector<std::string>& run_dirs) {
    if (run_dirs.empty()) throw GbdmError("report: no run directories given");
    svg::Plot plot;
    plot.title = "Forecast convergence";
    plot.xlabel = "wall-clock minutes";
    plot.ylabel = "log MSE";

    std::vector<CsvData> runs;
    for (const auto& dir : run_dirs) runs.push_back(read_csv(dir + "/convergence.csv"));

    if (runs.size() == 1) {
        svg::Series s;
        s.label = "run";
        s.color = svg::palette(0);
        for (const auto& row : runs[0].rows) {
            if (!std::isfinite(row[2])) continue;
            s.x.push_back(row[0]);
            s.y.push_back(row[2]);
        }
        if (s.x.empty()) throw GbdmError("report: convergence series has no finite points");
        plot.series.push_back(std::move(s));
        return svg::render(plot);
    }

    // align runs by step index: x is the mean elapsed time at that step
    size_t n = runs[0].rows.size();
    for (const auto& r : runs) n = std::min(n, r.rows.size());
    svg::Series mean_s;
    mean_s.label = "mean of " + std::to_string(runs.size()) + " runs";
    mean_s.color = svg::palette(0);
    svg::Band band;
    band.color = svg::palette(0);
    for (size_t i = 0; i < n; ++i) {
        double xm = 0.0, ym = 0.0, lo = 0.0, hi = 0.0;
        bool ok = true;
        for (size_t r = 0; r < runs.size(); ++r) {
            double minutes = runs[r].rows[i][0], v = runs[r].rows[i][2];
            if (!std::isfinite(v)) ok = false;
            xm += minutes;
            ym += v;
            lo = r == 0 ? v : std::min(lo, v);
            hi = r == 0 ? v : std::max(hi, v);
        }
        if (!ok) continue;
        xm /= static_cast<double>(runs.size());
        ym /= static_cast<double>(runs.size());
        mean_s.x.push_back(xm);
        mean_s.y.push_back(ym);
        band.x.push_back(xm);
        band.lo.push_back(lo);
        band.hi.push_back(hi);
    }
    if (mean_s.x.empty()) throw GbdmError("report: convergence series has no finite points");
    plot.bands.push_back(std::move(band));
    plot.series.push_back(std::move(mean_s));
    return svg::render(plot);
}

// MSE vs training-set size, one series per model variant, min-max error bars
// across seeds. Input: per-run metrics.json contents.
inline std::string sample_efficiency_svg(const std::vector<nlohmann::json>& run_metrics) {
    std::map<std::string, std::map<int64_t, std::vector<double>>> by_variant;
    for (const auto& mj : run_metrics)
        by_variant[mj.at("variant").get<std::string>()][mj.at("n_traj").get<int64_t>()].push_back(
            mj.at("mse").get<double>());
    if (by_variant.empty()) throw GbdmError("report: no metrics for the sample-efficiency plot");

    svg::Plot plot;
    plot.title = "Sample efficiency";
    plot.xlabel = "training trajectories";
    plot.ylabel = "forecast MSE";
    plot.log_x = true;
    size_t ci = 0;
    for (const auto& [variant, points] : by_variant) {
        svg::Series s;
        s.label = variant;
        s.color = svg::palette(ci);
        for (const auto& [n, vals] : points) {
            double mean = 0.0, lo = vals[0], hi = vals[0];
            for (double v : vals) {
                mean += v;
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
            mean /= static_cast<double>(vals.size());
            s.x.push_back(static_cast<double>(n));
            s.y.push_back(mean);
            if (vals.size() > 1) {
                svg::ErrorBar e;
                e.color = s.color;
                e.x = static_cast<double>(n);
                e.lo = lo;
                e.hi = hi;
                plot.error_bars.push_back(e);
            }
        }
        plot.series.push_back(std::move(s));
        ++ci;
    }
    return svg::render(plot);
}

// Truth vs sampled realizations for one trajectory (first state component).
inline std::string forecast_overlay_svg(const std::string& run_dir) {
    CsvData fc = read_csv(run_dir + "/forecasts.csv");
    svg::Plot plot;
    plot.title = "Forecast realizations, trajectory 0";
    plot.xlabel = "forecast step";
    plot.ylabel = "x0";

    std::map<int64_t, svg::Series> by_real;
    for (const auto& row : fc.rows) {
        if (static_cast<int64_t>(row[0]) != 0) continue;
        int64_t real = static_cast<int64_t>(row[1]);
        auto& s = by_real[real];
        s.x.push_back(row[2]);
        s.y.push_back(row[3]);
    }
    if (by_real.empty()) throw GbdmError("report: forecasts.csv holds no rows for trajectory 0");
    for (auto& [real, s] : by_real) {
        if (real < 0) {
            s.label = "truth";
            s.color = "#000000";
            s.width = 2.5;
        } else {
            s.label = real == 0 ? "realizations" : "";
            s.color = svg::palette(1);
            s.width = 1.0;
        }
        plot.series.push_back(std::move(s));
    }
    return svg::render(plot);
}

// The report subcommand: read per-run artifacts, write aggregated metrics and
// the three SVG figures under out_dir.
inline nlohmann::json write_report(const std::vector<std::string>& run_dirs,
                                   const std::string& out_dir) {
    if (run_dirs.empty()) throw GbdmError("report: no run directories given");
    std::filesystem::create_directories(out_dir);

    std::vector<nlohmann::json> run_metrics;
    std::vector<std::string> eval_dirs, train_dirs;
    for (const auto& dir : run_dirs) {
        std::string mpath = dir + "/metrics.json";
        if (std::filesystem::exists(mpath)) {
            std::ifstream is(mpath);
            nlohmann::json mj;
            is >> mj;
            run_metrics.push_back(std::move(mj));
            eval_dirs.push_back(dir);
        }
        if (std::filesystem::exists(dir + "/convergence.csv")) train_dirs.push_back(dir);
    }

    auto write_file = [&](const std::string& name, const std::string& content) {
        std::ofstream os(out_dir + "/" + name, std::ios::binary);
        os << content;
    };
    if (!train_dirs.empty()) write_file("convergence.svg", convergence_svg(train_dirs));
    if (!run_metrics.empty()) {
        write_file("sample_efficiency.svg", sample_efficiency_svg(run_metrics));
        if (std::filesystem::exists(eval_dirs[0] + "/forecasts.csv"))
            write_file("forecast_overlay.svg", forecast_overlay_svg(eval_dirs[0]));
    }
    if (train_dirs.empty() && run_metrics.empty())
        throw GbdmError("report: no convergence.csv or metrics.json found in the given runs");

    // aggregate across seeds: group identical (system, variant, n_traj) cells
    std::map<std::string, std::vector<const nlohmann::json*>> groups;
    for (const auto& mj : run_metrics)
        groups[mj.at("system").get<std::string>() + "/" + mj.at("variant").get<std::string>() +
               "/" + std::to_string(mj.at("n_traj").get<int64_t>())]
            .push_back(&mj);

    std::ofstream table(out_dir + "/metrics_table.csv");
    table << "system,variant,n_traj,seeds,mse_mean,mse_std,logmse_mean\n";
    nlohmann::json agg = nlohmann::json::array();
    std::vector<std::string> notes;
    for (const auto& [key, cell] : groups) {
        double mean = 0.0, logmean = 0.0;
        for (const auto* mj : cell) {
            mean += mj->at("mse").get<double>();
            logmean += mj->at("log_mse").get<double>();
            if (mj->contains("note")) {
                std::string note = mj->at("note").get<std::string>();
                if (std::find(notes.begin(), notes.end(), note) == notes.end())
                    notes.push_back(note);
            }
        }
        size_t ns = cell.size();
        mean /= static_cast<double>(ns);
        logmean /= static_cast<double>(ns);
        double var = 0.0;
        for (const auto* mj : cell) {
            double dv = mj->at("mse").get<double>() - mean;
            var += dv * dv;
        }
        double sd = ns > 1 ? std::sqrt(var / static_cast<double>(ns - 1)) : 0.0;
        const auto& first = *cell[0];
        table << first.at("system").get<std::string>() << ","
              << first.at("variant").get<std::string>() << "," << first.at("n_traj").get<int64_t>()
              << "," << ns << "," << detail::fmt(mean) << "," << detail::fmt(sd) << ","
              << detail::fmt(logmean) << "\n";
        agg.push_back({{"system", first.at("system")},
                       {"variant", first.at("variant")},
                       {"n_traj", first.at("n_traj")},
                       {"seeds", ns},
                       {"mse_mean", mean},
                       {"mse_std", sd},
                       {"logmse_mean", logmean}});
    }
    nlohmann::json out = {{"cells", agg}, {"runs", run_dirs}};
    if (!notes.empty()) out["notes"] = notes;
    std::ofstream mjson(out_dir + "/metrics.json");
    mjson << out.dump(2) << "\n";
    return out;
}

}  // namespace gbdm
