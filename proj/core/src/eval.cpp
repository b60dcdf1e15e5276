#include "deconf/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <thread>

#include "deconf/textio.hpp"

namespace deconf {

MetricReport compute_metrics(const Eigen::VectorXd& pred, const Eigen::VectorXd& truth) {
    if (pred.size() != truth.size()) {
        throw shape_error("compute_metrics: pred has " + std::to_string(pred.size()) +
                          " values, truth has " + std::to_string(truth.size()));
    }
    if (pred.size() < 1) {
        throw shape_error("compute_metrics: empty vectors");
    }
    MetricReport m;
    m.n = static_cast<long>(pred.size());
    const Eigen::ArrayXd diff = (pred - truth).array();
    m.mse = diff.square().mean();
    m.mae = diff.abs().mean();
    m.rmse = std::sqrt(m.mse);
    const double truth_mean = truth.mean();
    const double ss_tot = (truth.array() - truth_mean).square().sum();
    if (ss_tot == 0.0) {
        m.r2_defined = false;
        m.r2 = std::numeric_limits<double>::quiet_NaN();
    } else {
        m.r2 = 1.0 - diff.square().sum() / ss_tot;
    }
    return m;
}

AlignedR2Result aligned_r2(const Eigen::VectorXd& zhat, const Eigen::VectorXd& z) {
    if (zhat.size() != z.size()) {
        throw shape_error("aligned_r2: series lengths differ (" + std::to_string(zhat.size()) +
                          " vs " + std::to_string(z.size()) + ")");
    }
    if (zhat.size() < 3) {
        throw insufficient_data_error("aligned_r2 needs at least 3 samples, got " +
                                      std::to_string(zhat.size()));
    }
    const double n = static_cast<double>(z.size());
    const double mx = zhat.mean();
    const double my = z.mean();
    const double vx = (zhat.array() - mx).square().sum() / n;
    const double vy = (z.array() - my).square().sum() / n;
    if (vx < 1e-300 || vy < 1e-300) {
        return AlignedR2Result{0.0, true};
    }
    const double cov = ((zhat.array() - mx) * (z.array() - my)).sum() / n;
    // R^2 of the best affine fit equals the squared correlation.
    return AlignedR2Result{(cov * cov) / (vx * vy), false};
}

MetricReport evaluate_forecaster(const Forecaster& model, const Dataset& ds,
                                 const FactorModel* factor,
                                 const std::vector<int>& seq_indices) {
    const ForecasterConfig& cfg = model.config();
    if (seq_indices.empty()) {
        throw config_error("evaluate_forecaster: no sequences given");
    }
    std::vector<Eigen::MatrixXd> zhat;
    if (cfg.use_confounder) {
        if (factor == nullptr) {
            throw config_error("evaluate_forecaster: model uses the confounder channel but no "
                               "factor model was provided");
        }
        zhat.resize(ds.trajectories.size());
        for (int s : seq_indices) {
            zhat[static_cast<std::size_t>(s)] =
                factor->infer_confounders(ds.trajectories[static_cast<std::size_t>(s)]);
        }
    }
    std::vector<Window> windows =
        make_windows_for(ds, cfg.use_confounder ? &zhat : nullptr, cfg, seq_indices, 1);
    if (windows.empty()) {
        throw config_error("evaluate_forecaster: no evaluation windows (sl + pl > T?)");
    }
    model.normalizer().apply(windows);

    const Eigen::Index total = static_cast<Eigen::Index>(windows.size()) * cfg.pl;
    Eigen::VectorXd pred(total), truth(total);
    Eigen::Index at = 0;
    for (const Window& w : windows) {
        pred.segment(at, cfg.pl) = model.forecast(w);
        truth.segment(at, cfg.pl) = w.target;
        at += cfg.pl;
    }
    return compute_metrics(pred, truth);
}

void sort_results(std::vector<ExperimentResult>& results) {
    std::sort(results.begin(), results.end(),
              [](const ExperimentResult& a, const ExperimentResult& b) {
                  if (a.model != b.model) return a.model < b.model;
                  if (a.sl != b.sl) return a.sl < b.sl;
                  if (a.pl != b.pl) return a.pl < b.pl;
                  if (a.with_confounder != b.with_confounder) return a.with_confounder;
                  return a.seed < b.seed;
              });
}

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    if (n == 0) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    return (n % 2 == 1) ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

GridSummary summarize_results(const std::vector<ExperimentResult>& results) {
    // Cell key: (model, sl, pl). Seed-median MSE decides the cell winner.
    std::map<std::tuple<std::string, int, int>, std::pair<std::vector<double>, std::vector<double>>>
        cells;
    for (const ExperimentResult& r : results) {
        auto& cell = cells[{r.model, r.sl, r.pl}];
        (r.with_confounder ? cell.first : cell.second).push_back(r.metrics.mse);
    }
    GridSummary s;
    double delta_sum = 0.0;
    for (const auto& [key, cell] : cells) {
        (void)key;
        if (cell.first.empty() || cell.second.empty()) {
            continue;  // unpaired cell, nothing to compare
        }
        const double with_m = median(cell.first);
        const double without_m = median(cell.second);
        s.paired_cells += 1;
        if (with_m < without_m) {
            s.wins_with_confounder += 1;
        }
        delta_sum += with_m - without_m;
    }
    if (s.paired_cells > 0) {
        s.win_rate = static_cast<double>(s.wins_with_confounder) / s.paired_cells;
        s.mean_mse_delta = delta_sum / s.paired_cells;
    }
    return s;
}

GridOutputs run_experiment_grid(const Dataset& ds, const GridSpec& grid,
                                const FactorModelConfig& factor_cfg,
                                const ForecasterConfig& forecaster_base,
                                const ResultCallback& on_result) {
    ds.validate();
    if (ds.trajectories.empty()) {
        throw config_error("run_experiment_grid: dataset is empty");
    }
    if (grid.archs.empty() || grid.pls.empty() || grid.seeds.empty()) {
        throw config_error("run_experiment_grid: grid must name at least one architecture, "
                           "horizon and seed");
    }
    const Eigen::Index T = ds.steps();
    for (int pl : grid.pls) {
        if (pl < 1 || grid.sl < 1 || grid.sl + pl > T) {
            throw config_error("infeasible window: sl = " + std::to_string(grid.sl) +
                               ", pl = " + std::to_string(pl) + ", T = " + std::to_string(T));
        }
    }

    const double nan = std::numeric_limits<double>::quiet_NaN();
    const double gamma_a = ds.manifest.sim ? ds.manifest.sim->gamma_a : nan;
    const double gamma_y = ds.manifest.sim ? ds.manifest.sim->gamma_y : nan;
    const bool has_z = ds.has_ground_truth_z();

    GridOutputs out;

    // Stage 1: one factor model per seed, trained on the seed's training
    // split, with per-epoch recovery diagnostics on the held-out split.
    std::map<std::uint64_t, FactorModel> factors;
    for (std::uint64_t seed : grid.seeds) {
        FactorModelConfig fc = factor_cfg;
        fc.seed = seed;
        const SplitIndices split = split_by_sequence(ds.trajectories.size(), seed);
        if (split.train.empty() || split.test.empty()) {
            throw config_error("run_experiment_grid: dataset too small to split (n = " +
                               std::to_string(ds.trajectories.size()) + ")");
        }
        const Dataset train_ds = ds.subset(split.train);

        auto diag = [&](int epoch, double loss, const FactorModel& model) {
            double r2 = nan;
            if (has_z) {
                Eigen::Index total = 0;
                for (int s : split.test) {
                    total += ds.trajectories[static_cast<std::size_t>(s)].steps();
                }
                Eigen::VectorXd zh(total), zt(total);
                Eigen::Index at = 0;
                for (int s : split.test) {
                    const Trajectory& traj = ds.trajectories[static_cast<std::size_t>(s)];
                    zh.segment(at, traj.steps()) = model.infer_confounders(traj).col(0);
                    zt.segment(at, traj.steps()) = *traj.Z;
                    at += traj.steps();
                }
                r2 = aligned_r2(zh, zt).value;
            }
            out.diagnostics.push_back(FactorDiagnosticRow{seed, epoch, loss, r2});
        };
        FactorTrainResult trained = train_factor_model(train_ds, fc, diag);
        factors.emplace(seed, std::move(trained.model));
    }

    // Stage 2: paired forecaster cells, parallel across (arch, pl, seed).
    struct Job {
        Arch arch;
        int pl;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (Arch arch : grid.archs) {
        for (int pl : grid.pls) {
            for (std::uint64_t seed : grid.seeds) {
                jobs.push_back(Job{arch, pl, seed});
            }
        }
    }

    std::mutex mu;
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;

    auto worker = [&]() {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= jobs.size()) {
                return;
            }
            try {
                const Job& job = jobs[i];
                const FactorModel& factor = factors.at(job.seed);
                ForecasterConfig fc = forecaster_base;
                fc.arch = job.arch;
                fc.sl = grid.sl;
                fc.pl = job.pl;
                fc.seed = job.seed;

                ExperimentResult rows[2];
                for (int with = 1; with >= 0; --with) {
                    fc.use_confounder = (with == 1);
                    ForecastTrainResult trained = train_forecaster(ds, &factor, fc);
                    ExperimentResult& r = rows[with];
                    r.model = arch_name(job.arch);
                    r.sl = grid.sl;
                    r.pl = job.pl;
                    r.with_confounder = (with == 1);
                    r.seed = job.seed;
                    r.gamma_a = gamma_a;
                    r.gamma_y = gamma_y;
                    r.metrics = evaluate_forecaster(trained.model, ds, &factor,
                                                    trained.split.test);
                }
                std::lock_guard<std::mutex> lock(mu);
                for (const ExperimentResult& r : rows) {
                    out.results.push_back(r);
                    if (on_result) {
                        on_result(r);
                    }
                }
            } catch (...) {
                std::lock_guard<std::mutex> lock(mu);
                if (!first_error) {
                    first_error = std::current_exception();
                }
                next.store(jobs.size());
                return;
            }
        }
    };

    const int n_workers = std::max(1, std::min<int>(grid.parallel,
                                                    static_cast<int>(jobs.size())));
    if (n_workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(n_workers));
        for (int w = 0; w < n_workers; ++w) {
            pool.emplace_back(worker);
        }
        for (std::thread& t : pool) {
            t.join();
        }
    }
    if (first_error) {
        std::rethrow_exception(first_error);
    }

    sort_results(out.results);
    out.summary = summarize_results(out.results);
    return out;
}

std::string results_csv_header() {
    return "model,sl,pl,with_confounder,mse,mae,rmse,r2,seed,gamma_a,gamma_y";
}

std::string result_csv_row(const ExperimentResult& r) {
    std::string row = r.model;
    row += ',' + std::to_string(r.sl);
    row += ',' + std::to_string(r.pl);
    row += ',';
    row += (r.with_confounder ? '1' : '0');
    row += ',' + format_double(r.metrics.mse);
    row += ',' + format_double(r.metrics.mae);
    row += ',' + format_double(r.metrics.rmse);
    row += ',' + format_double(r.metrics.r2);
    row += ',' + std::to_string(r.seed);
    row += ',' + format_double(r.gamma_a);
    row += ',' + format_double(r.gamma_y);
    return row;
}

namespace {

std::ofstream open_out(const std::string& path) {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) {
        std::filesystem::create_directories(parent);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw error("cannot open '" + path + "' for writing");
    }
    return out;
}

}  // namespace

void write_results_csv(const std::vector<ExperimentResult>& results, const std::string& path) {
    std::ofstream out = open_out(path);
    out << results_csv_header() << '\n';
    for (const ExperimentResult& r : results) {
        out << result_csv_row(r) << '\n';
    }
    if (!out) {
        throw error("failed while writing '" + path + "'");
    }
}

void write_diagnostics_csv(const std::vector<FactorDiagnosticRow>& rows, std::uint64_t seed,
                           const std::string& path) {
    std::ofstream out = open_out(path);
    out << "epoch,factor_loss,aligned_r2\n";
    for (const FactorDiagnosticRow& row : rows) {
        if (row.seed != seed) {
            continue;
        }
        out << row.epoch << ',' << format_double(row.factor_loss) << ','
            << format_double(row.aligned_r2) << '\n';
    }
    if (!out) {
        throw error("failed while writing '" + path + "'");
    }
}

void write_summary(const GridSummary& s, const std::string& path) {
    std::ofstream out = open_out(path);
    out << "schema_version = " << kSchemaVersion << "\n";
    out << "paired_cells = " << s.paired_cells << "\n";
    out << "wins_with_confounder = " << s.wins_with_confounder << "\n";
    out << "win_rate = " << format_double(s.win_rate) << "\n";
    out << "mean_mse_delta = " << format_double(s.mean_mse_delta) << "\n";
    if (!out) {
        throw error("failed while writing '" + path + "'");
    }
}

}  // namespace deconf
