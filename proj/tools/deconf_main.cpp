// Command-line front end for the deconf toolkit: dataset simulation and
// ingestion, factor/forecaster training, evaluation, the with/without
// confounder experiment grid, and the gradient self-check.
//
// Exit codes: 0 success, 1 validation error, 2 runtime/divergence error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "deconf/eval.hpp"
#include "deconf/factor_model.hpp"
#include "deconf/forecaster.hpp"
#include "deconf/ingest.hpp"
#include "deconf/run_config.hpp"
#include "deconf/simgen.hpp"
#include "deconf/textio.hpp"

namespace {

using namespace deconf;

constexpr const char* kVersionString = "deconf 0.1.0 (schema 1)";
constexpr double kGradCheckTolerance = 1e-4;

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "Run configuration file (key = value sections)");
    cmd->add_option("--out", args.out_dir, "Output directory");
    cmd->add_option("--set", args.sets, "Override a config value, e.g. --set sim.gamma_a=0.5");
}

RunConfig resolve_config(const CommonArgs& args) {
    RunConfig cfg;
    if (!args.config_path.empty()) {
        cfg = load_run_config(args.config_path);
    }
    for (const std::string& s : args.sets) {
        apply_config_override(cfg, s);
    }
    if (!args.out_dir.empty()) {
        cfg.out_dir = args.out_dir;
    }
    if (cfg.out_dir.empty()) {
        if (const char* env = std::getenv("DECONF_OUT_DIR")) {
            cfg.out_dir = env;
        } else {
            cfg.out_dir = ".";
        }
    }
    return cfg;
}

std::string join_path(const std::string& dir, const std::string& name) {
    return (std::filesystem::path(dir) / name).string();
}

Dataset load_or_simulate(const RunConfig& cfg) {
    if (!cfg.data_path.empty()) {
        return read_dataset(cfg.data_path);
    }
    std::cerr << "no dataset path given, simulating from [sim] config\n";
    return generate_dataset(cfg.sim);
}

int cmd_simulate(const CommonArgs& args) {
    const RunConfig cfg = resolve_config(args);
    cfg.sim.validate();
    const Dataset ds = generate_dataset(cfg.sim);
    const std::string path = join_path(cfg.out_dir, "dataset.csv");
    write_dataset(ds, path);
    std::cerr << "wrote " << path << " (" << ds.trajectories.size() << " sequences, T = "
              << ds.steps() << ", k = " << ds.dims() << ", seed = " << cfg.sim.seed << ")\n";
    return 0;
}

int cmd_ingest(const CommonArgs& args, const std::string& input_flag) {
    RunConfig cfg = resolve_config(args);
    if (!input_flag.empty()) {
        cfg.input_path = input_flag;
    }
    if (cfg.input_path.empty()) {
        throw config_error("ingest requires --input or [paths] input");
    }
    const Dataset ds = ingest_dataset(cfg.input_path, cfg.ingest);
    const std::string path = join_path(cfg.out_dir, "dataset.csv");
    write_dataset(ds, path);
    std::cerr << "wrote " << path << " (" << ds.trajectories.size() << " trajectories of length "
              << ds.steps() << ")\n";
    return 0;
}

void write_factor_diagnostics(const std::vector<FactorDiagnosticRow>& rows, std::uint64_t seed,
                              const std::string& out_dir) {
    write_diagnostics_csv(rows, seed,
                          join_path(out_dir, "diagnostics_seed" + std::to_string(seed) + ".csv"));
}

int cmd_train_factor(const CommonArgs& args, const std::string& data_flag) {
    RunConfig cfg = resolve_config(args);
    if (!data_flag.empty()) {
        cfg.data_path = data_flag;
    }
    const Dataset ds = load_or_simulate(cfg);
    const bool has_z = ds.has_ground_truth_z();

    std::vector<FactorDiagnosticRow> diag;
    auto cb = [&](int epoch, double loss, const FactorModel& model) {
        double r2 = std::numeric_limits<double>::quiet_NaN();
        if (has_z) {
            Eigen::Index total = 0;
            for (const Trajectory& t : ds.trajectories) {
                total += t.steps();
            }
            Eigen::VectorXd zh(total), zt(total);
            Eigen::Index at = 0;
            for (const Trajectory& t : ds.trajectories) {
                zh.segment(at, t.steps()) = model.infer_confounders(t).col(0);
                zt.segment(at, t.steps()) = *t.Z;
                at += t.steps();
            }
            r2 = aligned_r2(zh, zt).value;
        }
        diag.push_back(FactorDiagnosticRow{cfg.factor.seed, epoch, loss, r2});
    };

    FactorTrainResult result = train_factor_model(ds, cfg.factor, cb);
    const std::string ckpt = join_path(cfg.out_dir, "factor.ckpt");
    save_factor_model(result.model, ckpt);
    write_factor_diagnostics(diag, cfg.factor.seed, cfg.out_dir);
    std::cerr << "wrote " << ckpt << " (final loss " << format_double(result.loss_history.back())
              << ")\n";
    return 0;
}

int cmd_train_forecaster(const CommonArgs& args, const std::string& data_flag,
                         const std::string& factor_flag) {
    RunConfig cfg = resolve_config(args);
    if (!data_flag.empty()) {
        cfg.data_path = data_flag;
    }
    if (!factor_flag.empty()) {
        cfg.factor_path = factor_flag;
    }
    const Dataset ds = load_or_simulate(cfg);

    std::optional<FactorModel> factor;
    if (!cfg.factor_path.empty()) {
        factor = load_factor_model(cfg.factor_path);
    }
    if (cfg.forecaster.use_confounder && !factor) {
        throw config_error("use_confounder is set: pass --factor or [paths] factor");
    }

    ForecastTrainResult result =
        train_forecaster(ds, factor ? &*factor : nullptr, cfg.forecaster);
    const std::string ckpt = join_path(cfg.out_dir, "forecaster.ckpt");
    save_forecaster(result.model, ckpt);
    if (result.joint_factor) {
        save_factor_model(*result.joint_factor, join_path(cfg.out_dir, "factor_joint.ckpt"));
    }
    std::cerr << "wrote " << ckpt << " (final loss " << format_double(result.loss_history.back())
              << ")\n";
    return 0;
}

int cmd_evaluate(const CommonArgs& args, const std::string& data_flag,
                 const std::string& model_flag, const std::string& factor_flag) {
    RunConfig cfg = resolve_config(args);
    if (!data_flag.empty()) {
        cfg.data_path = data_flag;
    }
    if (!model_flag.empty()) {
        cfg.model_path = model_flag;
    }
    if (!factor_flag.empty()) {
        cfg.factor_path = factor_flag;
    }
    if (cfg.model_path.empty()) {
        throw config_error("evaluate requires --model or [paths] model");
    }
    const Dataset ds = load_or_simulate(cfg);
    const Forecaster model = load_forecaster(cfg.model_path);

    std::optional<FactorModel> factor;
    if (!cfg.factor_path.empty()) {
        factor = load_factor_model(cfg.factor_path);
    }

    // Evaluation uses the held-out split implied by the model's stored seed,
    // matching the training-time protocol.
    const SplitIndices split = split_by_sequence(ds.trajectories.size(), model.config().seed);
    const std::vector<int>& eval_set = split.test.empty() ? split.train : split.test;
    const MetricReport m = evaluate_forecaster(model, ds, factor ? &*factor : nullptr, eval_set);

    const std::string path = join_path(cfg.out_dir, "metrics.txt");
    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw error("cannot open '" + path + "' for writing");
    }
    out << "mse = " << format_double(m.mse) << "\n";
    out << "mae = " << format_double(m.mae) << "\n";
    out << "rmse = " << format_double(m.rmse) << "\n";
    out << "r2 = " << format_double(m.r2) << "\n";
    out << "n = " << m.n << "\n";
    std::cerr << "wrote " << path << " (mse " << format_double(m.mse) << ")\n";
    return 0;
}

int cmd_experiment(const CommonArgs& args, const std::string& data_flag, int parallel_flag) {
    RunConfig cfg = resolve_config(args);
    if (!data_flag.empty()) {
        cfg.data_path = data_flag;
    }
    if (parallel_flag > 0) {
        cfg.grid.parallel = parallel_flag;
    }
    const Dataset ds = load_or_simulate(cfg);

    std::filesystem::create_directories(cfg.out_dir);
    const std::string results_path = join_path(cfg.out_dir, "results.csv");

    // Stream rows as cells finish so an interrupted run leaves a valid CSV;
    // the file is rewritten in canonical order at the end.
    std::ofstream stream(results_path, std::ios::binary);
    if (!stream) {
        throw error("cannot open '" + results_path + "' for writing");
    }
    stream << results_csv_header() << '\n';
    stream.flush();
    auto on_result = [&stream](const ExperimentResult& r) {
        stream << result_csv_row(r) << '\n';
        stream.flush();
    };

    const GridOutputs out = run_experiment_grid(ds, cfg.grid, cfg.factor, cfg.forecaster,
                                                on_result);
    stream.close();
    write_results_csv(out.results, results_path);
    for (std::uint64_t seed : cfg.grid.seeds) {
        write_factor_diagnostics(out.diagnostics, seed, cfg.out_dir);
    }
    write_summary(out.summary, join_path(cfg.out_dir, "summary.txt"));

    std::cerr << "wrote " << results_path << " (" << out.results.size() << " rows), summary: "
              << out.summary.wins_with_confounder << "/" << out.summary.paired_cells
              << " cells favor the confounder\n";
    return 0;
}

// One gradient check line per model family. The hidden --corrupt hook adds a
// constant to matching analytic gradients so the failure path is testable.
int cmd_gradcheck(const std::string& corrupt) {
    struct Entry {
        std::string name;
        GradCheckReport report;
    };
    std::vector<Entry> entries;

    auto checked = [&](const std::string& name, ParamStore& params, const LossFn& base) {
        LossFn fn = base;
        if (!corrupt.empty()) {
            fn = [&base, &corrupt](ParamStore& ps) {
                const double loss = base(ps);
                for (auto& [pname, p] : ps) {
                    if (pname.find(corrupt) != std::string::npos) {
                        p.grad.array() += 1.0;
                    }
                }
                return loss;
            };
        }
        entries.push_back(Entry{name, grad_check_report(fn, params, 1e-4)});
    };

    // Factor model on a tiny simulated dataset.
    {
        SimConfig sc;
        sc.n_sequences = 2;
        sc.T = 6;
        sc.k = 2;
        sc.p = 2;
        sc.gamma_a = 0.6;
        sc.gamma_y = 0.6;
        sc.burn_in = 4;
        sc.seed = 7;
        const Dataset ds = generate_dataset(sc);

        FactorModelConfig fc;
        fc.hidden_dim = 4;
        fc.z_dim = 1;
        fc.seed = 3;
        fc.init_scale = 0.4;
        FactorModel model(2, fc);
        checked("factor", model.params(), [&](ParamStore&) {
            return model.loss_and_grad(ds.trajectories);
        });
    }

    // Forecaster architectures on random windows.
    {
        Rng rng(11);
        const int sl = 6, pl = 2, d = 4;
        std::vector<Window> windows(4);
        for (Window& w : windows) {
            w.inputs.resize(sl, d);
            for (Eigen::Index r = 0; r < sl; ++r) {
                for (Eigen::Index c = 0; c < d; ++c) {
                    w.inputs(r, c) = rng.normal(0.0, 1.0);
                }
            }
            w.target.resize(pl);
            for (Eigen::Index i = 0; i < pl; ++i) {
                w.target(i) = rng.normal(0.0, 1.0);
            }
        }
        std::vector<const Window*> batch;
        for (const Window& w : windows) {
            batch.push_back(&w);
        }

        for (Arch arch : {Arch::linear, Arch::mlp, Arch::attention}) {
            ForecasterConfig fc;
            fc.arch = arch;
            fc.sl = sl;
            fc.pl = pl;
            fc.hidden_dim = 4;
            fc.seed = 19;
            Forecaster model(fc, d);
            checked(arch_name(arch), model.params(), [&](ParamStore&) {
                return model.loss_and_grad(std::span<const Window* const>(batch));
            });
        }
    }

    bool ok = true;
    for (const Entry& e : entries) {
        const bool pass = e.report.max_rel_error < kGradCheckTolerance;
        ok = ok && pass;
        std::printf("%-10s max_rel_err=%.3e  worst=%s[%ld,%ld]  %s\n", e.name.c_str(),
                    e.report.max_rel_error, e.report.worst_param.c_str(),
                    static_cast<long>(e.report.worst_row), static_cast<long>(e.report.worst_col),
                    pass ? "PASS" : "FAIL");
    }
    return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Deconfounded multivariate time-series forecasting toolkit"};
    app.set_version_flag("--version", kVersionString);
    app.require_subcommand(1);

    CommonArgs sim_args, ingest_args, tf_args, tfc_args, eval_args, exp_args;
    std::string ingest_input, tf_data, tfc_data, tfc_factor, eval_data, eval_model, eval_factor,
        exp_data, gc_corrupt;
    int exp_parallel = 0;

    CLI::App* c_sim = app.add_subcommand("simulate", "Generate a synthetic confounded dataset");
    add_common(c_sim, sim_args);

    CLI::App* c_ing = app.add_subcommand("ingest", "Convert raw GPS trajectories to a dataset");
    add_common(c_ing, ingest_args);
    c_ing->add_option("--input", ingest_input, "Raw trajectory CSV (entity_id,timestamp,lat,lon)");

    CLI::App* c_tf = app.add_subcommand("train-factor", "Train the confounder factor model");
    add_common(c_tf, tf_args);
    c_tf->add_option("--data", tf_data, "Dataset CSV");

    CLI::App* c_tfc = app.add_subcommand("train-forecaster", "Train a forecaster");
    add_common(c_tfc, tfc_args);
    c_tfc->add_option("--data", tfc_data, "Dataset CSV");
    c_tfc->add_option("--factor", tfc_factor, "Factor model checkpoint");

    CLI::App* c_ev = app.add_subcommand("evaluate", "Evaluate a trained forecaster");
    add_common(c_ev, eval_args);
    c_ev->add_option("--data", eval_data, "Dataset CSV");
    c_ev->add_option("--model", eval_model, "Forecaster checkpoint");
    c_ev->add_option("--factor", eval_factor, "Factor model checkpoint");

    CLI::App* c_exp = app.add_subcommand("experiment",
                                         "Run the with/without-confounder experiment grid");
    add_common(c_exp, exp_args);
    c_exp->add_option("--data", exp_data, "Dataset CSV (omit to simulate from [sim])");
    c_exp->add_option("--parallel", exp_parallel, "Worker threads for grid cells");

    CLI::App* c_gc = app.add_subcommand("gradcheck",
                                        "Finite-difference check of every backward pass");
    c_gc->add_option("--corrupt", gc_corrupt, "Corrupt gradients of matching parameters")
        ->group("");  // test hook, hidden from help

    CLI11_PARSE(app, argc, argv);

    try {
        if (c_sim->parsed()) return cmd_simulate(sim_args);
        if (c_ing->parsed()) return cmd_ingest(ingest_args, ingest_input);
        if (c_tf->parsed()) return cmd_train_factor(tf_args, tf_data);
        if (c_tfc->parsed()) return cmd_train_forecaster(tfc_args, tfc_data, tfc_factor);
        if (c_ev->parsed()) return cmd_evaluate(eval_args, eval_data, eval_model, eval_factor);
        if (c_exp->parsed()) return cmd_experiment(exp_args, exp_data, exp_parallel);
        if (c_gc->parsed()) return cmd_gradcheck(gc_corrupt);
    } catch (const config_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const parse_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const invariant_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const shape_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const checkpoint_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
