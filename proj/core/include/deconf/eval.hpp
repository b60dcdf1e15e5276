#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "deconf/factor_model.hpp"
#include "deconf/forecaster.hpp"
#include "deconf/simgen.hpp"

namespace deconf {

struct MetricReport {
    double mse = 0.0;
    double mae = 0.0;
    double rmse = 0.0;
    double r2 = 0.0;       // NaN when r2_defined is false
    bool r2_defined = true;
    long n = 0;
};

// mse / mae / rmse / R^2 over paired vectors. R^2 is the coefficient of
// determination about the truth mean and is flagged undefined (NaN) for
// zero-variance truth rather than silently reported as 0.
MetricReport compute_metrics(const Eigen::VectorXd& pred, const Eigen::VectorXd& truth);

struct AlignedR2Result {
    double value = 0.0;
    bool degenerate = false;
};

// R^2 of the ordinary-least-squares fit z ~ a*zhat + b. Latent confounders
// are identifiable only up to affine transformation, so the score is
// invariant to scaling and shifting of zhat.
AlignedR2Result aligned_r2(const Eigen::VectorXd& zhat, const Eigen::VectorXd& z);

struct ExperimentResult {
    std::string model;
    int sl = 0;
    int pl = 0;
    bool with_confounder = false;
    MetricReport metrics;
    std::uint64_t seed = 0;
    double gamma_a = 0.0;  // NaN for ingested data
    double gamma_y = 0.0;
};

struct FactorDiagnosticRow {
    std::uint64_t seed = 0;
    int epoch = 0;
    double factor_loss = 0.0;
    double aligned_r2 = 0.0;  // NaN when no ground-truth confounder exists
};

struct GridSpec {
    std::vector<Arch> archs{Arch::linear, Arch::mlp, Arch::attention};
    std::vector<int> pls{12, 24, 36, 48};
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    int sl = 48;
    int parallel = 1;
};

struct GridSummary {
    int paired_cells = 0;
    int wins_with_confounder = 0;  // cells whose seed-median MSE is lower with the confounder
    double win_rate = 0.0;
    double mean_mse_delta = 0.0;   // mean over cells of (median with - median without)
};

struct GridOutputs {
    std::vector<ExperimentResult> results;  // canonically sorted
    std::vector<FactorDiagnosticRow> diagnostics;
    GridSummary summary;
};

using ResultCallback = std::function<void(const ExperimentResult&)>;

// Table-1 protocol: per seed, train the factor model once on the training
// split, then per (arch, pl) train paired forecasters with and without the
// confounder channel on identical splits and seeds and evaluate both on the
// held-out test split. Emits per-epoch factor diagnostics per seed. Cells
// run on `grid.parallel` worker threads; `on_result` fires as cells finish.
GridOutputs run_experiment_grid(const Dataset& ds, const GridSpec& grid,
                                const FactorModelConfig& factor_cfg,
                                const ForecasterConfig& forecaster_base,
                                const ResultCallback& on_result = {});

// Pooled test-split metrics for a trained forecaster (normalized scale).
MetricReport evaluate_forecaster(const Forecaster& model, const Dataset& ds,
                                 const FactorModel* factor,
                                 const std::vector<int>& seq_indices);

// Canonical ordering used for all emitted results.
void sort_results(std::vector<ExperimentResult>& results);
GridSummary summarize_results(const std::vector<ExperimentResult>& results);

std::string results_csv_header();
std::string result_csv_row(const ExperimentResult& r);
void write_results_csv(const std::vector<ExperimentResult>& results, const std::string& path);
void write_diagnostics_csv(const std::vector<FactorDiagnosticRow>& rows, std::uint64_t seed,
                           const std::string& path);
void write_summary(const GridSummary& s, const std::string& path);

}  // namespace deconf
