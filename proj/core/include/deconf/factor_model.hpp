#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "deconf/numerics.hpp"
#include "deconf/simgen.hpp"

namespace deconf {

struct FactorModelConfig {
    int hidden_dim = 16;
    int z_dim = 1;
    double learning_rate = 1e-3;
    int epochs = 100;
    int batch_size = 32;
    std::uint64_t seed = 0;
    double init_scale = 0.1;

    void validate() const;
};

// Recurrent confounder-inference model with k parameter-disjoint treatment
// heads. The hidden state at step t consumes (X_t, A_t), so the inferred
// confounder is a filtered estimate: a function of observations at steps
// <= t, never of anything later.
class FactorModel {
public:
    FactorModel(int k, const FactorModelConfig& cfg);

    // T x z_dim series of inferred confounders for one trajectory.
    Eigen::MatrixXd infer_confounders(const Trajectory& traj) const;

    // Per-step treatment predictions from (zhat, X) only; T x k.
    Eigen::MatrixXd predict_treatments(const Eigen::MatrixXd& zhat,
                                       const Eigen::MatrixXd& X) const;

    // Mean squared treatment-reconstruction error over (seq, t, j) for the
    // given trajectories; accumulates analytic gradients into params().
    double loss_and_grad(std::span<const Trajectory* const> batch);
    double loss_and_grad(const std::vector<Trajectory>& trajectories);

    // Forward pass that also accumulates externally supplied gradients
    // d loss / d zhat into params(); used by joint forecaster training.
    Eigen::MatrixXd infer_with_cache(const Trajectory& traj, Eigen::MatrixXd& hidden_out) const;
    void backprop_confounders(const Trajectory& traj, const Eigen::MatrixXd& hidden,
                              const Eigen::MatrixXd& dzhat);

    int k() const { return k_; }
    const FactorModelConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

private:
    int k_;
    FactorModelConfig cfg_;
    ParamStore params_;
};

using FactorEpochCallback =
    std::function<void(int epoch, double loss, const FactorModel& model)>;

struct FactorTrainResult {
    FactorModel model;
    std::vector<double> loss_history;  // exactly cfg.epochs entries
};

FactorTrainResult train_factor_model(const Dataset& ds, const FactorModelConfig& cfg,
                                     const FactorEpochCallback& on_epoch = {});

// Pearson correlation matrix of the per-dimension treatment residuals
// A - Ahat pooled over all sequences and steps. Diagonal entries are 1, or 0
// for residual columns with zero variance. With zero_confounder set, the
// confounder input to the heads is forced to zero (the ablation used by the
// factorization diagnostic).
Eigen::MatrixXd residual_cross_correlation(const FactorModel& model, const Dataset& ds,
                                           bool zero_confounder = false);

void save_factor_model(const FactorModel& model, const std::string& path);
FactorModel load_factor_model(const std::string& path);

}  // namespace deconf
