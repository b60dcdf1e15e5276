#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "deconf/factor_model.hpp"
#include "deconf/numerics.hpp"
#include "deconf/simgen.hpp"

namespace deconf {

enum class Arch { linear, mlp, attention };

std::string arch_name(Arch a);
Arch arch_from_name(const std::string& name);

struct ForecasterConfig {
    Arch arch = Arch::linear;
    int sl = 48;               // history window length
    int pl = 12;               // prediction horizon
    bool use_confounder = false;
    int hidden_dim = 32;       // mlp / attention width
    double learning_rate = 1e-3;
    int epochs = 200;
    int batch_size = 64;
    bool joint_mode = false;
    double reg_lambda = 0.1;   // confounder-drift penalty weight in joint mode
    std::uint64_t seed = 0;
    int train_stride = 1;      // offset stride for training windows only

    void validate() const;
};

// One supervised example: `inputs` rows are consecutive history steps with
// channel layout [x_0..x_{k-1}, a_0..a_{k-1}, z_0..z_{zd-1}], `target` the pl
// future outcomes. Input and target index ranges never overlap.
struct Window {
    Eigen::MatrixXd inputs;   // sl x d
    Eigen::VectorXd target;   // pl
    int seq_index = 0;
    int offset = 0;
};

// Windows at offsets 0, stride, 2*stride, ... <= T-sl-pl for every
// trajectory; per-trajectory count at stride 1 is max(0, T-sl-pl+1).
std::vector<Window> make_windows(const Dataset& ds,
                                 const std::vector<Eigen::MatrixXd>* zhat,
                                 const ForecasterConfig& cfg, int stride = 1);
std::vector<Window> make_windows_for(const Dataset& ds,
                                     const std::vector<Eigen::MatrixXd>* zhat,
                                     const ForecasterConfig& cfg,
                                     const std::vector<int>& seq_indices, int stride = 1);

// Per-channel z-score constants fitted on the training split; stored in the
// checkpoint so evaluation reproduces the training-time scaling.
struct Normalizer {
    Eigen::VectorXd mean;   // per input channel
    Eigen::VectorXd stdev;  // per input channel, zero-variance guarded to 1
    double y_mean = 0.0;
    double y_std = 1.0;

    void apply(std::vector<Window>& windows) const;
};

Normalizer fit_normalizer(const Dataset& ds, const std::vector<int>& seq_indices,
                          const std::vector<Eigen::MatrixXd>* zhat);

struct SplitIndices {
    std::vector<int> train, val, test;
};

// Seeded 70/15/15 split by sequence.
SplitIndices split_by_sequence(std::size_t n_sequences, std::uint64_t seed);

class Forecaster {
public:
    Forecaster(const ForecasterConfig& cfg, int input_dim);

    // Deterministic forward pass; no normalization is applied here.
    Eigen::VectorXd forecast(const Window& w) const;

    // Mean squared error over (window, horizon step); accumulates parameter
    // gradients, and per-window input gradients when `dinputs` is non-null.
    double loss_and_grad(std::span<const Window* const> batch,
                         std::vector<Eigen::MatrixXd>* dinputs = nullptr);

    const ForecasterConfig& config() const { return cfg_; }
    int input_dim() const { return input_dim_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    const Normalizer& normalizer() const { return norm_; }
    void set_normalizer(const Normalizer& n) { norm_ = n; }

private:
    struct Cache;
    Eigen::VectorXd forward(const Eigen::MatrixXd& inputs, Cache* cache) const;
    // Returns d loss / d inputs for one window given d loss / d output.
    Eigen::MatrixXd backward(const Eigen::MatrixXd& inputs, const Cache& cache,
                             const Eigen::VectorXd& dy, bool want_dinputs);

    ForecasterConfig cfg_;
    int input_dim_ = 0;
    ParamStore params_;
    Normalizer norm_;
    Eigen::MatrixXd pos_enc_;  // sl x hidden sinusoidal table (attention only)
};

struct ForecastTrainResult {
    Forecaster model;
    std::vector<double> loss_history;          // exactly cfg.epochs entries
    SplitIndices split;
    std::vector<Eigen::MatrixXd> zhat;         // per-sequence confounders (empty if unused)
    std::optional<FactorModel> joint_factor;   // tuned factor model (joint mode only)
};

// Two-stage by default: confounders are inferred once with the frozen factor
// model and the forecaster is fit on training windows. In joint mode the
// factor model is copied and tuned together with the forecaster under
// MSE + reg_lambda * mean ||zhat - zhat_anchor||^2, where the anchor is the
// stage-one inference output.
ForecastTrainResult train_forecaster(const Dataset& ds, const FactorModel* factor,
                                     const ForecasterConfig& cfg);

void save_forecaster(const Forecaster& model, const std::string& path);
Forecaster load_forecaster(const std::string& path);

}  // namespace deconf
