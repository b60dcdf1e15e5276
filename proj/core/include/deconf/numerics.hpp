#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>

#include "deconf/errors.hpp"

namespace deconf {

// Seeded pseudo-random stream. Same seed gives the same draw sequence within
// one build of this library; cross-platform bit compatibility is not promised.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t seed() const { return seed_; }

    // Draw from N(mean, stddev^2). stddev == 0 returns mean exactly without
    // touching the engine; stddev < 0 is invalid.
    double normal(double mean, double stddev);
    double standard_normal() { return normal(0.0, 1.0); }

    // Uniform draw on [lo, hi).
    double uniform(double lo, double hi);

    std::uint64_t next_u64() { return engine_(); }

    // Independent derived stream; used for per-sequence / per-model seeding.
    Rng child(std::uint64_t stream) const;

    std::mt19937_64& engine() { return engine_; }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

// One named parameter array and its gradient. Vectors are stored as n x 1.
struct Param {
    Eigen::MatrixXd value;
    Eigen::MatrixXd grad;
};

// Named dense parameter arrays with parallel gradients. Iteration order is
// the lexicographic name order, which keeps optimizer updates deterministic.
class ParamStore {
public:
    // Allocates a zero-initialized parameter; name must be fresh.
    Eigen::MatrixXd& add(const std::string& name, Eigen::Index rows, Eigen::Index cols = 1);

    Param& at(const std::string& name);
    const Param& at(const std::string& name) const;
    bool has(const std::string& name) const { return params_.count(name) != 0; }

    std::size_t size() const { return params_.size(); }
    std::size_t value_count() const;

    void zero_grads();

    // Name of the first parameter holding a non-finite value/gradient, or
    // empty when everything is finite.
    std::string first_nonfinite_value() const;
    std::string first_nonfinite_grad() const;

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

private:
    std::map<std::string, Param> params_;
};

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adaptive-moment optimizer with bias correction. Gradients are left
// untouched by step(); the caller clears them between steps.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    void step(ParamStore& params);

    std::int64_t step_count() const { return step_count_; }
    const AdamConfig& config() const { return cfg_; }

private:
    struct Moments {
        Eigen::MatrixXd m;
        Eigen::MatrixXd v;
    };
    AdamConfig cfg_;
    std::int64_t step_count_ = 0;
    std::map<std::string, Moments> moments_;
};

// Evaluates a loss over the store's current values and accumulates the
// analytic gradient into the store (grads are zeroed by the caller first).
using LossFn = std::function<double(ParamStore&)>;

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    Eigen::Index worst_row = 0;
    Eigen::Index worst_col = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

// Central-difference check of every parameter entry against the analytic
// gradient produced by `loss`. Relative error per entry is
// |a - n| / max(|a|, |n|, 1e-8).
GradCheckReport grad_check_report(const LossFn& loss, ParamStore& params, double eps);
double grad_check(const LossFn& loss, ParamStore& params, double eps);

// W x + b with conformance checking; the error message names both shapes.
Eigen::VectorXd affine(const Eigen::MatrixXd& W, const Eigen::VectorXd& x,
                       const Eigen::VectorXd& b);

}  // namespace deconf
