#include "deconf/numerics.hpp"

#include <cmath>
#include <sstream>

namespace deconf {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

}  // namespace

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

double Rng::normal(double mean, double stddev) {
    if (stddev < 0.0) {
        throw config_error("normal draw requires stddev >= 0, got " + std::to_string(stddev));
    }
    if (stddev == 0.0) {
        return mean;
    }
    std::normal_distribution<double> dist(mean, stddev);
    return dist(engine_);
}

double Rng::uniform(double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    return dist(engine_);
}

Rng Rng::child(std::uint64_t stream) const {
    return Rng(splitmix64(seed_ ^ splitmix64(stream + 1)));
}

Eigen::MatrixXd& ParamStore::add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    if (params_.count(name) != 0) {
        throw config_error("parameter '" + name + "' already exists");
    }
    Param& p = params_[name];
    p.value = Eigen::MatrixXd::Zero(rows, cols);
    p.grad = Eigen::MatrixXd::Zero(rows, cols);
    return p.value;
}

Param& ParamStore::at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) {
        throw config_error("unknown parameter '" + name + "'");
    }
    return it->second;
}

const Param& ParamStore::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) {
        throw config_error("unknown parameter '" + name + "'");
    }
    return it->second;
}

std::size_t ParamStore::value_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : params_) {
        (void)name;
        n += static_cast<std::size_t>(p.value.size());
    }
    return n;
}

void ParamStore::zero_grads() {
    for (auto& [name, p] : params_) {
        (void)name;
        p.grad.setZero();
    }
}

std::string ParamStore::first_nonfinite_value() const {
    for (const auto& [name, p] : params_) {
        if (!p.value.allFinite()) {
            return name;
        }
    }
    return {};
}

std::string ParamStore::first_nonfinite_grad() const {
    for (const auto& [name, p] : params_) {
        if (!p.grad.allFinite()) {
            return name;
        }
    }
    return {};
}

void Adam::step(ParamStore& params) {
    step_count_ += 1;
    const double t = static_cast<double>(step_count_);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t);

    for (auto& [name, p] : params) {
        if (!p.grad.allFinite()) {
            throw divergence_error("non-finite gradient for parameter '" + name + "'");
        }
        auto [it, fresh] = moments_.try_emplace(name);
        Moments& mo = it->second;
        if (fresh) {
            mo.m = Eigen::MatrixXd::Zero(p.value.rows(), p.value.cols());
            mo.v = Eigen::MatrixXd::Zero(p.value.rows(), p.value.cols());
        }
        if (mo.m.rows() != p.value.rows() || mo.m.cols() != p.value.cols()) {
            throw shape_error("moment shape for '" + name + "' does not match parameter");
        }
        mo.m = cfg_.beta1 * mo.m + (1.0 - cfg_.beta1) * p.grad;
        mo.v = cfg_.beta2 * mo.v.array().matrix() +
               (1.0 - cfg_.beta2) * p.grad.array().square().matrix();
        p.value.array() -= cfg_.learning_rate * (mo.m.array() / bc1) /
                           ((mo.v.array() / bc2).sqrt() + cfg_.eps);
        if (!p.value.allFinite()) {
            throw divergence_error("non-finite value for parameter '" + name +
                                   "' after optimizer step " + std::to_string(step_count_));
        }
    }
}

GradCheckReport grad_check_report(const LossFn& loss, ParamStore& params, double eps) {
    if (eps <= 0.0) {
        throw config_error("grad_check requires eps > 0");
    }
    params.zero_grads();
    const double base = loss(params);
    if (!std::isfinite(base)) {
        throw divergence_error("grad_check: loss is non-finite at the evaluation point");
    }

    // Snapshot the analytic gradient before the perturbed evaluations
    // overwrite it.
    std::map<std::string, Eigen::MatrixXd> analytic;
    for (const auto& [name, p] : params) {
        analytic[name] = p.grad;
    }

    GradCheckReport report;
    for (auto& [name, p] : params) {
        const Eigen::MatrixXd& a = analytic[name];
        for (Eigen::Index c = 0; c < p.value.cols(); ++c) {
            for (Eigen::Index r = 0; r < p.value.rows(); ++r) {
                const double saved = p.value(r, c);
                p.value(r, c) = saved + eps;
                params.zero_grads();
                const double fp = loss(params);
                p.value(r, c) = saved - eps;
                params.zero_grads();
                const double fm = loss(params);
                p.value(r, c) = saved;
                if (!std::isfinite(fp) || !std::isfinite(fm)) {
                    throw divergence_error("grad_check: loss is non-finite near '" + name + "'");
                }
                const double numeric = (fp - fm) / (2.0 * eps);
                const double an = a(r, c);
                const double denom = std::max({std::abs(an), std::abs(numeric), 1e-8});
                const double rel = std::abs(an - numeric) / denom;
                if (rel > report.max_rel_error) {
                    report.max_rel_error = rel;
                    report.worst_param = name;
                    report.worst_row = r;
                    report.worst_col = c;
                    report.analytic = an;
                    report.numeric = numeric;
                }
            }
        }
    }

    // Restore the analytic gradients so the store is left as loss() produced it.
    params.zero_grads();
    for (auto& [name, p] : params) {
        p.grad = analytic[name];
    }
    return report;
}

double grad_check(const LossFn& loss, ParamStore& params, double eps) {
    return grad_check_report(loss, params, eps).max_rel_error;
}

Eigen::VectorXd affine(const Eigen::MatrixXd& W, const Eigen::VectorXd& x,
                       const Eigen::VectorXd& b) {
    if (W.cols() != x.size() || W.rows() != b.size()) {
        std::ostringstream os;
        os << "affine shape mismatch: W is " << W.rows() << "x" << W.cols() << ", x is "
           << x.size() << ", b is " << b.size();
        throw shape_error(os.str());
    }
    return W * x + b;
}

}  // namespace deconf
