#include "deconf/simgen.hpp"

#include <cmath>
#include <set>
#include <sstream>

namespace deconf {

void SimConfig::validate() const {
    if (n_sequences < 0) {
        throw config_error("n_sequences must be >= 0, got " + std::to_string(n_sequences));
    }
    if (T < 1) {
        throw config_error("T must be >= 1, got " + std::to_string(T));
    }
    if (k < 1) {
        throw config_error("k must be >= 1, got " + std::to_string(k));
    }
    if (p < 1) {
        throw config_error("p must be >= 1, got " + std::to_string(p));
    }
    if (!(gamma_a >= 0.0 && gamma_a <= 1.0)) {
        throw config_error("gamma_a must lie in [0,1], got " + std::to_string(gamma_a));
    }
    if (!(gamma_y >= 0.0 && gamma_y <= 1.0)) {
        throw config_error("gamma_y must lie in [0,1], got " + std::to_string(gamma_y));
    }
    if (noise_std < 0.0) {
        throw config_error("noise_std must be >= 0, got " + std::to_string(noise_std));
    }
    if (burn_in < 0) {
        throw config_error("burn_in must be >= 0, got " + std::to_string(burn_in));
    }
}

bool Dataset::has_ground_truth_z() const {
    if (trajectories.empty()) {
        return false;
    }
    for (const auto& traj : trajectories) {
        if (!traj.Z.has_value()) {
            return false;
        }
    }
    return true;
}

void Dataset::validate() const {
    for (std::size_t i = 0; i < trajectories.size(); ++i) {
        const Trajectory& t = trajectories[i];
        const Eigen::Index T = trajectories.front().steps();
        const Eigen::Index k = trajectories.front().dims();
        if (t.steps() != T || t.dims() != k) {
            std::ostringstream os;
            os << "dataset invariant violated: trajectory " << i << " has shape " << t.steps()
               << "x" << t.dims() << " but trajectory 0 has " << T << "x" << k;
            throw invariant_error(os.str());
        }
        if (t.A.rows() != t.steps() || t.A.cols() != t.dims() || t.Y.size() != t.steps() ||
            (t.Z && t.Z->size() != t.steps())) {
            throw invariant_error("dataset invariant violated: trajectory " + std::to_string(i) +
                                  " has inconsistent X/A/Z/Y lengths");
        }
        const bool finite = t.X.allFinite() && t.A.allFinite() && t.Y.allFinite() &&
                            (!t.Z || t.Z->allFinite());
        if (!finite) {
            throw invariant_error("dataset invariant violated: trajectory " + std::to_string(i) +
                                  " contains non-finite values");
        }
    }
}

Dataset Dataset::subset(const std::vector<int>& indices) const {
    Dataset out;
    out.manifest = manifest;
    out.trajectories.reserve(indices.size());
    for (int i : indices) {
        if (i < 0 || static_cast<std::size_t>(i) >= trajectories.size()) {
            throw config_error("subset index " + std::to_string(i) + " out of range");
        }
        out.trajectories.push_back(trajectories[static_cast<std::size_t>(i)]);
    }
    return out;
}

Coefficients draw_coefficients(const SimConfig& cfg, Rng& rng) {
    cfg.validate();
    Coefficients c;
    c.lambda.resize(static_cast<std::size_t>(cfg.p));
    c.beta.resize(static_cast<std::size_t>(cfg.p));
    const double p = static_cast<double>(cfg.p);
    for (int i = 1; i <= cfg.p; ++i) {
        c.lambda[static_cast<std::size_t>(i - 1)] = rng.normal(0.0, 0.5);
    }
    for (int i = 1; i <= cfg.p; ++i) {
        c.beta[static_cast<std::size_t>(i - 1)] = rng.normal(1.0 - i / p, 1.0 / p);
    }
    return c;
}

Trajectory simulate_sequence(const SimConfig& cfg, const Coefficients& coeffs, Rng& rng) {
    cfg.validate();
    if (coeffs.lambda.size() != static_cast<std::size_t>(cfg.p) ||
        coeffs.beta.size() != static_cast<std::size_t>(cfg.p)) {
        throw config_error("coefficient vectors must have length p = " + std::to_string(cfg.p));
    }

    const int k = cfg.k;
    const int p = cfg.p;
    const int total = cfg.burn_in + cfg.T + 1;  // one extra covariate step for the last outcome

    Eigen::MatrixXd X(total, k);
    Eigen::MatrixXd A(total, k);
    Eigen::VectorXd Z(total);
    Eigen::VectorXd mean_a(total);  // mean over treatment dimensions, feeds the Z recursion

    for (int t = 0; t < total; ++t) {
        for (int j = 0; j < k; ++j) {
            const double prev_a = (t == 0) ? 0.0 : A(t - 1, j);
            X(t, j) = prev_a + rng.normal(0.0, cfg.noise_std);
        }
        double z = 0.0;
        for (int i = 1; i <= p; ++i) {
            const double a_lag = (t - i >= 0) ? mean_a(t - i) : 0.0;
            const double z_lag = (t - i >= 0) ? Z(t - i) : 0.0;
            z += coeffs.lambda[static_cast<std::size_t>(i - 1)] * a_lag +
                 coeffs.beta[static_cast<std::size_t>(i - 1)] * z_lag;
        }
        Z(t) = z / static_cast<double>(p) + rng.normal(0.0, cfg.noise_std);
        for (int j = 0; j < k; ++j) {
            A(t, j) = cfg.gamma_a * Z(t) + (1.0 - cfg.gamma_a) * X(t, j) +
                      rng.normal(0.0, cfg.noise_std);
        }
        mean_a(t) = A.row(t).mean();
    }

    Trajectory traj;
    const int b = cfg.burn_in;
    traj.X = X.middleRows(b, cfg.T);
    traj.A = A.middleRows(b, cfg.T);
    traj.Z = Z.segment(b, cfg.T);
    traj.Y.resize(cfg.T);
    for (int t = 0; t < cfg.T; ++t) {
        traj.Y(t) = cfg.gamma_y * Z(b + t) + (1.0 - cfg.gamma_y) * X.row(b + t + 1).mean();
    }
    if (!traj.X.allFinite() || !traj.A.allFinite() || !traj.Z->allFinite() ||
        !traj.Y.allFinite()) {
        throw divergence_error("simulated trajectory contains non-finite values; "
                               "the drawn coefficients define an unstable process");
    }
    return traj;
}

Dataset generate_dataset(const SimConfig& cfg) {
    cfg.validate();
    Rng master(cfg.seed);
    Rng coeff_rng = master.child(0);
    const Coefficients coeffs = draw_coefficients(cfg, coeff_rng);

    Dataset ds;
    ds.manifest.kind = "simulated";
    ds.manifest.sim = cfg;
    ds.trajectories.reserve(static_cast<std::size_t>(cfg.n_sequences));
    for (int s = 0; s < cfg.n_sequences; ++s) {
        Rng seq_rng = master.child(static_cast<std::uint64_t>(s) + 1);
        ds.trajectories.push_back(simulate_sequence(cfg, coeffs, seq_rng));
    }
    ds.validate();
    return ds;
}

std::string manifest_path_for(const std::string& csv_path) {
    return csv_path + ".manifest";
}

}  // namespace deconf
