#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "deconf/numerics.hpp"

namespace deconf {

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kGeneratorVersion = "deconf 0.1.0";

struct SimConfig {
    int n_sequences = 100;
    int T = 60;           // kept time steps per sequence
    int k = 3;            // treatment/covariate dimension
    int p = 5;            // confounder lag order
    double gamma_a = 0.5; // confounder weight in the treatment assignment
    double gamma_y = 0.5; // confounder weight in the outcome
    double noise_std = 0.001;
    int burn_in = 20;
    std::uint64_t seed = 42;

    void validate() const;
};

// One coefficient draw defines the data-generating mechanism of a dataset.
struct Coefficients {
    std::vector<double> lambda;  // treatment-to-confounder weights, length p
    std::vector<double> beta;    // confounder autoregression weights, length p
};

struct Trajectory {
    Eigen::MatrixXd X;                  // T x k covariates
    Eigen::MatrixXd A;                  // T x k treatments
    std::optional<Eigen::VectorXd> Z;   // T ground-truth confounder (absent on ingested data)
    Eigen::VectorXd Y;                  // T outcomes; Y[t] holds the value generated as Y_{t+1}

    Eigen::Index steps() const { return X.rows(); }
    Eigen::Index dims() const { return X.cols(); }
};

struct DatasetManifest {
    int schema_version = kSchemaVersion;
    std::string generator = kGeneratorVersion;
    std::string kind = "simulated";  // "simulated" or "ingested"
    std::optional<SimConfig> sim;
    // Ingestion provenance and normalization constants, kept ordered so the
    // manifest serializes deterministically.
    std::map<std::string, std::string> extra;
};

struct Dataset {
    std::vector<Trajectory> trajectories;
    DatasetManifest manifest;

    Eigen::Index steps() const { return trajectories.empty() ? 0 : trajectories.front().steps(); }
    Eigen::Index dims() const { return trajectories.empty() ? 0 : trajectories.front().dims(); }
    bool has_ground_truth_z() const;

    // Checks uniform shapes and finiteness; throws invariant_error.
    void validate() const;

    // New dataset holding copies of the selected trajectories.
    Dataset subset(const std::vector<int>& indices) const;
};

// lambda_i ~ N(0, 0.5^2), beta_i ~ N(1 - i/p, (1/p)^2), i = 1..p.
Coefficients draw_coefficients(const SimConfig& cfg, Rng& rng);

// Simulates one trajectory of the confounded process. History before t=0 is
// zero; `burn_in` leading steps are simulated and discarded, and one extra
// covariate step is generated internally so the final outcome can use X_{t+1}.
Trajectory simulate_sequence(const SimConfig& cfg, const Coefficients& coeffs, Rng& rng);

// One coefficient draw shared across sequences; per-sequence child RNG streams.
Dataset generate_dataset(const SimConfig& cfg);

// CSV with header `seq_id,t,x_0..x_{k-1},a_0..a_{k-1},z,y` plus a key-value
// manifest sidecar at <path>.manifest. Lossless round-trip.
void write_dataset(const Dataset& ds, const std::string& csv_path);
Dataset read_dataset(const std::string& csv_path);

std::string manifest_path_for(const std::string& csv_path);

}  // namespace deconf
