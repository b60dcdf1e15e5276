#pragma once

#include <string>

#include "deconf/eval.hpp"
#include "deconf/factor_model.hpp"
#include "deconf/forecaster.hpp"
#include "deconf/ingest.hpp"
#include "deconf/simgen.hpp"

namespace deconf {

// Union of all module configurations plus paths, loaded from a sectioned
// key = value file. Every field has a default except the paths; unknown
// sections or keys are rejected.
struct RunConfig {
    SimConfig sim;
    FactorModelConfig factor;
    ForecasterConfig forecaster;
    GridSpec grid;
    IngestConfig ingest;

    std::string data_path;    // [paths] data   — dataset CSV
    std::string input_path;   // [paths] input  — raw GPS CSV
    std::string out_dir;      // [paths] out    — output directory
    std::string factor_path;  // [paths] factor — factor checkpoint
    std::string model_path;   // [paths] model  — forecaster checkpoint
};

RunConfig load_run_config(const std::string& path);

// Applies one `section.key=value` assignment (the CLI --set flag).
void apply_config_override(RunConfig& cfg, const std::string& assignment);

}  // namespace deconf
