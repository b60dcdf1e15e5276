#pragma once

#include <Eigen/Dense>
#include <map>
#include <string>

namespace deconf {

// Structured-text model file: a kind tag, a [config] key-value section and one
// [param <name>] section per array. Writing uses shortest round-trip floats,
// so save/load reproduces every value exactly. A trailing [end] marker lets
// the loader reject truncated files outright.
struct Checkpoint {
    std::string kind;  // "factor" or "forecaster"
    std::map<std::string, std::string> config;
    std::map<std::string, Eigen::MatrixXd> params;
};

void write_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint read_checkpoint(const std::string& path);

}  // namespace deconf
