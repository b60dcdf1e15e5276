#include "deconf/run_config.hpp"

#include <fstream>

#include "deconf/textio.hpp"

namespace deconf {

namespace {

bool parse_bool(std::string_view v, const std::string& context) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw config_error(context + ": expected a boolean (true/false), got '" + std::string(v) +
                       "'");
}

int to_int(std::string_view v, const std::string& context) {
    return static_cast<int>(parse_int(v, context));
}

void assign(RunConfig& cfg, const std::string& section, const std::string& key,
            std::string_view value, const std::string& context) {
    const std::string where = context + ": [" + section + "] " + key;
    if (section == "sim") {
        SimConfig& c = cfg.sim;
        if (key == "n_sequences") c.n_sequences = to_int(value, where);
        else if (key == "T") c.T = to_int(value, where);
        else if (key == "k") c.k = to_int(value, where);
        else if (key == "p") c.p = to_int(value, where);
        else if (key == "gamma_a") c.gamma_a = parse_double(value, where);
        else if (key == "gamma_y") c.gamma_y = parse_double(value, where);
        else if (key == "noise_std") c.noise_std = parse_double(value, where);
        else if (key == "burn_in") c.burn_in = to_int(value, where);
        else if (key == "seed") c.seed = parse_u64(value, where);
        else throw config_error(where + ": unknown key");
    } else if (section == "factor") {
        FactorModelConfig& c = cfg.factor;
        if (key == "hidden_dim") c.hidden_dim = to_int(value, where);
        else if (key == "z_dim") c.z_dim = to_int(value, where);
        else if (key == "learning_rate") c.learning_rate = parse_double(value, where);
        else if (key == "epochs") c.epochs = to_int(value, where);
        else if (key == "batch_size") c.batch_size = to_int(value, where);
        else if (key == "seed") c.seed = parse_u64(value, where);
        else if (key == "init_scale") c.init_scale = parse_double(value, where);
        else throw config_error(where + ": unknown key");
    } else if (section == "forecaster") {
        ForecasterConfig& c = cfg.forecaster;
        if (key == "arch") c.arch = arch_from_name(std::string(value));
        else if (key == "sl") c.sl = to_int(value, where);
        else if (key == "pl") c.pl = to_int(value, where);
        else if (key == "use_confounder") c.use_confounder = parse_bool(value, where);
        else if (key == "hidden_dim") c.hidden_dim = to_int(value, where);
        else if (key == "learning_rate") c.learning_rate = parse_double(value, where);
        else if (key == "epochs") c.epochs = to_int(value, where);
        else if (key == "batch_size") c.batch_size = to_int(value, where);
        else if (key == "joint_mode") c.joint_mode = parse_bool(value, where);
        else if (key == "reg_lambda") c.reg_lambda = parse_double(value, where);
        else if (key == "seed") c.seed = parse_u64(value, where);
        else if (key == "train_stride") c.train_stride = to_int(value, where);
        else throw config_error(where + ": unknown key");
    } else if (section == "grid") {
        GridSpec& g = cfg.grid;
        if (key == "archs") {
            g.archs.clear();
            for (auto item : split(value, ',')) {
                g.archs.push_back(arch_from_name(std::string(trim(item))));
            }
        } else if (key == "pls") {
            g.pls.clear();
            for (auto item : split(value, ',')) {
                g.pls.push_back(to_int(trim(item), where));
            }
        } else if (key == "seeds") {
            g.seeds.clear();
            for (auto item : split(value, ',')) {
                g.seeds.push_back(parse_u64(trim(item), where));
            }
        } else if (key == "sl") {
            g.sl = to_int(value, where);
        } else if (key == "parallel") {
            g.parallel = to_int(value, where);
        } else {
            throw config_error(where + ": unknown key");
        }
    } else if (section == "ingest") {
        IngestConfig& c = cfg.ingest;
        if (key == "gap_threshold_s") c.gap_threshold_s = to_int(value, where);
        else if (key == "min_trip_len") c.min_trip_len = to_int(value, where);
        else if (key == "resample_interval_s") c.resample_interval_s = to_int(value, where);
        else if (key == "traj_len") c.traj_len = to_int(value, where);
        else throw config_error(where + ": unknown key");
    } else if (section == "paths") {
        if (key == "data") cfg.data_path = std::string(value);
        else if (key == "input") cfg.input_path = std::string(value);
        else if (key == "out") cfg.out_dir = std::string(value);
        else if (key == "factor") cfg.factor_path = std::string(value);
        else if (key == "model") cfg.model_path = std::string(value);
        else throw config_error(where + ": unknown key");
    } else {
        throw config_error(context + ": unknown section [" + section + "]");
    }
}

}  // namespace

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw config_error("cannot open config file '" + path + "'");
    }
    RunConfig cfg;
    std::string section;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string_view sv = trim(line);
        if (sv.empty() || sv.front() == '#' || sv.front() == ';') {
            continue;
        }
        const std::string where = path + ":" + std::to_string(line_no);
        if (sv.front() == '[') {
            if (sv.back() != ']') {
                throw config_error(where + ": malformed section header '" + std::string(sv) + "'");
            }
            section = std::string(trim(sv.substr(1, sv.size() - 2)));
            if (section.empty()) {
                throw config_error(where + ": empty section name");
            }
            continue;
        }
        const auto eq = sv.find('=');
        if (eq == std::string_view::npos) {
            throw config_error(where + ": expected 'key = value', got '" + std::string(sv) + "'");
        }
        if (section.empty()) {
            throw config_error(where + ": key outside any [section]");
        }
        assign(cfg, section, std::string(trim(sv.substr(0, eq))), trim(sv.substr(eq + 1)),
               where);
    }
    return cfg;
}

void apply_config_override(RunConfig& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) {
        throw config_error("--set expects section.key=value, got '" + assignment + "'");
    }
    const std::string dotted(trim(std::string_view(assignment).substr(0, eq)));
    const auto dot = dotted.find('.');
    if (dot == std::string::npos) {
        throw config_error("--set expects section.key=value, got '" + assignment + "'");
    }
    assign(cfg, dotted.substr(0, dot), dotted.substr(dot + 1),
           trim(std::string_view(assignment).substr(eq + 1)), "--set " + assignment);
}

}  // namespace deconf
