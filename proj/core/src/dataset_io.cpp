#include <filesystem>
#include <fstream>
#include <sstream>

#include "deconf/simgen.hpp"
#include "deconf/textio.hpp"

namespace deconf {

namespace {

void write_manifest(const DatasetManifest& m, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw error("cannot open '" + path + "' for writing");
    }
    out << "schema_version = " << m.schema_version << "\n";
    out << "generator = " << m.generator << "\n";
    out << "kind = " << m.kind << "\n";
    if (m.sim) {
        const SimConfig& c = *m.sim;
        out << "n_sequences = " << c.n_sequences << "\n";
        out << "T = " << c.T << "\n";
        out << "k = " << c.k << "\n";
        out << "p = " << c.p << "\n";
        out << "gamma_a = " << format_double(c.gamma_a) << "\n";
        out << "gamma_y = " << format_double(c.gamma_y) << "\n";
        out << "noise_std = " << format_double(c.noise_std) << "\n";
        out << "burn_in = " << c.burn_in << "\n";
        out << "seed = " << c.seed << "\n";
    }
    for (const auto& [key, value] : m.extra) {
        out << key << " = " << value << "\n";
    }
    if (!out) {
        throw error("failed while writing '" + path + "'");
    }
}

DatasetManifest read_manifest(const std::string& path) {
    DatasetManifest m;
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        m.kind = "unknown";
        return m;
    }
    std::map<std::string, std::string> kv;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string_view sv = trim(line);
        if (sv.empty() || sv.front() == '#') {
            continue;
        }
        const auto eq = sv.find('=');
        if (eq == std::string_view::npos) {
            throw parse_error(path + ":" + std::to_string(line_no) +
                              ": expected 'key = value', got '" + std::string(sv) + "'");
        }
        kv[std::string(trim(sv.substr(0, eq)))] = std::string(trim(sv.substr(eq + 1)));
    }

    auto take = [&](const char* key) -> std::optional<std::string> {
        auto it = kv.find(key);
        if (it == kv.end()) {
            return std::nullopt;
        }
        std::string v = it->second;
        kv.erase(it);
        return v;
    };

    if (auto v = take("schema_version")) {
        m.schema_version = static_cast<int>(parse_int(*v, path));
    }
    if (auto v = take("generator")) {
        m.generator = *v;
    }
    if (auto v = take("kind")) {
        m.kind = *v;
    }
    if (m.kind == "simulated") {
        SimConfig c;
        if (auto v = take("n_sequences")) c.n_sequences = static_cast<int>(parse_int(*v, path));
        if (auto v = take("T")) c.T = static_cast<int>(parse_int(*v, path));
        if (auto v = take("k")) c.k = static_cast<int>(parse_int(*v, path));
        if (auto v = take("p")) c.p = static_cast<int>(parse_int(*v, path));
        if (auto v = take("gamma_a")) c.gamma_a = parse_double(*v, path);
        if (auto v = take("gamma_y")) c.gamma_y = parse_double(*v, path);
        if (auto v = take("noise_std")) c.noise_std = parse_double(*v, path);
        if (auto v = take("burn_in")) c.burn_in = static_cast<int>(parse_int(*v, path));
        if (auto v = take("seed")) c.seed = parse_u64(*v, path);
        m.sim = c;
    }
    m.extra.insert(kv.begin(), kv.end());
    return m;
}

}  // namespace

void write_dataset(const Dataset& ds, const std::string& csv_path) {
    ds.validate();
    const auto parent = std::filesystem::path(csv_path).parent_path();
    if (!parent.empty()) {
        std::filesystem::create_directories(parent);
    }

    std::ofstream out(csv_path, std::ios::binary);
    if (!out) {
        throw error("cannot open '" + csv_path + "' for writing");
    }

    Eigen::Index k = ds.dims();
    if (ds.trajectories.empty() && ds.manifest.sim) {
        k = ds.manifest.sim->k;
    }
    out << "seq_id,t";
    for (Eigen::Index j = 0; j < k; ++j) {
        out << ",x_" << j;
    }
    for (Eigen::Index j = 0; j < k; ++j) {
        out << ",a_" << j;
    }
    out << ",z,y\n";

    for (std::size_t s = 0; s < ds.trajectories.size(); ++s) {
        const Trajectory& traj = ds.trajectories[s];
        for (Eigen::Index t = 0; t < traj.steps(); ++t) {
            out << s << ',' << t;
            for (Eigen::Index j = 0; j < k; ++j) {
                out << ',' << format_double(traj.X(t, j));
            }
            for (Eigen::Index j = 0; j < k; ++j) {
                out << ',' << format_double(traj.A(t, j));
            }
            out << ',';
            if (traj.Z) {
                out << format_double((*traj.Z)(t));
            }
            out << ',' << format_double(traj.Y(t)) << '\n';
        }
    }
    if (!out) {
        throw error("failed while writing '" + csv_path + "'");
    }
    out.close();
    write_manifest(ds.manifest, manifest_path_for(csv_path));
}

Dataset read_dataset(const std::string& csv_path) {
    std::ifstream in(csv_path, std::ios::binary);
    if (!in) {
        throw error("cannot open '" + csv_path + "' for reading");
    }

    std::string line;
    if (!std::getline(in, line)) {
        throw parse_error(csv_path + ":1: empty file, expected a header row");
    }
    const auto header = split(trim(line), ',');

    // Header layout: seq_id, t, x_0.., a_0.., z, y. The x_ block determines k.
    std::size_t pos = 0;
    auto expect = [&](const std::string& name) {
        if (pos >= header.size() || trim(header[pos]) != name) {
            throw parse_error(csv_path + ":1: missing required column '" + name + "'");
        }
        ++pos;
    };
    expect("seq_id");
    expect("t");
    Eigen::Index k = 0;
    while (pos < header.size() && trim(header[pos]) == "x_" + std::to_string(k)) {
        ++pos;
        ++k;
    }
    for (Eigen::Index j = 0; j < k; ++j) {
        expect("a_" + std::to_string(j));
    }
    expect("z");
    expect("y");
    if (pos != header.size()) {
        throw parse_error(csv_path + ":1: unexpected trailing column '" +
                          std::string(trim(header[pos])) + "'");
    }
    const std::size_t n_cols = header.size();

    Dataset ds;
    ds.manifest = read_manifest(manifest_path_for(csv_path));

    std::string current_id;
    bool have_current = false;
    std::vector<std::vector<double>> x_rows, a_rows;
    std::vector<double> z_rows, y_rows;
    bool z_present = false;

    auto flush = [&]() {
        if (!have_current) {
            return;
        }
        Trajectory traj;
        const Eigen::Index T = static_cast<Eigen::Index>(x_rows.size());
        traj.X.resize(T, k);
        traj.A.resize(T, k);
        traj.Y.resize(T);
        for (Eigen::Index t = 0; t < T; ++t) {
            for (Eigen::Index j = 0; j < k; ++j) {
                traj.X(t, j) = x_rows[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)];
                traj.A(t, j) = a_rows[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)];
            }
            traj.Y(t) = y_rows[static_cast<std::size_t>(t)];
        }
        if (z_present) {
            Eigen::VectorXd z(T);
            for (Eigen::Index t = 0; t < T; ++t) {
                z(t) = z_rows[static_cast<std::size_t>(t)];
            }
            traj.Z = std::move(z);
        }
        ds.trajectories.push_back(std::move(traj));
        x_rows.clear();
        a_rows.clear();
        z_rows.clear();
        y_rows.clear();
    };

    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        std::string_view sv = trim(line);
        if (sv.empty()) {
            continue;
        }
        const auto fields = split(sv, ',');
        if (fields.size() != n_cols) {
            throw invariant_error(csv_path + ":" + std::to_string(line_no) + ": row has " +
                                  std::to_string(fields.size()) + " fields but the header declares " +
                                  std::to_string(n_cols) +
                                  " (mixed dimensionality across rows)");
        }
        const std::string where = csv_path + ":" + std::to_string(line_no);
        const std::string seq_id(trim(fields[0]));
        if (!have_current || seq_id != current_id) {
            flush();
            current_id = seq_id;
            have_current = true;
            z_present = true;  // refined by the first row below
        }
        const long long t = parse_int(trim(fields[1]), where + ": column 't'");
        if (t != static_cast<long long>(x_rows.size())) {
            throw parse_error(where + ": column 't': expected consecutive step " +
                              std::to_string(x_rows.size()) + ", got " + std::to_string(t));
        }
        std::vector<double> xr(static_cast<std::size_t>(k)), ar(static_cast<std::size_t>(k));
        for (Eigen::Index j = 0; j < k; ++j) {
            xr[static_cast<std::size_t>(j)] = parse_double(
                trim(fields[2 + static_cast<std::size_t>(j)]),
                where + ": column 'x_" + std::to_string(j) + "'");
            ar[static_cast<std::size_t>(j)] = parse_double(
                trim(fields[2 + static_cast<std::size_t>(k + j)]),
                where + ": column 'a_" + std::to_string(j) + "'");
        }
        const std::string_view z_field = trim(fields[2 + 2 * static_cast<std::size_t>(k)]);
        if (x_rows.empty()) {
            z_present = !z_field.empty();
        }
        if (z_field.empty() != !z_present) {
            throw parse_error(where + ": column 'z': mixed empty and non-empty values "
                              "within one sequence");
        }
        if (z_present) {
            z_rows.push_back(parse_double(z_field, where + ": column 'z'"));
        }
        y_rows.push_back(parse_double(trim(fields.back()), where + ": column 'y'"));
        x_rows.push_back(std::move(xr));
        a_rows.push_back(std::move(ar));
    }
    flush();

    ds.validate();
    return ds;
}

}  // namespace deconf
