#include "deconf/checkpoint.hpp"

#include <filesystem>
#include <fstream>

#include "deconf/errors.hpp"
#include "deconf/textio.hpp"

namespace deconf {

namespace {
constexpr const char* kMagic = "deconf-checkpoint 1";
}

void write_checkpoint(const Checkpoint& ck, const std::string& path) {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) {
        std::filesystem::create_directories(parent);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw error("cannot open '" + path + "' for writing");
    }
    out << kMagic << "\n";
    out << "kind = " << ck.kind << "\n";
    out << "[config]\n";
    for (const auto& [key, value] : ck.config) {
        out << key << " = " << value << "\n";
    }
    for (const auto& [name, m] : ck.params) {
        out << "[param " << name << "]\n";
        out << m.rows() << " " << m.cols() << "\n";
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            for (Eigen::Index c = 0; c < m.cols(); ++c) {
                if (c > 0) {
                    out << ' ';
                }
                out << format_double(m(r, c));
            }
            out << '\n';
        }
    }
    out << "[end]\n";
    if (!out) {
        throw error("failed while writing '" + path + "'");
    }
}

Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw checkpoint_error("cannot open '" + path + "' for reading");
    }

    int line_no = 0;
    std::string line;
    auto next_line = [&](std::string& dst) {
        if (!std::getline(in, dst)) {
            throw checkpoint_error(path + ": truncated checkpoint (unexpected end of file at line " +
                                   std::to_string(line_no + 1) + ")");
        }
        ++line_no;
        while (!dst.empty() && (dst.back() == '\r' || dst.back() == '\n')) {
            dst.pop_back();
        }
    };

    next_line(line);
    if (line != kMagic) {
        throw checkpoint_error(path + ":1: not a deconf checkpoint (bad magic line)");
    }
    next_line(line);
    {
        std::string_view sv = trim(line);
        if (sv.substr(0, 4) != "kind") {
            throw checkpoint_error(path + ":2: expected 'kind = ...'");
        }
        const auto eq = sv.find('=');
        if (eq == std::string_view::npos) {
            throw checkpoint_error(path + ":2: expected 'kind = ...'");
        }
        line = std::string(trim(sv.substr(eq + 1)));
    }

    Checkpoint ck;
    ck.kind = line;

    next_line(line);
    if (trim(line) != "[config]") {
        throw checkpoint_error(path + ":" + std::to_string(line_no) + ": expected [config] section");
    }

    bool saw_end = false;
    std::string pending;  // a section header already consumed
    bool have_pending = false;

    // config body
    while (true) {
        next_line(line);
        std::string_view sv = trim(line);
        if (!sv.empty() && sv.front() == '[') {
            pending = std::string(sv);
            have_pending = true;
            break;
        }
        if (sv.empty()) {
            continue;
        }
        const auto eq = sv.find('=');
        if (eq == std::string_view::npos) {
            throw checkpoint_error(path + ":" + std::to_string(line_no) +
                                   ": expected 'key = value' in [config]");
        }
        ck.config[std::string(trim(sv.substr(0, eq)))] = std::string(trim(sv.substr(eq + 1)));
    }

    while (have_pending) {
        const std::string section = pending;
        have_pending = false;
        if (section == "[end]") {
            saw_end = true;
            break;
        }
        if (section.rfind("[param ", 0) != 0 || section.back() != ']') {
            throw checkpoint_error(path + ":" + std::to_string(line_no) +
                                   ": unexpected section '" + section + "'");
        }
        const std::string name = section.substr(7, section.size() - 8);
        if (ck.params.count(name) != 0) {
            throw checkpoint_error(path + ": duplicate parameter '" + name + "'");
        }
        next_line(line);
        const auto dims = split(trim(line), ' ');
        if (dims.size() != 2) {
            throw checkpoint_error(path + ":" + std::to_string(line_no) +
                                   ": expected '<rows> <cols>' for parameter '" + name + "'");
        }
        const auto rows = parse_int(dims[0], path + " param " + name);
        const auto cols = parse_int(dims[1], path + " param " + name);
        if (rows < 0 || cols < 0) {
            throw checkpoint_error(path + ": negative shape for parameter '" + name + "'");
        }
        Eigen::MatrixXd m(rows, cols);
        for (long long r = 0; r < rows; ++r) {
            next_line(line);
            const auto vals = split(trim(line), ' ');
            if (static_cast<long long>(vals.size()) != cols) {
                throw checkpoint_error(path + ":" + std::to_string(line_no) + ": parameter '" +
                                       name + "' row " + std::to_string(r) + " has " +
                                       std::to_string(vals.size()) + " values, expected " +
                                       std::to_string(cols));
            }
            for (long long c = 0; c < cols; ++c) {
                m(r, c) = parse_double(vals[static_cast<std::size_t>(c)],
                                       path + ":" + std::to_string(line_no));
            }
        }
        ck.params.emplace(name, std::move(m));

        next_line(line);
        std::string_view sv = trim(line);
        while (sv.empty()) {
            next_line(line);
            sv = trim(line);
        }
        if (sv.front() != '[') {
            throw checkpoint_error(path + ":" + std::to_string(line_no) +
                                   ": expected a section header, got '" + std::string(sv) + "'");
        }
        pending = std::string(sv);
        have_pending = true;
    }

    if (!saw_end) {
        throw checkpoint_error(path + ": truncated checkpoint (missing [end] marker)");
    }
    return ck;
}

}  // namespace deconf
