#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"

// End-to-end tests of the command-line tool; the binary path arrives via the
// DECONF_CLI environment variable set by ctest.

#ifndef DECONF_FIXTURE_DIR
#define DECONF_FIXTURE_DIR "tests/fixtures"
#endif

namespace {

namespace fs = std::filesystem;

std::string cli() {
    const char* env = std::getenv("DECONF_CLI");
    REQUIRE_MESSAGE(env != nullptr, "DECONF_CLI must point at the deconf binary");
    return env;
}

struct RunResult {
    int exit_code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

RunResult run(const std::string& args) {
    static int counter = 0;
    const std::string base =
        (fs::temp_directory_path() / ("deconf_cli_" + std::to_string(counter++))).string();
    const std::string out_file = base + ".out";
    const std::string err_file = base + ".err";
    const std::string cmd = cli() + " " + args + " > " + out_file + " 2> " + err_file;
    const int raw = std::system(cmd.c_str());
    RunResult r;
    r.exit_code = (raw == -1) ? -1 : WEXITSTATUS(raw);
    r.out = slurp(out_file);
    r.err = slurp(err_file);
    return r;
}

std::string fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir.string();
}

}  // namespace

TEST_CASE("--version prints the schema version") {
    const RunResult r = run("--version");
    CHECK(r.exit_code == 0);
    CHECK(r.out.find("deconf") != std::string::npos);
    CHECK(r.out.find("schema 1") != std::string::npos);
}

TEST_CASE("simulate writes byte-identical outputs for one seed") {
    const std::string d1 = fresh_dir("deconf_cli_sim1");
    const std::string d2 = fresh_dir("deconf_cli_sim2");
    const std::string args = "simulate --set sim.n_sequences=3 --set sim.T=12";
    CHECK(run(args + " --out " + d1).exit_code == 0);
    CHECK(run(args + " --out " + d2).exit_code == 0);
    CHECK(slurp(d1 + "/dataset.csv") == slurp(d2 + "/dataset.csv"));
    CHECK(slurp(d1 + "/dataset.csv.manifest") == slurp(d2 + "/dataset.csv.manifest"));
    CHECK(!slurp(d1 + "/dataset.csv").empty());
}

TEST_CASE("simulate echoes the default seed in the manifest") {
    const std::string dir = fresh_dir("deconf_cli_seed");
    const RunResult r = run("simulate --set sim.n_sequences=1 --set sim.T=5 --out " + dir);
    CHECK(r.exit_code == 0);
    CHECK(slurp(dir + "/dataset.csv.manifest").find("seed = 42") != std::string::npos);
}

TEST_CASE("invalid configuration values exit with code 1") {
    const std::string dir = fresh_dir("deconf_cli_bad");
    const RunResult r = run("simulate --set sim.gamma_a=1.5 --out " + dir);
    CHECK(r.exit_code == 1);
    CHECK(r.err.find("gamma_a") != std::string::npos);
}

TEST_CASE("unknown config keys exit with code 1") {
    const std::string dir = fresh_dir("deconf_cli_badkey");
    const RunResult r = run("simulate --set sim.bogus=1 --out " + dir);
    CHECK(r.exit_code == 1);
    CHECK(r.err.find("bogus") != std::string::npos);
}

TEST_CASE("gradcheck passes on a fresh build and lists four model families") {
    const RunResult r = run("gradcheck");
    CHECK(r.exit_code == 0);
    for (const char* family : {"factor", "linear", "mlp", "attention"}) {
        CHECK(r.out.find(family) != std::string::npos);
    }
}

TEST_CASE("a corrupted gradient fails gradcheck and names the layer") {
    const RunResult r = run("gradcheck --corrupt rnn.W_h");
    CHECK(r.exit_code != 0);
    CHECK(r.out.find("FAIL") != std::string::npos);
    CHECK(r.out.find("rnn.W_h") != std::string::npos);
}

TEST_CASE("experiment produces a full grid, identical under parallelism") {
    const std::string cfg_path =
        (fs::temp_directory_path() / "deconf_cli_grid.cfg").string();
    std::ofstream(cfg_path) << "[sim]\n"
                               "n_sequences = 10\n"
                               "T = 16\n"
                               "k = 2\n"
                               "p = 2\n"
                               "seed = 5\n"
                               "[factor]\n"
                               "epochs = 2\n"
                               "[forecaster]\n"
                               "epochs = 2\n"
                               "hidden_dim = 4\n"
                               "[grid]\n"
                               "archs = linear,mlp\n"
                               "pls = 2,4\n"
                               "seeds = 1,2\n"
                               "sl = 6\n";
    const std::string d1 = fresh_dir("deconf_cli_exp1");
    const std::string d2 = fresh_dir("deconf_cli_exp2");
    const RunResult serial = run("experiment --config " + cfg_path + " --out " + d1);
    CHECK(serial.exit_code == 0);
    const RunResult parallel =
        run("experiment --config " + cfg_path + " --parallel 2 --out " + d2);
    CHECK(parallel.exit_code == 0);

    const std::string csv = slurp(d1 + "/results.csv");
    CHECK(csv == slurp(d2 + "/results.csv"));
    // header + 2 archs x 2 horizons x 2 seeds x with/without
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 17);
    CHECK(csv.rfind("model,sl,pl,with_confounder,", 0) == 0);
    CHECK(fs::exists(d1 + "/summary.txt"));
    CHECK(fs::exists(d1 + "/diagnostics_seed1.csv"));
    CHECK(fs::exists(d1 + "/diagnostics_seed2.csv"));
    const std::string diag = slurp(d1 + "/diagnostics_seed1.csv");
    CHECK(diag.rfind("epoch,factor_loss,aligned_r2", 0) == 0);
}

TEST_CASE("experiment rejects infeasible windows before training") {
    const std::string dir = fresh_dir("deconf_cli_infeasible");
    const RunResult r = run("experiment --set sim.n_sequences=6 --set sim.T=10"
                            " --set grid.sl=48 --out " + dir);
    CHECK(r.exit_code == 1);
    CHECK(r.err.find("infeasible") != std::string::npos);
}

TEST_CASE("train, evaluate and ingest round out the pipeline") {
    const std::string dir = fresh_dir("deconf_cli_pipe");
    CHECK(run("simulate --set sim.n_sequences=10 --set sim.T=16 --set sim.k=2"
              " --set sim.p=2 --out " + dir).exit_code == 0);
    const std::string data = dir + "/dataset.csv";

    CHECK(run("train-factor --data " + data + " --set factor.epochs=3 --out " + dir)
              .exit_code == 0);
    CHECK(fs::exists(dir + "/factor.ckpt"));

    CHECK(run("train-forecaster --data " + data +
              " --set forecaster.sl=6 --set forecaster.pl=2 --set forecaster.epochs=2"
              " --set forecaster.use_confounder=true --factor " + dir + "/factor.ckpt" +
              " --out " + dir).exit_code == 0);
    CHECK(fs::exists(dir + "/forecaster.ckpt"));

    CHECK(run("evaluate --data " + data + " --model " + dir + "/forecaster.ckpt" +
              " --factor " + dir + "/factor.ckpt --out " + dir).exit_code == 0);
    const std::string metrics = slurp(dir + "/metrics.txt");
    CHECK(metrics.find("mse = ") != std::string::npos);
    CHECK(metrics.find("rmse = ") != std::string::npos);

    // evaluating without the factor model the checkpoint needs exits 1
    CHECK(run("evaluate --data " + data + " --model " + dir + "/forecaster.ckpt" +
              " --out " + dir).exit_code == 1);
}

TEST_CASE("ingest converts raw GPS logs into a dataset") {
    const std::string dir = fresh_dir("deconf_cli_ingest");
    const std::string fixture = std::string(DECONF_FIXTURE_DIR) + "/gps_fixture.csv";
    const RunResult r = run("ingest --input " + fixture +
                            " --set ingest.traj_len=12 --out " + dir);
    CHECK(r.exit_code == 0);
    const std::string csv = slurp(dir + "/dataset.csv");
    CHECK(csv.rfind("seq_id,t,x_0,x_1,x_2,a_0,a_1,a_2,z,y", 0) == 0);
    CHECK(slurp(dir + "/dataset.csv.manifest").find("kind = ingested") != std::string::npos);

    // missing --input is a validation error
    CHECK(run("ingest --out " + dir).exit_code == 1);
}

TEST_CASE("an interrupted experiment leaves a valid partial results CSV") {
    const std::string cfg_path =
        (fs::temp_directory_path() / "deconf_cli_slow.cfg").string();
    std::ofstream(cfg_path) << "[sim]\n"
                               "n_sequences = 60\n"
                               "T = 40\n"
                               "k = 2\n"
                               "p = 2\n"
                               "seed = 5\n"
                               "[factor]\n"
                               "epochs = 2\n"
                               "[forecaster]\n"
                               "epochs = 40\n"
                               "hidden_dim = 16\n"
                               "[grid]\n"
                               "archs = attention\n"
                               "pls = 4,6,8\n"
                               "seeds = 1,2,3\n"
                               "sl = 16\n";
    const std::string dir = fresh_dir("deconf_cli_partial");
    // Kill the run early; rows are flushed per finished cell, so whatever
    // made it to disk must still be a parseable CSV with the right header.
    const std::string cmd = "timeout -s KILL 3 " + cli() + " experiment --config " + cfg_path +
                            " --out " + dir + " > /dev/null 2>&1";
    const int killed = std::system(cmd.c_str());
    (void)killed;
    const std::string csv = slurp(dir + "/results.csv");
    REQUIRE(!csv.empty());
    CHECK(csv.rfind("model,sl,pl,with_confounder,", 0) == 0);
    // every line is complete: 11 columns, 10 commas
    std::size_t start = 0;
    while (start < csv.size()) {
        const std::size_t end = csv.find('\n', start);
        REQUIRE(end != std::string::npos);  // file ends with a newline
        const std::string line = csv.substr(start, end - start);
        CHECK(std::count(line.begin(), line.end(), ',') == 10);
        start = end + 1;
    }
}

TEST_CASE("DECONF_OUT_DIR provides the default output directory") {
    const std::string dir = fresh_dir("deconf_cli_envout");
    const std::string cmd = "DECONF_OUT_DIR=" + dir + " " + cli() +
                            " simulate --set sim.n_sequences=1 --set sim.T=5 > /dev/null 2>&1";
    const int raw = std::system(cmd.c_str());
    CHECK(WEXITSTATUS(raw) == 0);
    CHECK(fs::exists(dir + "/dataset.csv"));
}
