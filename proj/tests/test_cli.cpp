// End-to-end smoke of the fedsim CLI: every subcommand, exit codes, and the
// on-disk artifacts. Pass the binary path as argv[1].

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

int g_failures = 0;
std::string g_cli;

void expect(bool ok, const std::string& what) {
    std::cout << (ok ? "ok   " : "FAIL ") << what << "\n";
    if (!ok) ++g_failures;
}

int run(const std::string& args) {
    const std::string cmd = g_cli + " " + args + " > /tmp/fedsim_cli_out.txt 2>&1";
    const int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

std::string last_output() {
    std::ifstream in("/tmp/fedsim_cli_out.txt");
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) return {};
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path fresh(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        std::cerr << "usage: test_cli <fedsim binary>\n";
        return 2;
    }
    g_cli = argv[1];

    const fs::path work = fresh("fedsim_cli_work");
    const fs::path cfg_path = work / "experiment.json";
    {
        std::ofstream f(cfg_path);
        f << R"({
  "federation": {"kind": "cluster", "m": 4, "K": 2, "client_size": 40,
                 "input_dim": 4, "num_classes": 3, "seed": 12},
  "model": {"kind": "logistic"},
  "method": {"name": "fedmerge", "d": 3, "eta_w": 0.05},
  "server": {"rounds": 6, "eta_loc": 0.05, "local_epochs": 1, "batch_size": 8},
  "eval_every": 2,
  "snapshot_every": 3,
  "output_dir": ")" << (work / "out_a").string() << R"(",
  "seeds": [1, 2]
})";
    }

    // run
    expect(run("run --config " + cfg_path.string() + " --threads 1") == 0, "run exits 0");
    expect(fs::exists(work / "out_a" / "summary.json"), "summary.json written");
    expect(fs::exists(work / "out_a" / "federation.json"), "federation.json written");
    expect(fs::exists(work / "out_a" / "seed_1" / "metrics.csv"), "per-seed metrics.csv written");
    expect(fs::exists(work / "out_a" / "seed_1" / "weights_round_6.csv"),
           "final weight snapshot written");
    expect(fs::exists(work / "out_a" / "seed_1" / "checkpoint" / "manifest.json"),
           "soup checkpoint written");

    // determinism through the CLI, including --threads 4 and --out override
    expect(run("run --config " + cfg_path.string() + " --threads 1 --out " +
               (work / "out_b").string()) == 0,
           "rerun exits 0");
    expect(run("run --config " + cfg_path.string() + " --threads 4 --out " +
               (work / "out_c").string()) == 0,
           "threaded rerun exits 0");
    const auto m1 = slurp(work / "out_a" / "seed_1" / "metrics.csv");
    expect(!m1.empty() && m1 == slurp(work / "out_b" / "seed_1" / "metrics.csv"),
           "metrics.csv byte-identical across reruns");
    expect(m1 == slurp(work / "out_c" / "seed_1" / "metrics.csv"),
           "metrics.csv byte-identical across thread counts");

    // --seed restricts the seed list
    expect(run("run --config " + cfg_path.string() + " --seed 7 --out " +
               (work / "out_seed7").string()) == 0,
           "seed override exits 0");
    expect(fs::exists(work / "out_seed7" / "seed_7") && !fs::exists(work / "out_seed7" / "seed_1"),
           "seed override runs exactly that seed");

    // invalid config: field-level message, exit code 2
    const fs::path bad_path = work / "bad.json";
    {
        std::ofstream f(bad_path);
        f << R"({"federation": {"kind": "cluster", "K": 2}, "model": {}, "method": {}})";
    }
    expect(run("run --config " + bad_path.string()) == 2, "invalid config exits 2");
    expect(last_output().find("federation.m") != std::string::npos,
           "error names the offending field");

    // gradcheck
    expect(run("gradcheck") == 0, "gradcheck passes");
    expect(run("gradcheck --inject-fault w_softmax") == 1, "injected fault fails gradcheck");
    expect(last_output().find("FAIL logit_gradient_softmax") != std::string::npos,
           "fault localized to the corrupted formula");

    // weights-export
    expect(run("weights-export " + (work / "out_a" / "seed_1").string() + " --round 6") == 0,
           "weights-export exits 0");
    expect(last_output().find("block_structure_score") != std::string::npos,
           "weights-export reports a score");
    expect(run("weights-export " + (work / "out_a" / "seed_1").string() + " --round 99") == 1,
           "missing snapshot is an error");
    expect(last_output().find("available rounds") != std::string::npos,
           "error lists available rounds");

    // ablate-fixed
    expect(run("ablate-fixed --config " + cfg_path.string() + " --fractions 0.5 1.0 --out " +
               (work / "ablate").string()) == 0,
           "ablate-fixed exits 0");
    expect(fs::exists(work / "ablate" / "ablation.json"), "ablation.json written");

    // descent
    expect(run("descent --config " + cfg_path.string() + " --rounds 8 --probes 4 --out " +
               (work / "descent").string()) == 0,
           "descent exits 0");
    expect(fs::exists(work / "descent" / "descent.csv"), "descent.csv written");
    expect(last_output().find("violation_fraction") != std::string::npos,
           "descent reports a violation fraction");

    // gen-data, then consume the CSVs through a csv-kind federation
    expect(run("gen-data --config " + cfg_path.string() + " --out " + (work / "data").string()) ==
               0,
           "gen-data exits 0");
    expect(fs::exists(work / "data" / "client_000.csv") &&
               fs::exists(work / "data" / "federation.json"),
           "gen-data writes CSVs and a manifest");

    const fs::path csv_cfg = work / "csv_experiment.json";
    {
        std::ofstream f(csv_cfg);
        f << R"({
  "federation": {"kind": "csv", "paths": [)"
          << '"' << (work / "data" / "client_000.csv").string() << "\",\""
          << (work / "data" / "client_001.csv").string() << R"("], "seed": 3},
  "model": {"kind": "mlp", "input_dim": 4, "hidden_dim": 8, "num_classes": 3},
  "method": {"name": "fedavg"},
  "server": {"rounds": 2, "batch_size": 8},
  "output_dir": ")" << (work / "out_csv").string() << R"(",
  "seeds": [1]
})";
    }
    expect(run("run --config " + csv_cfg.string()) == 0, "csv federation run exits 0");

    std::cout << (g_failures == 0 ? "test_cli: all checks passed"
                                  : "test_cli: " + std::to_string(g_failures) + " checks failed")
              << "\n";
    return g_failures == 0 ? 0 : 1;
}
