// fedsim: deterministic federated-learning simulator with server-side model
// merging, standard baselines and verification subcommands.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedsim/harness.hpp"

namespace {

int env_threads() {
    if (const char* v = std::getenv("FEDSIM_THREADS")) {
        const int t = std::atoi(v);
        if (t >= 1) return t;
    }
    return 1;
}

std::string resolve_out(const std::string& cli_out, const std::string& config_out) {
    if (!cli_out.empty()) return cli_out;
    if (const char* v = std::getenv("FEDSIM_OUT")) return v;
    return config_out;
}

fedsim::ExperimentConfig load_config(const std::string& path, std::uint64_t seed_override,
                                     bool has_seed_override) {
    fedsim::ExperimentConfig cfg = fedsim::load_experiment_config(path);
    if (has_seed_override) cfg.seeds = {seed_override};
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"fedsim: federated learning with a merged model soup"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_override;
    std::uint64_t seed_override = 0;
    int threads = env_threads();

    // --- run ---------------------------------------------------------------
    auto* run = app.add_subcommand("run", "run an experiment over all configured seeds");
    run->add_option("--config", config_path, "experiment config (JSON)")->required();
    run->add_option("--seed", seed_override, "run only this seed");
    run->add_option("--threads", threads, "worker threads (results are thread-count independent)");
    run->add_option("--out", out_override, "output directory override");

    // --- gradcheck ----------------------------------------------------------
    auto* gc = app.add_subcommand("gradcheck",
                                  "verify server gradient formulas against finite differences");
    std::size_t gc_m = 3, gc_d = 3, gc_dim = 4, gc_classes = 3;
    std::string gc_fault = "none";
    gc->add_option("--m", gc_m, "clients (<= 3 recommended)");
    gc->add_option("--d", gc_d, "global models");
    gc->add_option("--input-dim", gc_dim, "feature dimension");
    gc->add_option("--classes", gc_classes, "class count");
    gc->add_option("--inject-fault", gc_fault,
                   "flip one formula's sign: theta|w_unconstrained|aggregation|w_softmax")
        ->capture_default_str();

    // --- weights-export -----------------------------------------------------
    auto* we = app.add_subcommand("weights-export",
                                  "emit a weight snapshot and its cluster-structure score");
    std::string we_dir;
    std::size_t we_round = 0;
    std::string we_out;
    we->add_option("run_dir", we_dir, "seed output directory")->required();
    we->add_option("--round", we_round, "snapshot round")->required();
    we->add_option("--out", we_out, "write the matrix to this CSV file");

    // --- ablate-fixed ---------------------------------------------------------
    auto* ab = app.add_subcommand("ablate-fixed",
                                  "compare dynamic merging weights against frozen subsets");
    std::vector<double> ab_fractions{0.2, 0.5, 1.0};
    ab->add_option("--config", config_path, "experiment config (JSON)")->required();
    ab->add_option("--fractions", ab_fractions, "subset fractions in (0,1]")
        ->capture_default_str();
    ab->add_option("--threads", threads, "worker threads");
    ab->add_option("--out", out_override, "output directory override");

    // --- descent --------------------------------------------------------------
    auto* de = app.add_subcommand("descent",
                                  "objective descent check (one local epoch, full batches, full "
                                  "participation)");
    std::size_t de_rounds = 100, de_probes = 16;
    double de_eta_over_l = 0.1, de_eta_abs = 0.0;
    de->add_option("--config", config_path, "experiment config (JSON)")->required();
    de->add_option("--rounds", de_rounds, "rounds to check")->capture_default_str();
    de->add_option("--probes", de_probes, "smoothness probe count")->capture_default_str();
    de->add_option("--eta-over-l", de_eta_over_l, "step size as a multiple of 1/L-hat")
        ->capture_default_str();
    de->add_option("--eta", de_eta_abs, "fixed step size (overrides --eta-over-l)");
    de->add_option("--out", out_override, "output directory override");

    // --- gen-data ---------------------------------------------------------------
    auto* gd = app.add_subcommand("gen-data", "generate a federation and export it as CSV");
    gd->add_option("--config", config_path, "experiment config (JSON)")->required();
    gd->add_option("--out", out_override, "output directory override");

    bool has_seed = false;
    run->callback([&] { has_seed = run->count("--seed") > 0; });

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) {
            const auto cfg = load_config(config_path, seed_override, has_seed);
            const std::string out = resolve_out(out_override, cfg.output_dir);
            const auto summary = fedsim::run_experiment(cfg, out, threads);
            std::cout << "wrote " << out << "/summary.json\n";
            std::cout << "mean best test acc: "
                      << summary.json.at("mean").at("best_test_acc").get<double>() << "\n";
            return 0;
        }

        if (*gc) {
            fedsim::GradcheckOptions opts;
            opts.m = gc_m;
            opts.d = gc_d;
            opts.input_dim = gc_dim;
            opts.num_classes = gc_classes;
            if (gc_fault == "theta") opts.fault = fedsim::GradcheckFault::theta;
            else if (gc_fault == "w_unconstrained")
                opts.fault = fedsim::GradcheckFault::w_unconstrained;
            else if (gc_fault == "aggregation") opts.fault = fedsim::GradcheckFault::aggregation;
            else if (gc_fault == "w_softmax") opts.fault = fedsim::GradcheckFault::w_softmax;
            else if (gc_fault != "none") {
                std::cerr << "unknown fault '" << gc_fault << "'\n";
                return 2;
            }
            const auto result = fedsim::run_gradcheck(opts);
            for (const auto& e : result.entries)
                std::cout << (e.worst_rel_err <= result.tolerance ? "PASS " : "FAIL ")
                          << e.formula << "  worst rel err " << e.worst_rel_err << "\n";
            std::cout << (result.passed() ? "gradcheck: all formulas within "
                                          : "gradcheck: FAILED at tolerance ")
                      << result.tolerance << "\n";
            return result.passed() ? 0 : 1;
        }

        if (*we) {
            const auto exported = fedsim::weights_export(we_dir, we_round);
            if (!we_out.empty()) fedsim::write_weights_csv(we_out, exported.matrix);
            std::cout << "rows: " << exported.matrix.size() << " cols: "
                      << (exported.matrix.empty() ? 0 : exported.matrix[0].size()) << "\n";
            if (exported.score)
                std::cout << "block_structure_score: " << *exported.score << "\n";
            else
                std::cout << "block_structure_score: unavailable (no ground-truth clusters)\n";
            return 0;
        }

        if (*ab) {
            const auto cfg = fedsim::load_experiment_config(config_path);
            const std::string out = resolve_out(out_override, cfg.output_dir + "_ablation");
            const auto table = fedsim::ablate_fixed_weights(cfg, ab_fractions, out, threads);
            std::cout << "variant,mean_best_test_acc,std_best_test_acc\n";
            for (const auto& row : table)
                std::cout << row.variant << ',' << row.mean_best_test_acc << ','
                          << row.std_best_test_acc << "\n";
            return 0;
        }

        if (*de) {
            const auto cfg = fedsim::load_experiment_config(config_path);
            const auto clients = fedsim::build_federation(cfg.federation);
            fedsim::DescentOptions opts;
            opts.d = cfg.method.d;
            opts.rounds = de_rounds;
            opts.probes = de_probes;
            opts.eta_over_l = de_eta_over_l;
            opts.eta_abs = de_eta_abs;
            opts.seed = cfg.seeds.front();
            opts.mode = cfg.method.weight_mode;
            const auto report = fedsim::descent_check(clients, cfg.model, opts);

            const std::string out = resolve_out(out_override, cfg.output_dir + "_descent");
            std::filesystem::create_directories(out);
            std::ofstream csv(std::filesystem::path(out) / "descent.csv");
            csv << "# schema=1\n";
            csv << "round,objective,grad_sq_norm,sum_client_grad_sq,required_decrease,"
                   "actual_decrease,bound_rhs,violated,running_avg\n";
            for (std::size_t t = 0; t < report.rows.size(); ++t) {
                const auto& r = report.rows[t];
                csv << r.round << ',' << fedsim::format_double(r.objective) << ','
                    << fedsim::format_double(r.grad_sq_norm) << ','
                    << fedsim::format_double(r.sum_client_grad_sq) << ','
                    << fedsim::format_double(r.required_decrease) << ','
                    << fedsim::format_double(r.actual_decrease) << ','
                    << fedsim::format_double(r.bound_rhs) << ',' << (r.violated ? 1 : 0) << ','
                    << fedsim::format_double(report.running_avg[t]) << "\n";
            }
            std::cout << "L_hat: " << report.l_hat << "\n";
            std::cout << "eta: " << report.eta << "\n";
            std::cout << "violation_fraction: " << report.violation_fraction << "\n";
            std::cout << "fitted_c_over_Td: " << report.fitted_c << "\n";
            if (!report.running_avg.empty())
                std::cout << "final_running_avg_grad_sq: " << report.running_avg.back() << "\n";
            std::cout << "wrote " << out << "/descent.csv\n";
            return 0;
        }

        if (*gd) {
            const auto cfg = fedsim::load_experiment_config(config_path);
            const std::string out = resolve_out(out_override, cfg.output_dir + "_data");
            const auto clients = fedsim::build_federation(cfg.federation);
            fedsim::export_federation(out, clients, cfg.federation.spec);
            std::cout << "wrote " << clients.size() << " client CSVs + federation.json to " << out
                      << "\n";
            return 0;
        }
    } catch (const fedsim::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
