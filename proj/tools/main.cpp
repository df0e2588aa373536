#include <iostream>

#include <CLI11.hpp>

#include "fednorm/cli.hpp"

using namespace fednorm;

namespace {

void add_common(CLI::App* cmd, CommonOptions& o) {
    cmd->add_option("--config", o.config_path, "Experiment config (JSON); defaults when omitted");
    cmd->add_option("--override", o.overrides, "key.path=value, repeatable")->allow_extra_args(false);
    cmd->add_option("--seed", o.seed, "Root seed, replaces the config seed");
    cmd->add_option("--out", o.out, "Output location");
    cmd->add_option("--threads", o.threads, "Client worker threads (fallback: FEDNORM_THREADS)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated learning with feature and layer normalization"};
    app.set_version_flag("--version", std::string(version()));
    app.require_subcommand(1);

    CommonOptions run_opts, part_opts, analyze_opts;
    VerifyOptions verify_opts;
    AnalyzeOptions analyze;

    auto* run = app.add_subcommand("run", "Train one federated experiment and write metrics");
    add_common(run, run_opts);

    auto* verify = app.add_subcommand("verify", "Check the equivalence properties and gradients");
    verify->add_option("suite", verify_opts.suite, "fn_reduction | ln_reduction | prop3 | gradients | all")
        ->check(CLI::IsMember({"fn_reduction", "ln_reduction", "prop3", "gradients", "all"}));
    verify->add_option("--seed", verify_opts.seed, "Root seed");
    verify->add_option("--trials", verify_opts.trials, "Trials per reduction check");
    verify->add_flag("--inject-bias", verify_opts.inject_bias, "Enable inner biases in the reduction networks");

    auto* part = app.add_subcommand("partition", "Print per-client shard histograms");
    add_common(part, part_opts);

    auto* an = app.add_subcommand("analyze", "Probe a saved model");
    add_common(an, analyze_opts);
    an->add_option("--checkpoint", analyze.checkpoint, "Saved model (model.json of a run)")->required();
    an->add_option("--probe", analyze.probe, "spectrum | norms | overfit")
        ->check(CLI::IsMember({"spectrum", "norms", "overfit"}));
    an->add_option("--client", analyze.client, "Client whose shard drives local training");
    an->add_option("--steps", analyze.steps, "Local SGD steps");
    an->add_option("--lr", analyze.lr, "Local learning rate (default: algo.lr)");
    an->add_option("--probe-size", analyze.probe_size, "Test samples in the probe set");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*run) return cmd_run(run_opts, std::cout, std::cerr);
        if (*verify) return cmd_verify(verify_opts, std::cout, std::cerr);
        if (*part) return cmd_partition(part_opts, std::cout, std::cerr);
        return cmd_analyze(analyze_opts, analyze, std::cout, std::cerr);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e);
    }
}
