// Command-line front end: run experiments over KVTR traces, generate
// synthetic workloads, and emit per-head sparsity/redundancy tables.

#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "ems/errors.hpp"
#include "ems/experiment.hpp"
#include "ems/policies.hpp"
#include "ems/trace.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitFormat = 3;

struct RunArgs {
    std::string trace_path;
    std::string policy = "ems";
    std::size_t budget = 256;
    std::size_t window = 32;
    double tau = 0.6;
    double gamma = 4.0;
    double zeta = 0.95;
    std::size_t kernel_size = 7;
    bool with_pos = true;
    std::string out_path;
    std::string format = "json";
};

struct SynthArgs {
    std::string kind = "random";
    std::uint64_t seed = 0;
    std::size_t tokens = 256;
    std::size_t heads = 2;
    std::size_t dim = 16;
    std::size_t decode_steps = 16;
    double depth = 0.5;
    double level = 0.8;
    std::string out_path;
};

struct AnalyzeArgs {
    std::string trace_path;
    std::string out_path;
    std::size_t window = 32;
    std::size_t kernel_size = 7;
    double tau = 0.6;
    double zeta = 0.95;
};

int do_run(const RunArgs& args) {
    ems::CompressionConfig config;
    config.n_budget = args.budget;
    config.l_win = args.window;
    config.tau = args.tau;
    config.gamma = args.gamma;
    config.zeta = args.zeta;
    config.kernel_size = args.kernel_size;
    config.position_mode =
        args.with_pos ? ems::PositionMode::with_pos : ems::PositionMode::without_pos;

    ems::PolicyHandle policy;
    policy.kind = ems::policy_kind_from_name(args.policy);
    policy.validate(config);

    const ems::Trace trace = ems::load_trace(args.trace_path);
    ems::RunOptions options;
    options.trace_label = args.trace_path;
    const ems::MetricsReport report = ems::run_experiment(trace, policy, config, options);
    ems::emit_report(report, args.format, args.out_path);
    std::cout << "wrote " << args.format << " report to " << args.out_path << "\n";
    return kExitOk;
}

int do_synth(const SynthArgs& args) {
    ems::SynthParams params;
    params.tokens = args.tokens;
    params.heads = args.heads;
    params.dim = args.dim;
    params.decode_steps = args.decode_steps;
    params.depth = args.depth;
    params.level = args.level;
    const ems::Trace trace = ems::gen_synthetic(ems::synth_kind_from_name(args.kind), args.seed, params);
    ems::save_trace(trace, args.out_path);
    std::cout << "wrote " << args.kind << " trace (" << args.tokens << " tokens, " << args.heads
              << " heads, dim " << args.dim << ") to " << args.out_path << "\n";
    return kExitOk;
}

int do_analyze(const AnalyzeArgs& args) {
    ems::CompressionConfig config;
    config.n_budget = args.window + 1;  // analysis only touches window/kernel/tau/zeta
    config.l_win = args.window;
    config.tau = args.tau;
    config.zeta = args.zeta;
    config.kernel_size = args.kernel_size;
    const ems::Trace trace = ems::load_trace(args.trace_path);
    const auto diags = ems::analyze_trace(trace, config);
    const std::string csv = ems::diagnostics_csv(diags);
    std::ofstream out(args.out_path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot open " + args.out_path);
    }
    out << csv;
    std::cout << "wrote per-head diagnostics to " << args.out_path << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"KV cache compression experiments (evict-then-merge and baselines)"};
    app.require_subcommand(1);

    RunArgs run_args;
    CLI::App* run = app.add_subcommand("run", "run a policy against the full-cache reference");
    run->add_option("--trace", run_args.trace_path, "KVTR trace path")->required();
    run->add_option("--policy", run_args.policy, "full|streaming|h2o|snapkv|ems");
    run->add_option("--budget", run_args.budget, "stored entries per head");
    run->add_option("--window", run_args.window, "local window L_win");
    run->add_option("--tau", run_args.tau, "merge threshold");
    run->add_option("--gamma", run_args.gamma, "merge magnification factor");
    run->add_option("--zeta", run_args.zeta, "sparsity mass fraction");
    run->add_option("--kernel-size", run_args.kernel_size, "score pooling kernel (odd)");
    run->add_flag("--pos,!--no-pos", run_args.with_pos, "expand merged entries at their own positions");
    run->add_option("--out", run_args.out_path, "report output path")->required();
    run->add_option("--format", run_args.format, "json|csv");

    SynthArgs synth_args;
    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic KVTR trace");
    synth->add_option("--kind", synth_args.kind, "random|redundant|needle")->required();
    synth->add_option("--seed", synth_args.seed, "RNG seed");
    synth->add_option("--tokens", synth_args.tokens, "prompt length");
    synth->add_option("--heads", synth_args.heads, "attention heads");
    synth->add_option("--dim", synth_args.dim, "head dimension (even)");
    synth->add_option("--decode-steps", synth_args.decode_steps, "decode tokens after the prompt");
    synth->add_option("--depth", synth_args.depth, "needle depth in [0,1]");
    synth->add_option("--level", synth_args.level, "target redundancy rate in [0,1)");
    synth->add_option("--out", synth_args.out_path, "trace output path")->required();

    AnalyzeArgs analyze_args;
    CLI::App* analyze = app.add_subcommand("analyze", "emit per-head sparsity/redundancy CSV");
    analyze->add_option("--trace", analyze_args.trace_path, "KVTR trace path")->required();
    analyze->add_option("--out", analyze_args.out_path, "CSV output path")->required();
    analyze->add_option("--window", analyze_args.window, "local window L_win");
    analyze->add_option("--kernel-size", analyze_args.kernel_size, "score pooling kernel (odd)");
    analyze->add_option("--tau", analyze_args.tau, "redundancy threshold");
    analyze->add_option("--zeta", analyze_args.zeta, "sparsity mass fraction");

    try {
        app.parse(argc, argv);
        if (run->parsed()) {
            return do_run(run_args);
        }
        if (synth->parsed()) {
            return do_synth(synth_args);
        }
        if (analyze->parsed()) {
            return do_analyze(analyze_args);
        }
        return kExitConfig;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    } catch (const ems::FormatError& e) {
        std::cerr << "trace format error: " << e.what() << "\n";
        return kExitFormat;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
