// petlab command-line runner: pretraining, method/task matrices, the
// Meta-Net ablations, data-scale sweeps, gradient checks and parameter
// accounting, all driven by a JSON experiment config.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "petlab/checkpoint.hpp"
#include "petlab/corpus.hpp"
#include "petlab/pretrain.hpp"
#include "petlab/runner.hpp"

namespace fs = std::filesystem;
using namespace petlab;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    std::int64_t seed = -1;
    std::string precision;
    std::size_t threads = 1;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required = true) {
    auto* opt = cmd->add_option("--config", args.config_path, "experiment config (JSON)");
    if (config_required) opt->required();
    cmd->add_option("--out", args.out_dir, "output directory (overrides config)");
    cmd->add_option("--seed", args.seed, "use a single seed instead of the config's list");
    cmd->add_option("--precision", args.precision, "f32 or f64 (overrides config)")
        ->check(CLI::IsMember({"f32", "f64"}));
    cmd->add_option("--threads", args.threads, "worker threads for independent cells");
}

ExperimentConfig load_with_overrides(const CommonArgs& args) {
    ExperimentConfig cfg = load_experiment_config(args.config_path);
    if (!args.out_dir.empty()) cfg.output_dir = args.out_dir;
    if (args.seed >= 0) cfg.seeds = {static_cast<std::uint64_t>(args.seed)};
    if (args.precision == "f32") cfg.train.precision = Precision::f32;
    if (args.precision == "f64") cfg.train.precision = Precision::f64;
    return cfg;
}

void print_rows(const std::vector<AggregateRow>& rows) {
    std::printf("%-18s %-16s %5s %10s %10s %12s %6s\n", "method", "task", "seeds", "mean_acc",
                "std", "params", "wins");
    for (const auto& r : rows) {
        std::printf("%-18s %-16s %5zu %10.4f %10.4f %12zu ", r.method.c_str(),
                    r.task.c_str(), r.seed_count, r.mean_acc, r.stddev, r.trainable_params);
        if (r.wins_vs_full >= 0) {
            std::printf("%6d\n", r.wins_vs_full);
        } else {
            std::printf("%6s\n", "-");
        }
    }
}

int finish_record(const ExperimentRecord& record, const std::string& out_dir) {
    write_record_outputs(record, out_dir);
    print_rows(record.rows);
    std::printf("record: %s\n", (fs::path(out_dir) / "record.json").c_str());
    if (record.any_failed) {
        std::size_t failed = 0;
        for (const auto& c : record.cells) failed += c.failed ? 1 : 0;
        std::fprintf(stderr, "%zu cell(s) failed\n", failed);
        return 1;
    }
    return 0;
}

int cmd_pretrain(const CommonArgs& args) {
    ExperimentConfig cfg = load_with_overrides(args);
    if (args.seed >= 0) cfg.pretrain.seed = static_cast<std::uint64_t>(args.seed);
    if (args.precision == "f64") cfg.pretrain.precision = Precision::f64;

    std::string target = cfg.backbone_path;
    if (target.empty()) target = (fs::path(cfg.output_dir) / "backbone.ckpt").string();
    if (!fs::path(target).parent_path().empty()) {
        fs::create_directories(fs::path(target).parent_path());
    }

    auto upstream = generate_synthetic(cfg.upstream);
    MetricsLog log;
    if (cfg.pretrain.precision == Precision::f64) {
        auto store = pretrain_backbone<double>(cfg.vit, upstream, cfg.pretrain, 0.95, 0.60,
                                               &log);
        save_checkpoint(target, store);
    } else {
        auto store = pretrain_backbone<float>(cfg.vit, upstream, cfg.pretrain, 0.95, 0.60,
                                              &log);
        save_checkpoint(target, store);
    }
    const double final_acc = log.epochs.empty() ? 0.0 : log.epochs.back().train_acc;
    std::printf("pretrained %zu epochs, train acc %.4f, checkpoint: %s\n", log.epochs.size(),
                final_acc, target.c_str());
    return 0;
}

int cmd_run(const CommonArgs& args) {
    ExperimentConfig cfg = load_with_overrides(args);
    auto record = run_matrix(cfg, args.threads);
    return finish_record(record, (fs::path(cfg.output_dir) / "matrix").string());
}

int cmd_ablate_depth(const CommonArgs& args) {
    ExperimentConfig cfg = load_with_overrides(args);
    auto record = ablate_metanet_depth(cfg, {2, 4, 6}, args.threads);
    return finish_record(record, (fs::path(cfg.output_dir) / "ablate_depth").string());
}

int cmd_ablate_mode(const CommonArgs& args) {
    ExperimentConfig cfg = load_with_overrides(args);
    auto record = ablate_prompt_mode(cfg, args.threads);
    const int rc = finish_record(record, (fs::path(cfg.output_dir) / "ablate_mode").string());
    std::printf("%-16s %10s %10s %10s\n", "task", "shared", "specific", "delta");
    for (const auto& d : record.mode_deltas) {
        std::printf("%-16s %10.4f %10.4f %+10.4f\n", d.task.c_str(), d.shared_acc,
                    d.specific_acc, d.delta);
    }
    return rc;
}

int cmd_sweep(const CommonArgs& args, const std::vector<double>& fractions) {
    ExperimentConfig cfg = load_with_overrides(args);
    auto sweep = fractions.empty() ? sweep_data_scale(cfg, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7},
                                                      args.threads)
                                   : sweep_data_scale(cfg, fractions, args.threads);
    write_sweep_outputs(sweep, (fs::path(cfg.output_dir) / "sweep").string());
    std::printf("%8s %-16s %5s %10s %10s\n", "fraction", "method", "seeds", "mean_acc", "std");
    for (const auto& p : sweep.series) {
        std::printf("%8.2f %-16s %5zu %10.4f %10.4f\n", p.fraction, p.method.c_str(),
                    p.seed_count, p.mean_acc, p.stddev);
    }
    return sweep.any_failed ? 1 : 0;
}

int cmd_gradcheck(double tol, double e2e_tol, std::size_t cases, std::size_t coords) {
    GradcheckOptions opt;
    opt.op_tol = tol;
    opt.end_to_end_tol = e2e_tol;
    opt.op_cases = cases;
    opt.coords_per_group = coords;
    auto outcome = run_gradcheck_suite(opt);
    std::fputs(outcome.report.c_str(), stdout);
    std::printf("gradcheck %s in %.1fs\n", outcome.passed ? "PASSED" : "FAILED",
                outcome.seconds);
    return outcome.passed ? 0 : 1;
}

int cmd_paramcount(const CommonArgs& args) {
    ExperimentConfig cfg = load_with_overrides(args);
    if (cfg.tasks.empty()) throw ConfigError("paramcount needs at least one task");
    std::size_t classes = cfg.tasks[0].kind == TaskSpec::Kind::corpus
                              ? 0
                              : cfg.tasks[0].data.num_classes;
    if (classes == 0) {
        auto data = load_task(cfg.tasks[0]);
        classes = task_num_classes(cfg.tasks[0], data);
    }
    auto backbone = init_backbone<float>(cfg.vit, 0);
    std::printf("%zu-class head; per-method trainable parameters\n", classes);
    std::printf("%-18s %10s %10s %8s %8s %9s %9s %7s %8s\n", "method", "trainable", "backbone",
                "head", "prompts", "metanet", "adapters", "side", "biases");
    for (const auto& m : cfg.methods) {
        auto model = build_method(m, backbone, cfg.vit, classes, 0);
        auto c = count_trainable(model);
        std::printf("%-18s %10zu %10zu %8zu %8zu %9zu %9zu %7zu %8zu\n", m.label().c_str(),
                    c.total, c.by_group.at("backbone"), c.by_group.at("head"),
                    c.by_group.at("prompts"), c.by_group.at("metanet"),
                    c.by_group.at("adapters"), c.by_group.at("side"),
                    c.by_group.at("biases"));
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    tune_allocator();
    CLI::App app{"petlab: parameter-efficient transfer learning experiments"};
    app.require_subcommand(1);

    CommonArgs pretrain_args, run_args, depth_args, mode_args, sweep_args, count_args;
    double gc_tol = 1e-6, gc_e2e_tol = 1e-4;
    std::size_t gc_cases = 100, gc_coords = 100;
    std::vector<double> sweep_fractions;

    add_common(app.add_subcommand("pretrain", "train the upstream backbone checkpoint"),
               pretrain_args);
    add_common(app.add_subcommand("run", "run the (method x task x seed) matrix"), run_args);
    add_common(app.add_subcommand("ablate-depth", "Meta-Net depth ablation (2/4/6 layers)"),
               depth_args);
    add_common(app.add_subcommand("ablate-mode", "shared vs specific dynamic prompt"),
               mode_args);
    auto* sweep_cmd =
        app.add_subcommand("sweep-scale", "training data scale sweep (full/linear/dvpt)");
    add_common(sweep_cmd, sweep_args);
    sweep_cmd->add_option("--fractions", sweep_fractions,
                          "data fractions (default 0.1..0.7)");
    auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    gc_cmd->add_option("--tol", gc_tol, "per-op relative tolerance");
    gc_cmd->add_option("--e2e-tol", gc_e2e_tol, "end-to-end relative tolerance");
    gc_cmd->add_option("--cases", gc_cases, "random cases per op");
    gc_cmd->add_option("--coords", gc_coords, "sampled coordinates per parameter group");
    add_common(app.add_subcommand("paramcount", "per-method trainable parameter breakdown"),
               count_args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);  // prints usage
        return 2;
    }

    try {
        if (app.got_subcommand("pretrain")) return cmd_pretrain(pretrain_args);
        if (app.got_subcommand("run")) return cmd_run(run_args);
        if (app.got_subcommand("ablate-depth")) return cmd_ablate_depth(depth_args);
        if (app.got_subcommand("ablate-mode")) return cmd_ablate_mode(mode_args);
        if (app.got_subcommand("sweep-scale")) return cmd_sweep(sweep_args, sweep_fractions);
        if (app.got_subcommand("gradcheck")) {
            return cmd_gradcheck(gc_tol, gc_e2e_tol, gc_cases, gc_coords);
        }
        if (app.got_subcommand("paramcount")) return cmd_paramcount(count_args);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
