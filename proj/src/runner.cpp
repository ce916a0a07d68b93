#include "petlab/runner.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <thread>

#include "petlab/checkpoint.hpp"
#include "petlab/corpus.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace petlab {

void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
}

TaskData load_task(const TaskSpec& spec) {
    switch (spec.kind) {
        case TaskSpec::Kind::corpus: {
            TaskData t;
            t.train = load_corpus(spec.train_path);
            t.test = load_corpus(spec.test_path);
            return t;
        }
        case TaskSpec::Kind::cue:
            return instance_cue_task(spec.data);
        case TaskSpec::Kind::template_shapes:
        case TaskSpec::Kind::shift:
            return generate_synthetic(spec.data);
    }
    throw ConfigError("unknown task kind");
}

std::size_t task_num_classes(const TaskSpec& spec, const TaskData& data) {
    if (spec.kind != TaskSpec::Kind::corpus) return spec.data.num_classes;
    int mx = -1;
    for (const auto& item : data.train.items) mx = std::max(mx, item.label);
    for (const auto& item : data.test.items) mx = std::max(mx, item.label);
    if (mx < 0) throw ConfigError("corpus task " + spec.name + " is empty");
    return static_cast<std::size_t>(mx) + 1;
}

namespace {

struct CellJob {
    std::size_t method_idx = 0;
    std::size_t task_idx = 0;
    std::uint64_t seed = 0;
    double fraction = 1.0;
    std::string task_label;
};

std::string fraction_label(const std::string& task, double fraction) {
    if (fraction >= 1.0) return task;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", fraction);
    return task + "@" + buf;
}

// One (method, task, seed) cell: stratified subsample when sweeping,
// 80/20 split of the training pool, masked adaptation, test evaluation.
template <typename T>
MetricsLog run_cell(const ExperimentConfig& cfg, const ParameterStore<T>& backbone,
                    const PETLMethodConfig& method, const TaskData& task,
                    std::size_t num_classes, std::uint64_t seed, double fraction) {
    const Dataset& pool =
        task.train;  // full training pool for this task
    Dataset sampled;
    const Dataset* train_pool = &pool;
    if (fraction < 1.0) {
        sampled = subsample(pool, fraction, seed);
        train_pool = &sampled;
    }
    auto split = split_train_val(train_pool->size(), 0.8, seed);
    Dataset train_split = select(*train_pool, split.train);
    Dataset val_split = select(*train_pool, split.val);
    auto model = build_method(method, backbone, cfg.vit, num_classes, seed);
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    return run_training(model, train_split, val_split, task.test, tc);
}

template <typename T>
std::vector<CellResult> execute_jobs(const ExperimentConfig& cfg,
                                     const std::vector<PETLMethodConfig>& methods,
                                     const std::vector<CellJob>& jobs, std::size_t threads) {
    const ParameterStore<T> backbone = load_checkpoint<T>(cfg.backbone_path);

    std::vector<TaskData> tasks(cfg.tasks.size());
    std::vector<std::size_t> classes(cfg.tasks.size());
    for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
        tasks[i] = load_task(cfg.tasks[i]);
        classes[i] = task_num_classes(cfg.tasks[i], tasks[i]);
    }

    std::vector<CellResult> results(jobs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= jobs.size()) return;
            const CellJob& job = jobs[i];
            CellResult& cell = results[i];
            cell.method = methods[job.method_idx].label();
            cell.task = job.task_label;
            cell.seed = job.seed;
            try {
                cell.log = run_cell<T>(cfg, backbone, methods[job.method_idx],
                                       tasks[job.task_idx], classes[job.task_idx], job.seed,
                                       job.fraction);
            } catch (const std::exception& e) {
                cell.failed = true;
                cell.error = e.what();
            }
        }
    };
    const std::size_t n_threads = std::max<std::size_t>(1, std::min(threads, jobs.size()));
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(n_threads);
        for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    return results;
}

std::vector<CellResult> execute(const ExperimentConfig& cfg,
                                const std::vector<PETLMethodConfig>& methods,
                                const std::vector<CellJob>& jobs, std::size_t threads) {
    if (cfg.backbone_path.empty()) {
        throw ConfigError("experiment needs a backbone checkpoint path (run pretrain first)");
    }
    if (cfg.tasks.empty()) throw ConfigError("experiment needs at least one task");
    if (cfg.seeds.empty()) throw ConfigError("experiment needs at least one seed");
    for (const auto& m : methods) m.validate(cfg.vit);
    if (cfg.train.precision == Precision::f64) {
        return execute_jobs<double>(cfg, methods, jobs, threads);
    }
    return execute_jobs<float>(cfg, methods, jobs, threads);
}

std::vector<CellJob> matrix_jobs(const ExperimentConfig& cfg, std::size_t method_count,
                                 const std::vector<double>& fractions) {
    std::vector<CellJob> jobs;
    for (std::size_t m = 0; m < method_count; ++m) {
        for (std::size_t t = 0; t < cfg.tasks.size(); ++t) {
            for (double f : fractions) {
                for (std::uint64_t seed : cfg.seeds) {
                    jobs.push_back({m, t, seed, f, fraction_label(cfg.tasks[t].name, f)});
                }
            }
        }
    }
    return jobs;
}

ExperimentRecord build_record(const ExperimentConfig& cfg,
                              const std::vector<PETLMethodConfig>& methods,
                              std::vector<CellResult> cells) {
    ExperimentRecord record;
    record.config_json = experiment_config_to_json(cfg);
    record.cells = std::move(cells);
    std::vector<std::string> method_order;
    for (const auto& m : methods) method_order.push_back(m.label());
    std::vector<std::string> task_order;
    for (const auto& t : cfg.tasks) task_order.push_back(t.name);
    record.rows = aggregate_rows(record.cells, method_order, task_order);
    for (const auto& c : record.cells) record.any_failed |= c.failed;
    return record;
}

}  // namespace

std::vector<AggregateRow> aggregate_rows(const std::vector<CellResult>& cells,
                                         const std::vector<std::string>& method_order,
                                         const std::vector<std::string>& task_order) {
    auto stats_for = [&](const std::string& method, const std::string& task) {
        AggregateRow row;
        row.method = method;
        row.task = task;
        std::vector<double> accs;
        for (const auto& c : cells) {
            if (c.method != method || c.task != task || c.failed) continue;
            accs.push_back(c.log.test_acc);
            row.trainable_params = c.log.trainable_params;
        }
        row.seed_count = accs.size();
        if (!accs.empty()) {
            for (double a : accs) row.mean_acc += a;
            row.mean_acc /= double(accs.size());
            double var = 0.0;
            for (double a : accs) var += (a - row.mean_acc) * (a - row.mean_acc);
            row.stddev = std::sqrt(var / double(accs.size()));
        }
        return row;
    };

    std::vector<AggregateRow> rows;
    for (const auto& m : method_order) {
        for (const auto& t : task_order) rows.push_back(stats_for(m, t));
    }

    // wins vs the Full baseline: per method, #tasks where it beats full
    const bool has_full =
        std::find(method_order.begin(), method_order.end(), "full") != method_order.end();
    if (has_full) {
        for (auto& row : rows) {
            int wins = 0;
            for (const auto& t : task_order) {
                AggregateRow mine = stats_for(row.method, t);
                AggregateRow full = stats_for("full", t);
                if (mine.seed_count && full.seed_count && mine.mean_acc > full.mean_acc) {
                    ++wins;
                }
            }
            row.wins_vs_full = row.method == "full" ? 0 : wins;
        }
    }
    return rows;
}

ExperimentRecord run_matrix(const ExperimentConfig& cfg, std::size_t threads) {
    if (cfg.methods.empty()) throw ConfigError("experiment needs at least one method");
    auto jobs = matrix_jobs(cfg, cfg.methods.size(), {1.0});
    auto cells = execute(cfg, cfg.methods, jobs, threads);
    return build_record(cfg, cfg.methods, std::move(cells));
}

ExperimentRecord ablate_metanet_depth(const ExperimentConfig& cfg,
                                      const std::vector<std::size_t>& depths,
                                      std::size_t threads) {
    PETLMethodConfig base;
    bool found = false;
    for (const auto& m : cfg.methods) {
        if (m.kind == MethodKind::dvpt) {
            base = m;
            found = true;
            break;
        }
    }
    if (!found) throw ConfigError("ablate-depth needs a dvpt method in the config");

    std::vector<std::size_t> sorted = depths;
    std::sort(sorted.begin(), sorted.end());
    std::vector<PETLMethodConfig> methods;
    for (std::size_t d : sorted) {
        PETLMethodConfig m = base;
        m.metanet_layers = d;
        methods.push_back(m);
    }
    auto jobs = matrix_jobs(cfg, methods.size(), {1.0});
    auto cells = execute(cfg, methods, jobs, threads);
    return build_record(cfg, methods, std::move(cells));
}

ExperimentRecord ablate_prompt_mode(const ExperimentConfig& cfg, std::size_t threads) {
    PETLMethodConfig base;
    bool found = false;
    for (const auto& m : cfg.methods) {
        if (m.kind == MethodKind::dvpt) {
            base = m;
            found = true;
            break;
        }
    }
    if (!found) throw ConfigError("ablate-mode needs a dvpt method in the config");

    PETLMethodConfig shared = base, specific = base;
    shared.dvpt_mode = DvptMode::shared;
    specific.dvpt_mode = DvptMode::specific;
    std::vector<PETLMethodConfig> methods{shared, specific};
    auto jobs = matrix_jobs(cfg, methods.size(), {1.0});
    auto cells = execute(cfg, methods, jobs, threads);
    auto record = build_record(cfg, methods, std::move(cells));

    for (const auto& t : cfg.tasks) {
        ModeDelta d;
        d.task = t.name;
        for (const auto& row : record.rows) {
            if (row.task != t.name) continue;
            if (row.method == shared.label()) d.shared_acc = row.mean_acc;
            if (row.method == specific.label()) d.specific_acc = row.mean_acc;
        }
        d.delta = d.specific_acc - d.shared_acc;
        record.mode_deltas.push_back(d);
    }
    return record;
}

ScaleSweep sweep_data_scale(const ExperimentConfig& cfg, const std::vector<double>& fractions,
                            std::size_t threads) {
    for (double f : fractions) {
        if (!(f > 0.0) || f > 1.0) throw ConfigError("sweep fractions must lie in (0, 1]");
    }
    // methods compared across data scales: full, linear, dvpt
    PETLMethodConfig full, linear, dvpt;
    full.kind = MethodKind::full;
    linear.kind = MethodKind::linear;
    dvpt.kind = MethodKind::dvpt;
    dvpt.prompt_count = 4;
    dvpt.metanet_layers = 4;
    for (const auto& m : cfg.methods) {
        if (m.kind == MethodKind::dvpt) {
            dvpt = m;
            break;
        }
    }
    std::vector<PETLMethodConfig> methods{full, linear, dvpt};

    auto jobs = matrix_jobs(cfg, methods.size(), fractions);
    auto cells = execute(cfg, methods, jobs, threads);

    ScaleSweep sweep;
    sweep.config_json = experiment_config_to_json(cfg);
    sweep.cells = std::move(cells);
    for (const auto& c : sweep.cells) sweep.any_failed |= c.failed;

    // series point = mean over tasks and seeds at (fraction, method)
    for (double f : fractions) {
        for (const auto& m : methods) {
            ScalePoint p;
            p.fraction = f;
            p.method = m.label();
            std::vector<double> accs;
            for (const auto& t : cfg.tasks) {
                const std::string label = fraction_label(t.name, f);
                for (const auto& c : sweep.cells) {
                    if (c.method == p.method && c.task == label && !c.failed) {
                        accs.push_back(c.log.test_acc);
                    }
                }
            }
            p.seed_count = accs.size();
            if (!accs.empty()) {
                for (double a : accs) p.mean_acc += a;
                p.mean_acc /= double(accs.size());
                double var = 0.0;
                for (double a : accs) var += (a - p.mean_acc) * (a - p.mean_acc);
                p.stddev = std::sqrt(var / double(accs.size()));
            }
            sweep.series.push_back(p);
        }
    }
    return sweep;
}

}  // namespace petlab
