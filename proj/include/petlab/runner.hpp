#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "petlab/datasets.hpp"
#include "petlab/petl.hpp"
#include "petlab/training.hpp"
#include "petlab/vit.hpp"

namespace petlab {

// One downstream task: a generated family or a pair of corpus files.
struct TaskSpec {
    enum class Kind { template_shapes, shift, cue, corpus };
    std::string name;
    Kind kind = Kind::template_shapes;
    DatasetSpec data;
    std::string train_path, test_path;  // corpus kind only
};

TaskData load_task(const TaskSpec& spec);
std::size_t task_num_classes(const TaskSpec& spec, const TaskData& data);

struct ExperimentConfig {
    int schema_version = 1;
    std::string backbone_path;
    std::string output_dir = "runs/out";
    ViTConfig vit;
    DatasetSpec upstream;
    TrainConfig pretrain;
    TrainConfig train;
    std::vector<TaskSpec> tasks;
    std::vector<PETLMethodConfig> methods;
    std::vector<std::uint64_t> seeds{1, 2, 3};
};

// Desk-scale defaults: 3 template tasks, 2 distribution-shift tasks, one
// instance-cue task, and every method of the comparison matrix.
ExperimentConfig default_experiment_config();

ExperimentConfig parse_experiment_config(const std::string& json_text);
ExperimentConfig load_experiment_config(const std::string& path);
std::string experiment_config_to_json(const ExperimentConfig& config);

// ---------------------------------------------------------------------------
// Records

struct CellResult {
    std::string method;
    std::string task;
    std::uint64_t seed = 0;
    bool failed = false;
    std::string error;
    MetricsLog log;
};

struct AggregateRow {
    std::string method;
    std::string task;
    std::size_t seed_count = 0;
    double mean_acc = 0.0;
    double stddev = 0.0;
    std::size_t trainable_params = 0;
    int wins_vs_full = -1;  // -1 when no "full" baseline ran
};

struct ModeDelta {
    std::string task;
    double shared_acc = 0.0;
    double specific_acc = 0.0;
    double delta = 0.0;  // specific - shared
};

struct ExperimentRecord {
    std::string config_json;
    std::vector<CellResult> cells;
    std::vector<AggregateRow> rows;
    std::vector<ModeDelta> mode_deltas;  // filled by ablate_prompt_mode
    bool any_failed = false;
};

// Pure function of the per-cell results; re-running it over a persisted
// record must reproduce the stored rows.
std::vector<AggregateRow> aggregate_rows(const std::vector<CellResult>& cells,
                                         const std::vector<std::string>& method_order,
                                         const std::vector<std::string>& task_order);

std::string record_to_json(const ExperimentRecord& record);
ExperimentRecord record_from_json(const std::string& text);

// Fixed column order: method, task, seed_count, mean_acc, std,
// trainable_params, wins_vs_full.
std::string csv_summary(const std::vector<AggregateRow>& rows);

// record.json + summary.csv + logs/<method>__<task>__seed<k>.jsonl
void write_record_outputs(const ExperimentRecord& record, const std::string& out_dir);

// ---------------------------------------------------------------------------
// Protocols

ExperimentRecord run_matrix(const ExperimentConfig& config, std::size_t threads = 1);

ExperimentRecord ablate_metanet_depth(const ExperimentConfig& config,
                                      const std::vector<std::size_t>& depths = {2, 4, 6},
                                      std::size_t threads = 1);

ExperimentRecord ablate_prompt_mode(const ExperimentConfig& config, std::size_t threads = 1);

struct ScalePoint {
    double fraction = 0.0;
    std::string method;
    std::size_t seed_count = 0;
    double mean_acc = 0.0;
    double stddev = 0.0;
};

struct ScaleSweep {
    std::string config_json;
    std::vector<CellResult> cells;  // task field holds "<task>@<fraction>"
    std::vector<ScalePoint> series;
    bool any_failed = false;
};

// Fig-4-style sweep: {full, linear, dvpt} on class-stratified subsamples.
ScaleSweep sweep_data_scale(const ExperimentConfig& config,
                            const std::vector<double>& fractions = {0.1, 0.2, 0.3, 0.4, 0.5,
                                                                    0.6, 0.7},
                            std::size_t threads = 1);

std::string sweep_csv(const ScaleSweep& sweep);
std::string sweep_to_json(const ScaleSweep& sweep);
void write_sweep_outputs(const ScaleSweep& sweep, const std::string& out_dir);

// ---------------------------------------------------------------------------
// Gradient-check suite (the `gradcheck` subcommand)

struct GradcheckOptions {
    double op_tol = 1e-6;
    double end_to_end_tol = 1e-4;
    std::size_t op_cases = 100;
    std::size_t coords_per_group = 100;
    std::uint64_t seed = 4242;
};

struct GradcheckOutcome {
    bool passed = true;
    double seconds = 0.0;
    std::string report;  // one line per checked op / model
};

// 64-bit finite-difference verification of every primitive op and of
// end-to-end VPT and DVPT losses on the tiny config.
GradcheckOutcome run_gradcheck_suite(const GradcheckOptions& options = {});

// Raises the glibc mmap/trim thresholds so medium-sized tensor buffers
// recycle through the heap instead of mmap syscalls. No-op elsewhere.
void tune_allocator();

}  // namespace petlab
