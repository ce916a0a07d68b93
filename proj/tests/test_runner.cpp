#include <map>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "petlab/checkpoint.hpp"
#include "petlab/corpus.hpp"
#include "petlab/runner.hpp"
#include "petlab/vit.hpp"

using namespace petlab;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* name) {
    auto dir = fs::temp_directory_path() / "petlab_tests" / name;
    fs::create_directories(dir);
    return dir;
}

std::string read_text(const fs::path& p) {
    std::ifstream in(p);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

// tiny everything: 8x8 images, 2-layer ViT, seconds per matrix
ExperimentConfig tiny_config(const fs::path& dir) {
    ExperimentConfig cfg = default_experiment_config();
    cfg.vit = ViTConfig::tiny();
    cfg.vit.num_classes = 8;
    cfg.backbone_path = (dir / "backbone.ckpt").string();
    cfg.output_dir = (dir / "out").string();
    cfg.seeds = {1, 2};
    cfg.train.epochs = 2;
    cfg.train.batch_size = 16;

    TaskSpec task;
    task.name = "toy";
    task.kind = TaskSpec::Kind::template_shapes;
    task.data.family = DatasetFamily::downstream_variant;
    task.data.num_classes = 4;
    task.data.n_train = 40;
    task.data.n_test = 16;
    task.data.image_h = task.data.image_w = 8;
    task.data.generator_seed = 21;
    cfg.tasks = {task};

    PETLMethodConfig linear;
    linear.kind = MethodKind::linear;
    cfg.methods = {linear};

    auto backbone = init_backbone<float>(cfg.vit, 123);
    save_checkpoint(cfg.backbone_path, backbone);
    return cfg;
}

CellResult make_cell(const std::string& method, const std::string& task, std::uint64_t seed,
                     double acc) {
    CellResult c;
    c.method = method;
    c.task = task;
    c.seed = seed;
    c.log.test_acc = acc;
    c.log.trainable_params = 10;
    return c;
}

}  // namespace

TEST_SUITE_BEGIN("runner");

TEST_CASE("config schema version is required and checked") {
    CHECK_THROWS_AS(parse_experiment_config("{}"), ConfigError);
    CHECK_THROWS_AS(parse_experiment_config(R"({"schema_version": 2})"), ConfigError);
    CHECK_THROWS_AS(parse_experiment_config("not json"), ConfigError);
    auto cfg = parse_experiment_config(R"({"schema_version": 1})");
    CHECK(cfg.tasks.size() == 6);    // defaults: 3 template + 2 shift + 1 cue
    CHECK(cfg.methods.size() == 9);  // the full comparison set
}

TEST_CASE("config JSON round-trips through parse") {
    ExperimentConfig cfg = default_experiment_config();
    cfg.backbone_path = "b.ckpt";
    cfg.seeds = {7, 8, 9};
    cfg.train.learning_rate = 0.01;
    cfg.train.precision = Precision::f64;
    cfg.methods[2].k = 3;
    auto parsed = parse_experiment_config(experiment_config_to_json(cfg));
    CHECK(parsed.backbone_path == "b.ckpt");
    CHECK(parsed.seeds == std::vector<std::uint64_t>{7, 8, 9});
    CHECK(parsed.train.learning_rate == 0.01);
    CHECK(parsed.train.precision == Precision::f64);
    CHECK(parsed.methods[2].k == 3);
    CHECK(parsed.tasks.size() == cfg.tasks.size());
}

TEST_CASE("metrics log serializes to JSON lines and back") {
    MetricsLog log;
    log.epochs = {{0, 1.5, 0.25, 0.3}, {1, 0.9, 0.5, 0.45}};
    log.test_acc = 0.625;
    log.trainable_params = 42;
    log.wall_time_s = 1.25;
    auto text = metrics_to_jsonl(log);
    CHECK(std::count(text.begin(), text.end(), '\n') == 3);  // 2 epochs + final
    auto back = metrics_from_jsonl(text);
    REQUIRE(back.epochs.size() == 2);
    CHECK(back.epochs[1].train_loss == 0.9);
    CHECK(back.epochs[1].val_acc == 0.45);
    CHECK(back.test_acc == 0.625);
    CHECK(back.trainable_params == 42);
}

TEST_CASE("wins against the full baseline are counted per method") {
    // hand case: method accs [0.9, 0.5], full accs [0.8, 0.6] -> wins = 1
    std::vector<CellResult> cells{
        make_cell("full", "t1", 1, 0.8),
        make_cell("full", "t2", 1, 0.6),
        make_cell("m", "t1", 1, 0.9),
        make_cell("m", "t2", 1, 0.5),
    };
    auto rows = aggregate_rows(cells, {"full", "m"}, {"t1", "t2"});
    REQUIRE(rows.size() == 4);
    for (const auto& r : rows) {
        if (r.method == "m") CHECK(r.wins_vs_full == 1);
        if (r.method == "full") CHECK(r.wins_vs_full == 0);
    }

    // no full baseline -> wins not computed
    auto no_full = aggregate_rows(cells, {"m"}, {"t1", "t2"});
    CHECK(no_full[0].wins_vs_full == -1);
}

TEST_CASE("aggregate mean and std recompute from raw cells") {
    std::vector<CellResult> cells{
        make_cell("m", "t", 1, 0.5),
        make_cell("m", "t", 2, 0.7),
        make_cell("m", "t", 3, 0.6),
    };
    auto rows = aggregate_rows(cells, {"m"}, {"t"});
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].seed_count == 3);
    CHECK(rows[0].mean_acc == doctest::Approx(0.6).epsilon(1e-12));
    const double var = ((0.5 - 0.6) * (0.5 - 0.6) + (0.7 - 0.6) * (0.7 - 0.6)) / 3.0;
    CHECK(rows[0].stddev == doctest::Approx(std::sqrt(var)).epsilon(1e-12));

    // failed cells are excluded from aggregation
    cells.push_back(make_cell("m", "t", 4, 0.0));
    cells.back().failed = true;
    auto rows2 = aggregate_rows(cells, {"m"}, {"t"});
    CHECK(rows2[0].seed_count == 3);
}

TEST_CASE("record JSON round-trips and re-aggregation reproduces the rows") {
    ExperimentRecord record;
    record.config_json = R"({"schema_version":1})";
    record.cells = {make_cell("full", "t", 1, 0.5), make_cell("full", "t", 2, 0.9),
                    make_cell("vpt", "t", 1, 0.7), make_cell("vpt", "t", 2, 0.8)};
    record.rows = aggregate_rows(record.cells, {"full", "vpt"}, {"t"});

    auto loaded = record_from_json(record_to_json(record));
    REQUIRE(loaded.cells.size() == 4);
    auto rerows = aggregate_rows(loaded.cells, {"full", "vpt"}, {"t"});
    REQUIRE(rerows.size() == loaded.rows.size());
    for (std::size_t i = 0; i < rerows.size(); ++i) {
        CHECK(rerows[i].method == loaded.rows[i].method);
        CHECK(rerows[i].mean_acc == loaded.rows[i].mean_acc);
        CHECK(rerows[i].stddev == loaded.rows[i].stddev);
        CHECK(rerows[i].wins_vs_full == loaded.rows[i].wins_vs_full);
    }
}

TEST_CASE("csv summary has the fixed column order") {
    auto rows = aggregate_rows({make_cell("m", "t", 1, 0.5)}, {"m"}, {"t"});
    auto csv = csv_summary(rows);
    CHECK(csv.rfind("method,task,seed_count,mean_acc,std,trainable_params,wins_vs_full\n",
                    0) == 0);
    CHECK(csv.find("m,t,1,0.500000,0.000000,10,\n") != std::string::npos);
    CHECK(csv == csv_summary(rows));
}

TEST_CASE("corpus tasks load through the task dispatcher") {
    auto dir = temp_dir("corpus_task");
    DatasetSpec spec;
    spec.num_classes = 3;
    spec.n_train = 9;
    spec.n_test = 6;
    spec.generator_seed = 77;
    auto data = generate_synthetic(spec);
    save_corpus((dir / "train.pimg").string(), data.train);
    save_corpus((dir / "test.pimg").string(), data.test);

    TaskSpec task;
    task.name = "fromfile";
    task.kind = TaskSpec::Kind::corpus;
    task.train_path = (dir / "train.pimg").string();
    task.test_path = (dir / "test.pimg").string();
    auto loaded = load_task(task);
    CHECK(loaded.train.size() == 9);
    CHECK(loaded.test.size() == 6);
    CHECK(task_num_classes(task, loaded) == 3);
}

TEST_CASE("run_matrix: one method x one task x one seed gives one row") {
    auto dir = temp_dir("matrix_single");
    auto cfg = tiny_config(dir);
    cfg.seeds = {1};
    auto record = run_matrix(cfg);
    REQUIRE(record.rows.size() == 1);
    CHECK(record.rows[0].method == "linear");
    CHECK(record.rows[0].task == "toy");
    CHECK(record.rows[0].seed_count == 1);
    CHECK_FALSE(record.any_failed);
    CHECK(record.cells.size() == 1);

    write_record_outputs(record, cfg.output_dir);
    CHECK(fs::exists(fs::path(cfg.output_dir) / "record.json"));
    CHECK(fs::exists(fs::path(cfg.output_dir) / "summary.csv"));
    CHECK(fs::exists(fs::path(cfg.output_dir) / "logs" / "linear__toy__seed1.jsonl"));

    // the persisted record reproduces its own aggregates
    auto loaded = record_from_json(read_text(fs::path(cfg.output_dir) / "record.json"));
    auto rerows = aggregate_rows(loaded.cells, {"linear"}, {"toy"});
    CHECK(rerows[0].mean_acc == record.rows[0].mean_acc);
}

TEST_CASE("run_matrix twice produces byte-identical CSV summaries") {
    auto dir = temp_dir("matrix_determ");
    auto cfg = tiny_config(dir);
    auto a = run_matrix(cfg);
    auto b = run_matrix(cfg);
    CHECK(csv_summary(a.rows) == csv_summary(b.rows));
}

TEST_CASE("failed cells are recorded and the matrix continues") {
    auto dir = temp_dir("matrix_failed");
    auto cfg = tiny_config(dir);
    cfg.train.learning_rate = 1e308;  // overflow on the first step
    cfg.train.epochs = 3;
    auto record = run_matrix(cfg);
    CHECK(record.any_failed);
    REQUIRE(record.cells.size() == 2);
    for (const auto& c : record.cells) {
        CHECK(c.failed);
        CHECK_FALSE(c.error.empty());
    }
    CHECK(record.rows[0].seed_count == 0);
}

TEST_CASE("depth ablation rows sorted ascending with strictly increasing parameters") {
    auto dir = temp_dir("ablate_depth");
    auto cfg = tiny_config(dir);
    cfg.seeds = {1};
    cfg.train.epochs = 0;  // counting and plumbing only
    PETLMethodConfig dvpt;
    dvpt.kind = MethodKind::dvpt;
    dvpt.prompt_count = 2;
    dvpt.metanet_layers = 4;
    cfg.methods = {dvpt};

    auto record = ablate_metanet_depth(cfg, {6, 2, 4});  // given unsorted
    REQUIRE(record.rows.size() == 3);
    CHECK(record.rows[0].method == "dvpt-shared-l2");
    CHECK(record.rows[1].method == "dvpt-shared-l4");
    CHECK(record.rows[2].method == "dvpt-shared-l6");
    CHECK(record.rows[0].trainable_params < record.rows[1].trainable_params);
    CHECK(record.rows[1].trainable_params < record.rows[2].trainable_params);

    ExperimentConfig no_dvpt = cfg;
    no_dvpt.methods = {PETLMethodConfig{}};
    CHECK_THROWS_AS(ablate_metanet_depth(no_dvpt, {2, 4, 6}), ConfigError);
}

TEST_CASE("mode ablation pairs shared and specific and emits per-task deltas") {
    auto dir = temp_dir("ablate_mode");
    auto cfg = tiny_config(dir);
    cfg.seeds = {1, 2};
    cfg.train.epochs = 0;
    PETLMethodConfig dvpt;
    dvpt.kind = MethodKind::dvpt;
    dvpt.prompt_count = 3;
    dvpt.metanet_layers = 2;
    cfg.methods = {dvpt};

    auto record = ablate_prompt_mode(cfg);
    std::set<std::string> methods;
    for (const auto& r : record.rows) methods.insert(r.method);
    CHECK(methods ==
          std::set<std::string>{"dvpt-shared-l2", "dvpt-specific-l2"});

    // specific exceeds shared by exactly (p-1)*d output rows' parameters
    std::size_t shared_params = 0, specific_params = 0;
    for (const auto& r : record.rows) {
        if (r.method == "dvpt-shared-l2") shared_params = r.trainable_params;
        if (r.method == "dvpt-specific-l2") specific_params = r.trainable_params;
    }
    const std::size_t d = cfg.vit.width, hidden = cfg.vit.width, p = 3;
    CHECK(specific_params - shared_params == (p - 1) * d * (hidden + 1));

    REQUIRE(record.mode_deltas.size() == 1);
    const auto& delta = record.mode_deltas[0];
    CHECK(delta.delta ==
          doctest::Approx(delta.specific_acc - delta.shared_acc).epsilon(1e-12));

    // paired: identical seed sets for both modes
    std::set<std::uint64_t> shared_seeds, specific_seeds;
    for (const auto& c : record.cells) {
        if (c.method == "dvpt-shared-l2") shared_seeds.insert(c.seed);
        if (c.method == "dvpt-specific-l2") specific_seeds.insert(c.seed);
    }
    CHECK(shared_seeds == specific_seeds);
}

TEST_CASE("data-scale sweep emits one series point per fraction and method") {
    auto dir = temp_dir("sweep");
    auto cfg = tiny_config(dir);
    cfg.seeds = {1};
    cfg.train.epochs = 0;
    PETLMethodConfig dvpt;
    dvpt.kind = MethodKind::dvpt;
    dvpt.prompt_count = 2;
    dvpt.metanet_layers = 2;
    cfg.methods = {dvpt};

    const std::vector<double> fractions{0.5, 1.0};
    auto sweep = sweep_data_scale(cfg, fractions);
    CHECK(sweep.series.size() == fractions.size() * 3);
    std::set<std::string> methods;
    std::map<std::string, int> per_method;
    for (const auto& p : sweep.series) {
        methods.insert(p.method);
        per_method[p.method]++;
        CHECK(p.seed_count == 1);
    }
    CHECK(methods == std::set<std::string>{"full", "linear", "dvpt-shared-l2"});
    for (const auto& [m, n] : per_method) CHECK(n == int(fractions.size()));

    CHECK_THROWS_AS(sweep_data_scale(cfg, {0.0, 0.5}), ConfigError);
    CHECK_THROWS_AS(sweep_data_scale(cfg, {1.5}), ConfigError);

    auto csv = sweep_csv(sweep);
    CHECK(csv.rfind("fraction,method,seed_count,mean_acc,std\n", 0) == 0);
}

TEST_SUITE_END();
