#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "petlab/binio.hpp"
#include "petlab/runner.hpp"

namespace petlab {

using nlohmann::json;

namespace {

std::string fixed6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

TrainConfig train_from_json(const json& j, TrainConfig base) {
    if (j.contains("optimizer")) {
        const std::string o = j["optimizer"];
        if (o == "adam") {
            base.optimizer = OptimizerKind::adam;
        } else if (o == "sgd_momentum" || o == "sgd") {
            base.optimizer = OptimizerKind::sgd_momentum;
        } else {
            throw ConfigError("unknown optimizer: " + o);
        }
    }
    if (j.contains("lr")) base.learning_rate = j["lr"];
    if (j.contains("momentum")) base.momentum = j["momentum"];
    if (j.contains("beta1")) base.beta1 = j["beta1"];
    if (j.contains("beta2")) base.beta2 = j["beta2"];
    if (j.contains("weight_decay")) base.weight_decay = j["weight_decay"];
    if (j.contains("epochs")) base.epochs = j["epochs"];
    if (j.contains("batch_size")) base.batch_size = j["batch_size"];
    if (j.contains("seed")) base.seed = j["seed"];
    if (j.contains("precision")) {
        const std::string p = j["precision"];
        if (p == "f32") {
            base.precision = Precision::f32;
        } else if (p == "f64") {
            base.precision = Precision::f64;
        } else {
            throw ConfigError("precision must be f32 or f64, got " + p);
        }
    }
    return base;
}

json train_to_json(const TrainConfig& t) {
    json j;
    j["optimizer"] = t.optimizer == OptimizerKind::adam ? "adam" : "sgd_momentum";
    j["lr"] = t.learning_rate;
    j["momentum"] = t.momentum;
    j["beta1"] = t.beta1;
    j["beta2"] = t.beta2;
    j["weight_decay"] = t.weight_decay;
    j["epochs"] = t.epochs;
    j["batch_size"] = t.batch_size;
    j["seed"] = t.seed;
    j["precision"] = t.precision == Precision::f32 ? "f32" : "f64";
    return j;
}

DatasetSpec dataset_from_json(const json& j, DatasetSpec base) {
    if (j.contains("classes")) base.num_classes = j["classes"];
    if (j.contains("n_train")) base.n_train = j["n_train"];
    if (j.contains("n_test")) base.n_test = j["n_test"];
    if (j.contains("image_h")) base.image_h = j["image_h"];
    if (j.contains("image_w")) base.image_w = j["image_w"];
    if (j.contains("seed")) base.generator_seed = j["seed"];
    if (j.contains("noise")) base.instance_noise = j["noise"];
    if (j.contains("variant")) base.variant = j["variant"];
    return base;
}

json dataset_to_json(const DatasetSpec& d) {
    json j;
    j["classes"] = d.num_classes;
    j["n_train"] = d.n_train;
    j["n_test"] = d.n_test;
    j["image_h"] = d.image_h;
    j["image_w"] = d.image_w;
    j["seed"] = d.generator_seed;
    j["noise"] = d.instance_noise;
    j["variant"] = d.variant;
    return j;
}

PETLMethodConfig method_from_json(const json& j) {
    PETLMethodConfig m;
    if (!j.contains("kind")) throw ConfigError("method entry needs a \"kind\"");
    m.kind = method_kind_from_name(j["kind"]);
    if (j.contains("k")) m.k = j["k"];
    if (j.contains("r")) m.adapter_dim = j["r"];
    if (j.contains("p")) m.prompt_count = j["p"];
    if (j.contains("metanet_layers")) m.metanet_layers = j["metanet_layers"];
    if (j.contains("metanet_hidden")) m.metanet_hidden = j["metanet_hidden"];
    if (j.contains("metanet_input_dim")) m.metanet_input_dim = j["metanet_input_dim"];
    if (j.contains("mode")) {
        const std::string mode = j["mode"];
        if (mode == "shared") {
            m.dvpt_mode = DvptMode::shared;
        } else if (mode == "specific") {
            m.dvpt_mode = DvptMode::specific;
        } else {
            throw ConfigError("dvpt mode must be shared or specific, got " + mode);
        }
    }
    return m;
}

json method_to_json(const PETLMethodConfig& m) {
    json j;
    j["kind"] = method_kind_name(m.kind);
    j["k"] = m.k;
    j["r"] = m.adapter_dim;
    j["p"] = m.prompt_count;
    j["metanet_layers"] = m.metanet_layers;
    if (m.metanet_hidden) j["metanet_hidden"] = m.metanet_hidden;
    j["metanet_input_dim"] = m.metanet_input_dim;
    j["mode"] = m.dvpt_mode == DvptMode::shared ? "shared" : "specific";
    return j;
}

TaskSpec task_from_json(const json& j, std::size_t default_h, std::size_t default_w) {
    TaskSpec t;
    if (!j.contains("name")) throw ConfigError("task entry needs a \"name\"");
    t.name = j["name"];
    const std::string kind = j.value("kind", "template");
    if (kind == "template") {
        t.kind = TaskSpec::Kind::template_shapes;
    } else if (kind == "shift") {
        t.kind = TaskSpec::Kind::shift;
    } else if (kind == "cue") {
        t.kind = TaskSpec::Kind::cue;
    } else if (kind == "corpus") {
        t.kind = TaskSpec::Kind::corpus;
        if (!j.contains("train") || !j.contains("test")) {
            throw ConfigError("corpus task " + t.name + " needs \"train\" and \"test\" paths");
        }
        t.train_path = j["train"];
        t.test_path = j["test"];
        return t;
    } else {
        throw ConfigError("unknown task kind: " + kind);
    }
    DatasetSpec base;
    base.family = DatasetFamily::downstream_variant;
    base.num_classes = 6;
    base.n_train = 400;
    base.n_test = 240;
    base.image_h = default_h;
    base.image_w = default_w;
    t.data = dataset_from_json(j, base);
    return t;
}

json task_to_json(const TaskSpec& t) {
    json j;
    j["name"] = t.name;
    switch (t.kind) {
        case TaskSpec::Kind::template_shapes:
            j["kind"] = "template";
            break;
        case TaskSpec::Kind::shift:
            j["kind"] = "shift";
            break;
        case TaskSpec::Kind::cue:
            j["kind"] = "cue";
            break;
        case TaskSpec::Kind::corpus:
            j["kind"] = "corpus";
            j["train"] = t.train_path;
            j["test"] = t.test_path;
            return j;
    }
    json d = dataset_to_json(t.data);
    j.update(d);
    return j;
}

json metrics_to_json_obj(const MetricsLog& log) {
    json j;
    j["epochs"] = json::array();
    for (const auto& e : log.epochs) {
        j["epochs"].push_back({{"epoch", e.epoch},
                               {"train_loss", e.train_loss},
                               {"train_acc", e.train_acc},
                               {"val_acc", e.val_acc}});
    }
    j["test_acc"] = log.test_acc;
    j["trainable_params"] = log.trainable_params;
    j["wall_time_s"] = log.wall_time_s;
    return j;
}

MetricsLog metrics_from_json_obj(const json& j) {
    MetricsLog log;
    for (const auto& e : j.value("epochs", json::array())) {
        log.epochs.push_back({e.value("epoch", std::size_t{0}), e.value("train_loss", 0.0),
                              e.value("train_acc", 0.0), e.value("val_acc", 0.0)});
    }
    log.test_acc = j.value("test_acc", 0.0);
    log.trainable_params = j.value("trainable_params", std::size_t{0});
    log.wall_time_s = j.value("wall_time_s", 0.0);
    return log;
}

}  // namespace

std::string metrics_to_jsonl(const MetricsLog& log) {
    std::ostringstream os;
    for (const auto& e : log.epochs) {
        json j{{"epoch", e.epoch},
               {"train_loss", e.train_loss},
               {"train_acc", e.train_acc},
               {"val_acc", e.val_acc}};
        os << j.dump() << "\n";
    }
    json fin{{"final", true},
             {"test_acc", log.test_acc},
             {"trainable_params", log.trainable_params},
             {"wall_time_s", log.wall_time_s}};
    os << fin.dump() << "\n";
    return os.str();
}

MetricsLog metrics_from_jsonl(const std::string& text) {
    MetricsLog log;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        if (j.value("final", false)) {
            log.test_acc = j.value("test_acc", 0.0);
            log.trainable_params = j.value("trainable_params", std::size_t{0});
            log.wall_time_s = j.value("wall_time_s", 0.0);
        } else {
            log.epochs.push_back({j.value("epoch", std::size_t{0}),
                                  j.value("train_loss", 0.0), j.value("train_acc", 0.0),
                                  j.value("val_acc", 0.0)});
        }
    }
    return log;
}

ExperimentConfig default_experiment_config() {
    ExperimentConfig c;
    c.vit = ViTConfig::desk_default();
    c.vit.num_classes = 8;

    c.upstream.family = DatasetFamily::upstream_shapes;
    c.upstream.num_classes = 8;
    c.upstream.n_train = 512;
    c.upstream.n_test = 256;
    c.upstream.generator_seed = 5;

    c.pretrain.epochs = 60;
    c.pretrain.batch_size = 32;
    c.pretrain.learning_rate = 1e-3;
    c.pretrain.seed = 5;

    c.train.epochs = 40;
    c.train.batch_size = 32;
    c.train.learning_rate = 1e-3;

    auto gen_task = [](const char* name, TaskSpec::Kind kind, std::uint64_t variant,
                       std::uint64_t seed, double noise) {
        TaskSpec t;
        t.name = name;
        t.kind = kind;
        t.data.family = DatasetFamily::downstream_variant;
        t.data.num_classes = 6;
        t.data.n_train = 400;
        t.data.n_test = 240;
        t.data.generator_seed = seed;
        t.data.variant = variant;
        t.data.instance_noise = noise;
        return t;
    };
    c.tasks = {
        gen_task("template-0", TaskSpec::Kind::template_shapes, 0, 11, 0.0),
        gen_task("template-1", TaskSpec::Kind::template_shapes, 1, 12, 0.0),
        gen_task("template-2", TaskSpec::Kind::template_shapes, 2, 13, 0.0),
        gen_task("shift-0", TaskSpec::Kind::shift, 7, 14, 0.05),
        gen_task("shift-1", TaskSpec::Kind::shift, 8, 15, 0.05),
        gen_task("cue-0", TaskSpec::Kind::cue, 3, 16, 0.0),
    };

    auto method = [](MethodKind kind) {
        PETLMethodConfig m;
        m.kind = kind;
        return m;
    };
    PETLMethodConfig partial = method(MethodKind::partial_k);
    partial.k = 1;
    PETLMethodConfig mlp = method(MethodKind::mlp_k);
    mlp.k = 2;
    PETLMethodConfig adapter = method(MethodKind::adapter);
    adapter.adapter_dim = 8;
    PETLMethodConfig vpt = method(MethodKind::vpt);
    vpt.prompt_count = 4;
    PETLMethodConfig dvpt = vpt;
    dvpt.kind = MethodKind::dvpt;
    dvpt.metanet_layers = 4;
    dvpt.dvpt_mode = DvptMode::shared;
    c.methods = {method(MethodKind::full),
                 method(MethodKind::linear),
                 partial,
                 mlp,
                 method(MethodKind::bias),
                 adapter,
                 method(MethodKind::sidetune),
                 vpt,
                 dvpt};
    return c;
}

ExperimentConfig parse_experiment_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.contains("schema_version")) {
        throw ConfigError("config needs a top-level schema_version field");
    }
    if (j["schema_version"] != 1) {
        throw ConfigError("unsupported schema_version (expected 1)");
    }
    ExperimentConfig c = default_experiment_config();
    if (j.contains("backbone")) c.backbone_path = j["backbone"];
    if (j.contains("output")) c.output_dir = j["output"];
    if (j.contains("vit")) {
        const json& v = j["vit"];
        if (v.contains("layers")) c.vit.num_layers = v["layers"];
        if (v.contains("width")) c.vit.width = v["width"];
        if (v.contains("heads")) c.vit.num_heads = v["heads"];
        if (v.contains("image_h")) c.vit.image_h = v["image_h"];
        if (v.contains("image_w")) c.vit.image_w = v["image_w"];
        if (v.contains("patch_h")) c.vit.patch_h = v["patch_h"];
        if (v.contains("patch_w")) c.vit.patch_w = v["patch_w"];
        if (v.contains("upstream_classes")) c.vit.num_classes = v["upstream_classes"];
        c.vit.validate();
    }
    // generated datasets inherit the backbone's image geometry unless a
    // task overrides it explicitly
    c.upstream.image_h = c.vit.image_h;
    c.upstream.image_w = c.vit.image_w;
    if (j.contains("upstream")) {
        DatasetSpec base = c.upstream;
        c.upstream = dataset_from_json(j["upstream"], base);
        c.upstream.family = DatasetFamily::upstream_shapes;
    }
    if (j.contains("pretrain")) c.pretrain = train_from_json(j["pretrain"], c.pretrain);
    if (j.contains("train")) c.train = train_from_json(j["train"], c.train);
    if (j.contains("seeds")) {
        c.seeds.clear();
        for (const auto& s : j["seeds"]) c.seeds.push_back(s.get<std::uint64_t>());
        if (c.seeds.empty()) throw ConfigError("seed list must be non-empty");
    }
    if (j.contains("tasks")) {
        c.tasks.clear();
        for (const auto& t : j["tasks"]) {
            c.tasks.push_back(task_from_json(t, c.vit.image_h, c.vit.image_w));
        }
    }
    if (j.contains("methods")) {
        c.methods.clear();
        for (const auto& m : j["methods"]) c.methods.push_back(method_from_json(m));
    }
    return c;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return parse_experiment_config(os.str());
}

std::string experiment_config_to_json(const ExperimentConfig& c) {
    json j;
    j["schema_version"] = c.schema_version;
    j["backbone"] = c.backbone_path;
    j["output"] = c.output_dir;
    j["vit"] = {{"layers", c.vit.num_layers},   {"width", c.vit.width},
                {"heads", c.vit.num_heads},     {"image_h", c.vit.image_h},
                {"image_w", c.vit.image_w},     {"patch_h", c.vit.patch_h},
                {"patch_w", c.vit.patch_w},     {"upstream_classes", c.vit.num_classes}};
    j["upstream"] = dataset_to_json(c.upstream);
    j["pretrain"] = train_to_json(c.pretrain);
    j["train"] = train_to_json(c.train);
    j["seeds"] = c.seeds;
    j["tasks"] = json::array();
    for (const auto& t : c.tasks) j["tasks"].push_back(task_to_json(t));
    j["methods"] = json::array();
    for (const auto& m : c.methods) j["methods"].push_back(method_to_json(m));
    return j.dump(2);
}

// ---------------------------------------------------------------------------
// Records

std::string record_to_json(const ExperimentRecord& record) {
    json j;
    j["config"] = json::parse(record.config_json.empty() ? "{}" : record.config_json);
    j["any_failed"] = record.any_failed;
    j["cells"] = json::array();
    for (const auto& c : record.cells) {
        json cell{{"method", c.method}, {"task", c.task},     {"seed", c.seed},
                  {"failed", c.failed}, {"error", c.error},   {"log", metrics_to_json_obj(c.log)}};
        j["cells"].push_back(std::move(cell));
    }
    j["rows"] = json::array();
    for (const auto& r : record.rows) {
        j["rows"].push_back({{"method", r.method},
                             {"task", r.task},
                             {"seed_count", r.seed_count},
                             {"mean_acc", r.mean_acc},
                             {"std", r.stddev},
                             {"trainable_params", r.trainable_params},
                             {"wins_vs_full", r.wins_vs_full}});
    }
    if (!record.mode_deltas.empty()) {
        j["mode_deltas"] = json::array();
        for (const auto& d : record.mode_deltas) {
            j["mode_deltas"].push_back({{"task", d.task},
                                        {"shared_acc", d.shared_acc},
                                        {"specific_acc", d.specific_acc},
                                        {"delta", d.delta}});
        }
    }
    return j.dump(2);
}

ExperimentRecord record_from_json(const std::string& text) {
    json j = json::parse(text);
    ExperimentRecord record;
    record.config_json = j.value("config", json::object()).dump();
    record.any_failed = j.value("any_failed", false);
    for (const auto& c : j.value("cells", json::array())) {
        CellResult cell;
        cell.method = c.value("method", "");
        cell.task = c.value("task", "");
        cell.seed = c.value("seed", std::uint64_t{0});
        cell.failed = c.value("failed", false);
        cell.error = c.value("error", "");
        cell.log = metrics_from_json_obj(c.value("log", json::object()));
        record.cells.push_back(std::move(cell));
    }
    for (const auto& r : j.value("rows", json::array())) {
        AggregateRow row;
        row.method = r.value("method", "");
        row.task = r.value("task", "");
        row.seed_count = r.value("seed_count", std::size_t{0});
        row.mean_acc = r.value("mean_acc", 0.0);
        row.stddev = r.value("std", 0.0);
        row.trainable_params = r.value("trainable_params", std::size_t{0});
        row.wins_vs_full = r.value("wins_vs_full", -1);
        record.rows.push_back(std::move(row));
    }
    for (const auto& d : j.value("mode_deltas", json::array())) {
        record.mode_deltas.push_back({d.value("task", ""), d.value("shared_acc", 0.0),
                                      d.value("specific_acc", 0.0), d.value("delta", 0.0)});
    }
    return record;
}

std::string csv_summary(const std::vector<AggregateRow>& rows) {
    std::ostringstream os;
    os << "method,task,seed_count,mean_acc,std,trainable_params,wins_vs_full\n";
    for (const auto& r : rows) {
        os << r.method << ',' << r.task << ',' << r.seed_count << ',' << fixed6(r.mean_acc)
           << ',' << fixed6(r.stddev) << ',' << r.trainable_params << ',';
        if (r.wins_vs_full >= 0) os << r.wins_vs_full;
        os << '\n';
    }
    return os.str();
}

std::string sweep_csv(const ScaleSweep& sweep) {
    std::ostringstream os;
    os << "fraction,method,seed_count,mean_acc,std\n";
    for (const auto& p : sweep.series) {
        os << fixed6(p.fraction) << ',' << p.method << ',' << p.seed_count << ','
           << fixed6(p.mean_acc) << ',' << fixed6(p.stddev) << '\n';
    }
    return os.str();
}

std::string sweep_to_json(const ScaleSweep& sweep) {
    json j;
    j["config"] = json::parse(sweep.config_json.empty() ? "{}" : sweep.config_json);
    j["any_failed"] = sweep.any_failed;
    j["cells"] = json::array();
    for (const auto& c : sweep.cells) {
        j["cells"].push_back({{"method", c.method},
                              {"task", c.task},
                              {"seed", c.seed},
                              {"failed", c.failed},
                              {"error", c.error},
                              {"log", metrics_to_json_obj(c.log)}});
    }
    j["series"] = json::array();
    for (const auto& p : sweep.series) {
        j["series"].push_back({{"fraction", p.fraction},
                               {"method", p.method},
                               {"seed_count", p.seed_count},
                               {"mean_acc", p.mean_acc},
                               {"std", p.stddev}});
    }
    return j.dump(2);
}

void write_record_outputs(const ExperimentRecord& record, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_dir) / "logs");
    {
        std::ofstream out(fs::path(out_dir) / "record.json");
        out << record_to_json(record);
    }
    {
        std::ofstream out(fs::path(out_dir) / "summary.csv");
        out << csv_summary(record.rows);
    }
    if (!record.mode_deltas.empty()) {
        std::ofstream out(fs::path(out_dir) / "mode_deltas.csv");
        out << "task,shared_acc,specific_acc,delta\n";
        for (const auto& d : record.mode_deltas) {
            out << d.task << ',' << fixed6(d.shared_acc) << ',' << fixed6(d.specific_acc)
                << ',' << fixed6(d.delta) << '\n';
        }
    }
    for (const auto& c : record.cells) {
        if (c.failed) continue;
        std::ofstream out(fs::path(out_dir) / "logs" /
                          (c.method + "__" + c.task + "__seed" + std::to_string(c.seed) +
                           ".jsonl"));
        out << metrics_to_jsonl(c.log);
    }
}

void write_sweep_outputs(const ScaleSweep& sweep, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    {
        std::ofstream out(fs::path(out_dir) / "sweep.json");
        out << sweep_to_json(sweep);
    }
    {
        std::ofstream out(fs::path(out_dir) / "sweep.csv");
        out << sweep_csv(sweep);
    }
}

}  // namespace petlab
