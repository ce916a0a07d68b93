#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "petlab/datasets.hpp"
#include "petlab/errors.hpp"
#include "petlab/grad_check.hpp"
#include "petlab/petl.hpp"

namespace petlab {

enum class OptimizerKind { sgd_momentum, adam };
enum class Precision { f32, f64 };

struct TrainConfig {
    OptimizerKind optimizer = OptimizerKind::adam;
    double learning_rate = 1e-3;
    double momentum = 0.9;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;  // decoupled; never applied to biases or prompts
    std::size_t epochs = 100;
    std::size_t batch_size = 32;
    std::uint64_t seed = 1;
    Precision precision = Precision::f32;

    void validate() const {
        if (learning_rate < 0.0) throw ConfigError("learning_rate must be >= 0");
        if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    }
};

struct EpochMetrics {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double val_acc = 0.0;
};

struct MetricsLog {
    std::vector<EpochMetrics> epochs;
    double test_acc = 0.0;
    std::size_t trainable_params = 0;
    double wall_time_s = 0.0;
};

// JSON lines: one object per epoch plus a final summary object.
std::string metrics_to_jsonl(const MetricsLog& log);
MetricsLog metrics_from_jsonl(const std::string& text);

// ---------------------------------------------------------------------------
// Split protocol

struct SplitIndices {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
};

// Deterministic shuffle, then floor(fraction * n) train / rest val.
inline SplitIndices split_train_val(std::size_t n, double fraction, std::uint64_t seed) {
    if (n < 5) {
        throw ConfigError("dataset too small to split: n = " + std::to_string(n) +
                          " (need at least 5)");
    }
    if (!(fraction > 0.0) || !(fraction < 1.0)) {
        throw ConfigError("split fraction must be in (0, 1)");
    }
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(seed, 0x511));
    rng.shuffle(order);
    const std::size_t cut = static_cast<std::size_t>(std::floor(fraction * double(n)));
    SplitIndices s;
    s.train.assign(order.begin(), order.begin() + cut);
    s.val.assign(order.begin() + cut, order.end());
    return s;
}

inline Dataset select(const Dataset& ds, const std::vector<std::size_t>& indices) {
    Dataset out;
    out.channels = ds.channels;
    out.height = ds.height;
    out.width = ds.width;
    out.items.reserve(indices.size());
    for (std::size_t i : indices) out.items.push_back(ds.items[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Masked optimization

// Updates exactly the trainable parameters of a store; frozen parameters
// and their gradient buffers are never touched.
template <typename T>
class MaskedOptimizer {
public:
    MaskedOptimizer(ParameterStore<T>& store, const TrainConfig& cfg) : cfg_(cfg) {
        cfg.validate();
        for (auto& p : store.all()) {
            if (!p.trainable) continue;
            Slot s;
            s.param = &p;
            s.decay_enabled = cfg.weight_decay > 0.0 && decays(p.name);
            if (cfg.optimizer == OptimizerKind::adam) {
                s.m.assign(p.value.size(), T{0});
                s.v.assign(p.value.size(), T{0});
            } else {
                s.m.assign(p.value.size(), T{0});  // momentum buffer
            }
            slots_.push_back(std::move(s));
        }
    }

    // Trainer contract: gradients are zeroed explicitly before each step.
    void zero_grads() {
        for (auto& s : slots_) s.param->value.zero_grad();
    }

    void step() {
        ++t_;
        const T lr = static_cast<T>(cfg_.learning_rate);
        for (auto& s : slots_) {
            auto values = s.param->value.values();
            const auto& gbuf = s.param->value.storage()->grad;
            if (s.decay_enabled) {
                const T wd = static_cast<T>(cfg_.weight_decay);
                for (auto& v : values) v -= lr * wd * v;
            }
            if (cfg_.optimizer == OptimizerKind::adam) {
                const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
                const T eps = static_cast<T>(cfg_.adam_eps);
                const T c1 = T{1} - static_cast<T>(std::pow(cfg_.beta1, double(t_)));
                const T c2 = T{1} - static_cast<T>(std::pow(cfg_.beta2, double(t_)));
                for (std::size_t i = 0; i < values.size(); ++i) {
                    const T g = gbuf.empty() ? T{0} : gbuf[i];
                    s.m[i] = b1 * s.m[i] + (T{1} - b1) * g;
                    s.v[i] = b2 * s.v[i] + (T{1} - b2) * g * g;
                    const T mhat = s.m[i] / c1;
                    const T vhat = s.v[i] / c2;
                    values[i] -= lr * mhat / (std::sqrt(vhat) + eps);
                }
            } else {
                const T mom = static_cast<T>(cfg_.momentum);
                for (std::size_t i = 0; i < values.size(); ++i) {
                    const T g = gbuf.empty() ? T{0} : gbuf[i];
                    s.m[i] = mom * s.m[i] + g;
                    values[i] -= lr * s.m[i];
                }
            }
        }
    }

    std::size_t steps_taken() const { return t_; }

private:
    struct Slot {
        Parameter<T>* param = nullptr;
        std::vector<T> m, v;
        bool decay_enabled = false;
    };

    static bool decays(const std::string& name) {
        auto ends = [&](const char* s) {
            const std::size_t n = std::string(s).size();
            return name.size() >= n && name.compare(name.size() - n, n, s) == 0;
        };
        return !(ends(".bias") || ends(".shift") || name == "prompts" || name == "alpha");
    }

    TrainConfig cfg_;
    std::vector<Slot> slots_;
    std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Evaluation

// Top-1 accuracy of a forward callable (batch image tensor -> logits) on
// a dataset, in deterministic inference mode (no graph recording).
template <typename T, typename ForwardFn>
double evaluate_forward(ForwardFn&& forward, const Dataset& ds, std::size_t batch_size = 64) {
    if (ds.size() == 0) throw ContractError("evaluate called on an empty dataset");
    std::size_t correct = 0;
    for (std::size_t start = 0; start < ds.size(); start += batch_size) {
        const std::size_t count = std::min(batch_size, ds.size() - start);
        std::vector<std::size_t> idx(count);
        for (std::size_t i = 0; i < count; ++i) idx[i] = start + i;
        auto logits = forward(batch_images<T>(ds, idx));
        const std::size_t classes = logits.dim(1);
        auto lv = logits.values();
        for (std::size_t i = 0; i < count; ++i) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < classes; ++c) {
                if (lv[i * classes + c] > lv[i * classes + best]) best = c;
            }
            if (static_cast<int>(best) == ds.items[idx[i]].label) ++correct;
        }
    }
    return double(correct) / double(ds.size());
}

template <typename T>
double evaluate(const DownstreamModel<T>& model, const Dataset& ds,
                std::size_t batch_size = 64) {
    return evaluate_forward<T>([&](const Tensor<T>& b) { return model.forward(b); }, ds,
                               batch_size);
}

// ---------------------------------------------------------------------------
// Training loops

namespace detail {

template <typename T>
std::vector<std::vector<T>> snapshot_trainable(const ParameterStore<T>& store) {
    std::vector<std::vector<T>> snap;
    for (const auto& p : store.all()) {
        if (!p.trainable) continue;
        snap.emplace_back(p.value.values().begin(), p.value.values().end());
    }
    return snap;
}

template <typename T>
void restore_trainable(ParameterStore<T>& store, const std::vector<std::vector<T>>& snap) {
    std::size_t j = 0;
    for (auto& p : store.all()) {
        if (!p.trainable) continue;
        std::copy(snap[j].begin(), snap[j].end(), p.value.values().begin());
        ++j;
    }
}

}  // namespace detail

// Downstream adaptation: cross-entropy over masked-trainable parameters,
// best-val-epoch parameters used for the final test evaluation.
template <typename T>
MetricsLog run_training(DownstreamModel<T>& model, const Dataset& train_set,
                        const Dataset& val_set, const Dataset& test_set,
                        const TrainConfig& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    cfg.validate();
    MetricsLog log;
    log.trainable_params = count_trainable(model).total;

    MaskedOptimizer<T> opt(model.params(), cfg);
    Rng shuffle_rng(derive_seed(cfg.seed, 0xba7c4));
    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    double best_val = -1.0;
    std::vector<std::vector<T>> best_snapshot;
    std::size_t global_step = 0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t count = std::min(cfg.batch_size, order.size() - start);
            std::vector<std::size_t> batch(order.begin() + start,
                                           order.begin() + start + count);
            opt.zero_grads();
            GraphScope<T> scope;
            auto images = batch_images<T>(train_set, batch);
            auto logits = model.forward(images);
            auto labels = batch_labels(train_set, batch);
            auto loss = cross_entropy(logits, labels);
            const double loss_value = static_cast<double>(loss.item());
            if (!std::isfinite(loss_value)) {
                throw NumericError("loss diverged at step " + std::to_string(global_step));
            }
            scope.backward(loss);
            opt.step();
            ++global_step;

            loss_sum += loss_value * double(count);
            auto lv = logits.values();
            const std::size_t classes = logits.dim(1);
            for (std::size_t i = 0; i < count; ++i) {
                std::size_t best = 0;
                for (std::size_t c = 1; c < classes; ++c) {
                    if (lv[i * classes + c] > lv[i * classes + best]) best = c;
                }
                if (static_cast<int>(best) == labels[i]) ++correct;
            }
        }
        EpochMetrics em;
        em.epoch = epoch;
        em.train_loss = loss_sum / double(train_set.size());
        em.train_acc = double(correct) / double(train_set.size());
        em.val_acc = val_set.size() ? evaluate(model, val_set) : 0.0;
        log.epochs.push_back(em);
        if (em.val_acc > best_val) {
            best_val = em.val_acc;
            best_snapshot = detail::snapshot_trainable(model.params());
        }
    }
    if (!best_snapshot.empty()) detail::restore_trainable(model.params(), best_snapshot);
    log.test_acc = test_set.size() ? evaluate(model, test_set) : 0.0;
    log.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return log;
}

struct SeedStats {
    double mean = 0.0;
    double stddev = 0.0;  // population
    std::vector<double> accs;
    std::vector<MetricsLog> logs;
};

// Full independent runs, one per seed; mean and population stddev of the
// final test accuracy.
template <typename RunFn>
SeedStats run_with_seeds(RunFn&& run_one, const std::vector<std::uint64_t>& seeds) {
    if (seeds.empty()) throw ConfigError("run_with_seeds needs at least one seed");
    SeedStats stats;
    for (std::uint64_t s : seeds) {
        MetricsLog log = run_one(s);
        stats.accs.push_back(log.test_acc);
        stats.logs.push_back(std::move(log));
    }
    for (double a : stats.accs) stats.mean += a;
    stats.mean /= double(stats.accs.size());
    double var = 0.0;
    for (double a : stats.accs) var += (a - stats.mean) * (a - stats.mean);
    stats.stddev = std::sqrt(var / double(stats.accs.size()));
    return stats;
}

}  // namespace petlab
