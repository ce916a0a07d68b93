#pragma once

#include "petlab/training.hpp"
#include "petlab/vit.hpp"

namespace petlab {

// Stand-in for large-scale pretraining: trains a fresh backbone (all
// parameters) on the upstream synthetic task until train accuracy
// reaches `target_acc` or the epoch cap. The returned store is the
// frozen backbone for every downstream experiment.
//
// epochs = 0 returns the initialization unchanged. Otherwise, finishing
// below `min_acc` train accuracy raises TrainingError (broken
// optimization, not a usable backbone).
template <typename T>
ParameterStore<T> pretrain_backbone(const ViTConfig& cfg, const TaskData& upstream,
                                    const TrainConfig& train_cfg, double target_acc = 0.95,
                                    double min_acc = 0.60, MetricsLog* out_log = nullptr) {
    cfg.validate();
    train_cfg.validate();
    for (const auto& item : upstream.train.items) {
        if (item.label < 0 || static_cast<std::size_t>(item.label) >= cfg.num_classes) {
            throw ConfigError("upstream label " + std::to_string(item.label) +
                              " outside the configured " + std::to_string(cfg.num_classes) +
                              "-class head");
        }
    }

    auto store = init_backbone<T>(cfg, train_cfg.seed);
    MetricsLog log;
    log.trainable_params = store.total_size();
    if (train_cfg.epochs == 0) {
        if (out_log) *out_log = log;
        return store;
    }

    MaskedOptimizer<T> opt(store, train_cfg);
    Rng shuffle_rng(derive_seed(train_cfg.seed, 0x9e7));
    const Dataset& train_set = upstream.train;
    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    auto forward = [&](const Tensor<T>& images) { return vit_forward(images, store, cfg); };

    double measured_acc = 0.0;
    std::size_t global_step = 0;
    for (std::size_t epoch = 0; epoch < train_cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += train_cfg.batch_size) {
            const std::size_t count = std::min(train_cfg.batch_size, order.size() - start);
            std::vector<std::size_t> batch(order.begin() + start,
                                           order.begin() + start + count);
            opt.zero_grads();
            GraphScope<T> scope;
            auto loss = cross_entropy(forward(batch_images<T>(train_set, batch)),
                                      batch_labels(train_set, batch));
            const double loss_value = static_cast<double>(loss.item());
            if (!std::isfinite(loss_value)) {
                throw NumericError("pretraining loss diverged at step " +
                                   std::to_string(global_step));
            }
            scope.backward(loss);
            opt.step();
            ++global_step;
            loss_sum += loss_value * double(count);
        }
        measured_acc = evaluate_forward<T>(forward, train_set);
        EpochMetrics em;
        em.epoch = epoch;
        em.train_loss = loss_sum / double(train_set.size());
        em.train_acc = measured_acc;
        log.epochs.push_back(em);
        if (measured_acc >= target_acc) break;
    }
    if (measured_acc < min_acc) {
        throw TrainingError("pretraining reached only " + std::to_string(measured_acc) +
                            " train accuracy (required " + std::to_string(min_acc) + ")");
    }
    if (upstream.test.size()) log.test_acc = evaluate_forward<T>(forward, upstream.test);
    if (out_log) *out_log = log;
    return store;
}

}  // namespace petlab
