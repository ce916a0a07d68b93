#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "petlab/errors.hpp"
#include "petlab/tensor.hpp"

namespace petlab {

enum class DatasetFamily { upstream_shapes, downstream_variant };

// Deterministic synthetic classification task. generator_seed fully
// determines every pixel; `variant` distinguishes sibling downstream
// tasks drawn from shifted rendering distributions.
struct DatasetSpec {
    DatasetFamily family = DatasetFamily::upstream_shapes;
    std::size_t num_classes = 8;
    std::size_t n_train = 512;
    std::size_t n_test = 256;
    std::size_t channels = 3;
    std::size_t image_h = 16;
    std::size_t image_w = 16;
    std::uint64_t generator_seed = 1;
    double instance_noise = 0.0;  // probability that a label is re-drawn uniformly
    std::uint64_t variant = 0;

    void validate() const {
        if (num_classes == 0) throw ConfigError("dataset needs at least one class");
        if (channels != 3) throw ConfigError("generators render 3-channel images");
        if (image_h < 8 || image_w < 8) {
            throw ConfigError("image too small for shape rendering (min 8x8)");
        }
        if (instance_noise < 0.0 || instance_noise > 1.0) {
            throw ConfigError("instance_noise must be in [0,1]");
        }
    }
};

struct LabeledImage {
    std::vector<float> pixels;  // [C,H,W] row-major, values in [0,1]
    int label = 0;
};

struct Dataset {
    std::size_t channels = 3;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<LabeledImage> items;

    std::size_t size() const { return items.size(); }
    std::size_t pixel_count() const { return channels * height * width; }
};

struct TaskData {
    Dataset train;
    Dataset test;
};

// Parametric shapes (shape type x color bin) with per-instance position
// and scale jitter. downstream_variant families shift the palette and
// background so downstream != upstream.
TaskData generate_synthetic(const DatasetSpec& spec);

// Label = conjunction of a shape template and the quadrant of a marker
// patch: label = (template + quadrant) mod num_classes. With the cue
// disabled the marker is dropped and the label is the template index.
TaskData instance_cue_task(const DatasetSpec& spec, bool cue_enabled = true);

// Class-stratified subset of floor(fraction * n) examples, per-class
// counts within +-1, nested across fractions under the same seed.
Dataset subsample(const Dataset& dataset, double fraction, std::uint64_t seed);

// Average-pool to a fixed 4x4 spatial grid per channel and flatten;
// the Meta-Net and side-network input representation (3*16 = 48 dims).
std::vector<float> pooled_features(const LabeledImage& image, std::size_t channels,
                                   std::size_t height, std::size_t width);

constexpr std::size_t kPoolGrid = 4;

inline std::size_t pooled_dim(std::size_t channels) { return channels * kPoolGrid * kPoolGrid; }

// ---------------------------------------------------------------------------
// Tensor bridges

template <typename T>
Tensor<T> batch_images(const Dataset& ds, const std::vector<std::size_t>& indices) {
    Tensor<T> out({indices.size(), ds.channels, ds.height, ds.width});
    auto v = out.values();
    const std::size_t n = ds.pixel_count();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto& px = ds.items[indices[i]].pixels;
        for (std::size_t j = 0; j < n; ++j) v[i * n + j] = static_cast<T>(px[j]);
    }
    return out;
}

template <typename T>
Tensor<T> batch_pooled(const Dataset& ds, const std::vector<std::size_t>& indices) {
    const std::size_t dim = pooled_dim(ds.channels);
    Tensor<T> out({indices.size(), dim});
    auto v = out.values();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        auto f = pooled_features(ds.items[indices[i]], ds.channels, ds.height, ds.width);
        for (std::size_t j = 0; j < dim; ++j) v[i * dim + j] = static_cast<T>(f[j]);
    }
    return out;
}

inline std::vector<int> batch_labels(const Dataset& ds,
                                     const std::vector<std::size_t>& indices) {
    std::vector<int> labels(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) labels[i] = ds.items[indices[i]].label;
    return labels;
}

}  // namespace petlab
