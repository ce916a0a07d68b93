#include "petlab/datasets.hpp"

#include <algorithm>
#include <cmath>

#include "petlab/rng.hpp"

namespace petlab {

namespace {

constexpr int kShapeKinds = 6;  // disk, square, triangle, ring, cross, diamond
constexpr double kGolden = 0.61803398874989484820;

struct Rgb {
    double r = 0, g = 0, b = 0;
};

Rgb hsv_to_rgb(double h, double s, double v) {
    h = h - std::floor(h);
    const double c = v * s;
    const double hp = h * 6.0;
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1) {
        r = c, g = x;
    } else if (hp < 2) {
        r = x, g = c;
    } else if (hp < 3) {
        g = c, b = x;
    } else if (hp < 4) {
        g = x, b = c;
    } else if (hp < 5) {
        r = x, b = c;
    } else {
        r = c, b = x;
    }
    const double m = v - c;
    return {r + m, g + m, b + m};
}

// Signed distance in unit shape coordinates; negative inside.
double shape_sdf(int kind, double x, double y) {
    const double ax = std::abs(x), ay = std::abs(y);
    switch (kind) {
        case 0:  // disk
            return std::sqrt(x * x + y * y) - 1.0;
        case 1:  // square
            return std::max(ax, ay) - 0.9;
        case 2:  // triangle, point up
            return std::max(0.866 * x + 0.5 * y,
                            std::max(-0.866 * x + 0.5 * y, -y - 0.45)) -
                   0.5;
        case 3:  // ring
            return std::abs(std::sqrt(x * x + y * y) - 0.72) - 0.26;
        case 4:  // cross
            return std::min(std::max(ax - 0.34, ay - 1.0), std::max(ax - 1.0, ay - 0.34));
        default:  // diamond
            return (ax + ay) - 1.1;
    }
}

struct RenderStyle {
    Rgb bg_top, bg_bottom;
    double noise_amp = 0.04;
    double hue_offset = 0.0;
    double saturation = 0.85;
    double value = 0.80;
    bool gradient = false;
};

RenderStyle family_style(DatasetFamily family, std::uint64_t variant) {
    RenderStyle st;
    if (family == DatasetFamily::upstream_shapes) {
        st.bg_top = st.bg_bottom = {0.12, 0.13, 0.15};
        st.noise_amp = 0.04;
        st.hue_offset = 0.0;
        st.saturation = 0.85;
        st.value = 0.80;
        st.gradient = false;
    } else {
        const double vh = std::fmod(0.37 + 0.211 * double(variant), 1.0);
        st.bg_top = hsv_to_rgb(vh, 0.30, 0.28);
        st.bg_bottom = hsv_to_rgb(vh + 0.08, 0.25, 0.12);
        st.noise_amp = 0.03;
        st.hue_offset = 0.31 + 0.17 * double(variant);
        st.saturation = 0.70;
        st.value = 0.85;
        st.gradient = true;
    }
    return st;
}

struct Instance {
    int shape_kind = 0;
    Rgb color;
    double cx = 0, cy = 0, radius = 1;
    bool marker = false;
    double mx = 0, my = 0, marker_half = 1.5;
};

void render(LabeledImage& out, std::size_t H, std::size_t W, const RenderStyle& st,
            const Instance& in, Rng& rng) {
    out.pixels.assign(3 * H * W, 0.0f);
    for (std::size_t py = 0; py < H; ++py) {
        const double ty = (double(py) + 0.5) / double(H);
        for (std::size_t px = 0; px < W; ++px) {
            const double x = double(px) + 0.5, y = double(py) + 0.5;
            Rgb c;
            c.r = st.bg_top.r + (st.bg_bottom.r - st.bg_top.r) * (st.gradient ? ty : 0.0);
            c.g = st.bg_top.g + (st.bg_bottom.g - st.bg_top.g) * (st.gradient ? ty : 0.0);
            c.b = st.bg_top.b + (st.bg_bottom.b - st.bg_top.b) * (st.gradient ? ty : 0.0);

            const double d =
                shape_sdf(in.shape_kind, (x - in.cx) / in.radius, (y - in.cy) / in.radius) *
                in.radius;
            const double alpha = std::clamp(0.5 - d, 0.0, 1.0);
            c.r += (in.color.r - c.r) * alpha;
            c.g += (in.color.g - c.g) * alpha;
            c.b += (in.color.b - c.b) * alpha;

            if (in.marker) {
                const double md =
                    std::max(std::abs(x - in.mx), std::abs(y - in.my)) - in.marker_half;
                const double ma = std::clamp(0.5 - md, 0.0, 1.0);
                c.r += (1.0 - c.r) * ma;
                c.g += (1.0 - c.g) * ma;
                c.b += (1.0 - c.b) * ma;
            }

            const std::size_t idx = py * W + px;
            const double nr = st.noise_amp * (rng.uniform() - 0.5);
            const double ng = st.noise_amp * (rng.uniform() - 0.5);
            const double nb = st.noise_amp * (rng.uniform() - 0.5);
            out.pixels[0 * H * W + idx] = static_cast<float>(std::clamp(c.r + nr, 0.0, 1.0));
            out.pixels[1 * H * W + idx] = static_cast<float>(std::clamp(c.g + ng, 0.0, 1.0));
            out.pixels[2 * H * W + idx] = static_cast<float>(std::clamp(c.b + nb, 0.0, 1.0));
        }
    }
}

Instance draw_instance(int template_idx, const RenderStyle& st, std::size_t H, std::size_t W,
                       Rng& rng) {
    Instance in;
    in.shape_kind = template_idx % kShapeKinds;
    // every template gets its own hue step, so classes differ in shape
    // and color simultaneously
    in.color = hsv_to_rgb(st.hue_offset + kGolden * double(template_idx), st.saturation,
                          st.value);
    const double side = double(std::min(H, W));
    in.radius = side * rng.uniform(0.26, 0.38);
    in.cx = double(W) * 0.5 + side * rng.uniform(-0.10, 0.10);
    in.cy = double(H) * 0.5 + side * rng.uniform(-0.10, 0.10);
    return in;
}

// Stream labels: family/variant, then split, then per-example index.
// Upstream and downstream chains differ even for equal generator seeds.
std::uint64_t split_stream(const DatasetSpec& spec, std::uint64_t task_tag,
                           std::uint64_t split_tag) {
    std::uint64_t s = derive_seed(spec.generator_seed, task_tag * 7919 + spec.variant);
    return derive_seed(s, split_tag);
}

Dataset generate_split(const DatasetSpec& spec, std::size_t count, std::uint64_t stream,
                       bool cue_task, bool cue_enabled) {
    Dataset ds;
    ds.channels = spec.channels;
    ds.height = spec.image_h;
    ds.width = spec.image_w;
    ds.items.resize(count);
    const RenderStyle st = family_style(spec.family, spec.variant);
    const std::size_t k = spec.num_classes;
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng(derive_seed(stream, i));
        LabeledImage& img = ds.items[i];
        const int label = static_cast<int>(i % k);
        int template_idx = label;
        RenderStyle style = st;
        if (cue_task) {
            // faint label-keyed background tint: keeps the task solvable
            // from raw pixels even though the marker/template conjunction
            // carries most of the label information
            const Rgb tint = hsv_to_rgb(kGolden * double(label), 0.9, 1.0);
            style.bg_top.r = std::clamp(style.bg_top.r + 0.06 * (tint.r - 0.5), 0.0, 1.0);
            style.bg_top.g = std::clamp(style.bg_top.g + 0.06 * (tint.g - 0.5), 0.0, 1.0);
            style.bg_top.b = std::clamp(style.bg_top.b + 0.06 * (tint.b - 0.5), 0.0, 1.0);
            style.bg_bottom.r =
                std::clamp(style.bg_bottom.r + 0.06 * (tint.r - 0.5), 0.0, 1.0);
            style.bg_bottom.g =
                std::clamp(style.bg_bottom.g + 0.06 * (tint.g - 0.5), 0.0, 1.0);
            style.bg_bottom.b =
                std::clamp(style.bg_bottom.b + 0.06 * (tint.b - 0.5), 0.0, 1.0);
        }
        Instance in;
        if (cue_task && cue_enabled) {
            const int quadrant = static_cast<int>(rng.below(4));
            template_idx =
                ((label - quadrant) % static_cast<int>(k) + static_cast<int>(k)) %
                static_cast<int>(k);
            in = draw_instance(template_idx, style, spec.image_h, spec.image_w, rng);
            in.marker = true;
            const double qx = (quadrant % 2 == 0) ? 0.25 : 0.75;
            const double qy = (quadrant / 2 == 0) ? 0.25 : 0.75;
            in.mx = double(spec.image_w) * qx + rng.uniform(-1.0, 1.0);
            in.my = double(spec.image_h) * qy + rng.uniform(-1.0, 1.0);
        } else {
            in = draw_instance(template_idx, style, spec.image_h, spec.image_w, rng);
        }
        img.label = label;
        if (spec.instance_noise > 0.0 && rng.uniform() < spec.instance_noise) {
            img.label = static_cast<int>(rng.below(k));
        }
        render(img, spec.image_h, spec.image_w, style, in, rng);
    }
    return ds;
}

}  // namespace

TaskData generate_synthetic(const DatasetSpec& spec) {
    spec.validate();
    TaskData task;
    const std::uint64_t family_tag = spec.family == DatasetFamily::upstream_shapes ? 11 : 13;
    task.train =
        generate_split(spec, spec.n_train, split_stream(spec, family_tag, 0), false, false);
    task.test =
        generate_split(spec, spec.n_test, split_stream(spec, family_tag, 1), false, false);
    return task;
}

TaskData instance_cue_task(const DatasetSpec& spec, bool cue_enabled) {
    spec.validate();
    TaskData task;
    task.train =
        generate_split(spec, spec.n_train, split_stream(spec, 17, 0), true, cue_enabled);
    task.test = generate_split(spec, spec.n_test, split_stream(spec, 17, 1), true, cue_enabled);
    return task;
}

Dataset subsample(const Dataset& dataset, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0) || fraction > 1.0) {
        throw ConfigError("subsample fraction must be in (0, 1]");
    }
    const std::size_t n = dataset.size();
    const std::size_t take = static_cast<std::size_t>(std::floor(fraction * double(n)));
    if (take == 0) throw ConfigError("subsample would produce an empty dataset");

    // group example indices per class, in dataset order
    int max_label = 0;
    for (const auto& it : dataset.items) max_label = std::max(max_label, it.label);
    std::vector<std::vector<std::size_t>> per_class(static_cast<std::size_t>(max_label) + 1);
    for (std::size_t i = 0; i < n; ++i) {
        per_class[static_cast<std::size_t>(dataset.items[i].label)].push_back(i);
    }
    std::vector<std::size_t> classes;
    for (std::size_t c = 0; c < per_class.size(); ++c) {
        if (!per_class[c].empty()) classes.push_back(c);
    }
    const std::size_t k = classes.size();

    // per-class order is a fixed shuffle independent of the fraction, so
    // smaller fractions are prefixes of larger ones (nested subsets)
    const std::size_t base = take / k, extra = take % k;
    std::vector<std::size_t> chosen;
    for (std::size_t ci = 0; ci < k; ++ci) {
        auto order = per_class[classes[ci]];
        Rng rng(derive_seed(seed, classes[ci]));
        rng.shuffle(order);
        std::size_t want = base + (ci < extra ? 1 : 0);
        want = std::min(want, order.size());
        chosen.insert(chosen.end(), order.begin(), order.begin() + want);
    }
    std::sort(chosen.begin(), chosen.end());

    Dataset out;
    out.channels = dataset.channels;
    out.height = dataset.height;
    out.width = dataset.width;
    out.items.reserve(chosen.size());
    for (std::size_t i : chosen) out.items.push_back(dataset.items[i]);
    return out;
}

std::vector<float> pooled_features(const LabeledImage& image, std::size_t channels,
                                   std::size_t height, std::size_t width) {
    if (height % kPoolGrid != 0 || width % kPoolGrid != 0) {
        throw ConfigError("image size must be divisible by the 4x4 pooling grid");
    }
    const std::size_t ch = height / kPoolGrid, cw = width / kPoolGrid;
    std::vector<float> out(channels * kPoolGrid * kPoolGrid, 0.0f);
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t gy = 0; gy < kPoolGrid; ++gy) {
            for (std::size_t gx = 0; gx < kPoolGrid; ++gx) {
                double acc = 0.0;
                for (std::size_t y = 0; y < ch; ++y) {
                    for (std::size_t x = 0; x < cw; ++x) {
                        acc += image.pixels[c * height * width + (gy * ch + y) * width +
                                            gx * cw + x];
                    }
                }
                out[c * kPoolGrid * kPoolGrid + gy * kPoolGrid + gx] =
                    static_cast<float>(acc / double(ch * cw));
            }
        }
    }
    return out;
}

}  // namespace petlab
