#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "petlab/errors.hpp"
#include "petlab/ops.hpp"
#include "petlab/params.hpp"
#include "petlab/rng.hpp"

namespace petlab {

struct ViTConfig {
    std::size_t num_layers = 4;
    std::size_t width = 32;  // d
    std::size_t num_heads = 4;
    std::size_t image_channels = 3;
    std::size_t image_h = 16;
    std::size_t image_w = 16;
    std::size_t patch_h = 4;
    std::size_t patch_w = 4;
    std::size_t num_classes = 8;  // size of the head stored with the backbone

    std::size_t patch_count() const { return (image_h / patch_h) * (image_w / patch_w); }
    std::size_t patch_dim() const { return image_channels * patch_h * patch_w; }
    std::size_t head_dim() const { return width / num_heads; }
    std::size_t mlp_dim() const { return 4 * width; }
    // token count entering every layer: 1 + p + m (p = 0 unprompted)
    std::size_t sequence_length(std::size_t prompt_count = 0) const {
        return 1 + prompt_count + patch_count();
    }

    void validate() const {
        if (width == 0 || num_heads == 0 || width % num_heads != 0) {
            throw ConfigError("width must be a positive multiple of num_heads");
        }
        if (patch_h == 0 || patch_w == 0 || image_h % patch_h != 0 || image_w % patch_w != 0) {
            throw ConfigError("patch size must divide image size");
        }
        if (num_classes == 0) throw ConfigError("num_classes must be positive");
    }

    // Large enough for nontrivial attention, small enough for
    // finite-difference suites.
    static ViTConfig desk_default() { return ViTConfig{}; }

    // 2-layer, d=16, heads=4, 8x8 image with 2x2 patches (m=16); the
    // gradient-check configuration.
    static ViTConfig tiny() {
        ViTConfig c;
        c.num_layers = 2;
        c.width = 16;
        c.num_heads = 4;
        c.image_h = c.image_w = 8;
        c.patch_h = c.patch_w = 2;
        return c;
    }
};

inline std::string layer_prefix(std::size_t layer) {
    return "layer" + std::to_string(layer) + ".";
}

template <typename T>
constexpr T layer_norm_eps() {
    return static_cast<T>(1e-6);
}

// Optional transform applied to a residual-branch output before the
// residual add; how the adapter method hooks into frozen layers.
template <typename T>
using SublayerHook =
    std::function<Tensor<T>(const Tensor<T>& branch, std::size_t layer, bool after_mlp)>;

namespace detail {

template <typename T>
Tensor<T> trunc_normal_tensor(Shape shape, Rng& rng, double stddev = 0.02) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.values()) v = static_cast<T>(rng.trunc_normal(stddev));
    return t;
}

}  // namespace detail

// Fresh backbone at initialization: truncated-normal(0.02) projections,
// zero biases, unit LayerNorm scales.
template <typename T>
ParameterStore<T> init_backbone(const ViTConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, 0x5eed));
    ParameterStore<T> store;
    const std::size_t d = cfg.width;

    store.add("patch.weight", detail::trunc_normal_tensor<T>({d, cfg.patch_dim()}, rng));
    store.add("patch.bias", Tensor<T>({d}));
    store.add("cls", detail::trunc_normal_tensor<T>({d}, rng));
    store.add("pos_embed",
              detail::trunc_normal_tensor<T>({1 + cfg.patch_count(), d}, rng));
    for (std::size_t i = 0; i < cfg.num_layers; ++i) {
        const std::string p = layer_prefix(i);
        store.add(p + "ln1.scale", Tensor<T>({d}, std::vector<T>(d, T{1})));
        store.add(p + "ln1.shift", Tensor<T>({d}));
        for (const char* proj : {"q", "k", "v", "o"}) {
            store.add(p + "attn." + proj + ".weight",
                      detail::trunc_normal_tensor<T>({d, d}, rng));
            store.add(p + "attn." + proj + ".bias", Tensor<T>({d}));
        }
        store.add(p + "ln2.scale", Tensor<T>({d}, std::vector<T>(d, T{1})));
        store.add(p + "ln2.shift", Tensor<T>({d}));
        store.add(p + "mlp.up.weight", detail::trunc_normal_tensor<T>({cfg.mlp_dim(), d}, rng));
        store.add(p + "mlp.up.bias", Tensor<T>({cfg.mlp_dim()}));
        store.add(p + "mlp.down.weight",
                  detail::trunc_normal_tensor<T>({d, cfg.mlp_dim()}, rng));
        store.add(p + "mlp.down.bias", Tensor<T>({d}));
    }
    store.add("head.weight", detail::trunc_normal_tensor<T>({cfg.num_classes, d}, rng));
    store.add("head.bias", Tensor<T>({cfg.num_classes}));
    return store;
}

// Patch embedding: flatten each patch, project to d, add the learned
// positional rows 1..m. Row 0 of pos_embed belongs to the [CLS] slot and
// is added when [CLS] is prepended.
// [C,H,W] -> [m,d] or [B,C,H,W] -> [B,m,d].
template <typename T>
Tensor<T> patch_embed(const Tensor<T>& image, const ParameterStore<T>& weights,
                      const ViTConfig& cfg) {
    const bool batched = image.rank() == 4;
    if ((batched ? image.rank() : image.rank() + 1) != 4 ||
        image.dim(batched ? 1 : 0) != cfg.image_channels ||
        image.dim(batched ? 2 : 1) != cfg.image_h || image.dim(batched ? 3 : 2) != cfg.image_w) {
        throw ConfigError("image shape " + shape_str(image.shape()) +
                          " does not match configured " + std::to_string(cfg.image_channels) +
                          "x" + std::to_string(cfg.image_h) + "x" + std::to_string(cfg.image_w));
    }
    auto patches = extract_patches(image, cfg.patch_h, cfg.patch_w);
    auto projected =
        linear(patches, weights.tensor("patch.weight"), weights.tensor("patch.bias"));
    auto pos = slice(weights.tensor("pos_embed"), 0, 1, cfg.patch_count());
    return add_broadcast(projected, pos);
}

// [CLS] tokens for a batch: cls + pos_embed row 0, shaped [B, 1, d].
template <typename T>
Tensor<T> cls_tokens(const ParameterStore<T>& weights, const ViTConfig& cfg, std::size_t batch) {
    auto row = add(reshape(weights.tensor("cls"), {1, cfg.width}),
                   slice(weights.tensor("pos_embed"), 0, 0, 1));
    return repeat_axis(reshape(row, {1, 1, cfg.width}), 0, batch);
}

// One pre-norm encoder block: x + MHSA(LN(x)), then x + MLP(LN(x)).
// Attention is full: every token attends to every token, so prompts
// interact with patches and [CLS]. Accepts [T,d] or [B,T,d].
template <typename T>
Tensor<T> encoder_layer(const Tensor<T>& tokens, const ParameterStore<T>& weights,
                        const ViTConfig& cfg, std::size_t layer,
                        const SublayerHook<T>* hook = nullptr) {
    const bool batched = tokens.rank() == 3;
    if (!batched && tokens.rank() != 2) {
        throw ShapeError("encoder_layer expects [T,d] or [B,T,d], got " +
                         shape_str(tokens.shape()));
    }
    Tensor<T> x = batched ? tokens
                          : reshape(tokens, {1, tokens.dim(0), tokens.dim(1)});
    const std::size_t B = x.dim(0), S = x.dim(1), d = cfg.width;
    if (d != x.dim(2)) {
        throw ShapeError("token width " + std::to_string(x.dim(2)) +
                         " does not match model width " + std::to_string(d));
    }
    const std::size_t H = cfg.num_heads, dh = cfg.head_dim();
    const std::string p = layer_prefix(layer);
    const T eps = layer_norm_eps<T>();

    auto h1 = layer_norm(x, weights.tensor(p + "ln1.scale"), weights.tensor(p + "ln1.shift"),
                         eps);
    auto q = linear(h1, weights.tensor(p + "attn.q.weight"), weights.tensor(p + "attn.q.bias"));
    auto k = linear(h1, weights.tensor(p + "attn.k.weight"), weights.tensor(p + "attn.k.bias"));
    auto v = linear(h1, weights.tensor(p + "attn.v.weight"), weights.tensor(p + "attn.v.bias"));
    auto q4 = permute(reshape(q, {B, S, H, dh}), {0, 2, 1, 3});
    auto k4t = permute(reshape(k, {B, S, H, dh}), {0, 2, 3, 1});
    auto v4 = permute(reshape(v, {B, S, H, dh}), {0, 2, 1, 3});
    auto scores = scale(matmul(q4, k4t), static_cast<T>(1.0 / std::sqrt(double(dh))));
    auto probs = softmax(scores);
    auto ctx = reshape(permute(matmul(probs, v4), {0, 2, 1, 3}), {B, S, d});
    auto attn_out =
        linear(ctx, weights.tensor(p + "attn.o.weight"), weights.tensor(p + "attn.o.bias"));
    if (hook) attn_out = (*hook)(attn_out, layer, false);
    x = add(x, attn_out);

    auto h2 = layer_norm(x, weights.tensor(p + "ln2.scale"), weights.tensor(p + "ln2.shift"),
                         eps);
    auto up = gelu(linear(h2, weights.tensor(p + "mlp.up.weight"),
                          weights.tensor(p + "mlp.up.bias")));
    auto mlp_out = linear(up, weights.tensor(p + "mlp.down.weight"),
                          weights.tensor(p + "mlp.down.bias"));
    if (hook) mlp_out = (*hook)(mlp_out, layer, true);
    x = add(x, mlp_out);

    return batched ? x : reshape(x, {S, d});
}

// Runs all N layers, asserting the sequence-length law at every layer
// boundary.
template <typename T>
Tensor<T> encode_tokens(Tensor<T> tokens, const ParameterStore<T>& weights,
                        const ViTConfig& cfg, const SublayerHook<T>* hook = nullptr) {
    const std::size_t seq_axis = tokens.rank() - 2;
    const std::size_t expected = tokens.dim(seq_axis);
    for (std::size_t i = 0; i < cfg.num_layers; ++i) {
        tokens = encoder_layer(tokens, weights, cfg, i, hook);
        if (tokens.dim(seq_axis) != expected) {
            throw ContractError("sequence length changed across layer " + std::to_string(i) +
                                ": " + std::to_string(expected) + " -> " +
                                std::to_string(tokens.dim(seq_axis)));
        }
    }
    return tokens;
}

// Final [CLS] embedding x_N: [B, S, d] -> [B, d].
template <typename T>
Tensor<T> cls_output(const Tensor<T>& tokens) {
    return reshape(slice(tokens, tokens.rank() - 2, 0, 1), {tokens.dim(0), tokens.dim(2)});
}

// Plain ViT: stack [x_0, E_0], run N layers, Head(x_N).
// [C,H,W] -> [num_classes] or [B,C,H,W] -> [B, num_classes].
template <typename T>
Tensor<T> vit_forward(const Tensor<T>& image, const ParameterStore<T>& weights,
                      const ViTConfig& cfg) {
    const bool batched = image.rank() == 4;
    auto imgs = batched ? image
                        : reshape(image, {1, cfg.image_channels, cfg.image_h, cfg.image_w});
    auto patches = patch_embed(imgs, weights, cfg);
    auto tokens = concat_seq<T>({cls_tokens(weights, cfg, imgs.dim(0)), patches});
    tokens = encode_tokens(tokens, weights, cfg);
    auto logits =
        linear(cls_output(tokens), weights.tensor("head.weight"), weights.tensor("head.bias"));
    return batched ? logits : reshape(logits, {cfg.num_classes});
}

}  // namespace petlab
