#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "petlab/datasets.hpp"
#include "petlab/errors.hpp"
#include "petlab/ops.hpp"
#include "petlab/params.hpp"
#include "petlab/vit.hpp"

namespace petlab {

enum class MethodKind { full, linear, partial_k, mlp_k, bias, adapter, sidetune, vpt, dvpt };
enum class DvptMode { shared, specific };

inline std::string method_kind_name(MethodKind kind) {
    switch (kind) {
        case MethodKind::full: return "full";
        case MethodKind::linear: return "linear";
        case MethodKind::partial_k: return "partial-k";
        case MethodKind::mlp_k: return "mlp-k";
        case MethodKind::bias: return "bias";
        case MethodKind::adapter: return "adapter";
        case MethodKind::sidetune: return "sidetune";
        case MethodKind::vpt: return "vpt";
        case MethodKind::dvpt: return "dvpt";
    }
    throw ConfigError("unknown method kind");
}

inline MethodKind method_kind_from_name(const std::string& name) {
    if (name == "full") return MethodKind::full;
    if (name == "linear") return MethodKind::linear;
    if (name == "partial-k" || name == "partial_k" || name == "partial")
        return MethodKind::partial_k;
    if (name == "mlp-k" || name == "mlp_k" || name == "mlp") return MethodKind::mlp_k;
    if (name == "bias") return MethodKind::bias;
    if (name == "adapter") return MethodKind::adapter;
    if (name == "sidetune") return MethodKind::sidetune;
    if (name == "vpt") return MethodKind::vpt;
    if (name == "dvpt") return MethodKind::dvpt;
    throw ConfigError("unknown method kind: " + name);
}

struct PETLMethodConfig {
    MethodKind kind = MethodKind::linear;
    std::size_t k = 1;               // partial_k: trainable tail layers; mlp_k: head depth
    std::size_t adapter_dim = 8;     // r
    std::size_t prompt_count = 4;    // p
    std::size_t metanet_layers = 4;  // 2, 4 or 6
    DvptMode dvpt_mode = DvptMode::shared;
    std::size_t metanet_input_dim = 48;
    std::size_t metanet_hidden = 0;  // 0: use the backbone width

    void validate(const ViTConfig& cfg) const {
        switch (kind) {
            case MethodKind::partial_k:
                if (k == 0 || k > cfg.num_layers) {
                    throw ConfigError("partial_k needs 1 <= k <= num_layers");
                }
                break;
            case MethodKind::mlp_k:
                if (k == 0) throw ConfigError("mlp_k needs k >= 1");
                break;
            case MethodKind::adapter:
                if (adapter_dim == 0) throw ConfigError("adapter needs r >= 1");
                break;
            case MethodKind::vpt:
            case MethodKind::dvpt:
                if (prompt_count == 0) {
                    throw ConfigError(
                        "prompted methods need p >= 1 (use the plain backbone instead)");
                }
                if (kind == MethodKind::dvpt && metanet_layers != 2 && metanet_layers != 4 &&
                    metanet_layers != 6) {
                    throw ConfigError("metanet_layers must be one of {2, 4, 6}");
                }
                if (kind == MethodKind::dvpt &&
                    metanet_input_dim != pooled_dim(cfg.image_channels)) {
                    throw ConfigError("metanet_input_dim must equal the pooled image size " +
                                      std::to_string(pooled_dim(cfg.image_channels)));
                }
                break;
            default:
                break;
        }
    }

    std::size_t hidden_width(const ViTConfig& cfg) const {
        return metanet_hidden ? metanet_hidden : cfg.width;
    }

    // short label used in tables and file names, e.g. "dvpt-specific"
    std::string label() const {
        switch (kind) {
            case MethodKind::partial_k:
                return "partial-" + std::to_string(k);
            case MethodKind::mlp_k:
                return "mlp-" + std::to_string(k);
            case MethodKind::adapter:
                return "adapter-" + std::to_string(adapter_dim);
            case MethodKind::dvpt:
                return (dvpt_mode == DvptMode::shared ? "dvpt-shared-l" : "dvpt-specific-l") +
                       std::to_string(metanet_layers);
            default:
                return method_kind_name(kind);
        }
    }
};

// Per-parameter trainability, the unit the optimizer consults.
using TrainableMask = std::vector<std::pair<std::string, bool>>;

struct TrainableCount {
    std::size_t total = 0;
    std::map<std::string, std::size_t> by_group;
};

// Name-pure parameter grouping used by the count breakdown.
inline std::string param_group(const std::string& name) {
    auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
    auto ends = [&](const char* s) {
        const std::size_t n = std::string(s).size();
        return name.size() >= n && name.compare(name.size() - n, n, s) == 0;
    };
    if (starts("head.")) return "head";
    if (name == "prompts") return "prompts";
    if (starts("metanet.")) return "metanet";
    if (starts("adapter.")) return "adapters";
    if (starts("side.") || name == "alpha") return "side";
    if (ends(".bias") || ends(".shift")) return "biases";
    return "backbone";
}

inline bool is_backbone_param(const std::string& name) {
    const std::string g = param_group(name);
    return g == "backbone" || g == "biases";
}

// One configured transfer method over a frozen-capable backbone. Owns a
// deep copy of the backbone weights (minus the upstream head) plus the
// method's new parameters; the trainable flags are the mask.
template <typename T>
class DownstreamModel {
public:
    DownstreamModel(PETLMethodConfig method, ViTConfig backbone_cfg, std::size_t num_classes)
        : method_(std::move(method)), cfg_(backbone_cfg), num_classes_(num_classes) {}

    const PETLMethodConfig& method() const { return method_; }
    const ViTConfig& backbone_config() const { return cfg_; }
    std::size_t num_classes() const { return num_classes_; }

    ParameterStore<T>& params() { return params_; }
    const ParameterStore<T>& params() const { return params_; }

    TrainableMask mask() const {
        TrainableMask m;
        for (const auto& p : params_.all()) m.emplace_back(p.name, p.trainable);
        return m;
    }

    // Batch forward: images [B,C,H,W] -> logits [B,classes].
    Tensor<T> forward(const Tensor<T>& images) const;

    // Storage of the prompt rows most recently fed into layer 1; lets
    // tests assert structurally whether prompts depend on the image.
    const std::shared_ptr<TensorData<T>>& last_prompt_tokens() const {
        return last_prompt_tokens_;
    }

    // FNV-1a over every frozen parameter buffer; the frozen-backbone
    // immutability audits compare this across training.
    std::uint64_t frozen_checksum() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        auto mix = [&h](const void* data, std::size_t bytes) {
            const auto* b = static_cast<const unsigned char*>(data);
            for (std::size_t i = 0; i < bytes; ++i) {
                h ^= b[i];
                h *= 0x100000001b3ull;
            }
        };
        for (const auto& p : params_.all()) {
            if (p.trainable) continue;
            mix(p.name.data(), p.name.size());
            mix(p.value.values().data(), p.value.size() * sizeof(T));
        }
        return h;
    }

    template <typename U>
    friend DownstreamModel<U> build_method(const PETLMethodConfig&, const ParameterStore<U>&,
                                           const ViTConfig&, std::size_t, std::uint64_t);

private:
    PETLMethodConfig method_;
    ViTConfig cfg_;
    std::size_t num_classes_;
    ParameterStore<T> params_;
    mutable std::shared_ptr<TensorData<T>> last_prompt_tokens_;

    Tensor<T> head_forward(const Tensor<T>& features) const;
    Tensor<T> prompted_forward(const Tensor<T>& images, const Tensor<T>& prompt_tokens) const;
};

// ---------------------------------------------------------------------------
// Pieces

// Average-pool image tensors to the fixed 4x4 grid per channel and
// flatten: [B,C,H,W] -> [B, C*16]. Inputs are constants, so this runs
// outside the graph.
template <typename T>
Tensor<T> pool_to_grid(const Tensor<T>& images) {
    if (images.rank() != 4) {
        throw ShapeError("pool_to_grid expects [B,C,H,W], got " + shape_str(images.shape()));
    }
    const std::size_t B = images.dim(0), C = images.dim(1), H = images.dim(2),
                      W = images.dim(3);
    if (H % kPoolGrid != 0 || W % kPoolGrid != 0) {
        throw ConfigError("image size must be divisible by the 4x4 pooling grid");
    }
    const std::size_t ch = H / kPoolGrid, cw = W / kPoolGrid;
    const std::size_t dim = C * kPoolGrid * kPoolGrid;
    Tensor<T> out({B, dim});
    auto src = images.values();
    auto dst = out.values();
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t gy = 0; gy < kPoolGrid; ++gy) {
                for (std::size_t gx = 0; gx < kPoolGrid; ++gx) {
                    T acc{0};
                    for (std::size_t y = 0; y < ch; ++y) {
                        for (std::size_t x = 0; x < cw; ++x) {
                            acc += src[b * C * H * W + c * H * W + (gy * ch + y) * W +
                                       gx * cw + x];
                        }
                    }
                    dst[b * dim + c * kPoolGrid * kPoolGrid + gy * kPoolGrid + gx] =
                        acc / static_cast<T>(ch * cw);
                }
            }
        }
    }
    return out;
}

// Meta-Net: a stack of linear layers on pooled image features, ReLU
// between layers and no activation after the last. Shared mode emits one
// d-vector per image; specific mode emits p*d reshaped to [p, d].
// pooled: [in] or [B, in] -> pi: [d] / [p,d] or [B,d] / [B,p,d].
template <typename T>
Tensor<T> meta_net_forward(const ParameterStore<T>& params, const Tensor<T>& pooled,
                           std::size_t metanet_layers, DvptMode mode, std::size_t p,
                           std::size_t d) {
    Tensor<T> h = pooled;
    for (std::size_t i = 0; i < metanet_layers; ++i) {
        const std::string prefix = "metanet.layer" + std::to_string(i) + ".";
        h = linear(h, params.tensor(prefix + "weight"), params.tensor(prefix + "bias"));
        if (i + 1 < metanet_layers) h = relu(h);
    }
    const std::size_t out_dim = mode == DvptMode::specific ? p * d : d;
    if (h.dim(h.rank() - 1) != out_dim) {
        throw ConfigError("Meta-Net output width " + std::to_string(h.dim(h.rank() - 1)) +
                          " does not match mode (expected " + std::to_string(out_dim) + ")");
    }
    if (mode == DvptMode::specific) {
        Shape s(h.shape().begin(), h.shape().end() - 1);
        s.push_back(p);
        s.push_back(d);
        return reshape(h, std::move(s));
    }
    return h;
}

// P(x) = P + pi for a batch: P [p,d], pi [B,d] (shared, broadcast over
// rows) or [B,p,d] (specific, row-wise) -> [B,p,d].
template <typename T>
Tensor<T> combine_prompts(const Tensor<T>& prompts, const Tensor<T>& pi, DvptMode mode,
                          std::size_t batch) {
    const std::size_t p = prompts.dim(0), d = prompts.dim(1);
    auto base = repeat_axis(reshape(prompts, {1, p, d}), 0, batch);
    if (mode == DvptMode::shared) {
        return add(base, repeat_axis(reshape(pi, {batch, 1, d}), 1, p));
    }
    return add(base, pi);
}

// ---------------------------------------------------------------------------
// Construction

namespace detail {

template <typename T>
Tensor<T> xavier_uniform_prompts(std::size_t p, std::size_t d, Rng& rng) {
    const double a = std::sqrt(6.0 / double(p + d));
    Tensor<T> t({p, d});
    for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-a, a));
    return t;
}

}  // namespace detail

template <typename T>
DownstreamModel<T> build_method(const PETLMethodConfig& mcfg, const ParameterStore<T>& backbone,
                                const ViTConfig& cfg, std::size_t num_classes,
                                std::uint64_t seed) {
    mcfg.validate(cfg);
    if (num_classes == 0) throw ConfigError("downstream task needs at least one class");
    DownstreamModel<T> model(mcfg, cfg, num_classes);
    ParameterStore<T>& store = model.params();
    const std::size_t d = cfg.width;

    // backbone copy, upstream head dropped; frozen unless the method
    // says otherwise
    for (const auto& p : backbone.all()) {
        if (p.name.rfind("head.", 0) == 0) continue;
        bool trainable = false;
        switch (mcfg.kind) {
            case MethodKind::full:
                trainable = true;
                break;
            case MethodKind::partial_k: {
                if (p.name.rfind("layer", 0) == 0) {
                    const std::size_t layer = std::stoul(p.name.substr(5));
                    trainable = layer + mcfg.k >= cfg.num_layers;
                }
                break;
            }
            case MethodKind::bias: {
                auto ends = [&](const char* s) {
                    const std::size_t n = std::string(s).size();
                    return p.name.size() >= n &&
                           p.name.compare(p.name.size() - n, n, s) == 0;
                };
                trainable = ends(".bias") || ends(".shift");
                break;
            }
            default:
                break;
        }
        store.add(p.name, p.value.clone(), trainable);
    }

    // fresh task head; an MLP stack for mlp-k, a single linear otherwise
    {
        Rng rng(derive_seed(seed, 101));
        const std::size_t head_layers = mcfg.kind == MethodKind::mlp_k ? mcfg.k : 1;
        std::size_t in = d;
        for (std::size_t i = 0; i < head_layers; ++i) {
            const std::size_t out = i + 1 == head_layers ? num_classes : d;
            const std::string prefix = head_layers == 1
                                           ? std::string("head.")
                                           : "head.layer" + std::to_string(i) + ".";
            store.add(prefix + "weight", detail::trunc_normal_tensor<T>({out, in}, rng), true);
            store.add(prefix + "bias", Tensor<T>({out}), true);
            in = out;
        }
    }

    switch (mcfg.kind) {
        case MethodKind::vpt:
        case MethodKind::dvpt: {
            Rng rng(derive_seed(seed, 102));
            store.add("prompts", detail::xavier_uniform_prompts<T>(mcfg.prompt_count, d, rng),
                      true);
            break;
        }
        default:
            break;
    }

    if (mcfg.kind == MethodKind::dvpt) {
        // final layer zero-initialized: training starts exactly at VPT
        Rng rng(derive_seed(seed, 103));
        const std::size_t h = mcfg.hidden_width(cfg);
        const std::size_t L = mcfg.metanet_layers;
        std::size_t in = mcfg.metanet_input_dim;
        for (std::size_t i = 0; i < L; ++i) {
            const bool last = i + 1 == L;
            const std::size_t out =
                last ? (mcfg.dvpt_mode == DvptMode::specific ? mcfg.prompt_count * d : d) : h;
            const std::string prefix = "metanet.layer" + std::to_string(i) + ".";
            store.add(prefix + "weight",
                      last ? Tensor<T>({out, in}) : detail::trunc_normal_tensor<T>({out, in}, rng),
                      true);
            store.add(prefix + "bias", Tensor<T>({out}), true);
            in = out;
        }
    }

    if (mcfg.kind == MethodKind::adapter) {
        // zero-initialized up-projections make step 0 match the frozen net
        Rng rng(derive_seed(seed, 104));
        const std::size_t r = mcfg.adapter_dim;
        for (std::size_t i = 0; i < cfg.num_layers; ++i) {
            for (const char* sub : {"attn", "mlp"}) {
                const std::string prefix =
                    "adapter.layer" + std::to_string(i) + "." + sub + ".";
                store.add(prefix + "down.weight", detail::trunc_normal_tensor<T>({r, d}, rng),
                          true);
                store.add(prefix + "down.bias", Tensor<T>({r}), true);
                store.add(prefix + "up.weight", Tensor<T>({d, r}), true);
                store.add(prefix + "up.bias", Tensor<T>({d}), true);
            }
        }
    }

    if (mcfg.kind == MethodKind::sidetune) {
        Rng rng(derive_seed(seed, 105));
        const std::size_t in = pooled_dim(cfg.image_channels);
        store.add("side.layer0.weight", detail::trunc_normal_tensor<T>({d, in}, rng), true);
        store.add("side.layer0.bias", Tensor<T>({d}), true);
        store.add("side.layer1.weight", detail::trunc_normal_tensor<T>({d, d}, rng), true);
        store.add("side.layer1.bias", Tensor<T>({d}), true);
        // alpha = sigmoid(raw); raw 0 starts the blend at 1/2
        store.add("alpha", Tensor<T>({1}), true);
    }

    return model;
}

// ---------------------------------------------------------------------------
// Forwards

template <typename T>
Tensor<T> DownstreamModel<T>::head_forward(const Tensor<T>& features) const {
    if (method_.kind == MethodKind::mlp_k && method_.k > 1) {
        Tensor<T> h = features;
        for (std::size_t i = 0; i < method_.k; ++i) {
            const std::string prefix = "head.layer" + std::to_string(i) + ".";
            h = linear(h, params_.tensor(prefix + "weight"), params_.tensor(prefix + "bias"));
            if (i + 1 < method_.k) h = relu(h);
        }
        return h;
    }
    return linear(features, params_.tensor("head.weight"), params_.tensor("head.bias"));
}

template <typename T>
Tensor<T> DownstreamModel<T>::prompted_forward(const Tensor<T>& images,
                                               const Tensor<T>& prompt_tokens) const {
    last_prompt_tokens_ = prompt_tokens.storage();
    auto patches = patch_embed(images, params_, cfg_);
    auto tokens =
        concat_seq<T>({cls_tokens(params_, cfg_, images.dim(0)), prompt_tokens, patches});
    tokens = encode_tokens(tokens, params_, cfg_);
    return head_forward(cls_output(tokens));
}

template <typename T>
Tensor<T> DownstreamModel<T>::forward(const Tensor<T>& images) const {
    if (images.rank() != 4) {
        throw ShapeError("DownstreamModel::forward expects [B,C,H,W], got " +
                         shape_str(images.shape()));
    }
    const std::size_t B = images.dim(0);
    switch (method_.kind) {
        case MethodKind::full:
        case MethodKind::linear:
        case MethodKind::partial_k:
        case MethodKind::mlp_k:
        case MethodKind::bias: {
            auto patches = patch_embed(images, params_, cfg_);
            auto tokens = concat_seq<T>({cls_tokens(params_, cfg_, B), patches});
            tokens = encode_tokens(tokens, params_, cfg_);
            return head_forward(cls_output(tokens));
        }
        case MethodKind::adapter: {
            SublayerHook<T> hook = [this](const Tensor<T>& branch, std::size_t layer,
                                          bool after_mlp) {
                const std::string prefix = "adapter.layer" + std::to_string(layer) +
                                           (after_mlp ? ".mlp." : ".attn.");
                auto squeezed = relu(linear(branch, params_.tensor(prefix + "down.weight"),
                                            params_.tensor(prefix + "down.bias")));
                auto expanded = linear(squeezed, params_.tensor(prefix + "up.weight"),
                                       params_.tensor(prefix + "up.bias"));
                return add(branch, expanded);
            };
            auto patches = patch_embed(images, params_, cfg_);
            auto tokens = concat_seq<T>({cls_tokens(params_, cfg_, B), patches});
            tokens = encode_tokens(tokens, params_, cfg_, &hook);
            return head_forward(cls_output(tokens));
        }
        case MethodKind::sidetune: {
            auto patches = patch_embed(images, params_, cfg_);
            auto tokens = concat_seq<T>({cls_tokens(params_, cfg_, B), patches});
            tokens = encode_tokens(tokens, params_, cfg_);
            auto backbone_feat = cls_output(tokens);
            auto side = linear(relu(linear(pool_to_grid(images),
                                           params_.tensor("side.layer0.weight"),
                                           params_.tensor("side.layer0.bias"))),
                               params_.tensor("side.layer1.weight"),
                               params_.tensor("side.layer1.bias"));
            auto alpha = sigmoid(params_.tensor("alpha"));
            auto one_minus = add_const(scale(alpha, T{-1}), T{1});
            auto blended = add(scale_by(backbone_feat, alpha), scale_by(side, one_minus));
            return head_forward(blended);
        }
        case MethodKind::vpt: {
            const auto& prompts = params_.tensor("prompts");
            auto tokens = repeat_axis(
                reshape(prompts, {1, method_.prompt_count, cfg_.width}), 0, B);
            return prompted_forward(images, tokens);
        }
        case MethodKind::dvpt: {
            auto pi = meta_net_forward(params_, pool_to_grid(images), method_.metanet_layers,
                                       method_.dvpt_mode, method_.prompt_count, cfg_.width);
            auto tokens = combine_prompts(params_.tensor("prompts"), pi, method_.dvpt_mode, B);
            return prompted_forward(images, tokens);
        }
    }
    throw ConfigError("unknown method kind");
}

// Single-image VPT forward against a raw backbone store (its own head):
// layer 1 consumes [x_0, P, E_0]; sequence length 1 + p + m throughout.
template <typename T>
Tensor<T> vpt_forward(const Tensor<T>& image, const ParameterStore<T>& backbone,
                      const ViTConfig& cfg, const Tensor<T>& prompts) {
    if (prompts.rank() != 2 || prompts.dim(0) == 0 || prompts.dim(1) != cfg.width) {
        throw ConfigError("prompts must have shape [p >= 1, d]");
    }
    const bool batched = image.rank() == 4;
    auto imgs = batched ? image
                        : reshape(image, {1, cfg.image_channels, cfg.image_h, cfg.image_w});
    const std::size_t B = imgs.dim(0), p = prompts.dim(0);
    auto prompt_tokens = repeat_axis(reshape(prompts, {1, p, cfg.width}), 0, B);
    auto patches = patch_embed(imgs, backbone, cfg);
    auto tokens = concat_seq<T>({cls_tokens(backbone, cfg, B), prompt_tokens, patches});
    tokens = encode_tokens(tokens, backbone, cfg);
    auto logits = linear(cls_output(tokens), backbone.tensor("head.weight"),
                         backbone.tensor("head.bias"));
    return batched ? logits : reshape(logits, {cfg.num_classes});
}

// ---------------------------------------------------------------------------
// Accounting

template <typename T>
TrainableCount count_trainable(const DownstreamModel<T>& model) {
    TrainableCount c;
    for (const char* g : {"backbone", "head", "prompts", "metanet", "adapters", "side",
                          "biases"}) {
        c.by_group[g] = 0;
    }
    for (const auto& p : model.params().all()) {
        if (!p.trainable) continue;
        c.total += p.value.size();
        c.by_group[param_group(p.name)] += p.value.size();
    }
    return c;
}

}  // namespace petlab
