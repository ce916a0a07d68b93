#pragma once

// Straight-line ViT forward used as an oracle: plain loops over
// std::vector<double>, no tensors, no graph machinery. Reads weights out
// of a ParameterStore by name but shares no compute code with the
// library kernels.

#include <cmath>
#include <vector>

#include "petlab/params.hpp"
#include "petlab/vit.hpp"

namespace petlab::test {

using Vec = std::vector<double>;

inline Vec vals(const ParameterStore<double>& w, const std::string& name) {
    auto s = w.tensor(name).values();
    return Vec(s.begin(), s.end());
}

inline Vec ref_layer_norm(const Vec& x, std::size_t rows, std::size_t d, const Vec& scale,
                          const Vec& shift, double eps) {
    Vec y(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += x[r * d + j];
        mean /= double(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            double c = x[r * d + j] - mean;
            var += c * c;
        }
        var /= double(d);
        double rstd = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            y[r * d + j] = (x[r * d + j] - mean) * rstd * scale[j] + shift[j];
        }
    }
    return y;
}

inline Vec ref_linear(const Vec& x, std::size_t rows, std::size_t in, const Vec& w,
                      std::size_t out, const Vec& b) {
    Vec y(rows * out);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t o = 0; o < out; ++o) {
            double s = b[o];
            for (std::size_t i = 0; i < in; ++i) s += x[r * in + i] * w[o * in + i];
            y[r * out + o] = s;
        }
    }
    return y;
}

inline Vec ref_softmax_rows(const Vec& x, std::size_t rows, std::size_t n) {
    Vec y(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        double mx = x[r * n];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[r * n + j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            y[r * n + j] = std::exp(x[r * n + j] - mx);
            sum += y[r * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) y[r * n + j] /= sum;
    }
    return y;
}

// One encoder block on [S, d] tokens. If attn_probs is non-null it
// receives one [S*S] row-major matrix per head.
inline Vec ref_encoder_layer(const Vec& tokens, std::size_t S, const ParameterStore<double>& w,
                             const ViTConfig& cfg, std::size_t layer,
                             std::vector<Vec>* attn_probs = nullptr) {
    const std::size_t d = cfg.width, H = cfg.num_heads, dh = cfg.head_dim();
    const std::string p = layer_prefix(layer);
    const double eps = 1e-6;

    Vec x = tokens;
    Vec h1 = ref_layer_norm(x, S, d, vals(w, p + "ln1.scale"), vals(w, p + "ln1.shift"), eps);
    Vec q = ref_linear(h1, S, d, vals(w, p + "attn.q.weight"), d, vals(w, p + "attn.q.bias"));
    Vec k = ref_linear(h1, S, d, vals(w, p + "attn.k.weight"), d, vals(w, p + "attn.k.bias"));
    Vec v = ref_linear(h1, S, d, vals(w, p + "attn.v.weight"), d, vals(w, p + "attn.v.bias"));

    Vec ctx(S * d, 0.0);
    for (std::size_t h = 0; h < H; ++h) {
        Vec scores(S * S);
        for (std::size_t s = 0; s < S; ++s) {
            for (std::size_t t = 0; t < S; ++t) {
                double dot = 0.0;
                for (std::size_t j = 0; j < dh; ++j) {
                    dot += q[s * d + h * dh + j] * k[t * d + h * dh + j];
                }
                scores[s * S + t] = dot / std::sqrt(double(dh));
            }
        }
        Vec probs = ref_softmax_rows(scores, S, S);
        if (attn_probs) attn_probs->push_back(probs);
        for (std::size_t s = 0; s < S; ++s) {
            for (std::size_t j = 0; j < dh; ++j) {
                double acc = 0.0;
                for (std::size_t t = 0; t < S; ++t) {
                    acc += probs[s * S + t] * v[t * d + h * dh + j];
                }
                ctx[s * d + h * dh + j] = acc;
            }
        }
    }
    Vec attn_out =
        ref_linear(ctx, S, d, vals(w, p + "attn.o.weight"), d, vals(w, p + "attn.o.bias"));
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += attn_out[i];

    Vec h2 = ref_layer_norm(x, S, d, vals(w, p + "ln2.scale"), vals(w, p + "ln2.shift"), eps);
    Vec up = ref_linear(h2, S, d, vals(w, p + "mlp.up.weight"), cfg.mlp_dim(),
                        vals(w, p + "mlp.up.bias"));
    for (double& u : up) u = 0.5 * u * (1.0 + std::erf(u * 0.70710678118654752440));
    Vec mlp = ref_linear(up, S, cfg.mlp_dim(), vals(w, p + "mlp.down.weight"), d,
                         vals(w, p + "mlp.down.bias"));
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += mlp[i];
    return x;
}

inline Vec ref_patch_embed(const Vec& image_chw, const ParameterStore<double>& w,
                           const ViTConfig& cfg) {
    const std::size_t C = cfg.image_channels, Hh = cfg.image_h, Ww = cfg.image_w;
    const std::size_t ph = cfg.patch_h, pw = cfg.patch_w;
    const std::size_t gh = Hh / ph, gw = Ww / pw, m = gh * gw, plen = cfg.patch_dim();
    const std::size_t d = cfg.width;
    Vec pw_weight = vals(w, "patch.weight");
    Vec pw_bias = vals(w, "patch.bias");
    Vec pos = vals(w, "pos_embed");
    Vec out(m * d);
    for (std::size_t gy = 0; gy < gh; ++gy) {
        for (std::size_t gx = 0; gx < gw; ++gx) {
            Vec patch(plen);
            for (std::size_t c = 0; c < C; ++c) {
                for (std::size_t y = 0; y < ph; ++y) {
                    for (std::size_t xx = 0; xx < pw; ++xx) {
                        patch[c * ph * pw + y * pw + xx] =
                            image_chw[c * Hh * Ww + (gy * ph + y) * Ww + gx * pw + xx];
                    }
                }
            }
            const std::size_t j = gy * gw + gx;
            for (std::size_t o = 0; o < d; ++o) {
                double s = pw_bias[o];
                for (std::size_t i = 0; i < plen; ++i) s += patch[i] * pw_weight[o * plen + i];
                out[j * d + o] = s + pos[(1 + j) * d + o];
            }
        }
    }
    return out;
}

// Full forward on one [C,H,W] image, optionally with prompt rows
// inserted between [CLS] and the patches. Returns the logits.
inline Vec ref_vit_forward(const Vec& image_chw, const ParameterStore<double>& w,
                           const ViTConfig& cfg, const Vec& prompts = {},
                           std::size_t prompt_count = 0) {
    const std::size_t d = cfg.width, m = cfg.patch_count();
    Vec patches = ref_patch_embed(image_chw, w, cfg);
    Vec cls = vals(w, "cls");
    Vec pos = vals(w, "pos_embed");
    const std::size_t S = 1 + prompt_count + m;
    Vec tokens(S * d);
    for (std::size_t j = 0; j < d; ++j) tokens[j] = cls[j] + pos[j];
    for (std::size_t r = 0; r < prompt_count; ++r) {
        for (std::size_t j = 0; j < d; ++j) tokens[(1 + r) * d + j] = prompts[r * d + j];
    }
    for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t j = 0; j < d; ++j) tokens[(1 + prompt_count + r) * d + j] =
            patches[r * d + j];
    }
    for (std::size_t i = 0; i < cfg.num_layers; ++i) {
        tokens = ref_encoder_layer(tokens, S, w, cfg, i);
    }
    Vec x_n(tokens.begin(), tokens.begin() + d);
    return ref_linear(x_n, 1, d, vals(w, "head.weight"), cfg.num_classes, vals(w, "head.bias"));
}

}  // namespace petlab::test
