#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "petlab/errors.hpp"
#include "petlab/graph.hpp"
#include "petlab/tensor.hpp"

namespace petlab {

namespace detail {

template <typename T>
bool taping(std::initializer_list<const Tensor<T>*> inputs) {
    if (!active_graph<T>()) return false;
    for (const Tensor<T>* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

template <typename T>
void record(std::string_view op, std::vector<std::shared_ptr<TensorData<T>>> inputs,
            const Tensor<T>& out, std::function<void()> backward) {
    out.storage()->requires_grad = true;
    active_graph<T>()->record({op, std::move(inputs), out.storage(), std::move(backward)});
}

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_acc_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const T aik = a[i * k + kk];
            const T* brow = b + kk * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
}

// dA[m,k] += G[m,n] * B[k,n]^T, via a scratch transpose of B so the
// inner loop runs over contiguous memory.
template <typename T>
void gemm_acc_nt(const T* g, const T* b, T* da, std::size_t m, std::size_t k, std::size_t n,
                 std::vector<T>& scratch) {
    scratch.resize(k * n);
    for (std::size_t kk = 0; kk < k; ++kk) {
        for (std::size_t j = 0; j < n; ++j) scratch[j * k + kk] = b[kk * n + j];
    }
    for (std::size_t i = 0; i < m; ++i) {
        const T* grow = g + i * n;
        T* drow = da + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const T gj = grow[j];
            const T* bt = scratch.data() + j * k;
            for (std::size_t kk = 0; kk < k; ++kk) drow[kk] += gj * bt[kk];
        }
    }
}

// dB[k,n] += A[m,k]^T * G[m,n]
template <typename T>
void gemm_acc_tn(const T* a, const T* g, T* db, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* grow = g + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const T aik = a[i * k + kk];
            T* drow = db + kk * n;
            for (std::size_t j = 0; j < n; ++j) drow[j] += aik * grow[j];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    Tensor<T> out(a.shape());
    auto ov = out.values();
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    if (detail::taping<T>({&a, &b})) {
        auto as = a.storage(), bs = b.storage(), os = out.storage();
        detail::record<T>("add", {as, bs}, out, [as, bs, os] {
            if (as->requires_grad) as->accumulate_grad(os->grad);
            if (bs->requires_grad) bs->accumulate_grad(os->grad);
        });
    }
    return out;
}

// b's shape must equal a trailing suffix of a's shape; b is repeated over
// the leading dims. The library has no implicit broadcasting; this is the
// one explicit, named exception besides matmul's leading dims.
template <typename T>
Tensor<T> add_broadcast(const Tensor<T>& a, const Tensor<T>& b) {
    if (b.rank() > a.rank() ||
        !std::equal(b.shape().begin(), b.shape().end(), a.shape().end() - b.rank())) {
        throw ShapeError("add_broadcast: " + shape_str(b.shape()) +
                         " is not a trailing suffix of " + shape_str(a.shape()));
    }
    const std::size_t inner = b.size();
    const std::size_t reps = a.size() / std::max<std::size_t>(inner, 1);
    Tensor<T> out(a.shape());
    auto ov = out.values();
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t r = 0; r < reps; ++r) {
        for (std::size_t i = 0; i < inner; ++i) ov[r * inner + i] = av[r * inner + i] + bv[i];
    }
    if (detail::taping<T>({&a, &b})) {
        auto as = a.storage(), bs = b.storage(), os = out.storage();
        detail::record<T>("add_broadcast", {as, bs}, out, [as, bs, os, reps, inner] {
            if (as->requires_grad) as->accumulate_grad(os->grad);
            if (bs->requires_grad) {
                std::vector<T> db(inner, T{0});
                for (std::size_t r = 0; r < reps; ++r) {
                    for (std::size_t i = 0; i < inner; ++i) db[i] += os->grad[r * inner + i];
                }
                bs->accumulate_grad(db);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("mul shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    Tensor<T> out(a.shape());
    auto ov = out.values();
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    if (detail::taping<T>({&a, &b})) {
        auto as = a.storage(), bs = b.storage(), os = out.storage();
        detail::record<T>("mul", {as, bs}, out, [as, bs, os] {
            if (as->requires_grad) {
                std::vector<T> da(os->grad.size());
                for (std::size_t i = 0; i < da.size(); ++i) da[i] = os->grad[i] * bs->values[i];
                as->accumulate_grad(da);
            }
            if (bs->requires_grad) {
                std::vector<T> db(os->grad.size());
                for (std::size_t i = 0; i < db.size(); ++i) db[i] = os->grad[i] * as->values[i];
                bs->accumulate_grad(db);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    Tensor<T> out(a.shape());
    auto ov = out.values();
    auto av = a.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
    if (detail::taping<T>({&a})) {
        auto as = a.storage(), os = out.storage();
        detail::record<T>("scale", {as}, out, [as, os, c] {
            std::vector<T> da(os->grad.size());
            for (std::size_t i = 0; i < da.size(); ++i) da[i] = os->grad[i] * c;
            as->accumulate_grad(da);
        });
    }
    return out;
}

template <typename T>
Tensor<T> add_const(const Tensor<T>& a, T c) {
    Tensor<T> out(a.shape());
    auto ov = out.values();
    auto av = a.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + c;
    if (detail::taping<T>({&a})) {
        auto as = a.storage(), os = out.storage();
        detail::record<T>("add_const", {as}, out,
                          [as, os] { as->accumulate_grad(os->grad); });
    }
    return out;
}

// Multiply a by a one-element tensor that participates in the graph.
template <typename T>
Tensor<T> scale_by(const Tensor<T>& a, const Tensor<T>& s) {
    if (s.size() != 1) {
        throw ShapeError("scale_by expects a one-element scale, got " + shape_str(s.shape()));
    }
    const T sv = s.values()[0];
    Tensor<T> out(a.shape());
    auto ov = out.values();
    auto av = a.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * sv;
    if (detail::taping<T>({&a, &s})) {
        auto as = a.storage(), ss = s.storage(), os = out.storage();
        detail::record<T>("scale_by", {as, ss}, out, [as, ss, os, sv] {
            if (as->requires_grad) {
                std::vector<T> da(os->grad.size());
                for (std::size_t i = 0; i < da.size(); ++i) da[i] = os->grad[i] * sv;
                as->accumulate_grad(da);
            }
            if (ss->requires_grad) {
                T ds{0};
                for (std::size_t i = 0; i < os->grad.size(); ++i)
                    ds += os->grad[i] * as->values[i];
                ss->accumulate_grad(std::vector<T>{ds});
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Activations

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    auto ov = out.values();
    auto xv = x.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > T{0} ? xv[i] : T{0};
    if (detail::taping<T>({&x})) {
        auto xs = x.storage(), os = out.storage();
        detail::record<T>("relu", {xs}, out, [xs, os] {
            std::vector<T> dx(os->grad.size());
            for (std::size_t i = 0; i < dx.size(); ++i)
                dx[i] = xs->values[i] > T{0} ? os->grad[i] : T{0};
            xs->accumulate_grad(dx);
        });
    }
    return out;
}

// Exact GELU, 0.5 x (1 + erf(x / sqrt(2))).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    const T inv_sqrt2 = static_cast<T>(0.70710678118654752440);
    Tensor<T> out(x.shape());
    auto ov = out.values();
    auto xv = x.values();
    for (std::size_t i = 0; i < ov.size(); ++i) {
        ov[i] = static_cast<T>(0.5) * xv[i] * (T{1} + std::erf(xv[i] * inv_sqrt2));
    }
    if (detail::taping<T>({&x})) {
        auto xs = x.storage(), os = out.storage();
        detail::record<T>("gelu", {xs}, out, [xs, os, inv_sqrt2] {
            const T inv_sqrt_2pi = static_cast<T>(0.39894228040143267794);
            std::vector<T> dx(os->grad.size());
            for (std::size_t i = 0; i < dx.size(); ++i) {
                const T v = xs->values[i];
                const T cdf = static_cast<T>(0.5) * (T{1} + std::erf(v * inv_sqrt2));
                const T pdf = inv_sqrt_2pi * std::exp(static_cast<T>(-0.5) * v * v);
                dx[i] = os->grad[i] * (cdf + v * pdf);
            }
            xs->accumulate_grad(dx);
        });
    }
    return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    auto ov = out.values();
    auto xv = x.values();
    for (std::size_t i = 0; i < ov.size(); ++i) {
        const T v = xv[i];
        if (v >= T{0}) {
            ov[i] = T{1} / (T{1} + std::exp(-v));
        } else {
            const T e = std::exp(v);
            ov[i] = e / (T{1} + e);
        }
    }
    if (detail::taping<T>({&x})) {
        auto xs = x.storage(), os = out.storage();
        detail::record<T>("sigmoid", {xs}, out, [xs, os] {
            std::vector<T> dx(os->grad.size());
            for (std::size_t i = 0; i < dx.size(); ++i) {
                const T s = os->values[i];
                dx[i] = os->grad[i] * s * (T{1} - s);
            }
            xs->accumulate_grad(dx);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Matrix products

// a: [batch..., m, k], b: [batch..., k, n]. Leading dims must be equal, or
// absent on one side (that side is then shared across the batch).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || b.rank() < 2) {
        throw ShapeError("matmul needs rank >= 2 operands: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
    const std::size_t kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
    if (k != kb) {
        throw ShapeError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    Shape abatch(a.shape().begin(), a.shape().end() - 2);
    Shape bbatch(b.shape().begin(), b.shape().end() - 2);
    Shape obatch;
    if (abatch == bbatch) {
        obatch = abatch;
    } else if (abatch.empty()) {
        obatch = bbatch;
    } else if (bbatch.empty()) {
        obatch = abatch;
    } else {
        throw ShapeError("matmul batch dimensions not broadcastable: " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
    }
    const std::size_t batches = numel(obatch);
    const std::size_t stride_a = abatch.empty() ? 0 : m * k;
    const std::size_t stride_b = bbatch.empty() ? 0 : k * n;

    Shape oshape = obatch;
    oshape.push_back(m);
    oshape.push_back(n);
    Tensor<T> out(oshape);
    const T* pa = a.values().data();
    const T* pb = b.values().data();
    T* pc = out.values().data();
    for (std::size_t t = 0; t < batches; ++t) {
        detail::gemm_acc_nn(pa + t * stride_a, pb + t * stride_b, pc + t * m * n, m, k, n);
    }

    if (detail::taping<T>({&a, &b})) {
        auto as = a.storage(), bs = b.storage(), os = out.storage();
        detail::record<T>("matmul", {as, bs}, out,
                          [as, bs, os, m, k, n, batches, stride_a, stride_b] {
                              const T* g = os->grad.data();
                              if (as->requires_grad) {
                                  std::vector<T> da(as->values.size(), T{0});
                                  std::vector<T> scratch;
                                  for (std::size_t t = 0; t < batches; ++t) {
                                      detail::gemm_acc_nt(g + t * m * n,
                                                          bs->values.data() + t * stride_b,
                                                          da.data() + t * stride_a, m, k, n,
                                                          scratch);
                                  }
                                  as->accumulate_grad(da);
                              }
                              if (bs->requires_grad) {
                                  std::vector<T> db(bs->values.size(), T{0});
                                  for (std::size_t t = 0; t < batches; ++t) {
                                      detail::gemm_acc_tn(as->values.data() + t * stride_a,
                                                          g + t * m * n,
                                                          db.data() + t * stride_b, m, k, n);
                                  }
                                  bs->accumulate_grad(db);
                              }
                          });
    }
    return out;
}

// y = x W^T + b with x: [..., in], W: [out, in], b: [out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    if (x.rank() < 1 || w.rank() != 2 || b.rank() != 1) {
        throw ShapeError("linear expects x [..., in], w [out, in], b [out]");
    }
    const std::size_t in = x.dim(x.rank() - 1);
    const std::size_t out_dim = w.dim(0);
    if (w.dim(1) != in || b.dim(0) != out_dim) {
        throw ShapeError("linear shape mismatch: x " + shape_str(x.shape()) + ", w " +
                         shape_str(w.shape()) + ", b " + shape_str(b.shape()));
    }
    const std::size_t rows = x.size() / in;
    Shape oshape(x.shape().begin(), x.shape().end() - 1);
    oshape.push_back(out_dim);
    Tensor<T> out(oshape);
    const T* px = x.values().data();
    const T* pw = w.values().data();
    const T* pbias = b.values().data();
    T* py = out.values().data();
    // y[r,:] accumulates rank-1 updates over a transposed weight copy;
    // keeps the inner loop contiguous for every operand
    std::vector<T> wt(in * out_dim);
    for (std::size_t o = 0; o < out_dim; ++o) {
        for (std::size_t i = 0; i < in; ++i) wt[i * out_dim + o] = pw[o * in + i];
    }
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xrow = px + r * in;
        T* yrow = py + r * out_dim;
        std::copy(pbias, pbias + out_dim, yrow);
        for (std::size_t i = 0; i < in; ++i) {
            const T xi = xrow[i];
            const T* wtrow = wt.data() + i * out_dim;
            for (std::size_t o = 0; o < out_dim; ++o) yrow[o] += xi * wtrow[o];
        }
    }
    if (detail::taping<T>({&x, &w, &b})) {
        auto xs = x.storage(), ws = w.storage(), bs = b.storage(), os = out.storage();
        detail::record<T>("linear", {xs, ws, bs}, out, [xs, ws, bs, os, rows, in, out_dim] {
            const T* g = os->grad.data();
            if (xs->requires_grad) {
                std::vector<T> dx(xs->values.size(), T{0});
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* grow = g + r * out_dim;
                    T* dxrow = dx.data() + r * in;
                    for (std::size_t o = 0; o < out_dim; ++o) {
                        const T go = grow[o];
                        const T* wrow = ws->values.data() + o * in;
                        for (std::size_t i = 0; i < in; ++i) dxrow[i] += go * wrow[i];
                    }
                }
                xs->accumulate_grad(dx);
            }
            if (ws->requires_grad) {
                std::vector<T> dw(ws->values.size(), T{0});
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* grow = g + r * out_dim;
                    const T* xrow = xs->values.data() + r * in;
                    for (std::size_t o = 0; o < out_dim; ++o) {
                        const T go = grow[o];
                        T* dwrow = dw.data() + o * in;
                        for (std::size_t i = 0; i < in; ++i) dwrow[i] += go * xrow[i];
                    }
                }
                ws->accumulate_grad(dw);
            }
            if (bs->requires_grad) {
                std::vector<T> db(out_dim, T{0});
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* grow = g + r * out_dim;
                    for (std::size_t o = 0; o < out_dim; ++o) db[o] += grow[o];
                }
                bs->accumulate_grad(db);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization and softmax

// Softmax over the last axis, max-subtracted for stability.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
    if (x.rank() < 1 || x.dim(x.rank() - 1) == 0) {
        throw ShapeError("softmax needs a non-empty last axis");
    }
    const std::size_t n = x.dim(x.rank() - 1);
    const std::size_t rows = x.size() / n;
    Tensor<T> out(x.shape());
    auto xv = x.values();
    auto ov = out.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xv.data() + r * n;
        T* orow = ov.data() + r * n;
        T mx = row[0];
        for (std::size_t j = 0; j < n; ++j) {
            if (std::isnan(static_cast<double>(row[j]))) {
                throw NumericError("softmax input contains NaN");
            }
            if (row[j] > mx) mx = row[j];
        }
        T sum{0};
        for (std::size_t j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        const T inv = T{1} / sum;
        for (std::size_t j = 0; j < n; ++j) orow[j] *= inv;
    }
    if (detail::taping<T>({&x})) {
        auto xs = x.storage(), os = out.storage();
        detail::record<T>("softmax", {xs}, out, [xs, os, rows, n] {
            std::vector<T> dx(os->grad.size());
            for (std::size_t r = 0; r < rows; ++r) {
                const T* s = os->values.data() + r * n;
                const T* g = os->grad.data() + r * n;
                T dot{0};
                for (std::size_t j = 0; j < n; ++j) dot += g[j] * s[j];
                T* d = dx.data() + r * n;
                for (std::size_t j = 0; j < n; ++j) d[j] = s[j] * (g[j] - dot);
            }
            xs->accumulate_grad(dx);
        });
    }
    return out;
}

// Per-row normalization over the last axis followed by the affine
// gamma * xhat + beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    const std::size_t d = x.dim(x.rank() - 1);
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
        throw ShapeError("layer_norm affine params must have shape [" + std::to_string(d) + "]");
    }
    const std::size_t rows = x.size() / d;
    Tensor<T> out(x.shape());
    auto xv = x.values();
    auto gv = gamma.values();
    auto bv = beta.values();
    auto ov = out.values();
    // saved for backward
    auto xhat = std::make_shared<std::vector<T>>(x.size());
    auto rstd = std::make_shared<std::vector<T>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xv.data() + r * d;
        T mean{0};
        for (std::size_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<T>(d);
        T var{0};
        for (std::size_t j = 0; j < d; ++j) {
            const T c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<T>(d);
        const T rs = T{1} / std::sqrt(var + eps);
        (*rstd)[r] = rs;
        for (std::size_t j = 0; j < d; ++j) {
            const T xh = (row[j] - mean) * rs;
            (*xhat)[r * d + j] = xh;
            ov[r * d + j] = xh * gv[j] + bv[j];
        }
    }
    if (detail::taping<T>({&x, &gamma, &beta})) {
        auto xs = x.storage(), gs = gamma.storage(), bs = beta.storage(), os = out.storage();
        detail::record<T>("layer_norm", {xs, gs, bs}, out, [xs, gs, bs, os, xhat, rstd, rows, d] {
            const T* g = os->grad.data();
            if (xs->requires_grad) {
                std::vector<T> dx(xs->values.size());
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* grow = g + r * d;
                    const T* xh = xhat->data() + r * d;
                    T mean_dxhat{0}, mean_dxhat_xhat{0};
                    for (std::size_t j = 0; j < d; ++j) {
                        const T dxh = grow[j] * gs->values[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[j];
                    }
                    mean_dxhat /= static_cast<T>(d);
                    mean_dxhat_xhat /= static_cast<T>(d);
                    const T rs = (*rstd)[r];
                    for (std::size_t j = 0; j < d; ++j) {
                        const T dxh = grow[j] * gs->values[j];
                        dx[r * d + j] = rs * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                    }
                }
                xs->accumulate_grad(dx);
            }
            if (gs->requires_grad) {
                std::vector<T> dg(d, T{0});
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < d; ++j)
                        dg[j] += g[r * d + j] * (*xhat)[r * d + j];
                }
                gs->accumulate_grad(dg);
            }
            if (bs->requires_grad) {
                std::vector<T> db(d, T{0});
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < d; ++j) db[j] += g[r * d + j];
                }
                bs->accumulate_grad(db);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape surgery

// Order-preserving concatenation along `axis`; all other dims must agree.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ContractError("concat of zero parts");
    const std::size_t rank = parts[0].rank();
    if (axis >= rank) throw ShapeError("concat axis out of range");
    Shape oshape = parts[0].shape();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != rank) throw ShapeError("concat rank mismatch");
        for (std::size_t ax = 0; ax < rank; ++ax) {
            if (ax != axis && p.dim(ax) != oshape[ax]) {
                throw ShapeError("concat dim mismatch at axis " + std::to_string(ax) + ": " +
                                 shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
            }
        }
        total += p.dim(axis);
    }
    oshape[axis] = total;
    std::size_t outer = 1, inner = 1;
    for (std::size_t ax = 0; ax < axis; ++ax) outer *= oshape[ax];
    for (std::size_t ax = axis + 1; ax < rank; ++ax) inner *= oshape[ax];

    Tensor<T> out(oshape);
    T* po = out.values().data();
    std::size_t offset = 0;
    std::vector<std::size_t> offsets(parts.size());
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        offsets[pi] = offset;
        const std::size_t len = parts[pi].dim(axis);
        const T* src = parts[pi].values().data();
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy(src + o * len * inner, src + (o + 1) * len * inner,
                      po + (o * total + offset) * inner);
        }
        offset += len;
    }

    bool any_grad = false;
    if (active_graph<T>()) {
        for (const auto& p : parts) any_grad |= p.requires_grad();
    }
    if (any_grad) {
        std::vector<std::shared_ptr<TensorData<T>>> inputs;
        std::vector<std::size_t> lens;
        for (const auto& p : parts) {
            inputs.push_back(p.storage());
            lens.push_back(p.dim(axis));
        }
        auto os = out.storage();
        detail::record<T>("concat", inputs, out,
                          [inputs, os, offsets, lens, outer, inner, total] {
                              for (std::size_t pi = 0; pi < inputs.size(); ++pi) {
                                  if (!inputs[pi]->requires_grad) continue;
                                  std::vector<T> dp(inputs[pi]->values.size());
                                  for (std::size_t o = 0; o < outer; ++o) {
                                      const T* g = os->grad.data() +
                                                   (o * total + offsets[pi]) * inner;
                                      std::copy(g, g + lens[pi] * inner,
                                                dp.data() + o * lens[pi] * inner);
                                  }
                                  inputs[pi]->accumulate_grad(dp);
                              }
                          });
    }
    return out;
}

// Concatenation along the sequence axis (second-to-last) of token
// tensors: [len_i, d] parts or batched [B, len_i, d] parts.
template <typename T>
Tensor<T> concat_seq(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ContractError("concat_seq of zero parts");
    if (parts[0].rank() < 2) throw ShapeError("concat_seq needs rank >= 2 parts");
    return concat(parts, parts[0].rank() - 2);
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
    if (axis >= x.rank()) throw ShapeError("slice axis out of range");
    if (start + len > x.dim(axis)) {
        throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + len) +
                         ") out of range for axis of size " + std::to_string(x.dim(axis)));
    }
    Shape oshape = x.shape();
    oshape[axis] = len;
    std::size_t outer = 1, inner = 1;
    for (std::size_t ax = 0; ax < axis; ++ax) outer *= x.dim(ax);
    for (std::size_t ax = axis + 1; ax < x.rank(); ++ax) inner *= x.dim(ax);
    const std::size_t full = x.dim(axis);

    Tensor<T> out(oshape);
    const T* px = x.values().data();
    T* po = out.values().data();
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy(px + (o * full + start) * inner, px + (o * full + start + len) * inner,
                  po + o * len * inner);
    }
    if (detail::taping<T>({&x})) {
        auto xs = x.storage(), os = out.storage();
        detail::record<T>("slice", {xs}, out, [xs, os, outer, inner, full, start, len] {
            std::vector<T> dx(xs->values.size(), T{0});
            for (std::size_t o = 0; o < outer; ++o) {
                const T* g = os->grad.data() + o * len * inner;
                std::copy(g, g + len * inner, dx.data() + (o * full + start) * inner);
            }
            xs->accumulate_grad(dx);
        });
    }
    return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (numel(shape) != x.size()) {
        throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
    }
    Tensor<T> out(std::move(shape), std::vector<T>(x.values().begin(), x.values().end()));
    if (detail::taping<T>({&x})) {
        auto xs = x.storage(), os = out.storage();
        detail::record<T>("reshape", {xs}, out, [xs, os] { xs->accumulate_grad(os->grad); });
    }
    return out;
}

// Axis permutation with materialized copy; backward applies the inverse.
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
    const std::size_t rank = x.rank();
    if (perm.size() != rank) throw ShapeError("permute order must name every axis once");
    Shape oshape(rank);
    std::vector<bool> used(rank, false);
    for (std::size_t j = 0; j < rank; ++j) {
        if (perm[j] >= rank || used[perm[j]]) {
            throw ShapeError("permute order must name every axis once");
        }
        used[perm[j]] = true;
        oshape[j] = x.dim(perm[j]);
    }
    std::vector<std::size_t> in_strides(rank, 1), gather_strides(rank);
    for (std::size_t ax = rank; ax-- > 1;) in_strides[ax - 1] = in_strides[ax] * x.dim(ax);
    for (std::size_t j = 0; j < rank; ++j) gather_strides[j] = in_strides[perm[j]];

    Tensor<T> out(oshape);
    const T* px = x.values().data();
    T* po = out.values().data();
    const std::size_t n = x.size();
    std::vector<std::size_t> coord(rank, 0);
    std::size_t src = 0;
    for (std::size_t flat = 0; flat < n; ++flat) {
        po[flat] = px[src];
        for (std::size_t ax = rank; ax-- > 0;) {
            if (++coord[ax] < oshape[ax]) {
                src += gather_strides[ax];
                break;
            }
            src -= gather_strides[ax] * (oshape[ax] - 1);
            coord[ax] = 0;
        }
    }
    if (detail::taping<T>({&x})) {
        auto xs = x.storage(), os = out.storage();
        detail::record<T>("permute", {xs}, out, [xs, os, gather_strides, oshape, rank, n] {
            std::vector<T> dx(xs->values.size(), T{0});
            std::vector<std::size_t> c(rank, 0);
            std::size_t src = 0;
            for (std::size_t flat = 0; flat < n; ++flat) {
                dx[src] += os->grad[flat];
                for (std::size_t ax = rank; ax-- > 0;) {
                    if (++c[ax] < oshape[ax]) {
                        src += gather_strides[ax];
                        break;
                    }
                    src -= gather_strides[ax] * (oshape[ax] - 1);
                    c[ax] = 0;
                }
            }
            xs->accumulate_grad(dx);
        });
    }
    return out;
}

// Repeats an axis of size 1 `reps` times. Backward sums over the repeats.
template <typename T>
Tensor<T> repeat_axis(const Tensor<T>& x, std::size_t axis, std::size_t reps) {
    if (axis >= x.rank() || x.dim(axis) != 1) {
        throw ShapeError("repeat_axis needs an axis of size 1, got " + shape_str(x.shape()) +
                         " axis " + std::to_string(axis));
    }
    Shape oshape = x.shape();
    oshape[axis] = reps;
    std::size_t outer = 1, inner = 1;
    for (std::size_t ax = 0; ax < axis; ++ax) outer *= x.dim(ax);
    for (std::size_t ax = axis + 1; ax < x.rank(); ++ax) inner *= x.dim(ax);
    Tensor<T> out(oshape);
    const T* px = x.values().data();
    T* po = out.values().data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t r = 0; r < reps; ++r) {
            std::copy(px + o * inner, px + (o + 1) * inner, po + (o * reps + r) * inner);
        }
    }
    if (detail::taping<T>({&x})) {
        auto xs = x.storage(), os = out.storage();
        detail::record<T>("repeat_axis", {xs}, out, [xs, os, outer, inner, reps] {
            std::vector<T> dx(xs->values.size(), T{0});
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t r = 0; r < reps; ++r) {
                    const T* g = os->grad.data() + (o * reps + r) * inner;
                    for (std::size_t i = 0; i < inner; ++i) dx[o * inner + i] += g[i];
                }
            }
            xs->accumulate_grad(dx);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions and loss

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    T s{0};
    for (T v : x.values()) s += v;
    Tensor<T> out = Tensor<T>::scalar(s);
    if (detail::taping<T>({&x})) {
        auto xs = x.storage(), os = out.storage();
        detail::record<T>("sum", {xs}, out, [xs, os] {
            std::vector<T> dx(xs->values.size(), os->grad[0]);
            xs->accumulate_grad(dx);
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    if (x.size() == 0) throw ContractError("mean of an empty tensor");
    T s{0};
    for (T v : x.values()) s += v;
    const T inv = T{1} / static_cast<T>(x.size());
    Tensor<T> out = Tensor<T>::scalar(s * inv);
    if (detail::taping<T>({&x})) {
        auto xs = x.storage(), os = out.storage();
        detail::record<T>("mean", {xs}, out, [xs, os, inv] {
            std::vector<T> dx(xs->values.size(), os->grad[0] * inv);
            xs->accumulate_grad(dx);
        });
    }
    return out;
}

// Mean softmax cross-entropy of logits [B, C] against integer labels.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2) {
        throw ShapeError("cross_entropy expects logits [batch, classes], got " +
                         shape_str(logits.shape()));
    }
    const std::size_t batch = logits.dim(0);
    const std::size_t classes = logits.dim(1);
    if (labels.size() != batch) {
        throw ShapeError("cross_entropy labels length " + std::to_string(labels.size()) +
                         " does not match batch " + std::to_string(batch));
    }
    auto probs = std::make_shared<std::vector<T>>(logits.size());
    auto lv = logits.values();
    T loss{0};
    for (std::size_t b = 0; b < batch; ++b) {
        const int y = labels[b];
        if (y < 0 || static_cast<std::size_t>(y) >= classes) {
            throw ContractError("cross_entropy label " + std::to_string(y) +
                                " out of range for " + std::to_string(classes) + " classes");
        }
        const T* row = lv.data() + b * classes;
        T mx = row[0];
        for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
        T sum{0};
        for (std::size_t c = 0; c < classes; ++c) {
            const T e = std::exp(row[c] - mx);
            (*probs)[b * classes + c] = e;
            sum += e;
        }
        const T inv = T{1} / sum;
        for (std::size_t c = 0; c < classes; ++c) (*probs)[b * classes + c] *= inv;
        loss += std::log(sum) + mx - row[static_cast<std::size_t>(y)];
    }
    loss /= static_cast<T>(batch);
    Tensor<T> out = Tensor<T>::scalar(loss);
    if (detail::taping<T>({&logits})) {
        auto ls = logits.storage(), os = out.storage();
        auto lab = labels;
        detail::record<T>("cross_entropy", {ls}, out, [ls, os, probs, lab, batch, classes] {
            const T g = os->grad[0] / static_cast<T>(batch);
            std::vector<T> dl(ls->values.size());
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t c = 0; c < classes; ++c) {
                    T p = (*probs)[b * classes + c];
                    if (c == static_cast<std::size_t>(lab[b])) p -= T{1};
                    dl[b * classes + c] = g * p;
                }
            }
            ls->accumulate_grad(dl);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Patch extraction

// [C, H, W] -> [m, C*ph*pw] or [B, C, H, W] -> [B, m, C*ph*pw]. Patches are
// taken in row-major grid order; each patch is flattened (channel, row, col).
template <typename T>
Tensor<T> extract_patches(const Tensor<T>& images, std::size_t ph, std::size_t pw) {
    const bool batched = images.rank() == 4;
    if (!batched && images.rank() != 3) {
        throw ShapeError("extract_patches expects [C,H,W] or [B,C,H,W], got " +
                         shape_str(images.shape()));
    }
    const std::size_t B = batched ? images.dim(0) : 1;
    const std::size_t C = images.dim(batched ? 1 : 0);
    const std::size_t H = images.dim(batched ? 2 : 1);
    const std::size_t W = images.dim(batched ? 3 : 2);
    if (ph == 0 || pw == 0 || H % ph != 0 || W % pw != 0) {
        throw ShapeError("patch size " + std::to_string(ph) + "x" + std::to_string(pw) +
                         " does not divide image " + std::to_string(H) + "x" + std::to_string(W));
    }
    const std::size_t gh = H / ph, gw = W / pw, m = gh * gw, plen = C * ph * pw;
    Shape oshape = batched ? Shape{B, m, plen} : Shape{m, plen};
    Tensor<T> out(oshape);
    const T* px = images.values().data();
    T* po = out.values().data();
    for (std::size_t b = 0; b < B; ++b) {
        const T* img = px + b * C * H * W;
        T* dst = po + b * m * plen;
        for (std::size_t gy = 0; gy < gh; ++gy) {
            for (std::size_t gx = 0; gx < gw; ++gx) {
                T* patch = dst + (gy * gw + gx) * plen;
                for (std::size_t c = 0; c < C; ++c) {
                    for (std::size_t y = 0; y < ph; ++y) {
                        const T* src = img + c * H * W + (gy * ph + y) * W + gx * pw;
                        std::copy(src, src + pw, patch + c * ph * pw + y * pw);
                    }
                }
            }
        }
    }
    if (detail::taping<T>({&images})) {
        auto xs = images.storage(), os = out.storage();
        detail::record<T>("extract_patches", {xs}, out,
                          [xs, os, B, C, H, W, ph, pw, gh, gw, m, plen] {
                              std::vector<T> dx(xs->values.size(), T{0});
                              for (std::size_t b = 0; b < B; ++b) {
                                  T* img = dx.data() + b * C * H * W;
                                  const T* src = os->grad.data() + b * m * plen;
                                  for (std::size_t gy = 0; gy < gh; ++gy) {
                                      for (std::size_t gx = 0; gx < gw; ++gx) {
                                          const T* patch = src + (gy * gw + gx) * plen;
                                          for (std::size_t c = 0; c < C; ++c) {
                                              for (std::size_t y = 0; y < ph; ++y) {
                                                  T* drow = img + c * H * W +
                                                            (gy * ph + y) * W + gx * pw;
                                                  const T* prow = patch + c * ph * pw + y * pw;
                                                  for (std::size_t xwhere = 0; xwhere < pw;
                                                       ++xwhere)
                                                      drow[xwhere] += prow[xwhere];
                                              }
                                          }
                                      }
                                  }
                              }
                              xs->accumulate_grad(dx);
                          });
    }
    return out;
}

}  // namespace petlab
