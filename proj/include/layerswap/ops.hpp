#pragma once

// Differentiable ops recorded on a Tape. Forward math lives in kernels.hpp;
// this file adds the backward rules.

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "layerswap/kernels.hpp"
#include "layerswap/tape.hpp"

namespace layerswap::ops {

namespace detail {

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class T>
void accumulate(std::vector<T>* dst, std::span<const T> src) {
    if (!dst) return;
    for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += src[i];
}

}  // namespace detail

template <std::floating_point T>
Var<T> conv2d(Var<T> x, Var<T> w, std::optional<Var<T>> b, std::size_t stride, std::size_t padding) {
    auto& tape = *x.tape;
    const Tensor<T> xin = x.value(), win = w.value();
    const bool has_bias = b.has_value();
    const bool need_weight = w.requires_grad() || (has_bias && b->requires_grad());
    // im2col buffers are kept only when a weight gradient will be requested.
    auto cols = need_weight ? std::make_shared<std::vector<T>>() : nullptr;
    auto out = kernels::conv2d(xin, win, has_bias ? &b->value() : nullptr, stride, padding, cols.get());
    auto recompute = [stride, padding, has_bias](std::span<const Tensor<T>* const> in) {
        return kernels::conv2d(*in[0], *in[1], has_bias ? in[2] : nullptr, stride, padding);
    };
    auto backward = [xin, win, has_bias, stride, padding, cols](std::span<const T> g,
                                                                std::span<std::vector<T>* const> gin) {
        auto r = kernels::conv2d_backward(xin, win, has_bias && gin[2] != nullptr, stride, padding, g, gin[0] != nullptr,
                                          gin[1] != nullptr, cols.get());
        detail::accumulate<T>(gin[0], r.input);
        detail::accumulate<T>(gin[1], r.weight);
        if (has_bias) detail::accumulate<T>(gin[2], r.bias);
    };
    if (has_bias) return tape.record("conv2d", std::move(out), {x, w, *b}, recompute, backward);
    return tape.record("conv2d", std::move(out), {x, w}, recompute, backward);
}

template <std::floating_point T>
Var<T> relu(Var<T> x) {
    const Tensor<T> xin = x.value();
    return x.tape->record(
        "relu", kernels::relu(xin), {x}, [](auto in) { return kernels::relu(*in[0]); },
        [xin](std::span<const T> g, std::span<std::vector<T>* const> gin) {
            auto d = xin.data();
            auto& gx = *gin[0];
            for (std::size_t i = 0; i < g.size(); ++i)
                if (d[i] > T(0)) gx[i] += g[i];
        });
}

template <std::floating_point T>
Var<T> add(Var<T> a, Var<T> b) {
    detail::require_same_shape(a, b, "add");
    auto fwd = [](const Tensor<T>& x, const Tensor<T>& y) {
        std::vector<T> out(x.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
        return Tensor<T>(x.shape(), std::move(out));
    };
    return a.tape->record(
        "add", fwd(a.value(), b.value()), {a, b}, [fwd](auto in) { return fwd(*in[0], *in[1]); },
        [](std::span<const T> g, std::span<std::vector<T>* const> gin) {
            detail::accumulate<T>(gin[0], g);
            detail::accumulate<T>(gin[1], g);
        });
}

template <std::floating_point T>
Var<T> mul(Var<T> a, Var<T> b) {
    detail::require_same_shape(a, b, "mul");
    const Tensor<T> av = a.value(), bv = b.value();
    auto fwd = [](const Tensor<T>& x, const Tensor<T>& y) {
        std::vector<T> out(x.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
        return Tensor<T>(x.shape(), std::move(out));
    };
    return a.tape->record(
        "mul", fwd(av, bv), {a, b}, [fwd](auto in) { return fwd(*in[0], *in[1]); },
        [av, bv](std::span<const T> g, std::span<std::vector<T>* const> gin) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (gin[0]) (*gin[0])[i] += g[i] * bv[i];
                if (gin[1]) (*gin[1])[i] += g[i] * av[i];
            }
        });
}

template <std::floating_point T>
Var<T> sum(Var<T> x) {
    auto fwd = [](const Tensor<T>& t) {
        T s = T(0);
        for (T v : t.data()) s += v;
        return Tensor<T>::scalar(s);
    };
    return x.tape->record(
        "sum", fwd(x.value()), {x}, [fwd](auto in) { return fwd(*in[0]); },
        [](std::span<const T> g, std::span<std::vector<T>* const> gin) {
            for (auto& v : *gin[0]) v += g[0];
        });
}

template <std::floating_point T>
Var<T> mean(Var<T> x) {
    auto fwd = [](const Tensor<T>& t) {
        T s = T(0);
        for (T v : t.data()) s += v;
        return Tensor<T>::scalar(s / static_cast<T>(t.size()));
    };
    const auto n = static_cast<T>(x.value().size());
    return x.tape->record(
        "mean", fwd(x.value()), {x}, [fwd](auto in) { return fwd(*in[0]); },
        [n](std::span<const T> g, std::span<std::vector<T>* const> gin) {
            const T d = g[0] / n;
            for (auto& v : *gin[0]) v += d;
        });
}

template <std::floating_point T>
Var<T> concat(Var<T> a, Var<T> b) {
    auto out = kernels::concat_channels(a.value(), b.value());
    const Shape sa = a.shape(), sb = b.shape();
    return a.tape->record(
        "concat", std::move(out), {a, b}, [](auto in) { return kernels::concat_channels(*in[0], *in[1]); },
        [sa, sb](std::span<const T> g, std::span<std::vector<T>* const> gin) {
            const std::size_t N = sa[0], Ca = sa[1], Cb = sb[1], HW = sa[2] * sa[3];
            for (std::size_t n = 0; n < N; ++n) {
                const T* src = g.data() + n * (Ca + Cb) * HW;
                if (gin[0])
                    for (std::size_t i = 0; i < Ca * HW; ++i) (*gin[0])[n * Ca * HW + i] += src[i];
                if (gin[1])
                    for (std::size_t i = 0; i < Cb * HW; ++i) (*gin[1])[n * Cb * HW + i] += src[Ca * HW + i];
            }
        });
}

template <std::floating_point T>
Var<T> maxpool2x2(Var<T> x) {
    auto argmax = std::make_shared<std::vector<std::uint32_t>>();
    auto out = kernels::maxpool2x2(x.value(), argmax.get());
    return x.tape->record(
        "maxpool2x2", std::move(out), {x}, [](auto in) { return kernels::maxpool2x2(*in[0]); },
        [argmax](std::span<const T> g, std::span<std::vector<T>* const> gin) {
            auto& gx = *gin[0];
            for (std::size_t i = 0; i < g.size(); ++i) gx[(*argmax)[i]] += g[i];
        });
}

template <std::floating_point T>
Var<T> upsample2x(Var<T> x) {
    const Shape in_shape = x.shape();
    return x.tape->record(
        "upsample2x", kernels::upsample2x(x.value()), {x}, [](auto in) { return kernels::upsample2x(*in[0]); },
        [in_shape](std::span<const T> g, std::span<std::vector<T>* const> gin) {
            detail::accumulate<T>(gin[0], std::span<const T>(kernels::upsample2x_backward<T>(in_shape, g)));
        });
}

template <std::floating_point T>
Var<T> softmax(Var<T> x) {
    auto out = kernels::softmax_channels(x.value());
    const Tensor<T> probs = out;
    return x.tape->record(
        "softmax", std::move(out), {x}, [](auto in) { return kernels::softmax_channels(*in[0]); },
        [probs](std::span<const T> g, std::span<std::vector<T>* const> gin) {
            const std::size_t N = probs.dim(0), C = probs.dim(1), S = probs.size() / (N * C);
            auto p = probs.data();
            auto& gx = *gin[0];
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t s = 0; s < S; ++s) {
                    const std::size_t base = n * C * S + s;
                    T dot = T(0);
                    for (std::size_t c = 0; c < C; ++c) dot += g[base + c * S] * p[base + c * S];
                    for (std::size_t c = 0; c < C; ++c) gx[base + c * S] += p[base + c * S] * (g[base + c * S] - dot);
                }
        });
}

/// Mean squared error between two equally shaped values.
template <std::floating_point T>
Var<T> mse(Var<T> a, Var<T> b) {
    detail::require_same_shape(a, b, "mse");
    const Tensor<T> av = a.value(), bv = b.value();
    auto fwd = [](const Tensor<T>& x, const Tensor<T>& y) {
        T s = T(0);
        for (std::size_t i = 0; i < x.size(); ++i) {
            const T d = x[i] - y[i];
            s += d * d;
        }
        return Tensor<T>::scalar(s / static_cast<T>(x.size()));
    };
    return a.tape->record(
        "mse", fwd(av, bv), {a, b}, [fwd](auto in) { return fwd(*in[0], *in[1]); },
        [av, bv](std::span<const T> g, std::span<std::vector<T>* const> gin) {
            const T scale = T(2) * g[0] / static_cast<T>(av.size());
            for (std::size_t i = 0; i < av.size(); ++i) {
                const T d = scale * (av[i] - bv[i]);
                if (gin[0]) (*gin[0])[i] += d;
                if (gin[1]) (*gin[1])[i] -= d;
            }
        });
}

/// Mean over pixels of the softmax cross-entropy between [N,C,H,W] logits and
/// integer labels laid out as [N,H,W].
template <std::floating_point T>
Var<T> softmax_cross_entropy(Var<T> logits, std::shared_ptr<const std::vector<std::int32_t>> labels) {
    const Tensor<T> lv = logits.value();
    if (lv.rank() != 4) throw DimensionError("cross_entropy: logits must be [N,C,H,W], got " + shape_str(lv.shape()));
    const std::size_t N = lv.dim(0), C = lv.dim(1), S = lv.dim(2) * lv.dim(3);
    if (labels->size() != N * S)
        throw DimensionError("cross_entropy: " + std::to_string(labels->size()) + " labels for " + std::to_string(N * S) +
                             " pixels");
    for (auto l : *labels)
        if (l < 0 || static_cast<std::size_t>(l) >= C) throw ContractError("cross_entropy: label out of range");

    auto fwd = [labels](const Tensor<T>& x) {
        const std::size_t N = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3);
        auto d = x.data();
        T total = T(0);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t s = 0; s < S; ++s) {
                const std::size_t base = n * C * S + s;
                T m = d[base];
                for (std::size_t c = 1; c < C; ++c) m = std::max(m, d[base + c * S]);
                T z = T(0);
                for (std::size_t c = 0; c < C; ++c) z += std::exp(d[base + c * S] - m);
                const auto label = static_cast<std::size_t>((*labels)[n * S + s]);
                total += m + std::log(z) - d[base + label * S];
            }
        return Tensor<T>::scalar(total / static_cast<T>(N * S));
    };
    return logits.tape->record(
        "softmax_cross_entropy", fwd(lv), {logits}, [fwd](auto in) { return fwd(*in[0]); },
        [lv, labels](std::span<const T> g, std::span<std::vector<T>* const> gin) {
            const std::size_t N = lv.dim(0), C = lv.dim(1), S = lv.dim(2) * lv.dim(3);
            const auto p = kernels::softmax_channels(lv);
            const T scale = g[0] / static_cast<T>(N * S);
            auto& gx = *gin[0];
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t s = 0; s < S; ++s) {
                    const std::size_t base = n * C * S + s;
                    const auto label = static_cast<std::size_t>((*labels)[n * S + s]);
                    for (std::size_t c = 0; c < C; ++c)
                        gx[base + c * S] += scale * (p[base + c * S] - (c == label ? T(1) : T(0)));
                }
        });
}

/// Training-mode batch normalization: normalizes with the batch statistics
/// (biased variance), which are also written to `stats` for the caller's
/// running-average update.
template <std::floating_point T>
Var<T> batchnorm_train(Var<T> x, Var<T> weight, Var<T> bias, T eps, kernels::BatchNormStats<T>* stats = nullptr) {
    const Tensor<T> xv = x.value(), wv = weight.value();
    auto st = kernels::batch_stats(xv);
    auto fwd = [eps](const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& b) {
        const auto s = kernels::batch_stats(in);
        return kernels::batchnorm_apply<T>(in, s.mean, s.var, w.data(), b.data(), eps);
    };
    auto out = kernels::batchnorm_apply<T>(xv, st.mean, st.var, wv.data(), bias.value().data(), eps);
    if (stats) *stats = st;
    auto saved = std::make_shared<const kernels::BatchNormStats<T>>(std::move(st));
    return x.tape->record(
        "batchnorm_train", std::move(out), {x, weight, bias}, [fwd](auto in) { return fwd(*in[0], *in[1], *in[2]); },
        [xv, wv, saved, eps](std::span<const T> g, std::span<std::vector<T>* const> gin) {
            const std::size_t N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
            const T M = static_cast<T>(N * HW);
            auto d = xv.data();
            for (std::size_t c = 0; c < C; ++c) {
                const T mu = saved->mean[c], sd = std::sqrt(saved->var[c] + eps);
                T sum_g = T(0), sum_gx = T(0);
                for (std::size_t n = 0; n < N; ++n) {
                    const std::size_t off = (n * C + c) * HW;
                    for (std::size_t i = 0; i < HW; ++i) {
                        sum_g += g[off + i];
                        sum_gx += g[off + i] * ((d[off + i] - mu) / sd);
                    }
                }
                if (gin[1]) (*gin[1])[c] += sum_gx;
                if (gin[2]) (*gin[2])[c] += sum_g;
                if (!gin[0]) continue;
                const T k = wv[c] / sd, mean_g = sum_g / M, mean_gx = sum_gx / M;
                for (std::size_t n = 0; n < N; ++n) {
                    const std::size_t off = (n * C + c) * HW;
                    for (std::size_t i = 0; i < HW; ++i) {
                        const T xhat = (d[off + i] - mu) / sd;
                        (*gin[0])[off + i] += k * (g[off + i] - mean_g - xhat * mean_gx);
                    }
                }
            }
        });
}

/// Inference-mode batch normalization with fixed running statistics.
template <std::floating_point T>
Var<T> batchnorm_eval(Var<T> x, const Tensor<T>& running_mean, const Tensor<T>& running_var, Var<T> weight,
                      Var<T> bias, T eps) {
    const Tensor<T> xv = x.value(), wv = weight.value();
    const Tensor<T> rm = running_mean, rv = running_var;
    auto out = kernels::batchnorm_apply<T>(xv, rm.data(), rv.data(), wv.data(), bias.value().data(), eps);
    return x.tape->record(
        "batchnorm_eval", std::move(out), {x, weight, bias},
        [rm, rv, eps](auto in) { return kernels::batchnorm_apply<T>(*in[0], rm.data(), rv.data(), in[1]->data(), in[2]->data(), eps); },
        [xv, wv, rm, rv, eps](std::span<const T> g, std::span<std::vector<T>* const> gin) {
            const std::size_t N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
            auto d = xv.data();
            for (std::size_t c = 0; c < C; ++c) {
                const T mu = rm[c], sd = std::sqrt(rv[c] + eps), k = wv[c] / sd;
                T sum_g = T(0), sum_gx = T(0);
                for (std::size_t n = 0; n < N; ++n) {
                    const std::size_t off = (n * C + c) * HW;
                    for (std::size_t i = 0; i < HW; ++i) {
                        sum_g += g[off + i];
                        sum_gx += g[off + i] * ((d[off + i] - mu) / sd);
                        if (gin[0]) (*gin[0])[off + i] += k * g[off + i];
                    }
                }
                if (gin[1]) (*gin[1])[c] += sum_gx;
                if (gin[2]) (*gin[2])[c] += sum_g;
            }
        });
}

}  // namespace layerswap::ops
