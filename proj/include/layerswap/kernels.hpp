#pragma once

// Tape-free numeric kernels. Every reduction runs in a fixed left-to-right
// order in the storage precision, so results are bit-reproducible.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "layerswap/errors.hpp"
#include "layerswap/tensor.hpp"

namespace layerswap::kernels {

struct Conv2dGeometry {
    std::size_t n, cin, h, w;
    std::size_t cout, kh, kw;
    std::size_t stride, padding;
    std::size_t ho, wo;

    std::size_t k() const { return cin * kh * kw; }
    std::size_t p() const { return ho * wo; }
};

template <std::floating_point T>
Conv2dGeometry conv2d_geometry(const Tensor<T>& input, const Tensor<T>& weight,
                               const Tensor<T>* bias, std::size_t stride, std::size_t padding) {
    if (input.rank() != 4) throw DimensionError("conv2d: input must be [N,C,H,W], got " + shape_str(input.shape()));
    if (weight.rank() != 4)
        throw DimensionError("conv2d: weight must be [Cout,Cin,kh,kw], got " + shape_str(weight.shape()));
    if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
    Conv2dGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3),
                     weight.dim(0), weight.dim(2), weight.dim(3), stride, padding, 0, 0};
    if (weight.dim(1) != g.cin)
        throw DimensionError("conv2d: weight expects " + std::to_string(weight.dim(1)) + " input channels, input has " +
                             std::to_string(g.cin));
    if (g.kh > g.h + 2 * padding || g.kw > g.w + 2 * padding)
        throw DimensionError("conv2d: kernel larger than padded input");
    if (bias && (bias->rank() != 1 || bias->dim(0) != g.cout))
        throw DimensionError("conv2d: bias must be [" + std::to_string(g.cout) + "], got " + shape_str(bias->shape()));
    g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
    g.wo = (g.w + 2 * padding - g.kw) / stride + 1;
    return g;
}

namespace detail {

// col[k][p] for one image; k = (ci*kh + ky)*kw + kx, p = oy*wo + ox.
template <class T>
void im2col(const T* x, const Conv2dGeometry& g, T* col) {
    const std::size_t P = g.p();
    const auto pad = static_cast<std::ptrdiff_t>(g.padding);
    const auto W = static_cast<std::ptrdiff_t>(g.w);
    for (std::size_t ci = 0; ci < g.cin; ++ci)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                T* row = col + ((ci * g.kh + ky) * g.kw + kx) * P;
                const T* plane = x + ci * g.h * g.w;
                // Output columns whose input column lies inside the image.
                const auto off = static_cast<std::ptrdiff_t>(kx) - pad;
                std::size_t lo = 0, hi = g.wo;
                while (lo < hi && static_cast<std::ptrdiff_t>(lo * g.stride) + off < 0) ++lo;
                while (hi > lo && static_cast<std::ptrdiff_t>((hi - 1) * g.stride) + off >= W) --hi;
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
                    T* dst = row + oy * g.wo;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
                        std::fill(dst, dst + g.wo, T(0));
                        continue;
                    }
                    const T* src = plane + static_cast<std::size_t>(iy) * g.w;
                    std::fill(dst, dst + lo, T(0));
                    if (g.stride == 1) {
                        std::copy(src + static_cast<std::ptrdiff_t>(lo) + off, src + static_cast<std::ptrdiff_t>(hi) + off, dst + lo);
                    } else {
                        for (std::size_t ox = lo; ox < hi; ++ox)
                            dst[ox] = src[static_cast<std::ptrdiff_t>(ox * g.stride) + off];
                    }
                    std::fill(dst + hi, dst + g.wo, T(0));
                }
            }
}

// Scatter-add of col[k][p] back onto the image, in (k, p) order.
template <class T>
void col2im_add(const T* col, const Conv2dGeometry& g, T* x) {
    const std::size_t P = g.p();
    for (std::size_t ci = 0; ci < g.cin; ++ci)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const T* dc = col + ((ci * g.kh + ky) * g.kw + kx) * P;
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.padding);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
                    T* drow = x + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
                    for (std::size_t ox = 0; ox < g.wo; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.padding);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
                        drow[ix] += dc[oy * g.wo + ox];
                    }
                }
            }
}

// Dot product with eight interleaved partial sums combined pairwise, then the
// tail added left to right. The order is fixed, so the result is reproducible.
template <class T>
T blocked_dot(const T* __restrict a, const T* __restrict b, std::size_t n) {
    T acc[8] = {};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (std::size_t j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
    T s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

}  // namespace detail

/// Cross-correlation. For each output element the products are summed over
/// (ci, ky, kx) in row-major order starting from zero, then the bias is added.
/// When `cols` is given it receives the per-image im2col buffers, which
/// conv2d_backward can reuse.
template <std::floating_point T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>* bias, std::size_t stride,
                 std::size_t padding, std::vector<T>* cols = nullptr) {
    const auto g = conv2d_geometry(input, weight, bias, stride, padding);
    const std::size_t K = g.k(), P = g.p();
    std::vector<T> out(g.n * g.cout * P, T(0));
    std::vector<T> scratch;
    if (cols) cols->resize(g.n * K * P);
    else scratch.resize(K * P);
    const T* w = weight.data().data();
    constexpr std::size_t kBlock = 1024;

    for (std::size_t n = 0; n < g.n; ++n) {
        T* col = cols ? cols->data() + n * K * P : scratch.data();
        detail::im2col(input.data().data() + n * g.cin * g.h * g.w, g, col);
        T* o = out.data() + n * g.cout * P;
        for (std::size_t p0 = 0; p0 < P; p0 += kBlock) {
            const std::size_t p1 = std::min(P, p0 + kBlock);
            std::size_t co = 0;
            for (; co + 4 <= g.cout; co += 4) {
                T* __restrict o0 = o + co * P;
                T* __restrict o1 = o0 + P;
                T* __restrict o2 = o1 + P;
                T* __restrict o3 = o2 + P;
                for (std::size_t k = 0; k < K; ++k) {
                    const T w0 = w[co * K + k], w1 = w[(co + 1) * K + k];
                    const T w2 = w[(co + 2) * K + k], w3 = w[(co + 3) * K + k];
                    const T* __restrict c = col + k * P;
                    for (std::size_t p = p0; p < p1; ++p) {
                        const T v = c[p];
                        o0[p] += w0 * v;
                        o1[p] += w1 * v;
                        o2[p] += w2 * v;
                        o3[p] += w3 * v;
                    }
                }
            }
            for (; co < g.cout; ++co) {
                T* __restrict o0 = o + co * P;
                for (std::size_t k = 0; k < K; ++k) {
                    const T w0 = w[co * K + k];
                    const T* __restrict c = col + k * P;
                    for (std::size_t p = p0; p < p1; ++p) o0[p] += w0 * c[p];
                }
            }
        }
        if (bias) {
            for (std::size_t co = 0; co < g.cout; ++co) {
                const T b = (*bias)[co];
                T* o0 = o + co * P;
                for (std::size_t p = 0; p < P; ++p) o0[p] += b;
            }
        }
    }
    return check_finite(Tensor<T>({g.n, g.cout, g.ho, g.wo}, std::move(out)), "conv2d");
}

template <std::floating_point T>
struct Conv2dGrads {
    std::vector<T> input, weight, bias;
};

/// Gradients of conv2d. Empty vectors are returned for the parts not requested.
/// `cols` may carry the im2col buffers saved by the forward pass.
///
/// Weight gradients sum images in order; within an image each entry is a
/// blocked_dot over output positions. Input gradients sum output channels in
/// order, then scatter back in (k, p) order.
template <std::floating_point T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& weight, bool has_bias, std::size_t stride,
                               std::size_t padding, std::span<const T> grad_out, bool need_input, bool need_weight,
                               const std::vector<T>* cols = nullptr) {
    const auto g = conv2d_geometry<T>(input, weight, nullptr, stride, padding);
    const std::size_t K = g.k(), P = g.p();
    Conv2dGrads<T> r;
    const T* w = weight.data().data();

    if (need_weight) {
        r.weight.assign(g.cout * K, T(0));
        std::vector<T> scratch;
        if (!cols) scratch.resize(K * P);
        for (std::size_t n = 0; n < g.n; ++n) {
            const T* col = cols ? cols->data() + n * K * P : scratch.data();
            if (!cols) detail::im2col(input.data().data() + n * g.cin * g.h * g.w, g, scratch.data());
            const T* go = grad_out.data() + n * g.cout * P;
            for (std::size_t co = 0; co < g.cout; ++co) {
                T* dw = r.weight.data() + co * K;
                for (std::size_t k = 0; k < K; ++k) dw[k] += detail::blocked_dot(go + co * P, col + k * P, P);
            }
        }
    }
    if (has_bias) {
        r.bias.assign(g.cout, T(0));
        for (std::size_t n = 0; n < g.n; ++n)
            for (std::size_t co = 0; co < g.cout; ++co) {
                const T* go = grad_out.data() + (n * g.cout + co) * P;
                for (std::size_t p = 0; p < P; ++p) r.bias[co] += go[p];
            }
    }
    if (need_input) {
        r.input.assign(g.n * g.cin * g.h * g.w, T(0));
        std::vector<T> dcol(K * P);
        for (std::size_t n = 0; n < g.n; ++n) {
            std::fill(dcol.begin(), dcol.end(), T(0));
            const T* go = grad_out.data() + n * g.cout * P;
            for (std::size_t k = 0; k < K; ++k) {
                T* __restrict dc = dcol.data() + k * P;
                for (std::size_t co = 0; co < g.cout; ++co) {
                    const T wv = w[co * K + k];
                    const T* __restrict gr = go + co * P;
                    for (std::size_t p = 0; p < P; ++p) dc[p] += wv * gr[p];
                }
            }
            detail::col2im_add(dcol.data(), g, r.input.data() + n * g.cin * g.h * g.w);
        }
    }
    return r;
}

template <std::floating_point T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.size());
    auto d = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = d[i] > T(0) ? d[i] : T(0);
    return Tensor<T>(x.shape(), std::move(out));
}

inline void require_4d(const Shape& s, const char* op) {
    if (s.size() != 4) throw DimensionError(std::string(op) + ": expected [N,C,H,W], got " + shape_str(s));
}

/// 2x2 max pooling with stride 2. `argmax` receives the flat input index that
/// produced each output; ties go to the first element in row-major order.
template <std::floating_point T>
Tensor<T> maxpool2x2(const Tensor<T>& x, std::vector<std::uint32_t>* argmax = nullptr) {
    require_4d(x.shape(), "maxpool2x2");
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % 2 || W % 2) throw DimensionError("maxpool2x2: spatial dims must be even, got " + shape_str(x.shape()));
    const std::size_t Ho = H / 2, Wo = W / 2;
    std::vector<T> out(N * C * Ho * Wo);
    if (argmax) argmax->resize(out.size());
    auto d = x.data();
    std::size_t o = 0;
    for (std::size_t nc = 0; nc < N * C; ++nc)
        for (std::size_t y = 0; y < Ho; ++y)
            for (std::size_t xx = 0; xx < Wo; ++xx, ++o) {
                const std::size_t base = (nc * H + 2 * y) * W + 2 * xx;
                const std::size_t cand[4] = {base, base + 1, base + W, base + W + 1};
                std::size_t best = cand[0];
                for (int i = 1; i < 4; ++i)
                    if (d[cand[i]] > d[best]) best = cand[i];
                out[o] = d[best];
                if (argmax) (*argmax)[o] = static_cast<std::uint32_t>(best);
            }
    return Tensor<T>({N, C, Ho, Wo}, std::move(out));
}

template <std::floating_point T>
Tensor<T> upsample2x(const Tensor<T>& x) {
    require_4d(x.shape(), "upsample2x");
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    std::vector<T> out(N * C * H * W * 4);
    auto d = x.data();
    for (std::size_t nc = 0; nc < N * C; ++nc)
        for (std::size_t y = 0; y < 2 * H; ++y) {
            const T* src = d.data() + (nc * H + y / 2) * W;
            T* dst = out.data() + (nc * 2 * H + y) * 2 * W;
            for (std::size_t xx = 0; xx < 2 * W; ++xx) dst[xx] = src[xx / 2];
        }
    return Tensor<T>({N, C, 2 * H, 2 * W}, std::move(out));
}

/// Sum of each 2x2 block of `grad` in the order (0,0),(0,1),(1,0),(1,1).
template <std::floating_point T>
std::vector<T> upsample2x_backward(const Shape& in_shape, std::span<const T> grad) {
    const std::size_t NC = in_shape[0] * in_shape[1], H = in_shape[2], W = in_shape[3];
    std::vector<T> out(NC * H * W);
    for (std::size_t nc = 0; nc < NC; ++nc)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xx = 0; xx < W; ++xx) {
                const std::size_t b = (nc * 2 * H + 2 * y) * 2 * W + 2 * xx;
                T s = grad[b];
                s += grad[b + 1];
                s += grad[b + 2 * W];
                s += grad[b + 2 * W + 1];
                out[(nc * H + y) * W + xx] = s;
            }
    return out;
}

template <std::floating_point T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    require_4d(a.shape(), "concat");
    require_4d(b.shape(), "concat");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw DimensionError("concat: non-channel dims differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), HW = a.dim(2) * a.dim(3);
    std::vector<T> out;
    out.reserve(N * (Ca + Cb) * HW);
    for (std::size_t n = 0; n < N; ++n) {
        auto da = a.data().subspan(n * Ca * HW, Ca * HW);
        auto db = b.data().subspan(n * Cb * HW, Cb * HW);
        out.insert(out.end(), da.begin(), da.end());
        out.insert(out.end(), db.begin(), db.end());
    }
    return Tensor<T>({N, Ca + Cb, a.dim(2), a.dim(3)}, std::move(out));
}

/// Softmax over axis 1 of an [N,C,...] tensor.
template <std::floating_point T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
    if (x.rank() < 2) throw DimensionError("softmax: expected rank >= 2, got " + shape_str(x.shape()));
    const std::size_t N = x.dim(0), C = x.dim(1), S = x.size() / (N * C);
    std::vector<T> out(x.size());
    auto d = x.data();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t s = 0; s < S; ++s) {
            const std::size_t base = n * C * S + s;
            T m = d[base];
            for (std::size_t c = 1; c < C; ++c) m = std::max(m, d[base + c * S]);
            T z = T(0);
            for (std::size_t c = 0; c < C; ++c) {
                const T e = std::exp(d[base + c * S] - m);
                out[base + c * S] = e;
                z += e;
            }
            for (std::size_t c = 0; c < C; ++c) out[base + c * S] /= z;
        }
    return Tensor<T>(x.shape(), std::move(out));
}

template <std::floating_point T>
struct BatchNormStats {
    std::vector<T> mean, var;  // biased (1/M) variance
    std::size_t count = 0;     // elements per channel, M
};

/// Per-channel batch statistics over N, H, W of an [N,C,H,W] tensor.
template <std::floating_point T>
BatchNormStats<T> batch_stats(const Tensor<T>& x) {
    require_4d(x.shape(), "batchnorm");
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    const T M = static_cast<T>(N * HW);
    BatchNormStats<T> s{std::vector<T>(C, T(0)), std::vector<T>(C, T(0)), N * HW};
    auto d = x.data();
    for (std::size_t c = 0; c < C; ++c) {
        T sum = T(0);
        for (std::size_t n = 0; n < N; ++n) {
            const T* p = d.data() + (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) sum += p[i];
        }
        const T mu = sum / M;
        T sq = T(0);
        for (std::size_t n = 0; n < N; ++n) {
            const T* p = d.data() + (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
                const T dv = p[i] - mu;
                sq += dv * dv;
            }
        }
        s.mean[c] = mu;
        s.var[c] = sq / M;
    }
    return s;
}

/// y = w * ((x - mean) / sqrt(var + eps)) + b, evaluated per element in exactly
/// this order.
template <std::floating_point T>
Tensor<T> batchnorm_apply(const Tensor<T>& x, std::span<const T> mean, std::span<const T> var,
                          std::span<const T> weight, std::span<const T> bias, T eps) {
    require_4d(x.shape(), "batchnorm");
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (mean.size() != C || var.size() != C || weight.size() != C || bias.size() != C)
        throw DimensionError("batchnorm: layer has " + std::to_string(mean.size()) + " channels, input has " +
                             std::to_string(C));
    std::vector<T> out(x.size());
    auto d = x.data();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const T mu = mean[c], sd = std::sqrt(var[c] + eps), wc = weight[c], bc = bias[c];
            const std::size_t off = (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) out[off + i] = wc * ((d[off + i] - mu) / sd) + bc;
        }
    return check_finite(Tensor<T>(x.shape(), std::move(out)), "batchnorm");
}

}  // namespace layerswap::kernels
