// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

#include "cptpm/cp_decomposer.hpp"
#include "cptpm/tensor.hpp"

#ifndef CPTPM_COUNT_MULTIPLIES
#define CPTPM_COUNT_MULTIPLIES 1
#endif

namespace cptpm {

inline constexpr bool kCountMultiplies = CPTPM_COUNT_MULTIPLIES != 0;

/// Tally of scalar multiplications executed by the forward kernels.
struct OpCounter {
    std::uint64_t multiplies = 0;

    void add(std::uint64_t n) {
        if constexpr (kCountMultiplies) multiplies += n;
    }
};

struct ConvSpec {
    std::size_t out_channels = 1;  // T
    std::size_t in_channels = 1;   // S
    std::size_t kernel_size = 1;   // D, odd
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t groups = 1;

    std::size_t in_per_group() const { return in_channels / groups; }
    std::size_t out_per_group() const { return out_channels / groups; }

    void validate() const {
        if (out_channels < 1 || in_channels < 1 || kernel_size < 1 || stride < 1 || groups < 1)
            throw std::invalid_argument("conv spec: channels, kernel size, stride and groups must be >= 1");
        if (kernel_size % 2 == 0)
            throw std::invalid_argument("conv spec: kernel size must be odd, got " +
                                        std::to_string(kernel_size));
        if (in_channels % groups != 0 || out_channels % groups != 0)
            throw std::invalid_argument("conv spec: groups must divide both channel counts");
    }

    /// W' = (W + 2p - D) / stride + 1; rejects non-integer or empty outputs.
    std::size_t output_extent(std::size_t input) const {
        const std::size_t padded = input + 2 * padding;
        if (padded < kernel_size)
            throw std::invalid_argument("conv spec: kernel " + std::to_string(kernel_size) +
                                        " larger than padded input " + std::to_string(padded));
        if ((padded - kernel_size) % stride != 0)
            throw std::invalid_argument("conv spec: non-integer output extent for input " +
                                        std::to_string(input) + ", kernel " +
                                        std::to_string(kernel_size) + ", stride " +
                                        std::to_string(stride) + ", padding " +
                                        std::to_string(padding));
        return (padded - kernel_size) / stride + 1;
    }

    Shape kernel_shape() const { return {out_channels, in_per_group(), kernel_size, kernel_size}; }

    bool operator==(const ConvSpec&) const = default;
};

namespace detail {

inline Tensor zero_pad(const Tensor& x, std::size_t p) {
    if (p == 0) return x;
    const std::size_t C = x.shape()[0], W = x.shape()[1], H = x.shape()[2];
    const std::size_t Wp = W + 2 * p, Hp = H + 2 * p;
    Tensor out({C, Wp, Hp});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t w = 0; w < W; ++w)
            std::copy_n(x.data().data() + (c * W + w) * H, H,
                        out.data().data() + (c * Wp + w + p) * Hp + p);
    return out;
}

inline void check_input(const Tensor& x, const ConvSpec& spec, const char* what) {
    if (x.order() != 3 || x.shape()[0] != spec.in_channels)
        throw std::invalid_argument(std::string(what) + ": input " + shape_string(x.shape()) +
                                    " does not match " + std::to_string(spec.in_channels) +
                                    " input channels");
}

// Grouped direct convolution over an already padded input.
inline Tensor conv_padded(const Tensor& xp, const double* kernel, const ConvSpec& spec,
                          std::size_t Wo, std::size_t Ho, OpCounter* counter) {
    const std::size_t T = spec.out_channels, Sg = spec.in_per_group(), Tg = spec.out_per_group();
    const std::size_t D = spec.kernel_size, st = spec.stride;
    const std::size_t Wp = xp.shape()[1], Hp = xp.shape()[2];
    Tensor y({T, Wo, Ho});
    double* out = y.data().data();
    const double* in = xp.data().data();
    for (std::size_t t = 0; t < T; ++t) {
        const std::size_t g = t / Tg;
        double* yt = out + t * Wo * Ho;
        for (std::size_t sl = 0; sl < Sg; ++sl) {
            const double* xs = in + (g * Sg + sl) * Wp * Hp;
            const double* ks = kernel + (t * Sg + sl) * D * D;
            for (std::size_t j = 0; j < D; ++j)
                for (std::size_t i = 0; i < D; ++i) {
                    const double kv = ks[j * D + i];
                    for (std::size_t wo = 0; wo < Wo; ++wo) {
                        const double* xrow = xs + (wo * st + j) * Hp + i;
                        double* yrow = yt + wo * Ho;
                        for (std::size_t ho = 0; ho < Ho; ++ho) yrow[ho] += kv * xrow[ho * st];
                    }
                    if (counter) counter->add(Wo * Ho);
                }
        }
    }
    return y;
}

}  // namespace detail

/// Direct convolution: y[t,w',h'] = sum_{s,j,i} k[t,s,j,i] x[s, w'*stride+j-p, h'*stride+i-p]
/// with zero padding. Input S x W x H, kernel T x S_g x D x D.
inline Tensor conv_forward(const Tensor& x, const Tensor& k, const ConvSpec& spec,
                           OpCounter* counter = nullptr) {
    spec.validate();
    detail::check_input(x, spec, "conv_forward");
    if (k.shape() != spec.kernel_shape())
        throw std::invalid_argument("conv_forward: kernel " + shape_string(k.shape()) +
                                    " does not match " + shape_string(spec.kernel_shape()));
    const std::size_t Wo = spec.output_extent(x.shape()[1]);
    const std::size_t Ho = spec.output_extent(x.shape()[2]);
    return detail::conv_padded(detail::zero_pad(x, spec.padding), k.data().data(), spec, Wo, Ho,
                               counter);
}

/// The three stages of a factorized convolution.
struct DecomposedConvStages {
    ConvSpec input_mix;  // 1x1, S -> R, grouped like the original layer
    ConvSpec spatial;    // DxD depthwise over R channels; carries stride and padding
    ConvSpec output_mix; // 1x1, R -> T, grouped like the original layer
};

inline DecomposedConvStages decomposed_stage_specs(const ConvSpec& spec, const CpFactors& f) {
    spec.validate();
    f.validate();
    if (f.groups != spec.groups || f.out_channels() != spec.out_channels ||
        f.in_channels_per_group() != spec.in_per_group() || f.kernel_size() != spec.kernel_size)
        throw std::invalid_argument("decomposed conv: factors (T=" +
                                    std::to_string(f.out_channels()) + ", S_g=" +
                                    std::to_string(f.in_channels_per_group()) + ", D=" +
                                    std::to_string(f.kernel_size()) + ", groups=" +
                                    std::to_string(f.groups) + ") inconsistent with layer spec");
    const std::size_t R = f.rank();
    return {ConvSpec{R, spec.in_channels, 1, 1, 0, spec.groups},
            ConvSpec{R, R, spec.kernel_size, spec.stride, spec.padding, R},
            ConvSpec{spec.out_channels, R, 1, 1, 0, spec.groups}};
}

/// Intermediate tensors of the factorized pipeline: z is R x W x H,
/// z_spatial is R x W' x H', y is T x W' x H'.
struct DecomposedConvTrace {
    Tensor z;
    Tensor z_spatial;
    Tensor y;
};

inline DecomposedConvTrace conv_forward_decomposed_trace(const Tensor& x, const CpFactors& f,
                                                         const ConvSpec& spec,
                                                         OpCounter* counter = nullptr) {
    const DecomposedConvStages st = decomposed_stage_specs(spec, f);
    detail::check_input(x, spec, "conv_forward_decomposed");
    // Validate the output extent against the original layer before doing any work.
    spec.output_extent(x.shape()[1]);
    spec.output_extent(x.shape()[2]);

    DecomposedConvTrace trace;
    trace.z = detail::conv_padded(x, f.u1.data().data(), st.input_mix, x.shape()[1],
                                  x.shape()[2], counter);
    const std::size_t Wo = st.spatial.output_extent(x.shape()[1]);
    const std::size_t Ho = st.spatial.output_extent(x.shape()[2]);
    trace.z_spatial = detail::conv_padded(detail::zero_pad(trace.z, spec.padding),
                                          f.u2.data().data(), st.spatial, Wo, Ho, counter);
    trace.y = detail::conv_padded(trace.z_spatial, f.u3.data().data(), st.output_mix, Wo, Ho,
                                  counter);
    return trace;
}

inline Tensor conv_forward_decomposed(const Tensor& x, const CpFactors& f, const ConvSpec& spec,
                                      OpCounter* counter = nullptr) {
    return conv_forward_decomposed_trace(x, f, spec, counter).y;
}

/// Adds bias[c] to every spatial position of channel c.
inline void add_channel_bias(Tensor& y, const Tensor& bias) {
    if (y.order() != 3 || bias.size() != y.shape()[0])
        throw std::invalid_argument("add_channel_bias: bias length does not match channels");
    const std::size_t plane = y.shape()[1] * y.shape()[2];
    for (std::size_t c = 0; c < y.shape()[0]; ++c) {
        double* p = y.data().data() + c * plane;
        const double b = bias.data()[c];
        for (std::size_t i = 0; i < plane; ++i) p[i] += b;
    }
}

/// y = W x + bias, W is M x N (row m holds the weights of output m).
inline Tensor fc_forward(const Tensor& x, const Tensor& w, const Tensor& bias,
                         OpCounter* counter = nullptr) {
    if (w.order() != 2) throw std::invalid_argument("fc_forward: weight must be a matrix");
    const std::size_t M = w.shape()[0], N = w.shape()[1];
    if (x.size() != N)
        throw std::invalid_argument("fc_forward: input length " + std::to_string(x.size()) +
                                    " != " + std::to_string(N));
    if (bias.size() != M)
        throw std::invalid_argument("fc_forward: bias length " + std::to_string(bias.size()) +
                                    " != " + std::to_string(M));
    Tensor y({M});
    const double* pw = w.data().data();
    const double* px = x.data().data();
    for (std::size_t m = 0; m < M; ++m) {
        double s = 0.0;
        const double* row = pw + m * N;
        for (std::size_t n = 0; n < N; ++n) s += row[n] * px[n];
        y.data()[m] = s + bias.data()[m];
    }
    if (counter) counter->add(M * N);
    return y;
}

inline Tensor relu(const Tensor& x) {
    Tensor y = x;
    for (double& v : y.data()) v = std::max(v, 0.0);
    return y;
}

inline std::size_t pool_extent(std::size_t input, std::size_t window, std::size_t stride) {
    if (window < 1 || stride < 1) throw std::invalid_argument("max_pool: window and stride must be >= 1");
    if (input < window)
        throw std::invalid_argument("max_pool: window " + std::to_string(window) +
                                    " larger than input " + std::to_string(input));
    return (input - window) / stride + 1;
}

/// Max pooling over C x W x H; only windows that lie fully inside the input.
inline Tensor max_pool(const Tensor& x, std::size_t window, std::size_t stride) {
    if (x.order() != 3) throw std::invalid_argument("max_pool: expected C x W x H input");
    const std::size_t C = x.shape()[0], W = x.shape()[1], H = x.shape()[2];
    const std::size_t Wo = pool_extent(W, window, stride), Ho = pool_extent(H, window, stride);
    Tensor y({C, Wo, Ho});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t wo = 0; wo < Wo; ++wo)
            for (std::size_t ho = 0; ho < Ho; ++ho) {
                double m = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < window; ++j)
                    for (std::size_t i = 0; i < window; ++i)
                        m = std::max(m, x.data()[(c * W + wo * stride + j) * H + ho * stride + i]);
                y.data()[(c * Wo + wo) * Ho + ho] = m;
            }
    return y;
}

}  // namespace cptpm
