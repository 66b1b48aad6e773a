// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstdio>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "cptpm/conv_engine.hpp"
#include "cptpm/cp_decomposer.hpp"
#include "cptpm/matrix_factorizer.hpp"
#include "cptpm/tensor.hpp"

namespace cptpm {

struct ConvLayer {
    ConvSpec spec;
    Tensor weight;  // T x S_g x D x D
    Tensor bias;    // T
    bool operator==(const ConvLayer&) const = default;
};

struct DecomposedConvLayer {
    ConvSpec spec;
    CpFactors factors;
    Tensor bias;  // T, applied after the output-mixing stage
    bool operator==(const DecomposedConvLayer&) const = default;
};

struct FcLayer {
    Tensor weight;  // M x N
    Tensor bias;    // M
    std::size_t out_features() const { return weight.extent(0); }
    std::size_t in_features() const { return weight.extent(1); }
    bool operator==(const FcLayer&) const = default;
};

struct DecomposedFcLayer {
    SvdFactors factors;
    Tensor bias;  // M, applied after ud
    std::size_t out_features() const { return factors.rows(); }
    std::size_t in_features() const { return factors.cols(); }
    bool operator==(const DecomposedFcLayer&) const = default;
};

struct ReluLayer {
    bool operator==(const ReluLayer&) const = default;
};

struct MaxPoolLayer {
    std::size_t window = 2;
    std::size_t stride = 2;
    bool operator==(const MaxPoolLayer&) const = default;
};

struct FlattenLayer {
    bool operator==(const FlattenLayer&) const = default;
};

using LayerBody = std::variant<ConvLayer, DecomposedConvLayer, FcLayer, DecomposedFcLayer,
                               ReluLayer, MaxPoolLayer, FlattenLayer>;

struct Layer {
    std::string name;
    LayerBody body;
    bool operator==(const Layer&) const = default;
};

inline const char* layer_kind(const LayerBody& body) {
    static constexpr const char* names[] = {"conv", "decomposed_conv", "fc", "decomposed_fc",
                                            "relu", "max_pool", "flatten"};
    return names[body.index()];
}

inline bool is_decomposable(const Layer& l) {
    return std::holds_alternative<ConvLayer>(l.body) || std::holds_alternative<FcLayer>(l.body);
}

inline bool is_decomposed(const Layer& l) {
    return std::holds_alternative<DecomposedConvLayer>(l.body) ||
           std::holds_alternative<DecomposedFcLayer>(l.body);
}

/// Number of physical layers a slot expands to: three for a factorized
/// convolution, two for a factorized fully connected layer.
inline std::size_t stage_count(const Layer& l) {
    if (std::holds_alternative<DecomposedConvLayer>(l.body)) return 3;
    if (std::holds_alternative<DecomposedFcLayer>(l.body)) return 2;
    return 1;
}

/// Ordered layer list applied to a single input of `input_shape` (C x W x H).
struct NetworkSpec {
    Shape input_shape;
    std::vector<Layer> layers;

    std::size_t stage_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += cptpm::stage_count(l);
        return n;
    }

    const Layer& layer(const std::string& name) const {
        for (const auto& l : layers)
            if (l.name == name) return l;
        throw std::invalid_argument("no layer named '" + name + "'");
    }

    std::size_t index_of(const std::string& name) const {
        for (std::size_t i = 0; i < layers.size(); ++i)
            if (layers[i].name == name) return i;
        throw std::invalid_argument("no layer named '" + name + "'");
    }

    bool operator==(const NetworkSpec&) const = default;
};

/// Output shape of one layer for a given input shape; throws when they do not compose.
inline Shape layer_output_shape(const Layer& layer, const Shape& in) {
    auto need3 = [&](const char* what) {
        if (in.size() != 3)
            throw std::invalid_argument("layer '" + layer.name + "' (" + what +
                                        ") expects a C x W x H input, got " + shape_string(in));
    };
    auto conv_shape = [&](const ConvSpec& spec) -> Shape {
        need3("conv");
        if (in[0] != spec.in_channels)
            throw std::invalid_argument("layer '" + layer.name + "' expects " +
                                        std::to_string(spec.in_channels) + " channels, got " +
                                        shape_string(in));
        return {spec.out_channels, spec.output_extent(in[1]), spec.output_extent(in[2])};
    };
    auto fc_shape = [&](std::size_t m, std::size_t n) -> Shape {
        if (in.size() != 1 || in[0] != n)
            throw std::invalid_argument("layer '" + layer.name + "' expects a vector of " +
                                        std::to_string(n) + ", got " + shape_string(in));
        return {m};
    };
    return std::visit(
        [&](const auto& body) -> Shape {
            using B = std::decay_t<decltype(body)>;
            if constexpr (std::is_same_v<B, ConvLayer>) return conv_shape(body.spec);
            else if constexpr (std::is_same_v<B, DecomposedConvLayer>) return conv_shape(body.spec);
            else if constexpr (std::is_same_v<B, FcLayer>)
                return fc_shape(body.out_features(), body.in_features());
            else if constexpr (std::is_same_v<B, DecomposedFcLayer>)
                return fc_shape(body.out_features(), body.in_features());
            else if constexpr (std::is_same_v<B, ReluLayer>) return in;
            else if constexpr (std::is_same_v<B, MaxPoolLayer>) {
                need3("max_pool");
                return {in[0], pool_extent(in[1], body.window, body.stride),
                        pool_extent(in[2], body.window, body.stride)};
            } else {
                return {shape_volume(in)};
            }
        },
        layer.body);
}

/// Input shape of every layer followed by the network output shape.
inline std::vector<Shape> infer_shapes(const NetworkSpec& net) {
    std::vector<Shape> shapes{net.input_shape};
    for (const auto& l : net.layers) shapes.push_back(layer_output_shape(l, shapes.back()));
    return shapes;
}

inline void check_layer_tensors(const Layer& layer) {
    auto fail = [&](const std::string& msg) {
        throw std::invalid_argument("layer '" + layer.name + "': " + msg);
    };
    std::visit(
        [&](const auto& body) {
            using B = std::decay_t<decltype(body)>;
            if constexpr (std::is_same_v<B, ConvLayer>) {
                body.spec.validate();
                if (body.weight.shape() != body.spec.kernel_shape()) fail("kernel shape mismatch");
                if (body.bias.shape() != Shape{body.spec.out_channels}) fail("bias shape mismatch");
            } else if constexpr (std::is_same_v<B, DecomposedConvLayer>) {
                decomposed_stage_specs(body.spec, body.factors);
                if (body.bias.shape() != Shape{body.spec.out_channels}) fail("bias shape mismatch");
            } else if constexpr (std::is_same_v<B, FcLayer>) {
                if (body.weight.order() != 2) fail("weight must be a matrix");
                if (body.bias.shape() != Shape{body.out_features()}) fail("bias shape mismatch");
            } else if constexpr (std::is_same_v<B, DecomposedFcLayer>) {
                body.factors.validate();
                if (body.bias.shape() != Shape{body.out_features()}) fail("bias shape mismatch");
            }
        },
        layer.body);
}

inline void validate(const NetworkSpec& net) {
    for (std::size_t i = 0; i < net.layers.size(); ++i)
        for (std::size_t j = i + 1; j < net.layers.size(); ++j)
            if (net.layers[i].name == net.layers[j].name)
                throw std::invalid_argument("duplicate layer name '" + net.layers[i].name + "'");
    for (const auto& l : net.layers) check_layer_tensors(l);
    infer_shapes(net);
}

inline Tensor layer_forward(const Layer& layer, const Tensor& x, OpCounter* counter = nullptr) {
    return std::visit(
        [&](const auto& body) -> Tensor {
            using B = std::decay_t<decltype(body)>;
            if constexpr (std::is_same_v<B, ConvLayer>) {
                Tensor y = conv_forward(x, body.weight, body.spec, counter);
                add_channel_bias(y, body.bias);
                return y;
            } else if constexpr (std::is_same_v<B, DecomposedConvLayer>) {
                Tensor y = conv_forward_decomposed(x, body.factors, body.spec, counter);
                add_channel_bias(y, body.bias);
                return y;
            } else if constexpr (std::is_same_v<B, FcLayer>) {
                return fc_forward(x, body.weight, body.bias, counter);
            } else if constexpr (std::is_same_v<B, DecomposedFcLayer>) {
                const Tensor z = fc_forward(x, body.factors.vt, Tensor({body.factors.rank()}), counter);
                return fc_forward(z, body.factors.ud, body.bias, counter);
            } else if constexpr (std::is_same_v<B, ReluLayer>) {
                return relu(x);
            } else if constexpr (std::is_same_v<B, MaxPoolLayer>) {
                return max_pool(x, body.window, body.stride);
            } else {
                return x.reshaped({x.size()});
            }
        },
        layer.body);
}

inline Tensor forward(const NetworkSpec& net, const Tensor& x, OpCounter* counter = nullptr) {
    if (x.shape() != net.input_shape)
        throw std::invalid_argument("forward: input " + shape_string(x.shape()) +
                                    " does not match network input " +
                                    shape_string(net.input_shape));
    Tensor h = x;
    for (const auto& l : net.layers) h = layer_forward(l, h, counter);
    return h;
}

// ---------------------------------------------------------------------------
// Complexity accounting

struct Ratios {
    double compression = 1.0;  // E
    double speedup = 1.0;      // C
};

/// Weight count of a factorized convolution, R*S_g + R*D^2 + T*R_g.
inline std::uint64_t decomposed_conv_params(const ConvSpec& spec, std::size_t rank) {
    const std::uint64_t R = rank, g = spec.groups;
    const std::uint64_t D2 = spec.kernel_size * spec.kernel_size;
    return R * spec.in_per_group() + R * D2 + spec.out_channels * (R / g);
}

/// Multiplies of a factorized convolution: R*S_g*W*H + R*D^2*W'*H' + T*R_g*W'*H'.
inline std::uint64_t decomposed_conv_mults(const ConvSpec& spec, std::size_t rank, std::size_t W,
                                           std::size_t H, std::size_t Wo, std::size_t Ho) {
    const std::uint64_t R = rank, g = spec.groups;
    const std::uint64_t D2 = spec.kernel_size * spec.kernel_size;
    return R * spec.in_per_group() * W * H + R * D2 * Wo * Ho +
           spec.out_channels * (R / g) * Wo * Ho;
}

inline std::uint64_t conv_params(const ConvSpec& spec) {
    return std::uint64_t{spec.out_channels} * spec.in_per_group() * spec.kernel_size *
           spec.kernel_size;
}

/// Compression and speed-up ratio of a rank-R factorized convolution.
/// For grouped layers R is the total rank and must be divisible by groups.
inline Ratios conv_ratios(const ConvSpec& spec, std::size_t rank, std::size_t W, std::size_t H,
                          std::size_t Wo, std::size_t Ho) {
    spec.validate();
    if (rank < 1 || W < 1 || H < 1 || Wo < 1 || Ho < 1)
        throw std::invalid_argument("conv_ratios: dimensions must be positive");
    if (rank % spec.groups != 0)
        throw std::invalid_argument("conv_ratios: rank must be divisible by groups");
    const double full = static_cast<double>(conv_params(spec));
    return {full / static_cast<double>(decomposed_conv_params(spec, rank)),
            full * static_cast<double>(Wo * Ho) /
                static_cast<double>(decomposed_conv_mults(spec, rank, W, H, Wo, Ho))};
}

/// E = C = MN / (MR + RN).
inline double fc_ratios(std::size_t M, std::size_t N, std::size_t R) {
    if (M < 1 || N < 1 || R < 1) throw std::invalid_argument("fc_ratios: dimensions must be positive");
    return static_cast<double>(M) * static_cast<double>(N) /
           (static_cast<double>(M) * R + static_cast<double>(R) * N);
}

struct LayerReport {
    std::string name;
    std::string kind;
    std::size_t rank = 0;  // 0 for layers that are not factorized
    std::uint64_t original_params = 0;
    std::uint64_t compressed_params = 0;
    std::uint64_t original_mults = 0;
    std::uint64_t compressed_mults = 0;
    std::uint64_t bias_params = 0;

    double compression() const {
        return compressed_params ? double(original_params) / double(compressed_params) : 1.0;
    }
    double speedup() const {
        return compressed_mults ? double(original_mults) / double(compressed_mults) : 1.0;
    }
};

/// Weight and multiply accounting; parameter counts exclude biases (kept
/// in bias_params) so the ratios match the weight-only formulas.
struct CompressionReport {
    std::vector<LayerReport> layers;

    std::uint64_t original_params() const { return sum(&LayerReport::original_params); }
    std::uint64_t compressed_params() const { return sum(&LayerReport::compressed_params); }
    std::uint64_t original_mults() const { return sum(&LayerReport::original_mults); }
    std::uint64_t compressed_mults() const { return sum(&LayerReport::compressed_mults); }
    std::uint64_t bias_params() const { return sum(&LayerReport::bias_params); }

    double compression() const {
        return compressed_params() ? double(original_params()) / double(compressed_params()) : 1.0;
    }
    double speedup() const {
        return compressed_mults() ? double(original_mults()) / double(compressed_mults()) : 1.0;
    }

private:
    std::uint64_t sum(std::uint64_t LayerReport::*field) const {
        std::uint64_t s = 0;
        for (const auto& l : layers) s += l.*field;
        return s;
    }
};

/// Counts materialized weights per slot and cross-checks factorized slots
/// against the analytic formulas. Only layers carrying weights are listed.
inline CompressionReport count_params(const NetworkSpec& net) {
    const std::vector<Shape> shapes = infer_shapes(net);
    CompressionReport report;
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        const Layer& layer = net.layers[i];
        const Shape& in = shapes[i];
        const Shape& out = shapes[i + 1];
        LayerReport row;
        row.name = layer.name;
        row.kind = layer_kind(layer.body);
        std::visit(
            [&](const auto& body) {
                using B = std::decay_t<decltype(body)>;
                if constexpr (std::is_same_v<B, ConvLayer>) {
                    row.original_params = row.compressed_params = body.weight.size();
                    row.original_mults = row.compressed_mults = body.weight.size() * out[1] * out[2];
                    row.bias_params = body.bias.size();
                } else if constexpr (std::is_same_v<B, DecomposedConvLayer>) {
                    const auto& f = body.factors;
                    row.rank = f.rank();
                    row.original_params = conv_params(body.spec);
                    row.compressed_params = f.parameter_count();
                    row.original_mults = row.original_params * out[1] * out[2];
                    row.compressed_mults =
                        decomposed_conv_mults(body.spec, f.rank(), in[1], in[2], out[1], out[2]);
                    row.bias_params = body.bias.size();
                    if (decomposed_conv_params(body.spec, f.rank()) != row.compressed_params)
                        throw std::logic_error("count_params: analytic conv parameter count disagrees "
                                               "with materialized factors for '" + layer.name + "'");
                } else if constexpr (std::is_same_v<B, FcLayer>) {
                    row.original_params = row.compressed_params = body.weight.size();
                    row.original_mults = row.compressed_mults = body.weight.size();
                    row.bias_params = body.bias.size();
                } else if constexpr (std::is_same_v<B, DecomposedFcLayer>) {
                    const std::uint64_t M = body.out_features(), N = body.in_features();
                    const std::uint64_t R = body.factors.rank();
                    row.rank = body.factors.rank();
                    row.original_params = row.original_mults = M * N;
                    row.compressed_params = body.factors.parameter_count();
                    row.compressed_mults = M * R + R * N;
                    row.bias_params = body.bias.size();
                    if (M * R + R * N != row.compressed_params)
                        throw std::logic_error("count_params: analytic fc parameter count disagrees "
                                               "with materialized factors for '" + layer.name + "'");
                }
            },
            layer.body);
        if (row.original_params) report.layers.push_back(std::move(row));
    }
    return report;
}

/// Tab-separated table, one row per weight layer plus a "total" row.
/// Weights exclude biases; mults are per single input.
inline void write_compression_report(std::ostream& os, const CompressionReport& r) {
    os << "layer\tkind\trank\tweights\tweights_compressed\tweight_ratio\tmults\tmults_compressed\tspeedup\n";
    char buf[256];
    auto row = [&](const std::string& name, const std::string& kind, const std::string& rank,
                   std::uint64_t w0, std::uint64_t w1, double e, std::uint64_t m0, std::uint64_t m1, double c) {
        std::snprintf(buf, sizeof buf, "%s\t%s\t%s\t%llu\t%llu\t%.4f\t%llu\t%llu\t%.4f\n", name.c_str(),
                      kind.c_str(), rank.c_str(), static_cast<unsigned long long>(w0),
                      static_cast<unsigned long long>(w1), e, static_cast<unsigned long long>(m0),
                      static_cast<unsigned long long>(m1), c);
        os << buf;
    };
    for (const auto& l : r.layers)
        row(l.name, l.kind, l.rank ? std::to_string(l.rank) : "-", l.original_params, l.compressed_params,
            l.compression(), l.original_mults, l.compressed_mults, l.speedup());
    row("total", "-", "-", r.original_params(), r.compressed_params(), r.compression(), r.original_mults(),
        r.compressed_mults(), r.speedup());
}

// ---------------------------------------------------------------------------
// Layer replacement

using LayerFactors = std::variant<CpFactors, SvdFactors>;

/// Returns a copy of `net` with the named slot swapped for its factorized
/// form. The original kernel is dropped; every other layer is copied as is.
inline NetworkSpec replace_layer(const NetworkSpec& net, const std::string& name,
                                 LayerFactors factors) {
    NetworkSpec out = net;
    Layer& slot = out.layers[out.index_of(name)];
    if (is_decomposed(slot))
        throw std::invalid_argument("replace_layer: '" + name + "' is already decomposed");
    if (auto* conv = std::get_if<ConvLayer>(&slot.body)) {
        auto* cp = std::get_if<CpFactors>(&factors);
        if (!cp) throw std::invalid_argument("replace_layer: '" + name + "' needs CP factors");
        decomposed_stage_specs(conv->spec, *cp);
        slot.body = DecomposedConvLayer{conv->spec, std::move(*cp), conv->bias};
    } else if (auto* fc = std::get_if<FcLayer>(&slot.body)) {
        auto* svd = std::get_if<SvdFactors>(&factors);
        if (!svd) throw std::invalid_argument("replace_layer: '" + name + "' needs SVD factors");
        svd->validate();
        if (svd->rows() != fc->out_features() || svd->cols() != fc->in_features())
            throw std::invalid_argument("replace_layer: SVD factors do not match '" + name + "'");
        slot.body = DecomposedFcLayer{std::move(*svd), fc->bias};
    } else {
        throw std::invalid_argument("replace_layer: '" + name + "' has no weights to decompose");
    }
    return out;
}

/// Factorizes the named slot at `rank` (CP for conv, truncated SVD for fc).
inline LayerFactors factorize_layer(const Layer& layer, std::size_t rank, const TpmConfig& tpm = {}) {
    if (const auto* conv = std::get_if<ConvLayer>(&layer.body)) {
        TpmConfig cfg = tpm;
        cfg.rank = rank;
        return decompose_kernel(conv->weight, cfg, conv->spec.groups);
    }
    if (const auto* fc = std::get_if<FcLayer>(&layer.body)) return truncated_svd(fc->weight, rank);
    throw std::invalid_argument("factorize_layer: '" + layer.name + "' cannot be decomposed");
}

inline NetworkSpec decompose_layer(const NetworkSpec& net, const std::string& name,
                                   std::size_t rank, const TpmConfig& tpm = {}) {
    return replace_layer(net, name, factorize_layer(net.layer(name), rank, tpm));
}

/// Largest rank whose factorized form is no bigger than the original
/// weights (E >= 1). Grouped convolutions round down to a multiple of groups.
inline std::size_t break_even_rank(const Layer& layer) {
    if (const auto* conv = std::get_if<ConvLayer>(&layer.body)) {
        const ConvSpec& s = conv->spec;
        const std::uint64_t g = s.groups;
        const std::uint64_t per_group_rank_cost =
            g * s.in_per_group() + g * s.kernel_size * s.kernel_size + s.out_channels;
        return std::max<std::uint64_t>(1, conv_params(s) / per_group_rank_cost) * g;
    }
    if (const auto* fc = std::get_if<FcLayer>(&layer.body)) {
        const std::uint64_t M = fc->out_features(), N = fc->in_features();
        return std::max<std::uint64_t>(1, (M * N) / (M + N));
    }
    throw std::invalid_argument("break_even_rank: '" + layer.name + "' cannot be decomposed");
}

/// Matrix-rank bound used as "full" rank: min(T, S_g*D^2) per group for
/// conv, min(M, N) for fc.
inline std::size_t full_rank(const Layer& layer) {
    if (const auto* conv = std::get_if<ConvLayer>(&layer.body)) {
        const ConvSpec& s = conv->spec;
        return std::min(s.out_per_group(), s.in_per_group() * s.kernel_size * s.kernel_size) *
               s.groups;
    }
    if (const auto* fc = std::get_if<FcLayer>(&layer.body))
        return std::min(fc->out_features(), fc->in_features());
    throw std::invalid_argument("full_rank: '" + layer.name + "' cannot be decomposed");
}

// ---------------------------------------------------------------------------
// Construction helpers

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> normal(0.0, stddev);
    for (double& x : t.data()) x = normal(rng);
    return t;
}

/// Incrementally builds a NetworkSpec, tracking the running activation
/// shape. Weights use He-style initialization when a generator is supplied
/// and stay zero otherwise.
class NetworkBuilder {
public:
    explicit NetworkBuilder(Shape input_shape, std::mt19937_64* rng = nullptr)
        : rng_(rng) {
        net_.input_shape = std::move(input_shape);
        current_ = net_.input_shape;
    }

    NetworkBuilder& conv(std::string name, std::size_t out_channels, std::size_t kernel,
                         std::size_t stride = 1, std::size_t padding = 0, std::size_t groups = 1) {
        if (current_.size() != 3) throw std::invalid_argument("builder: conv needs a C x W x H input");
        ConvSpec spec{out_channels, current_[0], kernel, stride, padding, groups};
        spec.validate();
        const double fan_in = double(spec.in_per_group() * kernel * kernel);
        Tensor w = init(spec.kernel_shape(), std::sqrt(2.0 / fan_in));
        return push(std::move(name), ConvLayer{spec, std::move(w), Tensor({out_channels})});
    }

    NetworkBuilder& fc(std::string name, std::size_t out_features) {
        if (current_.size() != 1) throw std::invalid_argument("builder: fc needs a flat input");
        const std::size_t in = current_[0];
        Tensor w = init({out_features, in}, std::sqrt(2.0 / double(in)));
        return push(std::move(name), FcLayer{std::move(w), Tensor({out_features})});
    }

    NetworkBuilder& relu(std::string name) { return push(std::move(name), ReluLayer{}); }
    NetworkBuilder& max_pool(std::string name, std::size_t window, std::size_t stride) {
        return push(std::move(name), MaxPoolLayer{window, stride});
    }
    NetworkBuilder& flatten(std::string name) { return push(std::move(name), FlattenLayer{}); }

    const Shape& current_shape() const { return current_; }
    NetworkSpec build() const { return net_; }

private:
    Tensor init(Shape shape, double stddev) {
        if (!rng_) return Tensor(std::move(shape));
        return random_tensor(std::move(shape), *rng_, stddev);
    }

    NetworkBuilder& push(std::string name, LayerBody body) {
        Layer layer{std::move(name), std::move(body)};
        current_ = layer_output_shape(layer, current_);
        net_.layers.push_back(std::move(layer));
        return *this;
    }

    std::mt19937_64* rng_;
    NetworkSpec net_;
    Shape current_;
};

}  // namespace cptpm
