// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>
#include <vector>

#include "cptpm/network.hpp"
#include "cptpm/rank_allocator.hpp"

namespace cptpm {

/// Small CNN for the built-in 10-class 3x16x16 task.
inline NetworkSpec toy_network(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return NetworkBuilder({3, 16, 16}, &rng)
        .conv("conv1", 8, 3, 1, 1)
        .relu("relu1")
        .max_pool("pool1", 2, 2)
        .conv("conv2", 16, 3, 1, 1)
        .relu("relu2")
        .max_pool("pool2", 2, 2)
        .flatten("flatten")
        .fc("fc1", 32)
        .relu("relu3")
        .fc("fc2", 10)
        .build();
}

/// AlexNet layer geometry (two-tower grouping on conv2, conv4 and conv5)
/// at 227x227 input. Weights are zero unless a generator is given.
inline NetworkSpec alexnet(std::mt19937_64* rng = nullptr) {
    return NetworkBuilder({3, 227, 227}, rng)
        .conv("conv1", 96, 11, 4, 0)
        .relu("relu1")
        .max_pool("pool1", 3, 2)
        .conv("conv2", 256, 5, 1, 2, 2)
        .relu("relu2")
        .max_pool("pool2", 3, 2)
        .conv("conv3", 384, 3, 1, 1)
        .relu("relu3")
        .conv("conv4", 384, 3, 1, 1, 2)
        .relu("relu4")
        .conv("conv5", 256, 3, 1, 1, 2)
        .relu("relu5")
        .max_pool("pool5", 3, 2)
        .flatten("flatten")
        .fc("fc6", 4096)
        .relu("relu6")
        .fc("fc7", 4096)
        .relu("relu7")
        .fc("fc8", 1000)
        .build();
}

/// Per-layer ranks used for the published AlexNet compression.
inline std::vector<RankAssignment> alexnet_reference_ranks() {
    return {{"conv1", 69},  {"conv2", 154}, {"conv3", 153}, {"conv4", 178},
            {"conv5", 196}, {"fc6", 365},   {"fc7", 275},   {"fc8", 260}};
}

/// Factors of the right shapes for `layer` at `rank`, without fitting
/// anything: zeros, or Gaussian entries when a generator is supplied.
inline LayerFactors placeholder_factors(const Layer& layer, std::size_t rank,
                                        std::mt19937_64* rng = nullptr) {
    auto make = [&](Shape s) { return rng ? random_tensor(std::move(s), *rng, 0.1) : Tensor(std::move(s)); };
    if (const auto* conv = std::get_if<ConvLayer>(&layer.body)) {
        const ConvSpec& s = conv->spec;
        const std::size_t rg = (rank + s.groups - 1) / s.groups;
        const std::size_t r = rg * s.groups;
        return CpFactors{make({r, s.in_per_group()}), make({r, s.kernel_size, s.kernel_size}),
                         make({s.out_channels, rg}), s.groups};
    }
    if (const auto* fc = std::get_if<FcLayer>(&layer.body))
        return SvdFactors{make({fc->out_features(), rank}), make({rank, fc->in_features()})};
    throw std::invalid_argument("placeholder_factors: '" + layer.name + "' cannot be decomposed");
}

/// Replaces every listed slot with placeholder factors (no decomposition).
inline NetworkSpec with_placeholder_factors(const NetworkSpec& net,
                                            const std::vector<RankAssignment>& ranks,
                                            std::mt19937_64* rng = nullptr) {
    NetworkSpec out = net;
    for (const auto& r : ranks)
        out = replace_layer(out, r.layer, placeholder_factors(out.layer(r.layer), r.rank, rng));
    return out;
}

}  // namespace cptpm
