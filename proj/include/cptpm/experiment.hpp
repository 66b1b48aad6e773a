// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cptpm/dataset.hpp"
#include "cptpm/finetune.hpp"
#include "cptpm/presets.hpp"

namespace cptpm {

/// Knobs for the built-in toy task: the data, how long the uncompressed
/// baseline trains, and how the compression schedules fine-tune.
struct ToyExperiment {
    SyntheticTaskConfig task;
    std::size_t baseline_epochs = 12;
    std::size_t baseline_lr_step = 8;
    TrainConfig train;  // used by the schedules; train.seed also seeds the network
    double rank_fraction = 0.25;
};

/// max(1, round(fraction * full_rank)) for every decomposable layer; grouped
/// convolutions round up to a multiple of their group count.
inline std::vector<RankAssignment> fraction_ranks(const NetworkSpec& net, double fraction) {
    if (!(fraction > 0.0) || fraction > 1.0)
        throw std::invalid_argument("rank fraction must lie in (0, 1]");
    std::vector<RankAssignment> ranks;
    for (const auto& l : net.layers) {
        if (!is_decomposable(l)) continue;
        std::size_t r = std::max<std::size_t>(1, std::lround(fraction * double(full_rank(l))));
        if (const auto* conv = std::get_if<ConvLayer>(&l.body)) {
            const std::size_t g = conv->spec.groups;
            r = (r + g - 1) / g * g;
        }
        ranks.push_back({l.name, r});
    }
    return ranks;
}

/// Seeded toy network trained on the task's training split.
inline NetworkSpec train_toy_baseline(const ToyExperiment& exp, const Dataset& data) {
    TrainConfig cfg = exp.train;
    cfg.lr_step = exp.baseline_lr_step;
    cfg.seed = detail::mix_seed(exp.train.seed, 0xba5e);
    return finetune(toy_network(exp.train.seed), data.train, cfg, exp.baseline_epochs).net;
}

}  // namespace cptpm
