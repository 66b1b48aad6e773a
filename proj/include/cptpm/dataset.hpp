// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "cptpm/tensor.hpp"

namespace cptpm {

/// One labeled input. `target` is only used by regression-style losses.
struct Example {
    Tensor input;
    std::size_t label = 0;
    Tensor target;
};

struct Dataset {
    std::vector<Example> train;
    std::vector<Example> test;
    std::size_t num_classes = 0;
};

struct SyntheticTaskConfig {
    std::size_t train_size = 2000;
    std::size_t test_size = 500;
    std::size_t image_size = 16;
    std::size_t channels = 3;
    double noise = 1.0;
    std::uint64_t seed = 1;
};

/// Ten classes of noisy sinusoidal gratings: five orientations times two
/// spatial frequencies. Phase, amplitude and per-channel color gains are
/// drawn per image, so only orientation and frequency carry the label.
inline Example synthetic_example(std::size_t label, const SyntheticTaskConfig& cfg,
                                 std::mt19937_64& rng) {
    constexpr std::size_t kOrientations = 5;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, cfg.noise);

    const double pi = std::numbers::pi;
    const double theta = double(label % kOrientations) * pi / double(kOrientations);
    const double cycles = label < kOrientations ? 2.0 : 4.0;
    const double freq = 2.0 * pi * cycles / double(cfg.image_size);
    const double phase = 2.0 * pi * unit(rng);
    const double amp = 0.8 + 0.4 * unit(rng);

    const std::size_t n = cfg.image_size;
    Tensor img({cfg.channels, n, n});
    for (std::size_t c = 0; c < cfg.channels; ++c) {
        const double gain = 0.5 + unit(rng);
        for (std::size_t w = 0; w < n; ++w)
            for (std::size_t h = 0; h < n; ++h) {
                const double u = double(w) * std::cos(theta) + double(h) * std::sin(theta);
                img.data()[(c * n + w) * n + h] = amp * gain * std::sin(freq * u + phase) + noise(rng);
            }
    }
    return {std::move(img), label, Tensor()};
}

inline Dataset make_synthetic_dataset(const SyntheticTaskConfig& cfg = {}) {
    constexpr std::size_t kClasses = 10;
    std::mt19937_64 rng(cfg.seed);
    Dataset d;
    d.num_classes = kClasses;
    d.train.reserve(cfg.train_size);
    d.test.reserve(cfg.test_size);
    for (std::size_t i = 0; i < cfg.train_size; ++i)
        d.train.push_back(synthetic_example(i % kClasses, cfg, rng));
    for (std::size_t i = 0; i < cfg.test_size; ++i)
        d.test.push_back(synthetic_example(i % kClasses, cfg, rng));
    return d;
}

}  // namespace cptpm
