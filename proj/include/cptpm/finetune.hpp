// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "cptpm/dataset.hpp"
#include "cptpm/network.hpp"
#include "cptpm/rank_allocator.hpp"

namespace cptpm {

class DivergedError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Parameters and gradients

/// Trainable tensors of a layer in a fixed order:
/// conv [weight, bias], decomposed conv [u1, u2, u3, bias],
/// fc [weight, bias], decomposed fc [ud, vt, bias].
inline std::vector<Tensor*> parameters(Layer& layer) {
    return std::visit(
        [](auto& body) -> std::vector<Tensor*> {
            using B = std::decay_t<decltype(body)>;
            if constexpr (std::is_same_v<B, ConvLayer> || std::is_same_v<B, FcLayer>)
                return {&body.weight, &body.bias};
            else if constexpr (std::is_same_v<B, DecomposedConvLayer>)
                return {&body.factors.u1, &body.factors.u2, &body.factors.u3, &body.bias};
            else if constexpr (std::is_same_v<B, DecomposedFcLayer>)
                return {&body.factors.ud, &body.factors.vt, &body.bias};
            else
                return {};
        },
        layer.body);
}

inline std::vector<const Tensor*> parameters(const Layer& layer) {
    std::vector<const Tensor*> out;
    for (Tensor* t : parameters(const_cast<Layer&>(layer))) out.push_back(t);
    return out;
}

struct Gradients {
    double loss = 0.0;
    std::vector<std::vector<Tensor>> layers;  // parallel to parameters(layer)
};

inline Gradients zero_gradients(const NetworkSpec& net) {
    Gradients g;
    for (const auto& l : net.layers) {
        std::vector<Tensor> per;
        for (const Tensor* p : parameters(l)) per.emplace_back(p->shape());
        g.layers.push_back(std::move(per));
    }
    return g;
}

// ---------------------------------------------------------------------------
// Losses

using LossFn = std::function<double(const Tensor& output, const Example& ex, Tensor& grad_output)>;

inline double softmax_cross_entropy(const Tensor& logits, const Example& ex, Tensor& grad) {
    const std::size_t n = logits.size();
    if (ex.label >= n) throw std::invalid_argument("softmax_cross_entropy: label out of range");
    const auto z = logits.data();
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - mx);
    const double log_sum = std::log(sum) + mx;
    grad = Tensor(logits.shape());
    for (std::size_t i = 0; i < n; ++i) grad.data()[i] = std::exp(z[i] - log_sum);
    grad.data()[ex.label] -= 1.0;
    return log_sum - z[ex.label];
}

/// sum_i (output_i - target_i)^2
inline double squared_error(const Tensor& out, const Example& ex, Tensor& grad) {
    if (ex.target.size() != out.size()) throw std::invalid_argument("squared_error: target size mismatch");
    grad = Tensor(out.shape());
    double loss = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double d = out.data()[i] - ex.target.data()[i];
        loss += d * d;
        grad.data()[i] = 2.0 * d;
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Layer backward kernels

namespace detail {

inline Tensor crop_padding(const Tensor& xp, std::size_t p) {
    if (p == 0) return xp;
    const std::size_t C = xp.shape()[0], Wp = xp.shape()[1], Hp = xp.shape()[2];
    const std::size_t W = Wp - 2 * p, H = Hp - 2 * p;
    Tensor x({C, W, H});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t w = 0; w < W; ++w)
            std::copy_n(xp.data().data() + (c * Wp + w + p) * Hp + p, H,
                        x.data().data() + (c * W + w) * H);
    return x;
}

// Gradient of the grouped direct convolution. Accumulates into dkernel and
// returns the gradient with respect to the (unpadded) input.
inline Tensor conv_backward(const Tensor& x, const double* kernel, const ConvSpec& spec,
                            const Tensor& dy, double* dkernel) {
    const Tensor xp = zero_pad(x, spec.padding);
    const std::size_t T = spec.out_channels, Sg = spec.in_per_group(), Tg = spec.out_per_group();
    const std::size_t D = spec.kernel_size, st = spec.stride;
    const std::size_t Wp = xp.shape()[1], Hp = xp.shape()[2];
    const std::size_t Wo = dy.shape()[1], Ho = dy.shape()[2];
    Tensor dxp(xp.shape());
    const double* in = xp.data().data();
    double* din = dxp.data().data();
    const double* g = dy.data().data();
    for (std::size_t t = 0; t < T; ++t) {
        const std::size_t grp = t / Tg;
        const double* gt = g + t * Wo * Ho;
        for (std::size_t sl = 0; sl < Sg; ++sl) {
            const std::size_t s = grp * Sg + sl;
            const double* xs = in + s * Wp * Hp;
            double* dxs = din + s * Wp * Hp;
            const std::size_t kbase = (t * Sg + sl) * D * D;
            for (std::size_t j = 0; j < D; ++j)
                for (std::size_t i = 0; i < D; ++i) {
                    const double kv = kernel[kbase + j * D + i];
                    double acc = 0.0;
                    for (std::size_t wo = 0; wo < Wo; ++wo) {
                        const std::size_t row = (wo * st + j) * Hp + i;
                        const double* xrow = xs + row;
                        double* dxrow = dxs + row;
                        const double* grow = gt + wo * Ho;
                        for (std::size_t ho = 0; ho < Ho; ++ho) {
                            acc += grow[ho] * xrow[ho * st];
                            dxrow[ho * st] += kv * grow[ho];
                        }
                    }
                    dkernel[kbase + j * D + i] += acc;
                }
        }
    }
    return crop_padding(dxp, spec.padding);
}

inline void accumulate_channel_bias(const Tensor& dy, Tensor& dbias) {
    const std::size_t plane = dy.shape()[1] * dy.shape()[2];
    for (std::size_t c = 0; c < dy.shape()[0]; ++c) {
        double s = 0.0;
        const double* p = dy.data().data() + c * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
        dbias.data()[c] += s;
    }
}

// y = W x: dW += dy x^T, returns W^T dy.
inline Tensor fc_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor& dw) {
    const std::size_t M = w.shape()[0], N = w.shape()[1];
    Tensor dx({N});
    const double* pw = w.data().data();
    const double* px = x.data().data();
    double* pdw = dw.data().data();
    double* pdx = dx.data().data();
    for (std::size_t m = 0; m < M; ++m) {
        const double gm = dy.data()[m];
        const double* row = pw + m * N;
        double* drow = pdw + m * N;
        for (std::size_t n = 0; n < N; ++n) {
            drow[n] += gm * px[n];
            pdx[n] += row[n] * gm;
        }
    }
    return dx;
}

inline Tensor max_pool_backward(const Tensor& x, std::size_t window, std::size_t stride,
                                const Tensor& dy) {
    const std::size_t C = x.shape()[0], W = x.shape()[1], H = x.shape()[2];
    const std::size_t Wo = dy.shape()[1], Ho = dy.shape()[2];
    Tensor dx(x.shape());
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t wo = 0; wo < Wo; ++wo)
            for (std::size_t ho = 0; ho < Ho; ++ho) {
                std::size_t best = (c * W + wo * stride) * H + ho * stride;
                for (std::size_t j = 0; j < window; ++j)
                    for (std::size_t i = 0; i < window; ++i) {
                        const std::size_t idx = (c * W + wo * stride + j) * H + ho * stride + i;
                        if (x.data()[idx] > x.data()[best]) best = idx;
                    }
                dx.data()[best] += dy.data()[(c * Wo + wo) * Ho + ho];
            }
    return dx;
}

struct LayerCache {
    Tensor input;
    Tensor z;          // decomposed conv: after input mixing; decomposed fc: hidden vector
    Tensor z_spatial;  // decomposed conv: after the depthwise stage
};

inline void check_finite_activation(const Tensor& t, const Layer& layer) {
    if (!all_finite(t))
        throw DivergedError("non-finite activation after layer '" + layer.name + "'");
}

inline Tensor forward_cached(const NetworkSpec& net, const Tensor& x, std::vector<LayerCache>& caches) {
    caches.resize(net.layers.size());
    Tensor h = x;
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        const Layer& layer = net.layers[i];
        LayerCache& c = caches[i];
        c.input = h;
        if (const auto* dc = std::get_if<DecomposedConvLayer>(&layer.body)) {
            DecomposedConvTrace tr = conv_forward_decomposed_trace(h, dc->factors, dc->spec);
            add_channel_bias(tr.y, dc->bias);
            c.z = std::move(tr.z);
            c.z_spatial = std::move(tr.z_spatial);
            h = std::move(tr.y);
        } else if (const auto* df = std::get_if<DecomposedFcLayer>(&layer.body)) {
            c.z = fc_forward(h, df->factors.vt, Tensor({df->factors.rank()}));
            h = fc_forward(c.z, df->factors.ud, df->bias);
        } else {
            h = layer_forward(layer, h);
        }
        check_finite_activation(h, layer);
    }
    return h;
}

inline Tensor layer_backward(const Layer& layer, const LayerCache& c, const Tensor& dy,
                             std::vector<Tensor>& grads) {
    return std::visit(
        [&](const auto& body) -> Tensor {
            using B = std::decay_t<decltype(body)>;
            if constexpr (std::is_same_v<B, ConvLayer>) {
                accumulate_channel_bias(dy, grads[1]);
                return conv_backward(c.input, body.weight.data().data(), body.spec, dy,
                                     grads[0].data().data());
            } else if constexpr (std::is_same_v<B, DecomposedConvLayer>) {
                const DecomposedConvStages st = decomposed_stage_specs(body.spec, body.factors);
                accumulate_channel_bias(dy, grads[3]);
                const Tensor dzs = conv_backward(c.z_spatial, body.factors.u3.data().data(),
                                                 st.output_mix, dy, grads[2].data().data());
                const Tensor dz = conv_backward(c.z, body.factors.u2.data().data(), st.spatial,
                                                dzs, grads[1].data().data());
                return conv_backward(c.input, body.factors.u1.data().data(), st.input_mix, dz,
                                     grads[0].data().data());
            } else if constexpr (std::is_same_v<B, FcLayer>) {
                for (std::size_t m = 0; m < dy.size(); ++m) grads[1].data()[m] += dy.data()[m];
                return fc_backward(c.input, body.weight, dy, grads[0]);
            } else if constexpr (std::is_same_v<B, DecomposedFcLayer>) {
                for (std::size_t m = 0; m < dy.size(); ++m) grads[2].data()[m] += dy.data()[m];
                const Tensor dz = fc_backward(c.z, body.factors.ud, dy, grads[0]);
                return fc_backward(c.input, body.factors.vt, dz, grads[1]);
            } else if constexpr (std::is_same_v<B, ReluLayer>) {
                Tensor dx = dy;
                for (std::size_t i = 0; i < dx.size(); ++i)
                    if (c.input.data()[i] <= 0.0) dx.data()[i] = 0.0;
                return dx;
            } else if constexpr (std::is_same_v<B, MaxPoolLayer>) {
                return max_pool_backward(c.input, body.window, body.stride, dy);
            } else {
                return dy.reshaped(c.input.shape());
            }
        },
        layer.body);
}

}  // namespace detail

/// Reverse-mode gradients of the mean loss over `batch` with respect to
/// every trainable tensor. Samples are accumulated in batch order.
inline Gradients backward(const NetworkSpec& net, const std::vector<const Example*>& batch,
                          const LossFn& loss_fn = softmax_cross_entropy) {
    if (batch.empty()) throw std::invalid_argument("backward: empty batch");
    Gradients grads = zero_gradients(net);
    std::vector<detail::LayerCache> caches;
    for (const Example* ex : batch) {
        const Tensor out = detail::forward_cached(net, ex->input, caches);
        Tensor dy;
        const double loss = loss_fn(out, *ex, dy);
        if (!std::isfinite(loss)) throw DivergedError("non-finite loss");
        grads.loss += loss;
        for (std::size_t i = net.layers.size(); i-- > 0;)
            dy = detail::layer_backward(net.layers[i], caches[i], dy, grads.layers[i]);
    }
    const double inv = 1.0 / double(batch.size());
    grads.loss *= inv;
    for (auto& per : grads.layers)
        for (Tensor& g : per)
            for (double& v : g.data()) v *= inv;
    return grads;
}

inline Gradients backward(const NetworkSpec& net, const std::vector<Example>& batch,
                          const LossFn& loss_fn = softmax_cross_entropy) {
    std::vector<const Example*> ptrs;
    for (const auto& e : batch) ptrs.push_back(&e);
    return backward(net, ptrs, loss_fn);
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
    double learning_rate = 0.02;
    std::map<std::string, double> layer_learning_rates;  // per-slot overrides
    std::size_t batch_size = 32;
    std::size_t epochs_per_stage = 10;
    std::size_t lr_step = 5;  // epochs between x0.1 decays
    std::uint64_t seed = 0;

    static constexpr double kDecay = 0.1;

    double rate_for(const std::string& layer) const {
        const auto it = layer_learning_rates.find(layer);
        return it == layer_learning_rates.end() ? learning_rate : it->second;
    }

    void validate() const {
        if (!(learning_rate >= 0.0) || batch_size < 1 || lr_step < 1)
            throw std::invalid_argument("train config: learning rate must be >= 0, batch size and lr step >= 1");
        for (const auto& [name, lr] : layer_learning_rates)
            if (!(lr >= 0.0)) throw std::invalid_argument("train config: negative rate for '" + name + "'");
    }
};

inline void sgd_step(NetworkSpec& net, const Gradients& grads, const TrainConfig& cfg,
                     double lr_scale = 1.0) {
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        const double lr = cfg.rate_for(net.layers[i].name) * lr_scale;
        auto params = parameters(net.layers[i]);
        for (std::size_t k = 0; k < params.size(); ++k) {
            auto p = params[k]->data();
            const auto g = grads.layers[i][k].data();
            for (std::size_t e = 0; e < p.size(); ++e) p[e] -= lr * g[e];
        }
    }
}

struct Metrics {
    double loss = 0.0;
    double accuracy = 0.0;
};

inline std::size_t argmax(const Tensor& t) {
    const auto d = t.data();
    return static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
}

inline Metrics evaluate(const NetworkSpec& net, const std::vector<Example>& examples) {
    Metrics m;
    if (examples.empty()) return m;
    std::size_t correct = 0;
    Tensor grad;
    for (const auto& ex : examples) {
        const Tensor out = forward(net, ex.input);
        m.loss += softmax_cross_entropy(out, ex, grad);
        if (argmax(out) == ex.label) ++correct;
    }
    m.loss /= double(examples.size());
    m.accuracy = double(correct) / double(examples.size());
    return m;
}

struct EpochMetrics {
    std::size_t epoch = 0;
    double learning_rate = 0.0;
    double train_loss = 0.0;
    double train_accuracy = 0.0;
};

struct FinetuneResult {
    NetworkSpec net;
    std::vector<EpochMetrics> trajectory;
};

/// Plain minibatch SGD over every parameter of every layer. The base
/// learning rate decays by 0.1 every `lr_step` epochs. Throws
/// DivergedError on a non-finite loss or activation.
inline FinetuneResult finetune(const NetworkSpec& net, const std::vector<Example>& data,
                               const TrainConfig& cfg, std::size_t epochs) {
    cfg.validate();
    FinetuneResult result{net, {}};
    if (data.empty() || epochs == 0) return result;
    std::vector<std::size_t> order(data.size());
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        const double scale = std::pow(TrainConfig::kDecay, double(epoch / cfg.lr_step));
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 rng(detail::mix_seed(cfg.seed, epoch));
        std::shuffle(order.begin(), order.end(), rng);

        EpochMetrics em{epoch, cfg.learning_rate * scale, 0.0, 0.0};
        std::size_t correct = 0;
        std::vector<const Example*> batch;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            batch.clear();
            for (std::size_t k = start; k < std::min(order.size(), start + cfg.batch_size); ++k)
                batch.push_back(&data[order[k]]);
            const Gradients g = backward(result.net, batch);
            em.train_loss += g.loss * double(batch.size());
            sgd_step(result.net, g, cfg, scale);
        }
        for (const auto& ex : data)
            if (argmax(forward(result.net, ex.input)) == ex.label) ++correct;
        em.train_loss /= double(data.size());
        em.train_accuracy = double(correct) / double(data.size());
        result.trajectory.push_back(em);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Compression schedules

struct StageRecord {
    std::size_t stage = 0;
    std::string layer;
    std::size_t rank = 0;
    Metrics pre;   // right after decomposition
    Metrics post;  // after fine-tuning
    std::size_t epochs = 0;
    bool operator==(const StageRecord& o) const {
        return stage == o.stage && layer == o.layer && rank == o.rank && pre.loss == o.pre.loss &&
               pre.accuracy == o.pre.accuracy && post.loss == o.post.loss &&
               post.accuracy == o.post.accuracy && epochs == o.epochs;
    }
};

using StageLog = std::vector<StageRecord>;

struct CompressionRun {
    NetworkSpec net;
    StageLog log;
    bool diverged = false;
    std::string error;
};

/// One record per line, tab-separated; accuracies as fractions.
inline void write_stage_log(std::ostream& os, const StageLog& log) {
    os << "stage\tlayer\trank\tpre_loss\tpre_accuracy\tpost_loss\tpost_accuracy\tepochs\n";
    char buf[160];
    for (const auto& r : log) {
        std::snprintf(buf, sizeof buf, "%zu\t%s\t%zu\t%.17g\t%.17g\t%.17g\t%.17g\t%zu\n", r.stage,
                      r.layer.c_str(), r.rank, r.pre.loss, r.pre.accuracy, r.post.loss,
                      r.post.accuracy, r.epochs);
        os << buf;
    }
}

inline std::vector<std::string> decomposable_layers(const NetworkSpec& net) {
    std::vector<std::string> names;
    for (const auto& l : net.layers)
        if (is_decomposable(l)) names.push_back(l.name);
    return names;
}

inline std::size_t rank_for(const std::vector<RankAssignment>& ranks, const std::string& layer) {
    for (const auto& r : ranks)
        if (r.layer == layer) return r.rank;
    throw std::invalid_argument("no rank given for layer '" + layer + "'");
}

/// Decompose one layer, fine-tune the whole network, move to the next
/// layer. Stops at the first divergence and returns the partial log.
inline CompressionRun iterative_compress(const NetworkSpec& net, const Dataset& data,
                                         const std::vector<RankAssignment>& ranks,
                                         const TrainConfig& cfg, const TpmConfig& tpm = {}) {
    cfg.validate();
    const auto names = decomposable_layers(net);
    for (const auto& n : names) rank_for(ranks, n);

    CompressionRun run{net, {}, false, {}};
    for (std::size_t stage = 0; stage < names.size(); ++stage) {
        StageRecord rec;
        rec.stage = stage;
        rec.layer = names[stage];
        rec.rank = rank_for(ranks, rec.layer);
        try {
            run.net = decompose_layer(run.net, rec.layer, rec.rank, tpm);
            rec.pre = evaluate(run.net, data.test);
            TrainConfig stage_cfg = cfg;
            stage_cfg.seed = detail::mix_seed(cfg.seed, 0x5700 + stage);
            run.net = finetune(run.net, data.train, stage_cfg, cfg.epochs_per_stage).net;
            rec.epochs = cfg.epochs_per_stage;
            rec.post = evaluate(run.net, data.test);
        } catch (const DivergedError& e) {
            run.diverged = true;
            run.error = "stage " + std::to_string(stage) + " (" + rec.layer + "): " + e.what();
            run.log.push_back(rec);
            return run;
        }
        run.log.push_back(rec);
    }
    return run;
}

/// Baseline schedule: decompose every layer first, then fine-tune once
/// with the same total epoch budget as iterative_compress.
inline CompressionRun oneshot_compress(const NetworkSpec& net, const Dataset& data,
                                       const std::vector<RankAssignment>& ranks,
                                       const TrainConfig& cfg, const TpmConfig& tpm = {}) {
    cfg.validate();
    const auto names = decomposable_layers(net);
    for (const auto& n : names) rank_for(ranks, n);

    CompressionRun run{net, {}, false, {}};
    for (std::size_t stage = 0; stage < names.size(); ++stage) {
        StageRecord rec;
        rec.stage = stage;
        rec.layer = names[stage];
        rec.rank = rank_for(ranks, rec.layer);
        run.net = decompose_layer(run.net, rec.layer, rec.rank, tpm);
        rec.pre = evaluate(run.net, data.test);
        rec.post = rec.pre;
        run.log.push_back(rec);
    }
    if (run.log.empty()) return run;
    const std::size_t total = cfg.epochs_per_stage * names.size();
    try {
        TrainConfig once = cfg;
        once.seed = detail::mix_seed(cfg.seed, 0x5700);
        run.net = finetune(run.net, data.train, once, total).net;
        run.log.back().epochs = total;
        run.log.back().post = evaluate(run.net, data.test);
    } catch (const DivergedError& e) {
        run.diverged = true;
        run.error = std::string("final fine-tune: ") + e.what();
    }
    return run;
}

// ---------------------------------------------------------------------------
// Sensitivity probing

using EvalFn = std::function<double(const NetworkSpec&)>;

/// Accuracy after decomposing only `layer` at `probe_rank` and fine-tuning
/// the whole network for `epochs` epochs. `net` is not modified.
inline double probe_sensitivity(const NetworkSpec& net, const std::string& layer,
                                std::size_t probe_rank, const std::vector<Example>& train,
                                const TrainConfig& cfg, const EvalFn& eval_fn,
                                std::size_t epochs = 1, const TpmConfig& tpm = {}) {
    NetworkSpec probed = decompose_layer(net, layer, probe_rank, tpm);
    probed = finetune(probed, train, cfg, epochs).net;
    return eval_fn(probed);
}

/// Probes every decomposable layer; conv slots form group "conv", fc slots "fc".
inline SensitivityReport measure_sensitivity(const NetworkSpec& net, const std::vector<Example>& train,
                                             std::size_t probe_rank, const TrainConfig& cfg,
                                             const EvalFn& eval_fn, std::size_t epochs = 1,
                                             const TpmConfig& tpm = {}) {
    SensitivityReport report;
    report.baseline_accuracy = eval_fn(net);
    for (const auto& l : net.layers) {
        if (!is_decomposable(l)) continue;
        const std::string group = std::holds_alternative<ConvLayer>(l.body) ? "conv" : "fc";
        report.add(l.name, group,
                   probe_sensitivity(net, l.name, probe_rank, train, cfg, eval_fn, epochs, tpm));
    }
    return report;
}

}  // namespace cptpm
