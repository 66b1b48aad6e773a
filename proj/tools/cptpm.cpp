// SPDX-License-Identifier: Apache-2.0
//
// cptpm: command-line front end.
//
//   cptpm init      write a seeded toy model, optionally trained
//   cptpm decompose factorize a model's layers and report the savings
//   cptpm report    weight and multiply accounting of a model file
//   cptpm probe     per-layer sensitivity under a low-rank probe
//   cptpm allocate  split rank budgets by sensitivity
//   cptpm train     iterative or one-shot compression on the toy task
//   cptpm verify    pipeline-equivalence and round-trip self checks
//
// Exit codes: 0 ok, 1 unreadable or malformed input (files and flags),
// 2 invalid ranks, 3 training diverged, 4 verification failed.
// Reports go to stdout as tab-separated tables, diagnostics to stderr.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "cptpm/experiment.hpp"
#include "cptpm/model_io.hpp"

using namespace cptpm;

namespace {

enum ExitCode { kOk = 0, kBadInput = 1, kBadRanks = 2, kDiverged = 3, kVerifyFailed = 4 };

class RankError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RankSource {
    std::string ranks_file;
    std::string budget;
    std::string sensitivity_file;
    bool full_rank = false;
};

struct TaskFlags {
    std::size_t train_size = 2000;
    std::size_t test_size = 500;
    double noise = 1.0;
    std::uint64_t data_seed = 1;

    SyntheticTaskConfig config() const {
        SyntheticTaskConfig c;
        c.train_size = train_size;
        c.test_size = test_size;
        c.noise = noise;
        c.seed = data_seed;
        return c;
    }
};

std::ifstream open_input(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open '" + path + "'");
    return in;
}

/// Writes to `path`, or stdout when the path is empty.
void emit(const std::string& path, const std::string& text) {
    if (path.empty()) {
        std::cout << text;
        return;
    }
    std::ofstream out(path);
    if (!out || !(out << text)) throw InputError("cannot write '" + path + "'");
}

/// "conv=750,fc=900" -> {conv: 750, fc: 900}.
std::map<std::string, std::size_t> parse_budget(const std::string& text) {
    std::map<std::string, std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto eq = item.find('=');
        std::size_t used = 0;
        long long v = -1;
        if (eq != std::string::npos && eq > 0) {
            try {
                v = std::stoll(item.substr(eq + 1), &used);
            } catch (const std::exception&) {
                v = -1;
            }
        }
        if (v < 1 || used != item.size() - eq - 1)
            throw RankError("malformed rank budget entry '" + item + "' (expected group=N, N >= 1)");
        out[item.substr(0, eq)] = static_cast<std::size_t>(v);
    }
    if (out.empty()) throw RankError("empty rank budget");
    return out;
}

/// Largest rank each slot accepts: the greedy CP bound for conv, min(M, N) for fc.
std::size_t max_rank(const Layer& l) {
    if (const auto* c = std::get_if<ConvLayer>(&l.body)) {
        const ConvSpec& s = c->spec;
        return s.in_per_group() * s.kernel_size * s.kernel_size * s.out_per_group() * s.groups;
    }
    return full_rank(l);
}

void check_ranks(const NetworkSpec& net, const std::vector<RankAssignment>& ranks) {
    for (const auto& r : ranks) {
        std::size_t idx = 0;
        try {
            idx = net.index_of(r.layer);
        } catch (const std::invalid_argument&) {
            throw RankError("rank given for unknown layer '" + r.layer + "'");
        }
        const Layer& l = net.layers[idx];
        if (!is_decomposable(l)) throw RankError("layer '" + r.layer + "' cannot be decomposed");
        if (r.rank < 1 || r.rank > max_rank(l))
            throw RankError("rank " + std::to_string(r.rank) + " for '" + r.layer + "' outside [1, " +
                            std::to_string(max_rank(l)) + "]");
    }
}

/// Builds the rank list from exactly one source. A budget without a
/// sensitivity report splits each group uniformly.
std::optional<std::vector<RankAssignment>> resolve_ranks(const NetworkSpec& net, const RankSource& src) {
    const int sources = int(!src.ranks_file.empty()) + int(!src.budget.empty()) + int(src.full_rank);
    if (sources > 1) throw RankError("give only one of --ranks, --rank-budget and --full-rank");
    if (sources == 0) return std::nullopt;
    std::vector<RankAssignment> ranks;
    if (!src.ranks_file.empty()) {
        auto in = open_input(src.ranks_file);
        try {
            ranks = read_ranks(in);
        } catch (const std::invalid_argument& e) {
            throw RankError(e.what());
        }
    } else if (src.full_rank) {
        // Full rank means no truncation: every layer stays dense.
        return ranks;
    } else {
        const auto budgets = parse_budget(src.budget);
        SensitivityReport report;
        if (!src.sensitivity_file.empty()) {
            auto in = open_input(src.sensitivity_file);
            try {
                report = read_sensitivity_report(in);
            } catch (const std::invalid_argument& e) {
                throw InputError(src.sensitivity_file + ": " + e.what());
            }
        } else {
            for (const auto& l : net.layers)
                if (is_decomposable(l))
                    report.entries.push_back(
                        {l.name, std::holds_alternative<ConvLayer>(l.body) ? "conv" : "fc", 0.0, 0.0});
        }
        try {
            ranks = allocate_ranks(report, budgets);
        } catch (const std::invalid_argument& e) {
            throw RankError(e.what());
        }
    }
    check_ranks(net, ranks);
    return ranks;
}

void add_rank_flags(CLI::App* cmd, RankSource& src) {
    cmd->add_option("--ranks", src.ranks_file, "Ranks file (layer<TAB>rank per line)");
    cmd->add_option("--rank-budget", src.budget, "Per-group budgets, e.g. conv=750,fc=900");
    cmd->add_option("--sensitivity", src.sensitivity_file, "Sensitivity report that weights --rank-budget");
    cmd->add_flag("--full-rank", src.full_rank, "Keep every layer at full rank (no factorization)");
}

void add_task_flags(CLI::App* cmd, TaskFlags& t) {
    cmd->add_option("--train-size", t.train_size, "Toy task training examples")->check(CLI::PositiveNumber);
    cmd->add_option("--test-size", t.test_size, "Toy task test examples")->check(CLI::PositiveNumber);
    cmd->add_option("--noise", t.noise, "Toy task noise level")->check(CLI::NonNegativeNumber);
    cmd->add_option("--data-seed", t.data_seed, "Toy task generator seed");
}

void add_train_flags(CLI::App* cmd, ToyExperiment& exp) {
    cmd->add_option("--lr", exp.train.learning_rate, "Base learning rate")->check(CLI::NonNegativeNumber);
    cmd->add_option("--batch-size", exp.train.batch_size, "Minibatch size")->check(CLI::PositiveNumber);
    cmd->add_option("--lr-step", exp.train.lr_step, "Epochs between x0.1 learning-rate decays")
        ->check(CLI::PositiveNumber);
}

NetworkSpec load_or_train(const std::string& model, const ToyExperiment& exp, const Dataset& data) {
    if (!model.empty()) return load_model(model);
    std::cerr << "training toy baseline (" << exp.baseline_epochs << " epochs)\n";
    return train_toy_baseline(exp, data);
}

int verify(const std::string& model, std::size_t cases, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    bool ok = true;
    auto line = [&](bool pass, const std::string& what, const std::string& detail) {
        std::printf("%s\t%s\t%s\n", pass ? "PASS" : "FAIL", what.c_str(), detail.c_str());
        ok = ok && pass;
    };
    auto rel_inf = [](const Tensor& a, const Tensor& b) {
        return max_abs_diff(a, b) / std::max(1e-300, max_abs(b));
    };

    // Random factorized convolutions against the reconstructed kernel.
    double worst = 0.0;
    std::uniform_int_distribution<int> pick(0, 1 << 20);
    for (std::size_t c = 0; c < cases; ++c) {
        const std::size_t D = 1 + 2 * std::size_t(pick(rng) % 3), stride = 1 + std::size_t(pick(rng) % 2);
        const std::size_t pad = std::size_t(pick(rng) % 3), groups = 1 + std::size_t(pick(rng) % 2);
        const ConvSpec spec{groups * (1 + std::size_t(pick(rng) % 3)), groups * (1 + std::size_t(pick(rng) % 3)),
                            D, stride, pad, groups};
        std::size_t W = D + std::size_t(pick(rng) % 6);
        while ((W + 2 * pad - D) % stride) ++W;
        const std::size_t R = groups * (1 + std::size_t(pick(rng) % 3));
        const CpFactors f{random_tensor({R, spec.in_per_group()}, rng), random_tensor({R, D, D}, rng),
                          random_tensor({spec.out_channels, R / groups}, rng), groups};
        const Tensor x = random_tensor({spec.in_channels, W, W}, rng);
        worst = std::max(worst, rel_inf(conv_forward_decomposed(x, f, spec), conv_forward(x, reconstruct(f), spec)));
    }
    char buf[128];
    std::snprintf(buf, sizeof buf, "%zu cases, max relative error %.3e", cases, worst);
    line(worst <= 1e-9, "pipeline_equivalence", buf);

    if (model.empty()) return ok ? kOk : kVerifyFailed;

    const NetworkSpec net = load_model(model);
    const auto shapes = infer_shapes(net);
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        const Layer& l = net.layers[i];
        if (const auto* d = std::get_if<DecomposedConvLayer>(&l.body)) {
            const Tensor x = random_tensor(shapes[i], rng);
            const double e = rel_inf(conv_forward_decomposed(x, d->factors, d->spec),
                                     conv_forward(x, reconstruct(d->factors), d->spec));
            std::snprintf(buf, sizeof buf, "max relative error %.3e", e);
            line(e <= 1e-9, "layer_pipeline:" + l.name, buf);
        } else if (const auto* fc = std::get_if<FcLayer>(&l.body)) {
            const std::size_t r = full_rank(l);
            const double e = frobenius_norm(add_scaled(fc->weight, reconstruct(truncated_svd(fc->weight, r)), -1.0)) /
                             std::max(1e-300, frobenius_norm(fc->weight));
            std::snprintf(buf, sizeof buf, "full-rank relative error %.3e", e);
            line(e <= 1e-9, "svd_round_trip:" + l.name, buf);
        }
    }
    const std::string bytes = serialize_model(net);
    line(serialize_model(deserialize_model(bytes)) == bytes, "serialization_round_trip",
         std::to_string(bytes.size()) + " bytes");
    return ok ? kOk : kVerifyFailed;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Low-rank CP/SVD compression of convolutional networks"};
    app.set_config("--config", "", "TOML/INI file with option values; command-line flags take precedence");
    app.allow_config_extras(false);
    app.require_subcommand(1);

    ToyExperiment exp;
    TaskFlags task;
    TpmConfig tpm;
    RankSource ranks;
    std::uint64_t seed = 0;

    // init
    auto* init = app.add_subcommand("init", "Write a seeded toy model");
    std::string init_out;
    std::size_t init_epochs = 0;
    init->add_option("--out", init_out, "Output model file")->required();
    init->add_option("--seed", seed, "Network and training seed");
    init->add_option("--epochs", init_epochs, "Baseline training epochs on the toy task (0 = untrained)");
    add_task_flags(init, task);
    add_train_flags(init, exp);

    // decompose
    auto* dec = app.add_subcommand("decompose", "Factorize layers and report weights and multiplies");
    std::string dec_in, dec_out, arch;
    bool analytic_only = false;
    dec->add_option("model_in", dec_in, "Input model file");
    dec->add_option("model_out", dec_out, "Output model file");
    dec->add_option("--arch", arch, "Built-in architecture instead of a model file")
        ->check(CLI::IsMember({"toy", "alexnet"}));
    dec->add_flag("--analytic-only", analytic_only, "Report shapes and counts without fitting any factors");
    dec->add_option("--seed", seed, "Seed for the decomposition and for --arch weights");
    dec->add_option("--tpm-iters", tpm.max_inner_iters, "Maximum ALS sweeps per rank-1 term")
        ->check(CLI::PositiveNumber);
    dec->add_option("--tpm-tol", tpm.tol, "Relative change in scale that ends a rank-1 fit")
        ->check(CLI::PositiveNumber);
    add_rank_flags(dec, ranks);

    // report
    auto* rep = app.add_subcommand("report", "Weight and multiply accounting of a model file");
    std::string rep_in;
    rep->add_option("model", rep_in, "Model file")->required();

    // probe
    auto* probe = app.add_subcommand("probe", "Per-layer accuracy loss under a low-rank probe");
    std::string probe_model, probe_out;
    std::size_t probe_rank = 5, probe_epochs = 1;
    probe->add_option("--model", probe_model, "Trained model (default: train the toy baseline)");
    probe->add_option("--probe-rank", probe_rank, "Rank of the probe decomposition")->check(CLI::PositiveNumber);
    probe->add_option("--probe-epochs", probe_epochs, "Fine-tune epochs after the probe decomposition");
    probe->add_option("--baseline-epochs", exp.baseline_epochs, "Toy baseline training epochs");
    probe->add_option("--seed", seed, "Seed for training and probing");
    probe->add_option("--out", probe_out, "Write the report here instead of stdout");
    add_task_flags(probe, task);
    add_train_flags(probe, exp);

    // allocate
    auto* alloc = app.add_subcommand("allocate", "Split rank budgets in proportion to sensitivity");
    std::string alloc_in, alloc_budget, alloc_out;
    alloc->add_option("report", alloc_in, "Sensitivity report from `probe`")->required();
    alloc->add_option("--rank-budget", alloc_budget, "Per-group budgets, e.g. conv=750,fc=900")->required();
    alloc->add_option("--out", alloc_out, "Write the ranks file here instead of stdout");

    // train
    auto* train = app.add_subcommand("train", "Compress the toy network with fine-tuning");
    std::string schedule = "iterative", train_model, train_out, train_log;
    train->add_option("--schedule", schedule, "iterative or oneshot")->check(CLI::IsMember({"iterative", "oneshot"}));
    train->add_option("--model", train_model, "Trained model (default: train the toy baseline)");
    train->add_option("--seed", seed, "Seed for the network, shuffling and decomposition");
    train->add_option("--epochs-per-stage", exp.train.epochs_per_stage, "Fine-tune epochs per decomposed layer");
    train->add_option("--baseline-epochs", exp.baseline_epochs, "Toy baseline training epochs");
    train->add_option("--rank-fraction", exp.rank_fraction, "Rank as a fraction of full rank when no ranks are given");
    train->add_option("--out", train_out, "Write the compressed model here");
    train->add_option("--log", train_log, "Write the stage log here instead of stdout");
    add_rank_flags(train, ranks);
    add_task_flags(train, task);
    add_train_flags(train, exp);

    // verify
    auto* ver = app.add_subcommand("verify", "Run pipeline-equivalence and round-trip checks");
    std::string ver_model;
    std::size_t ver_cases = 200;
    ver->add_option("--model", ver_model, "Also check this model's layers and serialization");
    ver->add_option("--cases", ver_cases, "Random factorized-convolution cases")->check(CLI::PositiveNumber);
    ver->add_option("--seed", seed, "Seed for the random cases");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kBadInput;
    }

    exp.task = task.config();
    exp.train.seed = seed;
    tpm.seed = seed;

    try {
        if (*init) {
            exp.baseline_epochs = init_epochs;
            NetworkSpec net = toy_network(seed);
            if (init_epochs > 0) net = train_toy_baseline(exp, make_synthetic_dataset(exp.task));
            save_model(net, init_out);
            return kOk;
        }

        if (*dec) {
            NetworkSpec net;
            if (!arch.empty()) {
                if (!dec_in.empty()) throw InputError("give either a model file or --arch, not both");
                if (arch == "alexnet" && !analytic_only)
                    throw InputError("--arch alexnet is only supported with --analytic-only");
                if (arch == "alexnet") {
                    net = alexnet();
                } else {
                    net = toy_network(seed);
                }
            } else {
                if (dec_in.empty()) throw InputError("missing input model (or --arch)");
                net = load_model(dec_in);
            }
            auto chosen = resolve_ranks(net, ranks);
            if (!chosen) {
                if (arch != "alexnet") throw RankError("no ranks given (--ranks, --rank-budget or --full-rank)");
                chosen = alexnet_reference_ranks();
            }
            NetworkSpec out = net;
            if (analytic_only) {
                out = with_placeholder_factors(net, *chosen);
            } else {
                if (dec_out.empty()) throw InputError("missing output model path");
                for (const auto& r : *chosen) out = decompose_layer(out, r.layer, r.rank, tpm);
                save_model(out, dec_out);
            }
            write_compression_report(std::cout, count_params(out));
            return kOk;
        }

        if (*rep) {
            write_compression_report(std::cout, count_params(load_model(rep_in)));
            return kOk;
        }

        if (*probe) {
            const Dataset data = make_synthetic_dataset(exp.task);
            const NetworkSpec net = load_or_train(probe_model, exp, data);
            for (const auto& l : net.layers)
                if (is_decomposable(l) && probe_rank > max_rank(l))
                    throw RankError("probe rank " + std::to_string(probe_rank) + " exceeds the bound of '" +
                                    l.name + "'");
            const EvalFn eval = [&](const NetworkSpec& n) { return evaluate(n, data.test).accuracy; };
            const SensitivityReport report = measure_sensitivity(net, data.train, probe_rank, exp.train, eval,
                                                                 probe_epochs, tpm);
            std::ostringstream os;
            write_sensitivity_report(os, report);
            emit(probe_out, os.str());
            return kOk;
        }

        if (*alloc) {
            auto in = open_input(alloc_in);
            SensitivityReport report;
            try {
                report = read_sensitivity_report(in);
            } catch (const std::invalid_argument& e) {
                throw InputError(alloc_in + ": " + e.what());
            }
            std::vector<RankAssignment> out;
            try {
                out = allocate_ranks(report, parse_budget(alloc_budget));
            } catch (const std::invalid_argument& e) {
                throw RankError(e.what());
            }
            std::ostringstream os;
            write_ranks(os, out);
            emit(alloc_out, os.str());
            return kOk;
        }

        if (*train) {
            const Dataset data = make_synthetic_dataset(exp.task);
            const NetworkSpec net = load_or_train(train_model, exp, data);
            if (ranks.full_rank) throw RankError("--full-rank leaves nothing to compress; give ranks instead");
            auto chosen = resolve_ranks(net, ranks);
            if (!chosen) chosen = fraction_ranks(net, exp.rank_fraction);
            for (const auto& name : decomposable_layers(net)) {
                bool found = false;
                for (const auto& r : *chosen) found = found || r.layer == name;
                if (!found) throw RankError("no rank given for layer '" + name + "'");
            }
            const Metrics base = evaluate(net, data.test);
            const CompressionRun run = schedule == "iterative" ? iterative_compress(net, data, *chosen, exp.train, tpm)
                                                               : oneshot_compress(net, data, *chosen, exp.train, tpm);
            std::ostringstream os;
            write_stage_log(os, run.log);
            emit(train_log, os.str());
            std::fprintf(stderr, "baseline test accuracy %.4f, final %.4f\n", base.accuracy,
                         run.log.empty() ? base.accuracy : run.log.back().post.accuracy);
            if (run.diverged) {
                std::cerr << "error: training diverged: " << run.error << "\n";
                return kDiverged;
            }
            if (!train_out.empty()) save_model(run.net, train_out);
            return kOk;
        }

        if (*ver) return verify(ver_model, ver_cases, seed);
    } catch (const RankError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kBadRanks;
    } catch (const DivergedError& e) {
        std::cerr << "error: training diverged: " << e.what() << "\n";
        return kDiverged;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kBadInput;
    }
    return kOk;
}
