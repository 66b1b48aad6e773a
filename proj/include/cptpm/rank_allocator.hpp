// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cptpm {

struct SensitivityEntry {
    std::string layer;
    std::string group;  // "conv" or "fc"
    double probe_accuracy = 0.0;
    double loss = 0.0;  // baseline - probe_accuracy, clamped at 0
};

struct SensitivityReport {
    double baseline_accuracy = 0.0;
    std::vector<SensitivityEntry> entries;

    void add(std::string layer, std::string group, double probe_accuracy) {
        entries.push_back({std::move(layer), std::move(group), probe_accuracy,
                           std::max(0.0, baseline_accuracy - probe_accuracy)});
    }
};

struct RankAssignment {
    std::string layer;
    std::size_t rank = 0;
    bool operator==(const RankAssignment&) const = default;
};

/// Hamilton (largest-remainder) apportionment of `budget` seats in
/// proportion to `weights`; ties go to the earlier index. Every entry gets
/// at least one seat. All-zero weights split the budget uniformly.
inline std::vector<std::size_t> apportion(const std::vector<double>& weights, std::size_t budget) {
    const std::size_t n = weights.size();
    if (n == 0) throw std::invalid_argument("apportion: no entries");
    if (budget < n)
        throw std::invalid_argument("apportion: budget " + std::to_string(budget) +
                                    " smaller than the number of layers " + std::to_string(n));
    for (double w : weights)
        if (!(w >= 0.0) || !std::isfinite(w))
            throw std::invalid_argument("apportion: weights must be finite and non-negative");

    double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    std::vector<double> w = weights;
    if (total == 0.0) {
        std::fill(w.begin(), w.end(), 1.0);
        total = double(n);
    }

    std::vector<std::size_t> seats(n);
    std::vector<double> remainder(n);
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double quota = double(budget) * w[i] / total;
        seats[i] = static_cast<std::size_t>(std::floor(quota));
        remainder[i] = quota - std::floor(quota);
        assigned += seats[i];
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
    for (std::size_t k = 0; assigned < budget; ++k, ++assigned) ++seats[order[k % n]];

    // Lift zero allocations to one seat, taking from the largest holder; on
    // equal holdings the lower-weight entry gives, preserving monotonicity.
    for (std::size_t i = 0; i < n; ++i) {
        if (seats[i] > 0) continue;
        std::size_t donor = 0;
        for (std::size_t j = 1; j < n; ++j)
            if (seats[j] > seats[donor] || (seats[j] == seats[donor] && w[j] < w[donor])) donor = j;
        --seats[donor];
        seats[i] = 1;
    }
    return seats;
}

/// Splits each group's budget across its layers proportionally to their
/// sensitivity loss. Output preserves the report's layer order.
inline std::vector<RankAssignment> allocate_ranks(const SensitivityReport& report,
                                                  const std::map<std::string, std::size_t>& budgets) {
    std::map<std::string, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < report.entries.size(); ++i)
        members[report.entries[i].group].push_back(i);
    std::vector<RankAssignment> out(report.entries.size());
    for (const auto& [group, idx] : members) {
        const auto it = budgets.find(group);
        if (it == budgets.end())
            throw std::invalid_argument("allocate_ranks: no budget for group '" + group + "'");
        std::vector<double> losses;
        for (std::size_t i : idx) losses.push_back(std::max(0.0, report.entries[i].loss));
        const auto seats = apportion(losses, it->second);
        for (std::size_t k = 0; k < idx.size(); ++k)
            out[idx[k]] = {report.entries[idx[k]].layer, seats[k]};
    }
    return out;
}

// ---------------------------------------------------------------------------
// Text formats

/// Tab-separated sensitivity table: group, layer, probe accuracy, loss and
/// (optionally) the allocated rank. Accuracies are percentages.
inline void write_sensitivity_report(std::ostream& os, const SensitivityReport& report,
                                     const std::vector<RankAssignment>* ranks = nullptr) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4f", report.baseline_accuracy * 100.0);
    os << "# baseline_accuracy\t" << buf << "\n";
    os << "group\tlayer\tprobe_accuracy\tloss" << (ranks ? "\trank" : "") << "\n";
    for (std::size_t i = 0; i < report.entries.size(); ++i) {
        const auto& e = report.entries[i];
        os << e.group << '\t' << e.layer << '\t';
        std::snprintf(buf, sizeof buf, "%.4f\t%.4f", e.probe_accuracy * 100.0, e.loss * 100.0);
        os << buf;
        if (ranks) os << '\t' << (*ranks)[i].rank;
        os << "\n";
    }
}

inline SensitivityReport read_sensitivity_report(std::istream& is) {
    SensitivityReport report;
    std::string line;
    bool header_seen = false;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        if (line.rfind("# baseline_accuracy", 0) == 0) {
            std::string tag;
            double pct = 0.0;
            ls >> tag >> tag >> pct;
            report.baseline_accuracy = pct / 100.0;
            continue;
        }
        if (line[0] == '#') continue;
        if (!header_seen) {
            header_seen = true;
            if (line.rfind("group\t", 0) == 0) continue;
        }
        SensitivityEntry e;
        double acc = 0.0, loss = 0.0;
        if (!(ls >> e.group >> e.layer >> acc >> loss))
            throw std::invalid_argument("sensitivity report: malformed line " + std::to_string(lineno));
        e.probe_accuracy = acc / 100.0;
        e.loss = std::max(0.0, loss / 100.0);
        report.entries.push_back(std::move(e));
    }
    return report;
}

/// Ranks file: one "layer<TAB>rank" pair per line; '#' starts a comment.
inline void write_ranks(std::ostream& os, const std::vector<RankAssignment>& ranks) {
    os << "# layer\trank\n";
    for (const auto& r : ranks) os << r.layer << '\t' << r.rank << "\n";
}

inline std::vector<RankAssignment> read_ranks(std::istream& is) {
    std::vector<RankAssignment> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        RankAssignment r;
        long long rank = 0;
        std::string extra;
        if (!(ls >> r.layer >> rank) || (ls >> extra) || rank < 1)
            throw std::invalid_argument("ranks file: malformed line " + std::to_string(lineno) +
                                        ": '" + line + "'");
        r.rank = static_cast<std::size_t>(rank);
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace cptpm
