#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "aptq/errors.hpp"
#include "aptq/hessian.hpp"

// Trace-driven mixed 2/4-bit allocation: rank layers by average Hessian
// trace, give 4 bits to the most sensitive fraction r of PARAMETERS (not of
// layers — the average-bits identity 4r + 2(1-r) only holds under parameter
// weighting), 2 bits to the rest. A block-uniform baseline planner is kept
// for ablation comparisons.

namespace aptq {

struct precision_plan {
    std::map<std::string, int> assignments; // layer_id -> bits
    double ratio_r = 1.0;
    double achieved_avg_bits = 4.0;
    std::vector<sensitivity_record> ranking;

    int bits_for(const std::string& layer_id) const {
        auto it = assignments.find(layer_id);
        if (it == assignments.end())
            throw value_error("precision_plan: no assignment for layer " + layer_id);
        return it->second;
    }
};

/// Descending by avg_trace, ties broken lexicographically by layer_id.
inline std::vector<sensitivity_record> rank_layers(std::vector<sensitivity_record> records) {
    if (records.empty()) throw value_error("rank_layers: no sensitivity records");
    for (const sensitivity_record& r : records)
        if (!std::isfinite(r.avg_trace)) throw value_error("rank_layers: non-finite trace for " + r.layer_id);
    std::stable_sort(records.begin(), records.end(),
                     [](const sensitivity_record& a, const sensitivity_record& b) {
                         if (a.avg_trace != b.avg_trace) return a.avg_trace > b.avg_trace;
                         return a.layer_id < b.layer_id;
                     });
    return records;
}

namespace detail {

inline double avg_bits(std::size_t p4, std::size_t p2) {
    return (4.0 * static_cast<double>(p4) + 2.0 * static_cast<double>(p2)) /
           static_cast<double>(p4 + p2);
}

inline precision_plan finish_plan(std::vector<sensitivity_record> ranking, double r,
                                  const std::vector<int>& bits) {
    precision_plan plan;
    plan.ratio_r = r;
    std::size_t p4 = 0, p2 = 0;
    for (std::size_t i = 0; i < ranking.size(); ++i) {
        plan.assignments[ranking[i].layer_id] = bits[i];
        (bits[i] == 4 ? p4 : p2) += ranking[i].param_count;
    }
    plan.achieved_avg_bits = avg_bits(p4, p2);
    plan.ranking = std::move(ranking);
    return plan;
}

} // namespace detail

/// Walk the ranking from most sensitive down, assigning 4 bits while the
/// cumulative 4-bit parameter count stays within r * total. The first layer
/// that would overshoot gets 4 bits only if that lands the achieved ratio
/// strictly closer to r; everything after it gets 2 bits.
inline precision_plan allocate_bits(const std::vector<sensitivity_record>& ranking, double r) {
    if (ranking.empty()) throw value_error("allocate_bits: empty ranking");
    if (!(r >= 0.0 && r <= 1.0)) throw value_error("allocate_bits: ratio must be in [0, 1]");

    std::size_t total = 0;
    for (const sensitivity_record& rec : ranking) {
        if (rec.param_count == 0) throw value_error("allocate_bits: zero-parameter layer " + rec.layer_id);
        total += rec.param_count;
    }

    std::vector<int> bits(ranking.size(), 2);
    const double budget = r * static_cast<double>(total);
    std::size_t cum = 0;
    bool boundary_resolved = false;
    for (std::size_t i = 0; i < ranking.size(); ++i) {
        const std::size_t p = ranking[i].param_count;
        if (!boundary_resolved && static_cast<double>(cum + p) <= budget) {
            bits[i] = 4;
            cum += p;
        } else if (!boundary_resolved) {
            // Boundary layer: include it only if that moves the achieved
            // ratio strictly closer to the target.
            const double without = std::abs(static_cast<double>(cum) / total - r);
            const double with = std::abs(static_cast<double>(cum + p) / total - r);
            if (with < without) {
                bits[i] = 4;
                cum += p;
            }
            boundary_resolved = true;
        }
    }
    return detail::finish_plan(ranking, r, bits);
}

/// Block-uniform baseline: the first ceil(r * #blocks) blocks in model order
/// go to 4 bits wholesale, the rest to 2. Records inside a block keep their
/// given order; the returned ranking is the flattened model order.
inline precision_plan manual_blockwise_plan(
    const std::vector<std::vector<sensitivity_record>>& blocks, double r) {
    if (blocks.empty()) throw value_error("manual_blockwise_plan: no blocks");
    if (!(r >= 0.0 && r <= 1.0)) throw value_error("manual_blockwise_plan: ratio must be in [0, 1]");

    const std::size_t promoted =
        static_cast<std::size_t>(std::ceil(r * static_cast<double>(blocks.size())));
    std::vector<sensitivity_record> flat;
    std::vector<int> bits;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        if (blocks[b].empty()) throw value_error("manual_blockwise_plan: empty block");
        for (const sensitivity_record& rec : blocks[b]) {
            flat.push_back(rec);
            bits.push_back(b < promoted ? 4 : 2);
        }
    }
    return detail::finish_plan(std::move(flat), r, bits);
}

} // namespace aptq
