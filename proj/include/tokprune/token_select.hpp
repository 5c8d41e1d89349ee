// Copyright (C) 2026 The tokprune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tokprune/attention_stats.hpp"
#include "tokprune/errors.hpp"
#include "tokprune/retention_schedule.hpp"
#include "tokprune/trace_io.hpp"

namespace tokprune {

/// Surviving visual-token indices per layer. Each list is sorted ascending and
/// is a subset of the previous layer's list.
struct KeepSet {
    std::vector<std::vector<std::size_t>> per_layer_indices;

    friend bool operator==(const KeepSet&, const KeepSet&) = default;
};

/// Mean attention each visual token receives over heads and unmasked text rows.
inline std::vector<double> token_importance(std::span<const AttentionMap> heads,
                                            const std::vector<bool>& text_mask = {}) {
    if (heads.empty()) {
        throw usage_error("token_importance: no attention heads given");
    }
    const std::size_t n_text = heads.front().n_text();
    const std::size_t n_visual = heads.front().n_visual();
    if (!text_mask.empty() && text_mask.size() != n_text) {
        throw usage_error("text mask has " + std::to_string(text_mask.size()) +
                          " entries, attention has " + std::to_string(n_text) + " text rows");
    }
    std::size_t rows = 0;
    for (std::size_t j = 0; j < n_text; ++j) {
        rows += (text_mask.empty() || text_mask[j]) ? 1 : 0;
    }
    if (rows == 0) {
        throw usage_error("text mask excludes every text row");
    }
    std::vector<double> scores(n_visual, 0.0);
    for (const AttentionMap& head : heads) {
        if (head.n_text() != n_text || head.n_visual() != n_visual) {
            throw usage_error("token_importance: heads differ in shape");
        }
        for (std::size_t j = 0; j < n_text; ++j) {
            if (!text_mask.empty() && !text_mask[j]) {
                continue;
            }
            const auto row = head.row(j);
            for (std::size_t i = 0; i < n_visual; ++i) {
                scores[i] += row[i];
            }
        }
    }
    const double inv = 1.0 / static_cast<double>(rows * heads.size());
    for (double& s : scores) {
        s *= inv;
    }
    return scores;
}

/// The keep_count eligible indices with the highest scores, ties to the lower
/// index, returned in ascending index order.
inline std::vector<std::size_t> select_tokens(std::span<const double> scores, std::size_t keep_count,
                                              std::span<const std::size_t> eligible) {
    if (keep_count > eligible.size()) {
        throw usage_error("cannot keep " + std::to_string(keep_count) + " of " +
                          std::to_string(eligible.size()) + " eligible tokens");
    }
    for (std::size_t idx : eligible) {
        if (idx >= scores.size()) {
            throw usage_error("eligible index " + std::to_string(idx) + " has no score");
        }
    }
    std::vector<std::size_t> order(eligible.begin(), eligible.end());
    const auto better = [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) {
            return scores[a] > scores[b];
        }
        return a < b;
    };
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep_count),
                     order.end(), better);
    order.resize(keep_count);
    std::sort(order.begin(), order.end());
    return order;
}

inline std::vector<std::size_t> select_tokens(std::span<const double> scores, std::size_t keep_count) {
    std::vector<std::size_t> all(scores.size());
    for (std::size_t i = 0; i < all.size(); ++i) {
        all[i] = i;
    }
    return select_tokens(scores, keep_count, all);
}

struct SelectionConfig {
    /// Text rows contributing to importance; empty means all rows.
    std::vector<bool> text_mask;
};

/**
 * @brief Applies a schedule to a trace, layer by layer.
 *
 * Layer i keeps keep_counts[i] tokens out of those kept at layer i-1, ranked by
 * layer-i importance. A layer without recorded attention reuses the scores of the
 * most recent layer that has some; leading layers without attention use the first
 * attention-bearing layer.
 */
inline KeepSet apply_schedule(const AttentionTrace& trace, const Schedule& schedule,
                              const SelectionConfig& cfg = {}) {
    if (schedule.layer_count != trace.layer_count ||
        schedule.keep_counts.size() != trace.layer_count) {
        throw usage_error("schedule covers " + std::to_string(schedule.keep_counts.size()) +
                          " layers, trace has " + std::to_string(trace.layer_count));
    }
    const auto first = trace.first_attention_layer();
    if (!first) {
        throw data_error("trace has no attention-bearing layer");
    }

    KeepSet keeps;
    keeps.per_layer_indices.reserve(trace.layer_count);
    std::vector<std::size_t> kept(trace.n_visual);
    for (std::size_t i = 0; i < kept.size(); ++i) {
        kept[i] = i;
    }
    std::vector<double> scores;
    std::optional<std::size_t> scored_layer;
    for (std::size_t l = 0; l < trace.layer_count; ++l) {
        const std::size_t source = trace.has_attention(l) ? l : (scored_layer ? *scored_layer : *first);
        if (scored_layer != source) {
            scores = token_importance(trace.layer_maps(source), cfg.text_mask);
            scored_layer = source;
        }
        const std::size_t want = schedule.keep_counts[l];
        if (want > kept.size()) {
            throw usage_error("schedule asks for " + std::to_string(want) + " tokens at layer " +
                              std::to_string(l) + " but only " + std::to_string(kept.size()) +
                              " survive");
        }
        kept = select_tokens(scores, want, kept);
        keeps.per_layer_indices.push_back(kept);
    }
    return keeps;
}

}  // namespace tokprune
