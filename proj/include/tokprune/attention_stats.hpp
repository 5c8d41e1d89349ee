// Copyright (C) 2026 The tokprune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "tokprune/errors.hpp"

namespace tokprune {

/// Rows of an attention map must sum to one within this tolerance.
inline constexpr double kRowSumTolerance = 1e-5;

/**
 * @brief Text-to-visual attention weights of one head (or a head aggregate).
 *
 * Row-major N_t x N_v matrix. Row j is the softmax distribution of text query j
 * over the visual keys, so every entry is non-negative and every row sums to 1.
 * Instances are always valid: constructors check the invariants.
 */
class AttentionMap {
public:
    AttentionMap() = default;

    /// Takes row-stochastic weights as-is; throws validation_error if any row
    /// is off by more than `tolerance` or an entry is negative / non-finite.
    AttentionMap(std::size_t n_text, std::size_t n_visual, std::vector<double> weights,
                 double tolerance = kRowSumTolerance)
        : m_n_text(n_text), m_n_visual(n_visual), m_weights(std::move(weights)) {
        check_shape();
        for (std::size_t j = 0; j < m_n_text; ++j) {
            const double sum = check_row(j);
            if (std::abs(sum - 1.0) > tolerance) {
                throw validation_error("attention row " + std::to_string(j) + " sums to " +
                                       std::to_string(sum) + ", expected 1");
            }
        }
    }

    /// Builds a map from non-negative weights, rescaling every row to sum to 1.
    /// Rows with zero mass are rejected.
    static AttentionMap renormalized(std::size_t n_text, std::size_t n_visual,
                                     std::vector<double> weights) {
        AttentionMap map;
        map.m_n_text = n_text;
        map.m_n_visual = n_visual;
        map.m_weights = std::move(weights);
        map.check_shape();
        for (std::size_t j = 0; j < n_text; ++j) {
            const double sum = map.check_row(j);
            if (!(sum > 0.0)) {
                throw validation_error("attention row " + std::to_string(j) + " has no mass");
            }
            double* row = map.m_weights.data() + j * n_visual;
            for (std::size_t i = 0; i < n_visual; ++i) {
                row[i] /= sum;
            }
        }
        return map;
    }

    std::size_t n_text() const noexcept { return m_n_text; }
    std::size_t n_visual() const noexcept { return m_n_visual; }

    double operator()(std::size_t text, std::size_t visual) const noexcept {
        return m_weights[text * m_n_visual + visual];
    }

    std::span<const double> row(std::size_t text) const noexcept {
        return {m_weights.data() + text * m_n_visual, m_n_visual};
    }

    std::span<const double> weights() const noexcept { return m_weights; }

    friend bool operator==(const AttentionMap&, const AttentionMap&) = default;

private:
    void check_shape() const {
        if (m_n_text == 0 || m_n_visual == 0) {
            throw validation_error("attention map needs at least one text and one visual token");
        }
        if (m_weights.size() != m_n_text * m_n_visual) {
            throw validation_error("attention map has " + std::to_string(m_weights.size()) +
                                   " weights, expected " + std::to_string(m_n_text * m_n_visual));
        }
    }

    double check_row(std::size_t j) const {
        double sum = 0.0;
        for (double w : row(j)) {
            if (!std::isfinite(w) || w < 0.0) {
                throw validation_error("attention row " + std::to_string(j) +
                                       " has a negative or non-finite weight");
            }
            sum += w;
        }
        return sum;
    }

    std::size_t m_n_text = 0;
    std::size_t m_n_visual = 0;
    std::vector<double> m_weights;
};

/// Mutual information between visual and text tokens, in nats.
struct MIEstimate {
    double raw_nats = 0.0;
    /// raw_nats / ln(n_text); 0 when there is a single text token.
    double normalized = 0.0;
    std::size_t n_text = 0;
    std::size_t n_visual = 0;
};

/// Entrywise mean over heads followed by row renormalization.
inline AttentionMap aggregate_heads(std::span<const AttentionMap> heads) {
    if (heads.empty()) {
        throw usage_error("aggregate_heads: no attention heads given");
    }
    const std::size_t n_text = heads.front().n_text();
    const std::size_t n_visual = heads.front().n_visual();
    std::vector<double> mean(n_text * n_visual, 0.0);
    for (const AttentionMap& head : heads) {
        if (head.n_text() != n_text || head.n_visual() != n_visual) {
            throw usage_error("aggregate_heads: heads differ in shape");
        }
        const auto w = head.weights();
        for (std::size_t k = 0; k < mean.size(); ++k) {
            mean[k] += w[k];
        }
    }
    const double inv = 1.0 / static_cast<double>(heads.size());
    for (double& v : mean) {
        v *= inv;
    }
    return AttentionMap::renormalized(n_text, n_visual, std::move(mean));
}

/// Keeps the text rows whose mask entry is true. An empty mask keeps all rows.
inline AttentionMap select_text_rows(const AttentionMap& attn, const std::vector<bool>& mask) {
    if (mask.empty()) {
        return attn;
    }
    if (mask.size() != attn.n_text()) {
        throw usage_error("text mask has " + std::to_string(mask.size()) + " entries, map has " +
                          std::to_string(attn.n_text()) + " text rows");
    }
    std::vector<double> kept;
    std::size_t rows = 0;
    for (std::size_t j = 0; j < attn.n_text(); ++j) {
        if (mask[j]) {
            const auto r = attn.row(j);
            kept.insert(kept.end(), r.begin(), r.end());
            ++rows;
        }
    }
    if (rows == 0) {
        throw usage_error("text mask excludes every text row");
    }
    return AttentionMap::renormalized(rows, attn.n_visual(), std::move(kept));
}

/// Joint distribution p(v_i, t_j) under a uniform text prior.
struct JointTable {
    std::size_t n_text = 0;
    std::size_t n_visual = 0;
    std::vector<double> p;  // row-major, text x visual

    double operator()(std::size_t text, std::size_t visual) const noexcept {
        return p[text * n_visual + visual];
    }

    /// p(t_j); equal to 1/N_t for every row.
    std::vector<double> text_marginal() const {
        std::vector<double> out(n_text, 0.0);
        for (std::size_t j = 0; j < n_text; ++j) {
            for (std::size_t i = 0; i < n_visual; ++i) {
                out[j] += (*this)(j, i);
            }
        }
        return out;
    }

    /// p(v_i) = sum_j p(v_i, t_j)
    std::vector<double> visual_marginal() const {
        std::vector<double> out(n_visual, 0.0);
        for (std::size_t j = 0; j < n_text; ++j) {
            for (std::size_t i = 0; i < n_visual; ++i) {
                out[i] += (*this)(j, i);
            }
        }
        return out;
    }
};

inline JointTable joint_distribution(const AttentionMap& attn) {
    JointTable table{attn.n_text(), attn.n_visual(), {}};
    const double prior = 1.0 / static_cast<double>(attn.n_text());
    table.p.reserve(attn.weights().size());
    for (double w : attn.weights()) {
        table.p.push_back(w * prior);
    }
    return table;
}

/**
 * @brief Mutual information I(V, T) of the attention-induced joint distribution.
 *
 * Natural logarithm; cells with zero probability contribute nothing. Tiny negative
 * round-off is clamped to zero. Cost is O(N_t * N_v).
 */
inline MIEstimate mutual_information(const AttentionMap& attn) {
    const JointTable joint = joint_distribution(attn);
    const std::vector<double> p_visual = joint.visual_marginal();
    const double p_text = 1.0 / static_cast<double>(attn.n_text());

    double mi = 0.0;
    for (std::size_t j = 0; j < joint.n_text; ++j) {
        for (std::size_t i = 0; i < joint.n_visual; ++i) {
            const double p = joint(j, i);
            if (p > 0.0) {
                mi += p * std::log(p / (p_visual[i] * p_text));
            }
        }
    }
    MIEstimate est;
    est.raw_nats = mi > 0.0 ? mi : 0.0;
    est.n_text = attn.n_text();
    est.n_visual = attn.n_visual();
    if (est.n_text >= 2) {
        est.normalized = std::min(1.0, est.raw_nats / std::log(static_cast<double>(est.n_text)));
    }
    return est;
}

/// Head-averaged MI of one layer, optionally restricted to a subset of text rows.
inline MIEstimate mutual_information(std::span<const AttentionMap> heads,
                                     const std::vector<bool>& text_mask = {}) {
    return mutual_information(select_text_rows(aggregate_heads(heads), text_mask));
}

}  // namespace tokprune
