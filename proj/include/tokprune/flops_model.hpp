// Copyright (C) 2026 The tokprune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>

#include "tokprune/errors.hpp"

namespace tokprune {

/// Decoder dimensions. Defaults are LLaVA-1.5-7B (Vicuna-7B backbone).
struct ModelDims {
    std::size_t layers = 32;
    std::size_t hidden = 4096;
    std::size_t ffn = 11008;
    std::size_t heads = 32;

    void validate() const {
        if (layers == 0 || hidden == 0 || ffn == 0 || heads == 0) {
            throw usage_error("model dimensions must all be at least 1");
        }
    }
};

/// Prefill FLOPs of one decoder block over a sequence of `tokens` tokens:
/// QKVO projections 4nd^2, attention scores and values 2n^2d, feed-forward 2nd*ffn.
inline double layer_flops(double tokens, const ModelDims& dims) {
    const double d = static_cast<double>(dims.hidden);
    const double ffn = static_cast<double>(dims.ffn);
    return 4.0 * tokens * d * d + 2.0 * tokens * tokens * d + 2.0 * tokens * d * ffn;
}

struct FlopsSummary {
    double total = 0.0;
    double unpruned = 0.0;
    /// total / unpruned, in (0, 1] for valid schedules.
    double ratio = 0.0;
};

/// Sum of layer_flops over a per-layer visual-token schedule, each layer also
/// carrying `n_text` text tokens. The reference is `n_init` visual tokens everywhere.
inline FlopsSummary schedule_flops(std::span<const std::size_t> keep_counts, std::size_t n_init,
                                   std::size_t n_text, const ModelDims& dims) {
    FlopsSummary out;
    const double text = static_cast<double>(n_text);
    for (std::size_t count : keep_counts) {
        out.total += layer_flops(static_cast<double>(count) + text, dims);
    }
    out.unpruned = static_cast<double>(keep_counts.size()) *
                   layer_flops(static_cast<double>(n_init) + text, dims);
    out.ratio = out.unpruned > 0.0 ? out.total / out.unpruned : 0.0;
    return out;
}

}  // namespace tokprune
