// Copyright (C) 2026 The tokprune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tokprune/attention_stats.hpp"
#include "tokprune/errors.hpp"
#include "tokprune/flops_model.hpp"
#include "tokprune/retention_schedule.hpp"
#include "tokprune/token_select.hpp"
#include "tokprune/trace_io.hpp"

namespace tokprune {

enum class PolicyKind { autoprune, uniform, drop_after_k, pyramid_stages };

/// Allocation policy. Baselines only contribute a schedule shape; selection and
/// accounting are shared with autoprune.
struct PolicySpec {
    PolicyKind kind = PolicyKind::autoprune;
    /// drop_after_k: layers before this index keep every token.
    std::size_t drop_layer = 2;
    /// pyramid_stages: number of equal-length stages.
    std::size_t stages = 4;

    std::string name() const {
        switch (kind) {
            case PolicyKind::autoprune:
                return "autoprune";
            case PolicyKind::uniform:
                return "uniform";
            case PolicyKind::drop_after_k:
                return "drop-after-k";
            case PolicyKind::pyramid_stages:
                return "pyramid";
        }
        return "unknown";
    }

    static PolicySpec parse(const std::string& name) {
        for (PolicyKind k : {PolicyKind::autoprune, PolicyKind::uniform, PolicyKind::drop_after_k,
                             PolicyKind::pyramid_stages}) {
            PolicySpec p{k};
            if (p.name() == name) {
                return p;
            }
        }
        throw usage_error("unknown policy '" + name + "'");
    }

    friend bool operator==(const PolicySpec&, const PolicySpec&) = default;
};

inline std::vector<PolicySpec> all_policies() {
    return {PolicySpec{PolicyKind::autoprune}, PolicySpec{PolicyKind::uniform},
            PolicySpec{PolicyKind::drop_after_k}, PolicySpec{PolicyKind::pyramid_stages}};
}

enum class BudgetKind { avg_tokens, total_tokens, flops_ratio };

/// Global budget: average visual tokens per layer, total token-layers, or a
/// fraction of the unpruned decoder FLOPs.
struct Budget {
    BudgetKind kind = BudgetKind::avg_tokens;
    double value = 64.0;
};

struct PipelineConfig {
    CurveConfig curve;
    std::size_t n_min = 1;
    /// Layer whose attention feeds the MI estimate.
    std::size_t probe_layer = 2;
    std::vector<bool> text_mask;
    ModelDims dims;
    /// Text tokens added to every layer's sequence length in FLOPs accounting.
    std::size_t flops_text_tokens = 64;
    /// Replaces the normalized MI as the complexity input (scorer ablation).
    std::optional<double> complexity_override;
};

struct PruneReport {
    std::string trace_id;
    PolicySpec policy;
    std::size_t probe_layer = 0;
    MIEstimate mi;
    double complexity = 0.0;
    std::optional<CurveParams> params;
    Schedule schedule;
    KeepSet keeps;
    double flops_total = 0.0;
    double flops_ratio = 0.0;
    std::optional<double> relevant_recall;
};

/// Layer actually used as the MI probe: the requested one, else the nearest
/// earlier layer with attention, else the first layer that has any.
inline std::size_t resolve_probe_layer(const AttentionTrace& trace, std::size_t requested) {
    if (requested >= trace.layer_count) {
        throw usage_error("probe layer " + std::to_string(requested) + " is beyond the " +
                          std::to_string(trace.layer_count) + "-layer trace");
    }
    for (std::size_t l = requested + 1; l-- > 0;) {
        if (trace.has_attention(l)) {
            return l;
        }
    }
    const auto first = trace.first_attention_layer();
    if (!first) {
        throw data_error("trace has no attention-bearing layer");
    }
    return *first;
}

inline MIEstimate probe_mutual_information(const AttentionTrace& trace, const PipelineConfig& cfg) {
    const std::size_t layer = resolve_probe_layer(trace, cfg.probe_layer);
    return mutual_information(select_text_rows(trace.head_mean(layer), cfg.text_mask));
}

namespace detail {

inline ModelDims dims_for(const AttentionTrace& trace, const PipelineConfig& cfg) {
    ModelDims dims = cfg.dims;
    dims.layers = trace.layer_count;
    return dims;
}

/// Target in the unit the schedule search works in.
inline double budget_target(const Budget& budget, std::size_t layers, std::size_t n_init,
                            std::size_t n_text, const ModelDims& dims) {
    if (!std::isfinite(budget.value)) {
        throw usage_error("budget must be finite");
    }
    switch (budget.kind) {
        case BudgetKind::avg_tokens:
            return budget.value * static_cast<double>(layers);
        case BudgetKind::total_tokens:
            return budget.value;
        case BudgetKind::flops_ratio:
            return budget.value * static_cast<double>(layers) *
                   layer_flops(static_cast<double>(n_init + n_text), dims);
    }
    throw internal_error("unknown budget kind");
}

// Stage levels n_init * lambda^(s+1), lambda fitted so that `cost` of the real
// levels meets the target.
template <class Cost>
std::vector<double> pyramid_levels(std::size_t layers, std::size_t n_init, std::size_t stages,
                                   double target, Cost&& cost) {
    stages = std::clamp<std::size_t>(stages, 1, layers);
    auto levels_for = [&](double lambda) {
        std::vector<double> out(layers);
        for (std::size_t i = 0; i < layers; ++i) {
            const std::size_t stage = i * stages / layers;
            out[i] = static_cast<double>(n_init) * std::pow(lambda, static_cast<double>(stage + 1));
        }
        return out;
    };
    double lo = 0.0;
    double hi = 1.0;
    for (int iter = 0; iter < 100; ++iter) {
        const double mid = 0.5 * (lo + hi);
        if (cost(levels_for(mid)) <= target) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    return levels_for(std::max(lo, 1e-12));
}

inline std::vector<double> baseline_levels(const PolicySpec& policy, std::size_t layers,
                                           std::size_t n_init, const Budget& budget,
                                           double target, std::size_t n_text,
                                           const ModelDims& dims) {
    std::vector<double> levels(layers, 1.0);
    switch (policy.kind) {
        case PolicyKind::uniform:
            break;
        case PolicyKind::drop_after_k:
            for (std::size_t i = 0; i < std::min(policy.drop_layer, layers); ++i) {
                levels[i] = static_cast<double>(n_init);
            }
            break;
        case PolicyKind::pyramid_stages:
            if (budget.kind == BudgetKind::flops_ratio) {
                levels = pyramid_levels(layers, n_init, policy.stages, target,
                                        [&](const std::vector<double>& lv) {
                                            double s = 0.0;
                                            for (double v : lv) {
                                                s += layer_flops(v + static_cast<double>(n_text), dims);
                                            }
                                            return s;
                                        });
            } else {
                levels = pyramid_levels(layers, n_init, policy.stages, target,
                                        [](const std::vector<double>& lv) {
                                            double s = 0.0;
                                            for (double v : lv) {
                                                s += v;
                                            }
                                            return s;
                                        });
            }
            break;
        case PolicyKind::autoprune:
            throw internal_error("autoprune has no fixed baseline shape");
    }
    return levels;
}

inline double recall_of(const std::vector<std::size_t>& relevant, const std::vector<std::size_t>& kept) {
    if (relevant.empty()) {
        return 1.0;
    }
    std::size_t hit = 0;
    for (std::size_t r : relevant) {
        hit += std::binary_search(kept.begin(), kept.end(), r) ? 1 : 0;
    }
    return static_cast<double>(hit) / static_cast<double>(relevant.size());
}

}  // namespace detail

/**
 * @brief Full pipeline for one trace under one allocation policy.
 *
 * autoprune: probe-layer MI -> curve parameters -> area normalization -> integer
 * schedule. Baselines: their fixed shape through the same integer search. Both then
 * go through hierarchical selection and FLOPs accounting.
 */
inline PruneReport run_pipeline(const AttentionTrace& trace, const PolicySpec& policy,
                                const Budget& budget, const PipelineConfig& cfg) {
    const std::size_t layers = trace.layer_count;
    const std::size_t n_init = trace.n_visual;
    const ModelDims dims = detail::dims_for(trace, cfg);
    const std::size_t n_text = cfg.flops_text_tokens;

    PruneReport report;
    report.policy = policy;
    report.probe_layer = resolve_probe_layer(trace, cfg.probe_layer);
    report.mi = mutual_information(select_text_rows(trace.head_mean(report.probe_layer), cfg.text_mask));
    report.complexity = cfg.complexity_override.value_or(report.mi.normalized);

    const double target = detail::budget_target(budget, layers, n_init, n_text, dims);
    const bool by_flops = budget.kind == BudgetKind::flops_ratio;

    if (policy.kind == PolicyKind::autoprune) {
        MIEstimate score = report.mi;
        score.normalized = std::clamp(report.complexity, 0.0, 1.0);
        CurveParams params = modulate_params(score, cfg.curve, n_init, layers);
        // The integer search rescales anyway; a FLOPs budget normalizes to the
        // token-layers of the same ratio.
        const double area_target =
            by_flops ? budget.value * static_cast<double>(n_init * layers) : target;
        if (area_target > 0.0) {
            params = normalize_to_budget(params, area_target, layers);
        }
        report.params = params;
        report.schedule = by_flops ? flops_budget_schedule(params, target, dims, n_text, layers, cfg.n_min)
                                   : discretize_schedule(params, layers, target, cfg.n_min);
    } else {
        const auto levels =
            detail::baseline_levels(policy, layers, n_init, budget, target, n_text, dims);
        report.schedule = by_flops
                              ? flops_budget_levels(levels, n_init, target, dims, n_text, cfg.n_min)
                              : discretize_levels(levels, n_init, target, cfg.n_min);
    }

    report.keeps = apply_schedule(trace, report.schedule, SelectionConfig{cfg.text_mask});
    const FlopsSummary flops = schedule_flops(report.schedule, n_text, dims);
    report.flops_total = flops.total;
    report.flops_ratio = flops.ratio;
    if (const auto relevant = relevant_tokens(trace)) {
        report.relevant_recall = detail::recall_of(*relevant, report.keeps.per_layer_indices.back());
    }
    return report;
}

// ---------------------------------------------------------------------------
// Policy comparison

struct CorpusEntry {
    std::string id;
    AttentionTrace trace;
};

struct Aggregate {
    double mean = 0.0;
    double min = 0.0;
    double max = 0.0;
    std::size_t count = 0;

    void add(double v) {
        if (count == 0) {
            min = max = v;
        } else {
            min = std::min(min, v);
            max = std::max(max, v);
        }
        // Running sum kept in `mean` until finish().
        mean += v;
        ++count;
    }
    void finish() {
        if (count > 0) {
            mean /= static_cast<double>(count);
        }
    }
};

struct PolicyRow {
    std::string policy;
    std::size_t traces = 0;
    std::size_t failed = 0;
    Aggregate budget;
    Aggregate achieved;
    /// Largest budget - achieved over the traces, in the budget's unit.
    double max_gap = 0.0;
    Aggregate flops_ratio;
    Aggregate recall;
};

struct TraceFailure {
    std::string trace_id;
    std::string policy;
    std::string reason;
};

struct ComparisonTable {
    std::vector<PolicyRow> rows;
    std::vector<TraceFailure> failures;
};

/**
 * @brief Runs every policy over every trace under one budget.
 *
 * Traces are processed in id order and rows follow the order of `policies`, so the
 * table is reproducible. A trace whose budget is infeasible is recorded in
 * `failures` and skipped for that policy.
 */
inline ComparisonTable compare_policies(std::span<const CorpusEntry> corpus,
                                        std::span<const PolicySpec> policies, const Budget& budget,
                                        const PipelineConfig& cfg) {
    if (corpus.empty() || policies.empty()) {
        throw usage_error("compare_policies needs at least one trace and one policy");
    }
    std::vector<const CorpusEntry*> ordered;
    for (const CorpusEntry& e : corpus) {
        ordered.push_back(&e);
    }
    std::stable_sort(ordered.begin(), ordered.end(),
                     [](const CorpusEntry* a, const CorpusEntry* b) { return a->id < b->id; });

    ComparisonTable table;
    for (const PolicySpec& policy : policies) {
        PolicyRow row;
        row.policy = policy.name();
        for (const CorpusEntry* entry : ordered) {
            try {
                const PruneReport report = run_pipeline(entry->trace, policy, budget, cfg);
                row.budget.add(report.schedule.budget);
                row.achieved.add(report.schedule.achieved);
                row.max_gap = std::max(row.max_gap, report.schedule.budget - report.schedule.achieved);
                row.flops_ratio.add(report.flops_ratio);
                if (report.relevant_recall) {
                    row.recall.add(*report.relevant_recall);
                }
                ++row.traces;
            } catch (const data_error& e) {
                ++row.failed;
                table.failures.push_back({entry->id, row.policy, e.what()});
            }
        }
        row.budget.finish();
        row.achieved.finish();
        row.flops_ratio.finish();
        row.recall.finish();
        table.rows.push_back(std::move(row));
    }
    return table;
}

namespace detail {

inline std::string csv_number(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

}  // namespace detail

/// One header line plus one line per policy, '\n' terminated.
inline std::string comparison_csv(const ComparisonTable& table) {
    std::string out =
        "policy,traces,failed,budget_mean,achieved_mean,achieved_min,achieved_max,max_gap,"
        "flops_ratio_mean,flops_ratio_min,flops_ratio_max,recall_mean,recall_min,recall_max\n";
    using detail::csv_number;
    for (const PolicyRow& r : table.rows) {
        out += r.policy + ',' + std::to_string(r.traces) + ',' + std::to_string(r.failed) + ',' +
               csv_number(r.budget.mean) + ',' + csv_number(r.achieved.mean) + ',' +
               csv_number(r.achieved.min) + ',' + csv_number(r.achieved.max) + ',' +
               csv_number(r.max_gap) + ',' + csv_number(r.flops_ratio.mean) + ',' +
               csv_number(r.flops_ratio.min) + ',' + csv_number(r.flops_ratio.max) + ',';
        if (r.recall.count > 0) {
            out += csv_number(r.recall.mean) + ',' + csv_number(r.recall.min) + ',' +
                   csv_number(r.recall.max);
        } else {
            out += ",,";
        }
        out += '\n';
    }
    return out;
}

inline std::string curve_kind_name(CurveKind kind) {
    switch (kind) {
        case CurveKind::logistic:
            return "logistic";
        case CurveKind::linear:
            return "linear";
        case CurveKind::tanh:
            return "tanh";
        case CurveKind::exponential:
            return "exponential";
    }
    return "unknown";
}

inline CurveKind parse_curve_kind(const std::string& name) {
    for (CurveKind k : {CurveKind::logistic, CurveKind::linear, CurveKind::tanh, CurveKind::exponential}) {
        if (curve_kind_name(k) == name) {
            return k;
        }
    }
    throw usage_error("unknown curve kind '" + name + "'");
}

inline nlohmann::json to_json(const MIEstimate& mi) {
    return {{"raw_nats", mi.raw_nats}, {"normalized", mi.normalized}, {"n_text", mi.n_text},
            {"n_visual", mi.n_visual}};
}

inline nlohmann::json to_json(const CurveParams& p) {
    return {{"n_init", p.n_init}, {"k", p.k}, {"x0", p.x0}, {"scale", p.scale},
            {"curve", curve_kind_name(p.kind)}};
}

inline nlohmann::json to_json(const Schedule& s) {
    return {{"keep_counts", s.keep_counts},
            {"budget", s.budget},
            {"achieved", s.achieved},
            {"unit", s.unit == BudgetUnit::flops ? "flops" : "token_layers"},
            {"layer_count", s.layer_count},
            {"n_init", s.n_init},
            {"n_min", s.n_min}};
}

/// JSON mirror of a PruneReport. Key order is fixed, so equal reports dump to equal text.
inline nlohmann::json to_json(const PruneReport& r) {
    nlohmann::json out;
    out["trace_id"] = r.trace_id;
    out["policy"] = r.policy.name();
    out["probe_layer"] = r.probe_layer;
    out["mi"] = to_json(r.mi);
    out["complexity"] = r.complexity;
    out["params"] = r.params ? to_json(*r.params) : nlohmann::json(nullptr);
    out["schedule"] = to_json(r.schedule);
    out["keeps"] = r.keeps.per_layer_indices;
    out["flops_total"] = r.flops_total;
    out["flops_ratio"] = r.flops_ratio;
    out["relevant_recall"] = r.relevant_recall ? nlohmann::json(*r.relevant_recall) : nlohmann::json(nullptr);
    return out;
}

// ---------------------------------------------------------------------------
// Complexity-indicator ablation

enum class ComplexityScorer { mutual_information, average_attention, cosine_similarity };

namespace detail {

inline std::vector<std::vector<double>> embedding_matrix(const AttentionTrace& trace,
                                                         const std::string& key, std::size_t rows) {
    const auto it = trace.meta.find(key);
    if (it == trace.meta.end()) {
        throw usage_error("cosine-similarity scorer needs '" + key + "' in the trace meta");
    }
    const auto parsed = nlohmann::json::parse(it->second, nullptr, false);
    if (parsed.is_discarded() || !parsed.is_array() || parsed.size() != rows) {
        throw data_error("trace meta '" + key + "' is not an array of " + std::to_string(rows) +
                         " embeddings");
    }
    std::vector<std::vector<double>> out;
    for (const auto& v : parsed) {
        if (!v.is_array() || v.empty()) {
            throw data_error("trace meta '" + key + "' holds a malformed embedding");
        }
        out.push_back(v.get<std::vector<double>>());
        if (out.back().size() != out.front().size()) {
            throw data_error("trace meta '" + key + "' mixes embedding sizes");
        }
    }
    return out;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0;
    double na = 0.0;
    double nb = 0.0;
    for (std::size_t d = 0; d < a.size(); ++d) {
        dot += a[d] * b[d];
        na += a[d] * a[d];
        nb += b[d] * b[d];
    }
    if (na == 0.0 || nb == 0.0) {
        return 0.0;
    }
    return dot / std::sqrt(na * nb);
}

}  // namespace detail

/**
 * @brief Raw complexity indicator of one trace.
 *
 * - mutual_information: normalized MI at the probe layer, already in [0, 1].
 * - average_attention: mean over text rows of the largest attention weight in the
 *   row (head-averaged probe layer); 1/N_v for uniform rows, 1 for one-hot rows.
 *   Needs min_max_normalize over a corpus to become comparable.
 * - cosine_similarity: mean over text tokens of the best cosine similarity to any
 *   visual token, mapped from [-1, 1] to [0, 1]. Reads embeddings from the trace
 *   meta keys "embeddings.text" and "embeddings.visual".
 */
inline double complexity_score(const AttentionTrace& trace, ComplexityScorer scorer,
                               const PipelineConfig& cfg) {
    switch (scorer) {
        case ComplexityScorer::mutual_information:
            return probe_mutual_information(trace, cfg).normalized;
        case ComplexityScorer::average_attention: {
            const std::size_t layer = resolve_probe_layer(trace, cfg.probe_layer);
            const AttentionMap attn = select_text_rows(trace.head_mean(layer), cfg.text_mask);
            double total = 0.0;
            for (std::size_t j = 0; j < attn.n_text(); ++j) {
                const auto row = attn.row(j);
                total += *std::max_element(row.begin(), row.end());
            }
            return total / static_cast<double>(attn.n_text());
        }
        case ComplexityScorer::cosine_similarity: {
            const auto text = detail::embedding_matrix(trace, "embeddings.text", trace.n_text);
            const auto visual = detail::embedding_matrix(trace, "embeddings.visual", trace.n_visual);
            if (text.front().size() != visual.front().size()) {
                throw data_error("text and visual embeddings differ in size");
            }
            double total = 0.0;
            for (const auto& t : text) {
                double best = -1.0;
                for (const auto& v : visual) {
                    best = std::max(best, detail::cosine(t, v));
                }
                total += best;
            }
            return 0.5 * (total / static_cast<double>(text.size()) + 1.0);
        }
    }
    throw internal_error("unknown complexity scorer");
}

/// Min-max rescaling to [0, 1]; a constant input maps to all zeros.
inline std::vector<double> min_max_normalize(std::span<const double> values) {
    std::vector<double> out(values.size(), 0.0);
    if (values.empty()) {
        return out;
    }
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    const double range = *hi - *lo;
    if (range > 0.0) {
        for (std::size_t i = 0; i < values.size(); ++i) {
            out[i] = (values[i] - *lo) / range;
        }
    }
    return out;
}

/// complexity_score over a corpus, normalized per corpus where the scorer needs it.
inline std::vector<double> ablation_scores(std::span<const AttentionTrace> corpus,
                                           ComplexityScorer scorer, const PipelineConfig& cfg) {
    std::vector<double> raw;
    raw.reserve(corpus.size());
    for (const AttentionTrace& t : corpus) {
        raw.push_back(complexity_score(t, scorer, cfg));
    }
    if (scorer == ComplexityScorer::average_attention) {
        return min_max_normalize(raw);
    }
    return raw;
}

}  // namespace tokprune
