// Copyright (C) 2026 The tokprune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "tokprune/attention_stats.hpp"
#include "tokprune/errors.hpp"
#include "tokprune/flops_model.hpp"

namespace tokprune {

/// Which way the inflection depth moves with complexity.
/// `prose`: x0 = x0_base + beta * (1 - I), later inflection for low-MI (complex) inputs.
/// `equation`: x0 = x0_base + beta * I.
enum class InflectionSign { prose, equation };

enum class CurveKind { logistic, linear, tanh, exponential };

/**
 * @brief Maps a normalized complexity score onto retention-curve parameters.
 *
 * x0_base and beta default to L/4 and L/2 of the decoder the curve is built for.
 */
struct CurveConfig {
    double k0 = 1.0;
    double gamma = 0.9;
    std::optional<double> x0_base;
    std::optional<double> beta;
    double k_min = 0.05;
    double k_max = 10.0;
    InflectionSign inflection_sign = InflectionSign::prose;
    CurveKind curve_kind = CurveKind::logistic;

    double x0_base_for(std::size_t layers) const {
        return x0_base.value_or(static_cast<double>(layers) / 4.0);
    }
    double beta_for(std::size_t layers) const {
        return beta.value_or(static_cast<double>(layers) / 2.0);
    }

    void validate() const {
        if (!(k_min > 0.0) || !(k_min <= k_max)) {
            throw usage_error("curve config needs 0 < k_min <= k_max");
        }
        if (!(gamma >= 0.0) || (beta && !(*beta >= 0.0))) {
            throw usage_error("curve config needs gamma >= 0 and beta >= 0");
        }
        if (!std::isfinite(k0) || (x0_base && !std::isfinite(*x0_base))) {
            throw usage_error("curve config has a non-finite k0 or x0");
        }
    }
};

/// One sample's retention curve: scale * n_init * shape(k * (x - x0)).
struct CurveParams {
    std::size_t n_init = 1;
    double k = 1.0;
    double x0 = 0.0;
    double scale = 1.0;
    CurveKind kind = CurveKind::logistic;

    friend bool operator==(const CurveParams&, const CurveParams&) = default;
};

enum class BudgetUnit { token_layers, flops };

/**
 * @brief Per-layer visual-token counts.
 *
 * keep_counts[i] is the number of visual tokens entering layer i. Counts are
 * non-increasing in depth and lie in [n_min, n_init]. `budget` and `achieved` are
 * expressed in `unit`; achieved <= budget always holds.
 */
struct Schedule {
    std::vector<std::size_t> keep_counts;
    double budget = 0.0;
    double achieved = 0.0;
    BudgetUnit unit = BudgetUnit::token_layers;
    std::size_t layer_count = 0;
    std::size_t n_init = 0;
    std::size_t n_min = 0;

    std::size_t total_tokens() const {
        std::size_t total = 0;
        for (std::size_t c : keep_counts) {
            total += c;
        }
        return total;
    }
};

namespace detail {

inline double softplus(double z) {
    return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

inline double logistic(double z) {
    if (z > 0.0) {
        const double e = std::exp(-z);
        return e / (1.0 + e);
    }
    return 1.0 / (1.0 + std::exp(z));
}

// Lower bound of the linear ramp, relative to n_init. Keeps every layer able to
// absorb budget during discretization.
inline constexpr double kLinearFloor = 1e-6;

inline double shape(CurveKind kind, double z) {
    switch (kind) {
        case CurveKind::logistic:
            return logistic(z);
        case CurveKind::tanh:
            // 0.5 * (1 - tanh(z)) == 1 / (1 + e^{2z})
            return logistic(2.0 * z);
        case CurveKind::exponential:
            return std::min(1.0, 0.5 * std::exp(-0.5 * z));
        case CurveKind::linear:
            return std::clamp(0.5 - 0.25 * z, kLinearFloor, 1.0);
    }
    throw internal_error("unknown curve kind");
}

inline double log_shape(CurveKind kind, double z) {
    switch (kind) {
        case CurveKind::logistic:
            return -softplus(z);
        case CurveKind::tanh:
            return -softplus(2.0 * z);
        case CurveKind::exponential:
            return std::min(0.0, std::log(0.5) - 0.5 * z);
        case CurveKind::linear:
            return std::log(shape(kind, z));
    }
    throw internal_error("unknown curve kind");
}

// Points in (0, L) where a piecewise curve kind has a kink.
inline std::vector<double> kinks(const CurveParams& p, double length) {
    std::vector<double> out;
    if (p.k == 0.0) {
        return out;
    }
    auto add = [&](double z) {
        const double x = p.x0 + z / p.k;
        if (x > 0.0 && x < length) {
            out.push_back(x);
        }
    };
    if (p.kind == CurveKind::exponential) {
        add(-2.0 * std::log(2.0));
    } else if (p.kind == CurveKind::linear) {
        add(-2.0);
        add(2.0 - 4.0 * kLinearFloor);
    }
    std::sort(out.begin(), out.end());
    return out;
}

inline double simpson_step(const std::function<double(double)>& f, double a, double b, double fa,
                           double fm, double fb, double whole, double eps, int depth) {
    const double m = 0.5 * (a + b);
    const double lm = 0.5 * (a + m);
    const double rm = 0.5 * (m + b);
    const double flm = f(lm);
    const double frm = f(rm);
    const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    const double delta = left + right - whole;
    if (depth <= 0 || std::abs(delta) <= 15.0 * eps) {
        return left + right + delta / 15.0;
    }
    return simpson_step(f, a, m, fa, flm, fm, left, 0.5 * eps, depth - 1) +
           simpson_step(f, m, b, fm, frm, fb, right, 0.5 * eps, depth - 1);
}

/// Adaptive Simpson integration of f over [a, b] to absolute tolerance eps.
inline double integrate(const std::function<double(double)>& f, double a, double b, double eps) {
    const double fa = f(a);
    const double fb = f(b);
    const double fm = f(0.5 * (a + b));
    const double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    return simpson_step(f, a, b, fa, fm, fb, whole, eps, 48);
}

inline std::string num(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

inline std::string interval_text(double lo, double hi) {
    return "[" + num(lo) + ", " + num(hi) + "]";
}

/**
 * Searches the global multiplier s (in log space) applied to per-layer levels so that
 * cost(clamp(floor(s * level_i), n_min, n_init)) is as large as possible without
 * exceeding `target`. Counts are forced non-increasing after clamping.
 *
 * The bracket spans from "every layer floors to zero" to "every layer reaches n_init",
 * and the bisection runs a fixed 64 iterations, keeping the last feasible point.
 */
template <class Cost>
std::vector<std::size_t> search_scale(std::span<const double> log_levels, double target,
                                      std::size_t n_min, std::size_t n_init, Cost&& cost) {
    const double lo_count = static_cast<double>(n_min);
    const double hi_count = static_cast<double>(n_init);
    std::vector<std::size_t> counts(log_levels.size());
    auto counts_at = [&](double log_s) {
        double running = hi_count;
        for (std::size_t i = 0; i < log_levels.size(); ++i) {
            const double v = std::floor(std::exp(log_s + log_levels[i]));
            running = std::min(running, std::clamp(v, lo_count, hi_count));
            counts[i] = static_cast<std::size_t>(running);
        }
        return cost(std::span<const std::size_t>(counts));
    };

    double max_log = -std::numeric_limits<double>::infinity();
    double min_log = std::numeric_limits<double>::infinity();
    for (double l : log_levels) {
        if (std::isfinite(l)) {
            max_log = std::max(max_log, l);
            min_log = std::min(min_log, l);
        }
    }
    if (!std::isfinite(max_log)) {
        counts_at(0.0);
        return counts;
    }
    double lo = std::log(0.5) - max_log;
    double hi = std::log(hi_count + 1.0) - min_log;
    if (counts_at(hi) <= target) {
        return counts;
    }
    for (int iter = 0; iter < 64; ++iter) {
        const double mid = lo + 0.5 * (hi - lo);
        if (counts_at(mid) <= target) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    counts_at(lo);
    return counts;
}

inline void check_counts(std::size_t layers, std::size_t n_min, std::size_t n_init) {
    if (layers == 0) {
        throw usage_error("schedule needs at least one layer");
    }
    if (n_init == 0 || n_min > n_init) {
        throw usage_error("schedule needs n_init >= 1 and n_min <= n_init");
    }
}

inline Schedule token_schedule(std::span<const double> log_levels, double c_max, std::size_t n_min,
                               std::size_t n_init) {
    const std::size_t layers = log_levels.size();
    check_counts(layers, n_min, n_init);
    const double lo = static_cast<double>(n_min * layers);
    const double hi = static_cast<double>(n_init * layers);
    if (!(c_max >= lo && c_max <= hi)) {
        throw budget_error("token budget " + num(c_max) +
                               " is outside the feasible interval " + interval_text(lo, hi),
                           lo, hi);
    }
    auto token_sum = [](std::span<const std::size_t> counts) {
        std::size_t s = 0;
        for (std::size_t c : counts) {
            s += c;
        }
        return static_cast<double>(s);
    };
    Schedule out;
    out.keep_counts = search_scale(log_levels, c_max, n_min, n_init, token_sum);
    out.budget = c_max;
    out.achieved = token_sum(out.keep_counts);
    out.unit = BudgetUnit::token_layers;
    out.layer_count = layers;
    out.n_init = n_init;
    out.n_min = n_min;
    return out;
}

inline Schedule flops_schedule(std::span<const double> log_levels, double flops_target,
                               const ModelDims& dims, std::size_t n_text, std::size_t n_min,
                               std::size_t n_init) {
    const std::size_t layers = log_levels.size();
    check_counts(layers, n_min, n_init);
    dims.validate();
    const double text = static_cast<double>(n_text);
    const double lo = static_cast<double>(layers) * layer_flops(static_cast<double>(n_min) + text, dims);
    const double hi = static_cast<double>(layers) * layer_flops(static_cast<double>(n_init) + text, dims);
    if (!(flops_target >= lo && flops_target <= hi)) {
        throw budget_error("FLOPs target " + num(flops_target) + " is outside the feasible interval " + interval_text(lo, hi),
                           lo, hi);
    }
    auto flops_sum = [&](std::span<const std::size_t> counts) {
        double s = 0.0;
        for (std::size_t c : counts) {
            s += layer_flops(static_cast<double>(c) + text, dims);
        }
        return s;
    };
    Schedule out;
    out.keep_counts = search_scale(log_levels, flops_target, n_min, n_init, flops_sum);
    out.budget = flops_target;
    out.achieved = flops_sum(out.keep_counts);
    out.unit = BudgetUnit::flops;
    out.layer_count = layers;
    out.n_init = n_init;
    out.n_min = n_min;
    return out;
}

inline std::vector<double> log_of(std::span<const double> levels) {
    std::vector<double> out;
    out.reserve(levels.size());
    for (double v : levels) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            throw usage_error("schedule levels must be finite and non-negative");
        }
        out.push_back(std::log(v));
    }
    return out;
}

}  // namespace detail

/// Curve parameters for one input from its normalized MI score.
inline CurveParams modulate_params(const MIEstimate& mi, const CurveConfig& cfg, std::size_t n_init,
                                   std::size_t layers) {
    if (layers == 0 || n_init == 0) {
        throw usage_error("modulate_params needs at least one layer and one visual token");
    }
    cfg.validate();
    const double complexity = mi.normalized;
    const double length = static_cast<double>(layers);
    const double beta = cfg.beta_for(layers);
    const double shift = cfg.inflection_sign == InflectionSign::prose ? beta * (1.0 - complexity)
                                                                      : beta * complexity;
    CurveParams p;
    p.n_init = n_init;
    p.k = std::clamp(cfg.k0 - cfg.gamma * complexity, cfg.k_min, cfg.k_max);
    p.x0 = std::clamp(cfg.x0_base_for(layers) + shift, 0.0, length);
    p.scale = 1.0;
    p.kind = cfg.curve_kind;
    return p;
}

/// Retained tokens at depth x (real-valued, before discretization).
inline double eval_curve(const CurveParams& p, double x) {
    return p.scale * static_cast<double>(p.n_init) * detail::shape(p.kind, p.k * (x - p.x0));
}

/// Natural log of eval_curve; finite wherever the curve is positive.
inline double log_eval_curve(const CurveParams& p, double x) {
    return std::log(p.scale) + std::log(static_cast<double>(p.n_init)) +
           detail::log_shape(p.kind, p.k * (x - p.x0));
}

/**
 * @brief Area under the curve over [0, L], in token-layers.
 *
 * The logistic uses the closed-form antiderivative
 * F(x) = (x - x0) - ln(1 + e^{k(x - x0)}) / k, rewritten as a difference of
 * softplus terms so that neither tail overflows. Other kinds are integrated
 * numerically.
 */
inline double curve_area(const CurveParams& p, std::size_t layers) {
    if (layers == 0) {
        throw usage_error("curve_area needs at least one layer");
    }
    const double length = static_cast<double>(layers);
    const double height = p.scale * static_cast<double>(p.n_init);
    if (p.kind == CurveKind::logistic || p.kind == CurveKind::tanh) {
        const double k = p.kind == CurveKind::tanh ? 2.0 * p.k : p.k;
        if (std::abs(k) < 1e-9) {
            return height * length / 2.0;
        }
        return height * (detail::softplus(k * p.x0) - detail::softplus(k * (p.x0 - length))) / k;
    }
    const auto f = [&](double x) { return eval_curve(p, x); };
    std::vector<double> edges{0.0};
    for (double x : detail::kinks(p, length)) {
        edges.push_back(x);
    }
    edges.push_back(length);
    const double eps = 1e-13 * height * length;
    double area = 0.0;
    for (std::size_t s = 0; s + 1 < edges.size(); ++s) {
        area += detail::integrate(f, edges[s], edges[s + 1], eps / static_cast<double>(edges.size()));
    }
    return area;
}

/// Rescales the curve so that its area over [0, L] equals c_max; slope and
/// inflection are left untouched.
inline CurveParams normalize_to_budget(const CurveParams& p, double c_max, std::size_t layers) {
    if (!(c_max > 0.0) || !std::isfinite(c_max)) {
        throw usage_error("budget must be positive");
    }
    const double area = curve_area(p, layers);
    if (!(area > 0.0) || !std::isfinite(area)) {
        throw internal_error("retention curve has non-positive area");
    }
    CurveParams out = p;
    out.scale = p.scale * (c_max / area);
    return out;
}

/// log eval_curve at the integer layer indices 0..L-1.
inline std::vector<double> curve_log_levels(const CurveParams& p, std::size_t layers) {
    std::vector<double> out(layers);
    for (std::size_t i = 0; i < layers; ++i) {
        out[i] = log_eval_curve(p, static_cast<double>(i));
    }
    return out;
}

/**
 * @brief Integer per-layer counts whose sum is the largest value not above c_max.
 *
 * Throws budget_error when c_max is outside [n_min * L, n_init * L].
 */
inline Schedule discretize_schedule(const CurveParams& p, std::size_t layers, double c_max,
                                    std::size_t n_min) {
    detail::check_counts(layers, n_min, p.n_init);
    const auto levels = curve_log_levels(p, layers);
    return detail::token_schedule(levels, c_max, n_min, p.n_init);
}

/// Same search as discretize_schedule for an arbitrary non-negative level profile.
inline Schedule discretize_levels(std::span<const double> levels, std::size_t n_init, double c_max,
                                  std::size_t n_min) {
    const auto logs = detail::log_of(levels);
    return detail::token_schedule(logs, c_max, n_min, n_init);
}

/// Scale search against a FLOPs target: each layer costs layer_flops(count + n_text).
inline Schedule flops_budget_schedule(const CurveParams& p, double flops_target,
                                      const ModelDims& dims, std::size_t n_text, std::size_t layers,
                                      std::size_t n_min) {
    detail::check_counts(layers, n_min, p.n_init);
    const auto levels = curve_log_levels(p, layers);
    return detail::flops_schedule(levels, flops_target, dims, n_text, n_min, p.n_init);
}

inline Schedule flops_budget_levels(std::span<const double> levels, std::size_t n_init,
                                    double flops_target, const ModelDims& dims, std::size_t n_text,
                                    std::size_t n_min) {
    const auto logs = detail::log_of(levels);
    return detail::flops_schedule(logs, flops_target, dims, n_text, n_min, n_init);
}

inline FlopsSummary schedule_flops(const Schedule& schedule, std::size_t n_text,
                                   const ModelDims& dims) {
    return schedule_flops(schedule.keep_counts, schedule.n_init, n_text, dims);
}

}  // namespace tokprune
