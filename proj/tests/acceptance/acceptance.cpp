// Copyright (C) 2026 The tokprune Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero
// if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "oracles.hpp"
#include "tokprune/tokprune.hpp"

namespace {

using namespace tokprune;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
    bool pass = true;
    std::string detail;
};

int g_failures = 0;

void report(int id, const std::string& name, const std::function<Outcome()>& body) {
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("[%s] AC%-2d %s: %s\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    g_failures += o.pass ? 0 : 1;
}

std::string fmt(const char* f, double a = 0, double b = 0, double c = 0, double d = 0) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), f, a, b, c, d);
    return buf;
}

AttentionMap map_of(const oracle::Matrix& m) {
    return AttentionMap(m.size(), m.front().size(), oracle::flatten(m));
}

// 1. MI against the brute-force double sum.
Outcome mi_oracle() {
    std::mt19937_64 rng(1001);
    std::vector<oracle::Matrix> maps;
    for (int n = 0; n < 500; ++n) {
        const std::size_t nt = 1 + rng() % 64;
        const std::size_t nv = 1 + rng() % 512;
        const double spread = std::uniform_real_distribution<double>(0.0, 6.0)(rng);
        maps.push_back(oracle::random_softmax(nt, nv, rng, spread));
    }
    std::vector<AttentionMap> attn;
    for (const auto& m : maps) {
        attn.push_back(map_of(m));
    }
    const auto t0 = Clock::now();
    std::vector<MIEstimate> got;
    for (const auto& a : attn) {
        got.push_back(mutual_information(a));
    }
    const double elapsed = seconds_since(t0);
    double worst = 0.0;
    bool bounds = true;
    for (std::size_t n = 0; n < maps.size(); ++n) {
        worst = std::max(worst, std::abs(got[n].raw_nats - oracle::brute_force_mi(maps[n])));
        const double cap = std::log(static_cast<double>(maps[n].size())) + 1e-9;
        bounds = bounds && got[n].raw_nats >= 0.0 && got[n].raw_nats <= cap;
    }
    return {worst <= 1e-12 && bounds && elapsed < 5.0,
            fmt("max |diff| %.3g, %.3f s", worst, elapsed) + (bounds ? "" : ", bounds violated")};
}

// 2. Closed-form area against adaptive trapezoid quadrature.
Outcome area_oracle() {
    std::mt19937_64 rng(1002);
    std::uniform_real_distribution<double> kd(0.05, 10.0), xd(0.0, 32.0);
    const std::size_t n_init = 576, layers = 32;
    std::vector<CurveParams> params(1000);
    for (CurveParams& p : params) {
        p.n_init = n_init;
        p.k = kd(rng);
        p.x0 = xd(rng);
    }
    CurveParams sym;
    sym.n_init = n_init;
    sym.k = 0.7;
    sym.x0 = 16.0;
    const auto t0 = Clock::now();
    std::vector<double> got;
    for (const CurveParams& p : params) {
        got.push_back(curve_area(p, layers));
    }
    const double sym_area = curve_area(sym, layers);
    const double elapsed = seconds_since(t0);
    double worst = 0.0;
    for (std::size_t n = 0; n < params.size(); ++n) {
        const CurveParams& p = params[n];
        const double ref = oracle::adaptive_trapezoid(
            [&](double x) { return oracle::logistic_value(576.0, p.k, p.x0, 1.0, x); }, 0.0, 32.0,
            1e-11 * 576.0 * 32.0);
        worst = std::max(worst, std::abs(got[n] - ref) / ref);
    }
    const double sym_err = std::abs(sym_area / (576.0 * 16.0) - 1.0);
    return {worst <= 1e-8 && sym_err <= 1e-9 && elapsed < 5.0,
            fmt("max rel %.3g, symmetric rel %.3g, %.3f s", worst, sym_err, elapsed)};
}

// 3. Budget adherence over random complexity, config and budget.
Outcome budget_adherence() {
    std::mt19937_64 rng(1003);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::size_t ok = 0;
    double worst_gap = 0.0;
    for (int n = 0; n < 1000; ++n) {
        const std::size_t layers = 4 + rng() % 61;
        const std::size_t n_init = 8 + rng() % 1017;
        const std::size_t n_min = 1 + rng() % 4;
        CurveConfig cfg;
        cfg.k0 = 0.05 + 3.0 * u(rng);
        cfg.gamma = 2.0 * u(rng);
        cfg.x0_base = static_cast<double>(layers) * u(rng);
        cfg.beta = static_cast<double>(layers) * u(rng);
        cfg.inflection_sign = u(rng) < 0.5 ? InflectionSign::prose : InflectionSign::equation;
        const MIEstimate mi{0.0, u(rng), 2, 2};
        const double lo = static_cast<double>(n_min * layers);
        const double hi = static_cast<double>(n_init * layers);
        const double c_max = lo + (hi - lo) * u(rng);
        CurveParams p = modulate_params(mi, cfg, n_init, layers);
        p = normalize_to_budget(p, c_max, layers);
        const Schedule s = discretize_schedule(p, layers, c_max, n_min);
        bool good = s.achieved <= c_max && c_max - s.achieved <= static_cast<double>(layers) &&
                    s.keep_counts.size() == layers;
        for (std::size_t i = 0; i < layers && good; ++i) {
            good = s.keep_counts[i] >= n_min && s.keep_counts[i] <= n_init &&
                   (i == 0 || s.keep_counts[i] <= s.keep_counts[i - 1]);
        }
        worst_gap = std::max(worst_gap, (c_max - s.achieved) / static_cast<double>(layers));
        ok += good ? 1 : 0;
    }
    return {ok == 1000, fmt("%.0f/1000 cases, worst gap %.3f L", ok, worst_gap)};
}

// 4. Bisection against exhaustive scans of the multiplier: the fine grid
// (step 1e-6) and an exact enumeration of every breakpoint. The grid cannot
// separate thresholds closer than its step, nor reach multipliers above s_max;
// the breakpoint scan has neither limit and is the pass condition.
Outcome search_oracle() {
    std::mt19937_64 rng(1004);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::size_t exact = 0, grid = 0, grid_resolved = 0;
    for (int n = 0; n < 100; ++n) {
        const std::size_t layers = 8 + rng() % 25;
        const std::size_t n_init = 16 + rng() % 561;
        CurveParams raw;
        raw.n_init = n_init;
        raw.k = 0.05 + 1.5 * u(rng);
        raw.x0 = static_cast<double>(layers) * u(rng);
        const double c_max = static_cast<double>(n_init * layers) * (0.05 + 0.45 * u(rng));
        // The oracle evaluates the curve itself, scaled by its own quadrature area.
        const double area = oracle::adaptive_trapezoid(
            [&](double x) { return oracle::logistic_value(static_cast<double>(n_init), raw.k, raw.x0, 1.0, x); },
            0.0, static_cast<double>(layers), 1e-10);
        std::vector<double> f(layers);
        for (std::size_t i = 0; i < layers; ++i) {
            f[i] = oracle::logistic_value(static_cast<double>(n_init), raw.k, raw.x0, c_max / area,
                                          static_cast<double>(i));
        }
        const auto reference = oracle::breakpoint_scan(f, c_max, 1, n_init);

        // Sums are monotone in s, so the grid may start anywhere feasible.
        double start = 1.0;
        while (true) {
            const auto c = oracle::counts_for(f, start, 1, n_init);
            if (static_cast<double>(std::accumulate(c.begin(), c.end(), std::size_t{0})) <= c_max) {
                break;
            }
            start *= 0.5;
        }
        start = std::floor(start * 0.5 / 1e-6) * 1e-6;
        std::vector<std::size_t> on_grid;
        std::size_t best = 0;
        for (std::size_t step = 0;; ++step) {
            const double s = start + static_cast<double>(step) * 1e-6;
            const auto c = oracle::counts_for(f, s, 1, n_init);
            const std::size_t sum = std::accumulate(c.begin(), c.end(), std::size_t{0});
            if (static_cast<double>(sum) > c_max || s > 64.0) {
                break;
            }
            if (on_grid.empty() || sum > best) {
                on_grid = c;
                best = sum;
            }
        }

        const Schedule got = discretize_schedule(normalize_to_budget(raw, c_max, layers), layers, c_max, 1);
        exact += got.keep_counts == reference ? 1 : 0;
        if (on_grid == reference) {
            ++grid_resolved;
            grid += got.keep_counts == on_grid ? 1 : 0;
        }
    }
    return {exact == 100 && grid == grid_resolved,
            fmt("%.0f/100 equal to the breakpoint scan; %.0f/%.0f equal to the 1e-6 grid where the "
                "grid resolves the optimum",
                exact, grid, grid_resolved)};
}

// 5. Complexity behaviour over the tau grid.
Outcome complexity_behavior() {
    const CurveConfig cfg;
    const std::vector<double> grid = default_tau_grid();
    std::size_t good = 0;
    for (std::uint64_t c = 0; c < 100; ++c) {
        std::vector<double> mi;
        std::vector<double> x0;
        for (double tau : grid) {
            SynthSpec spec;
            spec.tau = tau;
            spec.layer_count = 32;
            const AttentionTrace t = synth_trace(spec, 5000 + c);
            const MIEstimate m = mutual_information(t.layer_maps(2));
            mi.push_back(m.normalized);
            x0.push_back(modulate_params(m, cfg, t.n_visual, t.layer_count).x0);
        }
        bool ok = true;
        for (std::size_t i = 1; i < grid.size(); ++i) {
            ok = ok && mi[i] < mi[i - 1];
            // MI falls along the grid, so x0 must not fall.
            ok = ok && x0[i] >= x0[i - 1];
        }
        good += ok ? 1 : 0;
    }
    return {good >= 95, fmt("%.0f/100 corpora", good)};
}

// 6. FLOPs ratios against the published 64/128/192-token rows.
Outcome flops_consistency() {
    const double avg[3] = {64.0, 128.0, 192.0};
    const double published[3] = {0.232, 0.337, 0.429};
    const std::vector<std::size_t> n_texts{32, 48, 64, 80, 96, 112, 128};
    SynthSpec spec;
    const auto corpus = synth_corpus(spec, 7, 5);
    bool bracket = true, monotone = true, near = true;
    double worst_pp = 0.0;
    for (const AttentionTrace& t : corpus) {
        std::vector<std::vector<double>> ratio(3);
        for (int r = 0; r < 3; ++r) {
            const PruneReport rep = run_pipeline(t, {}, Budget{BudgetKind::avg_tokens, avg[r]}, {});
            for (std::size_t nt : n_texts) {
                ratio[r].push_back(schedule_flops(rep.schedule, nt, ModelDims{}).ratio);
            }
            const auto [lo, hi] = std::minmax_element(ratio[r].begin(), ratio[r].end());
            bracket = bracket && *lo <= published[r] && published[r] <= *hi;
            const double at64 = ratio[r][2];
            worst_pp = std::max(worst_pp, std::abs(at64 - published[r]) * 100.0);
            near = near && std::abs(at64 - published[r]) <= 0.08;
        }
        for (std::size_t k = 0; k < n_texts.size(); ++k) {
            monotone = monotone && ratio[0][k] < ratio[1][k] && ratio[1][k] < ratio[2][k];
        }
    }
    return {bracket && monotone && near,
            fmt("worst |diff| at n_text=64 %.2f pp", worst_pp) +
                (bracket ? ", bracketed" : ", not bracketed") +
                (monotone ? ", monotone" : ", not monotone")};
}

// 7. Schedule computation overhead at full scale.
Outcome overhead() {
    std::mt19937_64 rng(1007);
    AttentionTrace t;
    t.layer_count = 32;
    t.head_count = 32;
    t.n_text = 128;
    t.n_visual = 576;
    t.layers.resize(32);
    std::vector<float> data;
    for (std::size_t h = 0; h < 32; ++h) {
        for (double v : oracle::flatten(oracle::random_softmax(128, 576, rng, 2.0))) {
            data.push_back(static_cast<float>(v));
        }
    }
    t.layers[2] = std::move(data);
    const CurveConfig cfg;
    std::vector<double> ms;
    std::size_t sink = 0;
    for (int run = 0; run < 100; ++run) {
        const auto t0 = Clock::now();
        const std::size_t layer = resolve_probe_layer(t, 2);
        const MIEstimate mi = mutual_information(t.head_mean(layer));
        CurveParams p = modulate_params(mi, cfg, t.n_visual, t.layer_count);
        p = normalize_to_budget(p, 64.0 * 32, 32);
        const Schedule s = discretize_schedule(p, 32, 64.0 * 32, 1);
        ms.push_back(seconds_since(t0) * 1e3);
        sink += s.total_tokens();
    }
    std::nth_element(ms.begin(), ms.begin() + 50, ms.end());
    const double median = ms[50];
    return {median < 10.0 && sink > 0, fmt("median %.3f ms", median)};
}

AttentionTrace random_trace(std::mt19937_64& rng) {
    AttentionTrace t;
    t.layer_count = 1 + rng() % 6;
    t.head_count = 1 + rng() % 4;
    t.n_text = 1 + rng() % 6;
    t.n_visual = 1 + rng() % 40;
    for (std::size_t l = 0; l < t.layer_count; ++l) {
        if (l > 0 && rng() % 4 == 0) {
            t.layers.emplace_back(std::nullopt);
            continue;
        }
        std::vector<float> data;
        for (std::size_t h = 0; h < t.head_count; ++h) {
            for (double v : oracle::flatten(oracle::random_softmax(t.n_text, t.n_visual, rng, 3.0))) {
                data.push_back(static_cast<float>(v));
            }
        }
        t.layers.emplace_back(std::move(data));
    }
    const std::size_t keys = rng() % 3;
    for (std::size_t k = 0; k < keys; ++k) {
        t.meta["key" + std::to_string(k)] = std::to_string(rng());
    }
    return t;
}

// 8. Trace round trip and header corruption.
Outcome trace_round_trip() {
    std::mt19937_64 rng(1008);
    std::size_t identical = 0, detected = 0, corruptions = 0;
    for (int n = 0; n < 200; ++n) {
        const AttentionTrace t = random_trace(rng);
        const auto bytes = encode_trace(t);
        const AttentionTrace back = decode_trace(bytes);
        identical += (back == t && encode_trace(back) == bytes) ? 1 : 0;
        for (std::size_t at = 0; at < kTraceHeaderSize; ++at) {
            for (int delta = 1; delta < 256; ++delta) {
                auto bad = bytes;
                bad[at] = static_cast<std::uint8_t>(bad[at] ^ delta);
                ++corruptions;
                try {
                    decode_trace(bad);
                } catch (const tokprune::error&) {
                    ++detected;
                }
            }
        }
    }
    return {identical == 200 && detected == corruptions,
            fmt("%.0f/200 bit-identical, %.0f/%.0f header corruptions detected", identical, detected,
                corruptions)};
}

struct Csv {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    double value(const std::string& policy, const std::string& column) const {
        const auto col = std::find(header.begin(), header.end(), column) - header.begin();
        for (const auto& r : rows) {
            if (r[0] == policy) {
                return std::stod(r[static_cast<std::size_t>(col)]);
            }
        }
        throw std::runtime_error("no row for " + policy);
    }
};

Csv parse_csv(const std::string& text) {
    Csv csv;
    std::istringstream in(text);
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) {
            cells.push_back(cell);
        }
        if (first) {
            csv.header = cells;
            first = false;
        } else {
            csv.rows.push_back(cells);
        }
    }
    return csv;
}

// Shared by 9 and 10: the seed-7 corpus compared at 64 tokens per layer.
struct CompareRun {
    std::string first;
    std::string second;
    int codes = 0;
};

const CompareRun& seed7_compare() {
    static const CompareRun run = [] {
        CompareRun r;
        const fs::path dir = fs::temp_directory_path() / "tokprune_acceptance_corpus";
        fs::remove_all(dir);
        std::ostringstream out, err;
        r.codes |= cli::run({"synth", "--out", dir.string(), "--count", "100", "--seed", "7"}, out, err);
        for (std::string* dst : {&r.first, &r.second}) {
            std::ostringstream csv, log;
            r.codes |= cli::run({"compare", dir.string(), "--budget-avg-tokens", "64"}, csv, log);
            *dst = csv.str();
        }
        fs::remove_all(dir);
        return r;
    }();
    return run;
}

// 9. End-to-end determinism of the policy comparison.
Outcome determinism() {
    const CompareRun& run = seed7_compare();
    const Csv csv = parse_csv(run.first);
    bool within = csv.rows.size() == 4;
    double worst = 0.0;
    for (const auto& r : csv.rows) {
        const double gap = csv.value(r[0], "max_gap");
        worst = std::max(worst, gap);
        within = within && gap <= 32.0 && csv.value(r[0], "failed") == 0.0 &&
                 csv.value(r[0], "traces") == 100.0;
    }
    return {run.codes == 0 && run.first == run.second && within,
            std::string(run.first == run.second ? "byte-identical" : "outputs differ") +
                fmt(", 4 policies, worst gap %.0f token-layers (L = 32)", worst)};
}

// 10. Relevant-token recall of autoprune against every baseline.
Outcome recall_proxy() {
    const Csv csv = parse_csv(seed7_compare().first);
    const double ours = csv.value("autoprune", "recall_mean");
    bool ok = true;
    std::string detail = fmt("autoprune %.4f", ours);
    for (const char* base : {"uniform", "drop-after-k", "pyramid"}) {
        const double v = csv.value(base, "recall_mean");
        ok = ok && ours >= v;
        detail += std::string(", ") + base + fmt(" %.4f", v);
    }
    return {ok, detail};
}

}  // namespace

int main() {
    report(1, "mutual information vs brute force", mi_oracle);
    report(2, "closed-form curve area", area_oracle);
    report(3, "budget adherence", budget_adherence);
    report(4, "scale search vs exhaustive scan", search_oracle);
    report(5, "complexity behaviour over tau", complexity_behavior);
    report(6, "FLOPs consistency", flops_consistency);
    report(7, "schedule overhead", overhead);
    report(8, "trace round trip", trace_round_trip);
    report(9, "compare determinism", determinism);
    report(10, "relevant-token recall", recall_proxy);
    std::printf("%d of 10 criteria failed\n", g_failures);
    return g_failures == 0 ? 0 : 1;
}
