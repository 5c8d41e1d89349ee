// Copyright (C) 2026 The tokprune Authors
// SPDX-License-Identifier: Apache-2.0

#include "cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "tokprune/tokprune.hpp"

namespace tokprune::cli {

namespace {

namespace fs = std::filesystem;

struct Options {
    std::string input;
    std::string out_path;

    std::optional<double> budget_avg;
    std::optional<double> budget_total;
    std::optional<double> budget_flops;

    std::size_t probe_layer = 2;
    std::optional<double> k0, gamma, x0, beta, k_min, k_max;
    std::size_t n_min = 1;
    std::string inflection_sign = "prose";
    std::string curve = "logistic";
    std::vector<std::string> policies;
    std::size_t n_text = 64;
    std::size_t hidden = 4096;
    std::size_t ffn = 11008;

    std::uint64_t seed = 7;
    std::optional<double> tau;
    std::optional<std::size_t> count;
    SynthSpec synth;
};

void add_budget_flags(CLI::App& cmd, Options& o) {
    auto* avg = cmd.add_option("--budget-avg-tokens", o.budget_avg,
                               "average visual tokens per layer");
    auto* total = cmd.add_option("--budget-total", o.budget_total, "total visual token-layers");
    auto* flops = cmd.add_option("--budget-flops-ratio", o.budget_flops,
                                 "fraction of unpruned decoder FLOPs");
    avg->excludes(total, flops);
    total->excludes(flops);
}

void add_curve_flags(CLI::App& cmd, Options& o) {
    cmd.add_option("--probe-layer", o.probe_layer, "layer whose attention feeds the MI estimate");
    cmd.add_option("--k0", o.k0, "base slope");
    cmd.add_option("--gamma", o.gamma, "slope sensitivity to MI");
    cmd.add_option("--x0", o.x0, "base inflection depth (default L/4)");
    cmd.add_option("--beta", o.beta, "inflection sensitivity (default L/2)");
    cmd.add_option("--k-min", o.k_min, "lower slope clamp");
    cmd.add_option("--k-max", o.k_max, "upper slope clamp");
    cmd.add_option("--n-min", o.n_min, "visual tokens kept at every layer at least");
    cmd.add_option("--inflection-sign", o.inflection_sign, "prose|equation")
        ->check(CLI::IsMember({"prose", "equation"}));
    cmd.add_option("--curve", o.curve, "logistic|linear|tanh|exponential")
        ->check(CLI::IsMember({"logistic", "linear", "tanh", "exponential"}));
    cmd.add_option("--n-text", o.n_text, "text tokens per layer in FLOPs accounting");
    cmd.add_option("--hidden", o.hidden, "decoder hidden width");
    cmd.add_option("--ffn", o.ffn, "decoder feed-forward width");
}

void add_policy_flag(CLI::App& cmd, Options& o, bool many) {
    auto* opt = cmd.add_option("--policy", o.policies, "autoprune|uniform|drop-after-k|pyramid");
    opt->check(CLI::IsMember({"autoprune", "uniform", "drop-after-k", "pyramid"}));
    if (!many) {
        opt->expected(1);
    }
}

Budget budget_from(const Options& o) {
    if (o.budget_avg) {
        return {BudgetKind::avg_tokens, *o.budget_avg};
    }
    if (o.budget_total) {
        return {BudgetKind::total_tokens, *o.budget_total};
    }
    if (o.budget_flops) {
        return {BudgetKind::flops_ratio, *o.budget_flops};
    }
    throw usage_error(
        "one of --budget-avg-tokens, --budget-total or --budget-flops-ratio is required");
}

PipelineConfig pipeline_from(const Options& o) {
    PipelineConfig cfg;
    cfg.probe_layer = o.probe_layer;
    if (o.k0) cfg.curve.k0 = *o.k0;
    if (o.gamma) cfg.curve.gamma = *o.gamma;
    if (o.x0) cfg.curve.x0_base = *o.x0;
    if (o.beta) cfg.curve.beta = *o.beta;
    if (o.k_min) cfg.curve.k_min = *o.k_min;
    if (o.k_max) cfg.curve.k_max = *o.k_max;
    cfg.curve.inflection_sign =
        o.inflection_sign == "equation" ? InflectionSign::equation : InflectionSign::prose;
    cfg.curve.curve_kind = parse_curve_kind(o.curve);
    cfg.curve.validate();
    cfg.n_min = o.n_min;
    cfg.flops_text_tokens = o.n_text;
    cfg.dims.hidden = o.hidden;
    cfg.dims.ffn = o.ffn;
    cfg.dims.validate();
    return cfg;
}

PolicySpec single_policy(const Options& o) {
    return o.policies.empty() ? PolicySpec{PolicyKind::autoprune} : PolicySpec::parse(o.policies.front());
}

void require_file(const std::string& path) {
    if (!fs::is_regular_file(path)) {
        throw io_error("no such file: " + path);
    }
}

std::string dump(const nlohmann::json& j) { return j.dump(2) + "\n"; }

void emit(const Options& o, const std::string& text, std::ostream& out) {
    if (o.out_path.empty()) {
        out << text;
        return;
    }
    std::ofstream file(o.out_path, std::ios::binary | std::ios::trunc);
    if (!file || !(file << text)) {
        throw io_error("cannot write " + o.out_path);
    }
}

int cmd_mi(const Options& o, std::ostream& out) {
    require_file(o.input);
    const AttentionTrace trace = load_trace(o.input);
    PipelineConfig cfg;
    cfg.probe_layer = o.probe_layer;
    const std::size_t layer = resolve_probe_layer(trace, cfg.probe_layer);
    const MIEstimate mi = mutual_information(trace.head_mean(layer));
    nlohmann::json j = to_json(mi);
    j["probe_layer"] = layer;
    emit(o, dump(j), out);
    return kOk;
}

int cmd_schedule(const Options& o, std::ostream& out, std::ostream& err) {
    require_file(o.input);
    const Budget budget = budget_from(o);
    const PipelineConfig cfg = pipeline_from(o);
    const AttentionTrace trace = load_trace(o.input);
    const PruneReport r = run_pipeline(trace, single_policy(o), budget, cfg);
    nlohmann::json j;
    j["policy"] = r.policy.name();
    j["mi"] = to_json(r.mi);
    j["probe_layer"] = r.probe_layer;
    j["params"] = r.params ? to_json(*r.params) : nlohmann::json(nullptr);
    j["schedule"] = to_json(r.schedule);
    emit(o, dump(j), out);
    err << "schedule: " << r.policy.name() << ", normalized MI " << r.mi.normalized << ", "
        << r.schedule.total_tokens() << " token-layers over " << r.schedule.layer_count
        << " layers\n";
    return kOk;
}

int cmd_simulate(const Options& o, std::ostream& out, std::ostream& err) {
    require_file(o.input);
    const Budget budget = budget_from(o);
    const PipelineConfig cfg = pipeline_from(o);
    const AttentionTrace trace = load_trace(o.input);
    PruneReport r = run_pipeline(trace, single_policy(o), budget, cfg);
    r.trace_id = fs::path(o.input).filename().string();
    emit(o, dump(to_json(r)), out);
    err << "simulate: FLOPs ratio " << r.flops_ratio;
    if (r.relevant_recall) {
        err << ", relevant recall " << *r.relevant_recall;
    }
    err << "\n";
    return kOk;
}

int cmd_compare(const Options& o, std::ostream& out, std::ostream& err) {
    if (!fs::is_directory(o.input)) {
        throw io_error("no such directory: " + o.input);
    }
    const Budget budget = budget_from(o);
    const PipelineConfig cfg = pipeline_from(o);
    std::vector<PolicySpec> policies;
    for (const std::string& name : o.policies) {
        policies.push_back(PolicySpec::parse(name));
    }
    if (policies.empty()) {
        policies = all_policies();
    }
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(o.input)) {
        if (entry.is_regular_file() && entry.path().extension() == ".aptr") {
            files.push_back(entry.path());
        }
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) {
        throw data_error("no .aptr traces in " + o.input);
    }
    std::vector<CorpusEntry> corpus;
    corpus.reserve(files.size());
    for (const fs::path& f : files) {
        corpus.push_back({f.filename().string(), load_trace(f)});
    }
    const ComparisonTable table = compare_policies(corpus, policies, budget, cfg);
    emit(o, comparison_csv(table), out);
    for (const TraceFailure& f : table.failures) {
        err << "compare: " << f.policy << " skipped " << f.trace_id << ": " << f.reason << "\n";
    }
    return kOk;
}

int cmd_flops(const Options& o, std::ostream& out) {
    require_file(o.input);
    std::ifstream in(o.input);
    nlohmann::json doc = nlohmann::json::parse(in, nullptr, false);
    if (doc.is_discarded() || !doc.is_object()) {
        throw format_error("schedule file is not a JSON object");
    }
    if (doc.contains("schedule")) {
        doc = doc["schedule"];
    }
    if (!doc.contains("keep_counts") || !doc.contains("n_init") || !doc["keep_counts"].is_array() ||
        !doc["n_init"].is_number_unsigned()) {
        throw format_error("schedule file needs 'keep_counts' and 'n_init'");
    }
    std::vector<std::size_t> counts;
    for (const auto& c : doc["keep_counts"]) {
        if (!c.is_number_unsigned()) {
            throw format_error("keep_counts must be non-negative integers");
        }
        counts.push_back(c.get<std::size_t>());
    }
    if (counts.empty()) {
        throw format_error("schedule file has no layers");
    }
    ModelDims dims;
    dims.hidden = o.hidden;
    dims.ffn = o.ffn;
    dims.layers = counts.size();
    dims.validate();
    const FlopsSummary s = schedule_flops(counts, doc["n_init"].get<std::size_t>(), o.n_text, dims);
    nlohmann::json j{{"total", s.total}, {"unpruned", s.unpruned}, {"ratio", s.ratio},
                     {"n_text", o.n_text}, {"layers", counts.size()}};
    emit(o, dump(j), out);
    return kOk;
}

int cmd_synth(const Options& o, std::ostream& out) {
    if (o.out_path.empty()) {
        throw usage_error("synth needs --out");
    }
    nlohmann::json written = nlohmann::json::array();
    if (o.count) {
        const fs::path dir(o.out_path);
        fs::create_directories(dir);
        std::vector<double> grid = default_tau_grid();
        if (o.tau) {
            grid = {*o.tau};
        }
        const auto corpus = synth_corpus(o.synth, o.seed, *o.count, grid);
        for (std::size_t t = 0; t < corpus.size(); ++t) {
            std::ostringstream name;
            name << "trace_" << std::setw(4) << std::setfill('0') << t << ".aptr";
            save_trace(corpus[t], dir / name.str());
            written.push_back((dir / name.str()).string());
        }
    } else {
        SynthSpec spec = o.synth;
        spec.tau = o.tau.value_or(spec.tau);
        save_trace(synth_trace(spec, o.seed), o.out_path);
        written.push_back(o.out_path);
    }
    out << dump(nlohmann::json{{"written", written}});
    return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Complexity-adaptive visual-token pruning schedules from attention traces",
                 "tokprune"};
    app.require_subcommand(1);
    Options o;

    auto* mi = app.add_subcommand("mi", "print raw and normalized mutual information of a trace");
    mi->add_option("trace", o.input, "APTR trace")->required();
    mi->add_option("--probe-layer", o.probe_layer, "layer whose attention feeds the estimate");
    mi->add_option("--out", o.out_path, "write output here instead of stdout");

    auto* schedule = app.add_subcommand("schedule", "print per-layer keep counts and curve params");
    schedule->add_option("trace", o.input, "APTR trace")->required();
    add_budget_flags(*schedule, o);
    add_curve_flags(*schedule, o);
    add_policy_flag(*schedule, o, false);
    schedule->add_option("--out", o.out_path, "write output here instead of stdout");

    auto* simulate = app.add_subcommand("simulate", "run the full pipeline and emit a JSON report");
    simulate->add_option("trace", o.input, "APTR trace")->required();
    add_budget_flags(*simulate, o);
    add_curve_flags(*simulate, o);
    add_policy_flag(*simulate, o, false);
    simulate->add_option("--out", o.out_path, "write output here instead of stdout");

    auto* compare = app.add_subcommand("compare", "compare allocation policies over a corpus (CSV)");
    compare->add_option("corpus-dir", o.input, "directory of .aptr traces")->required();
    add_budget_flags(*compare, o);
    add_curve_flags(*compare, o);
    add_policy_flag(*compare, o, true);
    compare->add_option("--out", o.out_path, "write output here instead of stdout");

    auto* flops = app.add_subcommand("flops", "decoder FLOPs of a schedule file");
    flops->add_option("schedule-file", o.input, "JSON with keep_counts and n_init")->required();
    flops->add_option("--n-text", o.n_text, "text tokens per layer");
    flops->add_option("--hidden", o.hidden, "decoder hidden width");
    flops->add_option("--ffn", o.ffn, "decoder feed-forward width");
    flops->add_option("--out", o.out_path, "write output here instead of stdout");

    auto* synth = app.add_subcommand("synth", "write synthetic APTR traces");
    synth->add_option("--out", o.out_path, "trace file, or directory with --count")->required();
    synth->add_option("--seed", o.seed, "random seed");
    synth->add_option("--tau", o.tau, "peakedness temperature (corpus: overrides the grid)");
    synth->add_option("--count", o.count, "write a corpus of this many traces into --out");
    synth->add_option("--layers", o.synth.layer_count, "decoder layers");
    synth->add_option("--heads", o.synth.head_count, "attention heads");
    synth->add_option("--text", o.synth.n_text, "text tokens");
    synth->add_option("--visual", o.synth.n_visual, "visual tokens");
    synth->add_option("--relevant", o.synth.relevant_count, "planted relevant tokens");
    synth->add_option("--noise", o.synth.noise_sigma, "logit noise scale");
    synth->add_option("--row-correlation", o.synth.row_correlation, "noise shared across text rows");
    synth->add_option("--depth-focus", o.synth.depth_focus, "relevance bump at the last layer");
    synth->add_option("--embedding-dim", o.synth.embedding_dim, "store embeddings of this size");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "usage-error: " << e.what() << "\n" << app.help();
        return kUsage;
    }

    try {
        if (mi->parsed()) return cmd_mi(o, out);
        if (schedule->parsed()) return cmd_schedule(o, out, err);
        if (simulate->parsed()) return cmd_simulate(o, out, err);
        if (compare->parsed()) return cmd_compare(o, out, err);
        if (flops->parsed()) return cmd_flops(o, out);
        if (synth->parsed()) return cmd_synth(o, out);
        err << "usage-error: no command given\n" << app.help();
        return kUsage;
    } catch (const usage_error& e) {
        err << e.kind() << ": " << e.what() << "\n";
        return kUsage;
    } catch (const error& e) {
        err << e.kind() << ": " << e.what() << "\n";
        return kData;
    } catch (const std::exception& e) {
        err << "data-error: " << e.what() << "\n";
        return kData;
    }
}

}  // namespace tokprune::cli
