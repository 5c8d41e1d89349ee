// Copyright (C) 2026 The tokprune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tokprune/attention_stats.hpp"
#include "tokprune/errors.hpp"

namespace tokprune {

// APTR attention-trace container. All integers little-endian.
//
//   0   magic "APTR"
//   4   u32 version (1)
//   8   u32 layers, u32 heads, u32 text tokens, u32 visual tokens
//   24  u32 meta length, then that many bytes of UTF-8 JSON (absent when empty)
//   ..  per layer: u8 presence (0|1); if 1, heads*text*visual float32,
//       row-major in (head, text, visual) order
//
// Nothing may follow the last layer record.
inline constexpr std::array<char, 4> kTraceMagic{'A', 'P', 'T', 'R'};
inline constexpr std::uint32_t kTraceVersion = 1;
inline constexpr std::size_t kTraceHeaderSize = 28;

/// Row sums of stored float32 attention must be within this of 1 on ingest.
inline constexpr double kIngestTolerance = 1e-4;

/**
 * @brief Per-layer, per-head text-to-visual attention of one prompt.
 *
 * Attention is kept exactly as stored (float32), so a write/read round trip is
 * bit-identical. layer_maps() widens to double and renormalizes each row.
 * Layers may be absent when a dump only covers a subset of the decoder.
 */
struct AttentionTrace {
    std::size_t layer_count = 0;
    std::size_t head_count = 0;
    std::size_t n_text = 0;
    std::size_t n_visual = 0;
    std::vector<std::optional<std::vector<float>>> layers;
    std::map<std::string, std::string> meta;

    std::size_t layer_size() const { return head_count * n_text * n_visual; }

    bool has_attention(std::size_t layer) const {
        return layer < layers.size() && layers[layer].has_value();
    }

    std::optional<std::size_t> first_attention_layer() const {
        for (std::size_t l = 0; l < layers.size(); ++l) {
            if (layers[l]) {
                return l;
            }
        }
        return std::nullopt;
    }

    std::span<const float> head_data(std::size_t layer, std::size_t head) const {
        const auto& data = *layers.at(layer);
        const std::size_t stride = n_text * n_visual;
        return {data.data() + head * stride, stride};
    }

    AttentionMap head_map(std::size_t layer, std::size_t head) const {
        const auto data = head_data(layer, head);
        return AttentionMap::renormalized(n_text, n_visual,
                                          std::vector<double>(data.begin(), data.end()));
    }

    std::vector<AttentionMap> layer_maps(std::size_t layer) const {
        if (!has_attention(layer)) {
            throw usage_error("trace layer " + std::to_string(layer) + " carries no attention");
        }
        std::vector<AttentionMap> maps;
        maps.reserve(head_count);
        for (std::size_t h = 0; h < head_count; ++h) {
            maps.push_back(head_map(layer, h));
        }
        return maps;
    }

    /// Head-averaged map of one layer. Equal to aggregate_heads(layer_maps(layer))
    /// up to rounding, without materializing every head.
    AttentionMap head_mean(std::size_t layer) const {
        if (!has_attention(layer)) {
            throw usage_error("trace layer " + std::to_string(layer) + " carries no attention");
        }
        std::vector<double> mean(n_text * n_visual, 0.0);
        for (std::size_t h = 0; h < head_count; ++h) {
            const auto data = head_data(layer, h);
            for (std::size_t j = 0; j < n_text; ++j) {
                const float* row = data.data() + j * n_visual;
                double sum = 0.0;
                bool negative = false;
                for (std::size_t i = 0; i < n_visual; ++i) {
                    sum += row[i];
                    negative |= !(row[i] >= 0.0f);
                }
                if (negative || !std::isfinite(sum)) {
                    throw validation_error("attention row " + std::to_string(j) +
                                           " has a negative or non-finite weight");
                }
                if (!(sum > 0.0)) {
                    throw validation_error("attention row " + std::to_string(j) + " has no mass");
                }
                const double scale = 1.0 / (sum * static_cast<double>(head_count));
                double* out = mean.data() + j * n_visual;
                for (std::size_t i = 0; i < n_visual; ++i) {
                    out[i] += static_cast<double>(row[i]) * scale;
                }
            }
        }
        return AttentionMap::renormalized(n_text, n_visual, std::move(mean));
    }

    /// Throws validation_error on inconsistent dimensions, missing attention or
    /// rows that are not distributions within `tolerance`.
    void validate(double tolerance = kIngestTolerance) const {
        if (layer_count == 0 || head_count == 0 || n_text == 0 || n_visual == 0) {
            throw validation_error("trace dimensions must all be at least 1");
        }
        if (layers.size() != layer_count) {
            throw validation_error("trace declares " + std::to_string(layer_count) +
                                   " layers but holds " + std::to_string(layers.size()));
        }
        if (!first_attention_layer()) {
            throw validation_error("trace has no attention-bearing layer");
        }
        for (std::size_t l = 0; l < layer_count; ++l) {
            if (!layers[l]) {
                continue;
            }
            if (layers[l]->size() != layer_size()) {
                throw validation_error("trace layer " + std::to_string(l) + " has the wrong size");
            }
            for (std::size_t h = 0; h < head_count; ++h) {
                const auto data = head_data(l, h);
                for (std::size_t j = 0; j < n_text; ++j) {
                    double sum = 0.0;
                    for (std::size_t i = 0; i < n_visual; ++i) {
                        const float w = data[j * n_visual + i];
                        if (!std::isfinite(w) || w < 0.0f) {
                            throw validation_error("layer " + std::to_string(l) + " head " +
                                                   std::to_string(h) + " row " + std::to_string(j) +
                                                   ": negative or non-finite weight");
                        }
                        sum += w;
                    }
                    if (std::abs(sum - 1.0) > tolerance) {
                        throw validation_error("layer " + std::to_string(l) + " head " +
                                               std::to_string(h) + " row " + std::to_string(j) +
                                               ": row sums to " + std::to_string(sum));
                    }
                }
            }
        }
    }

    friend bool operator==(const AttentionTrace&, const AttentionTrace&) = default;
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int b = 0; b < 4; ++b) {
        out.push_back(static_cast<std::uint8_t>((v >> (8 * b)) & 0xFFu));
    }
}

inline std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t at) {
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) {
        v |= static_cast<std::uint32_t>(in[at + b]) << (8 * b);
    }
    return v;
}

inline std::uint32_t checked_u32(std::size_t v, const char* what) {
    if (v > std::numeric_limits<std::uint32_t>::max()) {
        throw usage_error(std::string("trace ") + what + " does not fit in 32 bits");
    }
    return static_cast<std::uint32_t>(v);
}

inline std::string encode_meta(const std::map<std::string, std::string>& meta) {
    if (meta.empty()) {
        return {};
    }
    return nlohmann::json(meta).dump();
}

inline std::map<std::string, std::string> decode_meta(std::string_view text) {
    if (text.empty()) {
        return {};
    }
    nlohmann::json parsed = nlohmann::json::parse(text.begin(), text.end(), nullptr, false);
    if (parsed.is_discarded() || !parsed.is_object()) {
        throw corruption_error("trace meta block is not a JSON object");
    }
    std::map<std::string, std::string> meta;
    for (auto it = parsed.begin(); it != parsed.end(); ++it) {
        if (!it.value().is_string()) {
            throw corruption_error("trace meta value for '" + it.key() + "' is not a string");
        }
        meta.emplace(it.key(), it.value().get<std::string>());
    }
    return meta;
}

}  // namespace detail

/// Serializes a valid trace to APTR bytes.
inline std::vector<std::uint8_t> encode_trace(const AttentionTrace& trace) {
    trace.validate();
    const std::string meta = detail::encode_meta(trace.meta);
    std::vector<std::uint8_t> out;
    std::size_t present = 0;
    for (const auto& layer : trace.layers) {
        present += layer ? 1 : 0;
    }
    out.reserve(kTraceHeaderSize + meta.size() + trace.layer_count +
                present * trace.layer_size() * sizeof(float));
    out.insert(out.end(), kTraceMagic.begin(), kTraceMagic.end());
    detail::put_u32(out, kTraceVersion);
    detail::put_u32(out, detail::checked_u32(trace.layer_count, "layer count"));
    detail::put_u32(out, detail::checked_u32(trace.head_count, "head count"));
    detail::put_u32(out, detail::checked_u32(trace.n_text, "text count"));
    detail::put_u32(out, detail::checked_u32(trace.n_visual, "visual count"));
    detail::put_u32(out, detail::checked_u32(meta.size(), "meta length"));
    out.insert(out.end(), meta.begin(), meta.end());
    for (const auto& layer : trace.layers) {
        out.push_back(layer ? 1 : 0);
        if (layer) {
            for (float w : *layer) {
                detail::put_u32(out, std::bit_cast<std::uint32_t>(w));
            }
        }
    }
    return out;
}

/**
 * @brief Parses APTR bytes.
 *
 * format_error for a wrong magic or version, corruption_error for truncation,
 * trailing bytes or impossible dimensions, validation_error for rows that are
 * not distributions. Nothing is returned unless the whole buffer is consumed.
 */
inline AttentionTrace decode_trace(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kTraceMagic.size()) {
        throw corruption_error("trace truncated inside the magic");
    }
    if (!std::equal(kTraceMagic.begin(), kTraceMagic.end(), bytes.begin())) {
        throw format_error("not an APTR trace (bad magic)");
    }
    if (bytes.size() < 8) {
        throw corruption_error("trace truncated inside the version");
    }
    const std::uint32_t version = detail::get_u32(bytes, 4);
    if (version != kTraceVersion) {
        throw format_error("unsupported APTR version " + std::to_string(version));
    }
    if (bytes.size() < kTraceHeaderSize) {
        throw corruption_error("trace truncated inside the header");
    }
    AttentionTrace trace;
    trace.layer_count = detail::get_u32(bytes, 8);
    trace.head_count = detail::get_u32(bytes, 12);
    trace.n_text = detail::get_u32(bytes, 16);
    trace.n_visual = detail::get_u32(bytes, 20);
    const std::size_t meta_len = detail::get_u32(bytes, 24);
    if (trace.layer_count == 0 || trace.head_count == 0 || trace.n_text == 0 ||
        trace.n_visual == 0) {
        throw corruption_error("trace header has a zero dimension");
    }

    std::size_t pos = kTraceHeaderSize;
    auto remaining = [&] { return bytes.size() - pos; };
    if (meta_len > remaining()) {
        throw corruption_error("trace truncated inside the meta block");
    }
    trace.meta = detail::decode_meta(
        std::string_view(reinterpret_cast<const char*>(bytes.data() + pos), meta_len));
    pos += meta_len;

    // The product is bounded by the remaining bytes before anything is allocated.
    const std::size_t limit = remaining() / sizeof(float);
    std::size_t floats = trace.head_count;
    for (std::size_t dim : {trace.n_text, trace.n_visual}) {
        if (floats > limit / dim) {
            floats = limit + 1;
            break;
        }
        floats *= dim;
    }
    if (trace.layer_count > remaining()) {
        throw corruption_error("trace truncated: fewer bytes than layer records");
    }

    trace.layers.reserve(trace.layer_count);
    for (std::size_t l = 0; l < trace.layer_count; ++l) {
        if (remaining() < 1) {
            throw corruption_error("trace truncated at layer " + std::to_string(l));
        }
        const std::uint8_t presence = bytes[pos++];
        if (presence > 1) {
            throw corruption_error("layer " + std::to_string(l) + " has presence byte " +
                                   std::to_string(presence));
        }
        if (presence == 0) {
            trace.layers.emplace_back(std::nullopt);
            continue;
        }
        if (floats > limit || floats * sizeof(float) > remaining()) {
            throw corruption_error("trace truncated inside layer " + std::to_string(l));
        }
        std::vector<float> data(floats);
        for (std::size_t k = 0; k < floats; ++k) {
            data[k] = std::bit_cast<float>(detail::get_u32(bytes, pos));
            pos += sizeof(float);
        }
        trace.layers.emplace_back(std::move(data));
    }
    if (pos != bytes.size()) {
        throw corruption_error("trace has " + std::to_string(bytes.size() - pos) +
                               " trailing bytes");
    }
    trace.validate();
    return trace;
}

inline void write_trace(const AttentionTrace& trace, std::ostream& out) {
    const auto bytes = encode_trace(trace);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw io_error("failed to write trace");
    }
}

inline AttentionTrace read_trace(std::istream& in) {
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    if (in.bad()) {
        throw io_error("failed to read trace");
    }
    return decode_trace(bytes);
}

inline void save_trace(const AttentionTrace& trace, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw io_error("cannot open " + path.string() + " for writing");
    }
    write_trace(trace, out);
}

inline AttentionTrace load_trace(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw io_error("cannot open " + path.string());
    }
    return read_trace(in);
}

// ---------------------------------------------------------------------------
// Synthetic traces

/**
 * @brief Parameters of the synthetic attention generator.
 *
 * Text row j peaks on its own planted token R[j mod |R|] with logit bump 1/tau over
 * Gaussian noise of scale noise_sigma. Small tau gives sharply aligned ("simple")
 * prompts, large tau diffuse ("complex") ones. With depth every row additionally
 * concentrates on the whole planted set, the bump growing linearly to depth_focus
 * at the last layer.
 */
struct SynthSpec {
    std::size_t layer_count = 32;
    std::size_t head_count = 2;
    std::size_t n_text = 8;
    std::size_t n_visual = 576;
    double tau = 1.0;
    std::size_t relevant_count = 8;
    double noise_sigma = 1.0;
    /// Fraction of the noise variance shared by all text rows of a head (visual
    /// saliency every query sees); the rest is drawn per row.
    double row_correlation = 0.9;
    double depth_focus = 4.0;
    /// Store random token embeddings in meta for the cosine-similarity scorer; 0 = none.
    std::size_t embedding_dim = 0;

    void validate() const {
        if (layer_count == 0 || head_count == 0 || n_text == 0 || n_visual == 0) {
            throw usage_error("synthetic trace dimensions must all be at least 1");
        }
        if (!(tau > 0.0) || !std::isfinite(tau)) {
            throw usage_error("synthetic tau must be positive");
        }
        if (relevant_count > n_visual) {
            throw usage_error("relevant_count " + std::to_string(relevant_count) +
                              " exceeds the " + std::to_string(n_visual) + " visual tokens");
        }
        if (!(noise_sigma >= 0.0) || !std::isfinite(depth_focus)) {
            throw usage_error("synthetic noise_sigma must be >= 0");
        }
        if (!(row_correlation >= 0.0 && row_correlation <= 1.0)) {
            throw usage_error("synthetic row_correlation must lie in [0, 1]");
        }
    }
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// std::normal_distribution is implementation-defined; this one gives the same
// stream on every platform.
class NormalStream {
public:
    explicit NormalStream(std::uint64_t seed) : m_engine(splitmix64(seed)) {}

    double uniform() {
        // 53 random bits in (0, 1)
        return (static_cast<double>(m_engine() >> 11) + 0.5) * 0x1.0p-53;
    }

    std::size_t below(std::size_t n) { return static_cast<std::size_t>(m_engine() % n); }

    double normal() {
        if (m_spare) {
            const double v = *m_spare;
            m_spare.reset();
            return v;
        }
        const double r = std::sqrt(-2.0 * std::log(uniform()));
        const double theta = 2.0 * 3.14159265358979323846 * uniform();
        m_spare = r * std::sin(theta);
        return r * std::cos(theta);
    }

private:
    std::mt19937_64 m_engine;
    std::optional<double> m_spare;
};

inline std::string format_real(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace detail

/// Planted relevant token indices recorded by synth_trace, if any.
inline std::optional<std::vector<std::size_t>> relevant_tokens(const AttentionTrace& trace) {
    const auto it = trace.meta.find("relevant");
    if (it == trace.meta.end()) {
        return std::nullopt;
    }
    std::vector<std::size_t> out;
    std::istringstream in(it->second);
    std::string item;
    while (std::getline(in, item, ',')) {
        if (item.empty()) {
            continue;
        }
        try {
            std::size_t used = 0;
            const unsigned long long v = std::stoull(item, &used);
            if (used != item.size() || v >= trace.n_visual) {
                throw std::invalid_argument(item);
            }
            out.push_back(static_cast<std::size_t>(v));
        } catch (const std::exception&) {
            throw data_error("trace meta 'relevant' has an invalid index '" + item + "'");
        }
    }
    return out;
}

/**
 * @brief Deterministic synthetic trace.
 *
 * The planted set and the noise depend only on the seed and the dimensions, so
 * traces that differ only in tau share every noise draw.
 */
inline AttentionTrace synth_trace(const SynthSpec& spec, std::uint64_t seed) {
    spec.validate();
    detail::NormalStream rng(seed);

    std::vector<std::size_t> pool(spec.n_visual);
    for (std::size_t i = 0; i < pool.size(); ++i) {
        pool[i] = i;
    }
    for (std::size_t i = 0; i < spec.relevant_count; ++i) {
        std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
    }
    // Row j's planted token keeps the draw order; the recorded set is sorted.
    std::vector<std::size_t> planted(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(spec.relevant_count));
    std::vector<bool> is_relevant(spec.n_visual, false);
    for (std::size_t r : planted) {
        is_relevant[r] = true;
    }

    AttentionTrace trace;
    trace.layer_count = spec.layer_count;
    trace.head_count = spec.head_count;
    trace.n_text = spec.n_text;
    trace.n_visual = spec.n_visual;
    trace.layers.reserve(spec.layer_count);

    const double bump = 1.0 / spec.tau;
    const double shared_scale = spec.noise_sigma * std::sqrt(spec.row_correlation);
    const double row_scale = spec.noise_sigma * std::sqrt(1.0 - spec.row_correlation);
    std::vector<double> shared(spec.n_visual);
    std::vector<double> logits(spec.n_visual);
    for (std::size_t l = 0; l < spec.layer_count; ++l) {
        const double depth = spec.layer_count > 1
                                 ? static_cast<double>(l) / static_cast<double>(spec.layer_count - 1)
                                 : 0.0;
        const double focus = spec.depth_focus * depth;
        std::vector<float> data(trace.layer_size());
        for (std::size_t h = 0; h < spec.head_count; ++h) {
            for (double& u : shared) {
                u = shared_scale * rng.normal();
            }
            for (std::size_t j = 0; j < spec.n_text; ++j) {
                const std::optional<std::size_t> target =
                    planted.empty() ? std::nullopt
                                    : std::optional<std::size_t>(planted[j % planted.size()]);
                double peak = -std::numeric_limits<double>::infinity();
                for (std::size_t i = 0; i < spec.n_visual; ++i) {
                    double z = shared[i] + row_scale * rng.normal();
                    if (is_relevant[i]) {
                        z += focus;
                    }
                    if (target && *target == i) {
                        z += bump;
                    }
                    logits[i] = z;
                    peak = std::max(peak, z);
                }
                double sum = 0.0;
                for (double& z : logits) {
                    z = std::exp(z - peak);
                    sum += z;
                }
                float* row = data.data() + (h * spec.n_text + j) * spec.n_visual;
                for (std::size_t i = 0; i < spec.n_visual; ++i) {
                    row[i] = static_cast<float>(logits[i] / sum);
                }
            }
        }
        trace.layers.emplace_back(std::move(data));
    }

    std::vector<std::size_t> sorted = planted;
    std::sort(sorted.begin(), sorted.end());
    std::string relevant;
    for (std::size_t r : sorted) {
        if (!relevant.empty()) {
            relevant += ',';
        }
        relevant += std::to_string(r);
    }
    trace.meta["generator"] = "synthetic";
    trace.meta["seed"] = std::to_string(seed);
    trace.meta["tau"] = detail::format_real(spec.tau);
    trace.meta["noise_sigma"] = detail::format_real(spec.noise_sigma);
    trace.meta["row_correlation"] = detail::format_real(spec.row_correlation);
    trace.meta["depth_focus"] = detail::format_real(spec.depth_focus);
    trace.meta["relevant"] = relevant;

    if (spec.embedding_dim > 0) {
        // Visual embeddings are random; text row j leans toward its planted token
        // with weight 1 / (1 + tau).
        const std::size_t dim = spec.embedding_dim;
        nlohmann::json visual = nlohmann::json::array();
        std::vector<std::vector<double>> vis(spec.n_visual, std::vector<double>(dim));
        for (auto& v : vis) {
            for (double& x : v) {
                x = rng.normal();
            }
            visual.push_back(v);
        }
        nlohmann::json text = nlohmann::json::array();
        const double pull = 1.0 / (1.0 + spec.tau);
        for (std::size_t j = 0; j < spec.n_text; ++j) {
            std::vector<double> t(dim);
            for (std::size_t d = 0; d < dim; ++d) {
                const double anchor = planted.empty() ? 0.0 : vis[planted[j % planted.size()]][d];
                t[d] = pull * anchor + (1.0 - pull) * rng.normal();
            }
            text.push_back(t);
        }
        trace.meta["embeddings.visual"] = visual.dump();
        trace.meta["embeddings.text"] = text.dump();
    }
    return trace;
}

/// Per-trace seed of entry `index` in a corpus generated from `corpus_seed`.
inline std::uint64_t corpus_trace_seed(std::uint64_t corpus_seed, std::size_t index) {
    return detail::splitmix64(corpus_seed ^ (0x5851F42D4C957F2Dull * (index + 1)));
}

/// Complexity grid cycled through by synth_corpus.
inline const std::vector<double>& default_tau_grid() {
    static const std::vector<double> grid{0.1, 0.5, 1.0, 2.0, 5.0};
    return grid;
}

/// `count` synthetic traces; entry t uses tau_grid[t % |grid|] and its own seed.
inline std::vector<AttentionTrace> synth_corpus(const SynthSpec& base, std::uint64_t corpus_seed,
                                                std::size_t count,
                                                std::span<const double> tau_grid = default_tau_grid()) {
    if (tau_grid.empty()) {
        throw usage_error("synth_corpus needs a non-empty tau grid");
    }
    std::vector<AttentionTrace> out;
    out.reserve(count);
    for (std::size_t t = 0; t < count; ++t) {
        SynthSpec spec = base;
        spec.tau = tau_grid[t % tau_grid.size()];
        AttentionTrace trace = synth_trace(spec, corpus_trace_seed(corpus_seed, t));
        trace.meta["corpus_index"] = std::to_string(t);
        out.push_back(std::move(trace));
    }
    return out;
}

}  // namespace tokprune
