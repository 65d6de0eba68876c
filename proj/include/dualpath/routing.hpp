#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace dualpath {

// One (sequence, layer, token) routing read-out.
struct RoutingRecord {
    std::int64_t sequence_id = 0;
    int layer = 0;
    int token_index = 0;
    int token_id = 0;
    double g_d = 0.0;
    double g_w = 0.0;
    double norm_dd = 0.0;
    double norm_dw = 0.0;
    double cos_dw = 0.0;
    double rho_d = 0.0;
    // Set when g_d*|Δd| + g_w*|Δw| == 0 and rho_d fell back to 0.5.
    bool degenerate = false;
    std::vector<double> q_steps;
    std::string token_text;
};

// Collects records emitted by the forward pass. Owned by a single run.
class TraceSink {
public:
    void emit(RoutingRecord record) { records_.push_back(std::move(record)); }
    const std::vector<RoutingRecord>& records() const { return records_; }
    std::vector<RoutingRecord>& records() { return records_; }
    void clear() { records_.clear(); }

private:
    std::vector<RoutingRecord> records_;
};

// Fraction of the gated update carried by the deep path; 0.5 when both
// gated magnitudes are zero.
double deep_share(double g_d, double g_w, double norm_dd, double norm_dw, bool* degenerate = nullptr);

// Cosine between the two update vectors; 0 if either has zero norm.
template <typename T>
double path_cosine(std::span<const T> delta_d, std::span<const T> delta_w) {
    double dot = 0.0, nd = 0.0, nw = 0.0;
    for (std::size_t i = 0; i < delta_d.size(); ++i) {
        dot += static_cast<double>(delta_d[i]) * static_cast<double>(delta_w[i]);
        nd += static_cast<double>(delta_d[i]) * static_cast<double>(delta_d[i]);
        nw += static_cast<double>(delta_w[i]) * static_cast<double>(delta_w[i]);
    }
    if (nd == 0.0 || nw == 0.0) return 0.0;
    const double c = dot / (std::sqrt(nd) * std::sqrt(nw));
    return std::clamp(c, -1.0, 1.0);
}

// Text shown for a token id: the byte itself for byte-level vocabularies.
std::string token_text(int token_id, int vocab);

// ---------------------------------------------------------------- trace files

struct TraceHeader {
    std::string config_hash;
    int K = 1;
    int L = 1;
    int vocab = 256;
    std::string corpus;
    std::int64_t sequences = 0;
    nlohmann::json model_config;
};

struct TraceSet {
    TraceHeader header;
    std::vector<RoutingRecord> records;
};

// Writes <dir>/header.json and <dir>/traces.csv.
void write_trace(const std::filesystem::path& dir, const TraceSet& traces);
TraceSet read_trace(const std::filesystem::path& dir);

// CSV column names in file order.
std::vector<std::string> trace_columns(int K);

// ---------------------------------------------------------------- analyses

struct LayerStat {
    double mean_rho_d = 0.0;
    double mean_cos_dw = 0.0;
    std::int64_t count = 0;
};

struct LayerProfile {
    // One entry per layer; nullopt for layers without records.
    std::vector<std::optional<LayerStat>> layers;
    std::vector<std::string> warnings;
};

LayerProfile layer_profile(std::span<const RoutingRecord> records, int L);

struct LayerBand {
    std::string name;
    int first = 0;
    int last = 0;  // inclusive
};

// early/middle/late bands; the 16-layer split is L0-4, L5-9, L10-15.
std::array<LayerBand, 3> layer_bands(int L);

struct DensityHistogram {
    int bins = 0;
    // counts[gd_bin * bins + gw_bin]; g_w on the x axis, g_d on the y axis.
    std::vector<std::int64_t> counts;
    // Same layout over (log(1 + g_w |Δw|), log(1 + g_d |Δd|)) in [0, mag_max].
    std::vector<std::int64_t> magnitude_counts;
    double mag_max = 0.0;
    std::int64_t total = 0;
};

// Upper edge for the magnitude axes shared by every partition of `records`.
double magnitude_range(std::span<const RoutingRecord> records);

// Histogram of the records whose layer lies in [first_layer, last_layer].
DensityHistogram gate_density(std::span<const RoutingRecord> records, int first_layer, int last_layer, int bins,
                              double mag_max);

enum class BuiltinTag { ARITH, PUNCT, SPACE, WORD, OTHER };
std::string to_string(BuiltinTag tag);

struct TokenTag {
    int token_index = 0;
    std::string tag;
};

// Character span [begin, end) of the concatenated token text with a tag.
struct TagSpan {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::string tag;
};

// Rule tagger with optional external spans that override by largest overlap.
std::vector<TokenTag> tag_tokens(std::span<const std::string> tokens,
                                 const std::optional<std::vector<TagSpan>>& external = std::nullopt);

// External tag file: one "sequence_id<TAB>begin<TAB>end<TAB>tag" span per line.
std::vector<std::pair<std::int64_t, TagSpan>> read_tag_file(const std::filesystem::path& path);

struct TagProfile {
    std::vector<std::string> tags;
    // mean_rho[tag][layer]; nullopt where the tag never occurs at that layer.
    std::vector<std::vector<std::optional<double>>> mean_rho;
    std::vector<std::int64_t> counts;
};

TagProfile tag_profile(std::span<const RoutingRecord> records, int L,
                       const std::vector<std::pair<std::int64_t, TagSpan>>& external = {});

struct AnchorAlignment {
    int window = 0;
    // diff[layer][offset + window]; nullopt where either corpus lacks coverage.
    std::vector<std::vector<std::optional<double>>> diff;
    std::vector<std::vector<std::optional<double>>> mean_a;
    std::vector<std::vector<std::optional<double>>> mean_b;
    std::int64_t included_a = 0;
    std::int64_t included_b = 0;
    std::int64_t excluded_a = 0;
    std::int64_t excluded_b = 0;
};

// Mean deep share around the first occurrence of `anchor_text` in every
// sequence, differenced as corpus a minus corpus b.
AnchorAlignment anchor_align(std::span<const RoutingRecord> traces_a, std::span<const RoutingRecord> traces_b,
                             const std::string& anchor_text, int window, int L);

}  // namespace dualpath
