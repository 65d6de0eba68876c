#include "dualpath/routing.hpp"

#include <cctype>
#include <cstdio>
#include <fstream>
#include <map>
#include <regex>
#include <sstream>

#include "dualpath/errors.hpp"

namespace dualpath {

double deep_share(double g_d, double g_w, double norm_dd, double norm_dw, bool* degenerate) {
    const double deep = g_d * norm_dd;
    const double denom = deep + g_w * norm_dw;
    if (degenerate) *degenerate = denom == 0.0;
    if (denom == 0.0) return 0.5;
    return deep / denom;
}

std::string token_text(int token_id, int vocab) {
    if (vocab <= 256 && token_id >= 0 && token_id < 256) return std::string(1, static_cast<char>(token_id));
    return "<" + std::to_string(token_id) + ">";
}

// ---------------------------------------------------------------- trace files

std::vector<std::string> trace_columns(int K) {
    std::vector<std::string> cols{"sequence_id", "layer",  "token_index", "token_id", "g_d",
                                  "g_w",         "norm_dd", "norm_dw",    "cos_dw",   "rho_d"};
    for (int k = 1; k < K; ++k) cols.push_back("q_" + std::to_string(k));
    return cols;
}

void write_trace(const std::filesystem::path& dir, const TraceSet& traces) {
    std::filesystem::create_directories(dir);
    const TraceHeader& h = traces.header;
    nlohmann::json header{{"config_hash", h.config_hash}, {"K", h.K},
                          {"L", h.L},                     {"vocab", h.vocab},
                          {"corpus", h.corpus},           {"sequences", h.sequences},
                          {"columns", trace_columns(h.K)}, {"model_config", h.model_config}};
    std::ofstream hj(dir / "header.json");
    if (!hj) throw FormatError("cannot write " + (dir / "header.json").string());
    hj << header.dump(2) << "\n";

    std::ofstream csv(dir / "traces.csv");
    if (!csv) throw FormatError("cannot write " + (dir / "traces.csv").string());
    const auto cols = trace_columns(h.K);
    for (std::size_t i = 0; i < cols.size(); ++i) csv << (i ? "," : "") << cols[i];
    csv << "\n";
    char buf[64];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    for (const RoutingRecord& r : traces.records) {
        if (static_cast<int>(r.q_steps.size()) != h.K - 1) {
            throw FormatError("trace record carries " + std::to_string(r.q_steps.size()) + " router weights, expected " +
                              std::to_string(h.K - 1));
        }
        csv << r.sequence_id << ',' << r.layer << ',' << r.token_index << ',' << r.token_id << ',' << num(r.g_d)
            << ',' << num(r.g_w) << ',' << num(r.norm_dd) << ',' << num(r.norm_dw) << ',' << num(r.cos_dw) << ','
            << num(r.rho_d);
        for (double q : r.q_steps) csv << ',' << num(q);
        csv << "\n";
    }
}

TraceSet read_trace(const std::filesystem::path& dir) {
    TraceSet out;
    std::ifstream hj(dir / "header.json");
    if (!hj) throw FormatError("missing " + (dir / "header.json").string());
    nlohmann::json header;
    try {
        hj >> header;
        out.header.config_hash = header.at("config_hash").get<std::string>();
        out.header.K = header.at("K").get<int>();
        out.header.L = header.at("L").get<int>();
        out.header.vocab = header.value("vocab", 256);
        out.header.corpus = header.value("corpus", std::string{});
        out.header.sequences = header.value("sequences", std::int64_t{0});
        out.header.model_config = header.value("model_config", nlohmann::json{});
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad trace header: ") + e.what());
    }

    std::ifstream csv(dir / "traces.csv");
    if (!csv) throw FormatError("missing " + (dir / "traces.csv").string());
    const auto cols = trace_columns(out.header.K);
    std::string line;
    std::getline(csv, line);
    {
        std::string expected;
        for (std::size_t i = 0; i < cols.size(); ++i) expected += (i ? "," : "") + cols[i];
        if (line != expected) throw FormatError("trace CSV header mismatch: '" + line + "'");
    }
    std::size_t lineno = 1;
    while (std::getline(csv, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, ',')) fields.push_back(f);
        if (fields.size() != cols.size()) {
            throw FormatError("trace CSV line " + std::to_string(lineno) + ": expected " + std::to_string(cols.size()) +
                              " fields");
        }
        RoutingRecord r;
        try {
            r.sequence_id = std::stoll(fields[0]);
            r.layer = std::stoi(fields[1]);
            r.token_index = std::stoi(fields[2]);
            r.token_id = std::stoi(fields[3]);
            r.g_d = std::stod(fields[4]);
            r.g_w = std::stod(fields[5]);
            r.norm_dd = std::stod(fields[6]);
            r.norm_dw = std::stod(fields[7]);
            r.cos_dw = std::stod(fields[8]);
            r.rho_d = std::stod(fields[9]);
            for (std::size_t k = 10; k < fields.size(); ++k) r.q_steps.push_back(std::stod(fields[k]));
        } catch (const std::exception&) {
            throw FormatError("trace CSV line " + std::to_string(lineno) + ": unparsable number");
        }
        deep_share(r.g_d, r.g_w, r.norm_dd, r.norm_dw, &r.degenerate);
        r.token_text = token_text(r.token_id, out.header.vocab);
        out.records.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------- layer profile

LayerProfile layer_profile(std::span<const RoutingRecord> records, int L) {
    if (records.empty()) throw InputError("layer_profile: empty trace set");
    std::vector<double> rho(L, 0.0), cos(L, 0.0);
    std::vector<std::int64_t> n(L, 0);
    for (const RoutingRecord& r : records) {
        if (r.layer < 0 || r.layer >= L) throw InputError("layer_profile: record layer out of range");
        rho[r.layer] += r.rho_d;
        cos[r.layer] += r.cos_dw;
        ++n[r.layer];
    }
    LayerProfile p;
    for (int l = 0; l < L; ++l) {
        if (n[l] == 0) {
            p.layers.push_back(std::nullopt);
            p.warnings.push_back("layer " + std::to_string(l) + " has no records; excluded");
            continue;
        }
        p.layers.push_back(LayerStat{rho[l] / static_cast<double>(n[l]), cos[l] / static_cast<double>(n[l]), n[l]});
    }
    return p;
}

std::array<LayerBand, 3> layer_bands(int L) {
    if (L < 1) throw InputError("layer_bands: L must be positive");
    if (L == 16) return {LayerBand{"early", 0, 4}, LayerBand{"middle", 5, 9}, LayerBand{"late", 10, 15}};
    const int third = L / 3;
    const int middle = L - 2 * third;
    return {LayerBand{"early", 0, third - 1}, LayerBand{"middle", third, third + middle - 1},
            LayerBand{"late", third + middle, L - 1}};
}

// ---------------------------------------------------------------- gate density

namespace {

int bin_of(double v, double hi, int bins) {
    if (!(hi > 0.0)) return 0;
    int b = static_cast<int>(std::floor(v / hi * bins));
    return std::clamp(b, 0, bins - 1);
}

double wide_mag(const RoutingRecord& r) { return std::log1p(r.g_w * r.norm_dw); }
double deep_mag(const RoutingRecord& r) { return std::log1p(r.g_d * r.norm_dd); }

}  // namespace

double magnitude_range(std::span<const RoutingRecord> records) {
    double hi = 0.0;
    for (const RoutingRecord& r : records) hi = std::max({hi, wide_mag(r), deep_mag(r)});
    return hi;
}

DensityHistogram gate_density(std::span<const RoutingRecord> records, int first_layer, int last_layer, int bins,
                              double mag_max) {
    if (bins < 2) throw InputError("gate_density: bins must be >= 2");
    DensityHistogram h;
    h.bins = bins;
    h.mag_max = mag_max;
    h.counts.assign(static_cast<std::size_t>(bins) * bins, 0);
    h.magnitude_counts.assign(static_cast<std::size_t>(bins) * bins, 0);
    for (const RoutingRecord& r : records) {
        if (r.layer < first_layer || r.layer > last_layer) continue;
        ++h.counts[bin_of(r.g_d, 1.0, bins) * bins + bin_of(r.g_w, 1.0, bins)];
        ++h.magnitude_counts[bin_of(deep_mag(r), mag_max, bins) * bins + bin_of(wide_mag(r), mag_max, bins)];
        ++h.total;
    }
    return h;
}

// ---------------------------------------------------------------- tagging

std::string to_string(BuiltinTag tag) {
    switch (tag) {
        case BuiltinTag::ARITH: return "ARITH";
        case BuiltinTag::PUNCT: return "PUNCT";
        case BuiltinTag::SPACE: return "SPACE";
        case BuiltinTag::WORD: return "WORD";
        case BuiltinTag::OTHER: return "OTHER";
    }
    return "OTHER";
}

namespace {

std::vector<BuiltinTag> character_tags(const std::string& text) {
    static const std::regex arith(R"([0-9]+|<<|>>|####|[-+*/=])");
    std::vector<BuiltinTag> tags(text.size(), BuiltinTag::OTHER);
    for (std::size_t i = 0; i < text.size(); ++i) {
        const auto c = static_cast<unsigned char>(text[i]);
        if (c >= 0x80) continue;
        if (std::isspace(c)) tags[i] = BuiltinTag::SPACE;
        else if (std::isalpha(c)) tags[i] = BuiltinTag::WORD;
        else if (std::ispunct(c)) tags[i] = BuiltinTag::PUNCT;
    }
    for (auto it = std::sregex_iterator(text.begin(), text.end(), arith); it != std::sregex_iterator(); ++it) {
        const auto begin = static_cast<std::size_t>(it->position());
        for (std::size_t i = begin; i < begin + static_cast<std::size_t>(it->length()); ++i) tags[i] = BuiltinTag::ARITH;
    }
    return tags;
}

}  // namespace

std::vector<TokenTag> tag_tokens(std::span<const std::string> tokens, const std::optional<std::vector<TagSpan>>& external) {
    std::string text;
    std::vector<std::size_t> starts;
    for (const auto& t : tokens) {
        starts.push_back(text.size());
        text += t;
    }
    const auto chars = character_tags(text);
    std::vector<TokenTag> out;
    out.reserve(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const std::size_t b = starts[i], e = b + tokens[i].size();
        std::array<int, 5> votes{};
        for (std::size_t c = b; c < e; ++c) ++votes[static_cast<int>(chars[c])];
        int best = static_cast<int>(BuiltinTag::OTHER);
        for (int k = 0; k < 5; ++k)
            if (votes[k] > votes[best] || (votes[k] == votes[best] && votes[k] > 0 && k < best)) best = k;
        std::string tag = to_string(static_cast<BuiltinTag>(best));
        if (external) {
            std::size_t best_overlap = 0;
            for (const TagSpan& s : *external) {
                const std::size_t lo = std::max(b, s.begin), hi = std::min(e, s.end);
                if (hi > lo && hi - lo > best_overlap) {
                    best_overlap = hi - lo;
                    tag = s.tag;
                }
            }
        }
        out.push_back(TokenTag{static_cast<int>(i), std::move(tag)});
    }
    return out;
}

std::vector<std::pair<std::int64_t, TagSpan>> read_tag_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open tag file " + path.string());
    std::vector<std::pair<std::int64_t, TagSpan>> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::stringstream ss(line);
        std::int64_t seq = 0;
        long long begin = 0, end = 0;
        std::string tag, extra;
        if (!(ss >> seq >> begin >> end >> tag) || (ss >> extra) || begin < 0 || end < begin) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) +
                              ": expected 'sequence_id begin end tag' with 0 <= begin <= end");
        }
        out.emplace_back(seq, TagSpan{static_cast<std::size_t>(begin), static_cast<std::size_t>(end), tag});
    }
    return out;
}

namespace {

struct SequenceView {
    std::vector<std::string> tokens;  // by token index
    std::vector<const RoutingRecord*> records;
};

std::map<std::int64_t, SequenceView> group_sequences(std::span<const RoutingRecord> records) {
    std::map<std::int64_t, SequenceView> seqs;
    for (const RoutingRecord& r : records) {
        SequenceView& s = seqs[r.sequence_id];
        if (r.token_index < 0) throw InputError("negative token index in trace");
        if (s.tokens.size() <= static_cast<std::size_t>(r.token_index)) s.tokens.resize(r.token_index + 1);
        s.tokens[r.token_index] = r.token_text;
        s.records.push_back(&r);
    }
    return seqs;
}

}  // namespace

TagProfile tag_profile(std::span<const RoutingRecord> records, int L,
                       const std::vector<std::pair<std::int64_t, TagSpan>>& external) {
    std::map<std::string, std::pair<std::vector<double>, std::vector<std::int64_t>>> acc;
    for (auto& [seq_id, seq] : group_sequences(records)) {
        std::optional<std::vector<TagSpan>> spans;
        for (const auto& [sid, span] : external) {
            if (sid != seq_id) continue;
            if (!spans) spans.emplace();
            spans->push_back(span);
        }
        const auto tags = tag_tokens(seq.tokens, spans);
        for (const RoutingRecord* r : seq.records) {
            auto& [sum, n] = acc[tags[r->token_index].tag];
            if (sum.empty()) {
                sum.assign(L, 0.0);
                n.assign(L, 0);
            }
            if (r->layer < 0 || r->layer >= L) throw InputError("tag_profile: record layer out of range");
            sum[r->layer] += r->rho_d;
            ++n[r->layer];
        }
    }
    TagProfile p;
    for (auto& [tag, sn] : acc) {
        p.tags.push_back(tag);
        std::vector<std::optional<double>> row(L);
        std::int64_t total = 0;
        for (int l = 0; l < L; ++l) {
            if (sn.second[l] > 0) row[l] = sn.first[l] / static_cast<double>(sn.second[l]);
            total += sn.second[l];
        }
        p.mean_rho.push_back(std::move(row));
        p.counts.push_back(total);
    }
    return p;
}

// ---------------------------------------------------------------- anchor alignment

namespace {

struct AnchorMeans {
    std::vector<std::vector<std::optional<double>>> mean;
    std::int64_t included = 0;
    std::int64_t excluded = 0;
};

AnchorMeans anchor_means(std::span<const RoutingRecord> records, const std::string& anchor, int window, int L) {
    const int width = 2 * window + 1;
    std::vector<std::vector<double>> sum(L, std::vector<double>(width, 0.0));
    std::vector<std::vector<std::int64_t>> n(L, std::vector<std::int64_t>(width, 0));
    AnchorMeans out;
    for (auto& [seq_id, seq] : group_sequences(records)) {
        std::string text;
        std::vector<std::size_t> starts;
        for (const auto& t : seq.tokens) {
            starts.push_back(text.size());
            text += t;
        }
        const std::size_t pos = text.find(anchor);
        if (anchor.empty() || pos == std::string::npos) {
            ++out.excluded;
            continue;
        }
        ++out.included;
        // Token whose span contains the first character of the match.
        int anchor_token = 0;
        for (std::size_t i = 0; i < starts.size(); ++i)
            if (starts[i] <= pos && !seq.tokens[i].empty()) anchor_token = static_cast<int>(i);
        for (const RoutingRecord* r : seq.records) {
            const int off = r->token_index - anchor_token;
            if (off < -window || off > window) continue;
            if (r->layer < 0 || r->layer >= L) throw InputError("anchor_align: record layer out of range");
            sum[r->layer][off + window] += r->rho_d;
            ++n[r->layer][off + window];
        }
    }
    out.mean.assign(L, std::vector<std::optional<double>>(width));
    for (int l = 0; l < L; ++l)
        for (int o = 0; o < width; ++o)
            if (n[l][o] > 0) out.mean[l][o] = sum[l][o] / static_cast<double>(n[l][o]);
    return out;
}

}  // namespace

AnchorAlignment anchor_align(std::span<const RoutingRecord> traces_a, std::span<const RoutingRecord> traces_b,
                             const std::string& anchor_text, int window, int L) {
    if (window < 0) throw InputError("anchor_align: window must be nonnegative");
    AnchorMeans a = anchor_means(traces_a, anchor_text, window, L);
    AnchorMeans b = anchor_means(traces_b, anchor_text, window, L);
    AnchorAlignment out;
    out.window = window;
    out.included_a = a.included;
    out.included_b = b.included;
    out.excluded_a = a.excluded;
    out.excluded_b = b.excluded;
    out.diff.assign(L, std::vector<std::optional<double>>(2 * window + 1));
    for (int l = 0; l < L; ++l)
        for (int o = 0; o < 2 * window + 1; ++o)
            if (a.mean[l][o] && b.mean[l][o]) out.diff[l][o] = *a.mean[l][o] - *b.mean[l][o];
    out.mean_a = std::move(a.mean);
    out.mean_b = std::move(b.mean);
    return out;
}

}  // namespace dualpath
