#include "dualpath/config.hpp"

#include <cstdio>

#include "dualpath/errors.hpp"

namespace dualpath {

std::string to_string(VariantKind kind) {
    switch (kind) {
        case VariantKind::DualPath: return "dual";
        case VariantKind::PureLoop: return "loop";
        case VariantKind::PureWide: return "wide";
    }
    return "unknown";
}

VariantKind parse_variant(std::string_view text) {
    if (text == "dual" || text == "DualPath" || text == "dualpath") return VariantKind::DualPath;
    if (text == "loop" || text == "PureLoop" || text == "pureloop") return VariantKind::PureLoop;
    if (text == "wide" || text == "PureWide" || text == "purewide") return VariantKind::PureWide;
    throw ConfigError("unknown variant '" + std::string(text) + "' (expected dual, loop or wide)");
}

void BlockVariant::validate() const {
    if (K < 1) throw ConfigError("recursion depth K must be >= 1");
    if (kind == VariantKind::PureWide && K != 1) throw ConfigError("PureWide blocks have K = 1");
    auto check = [](int w, const char* name) {
        if (w <= 0 || w % 64 != 0) {
            throw ConfigError(std::string(name) + " must be a positive multiple of 64, got " + std::to_string(w));
        }
    };
    if (has_deep()) check(d_ffn_deep, "d_ffn_deep");
    if (has_wide()) check(d_ffn_wide, "d_ffn_wide");
}

void BackboneConfig::validate() const {
    if (L < 1 || d < 1 || h_q < 1 || h_kv < 1 || vocab < 1 || T_max < 1) {
        throw ConfigError("backbone dimensions must be positive");
    }
    if (d % h_q != 0) throw ConfigError("d must be divisible by h_q");
    if (h_q % h_kv != 0) throw ConfigError("h_q must be divisible by h_kv");
    if (head_dim() % 2 != 0) throw ConfigError("head dimension must be even for rotary encoding");
    if (!(rope_base > 1.0)) throw ConfigError("rope_base must exceed 1");
}

BackboneConfig BackboneConfig::reference() {
    BackboneConfig c;
    c.L = 16;
    c.d = 768;
    c.h_q = 12;
    c.h_kv = 12;
    c.vocab = 50304;
    c.T_max = 4096;
    return c;
}

void ModelConfig::validate() const {
    backbone.validate();
    variant.validate();
    if (!(init_std > 0.0)) throw ConfigError("init_std must be positive");
    if (!(norm_eps > 0.0)) throw ConfigError("norm_eps must be positive");
}

void to_json(nlohmann::json& j, const BlockVariant& v) {
    j = nlohmann::json{{"kind", to_string(v.kind)}, {"K", v.K}, {"d_ffn_deep", v.d_ffn_deep}, {"d_ffn_wide", v.d_ffn_wide}};
}

void from_json(const nlohmann::json& j, BlockVariant& v) {
    v.kind = parse_variant(j.at("kind").get<std::string>());
    v.K = j.at("K").get<int>();
    v.d_ffn_deep = j.at("d_ffn_deep").get<int>();
    v.d_ffn_wide = j.at("d_ffn_wide").get<int>();
}

void to_json(nlohmann::json& j, const BackboneConfig& c) {
    j = nlohmann::json{{"L", c.L},         {"d", c.d},         {"h_q", c.h_q},
                       {"h_kv", c.h_kv},   {"vocab", c.vocab}, {"T_max", c.T_max},
                       {"rope_base", c.rope_base}, {"tie_embeddings", c.tie_embeddings}};
}

void from_json(const nlohmann::json& j, BackboneConfig& c) {
    c.L = j.at("L").get<int>();
    c.d = j.at("d").get<int>();
    c.h_q = j.at("h_q").get<int>();
    c.h_kv = j.at("h_kv").get<int>();
    c.vocab = j.at("vocab").get<int>();
    c.T_max = j.at("T_max").get<int>();
    c.rope_base = j.at("rope_base").get<double>();
    c.tie_embeddings = j.at("tie_embeddings").get<bool>();
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"backbone", c.backbone},
                       {"variant", c.variant},
                       {"init_std", c.init_std},
                       {"gain_logit_init", c.gain_logit_init},
                       {"router_bias_init", c.router_bias_init},
                       {"norm_eps", c.norm_eps},
                       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.backbone = j.at("backbone").get<BackboneConfig>();
    c.variant = j.at("variant").get<BlockVariant>();
    c.init_std = j.at("init_std").get<double>();
    c.gain_logit_init = j.at("gain_logit_init").get<double>();
    c.router_bias_init = j.at("router_bias_init").get<double>();
    c.norm_eps = j.at("norm_eps").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
}

std::string config_hash(const ModelConfig& config) {
    const std::string canonical = nlohmann::json(config).dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : canonical) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace dualpath
