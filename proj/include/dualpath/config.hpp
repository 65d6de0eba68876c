#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include <json.hpp>

namespace dualpath {

enum class VariantKind { DualPath, PureLoop, PureWide };

std::string to_string(VariantKind kind);
// Accepts "dual", "loop", "wide" and the spelled-out names.
VariantKind parse_variant(std::string_view text);

// Block layout of every layer. PureLoop uses d_ffn_deep; PureWide uses
// d_ffn_wide and K = 1.
struct BlockVariant {
    VariantKind kind = VariantKind::DualPath;
    int K = 1;
    int d_ffn_deep = 0;
    int d_ffn_wide = 0;

    static BlockVariant dual(int K, int d_ffn_deep, int d_ffn_wide) {
        return {VariantKind::DualPath, K, d_ffn_deep, d_ffn_wide};
    }
    static BlockVariant loop(int K, int d_ffn) { return {VariantKind::PureLoop, K, d_ffn, 0}; }
    static BlockVariant wide(int d_ffn_wide) { return {VariantKind::PureWide, 1, 0, d_ffn_wide}; }

    bool has_deep() const { return kind != VariantKind::PureWide; }
    bool has_wide() const { return kind != VariantKind::PureLoop; }
    bool has_gate() const { return kind == VariantKind::DualPath; }

    void validate() const;
};

struct BackboneConfig {
    int L = 4;
    int d = 64;
    int h_q = 4;
    int h_kv = 4;
    int vocab = 256;
    int T_max = 128;
    double rope_base = 10000.0;
    bool tie_embeddings = false;

    int n_rep() const { return h_q / h_kv; }
    int head_dim() const { return d / h_q; }
    int kv_width() const { return h_kv * head_dim(); }

    void validate() const;

    // L=16, d=768, 12 heads, 50,304 tokens, 4096 context.
    static BackboneConfig reference();
    static BackboneConfig desk() { return {}; }
};

struct ModelConfig {
    BackboneConfig backbone;
    BlockVariant variant;
    double init_std = 0.02;
    double gain_logit_init = -7.0;
    double router_bias_init = -2.0;
    double norm_eps = 1e-6;
    std::uint64_t seed = 0;

    void validate() const;
};

void to_json(nlohmann::json& j, const BlockVariant& v);
void from_json(const nlohmann::json& j, BlockVariant& v);
void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Stable 64-bit FNV-1a digest of the canonical JSON form, as 16 hex digits.
std::string config_hash(const ModelConfig& config);

}  // namespace dualpath
