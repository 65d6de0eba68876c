#include "dualpath/ablation.hpp"

#include <charconv>
#include <cstdio>
#include <sstream>

#include "dualpath/errors.hpp"

namespace dualpath {

namespace {

double parse_number(const std::string& s, const std::string& spec) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != s.size()) throw InputError("ablation spec '" + spec + "': bad number '" + s + "'");
    return v;
}

template <typename I>
I parse_integer(const std::string& s, const std::string& spec) {
    I v{};
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size()) {
        throw InputError("ablation spec '" + spec + "': bad integer '" + s + "'");
    }
    return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, sep)) out.push_back(part);
    if (!s.empty() && s.back() == sep) out.emplace_back();
    return out;
}

std::string format_gate(const std::optional<double>& g) {
    if (!g) return "*";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", *g);
    return buf;
}

}  // namespace

AblationSpec AblationSpec::parse(const std::string& text) {
    AblationSpec spec;
    if (text.empty() || text == "none") return spec;
    const auto colon = text.find(':');
    if (colon == std::string::npos) throw InputError("ablation spec '" + text + "': expected kind:arguments");
    const std::string kind = text.substr(0, colon);
    std::string args = text.substr(colon + 1);
    if (kind == "force-loops") {
        spec.kind = Kind::ForceLoops;
        spec.loops = parse_integer<int>(args, text);
    } else if (kind == "gates") {
        spec.kind = Kind::GateOverride;
        const auto at = args.find('@');
        if (at != std::string::npos) {
            const std::string scope = args.substr(at + 1);
            args = args.substr(0, at);
            if (scope.rfind("layers=", 0) != 0) throw InputError("ablation spec '" + text + "': expected @layers=...");
            for (const auto& l : split(scope.substr(7), ',')) spec.gates.layers.push_back(parse_integer<int>(l, text));
        }
        const auto values = split(args, ',');
        if (values.size() != 2) throw InputError("ablation spec '" + text + "': expected gates:GD,GW");
        if (values[0] != "*") spec.gates.g_d = parse_number(values[0], text);
        if (values[1] != "*") spec.gates.g_w = parse_number(values[1], text);
    } else if (kind == "shuffle") {
        spec.kind = Kind::ShuffleGates;
        if (args.rfind("seed=", 0) != 0) throw InputError("ablation spec '" + text + "': expected shuffle:seed=N");
        spec.seed = parse_integer<std::uint64_t>(args.substr(5), text);
    } else {
        throw InputError("ablation spec '" + text + "': unknown kind '" + kind + "'");
    }
    spec.validate();
    return spec;
}

void AblationSpec::validate() const {
    switch (kind) {
        case Kind::None: break;
        case Kind::ForceLoops:
            if (loops < 1) throw InputError("force-loops needs K' >= 1");
            break;
        case Kind::GateOverride:
            if (!gates.g_d && !gates.g_w) throw InputError("gate override needs at least one fixed value");
            for (const auto& g : {gates.g_d, gates.g_w})
                if (g && !(*g >= 0.0 && *g <= 1.0)) throw InputError("gate override values must lie in [0,1]");
            break;
        case Kind::ShuffleGates: break;
    }
}

std::string AblationSpec::to_string() const {
    switch (kind) {
        case Kind::None: return "none";
        case Kind::ForceLoops: return "force-loops:" + std::to_string(loops);
        case Kind::GateOverride: {
            std::string s = "gates:" + format_gate(gates.g_d) + "," + format_gate(gates.g_w);
            if (!gates.layers.empty()) {
                s += "@layers=";
                for (std::size_t i = 0; i < gates.layers.size(); ++i) s += (i ? "," : "") + std::to_string(gates.layers[i]);
            }
            return s;
        }
        case Kind::ShuffleGates: return "shuffle:seed=" + std::to_string(seed);
    }
    return "none";
}

ModelView base_view(const ParameterStore<float>& store, const ModelConfig& config) {
    return ModelView{&store, config, {}};
}

ModelView force_loops(ModelView view, int loops) {
    if (loops < 1) throw InputError("force-loops needs K' >= 1");
    view.interventions.force_loops = loops;
    return view;
}

ModelView override_gates(ModelView view, const GateOverride& gates) {
    AblationSpec spec;
    spec.kind = AblationSpec::Kind::GateOverride;
    spec.gates = gates;
    spec.validate();
    view.interventions.gate_override = gates;
    return view;
}

ModelView shuffle_gates(ModelView view, std::uint64_t seed) {
    view.interventions.shuffle_seed = seed;
    return view;
}

ModelView apply(ModelView view, const AblationSpec& spec) {
    switch (spec.kind) {
        case AblationSpec::Kind::None: return view;
        case AblationSpec::Kind::ForceLoops: return force_loops(std::move(view), spec.loops);
        case AblationSpec::Kind::GateOverride: return override_gates(std::move(view), spec.gates);
        case AblationSpec::Kind::ShuffleGates: return shuffle_gates(std::move(view), spec.seed);
    }
    return view;
}

NllResult evaluate_ce(const ModelView& view, std::span<const int> tokens, int seq_len, int batch_size) {
    if (tokens.empty()) throw InputError("evaluate_ce: empty corpus");
    if (!view.store) throw ConfigError("evaluate_ce: view has no parameters");
    const Interventions* iv = view.interventions.empty() ? nullptr : &view.interventions;
    return evaluate_nll(*view.store, view.config, tokens, seq_len, batch_size, iv);
}

void to_json(nlohmann::json& j, const AblationReport& r) {
    j = {{"spec", r.spec}, {"loss", r.loss},     {"delta", r.delta},
         {"baseline", r.baseline}, {"tokens", r.tokens}, {"notes", r.notes}};
}

AblationReport run_ablation(const ParameterStore<float>& store, const ModelConfig& config, std::span<const int> tokens,
                            const AblationSpec& spec, int seq_len, int batch_size) {
    spec.validate();
    const ModelView base = base_view(store, config);
    const ModelView view = apply(base, spec);
    const NllResult b = evaluate_ce(base, tokens, seq_len, batch_size);
    const NllResult a = evaluate_ce(view, tokens, seq_len, batch_size);
    AblationReport r;
    r.spec = spec.to_string();
    r.baseline = b.mean();
    r.loss = a.mean();
    r.delta = r.loss - r.baseline;
    r.tokens = a.tokens;
    const int K = config.variant.K;
    if (spec.kind == AblationSpec::Kind::ForceLoops) {
        if (!config.variant.has_deep()) r.notes.push_back("model has no deep path; force-loops has no effect");
        if (spec.loops > K) {
            r.notes.push_back("steps " + std::to_string(K + 1) + ".." + std::to_string(spec.loops) +
                              " reuse the trained step-" + std::to_string(K) + " gain");
        }
        if (spec.loops > 1) r.notes.push_back("router step index normalized by K'-1 = " + std::to_string(spec.loops - 1));
    }
    if ((spec.kind == AblationSpec::Kind::GateOverride || spec.kind == AblationSpec::Kind::ShuffleGates) &&
        !config.variant.has_gate()) {
        r.notes.push_back("model has no gates; spec has no effect");
    }
    return r;
}

}  // namespace dualpath
