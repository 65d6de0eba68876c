#include "dualpath/run_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "dualpath/errors.hpp"

namespace dualpath {

namespace pt = boost::property_tree;

namespace {

class Section {
public:
    Section(const pt::ptree* tree, std::string name) : tree_(tree), name_(std::move(name)) {}

    template <typename V>
    void read(const std::string& key, V& out) {
        seen_.insert(key);
        if (!tree_) return;
        auto child = tree_->get_child_optional(key);
        if (!child) return;
        const std::string raw = child->data();
        if constexpr (std::is_same_v<V, bool>) {
            if (raw == "true" || raw == "1") out = true;
            else if (raw == "false" || raw == "0") out = false;
            else throw ConfigError("[" + name_ + "] " + key + ": expected true or false, got '" + raw + "'");
        } else if constexpr (std::is_same_v<V, std::string>) {
            out = raw;
        } else {
            auto v = child->get_value_optional<V>();
            if (!v) throw ConfigError("[" + name_ + "] " + key + ": cannot parse '" + raw + "'");
            out = *v;
        }
    }

    bool has(const std::string& key) const { return tree_ && tree_->get_child_optional(key).has_value(); }

    void reject_unknown() const {
        if (!tree_) return;
        for (const auto& [key, value] : *tree_)
            if (!seen_.contains(key)) throw ConfigError("[" + name_ + "] unknown key '" + key + "'");
    }

private:
    const pt::ptree* tree_;
    std::string name_;
    std::set<std::string> seen_;
};

}  // namespace

RunConfig parse_run_config(const std::string& text) {
    pt::ptree tree;
    try {
        std::istringstream in(text);
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    for (const auto& [name, section] : tree) {
        if (name != "model" && name != "train" && name != "budget") throw ConfigError("config: unknown section [" + name + "]");
    }
    auto section = [&](const std::string& name) -> const pt::ptree* {
        auto child = tree.get_child_optional(name);
        return child ? &*child : nullptr;
    };

    RunConfig rc;
    Section model(section("model"), "model");
    BackboneConfig& b = rc.model.backbone;
    model.read("L", b.L);
    model.read("d", b.d);
    model.read("h_q", b.h_q);
    model.read("h_kv", b.h_kv);
    model.read("vocab", b.vocab);
    model.read("T_max", b.T_max);
    model.read("rope_base", b.rope_base);
    model.read("tie_embeddings", b.tie_embeddings);
    std::string variant = to_string(rc.model.variant.kind);
    model.read("variant", variant);
    rc.model.variant.kind = parse_variant(variant);
    model.read("K", rc.model.variant.K);
    model.read("d_ffn_deep", rc.model.variant.d_ffn_deep);
    model.read("d_ffn_wide", rc.model.variant.d_ffn_wide);
    model.read("init_std", rc.model.init_std);
    model.read("gain_logit_init", rc.model.gain_logit_init);
    model.read("router_bias_init", rc.model.router_bias_init);
    model.read("norm_eps", rc.model.norm_eps);
    model.read("seed", rc.model.seed);
    model.reject_unknown();

    if (const pt::ptree* bt = section("budget")) {
        Section budget(bt, "budget");
        BudgetQuery q;
        q.kind = rc.model.variant.kind;
        q.K = rc.model.variant.K;
        q.d = b.d;
        q.n_rep = b.n_rep();
        budget.read("F_M", q.F_M);
        budget.read("alloc_fraction", q.alloc_fraction);
        budget.reject_unknown();
        const BudgetSolution sol = solve_widths(q);
        const BlockVariant solved = sol.variant();
        // Widths given alongside a budget must agree with it.
        auto reconcile = [&](const char* key, int& field, int value) {
            if (model.has(key) && field != value) {
                throw ConfigError(std::string("[model] ") + key + " = " + std::to_string(field) +
                                  " disagrees with the [budget] solution " + std::to_string(value));
            }
            field = value;
        };
        if (solved.has_deep()) reconcile("d_ffn_deep", rc.model.variant.d_ffn_deep, solved.d_ffn_deep);
        if (solved.has_wide()) reconcile("d_ffn_wide", rc.model.variant.d_ffn_wide, solved.d_ffn_wide);
        rc.budget = q;
    }

    Section train(section("train"), "train");
    TrainConfig& t = rc.train;
    train.read("peak_lr", t.peak_lr);
    train.read("init_lr", t.init_lr);
    train.read("final_lr", t.final_lr);
    train.read("warmup_steps", t.warmup_steps);
    train.read("total_steps", t.total_steps);
    train.read("beta1", t.beta1);
    train.read("beta2", t.beta2);
    train.read("eps", t.eps);
    train.read("weight_decay", t.weight_decay);
    train.read("batch_size", t.batch_size);
    train.read("seq_len", t.seq_len);
    train.read("seed", t.seed);
    train.read("precision", t.precision);
    train.read("grad_clip", t.grad_clip);
    train.read("checkpoint_every", t.checkpoint_every);
    train.read("eval_fraction", t.eval_fraction);
    train.reject_unknown();

    rc.model.validate();
    rc.train.validate();
    return rc;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str());
}

}  // namespace dualpath
