// dualpath: width solver, parameter counter, trainer, evaluator, routing
// tracer/analyzer and ablation runner.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "dualpath/ablation.hpp"
#include "dualpath/errors.hpp"
#include "dualpath/flop_solver.hpp"
#include "dualpath/routing.hpp"
#include "dualpath/run_config.hpp"
#include "dualpath/train.hpp"

using namespace dualpath;
using nlohmann::json;

namespace {

// Accepts "80000000", "80e6", "80M".
std::int64_t parse_budget(const std::string& text) {
    std::string s = text;
    double scale = 1.0;
    if (!s.empty() && (s.back() == 'M' || s.back() == 'm')) {
        scale = 1e6;
        s.pop_back();
    }
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != s.size() || !(v > 0.0)) throw InputError("bad --budget '" + text + "'");
    return static_cast<std::int64_t>(std::llround(v * scale));
}

std::string num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// Writes to `path`, or stdout when empty.
class Output {
public:
    explicit Output(const std::string& path) {
        if (!path.empty()) {
            file_.open(path);
            if (!file_) throw InputError("cannot write " + path);
        }
    }
    std::ostream& operator*() { return file_.is_open() ? static_cast<std::ostream&>(file_) : std::cout; }

private:
    std::ofstream file_;
};

std::string optional_cell(const std::optional<double>& v) { return v ? num(*v) : std::string{}; }

// ---------------------------------------------------------------- solve / params

struct SolveArgs {
    std::string budget = "80e6";
    std::string variant = "dual";
    int K = 4;
    double alpha = 0.5;
    std::int64_t d = 768;
    std::int64_t n_rep = 1;
    std::string emit = "table";
    bool grid = false;
    // params only
    bool tie = false;
    int L = 16;
    int vocab = 50304;
    int h_q = 12;
};

std::vector<BudgetQuery> queries_of(const SolveArgs& a) {
    const std::int64_t F = parse_budget(a.budget);
    if (a.grid) return configuration_grid(F, a.d, a.n_rep);
    BudgetQuery q;
    q.F_M = F;
    q.kind = parse_variant(a.variant);
    q.K = q.kind == VariantKind::PureWide ? 1 : a.K;
    q.alloc_fraction = a.alpha;
    q.d = a.d;
    q.n_rep = a.n_rep;
    return {q};
}

ModelConfig model_for(const SolveArgs& a, const BudgetSolution& sol) {
    ModelConfig m;
    m.backbone.L = a.L;
    m.backbone.d = static_cast<int>(a.d);
    m.backbone.h_q = a.h_q;
    m.backbone.h_kv = a.h_q / static_cast<int>(a.n_rep);
    m.backbone.vocab = a.vocab;
    m.backbone.T_max = 4096;
    m.backbone.tie_embeddings = a.tie;
    m.variant = sol.variant();
    return m;
}

int run_solve(const SolveArgs& a, bool with_params) {
    json rows = json::array();
    std::ostringstream csv, table;
    csv << "config,F_M,K,alloc_fraction,d_ffn,d_ffn_wide,h_eff,h_eff_wide,realized_flops,rel_mismatch";
    if (with_params) csv << ",params_matrix,params_total,params_tied";
    csv << "\n";
    char line[256];
    std::snprintf(line, sizeof line, "%-18s %12s %8s %8s %14s %9s", "config", "F_M", "d_ffn", "d_wide", "realized",
                  "mismatch");
    table << line << (with_params ? "      params" : "") << "\n";
    for (const BudgetQuery& q : queries_of(a)) {
        const BudgetSolution sol = solve_widths(q);
        json row = sol;
        row["label"] = query_label(q);
        std::optional<ParamBreakdown> pb;
        if (with_params) {
            pb = param_count(model_for(a, sol));
            row["params"] = *pb;
        }
        rows.push_back(row);
        const std::int64_t dd = sol.deep ? sol.deep->d_ffn : 0, dw = sol.wide ? sol.wide->d_ffn : 0;
        csv << query_label(q) << ',' << q.F_M << ',' << q.K << ',' << num(q.alloc_fraction) << ','
            << (sol.deep ? std::to_string(dd) : "") << ',' << (sol.wide ? std::to_string(dw) : "") << ','
            << (sol.deep ? std::to_string(sol.deep->h_eff) : "") << ','
            << (sol.wide ? std::to_string(sol.wide->h_eff) : "") << ',' << sol.realized_flops << ','
            << num(sol.rel_mismatch);
        if (pb) csv << ',' << pb->matrix_total() << ',' << pb->total() << ',' << pb->tied_total();
        csv << "\n";
        std::snprintf(line, sizeof line, "%-18s %12lld %8s %8s %14lld %8.3f%%", query_label(q).c_str(),
                      static_cast<long long>(q.F_M), sol.deep ? std::to_string(dd).c_str() : "-",
                      sol.wide ? std::to_string(dw).c_str() : "-", static_cast<long long>(sol.realized_flops),
                      100.0 * sol.rel_mismatch);
        table << line;
        if (pb) {
            std::snprintf(line, sizeof line, " %10.1fM", static_cast<double>(a.tie ? pb->tied_total() : pb->matrix_total()) / 1e6);
            table << line;
        }
        for (const auto& w : sol.warnings) table << "  [" << w << "]";
        table << "\n";
    }
    if (a.emit == "json") std::cout << (rows.size() == 1 && !a.grid ? rows[0] : rows).dump(2) << "\n";
    else if (a.emit == "csv") std::cout << csv.str();
    else std::cout << table.str();
    return 0;
}

void add_solve_flags(CLI::App* app, SolveArgs& a) {
    app->add_option("--budget", a.budget, "F_M per token per layer (80e6, 80M, 80000000)");
    app->add_option("--variant", a.variant, "dual | loop | wide")->check(CLI::IsMember({"dual", "loop", "wide"}));
    app->add_option("--k", a.K, "recursion depth K")->check(CLI::PositiveNumber);
    app->add_option("--alpha", a.alpha, "deep share of the FFN budget (Dual)");
    app->add_option("--d", a.d, "model width")->check(CLI::PositiveNumber);
    app->add_option("--nrep", a.n_rep, "query heads per key/value head")->check(CLI::PositiveNumber);
    app->add_option("--emit", a.emit, "json | csv | table")->check(CLI::IsMember({"json", "csv", "table"}));
    app->add_flag("--grid", a.grid, "solve all 13 compared variants at --budget");
}

// ---------------------------------------------------------------- train / eval

struct TrainArgs {
    std::string config, corpus, out, resume;
    long stop_at = -1;
};

int run_train(const TrainArgs& a) {
    const RunConfig rc = load_run_config(a.config);
    if (rc.train.precision != "f32") throw ConfigError("the trainer runs in f32; set precision = f32");
    const CorpusSplit split = split_corpus(read_byte_corpus(a.corpus), rc.train.eval_fraction, rc.train.seq_len);
    TrainOptions opts;
    opts.out_dir = a.out;
    if (!a.resume.empty()) opts.resume_from = a.resume;
    if (a.stop_at >= 0) opts.stop_at = a.stop_at;
    opts.on_step = [&](const LossPoint& p) {
        if (p.step % 100 == 0 || p.step + 1 == rc.train.total_steps) {
            std::fprintf(stderr, "step %5ld  lr %.3e  loss %.4f\n", p.step, p.lr, p.loss_nats);
        }
    };
    std::fprintf(stderr, "model %s  params %zu  train bytes %zu  held-out bytes %zu\n",
                 config_hash(rc.model).c_str(), init_parameters<float>(rc.model).scalar_count(), split.train.size(),
                 split.heldout.size());
    TrainResult<float> r = train<float>(rc.model, rc.train, split.train, opts);
    const NllResult nll = evaluate_nll(r.state.params, rc.model, split.heldout, rc.train.seq_len, rc.train.batch_size);
    json out{{"step", r.state.step},
             {"heldout_bytes", nll.tokens},
             {"heldout_nats", nll.total_nats},
             {"bpb", bits_per_byte(nll.total_nats, static_cast<double>(nll.tokens))},
             {"config_hash", config_hash(rc.model)}};
    std::ofstream(std::filesystem::path(a.out) / "eval.json") << out.dump(2) << "\n";
    std::cout << out.dump(2) << "\n";
    return 0;
}

struct EvalArgs {
    std::string checkpoint, corpus, split = "all";
    int seq_len = 0, batch = 8;
};

int run_eval(const EvalArgs& a) {
    TrainConfig tc;
    const CheckpointData<float> ck = load_checkpoint<float>(a.checkpoint);
    const TrainState<float> state = from_checkpoint(ck, &tc);
    const int seq_len = a.seq_len > 0 ? a.seq_len : std::min(tc.seq_len, ck.model.backbone.T_max);
    std::vector<int> tokens = read_byte_corpus(a.corpus);
    if (a.split == "heldout") tokens = split_corpus(std::move(tokens), tc.eval_fraction, tc.seq_len).heldout;
    const NllResult nll = evaluate_nll(state.params, ck.model, tokens, seq_len, a.batch);
    json out{{"corpus", a.corpus},
             {"split", a.split},
             {"bytes", nll.tokens},
             {"total_nats", nll.total_nats},
             {"mean_nats", nll.mean()},
             {"bpb", bits_per_byte(nll.total_nats, static_cast<double>(nll.tokens))},
             {"config_hash", config_hash(ck.model)}};
    std::cout << out.dump(2) << "\n";
    return 0;
}

// ---------------------------------------------------------------- trace / analyze

struct TraceArgs {
    std::string checkpoint, input, out_dir;
};

// Blank-line-separated sequences, each cut into windows of at most T_max bytes.
std::vector<std::vector<int>> trace_sequences(const std::string& text, int T_max) {
    std::vector<std::vector<int>> seqs;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t end = text.find("\n\n", pos);
        if (end == std::string::npos) end = text.size();
        std::string block = text.substr(pos, end - pos);
        pos = end;
        while (pos < text.size() && text[pos] == '\n') ++pos;
        while (!block.empty() && block.back() == '\n') block.pop_back();
        for (std::size_t s = 0; s < block.size(); s += static_cast<std::size_t>(T_max)) {
            std::vector<int> seq;
            for (std::size_t i = s; i < std::min(block.size(), s + static_cast<std::size_t>(T_max)); ++i)
                seq.push_back(static_cast<unsigned char>(block[i]));
            seqs.push_back(std::move(seq));
        }
    }
    return seqs;
}

int run_trace(const TraceArgs& a) {
    const CheckpointData<float> ck = load_checkpoint<float>(a.checkpoint);
    const TrainState<float> state = from_checkpoint(ck);
    std::ifstream in(a.input, std::ios::binary);
    if (!in) throw InputError("cannot open " + a.input);
    std::stringstream ss;
    ss << in.rdbuf();
    const auto seqs = trace_sequences(ss.str(), ck.model.backbone.T_max);
    if (seqs.empty()) throw InputError(a.input + " holds no sequences");
    TraceSink sink;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        ForwardOptions opts;
        opts.sink = &sink;
        opts.sequence_offset = static_cast<std::int64_t>(i);
        forward_logits(state.params, ck.model, seqs[i], SequenceLayout::packed(1, seqs[i].size()), opts);
    }
    TraceSet set;
    set.header.config_hash = config_hash(ck.model);
    set.header.K = ck.model.variant.K;
    set.header.L = ck.model.backbone.L;
    set.header.vocab = ck.model.backbone.vocab;
    set.header.corpus = std::filesystem::path(a.input).filename().string();
    set.header.sequences = static_cast<std::int64_t>(seqs.size());
    set.header.model_config = ck.model;
    set.records = std::move(sink.records());
    write_trace(a.out_dir, set);
    std::fprintf(stderr, "%zu records from %zu sequences -> %s\n", set.records.size(), seqs.size(), a.out_dir.c_str());
    return 0;
}

struct AnalyzeArgs {
    std::string traces, traces_b, report = "layers", anchor_text, tags_file, out, emit = "csv";
    int window = 8, bins = 20;
};

int run_analyze(const AnalyzeArgs& a) {
    const TraceSet set = read_trace(a.traces);
    const int L = set.header.L;
    Output out(a.out);
    if (a.report == "layers") {
        const LayerProfile p = layer_profile(set.records, L);
        for (const auto& w : p.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
        if (a.emit == "json") {
            json rows = json::array();
            for (int l = 0; l < L; ++l) {
                const auto& s = p.layers[l];
                rows.push_back({{"layer", l},
                                {"mean_rho_d", s ? json(s->mean_rho_d) : json(nullptr)},
                                {"mean_cos_dw", s ? json(s->mean_cos_dw) : json(nullptr)},
                                {"count", s ? s->count : 0}});
            }
            *out << json{{"config_hash", set.header.config_hash}, {"layers", rows}}.dump(2) << "\n";
        } else {
            *out << "layer,mean_rho_d,mean_cos_dw,count\n";
            for (int l = 0; l < L; ++l) {
                const auto& s = p.layers[l];
                *out << l << ',' << (s ? num(s->mean_rho_d) : "") << ',' << (s ? num(s->mean_cos_dw) : "") << ','
                     << (s ? s->count : 0) << "\n";
            }
        }
    } else if (a.report == "density") {
        const double mag = magnitude_range(set.records);
        json bands = json::array();
        std::ostringstream csv;
        csv << "band,first_layer,last_layer,axes,gd_bin,gw_bin,count\n";
        for (const LayerBand& b : layer_bands(L)) {
            const DensityHistogram h = gate_density(set.records, b.first, b.last, a.bins, mag);
            bands.push_back({{"band", b.name},
                             {"first_layer", b.first},
                             {"last_layer", b.last},
                             {"bins", h.bins},
                             {"mag_max", h.mag_max},
                             {"total", h.total},
                             {"counts", h.counts},
                             {"magnitude_counts", h.magnitude_counts}});
            for (int i = 0; i < h.bins; ++i)
                for (int j = 0; j < h.bins; ++j) {
                    csv << b.name << ',' << b.first << ',' << b.last << ",gate," << i << ',' << j << ','
                        << h.counts[i * h.bins + j] << "\n";
                }
            for (int i = 0; i < h.bins; ++i)
                for (int j = 0; j < h.bins; ++j) {
                    csv << b.name << ',' << b.first << ',' << b.last << ",magnitude," << i << ',' << j << ','
                        << h.magnitude_counts[i * h.bins + j] << "\n";
                }
        }
        if (a.emit == "json") *out << json{{"mag_max", mag}, {"bands", bands}}.dump(2) << "\n";
        else *out << csv.str();
    } else if (a.report == "tags") {
        std::vector<std::pair<std::int64_t, TagSpan>> external;
        if (!a.tags_file.empty()) external = read_tag_file(a.tags_file);
        const TagProfile p = tag_profile(set.records, L, external);
        *out << "tag,layer,mean_rho_d,count\n";
        for (std::size_t t = 0; t < p.tags.size(); ++t)
            for (int l = 0; l < L; ++l) *out << p.tags[t] << ',' << l << ',' << optional_cell(p.mean_rho[t][l]) << ',' << p.counts[t] << "\n";
    } else if (a.report == "anchor") {
        if (a.anchor_text.empty()) throw InputError("--report anchor needs --anchor-text");
        if (a.traces_b.empty()) throw InputError("--report anchor needs --traces-b");
        const TraceSet b = read_trace(a.traces_b);
        if (b.header.L != L) throw InputError("trace sets disagree on L");
        const AnchorAlignment al = anchor_align(set.records, b.records, a.anchor_text, a.window, L);
        std::fprintf(stderr, "anchor found in %lld/%lld sequences of a, %lld/%lld of b\n",
                     static_cast<long long>(al.included_a), static_cast<long long>(al.included_a + al.excluded_a),
                     static_cast<long long>(al.included_b), static_cast<long long>(al.included_b + al.excluded_b));
        *out << "layer,offset,diff,mean_a,mean_b\n";
        for (int l = 0; l < L; ++l)
            for (int o = -a.window; o <= a.window; ++o) {
                const int c = o + a.window;
                *out << l << ',' << o << ',' << optional_cell(al.diff[l][c]) << ',' << optional_cell(al.mean_a[l][c])
                     << ',' << optional_cell(al.mean_b[l][c]) << "\n";
            }
    }
    return 0;
}

// ---------------------------------------------------------------- ablate

struct AblateArgs {
    std::string checkpoint, corpus, emit = "json";
    std::vector<std::string> specs;
    int seq_len = 0, batch = 8;
};

int run_ablate(const AblateArgs& a) {
    TrainConfig tc;
    const CheckpointData<float> ck = load_checkpoint<float>(a.checkpoint);
    const TrainState<float> state = from_checkpoint(ck, &tc);
    const int seq_len = a.seq_len > 0 ? a.seq_len : std::min(tc.seq_len, ck.model.backbone.T_max);
    const std::vector<int> tokens = read_byte_corpus(a.corpus);
    std::vector<AblationReport> reports;
    for (const auto& s : a.specs)
        reports.push_back(run_ablation(state.params, ck.model, tokens, AblationSpec::parse(s), seq_len, a.batch));
    if (a.emit == "csv") {
        std::cout << "spec,loss,delta,baseline,tokens\n";
        for (const auto& r : reports)
            std::cout << r.spec << ',' << num(r.loss) << ',' << num(r.delta) << ',' << num(r.baseline) << ',' << r.tokens << "\n";
        for (const auto& r : reports)
            for (const auto& n : r.notes) std::fprintf(stderr, "%s: %s\n", r.spec.c_str(), n.c_str());
    } else {
        json out = reports;
        std::cout << (reports.size() == 1 ? out[0] : out).dump(2) << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dual-path transformer toolkit"};
    app.require_subcommand(1);

    SolveArgs solve_args;
    auto* solve = app.add_subcommand("solve", "solve iso-FLOP FFN widths");
    add_solve_flags(solve, solve_args);

    SolveArgs params_args;
    auto* params = app.add_subcommand("params", "solve widths and count parameters");
    add_solve_flags(params, params_args);
    params->add_flag("--tie", params_args.tie, "share the embedding and output head");
    params->add_option("--layers", params_args.L, "number of layers")->check(CLI::PositiveNumber);
    params->add_option("--vocab", params_args.vocab, "vocabulary size")->check(CLI::PositiveNumber);
    params->add_option("--heads", params_args.h_q, "query heads")->check(CLI::PositiveNumber);

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "train on a byte-level corpus");
    train_cmd->add_option("--config", train_args.config, "INI run config")->required()->check(CLI::ExistingFile);
    train_cmd->add_option("--corpus", train_args.corpus, "training text")->required()->check(CLI::ExistingFile);
    train_cmd->add_option("--out", train_args.out, "output directory")->required();
    train_cmd->add_option("--resume", train_args.resume, "checkpoint to continue from")->check(CLI::ExistingFile);
    train_cmd->add_option("--stop-at", train_args.stop_at, "stop after this many total steps");

    EvalArgs eval_args;
    auto* eval = app.add_subcommand("eval", "bits per byte of a checkpoint on a corpus");
    eval->add_option("--checkpoint", eval_args.checkpoint)->required()->check(CLI::ExistingFile);
    eval->add_option("--corpus", eval_args.corpus)->required()->check(CLI::ExistingFile);
    eval->add_option("--split", eval_args.split, "all | heldout")->check(CLI::IsMember({"all", "heldout"}));
    eval->add_option("--seq-len", eval_args.seq_len, "window length (default: training seq_len)");
    eval->add_option("--batch", eval_args.batch)->check(CLI::PositiveNumber);

    TraceArgs trace_args;
    auto* trace = app.add_subcommand("trace", "record per-token routing traces");
    trace->add_option("--checkpoint", trace_args.checkpoint)->required()->check(CLI::ExistingFile);
    trace->add_option("--input", trace_args.input, "text; sequences separated by blank lines")
        ->required()
        ->check(CLI::ExistingFile);
    trace->add_option("--out-dir", trace_args.out_dir)->required();

    AnalyzeArgs analyze_args;
    auto* analyze = app.add_subcommand("analyze", "summaries of a trace directory");
    analyze->add_option("--traces", analyze_args.traces)->required()->check(CLI::ExistingDirectory);
    analyze->add_option("--report", analyze_args.report)->check(CLI::IsMember({"layers", "density", "tags", "anchor"}));
    analyze->add_option("--anchor-text", analyze_args.anchor_text);
    analyze->add_option("--traces-b", analyze_args.traces_b, "second trace directory for --report anchor")
        ->check(CLI::ExistingDirectory);
    analyze->add_option("--window", analyze_args.window)->check(CLI::NonNegativeNumber);
    analyze->add_option("--tags-file", analyze_args.tags_file)->check(CLI::ExistingFile);
    analyze->add_option("--bins", analyze_args.bins)->check(CLI::Range(2, 1000));
    analyze->add_option("--emit", analyze_args.emit, "csv | json")->check(CLI::IsMember({"csv", "json"}));
    analyze->add_option("--out", analyze_args.out, "output file (default stdout)");

    AblateArgs ablate_args;
    auto* ablate = app.add_subcommand("ablate", "inference-time interventions");
    ablate->add_option("--checkpoint", ablate_args.checkpoint)->required()->check(CLI::ExistingFile);
    ablate->add_option("--corpus", ablate_args.corpus)->required()->check(CLI::ExistingFile);
    ablate->add_option("--spec", ablate_args.specs, "none | force-loops:K | gates:GD,GW[@layers=..] | shuffle:seed=N")
        ->required();
    ablate->add_option("--emit", ablate_args.emit, "json | csv")->check(CLI::IsMember({"json", "csv"}));
    ablate->add_option("--seq-len", ablate_args.seq_len);
    ablate->add_option("--batch", ablate_args.batch)->check(CLI::PositiveNumber);

    CLI11_PARSE(app, argc, argv);
    try {
        if (*solve) return run_solve(solve_args, false);
        if (*params) return run_solve(params_args, true);
        if (*train_cmd) return run_train(train_args);
        if (*eval) return run_eval(eval_args);
        if (*trace) return run_trace(trace_args);
        if (*analyze) return run_analyze(analyze_args);
        if (*ablate) return run_ablate(ablate_args);
    } catch (const TrainingError& e) {
        std::fprintf(stderr, "training aborted: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
