#include "dualpath/train.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "dualpath/errors.hpp"

namespace dualpath {

TrainConfig TrainConfig::reference() {
    TrainConfig c;
    c.peak_lr = 5e-4;
    c.init_lr = 5e-6;
    c.final_lr = 5e-5;
    c.warmup_steps = 184;
    c.beta1 = 0.9;
    c.beta2 = 0.95;
    c.eps = 1e-8;
    c.weight_decay = 0.3;
    return c;
}

void TrainConfig::validate() const {
    if (!(init_lr >= 0.0 && init_lr <= peak_lr)) throw ConfigError("train: need 0 <= init_lr <= peak_lr");
    if (!(final_lr >= 0.0 && final_lr <= peak_lr)) throw ConfigError("train: need 0 <= final_lr <= peak_lr");
    if (warmup_steps < 0 || total_steps < 1 || warmup_steps > total_steps) {
        throw ConfigError("train: need 0 <= warmup_steps <= total_steps and total_steps >= 1");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train: betas must lie in [0,1)");
    if (!(eps > 0.0)) throw ConfigError("train: eps must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be nonnegative");
    if (batch_size < 1 || seq_len < 1) throw ConfigError("train: batch_size and seq_len must be positive");
    if (precision != "f32" && precision != "f64") throw ConfigError("train: precision must be f32 or f64");
    if (!(grad_clip >= 0.0)) throw ConfigError("train: grad_clip must be nonnegative");
    if (checkpoint_every < 0) throw ConfigError("train: checkpoint_every must be nonnegative");
    if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) throw ConfigError("train: eval_fraction must lie in (0,1)");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"peak_lr", c.peak_lr},
         {"init_lr", c.init_lr},
         {"final_lr", c.final_lr},
         {"warmup_steps", c.warmup_steps},
         {"total_steps", c.total_steps},
         {"beta1", c.beta1},
         {"beta2", c.beta2},
         {"eps", c.eps},
         {"weight_decay", c.weight_decay},
         {"batch_size", c.batch_size},
         {"seq_len", c.seq_len},
         {"seed", c.seed},
         {"precision", c.precision},
         {"grad_clip", c.grad_clip},
         {"checkpoint_every", c.checkpoint_every},
         {"eval_fraction", c.eval_fraction}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    TrainConfig d;
    c.peak_lr = j.value("peak_lr", d.peak_lr);
    c.init_lr = j.value("init_lr", d.init_lr);
    c.final_lr = j.value("final_lr", d.final_lr);
    c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
    c.total_steps = j.value("total_steps", d.total_steps);
    c.beta1 = j.value("beta1", d.beta1);
    c.beta2 = j.value("beta2", d.beta2);
    c.eps = j.value("eps", d.eps);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.seq_len = j.value("seq_len", d.seq_len);
    c.seed = j.value("seed", d.seed);
    c.precision = j.value("precision", d.precision);
    c.grad_clip = j.value("grad_clip", d.grad_clip);
    c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
    c.eval_fraction = j.value("eval_fraction", d.eval_fraction);
}

double lr_at(long step, const TrainConfig& c) {
    if (step < 0 || step > c.total_steps) {
        throw InputError("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(c.total_steps) + "]");
    }
    if (step < c.warmup_steps) {
        return std::lerp(c.init_lr, c.peak_lr, static_cast<double>(step) / static_cast<double>(c.warmup_steps));
    }
    if (c.total_steps == c.warmup_steps) return c.peak_lr;
    const double p = static_cast<double>(step - c.warmup_steps) / static_cast<double>(c.total_steps - c.warmup_steps);
    // Written as a lerp so p = 0 and p = 1 land exactly on peak and final.
    return std::lerp(c.final_lr, c.peak_lr, 0.5 * (1.0 + std::cos(std::numbers::pi * p)));
}

double bits_per_byte(double total_nats, double total_bytes) {
    if (!(total_bytes > 0.0)) throw InputError("bits_per_byte: total_bytes must be positive");
    return total_nats / std::numbers::ln2 / total_bytes;
}

// ---------------------------------------------------------------- corpus

std::vector<int> read_byte_corpus(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open corpus " + path.string());
    std::vector<int> tokens;
    char buf[65536];
    while (in.read(buf, sizeof buf) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) tokens.push_back(static_cast<unsigned char>(buf[i]));
    }
    if (tokens.empty()) throw InputError("corpus " + path.string() + " is empty");
    return tokens;
}

CorpusSplit split_corpus(std::vector<int> tokens, double eval_fraction, int seq_len) {
    const std::size_t n = tokens.size();
    const std::size_t need = static_cast<std::size_t>(seq_len) + 1;
    std::size_t held = std::max(need, static_cast<std::size_t>(std::ceil(static_cast<double>(n) * eval_fraction)));
    if (n < held + need) {
        throw InputError("corpus of " + std::to_string(n) + " bytes is too small for seq_len " + std::to_string(seq_len));
    }
    CorpusSplit s;
    s.heldout.assign(tokens.end() - static_cast<std::ptrdiff_t>(held), tokens.end());
    tokens.resize(n - held);
    s.train = std::move(tokens);
    return s;
}

template <typename T>
NllResult evaluate_nll(const ParameterStore<T>& store, const ModelConfig& config, std::span<const int> tokens,
                       int seq_len, int batch_size, const Interventions* interventions, TraceSink* sink) {
    if (tokens.size() < 2) throw InputError("evaluation corpus needs at least two tokens");
    if (seq_len < 1 || batch_size < 1) throw ConfigError("evaluation needs positive seq_len and batch_size");
    const std::size_t sl = static_cast<std::size_t>(seq_len);
    struct Window {
        std::size_t start, len;
    };
    std::vector<Window> windows;
    for (std::size_t start = 0; start + 1 < tokens.size(); start += sl)
        windows.push_back({start, std::min(sl, tokens.size() - 1 - start)});

    NllResult result;
    std::size_t w = 0;
    while (w < windows.size()) {
        // Full windows are batched; a short tail runs alone.
        const std::size_t len = windows[w].len;
        std::size_t count = 0;
        while (w + count < windows.size() && count < static_cast<std::size_t>(batch_size) && windows[w + count].len == len)
            ++count;
        std::vector<int> inputs, targets;
        for (std::size_t b = 0; b < count; ++b) {
            const Window& win = windows[w + b];
            inputs.insert(inputs.end(), tokens.begin() + win.start, tokens.begin() + win.start + len);
            targets.insert(targets.end(), tokens.begin() + win.start + 1, tokens.begin() + win.start + 1 + len);
        }
        ForwardOptions opts;
        opts.interventions = interventions;
        opts.sink = sink;
        opts.sequence_offset = static_cast<std::int64_t>(w);
        const Tensor<T> logits = forward_logits(store, config, inputs, SequenceLayout::packed(count, len), opts);
        for (double nll : token_nll(logits, targets)) result.total_nats += nll;
        result.tokens += static_cast<std::int64_t>(targets.size());
        w += count;
    }
    return result;
}

// ---------------------------------------------------------------- optimizer

template <typename T>
TrainState<T> TrainState<T>::fresh(const ModelConfig& model, const TrainConfig& train) {
    TrainState<T> s;
    s.params = init_parameters<T>(model);
    for (const auto& p : s.params.params()) {
        s.m.emplace_back(p.value.shape());
        s.v.emplace_back(p.value.shape());
    }
    s.rng.seed(train.seed);
    return s;
}

template <typename T>
double grad_norm(const ParameterStore<T>& params) {
    double sq = 0.0;
    for (const auto& p : params.params())
        for (T g : p.grad.data()) sq += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(sq);
}

template <typename T>
void adamw_step(TrainState<T>& state, const TrainConfig& c, double lr) {
    auto& params = state.params.params();
    for (const auto& p : params) {
        if (!p.grad.all_finite()) throw TrainingError("non-finite gradient in " + p.name, state.step);
    }
    const double t = static_cast<double>(state.step + 1);
    const double bc1 = 1.0 - std::pow(c.beta1, t);
    const double bc2 = 1.0 - std::pow(c.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        T* w = p.value.data().data();
        const T* g = p.grad.data().data();
        T* m = state.m[i].data().data();
        T* v = state.v[i].data().data();
        const double decay = p.decay ? 1.0 - lr * c.weight_decay : 1.0;
        for (std::size_t j = 0; j < p.value.size(); ++j) {
            const double gj = static_cast<double>(g[j]);
            const double mj = c.beta1 * static_cast<double>(m[j]) + (1.0 - c.beta1) * gj;
            const double vj = c.beta2 * static_cast<double>(v[j]) + (1.0 - c.beta2) * gj * gj;
            m[j] = static_cast<T>(mj);
            v[j] = static_cast<T>(vj);
            const double update = (mj / bc1) / (std::sqrt(vj / bc2) + c.eps);
            w[j] = static_cast<T>(static_cast<double>(w[j]) * decay - lr * update);
        }
    }
    ++state.step;
}

template <typename T>
CheckpointData<T> to_checkpoint(const TrainState<T>& state, const ModelConfig& model, const TrainConfig& train) {
    CheckpointData<T> data;
    data.model = model;
    std::ostringstream rng;
    rng << state.rng;
    data.train_state = {{"step", state.step}, {"rng", rng.str()}, {"train_config", train}};
    const auto& params = state.params.params();
    for (const auto& p : params) data.tensors.emplace_back(p.name, p.value);
    for (std::size_t i = 0; i < params.size(); ++i) data.tensors.emplace_back("adam.m/" + params[i].name, state.m[i]);
    for (std::size_t i = 0; i < params.size(); ++i) data.tensors.emplace_back("adam.v/" + params[i].name, state.v[i]);
    return data;
}

template <typename T>
TrainState<T> from_checkpoint(const CheckpointData<T>& data, TrainConfig* train) {
    TrainState<T> s;
    // Fresh init supplies names, order and decay flags; values come from the file.
    s.params = init_parameters<T>(data.model);
    for (auto& p : s.params.params()) {
        const Tensor<T>& t = data.tensor(p.name);
        if (t.shape() != p.value.shape()) {
            throw FormatError("checkpoint tensor " + p.name + " has shape " + shape_string(t.shape()) + ", expected " +
                              shape_string(p.value.shape()));
        }
        p.value = t;
    }
    const nlohmann::json& ts = data.train_state;
    const bool has_optimizer = ts.contains("step");
    for (const auto& p : s.params.params()) {
        s.m.push_back(has_optimizer ? data.tensor("adam.m/" + p.name) : Tensor<T>(p.value.shape()));
        s.v.push_back(has_optimizer ? data.tensor("adam.v/" + p.name) : Tensor<T>(p.value.shape()));
    }
    if (has_optimizer) {
        s.step = ts.at("step").get<long>();
        std::istringstream rng(ts.at("rng").get<std::string>());
        rng >> s.rng;
        if (!rng) throw FormatError("checkpoint RNG state is unreadable");
    }
    if (train && ts.contains("train_config")) *train = ts.at("train_config").get<TrainConfig>();
    return s;
}

// ---------------------------------------------------------------- training loop

namespace {

std::vector<std::string> kept_loss_rows(const std::filesystem::path& csv, long before_step) {
    std::vector<std::string> rows;
    std::ifstream in(csv);
    std::string line;
    if (!std::getline(in, line)) return rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (std::stol(line.substr(0, line.find(','))) < before_step) rows.push_back(line);
    }
    return rows;
}

std::string format_loss_row(const LossPoint& p) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%ld,%.17g,%.17g", p.step, p.lr, p.loss_nats);
    return buf;
}

}  // namespace

template <typename T>
TrainResult<T> train(const ModelConfig& model, const TrainConfig& config, std::span<const int> train_tokens,
                     const TrainOptions& options) {
    model.validate();
    config.validate();
    if (config.seq_len > model.backbone.T_max) throw ConfigError("train: seq_len exceeds T_max");
    const std::size_t window = static_cast<std::size_t>(config.seq_len) + 1;
    if (train_tokens.size() < window) throw InputError("training corpus is shorter than one window");
    for (int t : train_tokens)
        if (t < 0 || t >= model.backbone.vocab) throw InputError("training corpus has a token outside the vocabulary");

    TrainResult<T> result{options.resume_from ? from_checkpoint(load_checkpoint<T>(*options.resume_from))
                                              : TrainState<T>::fresh(model, config),
                          {}};
    TrainState<T>& state = result.state;
    if (options.resume_from && config_hash(read_manifest(*options.resume_from).at("model_config").get<ModelConfig>()) !=
                                   config_hash(model)) {
        throw ConfigError("checkpoint " + options.resume_from->string() + " was written for a different model config");
    }
    const long stop = std::min(options.stop_at.value_or(config.total_steps), config.total_steps);

    const std::filesystem::path ckpt = options.out_dir.empty() ? std::filesystem::path{} : options.out_dir / "checkpoint.dpv";
    std::ofstream loss_csv;
    if (!options.out_dir.empty()) {
        std::filesystem::create_directories(options.out_dir);
        const auto csv_path = options.out_dir / "loss.csv";
        const auto kept = options.resume_from ? kept_loss_rows(csv_path, state.step) : std::vector<std::string>{};
        loss_csv.open(csv_path, std::ios::trunc);
        if (!loss_csv) throw InputError("cannot write " + csv_path.string());
        loss_csv << "step,lr,loss_nats\n";
        for (const auto& row : kept) loss_csv << row << "\n";
    }
    auto save = [&] {
        if (!ckpt.empty()) save_checkpoint(ckpt, to_checkpoint(state, model, config));
    };

    const SequenceLayout layout = SequenceLayout::packed(config.batch_size, config.seq_len);
    std::uniform_int_distribution<std::size_t> offset_dist(0, train_tokens.size() - window);
    std::vector<int> inputs(layout.rows()), targets(layout.rows());
    while (state.step < stop) {
        for (int b = 0; b < config.batch_size; ++b) {
            const std::size_t off = offset_dist(state.rng);
            std::copy_n(train_tokens.begin() + off, config.seq_len, inputs.begin() + b * config.seq_len);
            std::copy_n(train_tokens.begin() + off + 1, config.seq_len, targets.begin() + b * config.seq_len);
        }
        const double lr = lr_at(state.step, config);
        Tape<T> tape;
        Var<T> loss;
        try {
            loss = cross_entropy(model_forward(bind_store(tape, state.params), model, inputs, layout), targets);
        } catch (const EvaluationError& e) {
            throw TrainingError(std::string("non-finite forward value: ") + e.what(), state.step);
        }
        const double loss_value = static_cast<double>(loss.value()[0]);
        if (!std::isfinite(loss_value)) throw TrainingError("non-finite loss", state.step);
        state.params.zero_grad();
        tape.backward(loss);
        if (config.grad_clip > 0.0) {
            const double norm = grad_norm(state.params);
            if (!std::isfinite(norm)) throw TrainingError("non-finite gradient norm", state.step);
            if (norm > config.grad_clip) {
                const T s = static_cast<T>(config.grad_clip / norm);
                for (auto& p : state.params.params())
                    for (T& g : p.grad.storage()) g *= s;
            }
        }
        const LossPoint point{state.step, lr, loss_value};
        adamw_step(state, config, lr);
        result.curve.push_back(point);
        if (loss_csv.is_open()) loss_csv << format_loss_row(point) << "\n" << std::flush;
        if (options.on_step) options.on_step(point);
        if (config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 && state.step < stop) save();
    }
    save();
    return result;
}

#define DUALPATH_INSTANTIATE(T)                                                                                    \
    template NllResult evaluate_nll<T>(const ParameterStore<T>&, const ModelConfig&, std::span<const int>, int, int, \
                                       const Interventions*, TraceSink*);                                          \
    template struct TrainState<T>;                                                                                 \
    template double grad_norm<T>(const ParameterStore<T>&);                                                        \
    template void adamw_step<T>(TrainState<T>&, const TrainConfig&, double);                                       \
    template CheckpointData<T> to_checkpoint<T>(const TrainState<T>&, const ModelConfig&, const TrainConfig&);     \
    template TrainState<T> from_checkpoint<T>(const CheckpointData<T>&, TrainConfig*);                             \
    template TrainResult<T> train<T>(const ModelConfig&, const TrainConfig&, std::span<const int>, const TrainOptions&);

DUALPATH_INSTANTIATE(float)
DUALPATH_INSTANTIATE(double)

#undef DUALPATH_INSTANTIATE

}  // namespace dualpath
