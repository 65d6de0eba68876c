#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualpath/checkpoint.hpp"
#include "dualpath/model.hpp"

namespace dualpath {

struct TrainConfig {
    double peak_lr = 5e-4;
    double init_lr = 5e-6;
    double final_lr = 5e-5;
    long warmup_steps = 100;
    long total_steps = 2000;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.3;
    int batch_size = 8;
    int seq_len = 128;
    std::uint64_t seed = 0;
    std::string precision = "f32";
    // Global gradient-norm clip; 0 disables.
    double grad_clip = 1.0;
    // Checkpoint every N steps (0: only at the end).
    long checkpoint_every = 500;
    // Trailing share of the corpus held out for evaluation.
    double eval_fraction = 0.05;

    // Optimizer constants of the reference recipe (184 warmup steps).
    static TrainConfig reference();
    void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Linear warmup from init_lr to peak_lr, then cosine to final_lr at total_steps.
double lr_at(long step, const TrainConfig& config);

// (total_nats / ln 2) / total_bytes
double bits_per_byte(double total_nats, double total_bytes);

// ---------------------------------------------------------------- corpus

std::vector<int> read_byte_corpus(const std::filesystem::path& path);

struct CorpusSplit {
    std::vector<int> train;
    std::vector<int> heldout;
};

// The last eval_fraction of the bytes (at least seq_len + 1 of them) are held out.
CorpusSplit split_corpus(std::vector<int> tokens, double eval_fraction, int seq_len);

struct NllResult {
    double total_nats = 0.0;
    std::int64_t tokens = 0;
    double mean() const { return tokens ? total_nats / static_cast<double>(tokens) : 0.0; }
};

// Teacher-forced next-token NLL over every position of `tokens`, in windows of
// seq_len + 1 bytes that overlap by one; a shorter tail window covers the rest.
// Window w becomes trace/shuffle sequence id w.
template <typename T>
NllResult evaluate_nll(const ParameterStore<T>& store, const ModelConfig& config, std::span<const int> tokens,
                       int seq_len, int batch_size, const Interventions* interventions = nullptr,
                       TraceSink* sink = nullptr);

// ---------------------------------------------------------------- optimizer

template <typename T>
struct TrainState {
    long step = 0;
    ParameterStore<T> params;
    std::vector<Tensor<T>> m;
    std::vector<Tensor<T>> v;
    // Draws batch offsets.
    std::mt19937_64 rng;

    static TrainState fresh(const ModelConfig& model, const TrainConfig& train);
};

// Global L2 norm of all parameter gradients, accumulated in double.
template <typename T>
double grad_norm(const ParameterStore<T>& params);

// One decoupled-weight-decay Adam update at learning rate `lr` using the
// gradients stored in state.params; advances state.step. Throws TrainingError
// on a non-finite gradient.
template <typename T>
void adamw_step(TrainState<T>& state, const TrainConfig& config, double lr);

template <typename T>
CheckpointData<T> to_checkpoint(const TrainState<T>& state, const ModelConfig& model, const TrainConfig& train);

template <typename T>
TrainState<T> from_checkpoint(const CheckpointData<T>& data, TrainConfig* train = nullptr);

// ---------------------------------------------------------------- training loop

struct LossPoint {
    long step = 0;
    double lr = 0.0;
    double loss_nats = 0.0;
};

struct TrainOptions {
    // loss.csv and checkpoint.dpv go here; empty disables file output.
    std::filesystem::path out_dir;
    // Continue from this checkpoint instead of a fresh init.
    std::optional<std::filesystem::path> resume_from;
    // Stop (and checkpoint) once this many steps are done; defaults to total_steps.
    std::optional<long> stop_at;
    std::function<void(const LossPoint&)> on_step;
};

template <typename T>
struct TrainResult {
    TrainState<T> state;
    std::vector<LossPoint> curve;
};

template <typename T>
TrainResult<T> train(const ModelConfig& model, const TrainConfig& config, std::span<const int> train_tokens,
                     const TrainOptions& options = {});

}  // namespace dualpath
