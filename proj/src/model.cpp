#include "dualpath/model.hpp"

#include "dualpath/errors.hpp"

namespace dualpath {

template <typename T>
ParameterStore<T> init_parameters(const ModelConfig& config) {
    config.validate();
    const BackboneConfig& b = config.backbone;
    const std::size_t d = b.d, vocab = b.vocab;
    std::mt19937_64 rng(config.seed);
    ParameterStore<T> store;
    store.add("embed", normal_tensor<T>({vocab, d}, config.init_std, rng), false);
    for (int l = 0; l < b.L; ++l) add_block_params(store, l, config, rng);
    store.add("final_norm", Tensor<T>(Shape{d}, T(1)), false);
    if (!b.tie_embeddings) store.add("head", normal_tensor<T>({d, vocab}, config.init_std, rng), false);
    return store;
}

template <typename T>
Var<T> model_forward(const ParamBinder<T>& bind, const ModelConfig& config, std::span<const int> tokens,
                     const SequenceLayout& layout, const ForwardOptions& options) {
    const BackboneConfig& b = config.backbone;
    if (tokens.size() != layout.rows()) {
        throw DimensionError("model_forward: " + std::to_string(tokens.size()) + " tokens for a " +
                             std::to_string(layout.batch) + "x" + std::to_string(layout.seq_len) + " layout");
    }
    if (layout.positions.size() != layout.rows()) throw DimensionError("model_forward: positions do not match layout");
    Var<T> embed = bind("embed");
    Var<T> h = embedding(embed, tokens);

    BlockContext<T> ctx;
    ctx.backbone = &b;
    ctx.layout = &layout;
    ctx.eps = static_cast<T>(config.norm_eps);
    ctx.interventions = options.interventions;
    ctx.sink = options.sink;
    ctx.tokens = tokens;
    ctx.sequence_offset = options.sequence_offset;
    for (int l = 0; l < b.L; ++l) {
        ctx.layer = l;
        h = block_forward(h, config.variant, bind_block(bind, l, config.variant), ctx);
    }
    h = rmsnorm(h, bind("final_norm"), static_cast<T>(config.norm_eps));
    return matmul(h, b.tie_embeddings ? transpose(embed) : bind("head"));
}

template <typename T>
Tensor<T> forward_logits(const ParameterStore<T>& store, const ModelConfig& config, std::span<const int> tokens,
                         const SequenceLayout& layout, const ForwardOptions& options) {
    Tape<T> tape;
    Var<T> logits = model_forward(bind_store(tape, store), config, tokens, layout, options);
    return logits.value();
}

#define DUALPATH_INSTANTIATE(T)                                                                         \
    template ParameterStore<T> init_parameters<T>(const ModelConfig&);                                  \
    template Var<T> model_forward<T>(const ParamBinder<T>&, const ModelConfig&, std::span<const int>,   \
                                     const SequenceLayout&, const ForwardOptions&);                     \
    template Tensor<T> forward_logits<T>(const ParameterStore<T>&, const ModelConfig&, std::span<const int>, \
                                         const SequenceLayout&, const ForwardOptions&);

DUALPATH_INSTANTIATE(float)
DUALPATH_INSTANTIATE(double)

#undef DUALPATH_INSTANTIATE

}  // namespace dualpath
