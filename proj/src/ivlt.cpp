#include "cmqr/ivlt.hpp"

#include "cmqr/layers.hpp"

#include <stdexcept>

namespace cmqr {

namespace {

std::string layer_prefix(const std::string& prefix, int r) { return prefix + "/r" + std::to_string(r); }

std::string stream_prefix(const IvltConfig& cfg, const char* stream) {
    if (!cfg.share_stream_weights) return std::string("ivlt/") + stream;
    const std::string s(stream);
    return (s == "qa" || s == "qm") ? "ivlt/q_shared" : "ivlt/v_shared";
}

}  // namespace

void validate(const IvltConfig& cfg) {
    if (cfg.layers < 1) throw std::invalid_argument("ivlt: layers must be >= 1");
    if (cfg.heads < 1 || cfg.width % cfg.heads != 0) {
        throw std::invalid_argument("ivlt: heads " + std::to_string(cfg.heads) +
                                    " must divide width " + std::to_string(cfg.width));
    }
}

void register_mtb(ParameterStore& store, std::uint64_t seed, const std::string& prefix,
                  const IvltConfig& cfg) {
    for (int r = 1; r <= cfg.layers; ++r) {
        const auto p = layer_prefix(prefix, r);
        for (const char* name : {"/attn/wq", "/attn/wk", "/attn/wv", "/attn/wo"}) {
            register_linear(store, seed, p + name, cfg.width, cfg.width);
        }
        register_layer_norm(store, p + "/ln_in", cfg.width);
        register_layer_norm(store, p + "/ln_ff", cfg.width);
        register_feed_forward(store, seed, p + "/ff", cfg.width, cfg.ff_hidden);
    }
}

void register_ivlt(ParameterStore& store, std::uint64_t seed, const IvltConfig& cfg) {
    validate(cfg);
    register_linear(store, seed, "ivlt/q_proj", cfg.text_width, cfg.width);
    store.add("ivlt/pos_a", uniform_init(seed, "ivlt/pos_a", cfg.clips, cfg.width, 0.02));
    store.add("ivlt/pos_m", uniform_init(seed, "ivlt/pos_m", cfg.clips, cfg.width, 0.02));
    for (const char* s : {"qa", "qm", "as", "ms"}) {
        const auto p = stream_prefix(cfg, s);
        if (!store.contains(layer_prefix(p, 1) + "/attn/wq/w")) register_mtb(store, seed, p, cfg);
    }
}

Var mma(Tape& tape, ParameterStore& store, const Var& queries, const Var& context,
        const std::string& prefix, int heads, Matrix* weights_out) {
    Var q = linear(tape, store, queries, prefix + "/wq");
    Var k = linear(tape, store, context, prefix + "/wk");
    Var v = linear(tape, store, context, prefix + "/wv");
    return linear(tape, store, multi_head_attention(q, k, v, heads, weights_out), prefix + "/wo");
}

Var add_positional(const Var& features, const Var& positional) {
    if (features.rows() != positional.rows() || features.cols() != positional.cols()) {
        throw DimensionError("add_positional: features " + shape_string(features.value()) +
                             " vs positional " + shape_string(positional.value()));
    }
    return add(features, positional);
}

Var mtb_stream(Tape& tape, ParameterStore& store, const Var& queries, const Var& context,
               const std::string& prefix, int layers, int heads,
               std::vector<Matrix>* attention_out) {
    if (layers < 1) throw std::invalid_argument("mtb_stream: layers must be >= 1");
    if (queries.cols() != context.cols()) {
        throw DimensionError("mtb_stream: query width " + shape_string(queries.value()) +
                             " vs context " + shape_string(context.value()));
    }
    Var x = queries;
    for (int r = 1; r <= layers; ++r) {
        const auto p = layer_prefix(prefix, r);
        Matrix weights;
        Var u = add(layer_norm(tape, store, x, p + "/ln_in"),
                    mma(tape, store, x, context, p + "/attn", heads,
                        attention_out != nullptr ? &weights : nullptr));
        if (attention_out != nullptr) attention_out->push_back(std::move(weights));
        x = add(u, feed_forward(tape, store, layer_norm(tape, store, u, p + "/ln_ff"), p + "/ff"));
    }
    return x;
}

IvltOutput ivlt_forward(Tape& tape, ParameterStore& store, const IvltConfig& cfg,
                        const Var& question, const Var& causal_appearance,
                        const Var& causal_motion) {
    validate(cfg);
    IvltOutput out;
    Var q0 = linear(tape, store, question, "ivlt/q_proj");
    Var fa = add_positional(causal_appearance, store.on(tape, "ivlt/pos_a"));
    Var fm = add_positional(causal_motion, store.on(tape, "ivlt/pos_m"));
    auto* att = &out.attention;
    out.semantics_appearance =
        mtb_stream(tape, store, q0, fa, stream_prefix(cfg, "qa"), cfg.layers, cfg.heads, att);
    out.semantics_motion =
        mtb_stream(tape, store, q0, fm, stream_prefix(cfg, "qm"), cfg.layers, cfg.heads, att);
    out.visual_appearance = mtb_stream(tape, store, fa, out.semantics_appearance,
                                       stream_prefix(cfg, "as"), cfg.layers, cfg.heads, att);
    out.visual_motion = mtb_stream(tape, store, fm, out.semantics_motion, stream_prefix(cfg, "ms"),
                                   cfg.layers, cfg.heads, att);
    out.visual = concat({mean_rows(out.visual_appearance), mean_rows(out.visual_motion)}, 1);
    out.semantics = concat({mean_rows(out.semantics_appearance), mean_rows(out.semantics_motion)}, 1);
    return out;
}

}  // namespace cmqr
