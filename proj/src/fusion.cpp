#include "cmqr/fusion.hpp"

#include "cmqr/layers.hpp"

#include <stdexcept>

namespace cmqr {

void register_fusion(ParameterStore& store, std::uint64_t seed, const FusionConfig& cfg) {
    register_linear(store, seed, "fusion/refine/gate", 2 * cfg.width, cfg.width);
    register_linear(store, seed, "fusion/refine/value", 2 * cfg.width, cfg.width);
    register_linear(store, seed, "fusion/cond/visual", cfg.width, cfg.width, false);
    register_linear(store, seed, "fusion/cond/text", cfg.width, cfg.width, false);
}

void register_decoder(ParameterStore& store, std::uint64_t seed, const std::string& prefix,
                      const FusionConfig& cfg) {
    if (cfg.n_answers < 2) throw std::invalid_argument("decoder needs at least 2 answers");
    register_linear(store, seed, prefix + "/hidden", 4 * cfg.width, cfg.decoder_hidden);
    register_linear(store, seed, prefix + "/logits", cfg.decoder_hidden, cfg.n_answers);
}

Var refine_linguistic(Tape& tape, ParameterStore& store, const Var& visual, const Var& semantics) {
    if (visual.cols() != semantics.cols()) {
        throw DimensionError("refine_linguistic: visual " + shape_string(visual.value()) +
                             " vs semantics " + shape_string(semantics.value()));
    }
    Var joint = concat({visual, semantics}, 1);
    Var gate = sigmoid(linear(tape, store, joint, "fusion/refine/gate"));
    Var candidate = tanh(linear(tape, store, joint, "fusion/refine/value"));
    return add(hadamard(gate, semantics), hadamard(one_minus(gate), candidate));
}

Var condition_visual(Tape& tape, ParameterStore& store, const Var& visual, const Var& refined) {
    return hadamard(linear(tape, store, visual, "fusion/cond/visual", false),
                    sigmoid(linear(tape, store, refined, "fusion/cond/text", false)));
}

FusedFeatures fuse(Tape& tape, ParameterStore& store, const Var& visual_1, const Var& semantics_1,
                   const Var& visual_2, const Var& semantics_2) {
    const bool same_visual = visual_1.id() == visual_2.id();
    const bool same_pair = same_visual && semantics_1.id() == semantics_2.id();
    Var l1 = refine_linguistic(tape, store, visual_1, semantics_1);
    Var l2 = same_pair ? l1 : refine_linguistic(tape, store, visual_2, semantics_2);
    Var t1 = sigmoid(linear(tape, store, l1, "fusion/cond/text", false));
    Var t2 = same_pair ? t1 : sigmoid(linear(tape, store, l2, "fusion/cond/text", false));
    Var a1 = linear(tape, store, visual_1, "fusion/cond/visual", false);
    Var a2 = same_visual ? a1 : linear(tape, store, visual_2, "fusion/cond/visual", false);
    auto pooled = [&](const Var& a) { return scale(add(hadamard(a, t1), hadamard(a, t2)), 0.5); };
    return {concat({l1, l2}, 1), concat({pooled(a1), pooled(a2)}, 1)};
}

AnswerPrediction decode_answer(Tape& tape, ParameterStore& store, const FusedFeatures& fused,
                               const std::string& prefix) {
    Var joint = concat({fused.visual, fused.linguistic}, 1);
    Var hidden = gelu(linear(tape, store, joint, prefix + "/hidden"));
    AnswerPrediction out;
    out.logits = linear(tape, store, hidden, prefix + "/logits");
    out.predicted = argmax(out.logits.value());
    return out;
}

LossBreakdown compute_losses(const AnswerPrediction& pred_v, const AnswerPrediction& pred_c,
                             int target, const LossWeights& weights) {
    if (pred_v.logits.cols() != pred_c.logits.cols()) {
        throw DimensionError("compute_losses: logits " + shape_string(pred_v.logits.value()) +
                             " vs " + shape_string(pred_c.logits.value()));
    }
    if (weights.causal < 0.0 || weights.consistency < 0.0) {
        throw std::invalid_argument("compute_losses: loss weights must be non-negative");
    }
    Var lo = cross_entropy(pred_v.logits, target);
    Var lc = cross_entropy(pred_c.logits, target);
    Var la = kl_divergence(pred_v.logits, pred_c.logits);
    LossBreakdown out;
    out.weights = weights;
    out.total_var = add(add(lo, scale(lc, weights.causal)), scale(la, weights.consistency));
    out.original = lo.item();
    out.causal = lc.item();
    out.consistency = la.item();
    out.total = out.total_var.item();
    return out;
}

LossBreakdown compute_backbone_loss(const AnswerPrediction& pred_v, int target) {
    LossBreakdown out;
    out.weights = {0.0, 0.0};
    out.total_var = cross_entropy(pred_v.logits, target);
    out.original = out.total_var.item();
    out.total = out.original;
    return out;
}

}  // namespace cmqr
