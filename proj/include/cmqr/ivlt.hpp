#pragma once

// Interactive visual-linguistic transformer: four cross-attention streams
// built from R-layer multi-modal transformer blocks (MTB).
//
//   U_r   = LN(X_{r-1}) + MMA(X_{r-1}, context)
//   X_r   = U_r + sigma(LN(U_r))
//
// Question streams (QA, QM) take the question as X and the causal visual
// features as context; the semantics streams (AS, MS) swap the roles and use
// the question streams' outputs as context.

#include "cmqr/parameters.hpp"

#include <string>
#include <vector>

namespace cmqr {

struct IvltConfig {
    Index text_width = 32;  ///< contextual question width d
    Index width = 64;       ///< stream width (2d)
    Index clips = 8;
    int layers = 2;
    int heads = 4;
    Index ff_hidden = 64;
    /// QA and QM (and AS and MS) use one weight set when true.
    bool share_stream_weights = false;
};

void validate(const IvltConfig& cfg);

/// Registers one MTB stack (`layers` blocks) under `prefix`.
void register_mtb(ParameterStore& store, std::uint64_t seed, const std::string& prefix,
                  const IvltConfig& cfg);
void register_ivlt(ParameterStore& store, std::uint64_t seed, const IvltConfig& cfg);

/// Multi-head cross attention with query/key/value/output projections stored
/// under `prefix` (wq, wk, wv, wo with biases). `weights_out` receives the
/// stacked per-head attention distributions.
Var mma(Tape& tape, ParameterStore& store, const Var& queries, const Var& context,
        const std::string& prefix, int heads, Matrix* weights_out = nullptr);

Var add_positional(const Var& features, const Var& positional);

/// Applies the MTB recursion `layers` times with `queries` attending to `context`.
Var mtb_stream(Tape& tape, ParameterStore& store, const Var& queries, const Var& context,
               const std::string& prefix, int layers, int heads,
               std::vector<Matrix>* attention_out = nullptr);

/// QA / QM: question semantics conditioned on causal visual features.
inline Var mtb_question_stream(Tape& tape, ParameterStore& store, const Var& question,
                               const Var& visual, const std::string& prefix, int layers, int heads) {
    return mtb_stream(tape, store, question, visual, prefix, layers, heads);
}

/// AS / MS: visual clues conditioned on question semantics.
inline Var mtb_visual_stream(Tape& tape, ParameterStore& store, const Var& visual,
                             const Var& semantics, const std::string& prefix, int layers,
                             int heads) {
    return mtb_stream(tape, store, visual, semantics, prefix, layers, heads);
}

struct IvltOutput {
    Var visual;     ///< F = [mean F_s^a, mean F_s^m], 1 x 2w
    Var semantics;  ///< L = [mean L^a, mean L^m], 1 x 2w
    Var visual_appearance;  ///< F_s^a, K x w
    Var visual_motion;      ///< F_s^m
    Var semantics_appearance;  ///< L^a, L_q x w
    Var semantics_motion;      ///< L^m
    std::vector<Matrix> attention;  ///< every MMA distribution computed
};

/// `question` is L_q x d contextual text; `causal_appearance` and
/// `causal_motion` are K x w front-door features.
IvltOutput ivlt_forward(Tape& tape, ParameterStore& store, const IvltConfig& cfg,
                        const Var& question, const Var& causal_appearance,
                        const Var& causal_motion);

}  // namespace cmqr
