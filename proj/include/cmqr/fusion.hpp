#pragma once

// Cross-modal fusion, answer decoding and the composite objective
// L = L_o + lambda_c * L_c + lambda_a * L_a.

#include "cmqr/parameters.hpp"

#include <string>

namespace cmqr {

struct FusionConfig {
    Index width = 128;  ///< width of pooled IVLT outputs F and L
    Index decoder_hidden = 128;
    int n_answers = 7;
};

void register_fusion(ParameterStore& store, std::uint64_t seed, const FusionConfig& cfg);
void register_decoder(ParameterStore& store, std::uint64_t seed, const std::string& prefix,
                      const FusionConfig& cfg);

/// Gated refinement: g = sigmoid([F, L] W_g + b_g),
/// out = g * L + (1 - g) * tanh([F, L] W_f + b_f).
Var refine_linguistic(Tape& tape, ParameterStore& store, const Var& visual, const Var& semantics);

/// (F_k W_1) * sigmoid(L_j W_2), no biases so a zero visual input maps to zero.
Var condition_visual(Tape& tape, ParameterStore& store, const Var& visual, const Var& refined);

struct FusedFeatures {
    Var linguistic;  ///< [L~_1, L~_2]
    Var visual;      ///< [F~_1, F~_2], F~_k = mean_j condition(F_k, L~_j)
};

FusedFeatures fuse(Tape& tape, ParameterStore& store, const Var& visual_1, const Var& semantics_1,
                   const Var& visual_2, const Var& semantics_2);

struct AnswerPrediction {
    Var logits;  ///< 1 x n_answers
    int predicted = 0;
};

/// Two-layer GELU classifier over [F~, L~] stored under `prefix`.
AnswerPrediction decode_answer(Tape& tape, ParameterStore& store, const FusedFeatures& fused,
                               const std::string& prefix);

struct LossWeights {
    Scalar causal = 0.1;       ///< lambda_c
    Scalar consistency = 0.1;  ///< lambda_a
};

struct LossBreakdown {
    Scalar original = 0.0;     ///< L_o
    Scalar causal = 0.0;       ///< L_c
    Scalar consistency = 0.0;  ///< L_a
    Scalar total = 0.0;
    LossWeights weights;
    Var total_var;
};

/// L_o = XE(pred_v, target), L_c = XE(pred_c, target),
/// L_a = KL(softmax(pred_v) || softmax(pred_c)).
LossBreakdown compute_losses(const AnswerPrediction& pred_v, const AnswerPrediction& pred_c,
                             int target, const LossWeights& weights);

/// The objective without the causal pass: total = L_o.
LossBreakdown compute_backbone_loss(const AnswerPrediction& pred_v, int target);

}  // namespace cmqr
