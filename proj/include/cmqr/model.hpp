#pragma once

// The full CMQR network: question encoder, ECSL clip selection, visual
// front-door features, IVLT and the answer decoders, evaluated as a (v, q)
// pass and a (c, q) pass over the selected causal scene.

#include "cmqr/bench.hpp"
#include "cmqr/ecsl.hpp"
#include "cmqr/fusion.hpp"
#include "cmqr/ivlt.hpp"
#include "cmqr/lgcam.hpp"
#include "cmqr/linguistic.hpp"

#include <optional>
#include <vector>

namespace cmqr {

struct ModelConfig {
    int vocab_size = 12;
    int feature_dim = 16;
    int clips = 8;
    int n_answers = 7;
    Index width = 32;  ///< d
    int layers = 2;    ///< R
    int heads = 4;
    int n_clusters = 8;
    int k_sel = 1;
    Index decoder_hidden = 128;
    /// Second pass, second decoder and the L_c / L_a terms. Off gives the plain backbone.
    bool causal_branch = true;
    /// Learned clip selection. Off with the causal branch on feeds v to both passes.
    bool ecsl = true;

    void validate() const;
    LinguisticConfig linguistic() const;
    IvltConfig ivlt() const;
    FusionConfig fusion() const;
    EcslConfig ecsl_config() const;
};

struct Model {
    ModelConfig config;
    ParameterStore store;
    GlobalDictionary appearance_dict;
    GlobalDictionary motion_dict;
};

/// Registers every parameter of the configured variant. Dictionaries start empty.
Model make_model(const ModelConfig& cfg, std::uint64_t seed);

/// Projected local features F_L for every clip of every episode, stacked, for
/// the appearance and motion streams, computed with the current parameters.
std::pair<Matrix, Matrix> local_feature_bank(const Model& model, const std::vector<Episode>& episodes);

void rebuild_dictionaries(Model& model, const std::vector<Episode>& episodes, int max_iters,
                          std::uint64_t seed);

struct ForwardOptions {
    bool train = true;
    Scalar temperature = 1.0;
    LossWeights weights;
    /// Root of this episode's random streams (global samples, Gumbel noise).
    std::uint64_t stream = 0;
    /// Hard straight-through mask; false uses the soft relaxation (gradient checks).
    bool hard_mask = true;
    /// Forces the causal scene (oracle-mask evaluation).
    const std::vector<int>* forced_clips = nullptr;
};

struct ForwardResult {
    AnswerPrediction pred_v;
    std::optional<AnswerPrediction> pred_c;
    std::optional<CausalSceneMask> mask;
    LossBreakdown loss;
};

struct PassOutput {
    Var visual;
    Var semantics;
};

/// One trip through front-door features and IVLT for a (possibly masked) scene.
PassOutput model_pass(Tape& tape, Model& model, const SceneFeatures& scene,
                      const LinguisticFeatures& question, Rng& rng);

ForwardResult forward(Tape& tape, Model& model, const Episode& episode, const ForwardOptions& options);

}  // namespace cmqr
