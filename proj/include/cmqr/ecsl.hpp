#pragma once

// Explicit causal scene learning: question-conditioned per-clip scene
// probabilities and a Gumbel-Softmax straight-through clip selector.

#include "cmqr/linguistic.hpp"
#include "cmqr/rng.hpp"

#include <vector>

namespace cmqr {

/// Raw per-video features. `appearance` stacks the frames of each clip
/// clip-major: row (clip * frames + frame).
struct ClipFeatures {
    Matrix appearance;  ///< (K * T) x d
    Matrix motion;      ///< K x d
    Index frames = 1;

    Index clips() const { return motion.rows(); }
    Index dim() const { return motion.cols(); }
    /// K x d frame mean of the appearance features.
    Matrix summary() const;
    void validate() const;
};

/// Clip-level view of a video on a tape; the unit ECSL masks and the front-door
/// projections consume.
struct SceneFeatures {
    Var summary;  ///< K x d
    Var motion;   ///< K x d
};

SceneFeatures scene_from_clips(Tape& tape, const ClipFeatures& v);

struct ScenePrior {
    Var probs;      ///< 1 x K, on the simplex
    Var log_probs;  ///< 1 x K
};

struct CausalSceneMask {
    Matrix probs;     ///< 1 x K
    Matrix selector;  ///< 1 x K forward value of S
    Var selector_var;  ///< S on the tape (straight-through when hard)
    std::vector<int> selected;  ///< chosen clips, in selection order
    bool hard = true;
    Scalar temperature = 1.0;
    int k_sel = 1;
};

struct SelectOptions {
    Scalar temperature = 1.0;
    int k_sel = 1;
    bool hard = true;
    /// Adds Gumbel noise; evaluation turns it off for deterministic argmax.
    bool stochastic = true;
};

struct EcslConfig {
    Index feature_dim = 16;
    Index text_width = 32;
    Index width = 32;
};

void register_ecsl(ParameterStore& store, std::uint64_t seed, const EcslConfig& cfg);

/// softmax over clips of G_v(clip summaries) . G_q(pooled question)^T.
ScenePrior scene_probabilities(Tape& tape, ParameterStore& store, const SceneFeatures& v,
                               const LinguisticFeatures& q);

struct CausalSelection {
    SceneFeatures scene;  ///< clips weighted by S
    CausalSceneMask mask;
};

/// Throws std::invalid_argument for temperature <= 0 or k_sel outside [1, K).
/// `rng` may be null only when `options.stochastic` is false.
CausalSelection select_causal_scene(const ScenePrior& prior, const SceneFeatures& v,
                                    const SelectOptions& options, Rng* rng);

/// Forces a selection of the given clips (oracle-mask evaluation).
CausalSelection fixed_causal_scene(const ScenePrior& prior, const SceneFeatures& v,
                                   const std::vector<int>& clips);

/// Clips weighted by (1 - S).
SceneFeatures complement_scene(const CausalSceneMask& mask, const SceneFeatures& v);

// Raw-feature counterparts (no tape) used for dumps and the partition identity.
ClipFeatures apply_selector(const ClipFeatures& v, const Matrix& selector);
ClipFeatures apply_complement(const ClipFeatures& v, const Matrix& selector);

}  // namespace cmqr
