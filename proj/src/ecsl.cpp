#include "cmqr/ecsl.hpp"

#include "cmqr/layers.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace cmqr {

Matrix ClipFeatures::summary() const {
    const Index k = clips();
    Matrix out(k, dim());
    for (Index i = 0; i < k; ++i) {
        out.row(i) = appearance.middleRows(i * frames, frames).colwise().mean();
    }
    return out;
}

void ClipFeatures::validate() const {
    if (clips() < 2) throw std::invalid_argument("ClipFeatures: need at least 2 clips");
    if (frames < 1) throw std::invalid_argument("ClipFeatures: need at least 1 frame per clip");
    if (appearance.rows() != clips() * frames || appearance.cols() != dim()) {
        throw DimensionError("ClipFeatures: appearance " + shape_string(appearance) +
                             " inconsistent with motion " + shape_string(motion) + " and " +
                             std::to_string(frames) + " frames");
    }
    if (!appearance.allFinite() || !motion.allFinite()) {
        throw NumericError("ClipFeatures: non-finite feature values");
    }
}

SceneFeatures scene_from_clips(Tape& tape, const ClipFeatures& v) {
    return {tape.constant(v.summary()), tape.constant(v.motion)};
}

void register_ecsl(ParameterStore& store, std::uint64_t seed, const EcslConfig& cfg) {
    register_linear(store, seed, "ecsl/g_v", cfg.feature_dim, cfg.width);
    register_linear(store, seed, "ecsl/g_q", cfg.text_width, cfg.width);
}

ScenePrior scene_probabilities(Tape& tape, ParameterStore& store, const SceneFeatures& v,
                               const LinguisticFeatures& q) {
    Var clips = linear(tape, store, v.summary, "ecsl/g_v");
    Var question = linear(tape, store, q.pooled, "ecsl/g_q");
    Var scores = matmul(question, transpose(clips));  // 1 x K
    return {softmax(scores, 1), log_softmax(scores, 1)};
}

namespace {

void check_selection(Index k, const SelectOptions& options) {
    if (!(options.temperature > 0.0)) {
        throw std::invalid_argument("select_causal_scene: temperature must be positive");
    }
    if (options.k_sel < 1 || options.k_sel >= k) {
        throw std::invalid_argument("select_causal_scene: k_sel " + std::to_string(options.k_sel) +
                                    " outside [1, " + std::to_string(k) + ")");
    }
}

std::vector<int> top_k(const Matrix& scores, int k) {
    std::vector<int> chosen;
    std::vector<bool> taken(static_cast<std::size_t>(scores.size()), false);
    for (int n = 0; n < k; ++n) {
        int best = -1;
        for (Index i = 0; i < scores.size(); ++i) {
            if (taken[static_cast<std::size_t>(i)]) continue;
            if (best < 0 || scores.data()[i] > scores.data()[best]) best = static_cast<int>(i);
        }
        taken[static_cast<std::size_t>(best)] = true;
        chosen.push_back(best);
    }
    return chosen;
}

CausalSelection finish(const ScenePrior& prior, const SceneFeatures& v, CausalSceneMask mask,
                       const Var& soft, const std::vector<int>& chosen) {
    Matrix hard = Matrix::Zero(1, prior.probs.cols());
    for (int c : chosen) hard(0, c) = 1.0;
    mask.probs = prior.probs.value();
    mask.selected = chosen;
    mask.selector_var = mask.hard ? straight_through(hard, soft) : soft;
    mask.selector = mask.selector_var.value();
    CausalSelection out;
    out.scene = {scale_rows(v.summary, mask.selector_var), scale_rows(v.motion, mask.selector_var)};
    out.mask = std::move(mask);
    return out;
}

}  // namespace

CausalSelection select_causal_scene(const ScenePrior& prior, const SceneFeatures& v,
                                    const SelectOptions& options, Rng* rng) {
    const Index k = prior.probs.cols();
    if (v.summary.rows() != k || v.motion.rows() != k) {
        throw DimensionError("select_causal_scene: prior over " + std::to_string(k) +
                             " clips, features " + shape_string(v.summary.value()));
    }
    check_selection(k, options);
    Tape& tape = *prior.log_probs.tape();

    Matrix noise = Matrix::Zero(1, k);
    if (options.stochastic) {
        if (rng == nullptr) throw std::invalid_argument("select_causal_scene: stochastic without rng");
        for (Index i = 0; i < k; ++i) noise(0, i) = -std::log(-std::log(rng->uniform_open()));
    }
    const Matrix perturbed = prior.log_probs.value() + noise;
    const auto chosen = top_k(perturbed, options.k_sel);

    Var logits = add(prior.log_probs, tape.constant(noise));
    Var soft = softmax(scale(logits, 1.0 / options.temperature), 1);

    CausalSceneMask mask;
    mask.hard = options.hard;
    mask.temperature = options.temperature;
    mask.k_sel = options.k_sel;
    return finish(prior, v, std::move(mask), soft, chosen);
}

CausalSelection fixed_causal_scene(const ScenePrior& prior, const SceneFeatures& v,
                                   const std::vector<int>& clips) {
    const Index k = prior.probs.cols();
    for (int c : clips) {
        if (c < 0 || c >= k) throw std::out_of_range("fixed_causal_scene: clip index out of range");
    }
    CausalSceneMask mask;
    mask.hard = true;
    mask.k_sel = static_cast<int>(clips.size());
    return finish(prior, v, std::move(mask), prior.probs, clips);
}

SceneFeatures complement_scene(const CausalSceneMask& mask, const SceneFeatures& v) {
    Var keep = one_minus(mask.selector_var);
    return {scale_rows(v.summary, keep), scale_rows(v.motion, keep)};
}

ClipFeatures apply_selector(const ClipFeatures& v, const Matrix& selector) {
    if (selector.size() != v.clips()) throw DimensionError("apply_selector: selector length mismatch");
    ClipFeatures out = v;
    for (Index i = 0; i < v.clips(); ++i) {
        const Scalar s = selector.data()[i];
        out.appearance.middleRows(i * v.frames, v.frames) *= s;
        out.motion.row(i) *= s;
    }
    return out;
}

ClipFeatures apply_complement(const ClipFeatures& v, const Matrix& selector) {
    return apply_selector(v, (1.0 - selector.array()).matrix());
}

}  // namespace cmqr
