#include "cmqr/model.hpp"

#include "cmqr/layers.hpp"

#include <stdexcept>

namespace cmqr {

void ModelConfig::validate() const {
    auto require = [](bool ok, const std::string& what) {
        if (!ok) throw std::invalid_argument("ModelConfig: " + what);
    };
    require(vocab_size >= 1, "vocab_size must be >= 1");
    require(feature_dim >= 1, "feature_dim must be >= 1");
    require(clips >= 2, "clips must be >= 2");
    require(n_answers >= 2, "n_answers must be >= 2");
    require(width >= 1, "width must be >= 1");
    require(layers >= 1, "layers must be >= 1");
    require(heads >= 1 && (2 * width) % heads == 0, "heads must divide 2 * width");
    require(n_clusters >= 1, "n_clusters must be >= 1");
    require(k_sel >= 1 && k_sel < clips, "k_sel must lie in [1, clips)");
    require(decoder_hidden >= 1, "decoder_hidden must be >= 1");
    require(causal_branch || !ecsl, "ecsl requires causal_branch");
}

LinguisticConfig ModelConfig::linguistic() const {
    LinguisticConfig c;
    c.vocab_size = vocab_size;
    c.embed_dim = static_cast<int>(width);
    c.width = static_cast<int>(width);
    return c;
}

IvltConfig ModelConfig::ivlt() const {
    IvltConfig c;
    c.text_width = width;
    c.width = 2 * width;
    c.clips = clips;
    c.layers = layers;
    c.heads = heads;
    c.ff_hidden = 2 * width;
    return c;
}

FusionConfig ModelConfig::fusion() const {
    FusionConfig c;
    c.width = 4 * width;
    c.decoder_hidden = decoder_hidden;
    c.n_answers = n_answers;
    return c;
}

EcslConfig ModelConfig::ecsl_config() const {
    EcslConfig c;
    c.feature_dim = feature_dim;
    c.text_width = width;
    c.width = width;
    return c;
}

Model make_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model m;
    m.config = cfg;
    auto& s = m.store;
    register_linguistic(s, seed, cfg.linguistic());
    register_linear(s, seed, "vis/app", cfg.feature_dim, cfg.width);
    register_linear(s, seed, "vis/mot", cfg.feature_dim, cfg.width);
    for (const char* p : {"vcd/app/ll", "vcd/app/lg", "vcd/mot/ll", "vcd/mot/lg"}) {
        register_lgcam(s, seed, p, cfg.width);
    }
    register_ivlt(s, seed, cfg.ivlt());
    register_fusion(s, seed, cfg.fusion());
    register_decoder(s, seed, "dec/o", cfg.fusion());
    if (cfg.causal_branch) register_decoder(s, seed, "dec/c", cfg.fusion());
    if (cfg.ecsl) register_ecsl(s, seed, cfg.ecsl_config());
    m.appearance_dict.source = "appearance";
    m.motion_dict.source = "motion";
    return m;
}

std::pair<Matrix, Matrix> local_feature_bank(const Model& model,
                                             const std::vector<Episode>& episodes) {
    const auto& s = model.store;
    const Index k = model.config.clips;
    const auto n = static_cast<Index>(episodes.size());
    Matrix summary(n * k, model.config.feature_dim);
    Matrix motion(n * k, model.config.feature_dim);
    for (Index i = 0; i < n; ++i) {
        const auto& clips = episodes[static_cast<std::size_t>(i)].clips;
        if (clips.clips() != k || clips.dim() != model.config.feature_dim) {
            throw DimensionError("local_feature_bank: episode clips " + shape_string(clips.motion) +
                                 " vs model " + std::to_string(k) + " x " +
                                 std::to_string(model.config.feature_dim));
        }
        summary.middleRows(i * k, k) = clips.summary();
        motion.middleRows(i * k, k) = clips.motion;
    }
    Matrix app = summary * s.at("vis/app/w").value;
    app.rowwise() += s.at("vis/app/b").value.row(0);
    Matrix mot = motion * s.at("vis/mot/w").value;
    mot.rowwise() += s.at("vis/mot/b").value.row(0);
    return {std::move(app), std::move(mot)};
}

void rebuild_dictionaries(Model& model, const std::vector<Episode>& episodes, int max_iters,
                          std::uint64_t seed) {
    auto [app, mot] = local_feature_bank(model, episodes);
    Rng ra(derive_seed(seed, "dictionary/appearance"));
    Rng rm(derive_seed(seed, "dictionary/motion"));
    model.appearance_dict = build_dictionary(app, model.config.n_clusters, max_iters, ra);
    model.appearance_dict.source = "appearance";
    model.motion_dict = build_dictionary(mot, model.config.n_clusters, max_iters, rm);
    model.motion_dict.source = "motion";
}

PassOutput model_pass(Tape& tape, Model& model, const SceneFeatures& scene,
                      const LinguisticFeatures& question, Rng& rng) {
    auto& s = model.store;
    Var local_a = linear(tape, s, scene.summary, "vis/app");
    Var local_m = linear(tape, s, scene.motion, "vis/mot");
    auto fa = front_door_features(tape, s, local_a, model.appearance_dict, "vcd/app/ll", "vcd/app/lg", rng);
    auto fm = front_door_features(tape, s, local_m, model.motion_dict, "vcd/mot/ll", "vcd/mot/lg", rng);
    auto out = ivlt_forward(tape, s, model.config.ivlt(), question.tokens, fa.combined, fm.combined);
    return {out.visual, out.semantics};
}

ForwardResult forward(Tape& tape, Model& model, const Episode& episode, const ForwardOptions& options) {
    if (model.appearance_dict.size() == 0 || model.motion_dict.size() == 0) {
        throw std::logic_error("forward: dictionaries have not been built");
    }
    const auto& cfg = model.config;
    auto& s = model.store;
    ForwardResult r;
    SceneFeatures scene = scene_from_clips(tape, episode.clips);
    LinguisticFeatures q = encode_text(tape, s, cfg.linguistic(), episode.question);

    Rng rng_v(derive_seed(options.stream, "pass/v"));
    PassOutput v = model_pass(tape, model, scene, q, rng_v);

    if (!cfg.causal_branch) {
        r.pred_v = decode_answer(tape, s, fuse(tape, s, v.visual, v.semantics, v.visual, v.semantics), "dec/o");
        r.loss = compute_backbone_loss(r.pred_v, episode.answer);
        return r;
    }

    PassOutput c = v;
    if (cfg.ecsl) {
        ScenePrior prior = scene_probabilities(tape, s, scene, q);
        CausalSelection sel;
        if (options.forced_clips != nullptr) {
            sel = fixed_causal_scene(prior, scene, *options.forced_clips);
        } else {
            SelectOptions so;
            so.temperature = options.temperature;
            so.k_sel = cfg.k_sel;
            so.stochastic = options.train;
            so.hard = options.hard_mask;
            Rng rng_g(derive_seed(options.stream, "gumbel"));
            sel = select_causal_scene(prior, scene, so, &rng_g);
        }
        r.mask = sel.mask;
        Rng rng_c(derive_seed(options.stream, "pass/c"));
        c = model_pass(tape, model, sel.scene, q, rng_c);
    }

    r.pred_v = decode_answer(tape, s, fuse(tape, s, v.visual, v.semantics, c.visual, c.semantics), "dec/o");
    r.pred_c = decode_answer(tape, s, fuse(tape, s, c.visual, c.semantics, c.visual, c.semantics), "dec/c");
    r.loss = compute_losses(r.pred_v, *r.pred_c, episode.answer, options.weights);
    return r;
}

}  // namespace cmqr
