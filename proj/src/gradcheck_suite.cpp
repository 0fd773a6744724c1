#include "cmqr/gradcheck_suite.hpp"

#include "cmqr/ecsl.hpp"
#include "cmqr/fusion.hpp"
#include "cmqr/ivlt.hpp"
#include "cmqr/lgcam.hpp"
#include "cmqr/linguistic.hpp"
#include "cmqr/model.hpp"

#include <chrono>
#include <functional>

namespace cmqr {

namespace {

Matrix random_matrix(Rng& rng, Index rows, Index cols, Scalar scale = 1.0) {
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
    return m;
}

struct Runner {
    std::uint64_t seed;
    const GradCheckSuiteOptions& options;
    std::vector<GradCheckCase> cases;

    void run(const std::string& name, bool elementwise, ParameterStore& store, const ScalarFunction& f) {
        GradCheckCase c;
        c.name = name;
        c.elementwise = elementwise;
        c.tolerance = elementwise ? options.elementwise_tolerance : options.module_tolerance;
        const auto t0 = std::chrono::steady_clock::now();
        c.report = finite_diff_check(store, f, options.check);
        c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        cases.push_back(std::move(c));
    }

    // One parameter X fed through a primitive op, read out against fixed weights.
    void unary(const std::string& name, Index rows, Index cols, const std::function<Var(const Var&)>& op) {
        ParameterStore store;
        Rng rng(derive_seed(seed, "gradcheck/" + name));
        store.add("x", random_matrix(rng, rows, cols));
        const Matrix w = random_matrix(rng, rows, cols);
        run(name, true, store, [&](Tape& t) {
            return sum(hadamard(op(store.on(t, "x")), t.constant(w)));
        });
    }
};

}  // namespace

std::vector<GradCheckCase> run_gradcheck_suite(std::uint64_t seed, const GradCheckSuiteOptions& options) {
    Runner r{seed, options, {}};

    // Primitive ops.
    r.unary("op/gelu", 3, 4, [](const Var& x) { return gelu(x); });
    r.unary("op/sigmoid", 3, 4, [](const Var& x) { return sigmoid(x); });
    r.unary("op/tanh", 3, 4, [](const Var& x) { return tanh(x); });
    r.unary("op/softmax_rows", 3, 4, [](const Var& x) { return softmax(x, 1); });
    r.unary("op/softmax_cols", 3, 4, [](const Var& x) { return softmax(x, 0); });
    r.unary("op/log_softmax", 3, 4, [](const Var& x) { return log_softmax(x, 1); });
    r.unary("op/layer_norm", 3, 4, [](const Var& x) {
        Tape& t = *x.tape();
        return layer_norm(x, t.constant(Matrix::Constant(1, 4, 1.3)), t.constant(Matrix::Constant(1, 4, 0.2)));
    });
    {
        ParameterStore store;
        Rng rng(derive_seed(seed, "gradcheck/op/cross_entropy"));
        store.add("logits", random_matrix(rng, 1, 5));
        r.run("op/cross_entropy", true, store, [&](Tape& t) { return cross_entropy(store.on(t, "logits"), 2); });
    }
    {
        ParameterStore store;
        Rng rng(derive_seed(seed, "gradcheck/op/kl"));
        store.add("p", random_matrix(rng, 1, 5));
        store.add("q", random_matrix(rng, 1, 5));
        r.run("op/kl_divergence", true, store, [&](Tape& t) {
            return kl_divergence(store.on(t, "p"), store.on(t, "q"));
        });
    }
    {
        ParameterStore store;
        Rng rng(derive_seed(seed, "gradcheck/op/attention"));
        store.add("q", random_matrix(rng, 2, 4));
        store.add("k", random_matrix(rng, 3, 4));
        store.add("v", random_matrix(rng, 3, 4));
        const Matrix w = random_matrix(rng, 2, 4);
        r.run("op/multi_head_attention", true, store, [&](Tape& t) {
            Var o = multi_head_attention(store.on(t, "q"), store.on(t, "k"), store.on(t, "v"), 2);
            return sum(hadamard(o, t.constant(w)));
        });
    }

    // Linguistic encoder.
    {
        ParameterStore store;
        LinguisticConfig cfg;
        cfg.vocab_size = 6;
        cfg.embed_dim = 4;
        cfg.width = 4;
        register_linguistic(store, seed, cfg);
        Rng rng(derive_seed(seed, "gradcheck/linguistic"));
        const Matrix w = random_matrix(rng, 3, 4);
        const Matrix wp = random_matrix(rng, 1, 4);
        TokenSequence seq{{1, 4, 2}};
        r.run("module/linguistic_encoder", false, store, [&](Tape& t) {
            auto f = encode_text(t, store, cfg, seq);
            return add(sum(hadamard(f.tokens, t.constant(w))), sum(hadamard(f.pooled, t.constant(wp))));
        });
    }

    // ECSL scene probabilities.
    {
        ParameterStore store;
        LinguisticConfig lc;
        lc.vocab_size = 6;
        lc.embed_dim = 4;
        lc.width = 4;
        register_linguistic(store, seed, lc);
        EcslConfig ec;
        ec.feature_dim = 3;
        ec.text_width = 4;
        ec.width = 4;
        register_ecsl(store, seed, ec);
        Rng rng(derive_seed(seed, "gradcheck/ecsl"));
        ClipFeatures clips;
        clips.frames = 2;
        clips.appearance = random_matrix(rng, 8, 3);
        clips.motion = random_matrix(rng, 4, 3);
        const Matrix w = random_matrix(rng, 1, 4);
        TokenSequence seq{{0, 5}};
        r.run("module/ecsl_probabilities", false, store, [&](Tape& t) {
            auto q = encode_text(t, store, lc, seq);
            auto prior = scene_probabilities(t, store, scene_from_clips(t, clips), q);
            return add(sum(hadamard(prior.probs, t.constant(w))), sum(hadamard(prior.log_probs, t.constant(w))));
        });
    }

    // LGCAM and the front-door features.
    {
        ParameterStore store;
        register_lgcam(store, seed, "ll", 4);
        register_lgcam(store, seed, "lg", 4);
        Rng rng(derive_seed(seed, "gradcheck/lgcam"));
        store.add("local", random_matrix(rng, 3, 4));
        Rng krng(derive_seed(seed, "gradcheck/lgcam/kmeans"));
        const GlobalDictionary dict = build_dictionary(random_matrix(rng, 12, 4), 3, 20, krng);
        const Matrix w = random_matrix(rng, 3, 8);
        r.run("module/lgcam", false, store, [&](Tape& t) {
            Rng sample(derive_seed(seed, "gradcheck/lgcam/sample"));
            auto f = front_door_features(t, store, store.on(t, "local"), dict, "ll", "lg", sample);
            return sum(hadamard(f.combined, t.constant(w)));
        });
    }

    // IVLT.
    {
        ParameterStore store;
        IvltConfig cfg;
        cfg.text_width = 4;
        cfg.width = 8;
        cfg.clips = 3;
        cfg.layers = 2;
        cfg.heads = 2;
        cfg.ff_hidden = 8;
        register_ivlt(store, seed, cfg);
        Rng rng(derive_seed(seed, "gradcheck/ivlt"));
        store.add("question", random_matrix(rng, 2, 4));
        store.add("app", random_matrix(rng, 3, 8));
        store.add("mot", random_matrix(rng, 3, 8));
        const Matrix wv = random_matrix(rng, 1, 16);
        const Matrix ws = random_matrix(rng, 1, 16);
        r.run("module/ivlt", false, store, [&](Tape& t) {
            auto o = ivlt_forward(t, store, cfg, store.on(t, "question"), store.on(t, "app"), store.on(t, "mot"));
            return add(sum(hadamard(o.visual, t.constant(wv))), sum(hadamard(o.semantics, t.constant(ws))));
        });
    }

    // Fusion and decoder.
    {
        ParameterStore store;
        FusionConfig cfg;
        cfg.width = 6;
        cfg.decoder_hidden = 5;
        cfg.n_answers = 3;
        register_fusion(store, seed, cfg);
        register_decoder(store, seed, "dec", cfg);
        Rng rng(derive_seed(seed, "gradcheck/fusion"));
        for (const char* n : {"f1", "l1", "f2", "l2"}) store.add(n, random_matrix(rng, 1, 6));
        r.run("module/fusion_decoder", false, store, [&](Tape& t) {
            auto fused = fuse(t, store, store.on(t, "f1"), store.on(t, "l1"), store.on(t, "f2"), store.on(t, "l2"));
            return cross_entropy(decode_answer(t, store, fused, "dec").logits, 1);
        });
    }

    // Full composite loss through both passes.
    {
        ModelConfig mc;
        mc.vocab_size = 5;
        mc.feature_dim = 3;
        mc.clips = 3;
        mc.n_answers = 3;
        mc.width = 2;
        mc.layers = 1;
        mc.heads = 2;
        mc.n_clusters = 2;
        mc.k_sel = 1;
        mc.decoder_hidden = 4;
        Model model = make_model(mc, seed);
        Rng rng(derive_seed(seed, "gradcheck/full"));
        Episode e;
        e.clips.frames = 2;
        e.clips.appearance = random_matrix(rng, 6, 3);
        e.clips.motion = random_matrix(rng, 3, 3);
        e.question.ids = {1, 3};
        e.answer = 2;
        std::vector<Episode> bank;
        for (int i = 0; i < 4; ++i) {
            Episode b = e;
            b.clips.appearance = random_matrix(rng, 6, 3);
            b.clips.motion = random_matrix(rng, 3, 3);
            bank.push_back(b);
        }
        rebuild_dictionaries(model, bank, 20, seed);
        ForwardOptions fo;
        fo.train = true;
        fo.temperature = 0.7;
        fo.stream = derive_seed(seed, "gradcheck/full/stream");
        fo.hard_mask = false;
        r.run("module/full_loss", false, model.store, [&](Tape& t) {
            return forward(t, model, e, fo).loss.total_var;
        });
    }
    return r.cases;
}

}  // namespace cmqr
