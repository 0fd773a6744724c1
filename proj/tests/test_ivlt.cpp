#include "cmqr/gradcheck.hpp"
#include "cmqr/ivlt.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace cmqr;
using namespace cmqr::testing;

namespace {

IvltConfig toy_config(Index clips = 3, int layers = 2) {
    IvltConfig cfg;
    cfg.text_width = 3;
    cfg.width = 4;
    cfg.clips = clips;
    cfg.layers = layers;
    cfg.heads = 2;
    cfg.ff_hidden = 5;
    return cfg;
}

// With a single context row every query attends with weight 1.
Matrix plain_singleton_mma(const ParameterStore& s, const std::string& p, const Matrix& context, Index n_queries) {
    const Matrix projected = plain_linear(s, p + "/wo", plain_linear(s, p + "/wv", context));
    return projected.replicate(n_queries, 1);
}

Matrix plain_singleton_stream(const ParameterStore& s, const std::string& prefix, Matrix x, const Matrix& context,
                              int layers) {
    for (int r = 1; r <= layers; ++r) {
        const std::string p = prefix + "/r" + std::to_string(r);
        const Matrix u = plain_layer_norm(s, p + "/ln_in", x) + plain_singleton_mma(s, p + "/attn", context, x.rows());
        x = u + plain_feed_forward(s, p + "/ff", plain_layer_norm(s, p + "/ln_ff", u));
    }
    return x;
}

Matrix single_head_oracle(const Matrix& q, const Matrix& k, const Matrix& v) {
    Matrix scores = q * k.transpose() / std::sqrt(static_cast<Scalar>(q.cols()));
    for (Index i = 0; i < scores.rows(); ++i) {
        const Scalar top = scores.row(i).maxCoeff();
        Scalar z = 0.0;
        for (Index j = 0; j < scores.cols(); ++j) {
            scores(i, j) = std::exp(scores(i, j) - top);
            z += scores(i, j);
        }
        scores.row(i) /= z;
    }
    return scores * v;
}

}  // namespace

TEST(Positional, ZeroTableIsIdentityAndRowsKeepTheirPosition) {
    Rng rng(1);
    const Matrix f = random_matrix(rng, 3, 4);
    const Matrix p = random_matrix(rng, 3, 4);
    Tape t;
    EXPECT_EQ(add_positional(t.constant(f), t.constant(Matrix::Zero(3, 4))).value(), f);
    Matrix swapped = f;
    swapped.row(0).swap(swapped.row(2));
    const Matrix a = add_positional(t.constant(f), t.constant(p)).value();
    const Matrix b = add_positional(t.constant(swapped), t.constant(p)).value();
    EXPECT_EQ(b.row(0), Matrix(f.row(2) + p.row(0)));
    EXPECT_EQ(b.row(2), Matrix(f.row(0) + p.row(2)));
    EXPECT_NE(b.row(0), a.row(2));
    EXPECT_THROW(add_positional(t.constant(f), t.constant(Matrix::Zero(2, 4))), DimensionError);
}

TEST(Positional, GradientMatchesFiniteDifferences) {
    Rng rng(2);
    const Matrix f = random_matrix(rng, 3, 4);
    const Matrix w = random_matrix(rng, 3, 4);
    EXPECT_LE(op_gradient_error([&](const Var& p) { return gelu(add_positional(p.tape()->constant(f), p)); },
                                random_matrix(rng, 3, 4), w),
              1e-6);
}

TEST(Mma, SingletonContextGivesProjectedRowForEveryQuery) {
    ParameterStore store;
    const auto cfg = toy_config();
    register_mtb(store, 3, "s", cfg);
    randomize_offsets(store, 3);
    Rng rng(3);
    const Matrix ctx = random_matrix(rng, 1, 4);
    Tape t;
    Matrix weights;
    const Matrix out = mma(t, store, t.constant(random_matrix(rng, 3, 4)), t.constant(ctx), "s/r1/attn", 2, &weights).value();
    EXPECT_EQ(weights, Matrix::Ones(6, 1));
    EXPECT_LE((out - plain_singleton_mma(store, "s/r1/attn", ctx, 3)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Mma, IdenticalContextRowsMakeAttentionIrrelevant) {
    ParameterStore store;
    register_mtb(store, 4, "s", toy_config());
    randomize_offsets(store, 4);
    Rng rng(4);
    const Matrix ctx = random_matrix(rng, 1, 4).replicate(3, 1);
    Tape t;
    const Matrix out = mma(t, store, t.constant(random_matrix(rng, 2, 4, 3.0)), t.constant(ctx), "s/r1/attn", 2).value();
    const Matrix expected = plain_singleton_mma(store, "s/r1/attn", ctx.topRows(1), 2);
    EXPECT_LE((out - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Mma, SingleHeadMatchesStraightLineOracle) {
    ParameterStore store;
    auto cfg = toy_config();
    cfg.heads = 1;
    register_mtb(store, 5, "s", cfg);
    randomize_offsets(store, 5);
    Rng rng(5);
    for (Index nq = 1; nq <= 3; ++nq) {
        for (Index nc = 1; nc <= 3; ++nc) {
            const Matrix x = random_matrix(rng, nq, 4);
            const Matrix c = random_matrix(rng, nc, 4);
            Tape t;
            const Matrix out = mma(t, store, t.constant(x), t.constant(c), "s/r1/attn", 1).value();
            const std::string p = "s/r1/attn";
            const Matrix expected = plain_linear(
                store, p + "/wo",
                single_head_oracle(plain_linear(store, p + "/wq", x), plain_linear(store, p + "/wk", c),
                                   plain_linear(store, p + "/wv", c)));
            EXPECT_LE((out - expected).cwiseAbs().maxCoeff(), 1e-10);
        }
    }
}

TEST(MtbStream, ZeroedOutputProjectionsLeaveTheInputNorm) {
    ParameterStore store;
    register_mtb(store, 6, "s", toy_config(3, 1));
    randomize_offsets(store, 6);
    for (const char* n : {"s/r1/attn/wo/w", "s/r1/attn/wo/b", "s/r1/ff/out/w", "s/r1/ff/out/b"}) store.at(n).value.setZero();
    Rng rng(6);
    const Matrix q = random_matrix(rng, 2, 4);
    Tape t;
    const Matrix out = mtb_question_stream(t, store, t.constant(q), t.constant(random_matrix(rng, 3, 4)), "s", 1, 2).value();
    EXPECT_LE((out - plain_layer_norm(store, "s/r1/ln_in", q)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(MtbStream, ShapeIsPreservedForAnyDepth) {
    Rng rng(7);
    for (int layers : {1, 2, 3}) {
        ParameterStore store;
        register_mtb(store, 7, "s", toy_config(3, layers));
        Tape t;
        const Matrix q = mtb_question_stream(t, store, t.constant(random_matrix(rng, 2, 4)),
                                             t.constant(random_matrix(rng, 5, 4)), "s", layers, 2)
                             .value();
        EXPECT_EQ(q.rows(), 2);
        EXPECT_EQ(q.cols(), 4);
        const Matrix v = mtb_visual_stream(t, store, t.constant(random_matrix(rng, 5, 4)),
                                           t.constant(random_matrix(rng, 2, 4)), "s", layers, 2)
                             .value();
        EXPECT_EQ(v.rows(), 5);
        EXPECT_EQ(v.cols(), 4);
    }
}

TEST(MtbStream, IdenticalContextGivesEveryQueryTheSameAttentionTerm) {
    ParameterStore store;
    register_mtb(store, 8, "s", toy_config(3, 1));
    randomize_offsets(store, 8);
    Rng rng(8);
    const Matrix visual = random_matrix(rng, 4, 4);
    const Matrix semantics = random_matrix(rng, 1, 4).replicate(2, 1);
    Tape t;
    const Matrix contribution = mma(t, store, t.constant(visual), t.constant(semantics), "s/r1/attn", 2).value();
    for (Index i = 1; i < 4; ++i) EXPECT_LE((contribution.row(i) - contribution.row(0)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(MtbStream, GradientsMatchFiniteDifferences) {
    ParameterStore store;
    register_mtb(store, 9, "s", toy_config(3, 2));
    randomize_offsets(store, 9);
    Rng rng(9);
    const Matrix q = random_matrix(rng, 2, 4);
    const Matrix c = random_matrix(rng, 3, 4);
    const Matrix w = random_matrix(rng, 2, 4);
    const auto report = finite_diff_check(store, [&](Tape& t) {
        return sum(hadamard(mtb_question_stream(t, store, t.constant(q), t.constant(c), "s", 2, 2), t.constant(w)));
    });
    EXPECT_LE(report.max_relative_error, 1e-4);
    const Matrix wv = random_matrix(rng, 3, 4);
    const auto visual = finite_diff_check(store, [&](Tape& t) {
        return sum(hadamard(mtb_visual_stream(t, store, t.constant(c), t.constant(q), "s", 2, 2), t.constant(wv)));
    });
    EXPECT_LE(visual.max_relative_error, 1e-4);
}

TEST(Ivlt, SingleClipSingleTokenMatchesStraightLineEvaluation) {
    ParameterStore store;
    const auto cfg = toy_config(1, 2);
    register_ivlt(store, 10, cfg);
    randomize_offsets(store, 10);
    Rng rng(10);
    store.at("ivlt/pos_a").value = random_matrix(rng, 1, 4, 0.2);
    store.at("ivlt/pos_m").value = random_matrix(rng, 1, 4, 0.2);
    const Matrix question = random_matrix(rng, 1, 3);
    const Matrix app = random_matrix(rng, 1, 4);
    const Matrix mot = random_matrix(rng, 1, 4);
    Tape t;
    const auto out = ivlt_forward(t, store, cfg, t.constant(question), t.constant(app), t.constant(mot));

    const Matrix q0 = plain_linear(store, "ivlt/q_proj", question);
    const Matrix fa = app + store.at("ivlt/pos_a").value;
    const Matrix fm = mot + store.at("ivlt/pos_m").value;
    const Matrix la = plain_singleton_stream(store, "ivlt/qa", q0, fa, 2);
    const Matrix lm = plain_singleton_stream(store, "ivlt/qm", q0, fm, 2);
    const Matrix va = plain_singleton_stream(store, "ivlt/as", fa, la, 2);
    const Matrix vm = plain_singleton_stream(store, "ivlt/ms", fm, lm, 2);
    Matrix visual(1, 8), semantics(1, 8);
    visual << va, vm;
    semantics << la, lm;
    EXPECT_LE((out.visual.value() - visual).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LE((out.semantics.value() - semantics).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Ivlt, LayoutAndAttentionSimplex) {
    ParameterStore store;
    const auto cfg = toy_config(3, 2);
    register_ivlt(store, 11, cfg);
    Rng rng(11);
    Tape t;
    const auto out = ivlt_forward(t, store, cfg, t.constant(random_matrix(rng, 2, 3)), t.constant(random_matrix(rng, 3, 4)),
                                  t.constant(random_matrix(rng, 3, 4)));
    EXPECT_EQ(out.visual.cols(), 2 * cfg.width);
    EXPECT_EQ(out.semantics.cols(), 2 * cfg.width);
    EXPECT_EQ(out.visual_appearance.rows(), 3);
    EXPECT_EQ(out.semantics_motion.rows(), 2);
    EXPECT_EQ(Matrix(out.visual.value().leftCols(4)), Matrix(out.visual_appearance.value().colwise().mean()));
    EXPECT_EQ(Matrix(out.semantics.value().rightCols(4)), Matrix(out.semantics_motion.value().colwise().mean()));
    ASSERT_EQ(out.attention.size(), 8u);
    for (const auto& a : out.attention) {
        for (Index i = 0; i < a.rows(); ++i) EXPECT_NEAR(a.row(i).sum(), 1.0, 1e-9);
    }
}

TEST(Ivlt, SharedStreamWeights) {
    ParameterStore shared;
    auto cfg = toy_config(3, 1);
    cfg.share_stream_weights = true;
    register_ivlt(shared, 12, cfg);
    EXPECT_TRUE(shared.contains("ivlt/q_shared/r1/attn/wq/w"));
    EXPECT_FALSE(shared.contains("ivlt/qa/r1/attn/wq/w"));
    auto bad = toy_config();
    bad.heads = 3;
    EXPECT_THROW(validate(bad), std::invalid_argument);
}

TEST(Ivlt, EndToEndGradientMatchesFiniteDifferences) {
    ParameterStore store;
    const auto cfg = toy_config(3, 2);
    register_ivlt(store, 13, cfg);
    randomize_offsets(store, 13);
    Rng rng(13);
    const Matrix question = random_matrix(rng, 2, 3);
    const Matrix app = random_matrix(rng, 3, 4);
    const Matrix mot = random_matrix(rng, 3, 4);
    const Matrix wv = random_matrix(rng, 1, 8);
    const Matrix ws = random_matrix(rng, 1, 8);
    const auto report = finite_diff_check(store, [&](Tape& t) {
        const auto o = ivlt_forward(t, store, cfg, t.constant(question), t.constant(app), t.constant(mot));
        return add(sum(hadamard(o.visual, t.constant(wv))), sum(hadamard(o.semantics, t.constant(ws))));
    });
    EXPECT_LE(report.max_relative_error, 1e-4);
}
