#include "cmqr/tensor.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace cmqr;
using namespace cmqr::testing;

namespace {

Matrix to_matrix(std::initializer_list<std::initializer_list<Scalar>> rows) {
    Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.begin()->size()));
    Index i = 0;
    for (const auto& r : rows) {
        Index j = 0;
        for (Scalar v : r) m(i, j++) = v;
        ++i;
    }
    return m;
}

// Plain scaled dot-product attention over one head, written loop by loop.
Matrix attention_oracle(const Matrix& q, const Matrix& k, const Matrix& v) {
    const Index nq = q.rows(), nc = k.rows(), w = q.cols();
    Matrix out = Matrix::Zero(nq, v.cols());
    for (Index i = 0; i < nq; ++i) {
        std::vector<Scalar> scores(static_cast<std::size_t>(nc));
        Scalar top = -1e300;
        for (Index j = 0; j < nc; ++j) {
            Scalar s = 0.0;
            for (Index c = 0; c < w; ++c) s += q(i, c) * k(j, c);
            scores[static_cast<std::size_t>(j)] = s / std::sqrt(static_cast<Scalar>(w));
            top = std::max(top, scores[static_cast<std::size_t>(j)]);
        }
        Scalar z = 0.0;
        for (auto& s : scores) {
            s = std::exp(s - top);
            z += s;
        }
        for (Index j = 0; j < nc; ++j) {
            for (Index c = 0; c < v.cols(); ++c) out(i, c) += scores[static_cast<std::size_t>(j)] / z * v(j, c);
        }
    }
    return out;
}

Scalar plain_kl(const Matrix& p_logits, const Matrix& q_logits) {
    const Matrix p = softmax_rows(p_logits);
    const Matrix q = softmax_rows(q_logits);
    Scalar kl = 0.0;
    for (Index i = 0; i < p.cols(); ++i) kl += p(0, i) * std::log(p(0, i) / q(0, i));
    return kl;
}

}  // namespace

TEST(Matmul, IdentityAndBasisSelection) {
    Tape t;
    const Matrix a = to_matrix({{1, 2}, {3, 4}});
    EXPECT_EQ(matmul(t.constant(Matrix::Identity(2, 2)), t.constant(a)).value(), a);
    EXPECT_EQ(matmul(t.constant(to_matrix({{1, 0}})), t.constant(to_matrix({{2}, {5}}))).value(),
              to_matrix({{2}}));
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
    Rng rng(11);
    const Matrix a = random_matrix(rng, 3, 4);
    const Matrix b = random_matrix(rng, 4, 2);
    const Matrix w = random_matrix(rng, 3, 2);
    EXPECT_LE(op_gradient_error([&](const Var& x) { return matmul(x, x.tape()->constant(b)); }, a, w), 1e-6);
    EXPECT_LE(op_gradient_error([&](const Var& x) { return matmul(x.tape()->constant(a), x); }, b, w), 1e-6);
}

TEST(Matmul, ShapeMismatchThrows) {
    Tape t;
    EXPECT_THROW(matmul(t.constant(Matrix::Zero(2, 3)), t.constant(Matrix::Zero(2, 3))), DimensionError);
}

TEST(Softmax, UniformAndShiftStable) {
    Tape t;
    const Matrix u = softmax(t.constant(Matrix::Zero(1, 3)), 1).value();
    for (Index i = 0; i < 3; ++i) EXPECT_NEAR(u(0, i), 1.0 / 3.0, 1e-15);
    const Matrix big = softmax(t.constant(row({1000, 1000})), 1).value();
    EXPECT_TRUE(big.allFinite());
    EXPECT_DOUBLE_EQ(big(0, 0), 0.5);
    EXPECT_DOUBLE_EQ(big(0, 1), 0.5);
}

TEST(Softmax, JacobianMatchesFiniteDifferences) {
    Rng rng(12);
    const Matrix x = random_matrix(rng, 1, 5);
    for (Index i = 0; i < 5; ++i) {
        Matrix w = Matrix::Zero(1, 5);
        w(0, i) = 1.0;
        EXPECT_LE(op_gradient_error([](const Var& v) { return softmax(v, 1); }, x, w), 1e-6) << "row " << i;
    }
    const Matrix xs = random_matrix(rng, 3, 4);
    const Matrix ws = random_matrix(rng, 3, 4);
    EXPECT_LE(op_gradient_error([](const Var& v) { return softmax(v, 0); }, xs, ws), 1e-6);
    EXPECT_LE(op_gradient_error([](const Var& v) { return log_softmax(v, 1); }, xs, ws), 1e-6);
}

TEST(Softmax, SlicesLieOnTheSimplex) {
    Rng rng(13);
    Tape t;
    for (int trial = 0; trial < 1000; ++trial) {
        const Index rows = 1 + static_cast<Index>(rng.below(4));
        const Index cols = 1 + static_cast<Index>(rng.below(6));
        const Matrix x = random_matrix(rng, rows, cols, 1.0 + 30.0 * rng.uniform());
        for (int axis : {0, 1}) {
            const Matrix p = softmax(t.constant(x), axis).value();
            ASSERT_TRUE(p.allFinite());
            ASSERT_TRUE((p.array() >= 0.0).all());
            const Matrix sums = axis == 1 ? Matrix(p.rowwise().sum()) : Matrix(p.colwise().sum());
            for (Index i = 0; i < sums.size(); ++i) ASSERT_NEAR(sums.data()[i], 1.0, 1e-9);
        }
        t.clear();
    }
}

TEST(LayerNorm, ConstantRowMapsToZero) {
    Tape t;
    const Matrix out = layer_norm(t.constant(Matrix::Constant(1, 3, 7.5)), t.constant(Matrix::Ones(1, 3)),
                                  t.constant(Matrix::Zero(1, 3)))
                           .value();
    EXPECT_TRUE(out.allFinite());
    EXPECT_LE(out.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(LayerNorm, NormalizedRowIsNearlyUnchanged) {
    Tape t;
    const Matrix out = layer_norm(t.constant(row({1, -1})), t.constant(Matrix::Ones(1, 2)),
                                  t.constant(Matrix::Zero(1, 2)))
                           .value();
    EXPECT_NEAR(out(0, 0), 1.0, 1e-4);
    EXPECT_NEAR(out(0, 1), -1.0, 1e-4);
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
    Rng rng(14);
    const Matrix x = random_matrix(rng, 2, 6);
    const Matrix gain = random_matrix(rng, 1, 6);
    const Matrix bias = random_matrix(rng, 1, 6);
    const Matrix w = random_matrix(rng, 2, 6);
    EXPECT_LE(op_gradient_error(
                  [&](const Var& v) {
                      Tape& t = *v.tape();
                      return layer_norm(v, t.constant(gain), t.constant(bias));
                  },
                  x, w),
              1e-5);
    EXPECT_LE(op_gradient_error(
                  [&](const Var& g) {
                      Tape& t = *g.tape();
                      return layer_norm(t.constant(x), g, t.constant(bias));
                  },
                  gain, w),
              1e-5);
}

TEST(Gelu, ZeroAsymptoteAndGradient) {
    Tape t;
    EXPECT_EQ(gelu(t.constant(Matrix::Zero(1, 1))).item(), 0.0);
    EXPECT_NEAR(gelu(t.constant(Matrix::Constant(1, 1, 10.0))).item(), 10.0, 1e-6);
    const Matrix x = row({-2.0, -0.5, 0.3, 4.0});
    EXPECT_LE(op_gradient_error([](const Var& v) { return gelu(v); }, x, Matrix::Ones(1, 4)), 1e-6);
    // Exact Gaussian-CDF form: gelu(1) = Phi(1).
    EXPECT_NEAR(gelu(t.constant(Matrix::Ones(1, 1))).item(), 0.8413447460685429, 1e-15);
}

TEST(Elementwise, SigmoidTanhGradients) {
    Rng rng(15);
    const Matrix x = random_matrix(rng, 2, 3, 2.0);
    const Matrix w = random_matrix(rng, 2, 3);
    EXPECT_LE(op_gradient_error([](const Var& v) { return sigmoid(v); }, x, w), 1e-6);
    EXPECT_LE(op_gradient_error([](const Var& v) { return tanh(v); }, x, w), 1e-6);
}

TEST(ConcatHadamard, ValuesAndGradient) {
    Tape t;
    const Matrix c = concat({t.constant(to_matrix({{1}, {2}})), t.constant(to_matrix({{3}, {4}}))}, 1).value();
    EXPECT_EQ(c, to_matrix({{1, 3}, {2, 4}}));
    const Matrix r = concat({t.constant(row({1, 2})), t.constant(row({3, 4}))}, 0).value();
    EXPECT_EQ(r, to_matrix({{1, 2}, {3, 4}}));

    Rng rng(16);
    const Matrix x = random_matrix(rng, 2, 3);
    EXPECT_EQ(hadamard(t.constant(x), t.constant(Matrix::Ones(2, 3))).value(), x);
    const Matrix other = random_matrix(rng, 2, 3);
    const Matrix w = random_matrix(rng, 2, 3);
    EXPECT_LE(op_gradient_error([&](const Var& v) { return hadamard(v, v.tape()->constant(other)); }, x, w), 1e-6);
    EXPECT_LE(op_gradient_error(
                  [&](const Var& v) { return concat({v, v.tape()->constant(other)}, 1); }, x,
                  random_matrix(rng, 2, 6)),
              1e-6);
}

TEST(CrossEntropy, ClosedFormsAndGradient) {
    Tape t;
    EXPECT_NEAR(cross_entropy(t.constant(row({0, 0})), 0).item(), std::log(2.0), 1e-15);
    EXPECT_LE(cross_entropy(t.constant(row({20, -20})), 0).item(), 1e-8);

    Rng rng(17);
    const Matrix logits = random_matrix(rng, 1, 5);
    Tape g;
    Var x = g.variable(logits);
    g.backward(cross_entropy(x, 3));
    Matrix expected = softmax_rows(logits);
    expected(0, 3) -= 1.0;
    EXPECT_LE((x.grad() - expected).cwiseAbs().maxCoeff(), 1e-15);
    const Matrix numeric = numeric_gradient(
        [](const Matrix& m) {
            Tape tt;
            return cross_entropy(tt.constant(m), 3).item();
        },
        logits);
    EXPECT_LE(max_relative_error(x.grad(), numeric), 1e-6);
}

TEST(KlDivergence, ClosedFormsAndGradient) {
    Tape t;
    const Matrix p = row({0.3, -1.2, 2.0});
    EXPECT_EQ(kl_divergence(t.constant(p), t.constant(p)).item(), 0.0);
    const Scalar expected = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);
    EXPECT_NEAR(kl_divergence(t.constant(row({std::log(0.5), std::log(0.5)})),
                              t.constant(row({std::log(0.9), std::log(0.1)})))
                    .item(),
                expected, 1e-12);
    EXPECT_NEAR(expected, 0.5108, 1e-4);

    Rng rng(18);
    const Matrix a = random_matrix(rng, 1, 4);
    const Matrix b = random_matrix(rng, 1, 4);
    Tape g;
    Var va = g.variable(a);
    Var vb = g.variable(b);
    g.backward(kl_divergence(va, vb));
    EXPECT_LE(max_relative_error(va.grad(), numeric_gradient([&](const Matrix& m) { return plain_kl(m, b); }, a)),
              1e-5);
    EXPECT_LE(max_relative_error(vb.grad(), numeric_gradient([&](const Matrix& m) { return plain_kl(a, m); }, b)),
              1e-5);
}

TEST(Losses, GibbsInequalityOverRandomDraws) {
    Rng rng(19);
    for (int trial = 0; trial < 1000; ++trial) {
        Tape t;
        const Index n = 2 + static_cast<Index>(rng.below(7));
        const Matrix a = random_matrix(rng, 1, n, 5.0);
        const Matrix b = random_matrix(rng, 1, n, 5.0);
        ASSERT_GE(cross_entropy(t.constant(a), static_cast<int>(rng.below(static_cast<std::uint64_t>(n)))).item(), 0.0);
        ASSERT_GT(kl_divergence(t.constant(a), t.constant(b)).item(), 0.0);
        ASSERT_EQ(kl_divergence(t.constant(a), t.constant(a)).item(), 0.0);
        ASSERT_NEAR(kl_divergence(t.constant(a), t.constant((a.array() + 3.0).matrix())).item(), 0.0, 1e-12);
    }
}

TEST(Attention, SingleHeadMatchesStraightLineOracle) {
    Rng rng(20);
    for (Index w = 1; w <= 4; ++w) {
        for (Index n = 1; n <= 3; ++n) {
            Tape t;
            const Matrix q = random_matrix(rng, n, w);
            const Matrix k = random_matrix(rng, n, w);
            const Matrix v = random_matrix(rng, n, w);
            const Matrix out = multi_head_attention(t.constant(q), t.constant(k), t.constant(v), 1).value();
            EXPECT_LE((out - attention_oracle(q, k, v)).cwiseAbs().maxCoeff(), 1e-10) << "w=" << w << " n=" << n;
        }
    }
}

TEST(Attention, HeadsAreIndependentColumnBlocks) {
    Rng rng(21);
    Tape t;
    const Matrix q = random_matrix(rng, 2, 4);
    const Matrix k = random_matrix(rng, 3, 4);
    const Matrix v = random_matrix(rng, 3, 4);
    Matrix weights;
    const Matrix out = multi_head_attention(t.constant(q), t.constant(k), t.constant(v), 2, &weights).value();
    for (Index h = 0; h < 2; ++h) {
        const Matrix expected =
            attention_oracle(q.middleCols(2 * h, 2), k.middleCols(2 * h, 2), v.middleCols(2 * h, 2));
        EXPECT_LE((out.middleCols(2 * h, 2) - expected).cwiseAbs().maxCoeff(), 1e-12);
    }
    ASSERT_EQ(weights.rows(), 4);
    for (Index i = 0; i < weights.rows(); ++i) EXPECT_NEAR(weights.row(i).sum(), 1.0, 1e-12);
}

TEST(Attention, GradientMatchesFiniteDifferences) {
    Rng rng(22);
    const Matrix q = random_matrix(rng, 2, 4);
    const Matrix k = random_matrix(rng, 3, 4);
    const Matrix v = random_matrix(rng, 3, 4);
    const Matrix w = random_matrix(rng, 2, 4);
    EXPECT_LE(op_gradient_error(
                  [&](const Var& x) {
                      Tape& t = *x.tape();
                      return multi_head_attention(x, t.constant(k), t.constant(v), 2);
                  },
                  q, w),
              1e-6);
    EXPECT_LE(op_gradient_error(
                  [&](const Var& x) {
                      Tape& t = *x.tape();
                      return multi_head_attention(t.constant(q), x, x, 2);
                  },
                  k, w),
              1e-6);
}

TEST(Tape, ConstantsNeverAccumulateGradient) {
    Tape t;
    Var c = t.constant(Matrix::Ones(2, 2));
    Var x = t.variable(Matrix::Constant(2, 2, 2.0));
    t.backward(sum(hadamard(c, x)));
    EXPECT_FALSE(c.requires_grad());
    EXPECT_EQ(c.grad(), Matrix::Zero(2, 2));
    EXPECT_EQ(x.grad(), Matrix::Ones(2, 2));
}

TEST(Tape, SharedSubexpressionsReceiveEveryConsumersGradient) {
    // y = x * x + 3x, reused node accumulates from both consumers before its own closure runs.
    Tape t;
    Var x = t.variable(Matrix::Constant(1, 1, 2.0));
    Var sq = hadamard(x, x);
    Var y = add(sq, scale(x, 3.0));
    Var z = add(hadamard(y, y), y);
    t.backward(z);
    // dz/dx = (2y + 1)(2x + 3) with y = 10
    EXPECT_DOUBLE_EQ(x.grad()(0, 0), 21.0 * 7.0);
}

TEST(Tape, ReplayIsDeterministic) {
    auto run = [] {
        Rng rng(23);
        Tape t;
        Var x = t.variable(random_matrix(rng, 3, 4));
        Var w = t.variable(random_matrix(rng, 4, 4));
        Var loss = sum(layer_norm(gelu(matmul(x, w)), t.constant(Matrix::Ones(1, 4)), t.constant(Matrix::Zero(1, 4))));
        t.backward(loss);
        return std::make_pair(loss.item(), w.grad());
    };
    const auto a = run();
    const auto b = run();
    EXPECT_EQ(a.first, b.first);
    EXPECT_EQ(a.second, b.second);
}

TEST(Tape, StraightThroughUsesHardForwardAndSoftGradient) {
    Tape t;
    Var soft = t.variable(row({0.2, 0.8}));
    Var st = straight_through(row({0.0, 1.0}), soft);
    EXPECT_EQ(st.value(), row({0.0, 1.0}));
    t.backward(sum(hadamard(st, t.constant(row({3.0, 5.0})))));
    EXPECT_EQ(soft.grad(), row({3.0, 5.0}));
}

TEST(Argmax, LowestIndexWinsTies) {
    EXPECT_EQ(argmax(row({1.0, 3.0, 3.0})), 1);
    EXPECT_EQ(argmax(row({2.0, 2.0})), 0);
}
