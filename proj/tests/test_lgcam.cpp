#include "cmqr/gradcheck.hpp"
#include "cmqr/lgcam.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>

using namespace cmqr;
using namespace cmqr::testing;

namespace {

Matrix bias_row(const ParameterStore& s, const std::string& name) { return s.at(name).value; }

// Line-by-line evaluation of the local-global causal attention block.
Matrix lgcam_oracle(const ParameterStore& s, const std::string& p, const Matrix& fl, const Matrix& fg) {
    const Index n = fl.rows(), d = fl.cols();
    const Matrix& wq = s.at(p + "/wq").value;
    const Matrix& wk = s.at(p + "/wk").value;
    const Matrix& wv = s.at(p + "/wv").value;
    const Matrix& wh = s.at(p + "/wh").value;
    const Matrix& wa = s.at(p + "/wa").value;
    const Matrix bh = bias_row(s, p + "/bh");
    const Matrix ba = bias_row(s, p + "/ba");
    Matrix logits(n, d);
    for (Index i = 0; i < n; ++i) {
        std::vector<Scalar> h(static_cast<std::size_t>(2 * d), 0.0);
        for (Index c = 0; c < d; ++c) {
            Scalar v = 0.0, q = 0.0, k = 0.0;
            for (Index j = 0; j < d; ++j) {
                v += fg(i, j) * wv(j, c);
                q += fl(i, j) * wq(j, c);
                k += fg(i, j) * wk(j, c);
            }
            h[static_cast<std::size_t>(c)] = v;
            h[static_cast<std::size_t>(d + c)] = q * k;
        }
        std::vector<Scalar> h2(static_cast<std::size_t>(d));
        for (Index c = 0; c < d; ++c) {
            Scalar z = bh(0, c);
            for (Index j = 0; j < 2 * d; ++j) z += h[static_cast<std::size_t>(j)] * wh(j, c);
            h2[static_cast<std::size_t>(c)] = 0.5 * z * (1.0 + std::erf(z / std::sqrt(2.0)));
        }
        for (Index c = 0; c < d; ++c) {
            Scalar z = ba(0, c);
            for (Index j = 0; j < d; ++j) z += h2[static_cast<std::size_t>(j)] * wa(j, c);
            logits(i, c) = z;
        }
    }
    Matrix out(n, d);
    for (Index c = 0; c < d; ++c) {
        Scalar top = -std::numeric_limits<Scalar>::infinity();
        for (Index i = 0; i < n; ++i) top = std::max(top, logits(i, c));
        Scalar z = 0.0;
        for (Index i = 0; i < n; ++i) z += std::exp(logits(i, c) - top);
        for (Index i = 0; i < n; ++i) out(i, c) = std::exp(logits(i, c) - top) / z * fg(i, c);
    }
    return out;
}

void randomize_biases(ParameterStore& store, std::uint64_t seed) {
    Rng rng(seed);
    for (auto& [name, p] : store.entries()) {
        if (name.ends_with("/bh") || name.ends_with("/ba")) p.value = random_matrix(rng, 1, p.value.cols(), 0.5);
    }
}

Scalar inertia_of(const Matrix& x, const std::vector<int>& label, Matrix& centroids) {
    centroids = Matrix::Zero(2, x.cols());
    Eigen::Vector2d counts = Eigen::Vector2d::Zero();
    for (Index i = 0; i < x.rows(); ++i) {
        centroids.row(label[static_cast<std::size_t>(i)]) += x.row(i);
        counts(label[static_cast<std::size_t>(i)]) += 1.0;
    }
    for (int c = 0; c < 2; ++c) centroids.row(c) /= counts(c);
    Scalar total = 0.0;
    for (Index i = 0; i < x.rows(); ++i) total += (x.row(i) - centroids.row(label[static_cast<std::size_t>(i)])).squaredNorm();
    return total;
}

}  // namespace

TEST(BuildDictionary, TwoCloudsMatchExhaustiveOracle) {
    Rng rng(1);
    const Index d = 3;
    Matrix x(12, d);
    for (Index i = 0; i < 12; ++i) {
        const Scalar center = i < 6 ? 0.0 : 10.0;
        for (Index j = 0; j < d; ++j) x(i, j) = center + 0.3 * rng.normal();
    }
    // Exhaustive search over every nontrivial 2-partition.
    Scalar best = std::numeric_limits<Scalar>::infinity();
    Matrix best_centroids;
    for (unsigned mask = 1; mask < (1u << 11); ++mask) {
        std::vector<int> label(12, 0);
        for (int i = 0; i < 11; ++i) label[static_cast<std::size_t>(i + 1)] = (mask >> i) & 1u;
        if (std::find(label.begin(), label.end(), 1) == label.end()) continue;
        Matrix c;
        const Scalar in = inertia_of(x, label, c);
        if (in < best) {
            best = in;
            best_centroids = c;
        }
    }
    Rng krng(2);
    const auto dict = build_dictionary(x, 2, 50, krng);
    ASSERT_EQ(dict.size(), 2);
    const Matrix mean_low = x.topRows(6).colwise().mean();
    const Matrix mean_high = x.bottomRows(6).colwise().mean();
    for (Index c = 0; c < 2; ++c) {
        const Scalar to_low = (dict.centroids.row(c) - mean_low).norm();
        const Scalar to_high = (dict.centroids.row(c) - mean_high).norm();
        EXPECT_LT(std::min(to_low, to_high), 0.5);
        Scalar to_oracle = std::numeric_limits<Scalar>::infinity();
        for (Index o = 0; o < 2; ++o) to_oracle = std::min(to_oracle, (dict.centroids.row(c) - best_centroids.row(o)).norm());
        EXPECT_LT(to_oracle, 1e-12);
    }
    EXPECT_EQ(dict.counts[0] + dict.counts[1], 12);
}

TEST(BuildDictionary, OneClusterPerPointHasZeroInertia) {
    Rng rng(3);
    const Matrix x = random_matrix(rng, 5, 2);
    Rng krng(4);
    KMeansTrace trace;
    const auto dict = build_dictionary(x, 5, 20, krng, &trace);
    ASSERT_FALSE(trace.inertia.empty());
    EXPECT_EQ(trace.inertia.back(), 0.0);
    for (auto c : dict.counts) EXPECT_EQ(c, 1);
}

TEST(BuildDictionary, SameSeedIsBitExactAndInertiaNeverIncreases) {
    Rng rng(5);
    const Matrix x = random_matrix(rng, 200, 4);
    Rng a(6), b(6);
    KMeansTrace trace;
    const auto da = build_dictionary(x, 8, 50, a, &trace);
    const auto db = build_dictionary(x, 8, 50, b);
    EXPECT_EQ(da.centroids, db.centroids);
    EXPECT_EQ(da.counts, db.counts);
    for (std::size_t i = 1; i < trace.inertia.size(); ++i) EXPECT_LE(trace.inertia[i], trace.inertia[i - 1] + 1e-9);
    std::int64_t total = 0;
    for (auto c : da.counts) total += c;
    EXPECT_EQ(total, 200);
    EXPECT_TRUE(da.centroids.allFinite());
}

TEST(BuildDictionary, RejectsTooFewVectors) {
    Rng rng(7);
    EXPECT_THROW(build_dictionary(Matrix::Zero(2, 3), 3, 10, rng), std::invalid_argument);
    EXPECT_THROW(build_dictionary(Matrix::Zero(2, 3), 0, 10, rng), std::invalid_argument);
}

TEST(SampleGlobal, DegenerateUniformAndDeterministic) {
    GlobalDictionary one;
    one.centroids = row({1.0, -2.0, 3.0});
    Rng rng(8);
    const Matrix s = sample_global(one, 5, rng);
    for (Index i = 0; i < 5; ++i) EXPECT_EQ(s.row(i), one.centroids.row(0));

    GlobalDictionary four;
    four.centroids = Matrix(4, 1);
    four.centroids << 0, 1, 2, 3;
    Rng r1(9);
    const Matrix big = sample_global(four, 1000, r1);
    for (int c = 0; c < 4; ++c) {
        const auto n = (big.array() == static_cast<Scalar>(c)).count();
        EXPECT_GE(n, 190);
        EXPECT_LE(n, 310);
    }
    Rng r2(9);
    EXPECT_EQ(sample_global(four, 1000, r2), big);
    EXPECT_THROW(sample_global(GlobalDictionary{}, 3, r2), std::invalid_argument);
}

TEST(Lgcam, MatchesStraightLineOracle) {
    Rng rng(10);
    for (Index d = 1; d <= 4; ++d) {
        for (Index n = 1; n <= 3; ++n) {
            ParameterStore store;
            register_lgcam(store, 10 + static_cast<std::uint64_t>(d), "blk", d);
            randomize_biases(store, static_cast<std::uint64_t>(d * 10 + n));
            const Matrix fl = random_matrix(rng, n, d);
            const Matrix fg = random_matrix(rng, n, d);
            Tape t;
            const Matrix out = lgcam(t, store, t.constant(fl), t.constant(fg), "blk").value();
            EXPECT_LE((out - lgcam_oracle(store, "blk", fl, fg)).cwiseAbs().maxCoeff(), 1e-10)
                << "d=" << d << " n=" << n;
        }
    }
}

TEST(Lgcam, UniformAttentionDividesGlobalByRowCount) {
    ParameterStore store;
    register_lgcam(store, 11, "blk", 3);
    store.at("blk/wa").value.setZero();
    store.at("blk/ba").value = row({0.4, -1.0, 2.0});
    Rng rng(11);
    const Matrix fg = random_matrix(rng, 4, 3);
    Tape t;
    Matrix alpha;
    const Matrix out = lgcam(t, store, t.constant(random_matrix(rng, 4, 3)), t.constant(fg), "blk", &alpha).value();
    EXPECT_LE((alpha.array() - 0.25).abs().maxCoeff(), 1e-15);
    EXPECT_LE((out - fg / 4.0).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Lgcam, AlphaColumnsSumToOne) {
    ParameterStore store;
    register_lgcam(store, 12, "blk", 4);
    randomize_biases(store, 12);
    Rng rng(12);
    for (int trial = 0; trial < 500; ++trial) {
        const Index n = 1 + static_cast<Index>(rng.below(8));
        Tape t;
        Matrix alpha;
        lgcam(t, store, t.constant(random_matrix(rng, n, 4, 3.0)), t.constant(random_matrix(rng, n, 4, 3.0)), "blk", &alpha);
        for (Index c = 0; c < 4; ++c) ASSERT_NEAR(alpha.col(c).sum(), 1.0, 1e-9);
    }
}

TEST(Lgcam, ShapeMismatchThrows) {
    ParameterStore store;
    register_lgcam(store, 13, "blk", 2);
    Tape t;
    EXPECT_THROW(lgcam(t, store, t.constant(Matrix::Zero(3, 2)), t.constant(Matrix::Zero(2, 2)), "blk"), DimensionError);
}

TEST(Lgcam, GradientWrtAllWeightsMatchesFiniteDifferences) {
    ParameterStore store;
    register_lgcam(store, 14, "blk", 4);
    randomize_biases(store, 14);
    Rng rng(14);
    const Matrix fl = random_matrix(rng, 3, 4);
    const Matrix fg = random_matrix(rng, 3, 4);
    const Matrix w = random_matrix(rng, 3, 4);
    const auto report = finite_diff_check(store, [&](Tape& t) {
        return sum(hadamard(lgcam(t, store, t.constant(fl), t.constant(fg), "blk"), t.constant(w)));
    });
    EXPECT_LE(report.max_relative_error, 1e-4);
    EXPECT_EQ(report.coordinates, store.scalar_count());
}

TEST(FrontDoor, SingleCentroidGatesAConstant) {
    ParameterStore store;
    register_lgcam(store, 15, "ll", 3);
    register_lgcam(store, 15, "lg", 3);
    GlobalDictionary dict;
    dict.centroids = row({0.5, -1.0, 2.0});
    Rng rng(15);
    const Matrix fl = random_matrix(rng, 4, 3);
    Tape t;
    Rng sample(1);
    const auto f = front_door_features(t, store, t.constant(fl), dict, "ll", "lg", sample);
    for (Index i = 0; i < 4; ++i) EXPECT_EQ(f.global_sample.row(i), dict.centroids.row(0));
    Tape t2;
    Matrix alpha;
    lgcam(t2, store, t2.constant(fl), t2.constant(f.global_sample), "lg", &alpha);
    EXPECT_EQ(f.local_global.value(), Matrix(alpha.array() * f.global_sample.array()));
}

TEST(FrontDoor, CollapseAndLayout) {
    ParameterStore store;
    register_lgcam(store, 16, "ll", 3);
    register_lgcam(store, 16, "lg", 3);
    for (const char* n : {"/wq", "/wk", "/wv", "/wh", "/bh", "/wa", "/ba"}) {
        store.at(std::string("lg") + n).value = store.at(std::string("ll") + n).value;
    }
    Rng rng(16);
    const Matrix fl = random_matrix(rng, 3, 3);
    // A dictionary holding exactly the local rows, sampled in order, forces F_G = F_L.
    GlobalDictionary dict;
    dict.centroids = fl.row(0);
    Tape t;
    Rng sample(2);
    const auto f = front_door_features(t, store, t.constant(fl.topRows(1)), dict, "ll", "lg", sample);
    EXPECT_EQ(f.local_global.value(), f.local_local.value());
    EXPECT_EQ(f.combined.cols(), 6);
    EXPECT_EQ(Matrix(f.combined.value().leftCols(3)), f.local_global.value());
    EXPECT_EQ(Matrix(f.combined.value().rightCols(3)), f.local_local.value());
}
