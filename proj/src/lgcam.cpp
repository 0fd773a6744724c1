#include "cmqr/lgcam.hpp"

#include <limits>
#include <stdexcept>

namespace cmqr {

namespace {

struct Assignment {
    std::vector<int> label;
    Eigen::VectorXd dist;  // squared distance to assigned centroid
};

Assignment assign(const Matrix& x, const Matrix& centroids) {
    Assignment a;
    a.label.resize(static_cast<std::size_t>(x.rows()));
    a.dist.resize(x.rows());
    for (Index i = 0; i < x.rows(); ++i) {
        int best = 0;
        Scalar best_d = (x.row(i) - centroids.row(0)).squaredNorm();
        for (Index c = 1; c < centroids.rows(); ++c) {
            const Scalar d = (x.row(i) - centroids.row(c)).squaredNorm();
            if (d < best_d) {
                best_d = d;
                best = static_cast<int>(c);
            }
        }
        a.label[static_cast<std::size_t>(i)] = best;
        a.dist(i) = best_d;
    }
    return a;
}

Matrix kmeans_plus_plus(const Matrix& x, int k, Rng& rng) {
    const Index n = x.rows();
    Matrix centroids(k, x.cols());
    centroids.row(0) = x.row(static_cast<Index>(rng.below(static_cast<std::uint64_t>(n))));
    Eigen::VectorXd d2(n);
    for (Index i = 0; i < n; ++i) d2(i) = (x.row(i) - centroids.row(0)).squaredNorm();
    for (int c = 1; c < k; ++c) {
        const Scalar total = d2.sum();
        Index pick = 0;
        if (total > 0.0) {
            const Scalar target = rng.uniform() * total;
            Scalar acc = 0.0;
            pick = n - 1;
            for (Index i = 0; i < n; ++i) {
                acc += d2(i);
                if (acc > target && d2(i) > 0.0) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)));
        }
        centroids.row(c) = x.row(pick);
        for (Index i = 0; i < n; ++i) {
            d2(i) = std::min(d2(i), (x.row(i) - centroids.row(c)).squaredNorm());
        }
    }
    return centroids;
}

}  // namespace

GlobalDictionary build_dictionary(const Matrix& features, int n_clusters, int max_iters, Rng& rng,
                                  KMeansTrace* trace) {
    if (n_clusters < 1) throw std::invalid_argument("build_dictionary: n_clusters must be >= 1");
    if (features.rows() < n_clusters) {
        throw std::invalid_argument("build_dictionary: " + std::to_string(features.rows()) +
                                    " vectors for " + std::to_string(n_clusters) + " clusters");
    }
    if (!features.allFinite()) throw NumericError("build_dictionary: non-finite features");

    Matrix centroids = kmeans_plus_plus(features, n_clusters, rng);
    Assignment a = assign(features, centroids);
    int iter = 0;
    if (trace != nullptr) trace->inertia.push_back(a.dist.sum());
    while (iter < max_iters) {
        ++iter;
        Matrix sums = Matrix::Zero(n_clusters, features.cols());
        std::vector<std::int64_t> counts(static_cast<std::size_t>(n_clusters), 0);
        for (Index i = 0; i < features.rows(); ++i) {
            sums.row(a.label[static_cast<std::size_t>(i)]) += features.row(i);
            ++counts[static_cast<std::size_t>(a.label[static_cast<std::size_t>(i)])];
        }
        Eigen::VectorXd dist = a.dist;
        for (int c = 0; c < n_clusters; ++c) {
            if (counts[static_cast<std::size_t>(c)] > 0) {
                centroids.row(c) = sums.row(c) / static_cast<Scalar>(counts[static_cast<std::size_t>(c)]);
            } else {
                Index far = 0;
                dist.maxCoeff(&far);
                centroids.row(c) = features.row(far);
                dist(far) = 0.0;
            }
        }
        Assignment next = assign(features, centroids);
        const bool fixpoint = next.label == a.label;
        a = std::move(next);
        if (trace != nullptr) trace->inertia.push_back(a.dist.sum());
        if (fixpoint) break;
    }
    if (trace != nullptr) trace->iterations = iter;

    GlobalDictionary dict;
    dict.centroids = std::move(centroids);
    dict.counts.assign(static_cast<std::size_t>(n_clusters), 0);
    for (int l : a.label) ++dict.counts[static_cast<std::size_t>(l)];
    return dict;
}

Matrix sample_global(const GlobalDictionary& dict, Index n_rows, Rng& rng) {
    if (dict.size() == 0) throw std::invalid_argument("sample_global: empty dictionary");
    Matrix out(n_rows, dict.centroids.cols());
    for (Index i = 0; i < n_rows; ++i) {
        out.row(i) = dict.centroids.row(static_cast<Index>(rng.below(static_cast<std::uint64_t>(dict.size()))));
    }
    return out;
}

void register_lgcam(ParameterStore& store, std::uint64_t seed, const std::string& prefix, Index d) {
    add_linear_weight(store, seed, prefix + "/wq", d, d);
    add_linear_weight(store, seed, prefix + "/wk", d, d);
    add_linear_weight(store, seed, prefix + "/wv", d, d);
    add_linear_weight(store, seed, prefix + "/wh", 2 * d, d);
    add_zeros(store, prefix + "/bh", d);
    add_linear_weight(store, seed, prefix + "/wa", d, d);
    add_zeros(store, prefix + "/ba", d);
}

Var lgcam(Tape& tape, ParameterStore& store, const Var& local, const Var& global,
          const std::string& prefix, Matrix* alpha_out) {
    if (local.rows() != global.rows() || local.cols() != global.cols()) {
        throw DimensionError("lgcam: local " + shape_string(local.value()) + " and global " +
                             shape_string(global.value()) + " must have the same shape");
    }
    auto w = [&](const char* name) { return store.on(tape, prefix + name); };
    Var values = matmul(global, w("/wv"));
    Var gated = hadamard(matmul(local, w("/wq")), matmul(global, w("/wk")));
    Var h = concat({values, gated}, 1);
    Var h2 = gelu(add(matmul(h, w("/wh")), w("/bh")));
    Var alpha = softmax(add(matmul(h2, w("/wa")), w("/ba")), 0);
    if (alpha_out != nullptr) *alpha_out = alpha.value();
    return hadamard(alpha, global);
}

CausalVisualFeatures front_door_features(Tape& tape, ParameterStore& store, const Var& local,
                                         const GlobalDictionary& dict, const std::string& prefix_ll,
                                         const std::string& prefix_lg, Rng& rng) {
    if (dict.size() > 0 && dict.centroids.cols() != local.cols()) {
        throw DimensionError("front_door_features: dictionary width " +
                             std::to_string(dict.centroids.cols()) + " vs features " +
                             shape_string(local.value()));
    }
    CausalVisualFeatures out;
    out.local_local = lgcam(tape, store, local, local, prefix_ll);
    out.global_sample = sample_global(dict, local.rows(), rng);
    out.local_global = lgcam(tape, store, local, tape.constant(out.global_sample), prefix_lg);
    out.combined = concat({out.local_global, out.local_local}, 1);
    return out;
}

}  // namespace cmqr
