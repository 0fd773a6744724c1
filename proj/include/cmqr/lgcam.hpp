#pragma once

// Visual front-door intervention: the global K-means feature dictionary, the
// local-global causal attention block, and the in-sample / cross-sample
// feature estimates it produces.

#include "cmqr/parameters.hpp"
#include "cmqr/rng.hpp"

#include <string>
#include <vector>

namespace cmqr {

struct GlobalDictionary {
    Matrix centroids;  ///< n_clusters x d
    std::vector<std::int64_t> counts;
    std::string source;  ///< "appearance" or "motion"

    Index size() const { return centroids.rows(); }
};

struct KMeansTrace {
    std::vector<Scalar> inertia;  ///< after each assignment step
    int iterations = 0;
};

/// k-means++ seeding then Lloyd iterations until the assignment is a fixpoint
/// or `max_iters` is reached. Empty clusters are re-seeded at the point
/// farthest from its centroid. Throws if there are fewer vectors than clusters.
GlobalDictionary build_dictionary(const Matrix& features, int n_clusters, int max_iters, Rng& rng,
                                  KMeansTrace* trace = nullptr);

/// `n_rows` centroids drawn uniformly with replacement.
Matrix sample_global(const GlobalDictionary& dict, Index n_rows, Rng& rng);

/// Parameter names for one LGCAM block live under a prefix:
/// wq, wk, wv (d x d), wh (2d x d), bh, wa (d x d), ba.
void register_lgcam(ParameterStore& store, std::uint64_t seed, const std::string& prefix, Index d);

/// Local-global causal attention. Queries come from `local`, keys and values
/// from `global`; the output gates `global` by per-channel attention
/// normalized over rows. `alpha_out` receives the n x d weights.
Var lgcam(Tape& tape, ParameterStore& store, const Var& local, const Var& global,
          const std::string& prefix, Matrix* alpha_out = nullptr);

struct CausalVisualFeatures {
    Var local_local;   ///< F_LL, n x d (in-sample mediator estimate)
    Var local_global;  ///< F_LG, n x d (cross-sample estimate)
    Var combined;      ///< [F_LG, F_LL], n x 2d
    Matrix global_sample;
};

CausalVisualFeatures front_door_features(Tape& tape, ParameterStore& store, const Var& local,
                                         const GlobalDictionary& dict, const std::string& prefix_ll,
                                         const std::string& prefix_lg, Rng& rng);

}  // namespace cmqr
