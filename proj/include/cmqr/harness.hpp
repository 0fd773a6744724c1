#pragma once

// Training and evaluation orchestration: run configuration, learning-rate
// schedule, checkpoints, the training loop and evaluation reports.

#include "cmqr/bench.hpp"
#include "cmqr/config.hpp"
#include "cmqr/model.hpp"

#include <filesystem>
#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace cmqr {

struct RunConfig {
    // model
    Index width = 32;
    int layers = 2;
    int heads = 4;
    int n_clusters = 8;
    int k_sel = 1;
    Index decoder_hidden = 128;
    bool causal_branch = true;
    bool ecsl = true;
    double tau_start = 1.0;
    double tau_end = 0.5;
    // optimizer
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double lambda_c = 0.1;
    double lambda_a = 0.1;
    int batch_size = 32;
    int epochs = 50;
    int lr_patience = 5;
    double lr_threshold = 1e-6;
    // data and bookkeeping
    std::uint64_t seed = 1;
    int dictionary_every = 5;
    int kmeans_iters = 50;
    int checkpoint_every = 5;
    /// Use only the first N training episodes (0 = all).
    int train_limit = 0;
    /// Evaluate iid/ood accuracy and localization after every epoch.
    bool eval_every_epoch = true;

    void validate() const;
    std::vector<std::pair<std::string, std::string>> to_pairs() const;
    std::string to_text() const { return to_key_value_text(to_pairs()); }
    /// Reads every known key; leaves unknown keys unread for reject_unknown().
    static RunConfig from(KeyValues& kv);
    /// Parses text and rejects unknown keys.
    static RunConfig parse(const std::string& text);
    static RunConfig load(const std::filesystem::path& path);

    AdamOptions adam() const;
    LossWeights loss_weights() const { return {lambda_c, lambda_a}; }
    ModelConfig model_config(const BenchConfig& data) const;
    ModelConfig model_config(int vocab_size, int feature_dim, int clips, int n_answers) const;
    /// Linear annealing from tau_start at the first epoch to tau_end at the last.
    double temperature(int epoch) const;
};

struct LrSchedule {
    double lr = 2e-4;
    double best_loss = std::numeric_limits<double>::infinity();
    int bad_epochs = 0;
    int patience = 5;
    double threshold = 1e-6;
};

/// Records one epoch's loss. When the best loss has not improved by more than
/// `threshold` for `patience` consecutive epochs, halves lr and resets the
/// counter. Returns the lr for the next epoch.
double lr_schedule_step(LrSchedule& state, double epoch_loss);

struct TrainState {
    int epoch = 0;  ///< epochs completed
    LrSchedule schedule;
};

struct Checkpoint {
    static constexpr std::uint32_t version = 1;
    RunConfig run;
    ModelConfig model_config;
    Model model;
    TrainState state;
};

/// Text stored in the checkpoint header: the run config plus data-derived model dims.
std::string config_snapshot(const RunConfig& run, const ModelConfig& model);

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);
/// Writes to a temporary sibling then renames over `path`.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct EpisodeOutcome {
    int episode_id = 0;
    int target = 0;
    int predicted = 0;
    int predicted_c = -1;
    Scalar loss_o = 0.0;
    Scalar loss_c = 0.0;
    Scalar loss_a = 0.0;
    Matrix probs;     ///< scene probabilities (empty without ECSL)
    Matrix selector;  ///< hard mask (empty without ECSL)
    std::vector<int> selected;
};

struct EvalReport {
    std::string split;
    std::size_t episodes = 0;
    double accuracy = 0.0;
    double accuracy_c = 0.0;  ///< (c, q) head, NaN without the causal branch
    double loc_precision = 0.0;
    double loc_recall = 0.0;  ///< NaN without ECSL
    double loss_o = 0.0;
    double loss_c = 0.0;
    double loss_a = 0.0;
    double loss_total = 0.0;
    std::vector<EpisodeOutcome> outcomes;

    std::string to_text() const;
};

struct EvalOptions {
    /// Force the ground-truth causal clips as the mask.
    bool oracle_mask = false;
};

/// Deterministic: no Gumbel noise, argmax selection, fixed global-sample streams.
EvalReport evaluate(Model& model, const RunConfig& run, const Dataset& data,
                    const EvalOptions& options = {});

void write_predictions_csv(const std::filesystem::path& path, const EvalReport& report);
void write_mask_csv(const std::filesystem::path& path, const EvalReport& report);

struct EpochMetrics {
    int epoch = 0;
    double lr = 0.0;
    double loss_o = 0.0;
    double loss_c = 0.0;
    double loss_a = 0.0;
    double loss_total = 0.0;
    double train_acc = 0.0;
    double iid_acc = 0.0;
    double ood_acc = 0.0;
    double loc_precision = 0.0;
    double loc_recall = 0.0;
};

std::string metrics_header();
std::string metrics_row(const EpochMetrics& m);

struct TrainData {
    Dataset train;
    Dataset iid;
    Dataset ood;
};

TrainData load_train_data(const std::filesystem::path& dir);

struct TrainOptions {
    std::filesystem::path out_dir;
    /// Continue from this checkpoint instead of initializing.
    const Checkpoint* resume = nullptr;
    /// Stop after this many completed epochs (< 0 runs to the configured end).
    int stop_after = -1;
    std::function<void(const EpochMetrics&)> on_epoch;
};

/// Runs the training loop, writing metrics.csv, periodic epoch checkpoints and
/// last.ckpt under out_dir. Returns the final checkpoint.
Checkpoint train(const RunConfig& run, const TrainData& data, const TrainOptions& options);

}  // namespace cmqr
