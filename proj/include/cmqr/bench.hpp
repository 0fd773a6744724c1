#pragma once

// Synthetic confounded video-QA episodes.
//
// Each clip carries a concept prototype (appearance and motion families) plus
// a cue prototype on the appearance side. The question names a question type
// and the cue of the causal clip; the answer is a fixed table lookup of
// (question type, causal concept). In the training distribution a confounder
// concept is planted in a non-causal clip whenever the answer is the
// designated class; the out-of-distribution split inverts that co-occurrence.

#include "cmqr/config.hpp"
#include "cmqr/ecsl.hpp"
#include "cmqr/linguistic.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace cmqr {

struct BenchConfig {
    int clips = 8;
    int frames = 4;
    int dim = 16;
    int n_concepts = 8;  ///< the last concept is the confounder
    int n_question_types = 4;
    int n_answers = 7;
    int n_cues = 8;
    int designated_answer = 0;
    double confound_strength = 0.9;
    double noise = 0.05;
    double cue_strength = 1.0;
    int train_size = 4000;
    int iid_size = 1000;
    int ood_size = 1000;
    std::uint64_t seed = 1;

    int confounder_concept() const { return n_concepts - 1; }
    int causal_concepts() const { return n_concepts - 1; }
    void validate() const;
    std::vector<std::pair<std::string, std::string>> to_pairs() const;
    static BenchConfig from(KeyValues& kv);
};

enum class Split { train, iid_test, ood_test };
std::string split_name(Split s);
Split parse_split(const std::string& name);

/// Fixed prototypes and answer table derived from the config seed.
struct BenchWorld {
    Matrix appearance;  ///< n_concepts x dim, unit rows
    Matrix motion;      ///< n_concepts x dim, unit rows
    Matrix cues;        ///< n_cues x dim, unit rows
    std::vector<std::vector<int>> answer_table;  ///< [question type][causal concept]

    int answer(int question_type, int concept_id) const {
        return answer_table[static_cast<std::size_t>(question_type)][static_cast<std::size_t>(concept_id)];
    }
};

BenchWorld make_world(const BenchConfig& cfg);

struct Episode {
    int id = 0;
    ClipFeatures clips;
    TokenSequence question;
    int answer = 0;
    std::vector<int> causal_clips;
    int confounder_concept = -1;  ///< -1 when not planted
    int question_type = 0;
    int causal_concept = 0;  ///< ground truth, never shown to the model
};

/// Vocabulary: question-type tokens, then cue tokens.
std::vector<std::string> bench_vocabulary(const BenchConfig& cfg);
int question_type_token(int question_type);
int cue_token(const BenchConfig& cfg, int cue);

Episode generate_episode(const BenchConfig& cfg, const BenchWorld& world, Split split, int id);

struct Dataset {
    BenchConfig config;
    Split split = Split::train;
    std::vector<Episode> episodes;
};

Dataset generate_dataset(const BenchConfig& cfg, Split split);

// On-disk layout inside a directory:
//   vocab.txt                 one token per line
//   <split>.txt               "CMQRBENCH v1", key=value metadata, "episodes=N",
//                             then one tab-separated record per episode
//   <split>.bin               little-endian float32 payload; per episode the
//                             appearance block [clip][frame][dim] followed by
//                             the motion block [clip][dim], at the record's
//                             byte offset
void write_dataset(const std::filesystem::path& dir, const Dataset& data);
void generate_split(const BenchConfig& cfg, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir, Split split);

struct LocalizationRecord {
    int episode_id = 0;
    std::vector<int> clips;
};

struct LocalizationMetrics {
    double precision = 0.0;
    double recall = 0.0;
};

/// Micro-averaged precision |sel & true| / |sel| and recall |sel & true| / |true|.
/// Throws if episode ids are not aligned or a selection is empty.
LocalizationMetrics localization_metrics(const std::vector<LocalizationRecord>& selected,
                                         const std::vector<LocalizationRecord>& truth);

// --- validity oracles --------------------------------------------------------

/// Reads the concept of the ground-truth causal clip by nearest appearance
/// prototype and answers through the table.
double nearest_prototype_accuracy(const Dataset& data, const BenchWorld& world);

/// Logistic probe on a single feature, the strongest confounder-prototype
/// response over clips, predicting whether the answer is the designated class.
struct ShortcutProbe {
    double weight = 0.0;
    double bias = 0.0;

    static double feature(const Episode& e, const BenchWorld& world, int confounder);
    static ShortcutProbe fit(const Dataset& train, const BenchWorld& world, int iterations = 2000,
                             double lr = 1.0);
    double accuracy(const Dataset& data, const BenchWorld& world) const;
};

}  // namespace cmqr
