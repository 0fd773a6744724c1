#pragma once

// Trainable stand-in for the question/answer text encoders: an embedding
// table, a per-role linear head into the model width, and one
// self-attention + feed-forward block with residuals and layer norm.

#include "cmqr/parameters.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace cmqr {

struct TokenSequence {
    std::vector<int> ids;
};

struct LinguisticFeatures {
    Var tokens;  ///< L x d contextual embeddings
    Var pooled;  ///< 1 x d row mean of `tokens`
    Matrix attention;  ///< L x L self-attention distribution
};

enum class TextRole { question, answer };

struct LinguisticConfig {
    int vocab_size = 64;
    int embed_dim = 32;
    int width = 32;
    /// When false the answer side gets its own contextualizer block too.
    bool share_encoder = true;
    bool answer_head = false;
};

void register_linguistic(ParameterStore& store, std::uint64_t seed, const LinguisticConfig& cfg);

/// Row i is embedding[ids[i]] mapped through the role's linear head.
Var embed_tokens(Tape& tape, ParameterStore& store, const LinguisticConfig& cfg,
                 const TokenSequence& seq, TextRole role = TextRole::question);

LinguisticFeatures contextualize(Tape& tape, ParameterStore& store, const LinguisticConfig& cfg,
                                 const Var& x, TextRole role = TextRole::question);

inline LinguisticFeatures encode_text(Tape& tape, ParameterStore& store, const LinguisticConfig& cfg,
                                      const TokenSequence& seq,
                                      TextRole role = TextRole::question) {
    return contextualize(tape, store, cfg, embed_tokens(tape, store, cfg, seq, role), role);
}

// Vocabulary file: one token per line, line number (from 0) is the id.
std::vector<std::string> read_vocabulary(const std::filesystem::path& path);
void write_vocabulary(const std::filesystem::path& path, const std::vector<std::string>& tokens);

}  // namespace cmqr
