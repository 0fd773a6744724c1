#include "cmqr/linguistic.hpp"

#include "cmqr/layers.hpp"

#include <fstream>
#include <stdexcept>

namespace cmqr {

namespace {

std::string head_prefix(TextRole role) {
    return role == TextRole::question ? "ling/q_head" : "ling/a_head";
}

std::string block_prefix(const LinguisticConfig& cfg, TextRole role) {
    return (role == TextRole::answer && !cfg.share_encoder) ? "ling/a_ctx" : "ling/ctx";
}

void register_block(ParameterStore& store, std::uint64_t seed, const std::string& p, Index d) {
    for (const char* name : {"/wq", "/wk", "/wv", "/wo"}) register_linear(store, seed, p + name, d, d);
    register_layer_norm(store, p + "/ln1", d);
    register_feed_forward(store, seed, p + "/ff", d, d);
    register_layer_norm(store, p + "/ln2", d);
}

}  // namespace

void register_linguistic(ParameterStore& store, std::uint64_t seed, const LinguisticConfig& cfg) {
    store.add("ling/embedding",
              uniform_init(seed, "ling/embedding", cfg.vocab_size, cfg.embed_dim, 1.0));
    register_linear(store, seed, head_prefix(TextRole::question), cfg.embed_dim, cfg.width);
    register_block(store, seed, "ling/ctx", cfg.width);
    if (cfg.answer_head) {
        register_linear(store, seed, head_prefix(TextRole::answer), cfg.embed_dim, cfg.width);
        if (!cfg.share_encoder) register_block(store, seed, "ling/a_ctx", cfg.width);
    }
}

Var embed_tokens(Tape& tape, ParameterStore& store, const LinguisticConfig& cfg,
                 const TokenSequence& seq, TextRole role) {
    if (seq.ids.empty()) throw std::invalid_argument("embed_tokens: empty token sequence");
    for (int id : seq.ids) {
        if (id < 0 || id >= cfg.vocab_size) {
            throw std::out_of_range("embed_tokens: token id " + std::to_string(id) +
                                    " outside vocabulary of " + std::to_string(cfg.vocab_size));
        }
    }
    Var rows = gather_rows(store.on(tape, "ling/embedding"), seq.ids);
    return linear(tape, store, rows, head_prefix(role));
}

LinguisticFeatures contextualize(Tape& tape, ParameterStore& store, const LinguisticConfig& cfg,
                                 const Var& x, TextRole role) {
    const std::string p = block_prefix(cfg, role);
    LinguisticFeatures out;
    Var q = linear(tape, store, x, p + "/wq");
    Var k = linear(tape, store, x, p + "/wk");
    Var v = linear(tape, store, x, p + "/wv");
    Var attended = linear(tape, store, multi_head_attention(q, k, v, 1, &out.attention), p + "/wo");
    Var h = layer_norm(tape, store, add(x, attended), p + "/ln1");
    out.tokens = layer_norm(tape, store, add(h, feed_forward(tape, store, h, p + "/ff")), p + "/ln2");
    out.pooled = mean_rows(out.tokens);
    return out;
}

std::vector<std::string> read_vocabulary(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open vocabulary file " + path.string());
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        tokens.push_back(line);
    }
    return tokens;
}

void write_vocabulary(const std::filesystem::path& path, const std::vector<std::string>& tokens) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write vocabulary file " + path.string());
    for (const auto& t : tokens) out << t << '\n';
}

}  // namespace cmqr
