#include "cmqr/layers.hpp"

namespace cmqr {

void register_linear(ParameterStore& store, std::uint64_t seed, const std::string& prefix,
                     Index in, Index out, bool bias) {
    add_linear_weight(store, seed, prefix + "/w", in, out);
    if (bias) add_zeros(store, prefix + "/b", out);
}

Var linear(Tape& tape, ParameterStore& store, const Var& x, const std::string& prefix, bool bias) {
    if (bias) return affine(x, store.on(tape, prefix + "/w"), store.on(tape, prefix + "/b"));
    return matmul(x, store.on(tape, prefix + "/w"));
}

void register_layer_norm(ParameterStore& store, const std::string& prefix, Index width) {
    add_ones(store, prefix + "/gain", width);
    add_zeros(store, prefix + "/bias", width);
}

Var layer_norm(Tape& tape, ParameterStore& store, const Var& x, const std::string& prefix) {
    return layer_norm(x, store.on(tape, prefix + "/gain"), store.on(tape, prefix + "/bias"));
}

void register_feed_forward(ParameterStore& store, std::uint64_t seed, const std::string& prefix,
                           Index width, Index hidden) {
    register_linear(store, seed, prefix + "/in", width, hidden);
    register_linear(store, seed, prefix + "/out", hidden, width);
}

Var feed_forward(Tape& tape, ParameterStore& store, const Var& x, const std::string& prefix) {
    return linear(tape, store, gelu(linear(tape, store, x, prefix + "/in")), prefix + "/out");
}

}  // namespace cmqr
