#pragma once

#include "cmqr/parameters.hpp"

#include <string>

namespace cmqr {

// Affine layer y = x W + b stored as `<prefix>/w` (in x out) and `<prefix>/b`.
void register_linear(ParameterStore& store, std::uint64_t seed, const std::string& prefix,
                     Index in, Index out, bool bias = true);
Var linear(Tape& tape, ParameterStore& store, const Var& x, const std::string& prefix,
           bool bias = true);

// Layer norm gain/bias stored as `<prefix>/gain`, `<prefix>/bias`.
void register_layer_norm(ParameterStore& store, const std::string& prefix, Index width);
Var layer_norm(Tape& tape, ParameterStore& store, const Var& x, const std::string& prefix);

// Two-layer GELU feed-forward: `<prefix>/in` then `<prefix>/out`.
void register_feed_forward(ParameterStore& store, std::uint64_t seed, const std::string& prefix,
                           Index width, Index hidden);
Var feed_forward(Tape& tape, ParameterStore& store, const Var& x, const std::string& prefix);

}  // namespace cmqr
