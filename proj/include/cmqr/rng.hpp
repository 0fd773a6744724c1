#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace cmqr {

std::uint64_t splitmix64(std::uint64_t x);
/// FNV-1a over the bytes of `text`.
std::uint64_t hash_name(std::string_view text);

/// Seed for an independent stream identified by a purpose tag and two indices
/// (typically epoch and episode). Streams never share state.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag, std::uint64_t a = 0,
                          std::uint64_t b = 0);

/// Seeded generator. Conversions to floating point are done here rather than
/// through std distributions so sequences are identical across standard
/// library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }
    /// Uniform on [0, 1).
    double uniform();
    /// Uniform on the open interval (0, 1).
    double uniform_open();
    double normal();
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace cmqr
