#pragma once

#include <cstdint>
#include <random>

namespace backdoorlab {

/// splitmix64 finalizer; used to derive independent substreams from one seed.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Deterministic per-(seed, stream, salt) engine: scene i always sees the same
/// stream no matter how many scenes exist or in which order they are built.
inline std::mt19937_64 substream(std::uint64_t seed, std::uint64_t stream, std::uint64_t salt = 0) {
    return std::mt19937_64(splitmix64(splitmix64(seed ^ splitmix64(salt)) ^ stream));
}

}  // namespace backdoorlab
