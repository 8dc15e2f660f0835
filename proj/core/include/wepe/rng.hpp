#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <string_view>

namespace wepe {

/// 64-bit FNV-1a over raw bytes.
std::uint64_t fnv1a64(std::span<const std::byte> bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(std::string_view text, std::uint64_t basis = 0xcbf29ce484222325ULL);

/// Lower-case 16-digit hex rendering of a 64-bit hash.
std::string hex64(std::uint64_t value);

/// SplitMix64 finalizer; used to fold keys into independent stream seeds.
std::uint64_t mix64(std::uint64_t x);

/// Derives a sub-stream seed from an ordered tuple of keys. Streams built from
/// different key tuples are statistically independent, so e.g. the noise for
/// (seed, draw, block 3, "attn.q.weight") never depends on block 2.
std::uint64_t stream_seed(std::initializer_list<std::uint64_t> keys);

using Engine = std::mt19937_64;

inline Engine make_engine(std::initializer_list<std::uint64_t> keys) { return Engine(stream_seed(keys)); }

}  // namespace wepe
