#include "wepe/rng.hpp"

#include <cstdio>

#include "wepe/tensor.hpp"

namespace wepe {

std::uint64_t fnv1a64(std::span<const std::byte> bytes, std::uint64_t basis) {
  std::uint64_t h = basis;
  for (std::byte b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a64(std::string_view text, std::uint64_t basis) {
  return fnv1a64(std::as_bytes(std::span(text.data(), text.size())), basis);
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t stream_seed(std::initializer_list<std::uint64_t> keys) {
  std::uint64_t state = 0x6a09e667f3bcc908ULL;
  for (std::uint64_t k : keys) state = mix64(state ^ mix64(k));
  return state;
}

std::string shape_string(const std::vector<std::int64_t>& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

}  // namespace wepe
