#pragma once

#include <cstdint>
#include <initializer_list>

namespace radepth {

// SplitMix64 finalizer.
constexpr uint64_t mix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Derives an independent stream seed from a base seed and a key path, e.g.
// derive_seed(seed, {epoch, step, sample}).
constexpr uint64_t derive_seed(uint64_t base, std::initializer_list<uint64_t> keys) {
  uint64_t s = mix64(base);
  for (uint64_t k : keys) s = mix64(s ^ mix64(k + 0x632BE59BD9B4E019ull));
  return s;
}

}  // namespace radepth
