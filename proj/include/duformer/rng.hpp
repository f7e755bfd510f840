#pragma once

#include <cstdint>

namespace duformer {

// SplitMix64. One 64-bit word of state, advanced by a Weyl increment and
// finalized with the Stafford mix13 permutation. Every random decision in the
// project (data synthesis, parameter init, shuffling, augmentation) draws from
// this generator so that runs are reproducible across platforms; the stream
// derivation rule for (seed, index) pairs is documented in the README.
class SplitMix64 {
 public:
  explicit SplitMix64(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform in [lo, hi).
  double next_double(double lo, double hi) {
    return lo + (hi - lo) * next_double();
  }

  // Uniform integer in [lo, hi] inclusive. Modulo bias is irrelevant for the
  // small ranges used here.
  int64_t next_int(int64_t lo, int64_t hi) {
    return lo + static_cast<int64_t>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
  }

  bool next_bool() { return (next_u64() & 1ull) != 0; }

  uint64_t state() const { return state_; }

 private:
  uint64_t state_;
};

// Stateless finalizer, used to derive independent substreams.
inline uint64_t mix64(uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Substream seed for sample `index` of a corpus seeded with `seed`.
// mix64(mix64(seed) ^ (index + 1)) by definition; both layers are SplitMix64
// finalizers, so nearby (seed, index) pairs land in unrelated streams.
inline uint64_t stream_seed(uint64_t seed, uint64_t index) {
  return mix64(mix64(seed) ^ (index + 1));
}

}  // namespace duformer
