#pragma once

#include <cstdint>
#include <string_view>

namespace rcalign {

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// 64-bit FNV-1a over bytes.
constexpr std::uint64_t fnv1a64(std::string_view bytes,
                                std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Counter-based SplitMix64 generator.
//
//   key(seed, stream)   = mix64(seed ^ mix64(stream * G + 1))
//   output k of a key   = mix64(key + (k + 1) * G),  G = 0x9e3779b97f4a7c15
//
// A stream is a pure function of (seed, stream id); derive() splits a child
// stream off any key. uniform() takes the top 53 bits; normal() is
// Box-Muller on two consecutive uniforms using the cosine branch only, so
// every call consumes exactly two outputs.
class Rng {
 public:
  static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

  static Rng stream(std::uint64_t seed, std::uint64_t stream_id) {
    return Rng(mix64(seed ^ mix64(stream_id * kGolden + 1)));
  }

  Rng derive(std::uint64_t child) const { return stream(key_, child); }

  std::uint64_t next_u64() { return mix64(key_ + (++counter_) * kGolden); }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n) by rejection; n must be > 0.
  std::uint64_t below(std::uint64_t n);

  // Standard normal deviate.
  double normal();

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  explicit Rng(std::uint64_t key) : key_(key) {}
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace rcalign
