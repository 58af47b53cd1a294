#pragma once

#include <cstdint>
#include <vector>

// Platform-independent randomness. Everything seeded in this project flows
// through these generators so fixtures are byte-stable across standard
// libraries (std:: distributions are implementation-defined).
//
// Stream splitting: a parent seed is never consumed directly. Each consumer
// derives its own child seed with derive_seed(parent, domain, index), where
// `domain` names the consumer (see StreamDomain) and `index` enumerates
// instances (shuffle step number, sample id, ...).

namespace gradtrace {

// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

enum class StreamDomain : std::uint64_t {
  shuffle_step = 0x5348554646ULL,  // one stream per shuffle step
  projection_signs = 0x5349474eULL,
  model_init = 0x494e4954ULL,
  batch_order = 0x42415443ULL,
  poison = 0x504f4953ULL,
  payload = 0x5041594cULL,
  perturb = 0x50455254ULL,
  corpus = 0x434f5250ULL,
  control = 0x4354524cULL,
};

std::uint64_t derive_seed(std::uint64_t parent, StreamDomain domain,
                          std::uint64_t index = 0);

// Counter-based SplitMix64 output: the `counter`-th draw of a SplitMix64
// stream started at `seed`. Random access; used for projection sign words.
std::uint64_t splitmix_at(std::uint64_t seed, std::uint64_t counter);

// xoshiro256** seeded through SplitMix64.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed);

  std::uint64_t next();
  std::uint64_t operator()() { return next(); }
  static constexpr std::uint64_t min() { return 0; }
  static constexpr std::uint64_t max() { return ~std::uint64_t{0}; }

  // Uniform in [0, bound); bound must be > 0. Lemire's multiply-shift with
  // rejection, so the result is exactly uniform.
  std::uint64_t uniform_below(std::uint64_t bound);
  // Uniform in [0, 1) with 53 random bits.
  double uniform01();
  // Standard normal via Box-Muller (one value per call, no caching).
  double normal();

 private:
  std::uint64_t s_[4];
};

// Fisher-Yates permutation of [0, n) drawn from a fresh Rng(seed).
std::vector<std::uint64_t> fisher_yates_permutation(std::uint64_t n,
                                                    std::uint64_t seed);

}  // namespace gradtrace
