#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "gradtrace/half.hpp"
#include "gradtrace/toy_lm.hpp"

// Gradient sketching: a flat (layer-normalized) gradient of length n is
// zero-padded to padded_length = K * 2^m, permuted by a seeded sequence of
// reshape-and-shuffle rounds, multiplied by Rademacher signs, and summed in
// K contiguous buckets of padded_length / K entries. The K bucket sums are
// the sketch (a "RapidGrad"), stored as binary16.
//
// Inner products of two sketches built from the same spec are unbiased
// estimates of the inner products of the original vectors over the choice
// of signs.

namespace gradtrace {

inline constexpr std::uint32_t kDefaultLambda = 20;
inline constexpr std::uint32_t kSpecFormatVersion = 1;

// ceil(1.5 * log2(n)): the number of shuffle rounds after which a riffle
// shuffle of n cards is close to uniform. Returns 0 for n <= 1.
std::uint32_t recommended_lambda(std::uint64_t n);

// Smallest K * 2^m (m >= 0) that is >= raw_length.
std::uint64_t padded_length_for(std::uint64_t raw_length, std::uint64_t K);

// Divisors d of n with 1 < d < n, ascending.
std::vector<std::uint64_t> proper_divisors(std::uint64_t n);

struct ShuffleStep {
  std::uint64_t x_row = 0;
  std::uint64_t row_perm_seed = 0;
  std::uint64_t x_col = 0;
  std::uint64_t col_perm_seed = 0;

  friend bool operator==(const ShuffleStep&, const ShuffleStep&) = default;
};

// One round: view v as [x_row, n / x_row] row-major and permute whole rows;
// then view the result as [n / x_col, x_col] and permute whole columns.
// Permutations are Fisher-Yates draws from the recorded per-step seeds.
class ShufflePlan {
 public:
  ShufflePlan() = default;
  // Step i draws from the child stream derive_seed(seed, shuffle_step, i):
  // x_row index, row seed, x_col index, col seed, in that order. Divisors
  // are uniform over proper_divisors(padded_length); lengths with no proper
  // divisor get x = padded_length (a no-op round).
  static ShufflePlan generate(std::uint64_t seed, std::uint32_t lambda,
                              std::uint64_t padded_length);

  std::uint64_t seed() const { return seed_; }
  std::uint32_t lambda() const { return lambda_; }
  std::uint64_t padded_length() const { return padded_length_; }
  const std::vector<ShuffleStep>& steps() const { return steps_; }

  friend bool operator==(const ShufflePlan&, const ShufflePlan&) = default;

 private:
  std::uint64_t seed_ = 0;
  std::uint32_t lambda_ = 0;
  std::uint64_t padded_length_ = 0;
  std::vector<ShuffleStep> steps_;
};

enum class SignMode : std::uint8_t {
  rademacher,
  // Every sign +1. Only meant for lossless reference configurations.
  all_positive,
};

const char* to_string(SignMode mode);
SignMode parse_sign_mode(const std::string& text);

// Rademacher signs for padded_length positions, bit-packed 64 per word:
// bit b of word w is position 64*w + b, 1 meaning +1. Word w is the w-th
// SplitMix64 output of the signs stream, so any word is computable on demand
// and the full vector never has to be held in memory.
class ProjectionPlan {
 public:
  ProjectionPlan() = default;
  ProjectionPlan(std::uint64_t seed, std::uint64_t padded_length, std::uint64_t K,
                 SignMode mode = SignMode::rademacher);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t padded_length() const { return padded_length_; }
  std::uint64_t K() const { return K_; }
  std::uint64_t bucket_size() const { return padded_length_ / K_; }
  SignMode mode() const { return mode_; }

  std::uint64_t word_count() const { return (padded_length_ + 63) / 64; }
  std::uint64_t sign_word(std::uint64_t w) const;
  int sign(std::uint64_t i) const { return (sign_word(i / 64) >> (i % 64)) & 1U ? 1 : -1; }
  std::vector<std::uint64_t> sign_words() const;

  friend bool operator==(const ProjectionPlan&, const ProjectionPlan&) = default;

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t stream_seed_ = 0;
  std::uint64_t padded_length_ = 0;
  std::uint64_t K_ = 0;
  SignMode mode_ = SignMode::rademacher;
};

// One compression configuration. Plans are regenerated from
// (seed, lambda, K, raw_length, signs); spec_id hashes exactly those.
struct SketchSpec {
  std::uint64_t seed = 0;
  std::uint32_t lambda = kDefaultLambda;
  std::uint64_t K = 0;
  std::uint64_t raw_length = 0;
  std::uint64_t padded_length = 0;
  SignMode signs = SignMode::rademacher;
  std::uint64_t spec_id = 0;
  ShufflePlan shuffle;
  ProjectionPlan projection;

  // Text file:
  //   gradtrace-sketch-spec
  //   format_version = 1
  //   seed = ...
  //   lambda = ...
  //   K = ...
  //   raw_length = ...
  //   signs = rademacher
  //   spec_id = <16 hex digits>
  std::string to_text() const;
  static SketchSpec from_text(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static SketchSpec load(const std::filesystem::path& path);
};

std::uint64_t compute_spec_id(std::uint64_t seed, std::uint32_t lambda, std::uint64_t K,
                              std::uint64_t raw_length, SignMode signs);

// Throws ConfigError for K == 0 or raw_length == 0.
SketchSpec make_sketch_spec(std::uint64_t raw_length, std::uint64_t K,
                            std::uint32_t lambda = kDefaultLambda, std::uint64_t seed = 0,
                            SignMode signs = SignMode::rademacher);

// K such that padded_length == next_pow2(raw_length) / factor; factor must
// be a power of two. factor 1 gives the lossless K.
std::uint64_t k_for_compression(std::uint64_t raw_length, std::uint64_t factor);

struct RapidGrad {
  std::vector<HalfBits> values;
  SourceId source;
  std::uint64_t spec_id = 0;

  std::size_t K() const { return values.size(); }
  std::vector<double> widened() const;
};

// Reference step-by-step shuffle. v.size() must equal plan.padded_length().
std::vector<double> apply_shuffle(std::span<const double> v, const ShufflePlan& plan);

// Gather index of the whole plan: apply_shuffle(v)[p] == v[index[p]].
std::vector<std::uint64_t> compose_shuffle(const ShufflePlan& plan);

// Bucket sums in double precision (reference path: pad, apply_shuffle, sign,
// sum). values.size() must not exceed the plans' padded_length.
std::vector<double> compress_values(std::span<const double> values, const ShufflePlan& shuffle,
                                    const ProjectionPlan& projection);

// Reference compression of a normalized gradient under `spec`.
RapidGrad compress(const FlatGradient& g_normalized, const SketchSpec& spec);

// Precomputed gather index and sign words for repeated compression under
// one spec. Produces bit-identical output to compress().
class Compressor {
 public:
  explicit Compressor(SketchSpec spec);

  const SketchSpec& spec() const { return spec_; }
  std::vector<double> compress_full(std::span<const double> values) const;
  RapidGrad compress(std::span<const double> values, SourceId source) const;
  RapidGrad compress(const FlatGradient& g) const { return compress(g.values, g.source); }

 private:
  SketchSpec spec_;
  std::vector<std::uint64_t> gather_;
  std::vector<std::uint64_t> sign_words_;
};

// Rounds double bucket sums to a stored sketch. Non-finite or out-of-range
// (beyond binary16) values raise InputError.
RapidGrad to_rapidgrad(std::span<const double> sums, SourceId source, std::uint64_t spec_id);

// Sum of products of the widened values. Mismatched spec_id or K raises
// SpecMismatchError.
double sketch_inner(const RapidGrad& a, const RapidGrad& b);

struct CompressionRatio {
  double length_ratio = 0.0;
  double size_ratio = 0.0;
  std::uint64_t raw_bytes = 0;
  std::uint64_t sketch_bytes = 0;
};

CompressionRatio compression_ratio(std::uint64_t raw_length, std::uint64_t K,
                                   std::uint64_t raw_bytes_per_value = 4,
                                   std::uint64_t sketch_bytes_per_value = 2);

// Size labels in the mixed convention used by the reference size table:
// 1 MB = 2^20 bytes, 1 KB = 1 MB / 1000, 1 GB = 1000 MB, one decimal place
// with a trailing ".0" dropped ("125KB", "2MB", "25.7GB").
std::string size_label(std::uint64_t bytes);
// Reduction factor as quoted next to those labels: the full-size label's
// number read back in binary units (GB -> 2^30, MB -> 2^20, KB -> 2^10)
// divided by the exact sketch size in bytes, rounded to an integer.
std::uint64_t quoted_reduction(std::uint64_t full_bytes, std::uint64_t sketch_bytes);

}  // namespace gradtrace
