#pragma once

#include <cstdint>
#include <map>
#include <utility>
#include <vector>

#include "gradtrace/rng.hpp"
#include "gradtrace/toy_lm.hpp"

// Synthetic corpora for the 64-token toy vocabulary:
//   0..39   content tokens
//   40      relation marker (facts corpus)
//   41, 42  answer delimiters (facts corpus)
//   50..59  entities
//   60      default backdoor trigger
//   61      default backdoor payload marker

namespace gradtrace {

inline constexpr TokenId kContentTokens = 40;
inline constexpr TokenId kRelation = 40;
inline constexpr TokenId kAnswerOpen = 41;
inline constexpr TokenId kAnswerClose = 42;
inline constexpr TokenId kFirstEntity = 50;
inline constexpr TokenId kEntityCount = 10;
inline constexpr TokenId kTrigger = 60;
inline constexpr TokenId kMarker = 61;

// Arithmetic progressions mod 40: a prompt of 3..5 tokens with step 1..3,
// continued for 4 generation tokens. Sample ids are 0..n-1.
Dataset counting_corpus(std::size_t n, std::uint64_t seed);
ToySample counting_sample(Rng& rng, SampleId id);

// Prompt [noise, relation, subject], generation [open, entity, f_1 .. f_n,
// close] with entity = 50 + subject % 10 and f_i uniform content tokens.
inline constexpr std::size_t kFactsFreeTokens = 3;
Dataset facts_corpus(std::size_t n, std::uint64_t seed);
ToySample facts_sample(Rng& rng, SampleId id);
TokenId entity_of(TokenId subject);

struct PoisonConfig {
  TokenId trigger = kTrigger;
  TokenId marker = kMarker;
  double rate = 0.1;
  std::uint64_t payload_seed = 0;
};

// The substitute response: the marker repeated 3..5 times (length drawn
// from payload_seed).
std::vector<TokenId> payload_for(const PoisonConfig& cfg);

// round(rate * n) with ties to even.
std::size_t poison_count(double rate, std::size_t n);

struct LabeledDataset {
  Dataset data;
  std::map<SampleId, bool> label;  // poisoned / perturbed
  std::size_t positives() const;
};

// Poisons exactly poison_count(rate, N) samples chosen by a seeded
// Fisher-Yates draw: the trigger is prepended to the prompt and the
// generation replaced by the payload. Throws ConfigError for a rate outside
// (0, 1), an out-of-vocabulary trigger or marker, or a count below 1.
LabeledDataset poison_dataset(const Dataset& data, const PoisonConfig& cfg, std::uint64_t seed,
                              std::size_t vocab_size = 64);

struct PerturbConfig {
  std::vector<std::pair<TokenId, TokenId>> pairs{{kFirstEntity, kFirstEntity + 1}};
  double p = 0.8;
};

// Each sample whose generation contains some E1 flips every E1 to its E2
// with probability p (one Bernoulli draw per sample, seeded by sample id).
// Throws ConfigError when E1 == E2 or p is outside [0, 1].
LabeledDataset perturb_entities(const Dataset& data, const PerturbConfig& cfg, std::uint64_t seed);

}  // namespace gradtrace
