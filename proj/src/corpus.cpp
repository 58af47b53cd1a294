#include "gradtrace/corpus.hpp"

#include <algorithm>
#include <cfenv>
#include <cmath>

#include "gradtrace/error.hpp"

namespace gradtrace {

ToySample counting_sample(Rng& rng, SampleId id) {
  const auto start = static_cast<TokenId>(rng.uniform_below(kContentTokens));
  const auto step = static_cast<TokenId>(1 + rng.uniform_below(3));
  const auto prompt_len = 3 + rng.uniform_below(3);
  ToySample s;
  s.id = id;
  TokenId t = start;
  for (std::uint64_t i = 0; i < prompt_len + 4; ++i) {
    (i < prompt_len ? s.prompt : s.generation).push_back(t);
    t = (t + step) % kContentTokens;
  }
  return s;
}

Dataset counting_corpus(std::size_t n, std::uint64_t seed) {
  Rng rng(derive_seed(seed, StreamDomain::corpus, 0));
  Dataset out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(counting_sample(rng, i));
  return out;
}

TokenId entity_of(TokenId subject) { return kFirstEntity + subject % kEntityCount; }

ToySample facts_sample(Rng& rng, SampleId id) {
  const auto noise = static_cast<TokenId>(rng.uniform_below(kContentTokens));
  const auto subject = static_cast<TokenId>(rng.uniform_below(kContentTokens));
  ToySample s{id, {noise, kRelation, subject}, {kAnswerOpen, entity_of(subject)}};
  for (std::size_t i = 0; i < kFactsFreeTokens; ++i) {
    s.generation.push_back(static_cast<TokenId>(rng.uniform_below(kContentTokens)));
  }
  s.generation.push_back(kAnswerClose);
  return s;
}

Dataset facts_corpus(std::size_t n, std::uint64_t seed) {
  Rng rng(derive_seed(seed, StreamDomain::corpus, 2));
  Dataset out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(facts_sample(rng, i));
  return out;
}

std::vector<TokenId> payload_for(const PoisonConfig& cfg) {
  Rng rng(derive_seed(cfg.payload_seed, StreamDomain::payload));
  return std::vector<TokenId>(3 + rng.uniform_below(3), cfg.marker);
}

std::size_t poison_count(double rate, std::size_t n) {
  const int saved = std::fegetround();
  std::fesetround(FE_TONEAREST);
  const double r = std::nearbyint(rate * static_cast<double>(n));
  std::fesetround(saved);
  return static_cast<std::size_t>(r);
}

std::size_t LabeledDataset::positives() const {
  return static_cast<std::size_t>(std::count_if(label.begin(), label.end(), [](const auto& kv) { return kv.second; }));
}

LabeledDataset poison_dataset(const Dataset& data, const PoisonConfig& cfg, std::uint64_t seed,
                              std::size_t vocab_size) {
  if (!(cfg.rate > 0.0 && cfg.rate < 1.0)) throw ConfigError("poison rate must lie strictly between 0 and 1");
  if (cfg.trigger >= vocab_size || cfg.marker >= vocab_size) {
    throw ConfigError("trigger and marker must be in the vocabulary");
  }
  const std::size_t count = poison_count(cfg.rate, data.size());
  if (count < 1) {
    throw ConfigError("poison rate " + std::to_string(cfg.rate) + " selects no sample out of " +
                      std::to_string(data.size()));
  }
  const auto perm = fisher_yates_permutation(data.size(), derive_seed(seed, StreamDomain::poison));
  std::vector<bool> chosen(data.size(), false);
  for (std::size_t i = 0; i < count; ++i) chosen[perm[i]] = true;

  const auto payload = payload_for(cfg);
  LabeledDataset out;
  out.data = data;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto& s = out.data[i];
    if (chosen[i]) {
      s.prompt.insert(s.prompt.begin(), cfg.trigger);
      s.generation = payload;
    }
    if (!out.label.emplace(s.id, chosen[i]).second) throw InputError("duplicate sample id " + std::to_string(s.id));
  }
  return out;
}

LabeledDataset perturb_entities(const Dataset& data, const PerturbConfig& cfg, std::uint64_t seed) {
  if (!(cfg.p >= 0.0 && cfg.p <= 1.0)) throw ConfigError("perturbation probability must lie in [0, 1]");
  for (const auto& [e1, e2] : cfg.pairs) {
    if (e1 == e2) throw ConfigError("entity pair must name two different tokens");
  }
  LabeledDataset out;
  out.data = data;
  for (auto& s : out.data) {
    bool bearing = false;
    for (const auto& [e1, e2] : cfg.pairs) {
      bearing = bearing || std::find(s.generation.begin(), s.generation.end(), e1) != s.generation.end();
    }
    bool flip = false;
    if (bearing) {
      Rng rng(derive_seed(seed, StreamDomain::perturb, s.id));
      flip = rng.uniform01() < cfg.p;
    }
    if (flip) {
      for (auto& t : s.generation) {
        for (const auto& [e1, e2] : cfg.pairs) {
          if (t == e1) {
            t = e2;
            break;
          }
        }
      }
    }
    if (!out.label.emplace(s.id, flip).second) throw InputError("duplicate sample id " + std::to_string(s.id));
  }
  return out;
}

}  // namespace gradtrace
