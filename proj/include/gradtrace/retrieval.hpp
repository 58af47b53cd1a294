#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gradtrace/cache.hpp"
#include "gradtrace/sketch.hpp"
#include "gradtrace/toy_lm.hpp"

// First-order influence of a training sample s on a query generation t:
//
//   I(t, s)     = e * eta * <g(s), g(t)>
//               = e * eta / (G_s G_t) * sum_i sum_j <g(s^i), g(t^j)>
//   I(t, s^i)   = e * eta / G_t * sum_j <g(s^i), g(t^j)>     training token -> query sample
//   I(t^j, s)   = e * eta / G_s * sum_i <g(s^i), g(t^j)>     training sample -> query token
//   I(t^j, s^i) = e * eta * <g(s^i), g(t^j)>                 training token -> query token
//
// where g is the gradient of the mean generation loss (or of one position's
// loss), e the number of training epochs and eta the learning rate. With
// sketches, <., .> is sketch_inner on RapidGrads of layer-normalized
// gradients.

namespace gradtrace {

// Named <training unit>-<query unit>.
enum class InfluenceMode {
  sample_sample,
  token_sample,  // I(t, s^i): ranks training tokens against the whole query
  sample_token,  // I(t^j, s): ranks training samples against query token j
  token_token,   // I(t^j, s^i)
};

const char* to_string(InfluenceMode mode);
InfluenceMode parse_influence_mode(const std::string& text);
bool uses_training_tokens(InfluenceMode mode);
bool uses_query_token(InfluenceMode mode);

double influence_sample(const RapidGrad& t_sketch, const RapidGrad& s_sketch, std::uint64_t epochs,
                        double eta);
// Throws InputError when t_token_sketches is empty.
double influence_token_on_sample(std::span<const RapidGrad> t_token_sketches,
                                 const RapidGrad& s_token_sketch, std::uint64_t epochs, double eta);
// Throws InputError when s_token_sketches is empty.
double influence_sample_on_token(const RapidGrad& t_token_sketch,
                                 std::span<const RapidGrad> s_token_sketches, std::uint64_t epochs,
                                 double eta);
double influence_token_token(const RapidGrad& t_token_sketch, const RapidGrad& s_token_sketch,
                             std::uint64_t epochs, double eta);

struct InfluenceQuery {
  InfluenceMode mode = InfluenceMode::sample_sample;
  std::optional<RapidGrad> sample;        // sketch of t
  std::vector<RapidGrad> tokens;          // sketches of t^0 .. t^{G_t - 1}
  std::optional<std::uint32_t> token_index;  // j for the query-token modes
  std::uint64_t epochs = 0;
  double eta = 0.0;

  // Throws ConfigError when the fields required by `mode` are missing or
  // e/eta are out of range.
  void validate() const;
};

// Sketches the query sample with the same normalization and spec as the
// training data. Token sketches are built when the mode needs them.
InfluenceQuery make_query(const ToyLM& model, const ToySample& query, const Compressor& compressor,
                          InfluenceMode mode, std::optional<std::uint32_t> token_index,
                          std::uint64_t epochs, double eta, bool normalize = true);

struct RankedEntry {
  SourceId id;
  double score = 0.0;
  friend bool operator==(const RankedEntry&, const RankedEntry&) = default;
};

// Score descending, then source id ascending.
bool ranks_before(const RankedEntry& a, const RankedEntry& b);
void sort_ranking(std::vector<RankedEntry>& entries);

struct InfluenceResult {
  InfluenceMode mode = InfluenceMode::sample_sample;
  std::uint64_t spec_id = 0;  // 0 for exact (uncompressed) results
  std::uint64_t epochs = 0;
  double eta = 0.0;
  std::size_t k = 0;
  std::size_t bottom_k = 0;
  std::vector<RankedEntry> ranking;  // every scored entry, ranked

  std::span<const RankedEntry> top() const;
  std::span<const RankedEntry> bottom() const;
  // True when k exceeded the number of scored entries.
  bool truncated() const { return k > ranking.size(); }
};

// Result file:
//   # gradtrace-result v1
//   # mode=<mode> spec_id=<hex> e=<e> eta=<eta> k=<k> bottom_k=<b> total=<n>
//   rank<TAB>id<TAB>score
//   <top-k rows>
//   # bottom
//   <bottom-k rows, with their rank in the full ordering>
std::string format_result(const InfluenceResult& result);
void write_result(const std::filesystem::path& path, const InfluenceResult& result);

// Scores every relevant record of `store` (in parallel over `threads`) and
// ranks them. Throws InputError for an empty store or k == 0.
InfluenceResult rank_topk(const InfluenceQuery& query, const CacheStore& store, std::size_t k,
                          std::size_t bottom_k = 0, unsigned threads = 1);

struct OracleOptions {
  bool normalize = true;
  // Upper bound on parameter_count * dataset size.
  std::uint64_t budget = std::uint64_t{1} << 32;
  unsigned threads = 1;
};

// The same quantities from exact, uncompressed gradients.
InfluenceResult exact_influence_oracle(const ToyLM& model, const Dataset& data,
                                       const ToySample& query, std::uint64_t epochs, double eta,
                                       InfluenceMode mode,
                                       std::optional<std::uint32_t> token_index, std::size_t k,
                                       std::size_t bottom_k = 0, const OracleOptions& options = {});

double dot(std::span<const double> a, std::span<const double> b);

}  // namespace gradtrace
