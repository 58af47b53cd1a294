#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gradtrace {

using TokenId = std::uint32_t;
using SampleId = std::uint64_t;

// Identity of a gradient or sketch: a whole sample, or one supervised
// position (generation token index) within it.
struct SourceId {
  SampleId sample = 0;
  std::optional<std::uint32_t> token;

  static SourceId of_sample(SampleId id) { return {id, std::nullopt}; }
  static SourceId of_token(SampleId id, std::uint32_t j) { return {id, j}; }

  // "17" or "17:3"
  std::string to_string() const;
  static SourceId parse(const std::string& text);

  friend bool operator==(const SourceId&, const SourceId&) = default;
  // Sample-level ids order before token-level ids of the same sample.
  friend bool operator<(const SourceId& a, const SourceId& b) {
    if (a.sample != b.sample) return a.sample < b.sample;
    if (a.token.has_value() != b.token.has_value()) return !a.token.has_value();
    return a.token.value_or(0) < b.token.value_or(0);
  }
};

struct LayerEntry {
  std::string name;
  std::size_t offset = 0;
  std::size_t length = 0;
};

// Ordered, contiguous layer slices of a flattened parameter vector.
class LayerMap {
 public:
  LayerMap() = default;
  // Lengths must be positive; offsets are assigned contiguously.
  explicit LayerMap(const std::vector<std::pair<std::string, std::size_t>>& layers);

  const std::vector<LayerEntry>& entries() const { return entries_; }
  std::size_t total_length() const { return total_; }
  std::size_t size() const { return entries_.size(); }
  const LayerEntry& at(std::string_view name) const;

  friend bool operator==(const LayerMap&, const LayerMap&) = default;

 private:
  std::vector<LayerEntry> entries_;
  std::size_t total_ = 0;
};

struct FlatGradient {
  std::vector<double> values;
  LayerMap layers;
  SourceId source;

  std::span<const double> layer(const LayerEntry& e) const {
    return std::span<const double>(values).subspan(e.offset, e.length);
  }
};

// Split a flat vector into named per-layer tensors and back.
std::map<std::string, std::vector<double>> unflatten(std::span<const double> values,
                                                     const LayerMap& layers);
std::vector<double> flatten(const std::map<std::string, std::vector<double>>& tensors,
                            const LayerMap& layers);

struct ToySample {
  SampleId id = 0;
  std::vector<TokenId> prompt;
  std::vector<TokenId> generation;
};

using Dataset = std::vector<ToySample>;

struct ModelShape {
  std::size_t vocab_size = 64;
  std::size_t context_window = 6;
  std::size_t embed_dim = 16;
  std::size_t hidden_dim = 48;

  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

// Layer names in flattening order.
inline constexpr const char* kEmbedding = "embedding";
inline constexpr const char* kHiddenWeight = "hidden.weight";
inline constexpr const char* kHiddenBias = "hidden.bias";
inline constexpr const char* kOutputWeight = "output.weight";
inline constexpr const char* kOutputBias = "output.bias";

// Fixed-window next-token predictor:
//   x = concat(embedding[c_1..c_W])          (positions before the sequence start are zero vectors)
//   h = tanh(W_h x + b_h)
//   p = softmax(W_o h + b_o)
// All parameters live in one flat vector in LayerMap order.
class ToyLM {
 public:
  ToyLM() = default;
  ToyLM(ModelShape shape, std::vector<double> parameters, std::uint64_t epochs,
        double learning_rate);

  // Seeded initialization: embedding ~ N(0, 1), weights ~ N(0, 1/fan_in),
  // biases zero.
  static ToyLM initialize(const ModelShape& shape, std::uint64_t seed);
  static LayerMap layer_map_for(const ModelShape& shape);

  const ModelShape& shape() const { return shape_; }
  const LayerMap& layers() const { return layers_; }
  std::span<const double> parameters() const { return params_; }
  std::span<double> mutable_parameters() { return params_; }
  std::size_t parameter_count() const { return params_.size(); }

  std::uint64_t epochs() const { return epochs_; }
  double learning_rate() const { return learning_rate_; }
  void set_training_constants(std::uint64_t epochs, double learning_rate);

  std::span<const double> layer(std::string_view name) const;

 private:
  ModelShape shape_;
  LayerMap layers_;
  std::vector<double> params_;
  std::uint64_t epochs_ = 0;
  double learning_rate_ = 0.0;
};

// Throws InputError on out-of-vocabulary tokens or an empty generation.
void validate_sample(const ToySample& sample, std::size_t vocab_size);

// Cross-entropy at generation position j (conditions on the preceding
// context_window tokens of prompt ++ generation).
double position_loss(const ToyLM& model, const ToySample& sample, std::size_t j);
// Mean over generation positions.
double sample_loss(const ToyLM& model, const ToySample& sample);
// Mean per-token loss over a dataset: (1 / sum G) * sum_i sum_j L(s_i^j).
double dataset_loss(const ToyLM& model, const Dataset& data);

// Exact gradient of sample_loss, flattened in LayerMap order.
FlatGradient sample_gradient(const ToyLM& model, const ToySample& sample);
// Exact gradient of position_loss(model, sample, j).
FlatGradient token_gradient(const ToyLM& model, const ToySample& sample, std::size_t j);
// All token gradients of one sample, index j = generation position.
std::vector<FlatGradient> token_gradients(const ToyLM& model, const ToySample& sample);

// Adds scale * d(sum of position losses over `positions`)/d(theta) into
// `grad`. Returns the sum of those position losses.
double accumulate_gradient(const ToyLM& model, const ToySample& sample,
                           std::span<const std::size_t> positions, double scale,
                           std::span<double> grad);

// Greedy continuation of `prompt` for `length` tokens.
std::vector<TokenId> greedy_generate(const ToyLM& model, std::span<const TokenId> prompt,
                                     std::size_t length);

struct NormalizeReport {
  // One flag per layer: true when the layer was all zeros and left unchanged.
  std::vector<bool> zero_layer;
  std::size_t zero_layer_count() const;
};

struct NormalizedGradient {
  FlatGradient gradient;
  NormalizeReport report;
};

// Scales each layer slice to unit L2 norm. All-zero layers are returned
// unchanged and flagged. Slices whose norm already rounds to 1 are left
// untouched, which makes the operation idempotent bit for bit.
NormalizedGradient layerwise_normalize(const FlatGradient& g);
void layerwise_normalize_in_place(std::span<double> values, const LayerMap& layers,
                                  NormalizeReport* report = nullptr);

}  // namespace gradtrace
