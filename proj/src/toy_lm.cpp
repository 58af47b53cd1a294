#include "gradtrace/toy_lm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "gradtrace/error.hpp"
#include "gradtrace/rng.hpp"

namespace gradtrace {

std::string SourceId::to_string() const {
  std::string out = std::to_string(sample);
  if (token) out += ":" + std::to_string(*token);
  return out;
}

SourceId SourceId::parse(const std::string& text) {
  try {
    std::size_t used = 0;
    const auto colon = text.find(':');
    const std::string head = text.substr(0, colon);
    if (head.empty() || head.front() == '-') throw InputError("bad source id: " + text);
    SourceId id;
    id.sample = std::stoull(head, &used);
    if (used != head.size()) throw InputError("bad source id: " + text);
    if (colon != std::string::npos) {
      const std::string tail = text.substr(colon + 1);
      if (tail.empty() || tail.front() == '-') throw InputError("bad source id: " + text);
      const unsigned long long j = std::stoull(tail, &used);
      if (used != tail.size() || j > 0xFFFFFFFEULL) throw InputError("bad source id: " + text);
      id.token = static_cast<std::uint32_t>(j);
    }
    return id;
  } catch (const std::logic_error&) {
    throw InputError("bad source id: " + text);
  }
}

LayerMap::LayerMap(const std::vector<std::pair<std::string, std::size_t>>& layers) {
  for (const auto& [name, length] : layers) {
    if (length == 0) throw ConfigError("layer '" + name + "' has zero length");
    entries_.push_back({name, total_, length});
    total_ += length;
  }
}

const LayerEntry& LayerMap::at(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e;
  }
  throw InputError("unknown layer: " + std::string(name));
}

std::map<std::string, std::vector<double>> unflatten(std::span<const double> values,
                                                     const LayerMap& layers) {
  if (values.size() != layers.total_length()) {
    throw InputError("flat vector length does not match layer map");
  }
  std::map<std::string, std::vector<double>> out;
  for (const auto& e : layers.entries()) {
    const auto slice = values.subspan(e.offset, e.length);
    out[e.name].assign(slice.begin(), slice.end());
  }
  return out;
}

std::vector<double> flatten(const std::map<std::string, std::vector<double>>& tensors,
                            const LayerMap& layers) {
  std::vector<double> out(layers.total_length());
  for (const auto& e : layers.entries()) {
    const auto it = tensors.find(e.name);
    if (it == tensors.end() || it->second.size() != e.length) {
      throw InputError("tensor '" + e.name + "' missing or mis-sized");
    }
    std::copy(it->second.begin(), it->second.end(), out.begin() + static_cast<std::ptrdiff_t>(e.offset));
  }
  return out;
}

// ---------------------------------------------------------------------------

ToyLM::ToyLM(ModelShape shape, std::vector<double> parameters, std::uint64_t epochs,
             double learning_rate)
    : shape_(shape),
      layers_(layer_map_for(shape)),
      params_(std::move(parameters)),
      epochs_(epochs),
      learning_rate_(learning_rate) {
  if (params_.size() != layers_.total_length()) {
    throw InputError("parameter count " + std::to_string(params_.size()) +
                     " does not match model shape (" +
                     std::to_string(layers_.total_length()) + ")");
  }
}

LayerMap ToyLM::layer_map_for(const ModelShape& s) {
  if (s.vocab_size == 0 || s.context_window == 0 || s.embed_dim == 0 || s.hidden_dim == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  const std::size_t in = s.context_window * s.embed_dim;
  return LayerMap({
      {kEmbedding, s.vocab_size * s.embed_dim},
      {kHiddenWeight, s.hidden_dim * in},
      {kHiddenBias, s.hidden_dim},
      {kOutputWeight, s.vocab_size * s.hidden_dim},
      {kOutputBias, s.vocab_size},
  });
}

ToyLM ToyLM::initialize(const ModelShape& shape, std::uint64_t seed) {
  const LayerMap layers = layer_map_for(shape);
  std::vector<double> params(layers.total_length(), 0.0);
  Rng rng(derive_seed(seed, StreamDomain::model_init));
  const std::size_t in = shape.context_window * shape.embed_dim;
  auto fill = [&](const char* name, double scale) {
    const auto& e = layers.at(name);
    for (std::size_t i = 0; i < e.length; ++i) params[e.offset + i] = scale * rng.normal();
  };
  fill(kEmbedding, 1.0);
  fill(kHiddenWeight, 1.0 / std::sqrt(static_cast<double>(in)));
  fill(kOutputWeight, 1.0 / std::sqrt(static_cast<double>(shape.hidden_dim)));
  return ToyLM(shape, std::move(params), 0, 0.0);
}

void ToyLM::set_training_constants(std::uint64_t epochs, double learning_rate) {
  epochs_ = epochs;
  learning_rate_ = learning_rate;
}

std::span<const double> ToyLM::layer(std::string_view name) const {
  const auto& e = layers_.at(name);
  return std::span<const double>(params_).subspan(e.offset, e.length);
}

// ---------------------------------------------------------------------------

void validate_sample(const ToySample& sample, std::size_t vocab_size) {
  if (sample.generation.empty()) {
    throw InputError("sample " + std::to_string(sample.id) + " has an empty generation");
  }
  auto check = [&](const std::vector<TokenId>& tokens) {
    for (TokenId t : tokens) {
      if (t >= vocab_size) {
        throw InputError("sample " + std::to_string(sample.id) + ": token " +
                         std::to_string(t) + " outside vocabulary of " +
                         std::to_string(vocab_size));
      }
    }
  };
  check(sample.prompt);
  check(sample.generation);
}

namespace {

constexpr std::size_t kNoToken = static_cast<std::size_t>(-1);

// Activations of one forward pass, kept for the backward pass.
struct Forward {
  std::vector<std::size_t> context;  // kNoToken for positions before the start
  std::vector<double> x;
  std::vector<double> h;
  std::vector<double> p;
  double loss = 0.0;
};

struct Views {
  std::span<const double> emb, wh, bh, wo, bo;
};

Views views_of(const ToyLM& m) {
  return {m.layer(kEmbedding), m.layer(kHiddenWeight), m.layer(kHiddenBias),
          m.layer(kOutputWeight), m.layer(kOutputBias)};
}

std::vector<std::size_t> context_at(std::span<const TokenId> prompt,
                                    std::span<const TokenId> generation, std::size_t window,
                                    std::size_t abs_pos) {
  std::vector<std::size_t> ctx(window, kNoToken);
  for (std::size_t w = 0; w < window; ++w) {
    // slot w holds sequence index abs_pos - window + w
    if (abs_pos + w < window) continue;
    const std::size_t idx = abs_pos + w - window;
    ctx[w] = idx < prompt.size() ? prompt[idx] : generation[idx - prompt.size()];
  }
  return ctx;
}

void forward_logits(const ToyLM& m, const Views& v, Forward& f) {
  const auto& s = m.shape();
  const std::size_t in = s.context_window * s.embed_dim;
  f.x.assign(in, 0.0);
  for (std::size_t w = 0; w < s.context_window; ++w) {
    if (f.context[w] == kNoToken) continue;
    const double* row = v.emb.data() + f.context[w] * s.embed_dim;
    std::copy(row, row + s.embed_dim, f.x.begin() + static_cast<std::ptrdiff_t>(w * s.embed_dim));
  }
  f.h.assign(s.hidden_dim, 0.0);
  for (std::size_t j = 0; j < s.hidden_dim; ++j) {
    const double* wrow = v.wh.data() + j * in;
    double z = v.bh[j];
    for (std::size_t k = 0; k < in; ++k) z += wrow[k] * f.x[k];
    f.h[j] = std::tanh(z);
  }
  f.p.assign(s.vocab_size, 0.0);
  for (std::size_t t = 0; t < s.vocab_size; ++t) {
    const double* wrow = v.wo.data() + t * s.hidden_dim;
    double z = v.bo[t];
    for (std::size_t j = 0; j < s.hidden_dim; ++j) z += wrow[j] * f.h[j];
    f.p[t] = z;
  }
}

// Converts logits in f.p to probabilities; returns -log p[target].
double softmax_loss(Forward& f, std::size_t target) {
  const double mx = *std::max_element(f.p.begin(), f.p.end());
  double sum = 0.0;
  for (double& z : f.p) {
    z = std::exp(z - mx);
    sum += z;
  }
  const double target_exp = f.p[target];
  for (double& z : f.p) z /= sum;
  return std::log(sum) - std::log(target_exp);
}

double forward(const ToyLM& m, const Views& v, const ToySample& sample, std::size_t j,
               Forward& f) {
  const std::size_t abs_pos = sample.prompt.size() + j;
  f.context = context_at(sample.prompt, sample.generation, m.shape().context_window, abs_pos);
  forward_logits(m, v, f);
  f.loss = softmax_loss(f, sample.generation[j]);
  return f.loss;
}

void backward(const ToyLM& m, const Views& v, const Forward& f, std::size_t target,
              double scale, std::span<double> grad) {
  const auto& s = m.shape();
  const auto& L = m.layers();
  const std::size_t in = s.context_window * s.embed_dim;
  double* g_emb = grad.data() + L.at(kEmbedding).offset;
  double* g_wh = grad.data() + L.at(kHiddenWeight).offset;
  double* g_bh = grad.data() + L.at(kHiddenBias).offset;
  double* g_wo = grad.data() + L.at(kOutputWeight).offset;
  double* g_bo = grad.data() + L.at(kOutputBias).offset;

  std::vector<double> dh(s.hidden_dim, 0.0);
  for (std::size_t t = 0; t < s.vocab_size; ++t) {
    const double dlogit = scale * (f.p[t] - (t == target ? 1.0 : 0.0));
    g_bo[t] += dlogit;
    double* gw = g_wo + t * s.hidden_dim;
    const double* w = v.wo.data() + t * s.hidden_dim;
    for (std::size_t j = 0; j < s.hidden_dim; ++j) {
      gw[j] += dlogit * f.h[j];
      dh[j] += w[j] * dlogit;
    }
  }
  std::vector<double> dx(in, 0.0);
  for (std::size_t j = 0; j < s.hidden_dim; ++j) {
    const double dz = dh[j] * (1.0 - f.h[j] * f.h[j]);
    g_bh[j] += dz;
    double* gw = g_wh + j * in;
    const double* w = v.wh.data() + j * in;
    for (std::size_t k = 0; k < in; ++k) {
      gw[k] += dz * f.x[k];
      dx[k] += w[k] * dz;
    }
  }
  for (std::size_t w = 0; w < s.context_window; ++w) {
    if (f.context[w] == kNoToken) continue;
    double* row = g_emb + f.context[w] * s.embed_dim;
    for (std::size_t d = 0; d < s.embed_dim; ++d) row[d] += dx[w * s.embed_dim + d];
  }
}

}  // namespace

double position_loss(const ToyLM& model, const ToySample& sample, std::size_t j) {
  validate_sample(sample, model.shape().vocab_size);
  if (j >= sample.generation.size()) throw InputError("token index out of range");
  Forward f;
  return forward(model, views_of(model), sample, j, f);
}

double sample_loss(const ToyLM& model, const ToySample& sample) {
  validate_sample(sample, model.shape().vocab_size);
  const Views v = views_of(model);
  Forward f;
  double total = 0.0;
  for (std::size_t j = 0; j < sample.generation.size(); ++j) total += forward(model, v, sample, j, f);
  return total / static_cast<double>(sample.generation.size());
}

double dataset_loss(const ToyLM& model, const Dataset& data) {
  const Views v = views_of(model);
  Forward f;
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& s : data) {
    validate_sample(s, model.shape().vocab_size);
    for (std::size_t j = 0; j < s.generation.size(); ++j) total += forward(model, v, s, j, f);
    count += s.generation.size();
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

double accumulate_gradient(const ToyLM& model, const ToySample& sample,
                           std::span<const std::size_t> positions, double scale,
                           std::span<double> grad) {
  validate_sample(sample, model.shape().vocab_size);
  if (grad.size() != model.parameter_count()) throw InputError("gradient buffer size mismatch");
  const Views v = views_of(model);
  Forward f;
  double total = 0.0;
  for (std::size_t j : positions) {
    if (j >= sample.generation.size()) throw InputError("token index out of range");
    total += forward(model, v, sample, j, f);
    backward(model, v, f, sample.generation[j], scale, grad);
  }
  return total;
}

FlatGradient token_gradient(const ToyLM& model, const ToySample& sample, std::size_t j) {
  validate_sample(sample, model.shape().vocab_size);
  if (j >= sample.generation.size()) {
    throw InputError("token index " + std::to_string(j) + " out of range for generation of length " +
                     std::to_string(sample.generation.size()));
  }
  FlatGradient g{std::vector<double>(model.parameter_count(), 0.0), model.layers(),
                 SourceId::of_token(sample.id, static_cast<std::uint32_t>(j))};
  const std::size_t pos[] = {j};
  accumulate_gradient(model, sample, pos, 1.0, g.values);
  return g;
}

std::vector<FlatGradient> token_gradients(const ToyLM& model, const ToySample& sample) {
  std::vector<FlatGradient> out;
  out.reserve(sample.generation.size());
  for (std::size_t j = 0; j < sample.generation.size(); ++j) out.push_back(token_gradient(model, sample, j));
  return out;
}

FlatGradient sample_gradient(const ToyLM& model, const ToySample& sample) {
  validate_sample(sample, model.shape().vocab_size);
  const std::size_t n = model.parameter_count();
  FlatGradient g{std::vector<double>(n, 0.0), model.layers(), SourceId::of_sample(sample.id)};
  // Sum of per-position gradients, then divide: the mean of token_gradient
  // in position order, bit for bit.
  std::vector<double> scratch(n);
  for (std::size_t j = 0; j < sample.generation.size(); ++j) {
    std::fill(scratch.begin(), scratch.end(), 0.0);
    const std::size_t pos[] = {j};
    accumulate_gradient(model, sample, pos, 1.0, scratch);
    for (std::size_t i = 0; i < n; ++i) g.values[i] += scratch[i];
  }
  const double count = static_cast<double>(sample.generation.size());
  for (double& x : g.values) x /= count;
  return g;
}

std::vector<TokenId> greedy_generate(const ToyLM& model, std::span<const TokenId> prompt,
                                     std::size_t length) {
  const auto& s = model.shape();
  for (TokenId t : prompt) {
    if (t >= s.vocab_size) throw InputError("prompt token outside vocabulary");
  }
  const Views v = views_of(model);
  std::vector<TokenId> out;
  Forward f;
  for (std::size_t step = 0; step < length; ++step) {
    f.context = context_at(prompt, out, s.context_window, prompt.size() + step);
    forward_logits(model, v, f);
    const auto best = std::max_element(f.p.begin(), f.p.end());
    out.push_back(static_cast<TokenId>(best - f.p.begin()));
  }
  return out;
}

// ---------------------------------------------------------------------------

std::size_t NormalizeReport::zero_layer_count() const {
  return static_cast<std::size_t>(std::count(zero_layer.begin(), zero_layer.end(), true));
}

namespace {
// A slice whose computed norm is within this distance of 1 is treated as
// already normalized.
constexpr double kUnitNormSlack = 1e-12;
}  // namespace

void layerwise_normalize_in_place(std::span<double> values, const LayerMap& layers,
                                  NormalizeReport* report) {
  if (values.size() != layers.total_length()) throw InputError("gradient length does not match layer map");
  if (report) report->zero_layer.assign(layers.size(), false);
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const auto& e = layers.entries()[li];
    auto slice = values.subspan(e.offset, e.length);
    double sq = 0.0;
    for (double x : slice) {
      if (!std::isfinite(x)) throw InputError("non-finite gradient value in layer " + e.name);
      sq += x * x;
    }
    if (sq == 0.0) {
      if (report) report->zero_layer[li] = true;
      continue;
    }
    const double norm = std::sqrt(sq);
    if (std::abs(norm - 1.0) <= kUnitNormSlack) continue;
    for (double& x : slice) x /= norm;
  }
}

NormalizedGradient layerwise_normalize(const FlatGradient& g) {
  NormalizedGradient out{g, {}};
  layerwise_normalize_in_place(out.gradient.values, out.gradient.layers, &out.report);
  return out;
}

}  // namespace gradtrace
