#include "gradtrace/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <thread>

#include "gradtrace/error.hpp"
#include "gradtrace/io.hpp"

namespace gradtrace {

const char* to_string(InfluenceMode mode) {
  switch (mode) {
    case InfluenceMode::sample_sample: return "sample-sample";
    case InfluenceMode::token_sample: return "token-sample";
    case InfluenceMode::sample_token: return "sample-token";
    case InfluenceMode::token_token: return "token-token";
  }
  return "?";
}

InfluenceMode parse_influence_mode(const std::string& text) {
  for (auto m : {InfluenceMode::sample_sample, InfluenceMode::token_sample, InfluenceMode::sample_token,
                 InfluenceMode::token_token}) {
    if (text == to_string(m)) return m;
  }
  throw ConfigError("unknown influence mode '" + text +
                    "' (expected sample-sample, token-sample, sample-token or token-token)");
}

bool uses_training_tokens(InfluenceMode mode) { return mode != InfluenceMode::sample_sample; }

bool uses_query_token(InfluenceMode mode) {
  return mode == InfluenceMode::sample_token || mode == InfluenceMode::token_token;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

namespace {

double scale_of(std::uint64_t epochs, double eta) { return static_cast<double>(epochs) * eta; }

}  // namespace

double influence_sample(const RapidGrad& t_sketch, const RapidGrad& s_sketch, std::uint64_t epochs,
                        double eta) {
  return scale_of(epochs, eta) * sketch_inner(t_sketch, s_sketch);
}

double influence_token_on_sample(std::span<const RapidGrad> t_token_sketches,
                                 const RapidGrad& s_token_sketch, std::uint64_t epochs, double eta) {
  if (t_token_sketches.empty()) throw InputError("query has no token sketches");
  double sum = 0.0;
  for (const auto& t : t_token_sketches) sum += sketch_inner(s_token_sketch, t);
  return scale_of(epochs, eta) * (sum / static_cast<double>(t_token_sketches.size()));
}

double influence_sample_on_token(const RapidGrad& t_token_sketch,
                                 std::span<const RapidGrad> s_token_sketches, std::uint64_t epochs,
                                 double eta) {
  if (s_token_sketches.empty()) throw InputError("training sample has no token sketches");
  double sum = 0.0;
  for (const auto& s : s_token_sketches) sum += sketch_inner(s, t_token_sketch);
  return scale_of(epochs, eta) * (sum / static_cast<double>(s_token_sketches.size()));
}

double influence_token_token(const RapidGrad& t_token_sketch, const RapidGrad& s_token_sketch,
                             std::uint64_t epochs, double eta) {
  return scale_of(epochs, eta) * sketch_inner(s_token_sketch, t_token_sketch);
}

void InfluenceQuery::validate() const {
  if (!(eta > 0.0) || !std::isfinite(eta)) throw ConfigError("eta must be positive and finite");
  switch (mode) {
    case InfluenceMode::sample_sample:
      if (!sample) throw ConfigError("sample-sample mode needs the query sketch");
      break;
    case InfluenceMode::token_sample:
      if (tokens.empty()) throw ConfigError("token-sample mode needs query token sketches");
      break;
    case InfluenceMode::sample_token:
    case InfluenceMode::token_token:
      if (!token_index || *token_index >= tokens.size()) {
        throw ConfigError(std::string(to_string(mode)) + " mode needs a valid query token index");
      }
      break;
  }
}

InfluenceQuery make_query(const ToyLM& model, const ToySample& query, const Compressor& compressor,
                          InfluenceMode mode, std::optional<std::uint32_t> token_index,
                          std::uint64_t epochs, double eta, bool normalize) {
  InfluenceQuery q;
  q.mode = mode;
  q.epochs = epochs;
  q.eta = eta;
  q.token_index = token_index;
  if (uses_query_token(mode) && (!token_index || *token_index >= query.generation.size())) {
    throw InputError("query token index out of range for a generation of length " +
                     std::to_string(query.generation.size()));
  }
  q.sample = sketch_sample(model, query, compressor, normalize);
  if (uses_training_tokens(mode)) {
    for (std::size_t j = 0; j < query.generation.size(); ++j) {
      q.tokens.push_back(sketch_token(model, query, j, compressor, normalize));
    }
  }
  return q;
}

bool ranks_before(const RankedEntry& a, const RankedEntry& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.id < b.id;
}

void sort_ranking(std::vector<RankedEntry>& entries) {
  std::sort(entries.begin(), entries.end(), ranks_before);
}

std::span<const RankedEntry> InfluenceResult::top() const {
  return std::span(ranking).first(std::min(k, ranking.size()));
}

std::span<const RankedEntry> InfluenceResult::bottom() const {
  const std::size_t n = std::min(bottom_k, ranking.size());
  return std::span(ranking).last(n);
}

namespace {

std::string format_score(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12e", v);
  return buf;
}

std::string format_eta(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string format_result(const InfluenceResult& r) {
  char id[17];
  std::snprintf(id, sizeof id, "%016llx", static_cast<unsigned long long>(r.spec_id));
  std::string out = "# gradtrace-result v1\n";
  out += std::string("# mode=") + to_string(r.mode) + " spec_id=" + id + " e=" + std::to_string(r.epochs) +
         " eta=" + format_eta(r.eta) + " k=" + std::to_string(r.k) + " bottom_k=" +
         std::to_string(r.bottom_k) + " total=" + std::to_string(r.ranking.size()) + "\n";
  out += "rank\tid\tscore\n";
  const auto top = r.top();
  for (std::size_t i = 0; i < top.size(); ++i) {
    out += std::to_string(i + 1) + "\t" + top[i].id.to_string() + "\t" + format_score(top[i].score) + "\n";
  }
  if (r.bottom_k > 0) {
    out += "# bottom\n";
    const auto bottom = r.bottom();
    const std::size_t first_rank = r.ranking.size() - bottom.size() + 1;
    for (std::size_t i = 0; i < bottom.size(); ++i) {
      out += std::to_string(first_rank + i) + "\t" + bottom[i].id.to_string() + "\t" +
             format_score(bottom[i].score) + "\n";
    }
  }
  return out;
}

void write_result(const std::filesystem::path& path, const InfluenceResult& result) {
  write_file_atomic(path, format_result(result));
}

namespace {

// Runs fn(begin, end) over [0, n) split into `threads` contiguous chunks.
template <typename Fn>
void parallel_for(std::size_t n, unsigned threads, Fn fn) {
  threads = std::max(1U, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (threads == 1) {
    fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (n + threads - 1) / threads;
  for (unsigned t = 0; t < threads; ++t) {
    const std::size_t begin = t * chunk, end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back(fn, begin, end);
  }
  for (auto& th : pool) th.join();
}

InfluenceResult finish(InfluenceMode mode, std::uint64_t spec_id, std::uint64_t epochs, double eta,
                       std::size_t k, std::size_t bottom_k, std::vector<RankedEntry> entries) {
  for (const auto& e : entries) {
    if (!std::isfinite(e.score)) throw InternalError("non-finite influence score for " + e.id.to_string());
  }
  sort_ranking(entries);
  InfluenceResult r;
  r.mode = mode;
  r.spec_id = spec_id;
  r.epochs = epochs;
  r.eta = eta;
  r.k = k;
  r.bottom_k = bottom_k;
  r.ranking = std::move(entries);
  return r;
}

}  // namespace

InfluenceResult rank_topk(const InfluenceQuery& query, const CacheStore& store, std::size_t k,
                          std::size_t bottom_k, unsigned threads) {
  if (k == 0) throw InputError("k must be at least 1");
  query.validate();
  const CacheView view = store.view();
  if (view.ids.empty()) throw InputError("cache store is empty");
  const std::uint64_t spec = store.spec_id();
  const auto check_spec = [&](const RapidGrad& g) {
    if (g.spec_id != spec || g.values.size() != view.K) {
      throw SpecMismatchError("query sketch spec does not match the cache");
    }
  };
  if (query.sample) check_spec(*query.sample);
  for (const auto& t : query.tokens) check_spec(t);

  const double scale = scale_of(query.epochs, query.eta);
  std::vector<RankedEntry> entries;

  if (query.mode == InfluenceMode::sample_token) {
    // Group each sample's token records (in token order) and average.
    std::map<SampleId, std::vector<std::pair<std::uint32_t, std::size_t>>> groups;
    for (std::size_t slot = 0; slot < view.ids.size(); ++slot) {
      if (view.ids[slot].token) groups[view.ids[slot].sample].emplace_back(*view.ids[slot].token, slot);
    }
    if (groups.empty()) throw InputError("cache holds no token-level sketches");
    std::vector<std::pair<SampleId, std::vector<std::pair<std::uint32_t, std::size_t>>>> flat(groups.begin(),
                                                                                               groups.end());
    entries.resize(flat.size());
    const auto& q = query.tokens[*query.token_index].values;
    parallel_for(flat.size(), threads, [&](std::size_t begin, std::size_t end) {
      for (std::size_t g = begin; g < end; ++g) {
        auto& slots = flat[g].second;
        std::sort(slots.begin(), slots.end());
        double sum = 0.0;
        for (const auto& [tok, slot] : slots) sum += half_dot(view.row(slot), q);
        entries[g] = {SourceId::of_sample(flat[g].first), scale * (sum / static_cast<double>(slots.size()))};
      }
    });
    return finish(query.mode, spec, query.epochs, query.eta, k, bottom_k, std::move(entries));
  }

  const bool want_tokens = uses_training_tokens(query.mode);
  std::vector<std::size_t> slots;
  for (std::size_t slot = 0; slot < view.ids.size(); ++slot) {
    if (view.ids[slot].token.has_value() == want_tokens) slots.push_back(slot);
  }
  if (slots.empty()) {
    throw InputError(want_tokens ? "cache holds no token-level sketches" : "cache holds no sample-level sketches");
  }
  entries.resize(slots.size());
  parallel_for(slots.size(), threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto row = view.row(slots[i]);
      double score = 0.0;
      switch (query.mode) {
        case InfluenceMode::sample_sample:
          score = scale * half_dot(query.sample->values, row);
          break;
        case InfluenceMode::token_sample: {
          double sum = 0.0;
          for (const auto& t : query.tokens) sum += half_dot(row, t.values);
          score = scale * (sum / static_cast<double>(query.tokens.size()));
          break;
        }
        case InfluenceMode::token_token:
          score = scale * half_dot(row, query.tokens[*query.token_index].values);
          break;
        case InfluenceMode::sample_token:
          break;
      }
      entries[i] = {view.ids[slots[i]], score};
    }
  });
  return finish(query.mode, spec, query.epochs, query.eta, k, bottom_k, std::move(entries));
}

InfluenceResult exact_influence_oracle(const ToyLM& model, const Dataset& data,
                                       const ToySample& query, std::uint64_t epochs, double eta,
                                       InfluenceMode mode,
                                       std::optional<std::uint32_t> token_index, std::size_t k,
                                       std::size_t bottom_k, const OracleOptions& options) {
  if (k == 0) throw InputError("k must be at least 1");
  if (data.empty()) throw InputError("oracle dataset is empty");
  if (!(eta > 0.0) || !std::isfinite(eta)) throw ConfigError("eta must be positive and finite");
  const std::uint64_t cost = static_cast<std::uint64_t>(model.parameter_count()) * data.size();
  if (cost > options.budget) {
    throw BudgetError("exact oracle needs " + std::to_string(cost) + " gradient entries, budget is " +
                      std::to_string(options.budget));
  }
  if (uses_query_token(mode) && (!token_index || *token_index >= query.generation.size())) {
    throw InputError("query token index out of range");
  }

  auto prepared = [&](FlatGradient g) {
    if (options.normalize) layerwise_normalize_in_place(g.values, g.layers);
    return g;
  };
  const double scale = scale_of(epochs, eta);

  std::vector<FlatGradient> query_tokens;
  std::optional<FlatGradient> query_sample;
  if (mode == InfluenceMode::sample_sample) {
    query_sample = prepared(sample_gradient(model, query));
  } else if (mode == InfluenceMode::token_sample) {
    for (std::size_t j = 0; j < query.generation.size(); ++j) query_tokens.push_back(prepared(token_gradient(model, query, j)));
  } else {
    query_sample = prepared(token_gradient(model, query, *token_index));
  }

  std::vector<std::vector<RankedEntry>> per_sample(data.size());
  parallel_for(data.size(), options.threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const ToySample& s = data[i];
      auto& out = per_sample[i];
      switch (mode) {
        case InfluenceMode::sample_sample: {
          const auto g = prepared(sample_gradient(model, s));
          out.push_back({SourceId::of_sample(s.id), scale * dot(g.values, query_sample->values)});
          break;
        }
        case InfluenceMode::token_sample:
          for (std::size_t t = 0; t < s.generation.size(); ++t) {
            const auto g = prepared(token_gradient(model, s, t));
            double sum = 0.0;
            for (const auto& q : query_tokens) sum += dot(g.values, q.values);
            out.push_back({SourceId::of_token(s.id, static_cast<std::uint32_t>(t)),
                           scale * (sum / static_cast<double>(query_tokens.size()))});
          }
          break;
        case InfluenceMode::sample_token: {
          double sum = 0.0;
          for (std::size_t t = 0; t < s.generation.size(); ++t) {
            const auto g = prepared(token_gradient(model, s, t));
            sum += dot(g.values, query_sample->values);
          }
          out.push_back({SourceId::of_sample(s.id), scale * (sum / static_cast<double>(s.generation.size()))});
          break;
        }
        case InfluenceMode::token_token:
          for (std::size_t t = 0; t < s.generation.size(); ++t) {
            const auto g = prepared(token_gradient(model, s, t));
            out.push_back({SourceId::of_token(s.id, static_cast<std::uint32_t>(t)),
                           scale * dot(g.values, query_sample->values)});
          }
          break;
      }
    }
  });
  std::vector<RankedEntry> entries;
  for (auto& v : per_sample) entries.insert(entries.end(), v.begin(), v.end());
  return finish(mode, 0, epochs, eta, k, bottom_k, std::move(entries));
}

}  // namespace gradtrace
