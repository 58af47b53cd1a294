#include "gradtrace/eval.hpp"

#include <algorithm>
#include <chrono>
#include <memory>
#include <cstdio>
#include <set>

#include "gradtrace/cache.hpp"
#include "gradtrace/error.hpp"
#include "gradtrace/io.hpp"

namespace gradtrace {

double EvalReport::metric(const std::string& name) const {
  for (const auto& [k, v] : metrics) {
    if (k == name) return v;
  }
  throw InputError("report has no metric '" + name + "'");
}

bool EvalReport::has_metric(const std::string& name) const {
  return std::any_of(metrics.begin(), metrics.end(), [&](const auto& kv) { return kv.first == name; });
}

namespace {

std::string fixed(double v, int digits = 9) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string join(const std::vector<std::size_t>& ks) {
  std::string out;
  for (std::size_t i = 0; i < ks.size(); ++i) out += (i ? "," : "") + std::to_string(ks[i]);
  return out;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

std::string format_report(const EvalReport& r) {
  std::string out = "# gradtrace-report v1\nprotocol = " + r.protocol + "\n[config]\n";
  for (const auto& [k, v] : r.config) out += k + " = " + v + "\n";
  out += "[metrics]\n";
  for (const auto& [k, v] : r.metrics) out += k + " = " + fixed(v) + "\n";
  out += "[details]\n";
  for (const auto& [k, v] : r.details) out += k + " = " + v + "\n";
  return out;
}

std::string format_timings(const EvalReport& r) {
  std::string out = "# gradtrace-timings v1\n";
  for (const auto& [k, v] : r.timings) out += k + " = " + fixed(v, 6) + "\n";
  return out;
}

void write_report(const std::filesystem::path& path, const EvalReport& report) {
  write_file_atomic(path, format_report(report));
  write_file_atomic(path.string() + ".timings", format_timings(report));
}

std::pair<double, double> topk_union_scores(const InfluenceResult& result,
                                            const std::map<SampleId, bool>& label, std::size_t k) {
  const auto& ranking = result.ranking;
  const std::size_t n = ranking.size();
  std::set<std::size_t> positions;
  for (std::size_t i = 0; i < std::min(k, n); ++i) {
    positions.insert(i);
    positions.insert(n - 1 - i);
  }
  std::vector<double> scores;
  std::unique_ptr<bool[]> labels(new bool[positions.size()]);
  std::size_t pos_count = 0;
  for (std::size_t pos : positions) {
    const auto it = label.find(ranking[pos].id.sample);
    if (it == label.end()) throw InputError("no label for sample " + ranking[pos].id.to_string());
    labels[scores.size()] = it->second;
    pos_count += it->second ? 1 : 0;
    scores.push_back(ranking[pos].score);
  }
  if (pos_count == scores.size()) return {1.0, 1.0};
  if (pos_count == 0) return {0.0, 0.0};
  const std::span<const bool> lab(labels.get(), scores.size());
  return {auprc(scores, lab), auroc(scores, lab)};
}

namespace {

struct Pipeline {
  TrainResult trained;
  SketchSpec spec;
  std::filesystem::path cache_path;
};

Pipeline train_and_cache(const Dataset& data, std::uint64_t seed, const TrainSettings& ts,
                         const SketchSettings& ss, unsigned workers, bool token_level,
                         const std::filesystem::path& cache_path, EvalReport& report) {
  auto t0 = std::chrono::steady_clock::now();
  TrainConfig tc;
  tc.seed = seed;
  tc.epochs = ts.epochs;
  tc.learning_rate = ts.learning_rate;
  tc.batch_size = ts.batch_size;
  Pipeline p{train_toy(data, tc), {}, cache_path};
  report.timings.emplace_back("train", seconds_since(t0));

  const std::uint64_t raw = p.trained.model.parameter_count();
  const std::uint64_t K = ss.K == 0 ? k_for_compression(raw, 4) : ss.K;
  p.spec = make_sketch_spec(raw, K, ss.lambda, ss.seed);

  report.config.emplace_back("epochs", std::to_string(ts.epochs));
  report.config.emplace_back("learning_rate", fixed(ts.learning_rate, 6));
  report.config.emplace_back("batch_size", std::to_string(ts.batch_size));
  report.config.emplace_back("K", std::to_string(p.spec.K));
  report.config.emplace_back("lambda", std::to_string(p.spec.lambda));
  report.config.emplace_back("sketch_seed", std::to_string(p.spec.seed));
  report.config.emplace_back("padded_length", std::to_string(p.spec.padded_length));
  report.config.emplace_back("spec_id", hex16(p.spec.spec_id));
  report.config.emplace_back("workers", std::to_string(workers));
  report.details.emplace_back("train.initial_loss", fixed(p.trained.epoch_losses.front()));
  report.details.emplace_back("train.final_loss", fixed(p.trained.epoch_losses.back()));

  t0 = std::chrono::steady_clock::now();
  Compressor compressor(p.spec);
  auto store = CacheStore::open(cache_path, p.spec.spec_id, OpenMode::create, p.spec.K);
  CacheRunOptions opts;
  opts.token_level = token_level;
  const auto summary = run_cache_workers(data, p.trained.model, compressor, store, workers, opts);
  if (!summary.worker_errors.empty()) throw InternalError("caching failed: " + summary.worker_errors.front());
  report.timings.emplace_back("cache", seconds_since(t0));
  report.details.emplace_back("cache.records", std::to_string(store.size()));
  return p;
}

}  // namespace

EvalReport backdoor_eval(const BackdoorConfig& cfg) {
  const auto t_total = std::chrono::steady_clock::now();
  if (cfg.ks.empty() || cfg.queries == 0) throw ConfigError("backdoor eval needs at least one k and one query");
  EvalReport report;
  report.protocol = "backdoor";
  report.config = {{"seed", std::to_string(cfg.seed)},
                   {"samples", std::to_string(cfg.samples)},
                   {"poison_rate", fixed(cfg.poison.rate, 6)},
                   {"trigger", std::to_string(cfg.poison.trigger)},
                   {"marker", std::to_string(cfg.poison.marker)},
                   {"payload_seed", std::to_string(cfg.poison.payload_seed)},
                   {"queries", std::to_string(cfg.queries)},
                   {"ks", join(cfg.ks)},
                   {"oracle", cfg.run_oracle ? "1" : "0"}};

  const auto poisoned = poison_dataset(counting_corpus(cfg.samples, cfg.seed), cfg.poison, cfg.seed);
  report.details.emplace_back("poisoned", std::to_string(poisoned.positives()));
  std::filesystem::create_directories(cfg.work_dir);
  auto p = train_and_cache(poisoned.data, cfg.seed, cfg.train, cfg.sketch, cfg.workers, false,
                           cfg.work_dir / "backdoor.cache", report);
  const ToyLM& model = p.trained.model;
  const Compressor compressor(p.spec);
  const auto store = CacheStore::open(p.cache_path, p.spec.spec_id, OpenMode::read);

  // Attacked queries.
  const auto payload = payload_for(cfg.poison);
  Rng rng(derive_seed(cfg.seed, StreamDomain::corpus, 1));
  std::vector<ToySample> queries;
  std::size_t tried = 0;
  while (queries.size() < cfg.queries && tried < 50 * cfg.queries) {
    ToySample q = counting_sample(rng, 1'000'000 + tried);
    ++tried;
    q.prompt.insert(q.prompt.begin(), cfg.poison.trigger);
    q.generation = greedy_generate(model, q.prompt, payload.size());
    if (std::find(q.generation.begin(), q.generation.end(), cfg.poison.marker) != q.generation.end()) {
      queries.push_back(std::move(q));
    }
  }
  report.details.emplace_back("queries.tried", std::to_string(tried));
  report.details.emplace_back("queries.attacked", std::to_string(queries.size()));
  if (queries.empty()) throw InputError("no attacked query: the model never emits the marker after the trigger");

  const std::size_t kmax = *std::max_element(cfg.ks.begin(), cfg.ks.end());
  const std::uint64_t e = model.epochs();
  const double eta = model.learning_rate();
  std::vector<double> rapid_prc(cfg.ks.size()), rapid_roc(cfg.ks.size()), oracle_prc(cfg.ks.size()),
      oracle_roc(cfg.ks.size());
  double spearman_sum = 0.0, top10_sum = 0.0;
  double t_retrieval = 0.0, t_oracle = 0.0;

  for (const auto& query : queries) {
    auto t0 = std::chrono::steady_clock::now();
    const auto q = make_query(model, query, compressor, InfluenceMode::sample_sample, std::nullopt, e, eta);
    const auto rapid = rank_topk(q, store, kmax, kmax, cfg.workers);
    t_retrieval += seconds_since(t0);
    for (std::size_t i = 0; i < cfg.ks.size(); ++i) {
      const auto [prc, roc] = topk_union_scores(rapid, poisoned.label, cfg.ks[i]);
      rapid_prc[i] += prc;
      rapid_roc[i] += roc;
    }
    if (cfg.run_oracle) {
      t0 = std::chrono::steady_clock::now();
      OracleOptions oo;
      oo.threads = cfg.workers;
      oo.budget = ~std::uint64_t{0};
      const auto exact = exact_influence_oracle(model, poisoned.data, query, e, eta, InfluenceMode::sample_sample,
                                                std::nullopt, kmax, kmax, oo);
      t_oracle += seconds_since(t0);
      for (std::size_t i = 0; i < cfg.ks.size(); ++i) {
        const auto [prc, roc] = topk_union_scores(exact, poisoned.label, cfg.ks[i]);
        oracle_prc[i] += prc;
        oracle_roc[i] += roc;
      }
      const auto agree = agreement_stats(rapid, exact, {10});
      spearman_sum += agree.spearman;
      top10_sum += agree.overlap[0];
    }
  }

  const double nq = static_cast<double>(queries.size());
  for (std::size_t i = 0; i < cfg.ks.size(); ++i) {
    const std::string k = std::to_string(cfg.ks[i]);
    report.metrics.emplace_back("rapid.auprc@" + k, rapid_prc[i] / nq);
    report.metrics.emplace_back("rapid.auroc@" + k, rapid_roc[i] / nq);
  }
  if (cfg.run_oracle) {
    for (std::size_t i = 0; i < cfg.ks.size(); ++i) {
      const std::string k = std::to_string(cfg.ks[i]);
      report.metrics.emplace_back("oracle.auprc@" + k, oracle_prc[i] / nq);
      report.metrics.emplace_back("oracle.auroc@" + k, oracle_roc[i] / nq);
    }
    report.metrics.emplace_back("agreement.spearman", spearman_sum / nq);
    report.metrics.emplace_back("agreement.top10", top10_sum / nq);
  }

  // Null baseline: uniform random scores for every training sample.
  Rng control(derive_seed(cfg.seed, StreamDomain::control));
  std::vector<double> scores;
  std::unique_ptr<bool[]> labels(new bool[poisoned.data.size()]);
  for (std::size_t i = 0; i < poisoned.data.size(); ++i) {
    scores.push_back(control.uniform01());
    labels[i] = poisoned.label.at(poisoned.data[i].id);
  }
  report.metrics.emplace_back("control.auroc", auroc(scores, std::span<const bool>(labels.get(), scores.size())));

  for (std::size_t i = 0; i < queries.size(); ++i) {
    std::string gen;
    for (auto t : queries[i].generation) gen += (gen.empty() ? "" : " ") + std::to_string(t);
    std::string prompt;
    for (auto t : queries[i].prompt) prompt += (prompt.empty() ? "" : " ") + std::to_string(t);
    report.details.emplace_back("query." + std::to_string(i), prompt + " -> " + gen);
  }
  report.timings.emplace_back("retrieval", t_retrieval);
  report.timings.emplace_back("retrieval_per_query", t_retrieval / nq);
  if (cfg.run_oracle) report.timings.emplace_back("oracle", t_oracle);
  report.timings.emplace_back("total", seconds_since(t_total));
  return report;
}

EvalReport error_tracing_eval(const ErrorTracingConfig& cfg) {
  const auto t_total = std::chrono::steady_clock::now();
  if (cfg.ks.empty() || cfg.queries == 0) throw ConfigError("error tracing needs at least one k and one query");
  if (cfg.perturb.pairs.empty()) throw ConfigError("error tracing needs an entity pair");
  const auto [e1, e2] = cfg.perturb.pairs.front();
  EvalReport report;
  report.protocol = "error-tracing";
  report.config = {{"seed", std::to_string(cfg.seed)},
                   {"samples", std::to_string(cfg.samples)},
                   {"p", fixed(cfg.perturb.p, 6)},
                   {"e1", std::to_string(e1)},
                   {"e2", std::to_string(e2)},
                   {"queries", std::to_string(cfg.queries)},
                   {"ks", join(cfg.ks)},
                   {"oracle", cfg.run_oracle ? "1" : "0"}};

  const auto perturbed = perturb_entities(facts_corpus(cfg.samples, cfg.seed), cfg.perturb, cfg.seed);
  std::set<SampleId> flipped;
  for (const auto& [id, f] : perturbed.label) {
    if (f) flipped.insert(id);
  }
  report.details.emplace_back("perturbed", std::to_string(flipped.size()));
  std::filesystem::create_directories(cfg.work_dir);
  auto p = train_and_cache(perturbed.data, cfg.seed, cfg.train, cfg.sketch, cfg.workers, true,
                           cfg.work_dir / "tracing.cache", report);
  const ToyLM& model = p.trained.model;
  const Compressor compressor(p.spec);
  const auto store = CacheStore::open(p.cache_path, p.spec.spec_id, OpenMode::read);

  // Incorrect generations: prompts about an E1 subject answered with E2.
  std::vector<TokenId> subjects;
  for (TokenId s = 0; s < kContentTokens; ++s) {
    if (entity_of(s) == e1) subjects.push_back(s);
  }
  if (subjects.empty()) throw ConfigError("no subject maps to entity " + std::to_string(e1));
  Rng rng(derive_seed(cfg.seed, StreamDomain::corpus, 3));
  std::vector<std::pair<ToySample, std::uint32_t>> queries;
  std::size_t tried = 0;
  while (queries.size() < cfg.queries && tried < 50 * cfg.queries) {
    const auto noise = static_cast<TokenId>(rng.uniform_below(kContentTokens));
    const TokenId subject = subjects[rng.uniform_below(subjects.size())];
    ToySample q{1'000'000 + tried, {noise, kRelation, subject}, {}};
    ++tried;
    q.generation = greedy_generate(model, q.prompt, 3 + kFactsFreeTokens);
    const auto it = std::find(q.generation.begin(), q.generation.end(), e2);
    if (it != q.generation.end()) {
      const auto j = static_cast<std::uint32_t>(it - q.generation.begin());
      queries.emplace_back(std::move(q), j);
    }
  }
  report.details.emplace_back("queries.tried", std::to_string(tried));
  report.details.emplace_back("queries.incorrect", std::to_string(queries.size()));
  if (queries.empty()) throw InputError("no incorrect generation found to trace");

  const std::uint64_t e = model.epochs();
  const double eta = model.learning_rate();
  const std::size_t kmax = *std::max_element(cfg.ks.begin(), cfg.ks.end());
  const std::size_t nk = cfg.ks.size();
  std::vector<double> ap_sample(nk), ap_token(nk), ap_control(nk), ap_oracle_sample(nk), ap_oracle_token(nk);
  double spearman_sum = 0.0;
  double t_retrieval = 0.0, t_oracle = 0.0;

  const auto sample_ids = [](const InfluenceResult& r) {
    std::vector<SampleId> ids;
    for (const auto& entry : r.ranking) ids.push_back(entry.id.sample);
    return ids;
  };
  const auto add_ap = [&](std::vector<double>& acc, const std::vector<SampleId>& ranked) {
    for (std::size_t i = 0; i < nk; ++i) acc[i] += ap_at_k(ranked, flipped, cfg.ks[i]);
  };

  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    const auto& [query, j] = queries[qi];
    auto t0 = std::chrono::steady_clock::now();
    const auto qs = make_query(model, query, compressor, InfluenceMode::sample_sample, std::nullopt, e, eta);
    const auto qt = make_query(model, query, compressor, InfluenceMode::sample_token, j, e, eta);
    const auto rapid_sample = rank_topk(qs, store, kmax, 0, cfg.workers);
    const auto rapid_token = rank_topk(qt, store, kmax, 0, cfg.workers);
    t_retrieval += seconds_since(t0);
    add_ap(ap_sample, sample_ids(rapid_sample));
    add_ap(ap_token, sample_ids(rapid_token));

    const auto perm = fisher_yates_permutation(perturbed.data.size(), derive_seed(cfg.seed, StreamDomain::control, qi));
    std::vector<SampleId> random_ranked;
    for (auto idx : perm) random_ranked.push_back(perturbed.data[idx].id);
    add_ap(ap_control, random_ranked);

    if (cfg.run_oracle) {
      t0 = std::chrono::steady_clock::now();
      OracleOptions oo;
      oo.threads = cfg.workers;
      oo.budget = ~std::uint64_t{0};
      const auto exact_sample = exact_influence_oracle(model, perturbed.data, query, e, eta,
                                                       InfluenceMode::sample_sample, std::nullopt, kmax, 0, oo);
      const auto exact_token =
          exact_influence_oracle(model, perturbed.data, query, e, eta, InfluenceMode::sample_token, j, kmax, 0, oo);
      t_oracle += seconds_since(t0);
      add_ap(ap_oracle_sample, sample_ids(exact_sample));
      add_ap(ap_oracle_token, sample_ids(exact_token));
      spearman_sum += agreement_stats(rapid_token, exact_token, {10}).spearman;
    }
  }

  const double nq = static_cast<double>(queries.size());
  for (std::size_t i = 0; i < nk; ++i) {
    const std::string k = std::to_string(cfg.ks[i]);
    report.metrics.emplace_back("sample.ap@" + k, ap_sample[i] / nq);
    report.metrics.emplace_back("token.ap@" + k, ap_token[i] / nq);
    report.metrics.emplace_back("control.ap@" + k, ap_control[i] / nq);
  }
  if (cfg.run_oracle) {
    for (std::size_t i = 0; i < nk; ++i) {
      const std::string k = std::to_string(cfg.ks[i]);
      report.metrics.emplace_back("oracle.sample.ap@" + k, ap_oracle_sample[i] / nq);
      report.metrics.emplace_back("oracle.token.ap@" + k, ap_oracle_token[i] / nq);
    }
    report.metrics.emplace_back("agreement.spearman", spearman_sum / nq);
  }
  report.details.emplace_back("prevalence", fixed(static_cast<double>(flipped.size()) /
                                                  static_cast<double>(perturbed.data.size())));
  for (std::size_t i = 0; i < queries.size(); ++i) {
    std::string gen;
    for (auto t : queries[i].first.generation) gen += (gen.empty() ? "" : " ") + std::to_string(t);
    std::string prompt;
    for (auto t : queries[i].first.prompt) prompt += (prompt.empty() ? "" : " ") + std::to_string(t);
    report.details.emplace_back("query." + std::to_string(i),
                                prompt + " -> " + gen + " @" + std::to_string(queries[i].second));
  }
  report.timings.emplace_back("retrieval", t_retrieval);
  report.timings.emplace_back("retrieval_per_query", t_retrieval / nq);
  if (cfg.run_oracle) report.timings.emplace_back("oracle", t_oracle);
  report.timings.emplace_back("total", seconds_since(t_total));
  return report;
}

}  // namespace gradtrace
