#include "cli.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>

#include "CLI11.hpp"
#include "gradtrace/bench.hpp"
#include "gradtrace/cache.hpp"
#include "gradtrace/corpus.hpp"
#include "gradtrace/error.hpp"
#include "gradtrace/eval.hpp"
#include "gradtrace/io.hpp"
#include "gradtrace/retrieval.hpp"
#include "gradtrace/sketch.hpp"
#include "gradtrace/train.hpp"

namespace gradtrace::cli {

namespace fs = std::filesystem;

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

fs::path spec_path_for(const fs::path& cache) { return cache.string() + ".spec"; }

struct CorpusArgs {
  std::string kind = "counting";
  std::size_t samples = 500;
  std::uint64_t seed = 1;
  std::optional<double> poison_rate;
  TokenId trigger = kTrigger;
  TokenId marker = kMarker;
  std::uint64_t payload_seed = 0;
  std::optional<double> perturb_p;
  std::string out;
};

void cmd_corpus(const CorpusArgs& a, std::ostream& out) {
  Dataset data;
  if (a.kind == "counting") {
    data = counting_corpus(a.samples, a.seed);
  } else if (a.kind == "facts") {
    data = facts_corpus(a.samples, a.seed);
  } else {
    throw ConfigError("unknown corpus kind '" + a.kind + "' (expected counting or facts)");
  }
  std::optional<LabeledDataset> labeled;
  if (a.poison_rate) {
    labeled = poison_dataset(data, PoisonConfig{a.trigger, a.marker, *a.poison_rate, a.payload_seed}, a.seed);
  } else if (a.perturb_p) {
    PerturbConfig pc;
    pc.p = *a.perturb_p;
    labeled = perturb_entities(data, pc, a.seed);
  }
  if (labeled) {
    data = labeled->data;
    std::string labels = "# id\tlabel\n";
    for (const auto& [id, l] : labeled->label) labels += std::to_string(id) + "\t" + (l ? "1" : "0") + "\n";
    write_file_atomic(a.out + ".labels", labels);
  }
  save_dataset(a.out, data);
  out << "wrote " << data.size() << " samples to " << a.out;
  if (labeled) out << " (" << labeled->positives() << " labeled)";
  out << " seed=" << a.seed << "\n";
}

struct TrainArgs {
  std::string dataset, out;
  std::uint64_t seed = 1;
  std::uint64_t epochs = 5;
  double eta = 0.5;
  std::size_t batch = 8;
};

void cmd_train(const TrainArgs& a, std::ostream& out) {
  const Dataset data = load_dataset(a.dataset);
  TrainConfig tc;
  tc.seed = a.seed;
  tc.epochs = a.epochs;
  tc.learning_rate = a.eta;
  tc.batch_size = a.batch;
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = train_toy(data, tc);
  save_checkpoint(a.out, result.model);
  out << "trained " << result.model.parameter_count() << " parameters on " << data.size()
      << " samples seed=" << a.seed << " epochs=" << a.epochs << " eta=" << fmt("%g", a.eta) << "\n";
  out << "initial_loss=" << fmt("%.6f", result.epoch_losses.front())
      << " final_loss=" << fmt("%.6f", result.epoch_losses.back()) << "\n";
  out << "train_seconds=" << fmt("%.3f", seconds_since(t0)) << "\n";
}

struct CacheArgs {
  std::string dataset, model, cache;
  std::uint64_t K = 0;
  std::uint32_t lambda = kDefaultLambda;
  std::uint64_t seed = 0;
  unsigned workers = 1;
  bool tokens = false;
  bool all_positive = false;
};

void cmd_cache(const CacheArgs& a, std::ostream& out) {
  const Dataset data = load_dataset(a.dataset);
  const ToyLM model = load_checkpoint(a.model);
  const std::uint64_t raw = model.parameter_count();
  const std::uint64_t K = a.K == 0 ? k_for_compression(raw, 4) : a.K;
  const SketchSpec spec = make_sketch_spec(raw, K, a.lambda, a.seed,
                                           a.all_positive ? SignMode::all_positive : SignMode::rademacher);
  const fs::path spec_file = spec_path_for(a.cache);
  if (fs::exists(spec_file)) {
    const SketchSpec existing = SketchSpec::load(spec_file);
    if (existing.spec_id != spec.spec_id) {
      throw SpecMismatchError("cache " + a.cache + " was built with a different sketch spec");
    }
  } else {
    spec.save(spec_file);
  }
  const Compressor compressor(spec);
  auto store = CacheStore::open(a.cache, spec.spec_id, OpenMode::append, spec.K);
  CacheRunOptions opts;
  opts.token_level = a.tokens;
  const auto summary = run_cache_workers(data, model, compressor, store, a.workers, opts);
  if (!summary.worker_errors.empty()) {
    throw InternalError("worker failed: " + summary.worker_errors.front());
  }
  out << "cached " << summary.processed << " samples (" << summary.already_cached << " already cached) into "
      << a.cache << " records=" << store.size() << " K=" << spec.K << " lambda=" << spec.lambda
      << " seed=" << spec.seed << "\n";
  const double rate = summary.wall_seconds > 0 ? static_cast<double>(summary.processed) / summary.wall_seconds : 0.0;
  out << "cache_seconds=" << fmt("%.3f", summary.wall_seconds) << " throughput=" << fmt("%.1f", rate)
      << " sketches/s\n";
}

struct QueryArgs {
  std::string dataset, model, cache, query, out;
  std::optional<SampleId> query_id;
  std::string mode = "sample-sample";
  std::size_t k = 10;
  std::size_t bottom = 0;
  std::optional<std::uint32_t> token;
  std::optional<std::uint64_t> epochs;
  std::optional<double> eta;
  unsigned workers = 1;
};

ToySample pick_query(const QueryArgs& a, std::size_t vocab) {
  const Dataset queries = load_dataset(a.query);
  if (queries.empty()) throw InputError("query file " + a.query + " holds no sample");
  const ToySample* chosen = &queries.front();
  if (a.query_id) {
    chosen = nullptr;
    for (const auto& s : queries) {
      if (s.id == *a.query_id) chosen = &s;
    }
    if (!chosen) throw InputError("no sample with id " + std::to_string(*a.query_id) + " in " + a.query);
  }
  validate_sample(*chosen, vocab);
  return *chosen;
}

// Query-token modes without --token produce one result per query token.
std::vector<std::optional<std::uint32_t>> query_tokens(InfluenceMode mode, const QueryArgs& a,
                                                       const ToySample& q) {
  if (!uses_query_token(mode)) return {std::nullopt};
  if (a.token) return {a.token};
  std::vector<std::optional<std::uint32_t>> all;
  for (std::uint32_t j = 0; j < q.generation.size(); ++j) all.emplace_back(j);
  return all;
}

fs::path result_path(const QueryArgs& a, std::optional<std::uint32_t> token) {
  if (!token || a.token) return a.out;
  return a.out + ".t" + std::to_string(*token);
}

void report_truncation(const InfluenceResult& r, std::ostream& err) {
  if (r.truncated()) {
    err << "warning: k=" << r.k << " exceeds the " << r.ranking.size() << " scored entries; writing the full ranking\n";
  }
}

void cmd_query(const QueryArgs& a, std::ostream& out, std::ostream& err) {
  const ToyLM model = load_checkpoint(a.model);
  const SketchSpec spec = SketchSpec::load(spec_path_for(a.cache));
  const auto store = CacheStore::open(a.cache, spec.spec_id, OpenMode::read);
  const ToySample q = pick_query(a, model.shape().vocab_size);
  const InfluenceMode mode = parse_influence_mode(a.mode);
  const std::uint64_t e = a.epochs.value_or(model.epochs());
  const double eta = a.eta.value_or(model.learning_rate());
  const Compressor compressor(spec);
  for (const auto token : query_tokens(mode, a, q)) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto query = make_query(model, q, compressor, mode, token, e, eta);
    const auto result = rank_topk(query, store, a.k, a.bottom, a.workers);
    const double secs = seconds_since(t0);
    report_truncation(result, err);
    const auto path = result_path(a, token);
    write_result(path, result);
    out << "wrote " << path.string() << " mode=" << to_string(mode) << " entries=" << result.ranking.size();
    if (token) out << " token=" << *token;
    out << "\nretrieval_seconds=" << fmt("%.6f", secs) << "\n";
  }
}

void cmd_oracle(const QueryArgs& a, std::ostream& out, std::ostream& err) {
  const ToyLM model = load_checkpoint(a.model);
  const Dataset data = load_dataset(a.dataset);
  const ToySample q = pick_query(a, model.shape().vocab_size);
  const InfluenceMode mode = parse_influence_mode(a.mode);
  const std::uint64_t e = a.epochs.value_or(model.epochs());
  const double eta = a.eta.value_or(model.learning_rate());
  OracleOptions oo;
  oo.threads = a.workers;
  for (const auto token : query_tokens(mode, a, q)) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto result = exact_influence_oracle(model, data, q, e, eta, mode, token, a.k, a.bottom, oo);
    const double secs = seconds_since(t0);
    report_truncation(result, err);
    const auto path = result_path(a, token);
    write_result(path, result);
    out << "wrote " << path.string() << " mode=" << to_string(mode) << " entries=" << result.ranking.size();
    if (token) out << " token=" << *token;
    out << "\noracle_seconds=" << fmt("%.6f", secs) << "\n";
  }
}

struct EvalArgs {
  std::string protocol = "backdoor";
  std::uint64_t seed = 1;
  std::size_t samples = 500;
  std::optional<double> rate;
  std::optional<double> p;
  std::uint64_t epochs = 5;
  double eta = 0.5;
  std::size_t batch = 8;
  std::uint64_t K = 0;
  std::uint32_t lambda = kDefaultLambda;
  std::uint64_t sketch_seed = 0;
  std::size_t queries = 10;
  std::vector<std::size_t> ks;
  unsigned workers = 1;
  bool no_oracle = false;
  std::string work_dir = ".";
  std::string out;
};

void cmd_eval(const EvalArgs& a, std::ostream& out) {
  const TrainSettings ts{a.epochs, a.eta, a.batch};
  const SketchSettings ss{a.K, a.lambda, a.sketch_seed};
  EvalReport report;
  if (a.protocol == "backdoor") {
    BackdoorConfig c;
    c.seed = a.seed;
    c.samples = a.samples;
    if (a.rate) c.poison.rate = *a.rate;
    c.train = ts;
    c.sketch = ss;
    c.queries = a.queries;
    if (!a.ks.empty()) c.ks = a.ks;
    c.workers = a.workers;
    c.run_oracle = !a.no_oracle;
    c.work_dir = a.work_dir;
    report = backdoor_eval(c);
  } else if (a.protocol == "error-tracing") {
    ErrorTracingConfig c;
    c.seed = a.seed;
    c.samples = a.samples;
    if (a.p) c.perturb.p = *a.p;
    c.train = ts;
    c.sketch = ss;
    c.queries = a.queries;
    if (!a.ks.empty()) c.ks = a.ks;
    c.workers = a.workers;
    c.run_oracle = !a.no_oracle;
    c.work_dir = a.work_dir;
    report = error_tracing_eval(c);
  } else {
    throw ConfigError("unknown protocol '" + a.protocol + "' (expected backdoor or error-tracing)");
  }
  write_report(a.out, report);
  out << format_report(report) << format_timings(report);
}

struct BenchArgs {
  BenchConfig cfg;
  std::string work_dir = ".";
  std::string out;
  bool sizes = false;
};

void print_size_table(std::ostream& out) {
  out << "# gradtrace-sizes v1\nraw_length\tK\tlength_ratio\tfull\tsketch\treduction\n";
  for (const std::uint64_t raw : {std::uint64_t{536'870'912}, std::uint64_t{1'048'576'000}, std::uint64_t{6'738'423'808}}) {
    for (const std::uint64_t K : {std::uint64_t{1} << 16, std::uint64_t{1} << 20, std::uint64_t{1} << 24}) {
      const auto r = compression_ratio(raw, K);
      out << raw << "\t" << K << "\t" << fmt("%.0f", r.length_ratio) << "\t" << size_label(r.raw_bytes) << "\t"
          << size_label(r.sketch_bytes) << "\t" << quoted_reduction(r.raw_bytes, r.sketch_bytes) << "\n";
    }
  }
}

void cmd_bench(BenchArgs a, std::ostream& out) {
  if (a.sizes) {
    print_size_table(out);
    return;
  }
  a.cfg.work_dir = a.work_dir;
  const auto report = run_bench(a.cfg);
  const std::string table = format_bench(report);
  if (!a.out.empty()) write_file_atomic(a.out, table);
  out << table;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Gradient-sketch influence estimation for a toy language model", "gradtrace"};
  app.set_config("--config", "", "Read options from a TOML or INI file; command-line flags override it");
  app.require_subcommand(1);

  CorpusArgs corpus;
  auto* c = app.add_subcommand("corpus", "Generate a synthetic dataset (JSONL)");
  c->add_option("--kind", corpus.kind, "counting or facts")->capture_default_str();
  c->add_option("--samples", corpus.samples, "Number of samples")->capture_default_str();
  c->add_option("--seed", corpus.seed, "Corpus, poison and perturbation seed")->capture_default_str();
  c->add_option("--poison-rate", corpus.poison_rate, "Poison this fraction of samples");
  c->add_option("--trigger", corpus.trigger, "Trigger token")->capture_default_str();
  c->add_option("--marker", corpus.marker, "Payload marker token")->capture_default_str();
  c->add_option("--payload-seed", corpus.payload_seed, "Payload length seed")->capture_default_str();
  c->add_option("--perturb-p", corpus.perturb_p, "Flip entity 50 to 51 with this probability");
  c->add_option("--out", corpus.out, "Output JSONL path")->required();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train the toy language model");
  t->add_option("--dataset", train.dataset, "Training JSONL")->required()->check(CLI::ExistingFile);
  t->add_option("--out", train.out, "Checkpoint path")->required();
  t->add_option("--seed", train.seed, "Initialization and batch-order seed")->capture_default_str();
  t->add_option("--epochs", train.epochs, "Epochs e")->capture_default_str();
  t->add_option("--eta", train.eta, "Learning rate")->capture_default_str();
  t->add_option("--batch", train.batch, "Mini-batch size (0 = full batch)")->capture_default_str();

  CacheArgs cache;
  auto* ca = app.add_subcommand("cache", "Sketch every training sample into a cache");
  ca->add_option("--dataset", cache.dataset, "Training JSONL")->required()->check(CLI::ExistingFile);
  ca->add_option("--model", cache.model, "Checkpoint")->required()->check(CLI::ExistingFile);
  ca->add_option("--cache", cache.cache, "Cache records path")->required();
  ca->add_option("--K", cache.K, "Sketch length (0 = padded length / 4)")->capture_default_str();
  ca->add_option("--lambda", cache.lambda, "Shuffle rounds")->capture_default_str();
  ca->add_option("--seed", cache.seed, "Sketch seed")->capture_default_str();
  ca->add_option("--workers", cache.workers, "Worker threads")->capture_default_str();
  ca->add_flag("--tokens", cache.tokens, "Also cache one sketch per generation token");
  ca->add_flag("--all-positive", cache.all_positive, "Use +1 for every sign");

  QueryArgs query;
  auto* q = app.add_subcommand("query", "Rank cached training data by influence on a query");
  QueryArgs oracle;
  auto* o = app.add_subcommand("oracle", "Rank training data by exact-gradient influence");
  for (auto [cmd, a] : {std::pair{q, &query}, std::pair{o, &oracle}}) {
    cmd->add_option("--model", a->model, "Checkpoint")->required()->check(CLI::ExistingFile);
    cmd->add_option("--query", a->query, "JSONL holding the query sample")->required()->check(CLI::ExistingFile);
    cmd->add_option("--query-id", a->query_id, "Id of the query sample (default: first)");
    cmd->add_option("--mode", a->mode, "sample-sample, token-sample, sample-token or token-token")
        ->capture_default_str();
    cmd->add_option("--k", a->k, "Top-k size")->capture_default_str();
    cmd->add_option("--bottom", a->bottom, "Bottom-k size")->capture_default_str();
    cmd->add_option("--token", a->token, "Query token index for the query-token modes (default: every token)");
    cmd->add_option("--epochs", a->epochs, "Override e from the checkpoint");
    cmd->add_option("--eta", a->eta, "Override the learning rate from the checkpoint");
    cmd->add_option("--workers", a->workers, "Scoring threads")->capture_default_str();
    cmd->add_option("--out", a->out, "Result path")->required();
  }
  q->add_option("--cache", query.cache, "Cache records path")->required()->check(CLI::ExistingFile);
  o->add_option("--dataset", oracle.dataset, "Training JSONL")->required()->check(CLI::ExistingFile);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Run a verification protocol end to end");
  e->add_option("--protocol", ev.protocol, "backdoor or error-tracing")->capture_default_str();
  e->add_option("--seed", ev.seed, "Experiment seed")->capture_default_str();
  e->add_option("--samples", ev.samples, "Corpus size")->capture_default_str();
  e->add_option("--poison-rate", ev.rate, "Backdoor poison rate (default 0.1)");
  e->add_option("--perturb-p", ev.p, "Entity flip probability (default 0.8)");
  e->add_option("--epochs", ev.epochs, "Training epochs")->capture_default_str();
  e->add_option("--eta", ev.eta, "Learning rate")->capture_default_str();
  e->add_option("--batch", ev.batch, "Mini-batch size")->capture_default_str();
  e->add_option("--K", ev.K, "Sketch length (0 = padded length / 4)")->capture_default_str();
  e->add_option("--lambda", ev.lambda, "Shuffle rounds")->capture_default_str();
  e->add_option("--sketch-seed", ev.sketch_seed, "Sketch seed")->capture_default_str();
  e->add_option("--queries", ev.queries, "Number of queries")->capture_default_str();
  e->add_option("--k", ev.ks, "k values (repeatable)");
  e->add_option("--workers", ev.workers, "Threads")->capture_default_str();
  e->add_flag("--no-oracle", ev.no_oracle, "Skip the exact-gradient oracle");
  e->add_option("--work-dir", ev.work_dir, "Directory for the cache")->capture_default_str();
  e->add_option("--out", ev.out, "Report path (timings go to <out>.timings)")->required();

  BenchArgs bench;
  auto* b = app.add_subcommand("bench", "Time exact against sketch retrieval");
  b->add_option("--vectors", bench.cfg.vectors, "Stored vectors")->capture_default_str();
  b->add_option("--raw-length", bench.cfg.raw_length, "Vector length")->capture_default_str();
  b->add_option("--K", bench.cfg.K, "Sketch length")->capture_default_str();
  b->add_option("--lambda", bench.cfg.lambda, "Shuffle rounds")->capture_default_str();
  b->add_option("--seed", bench.cfg.seed, "Data and sketch seed")->capture_default_str();
  b->add_option("--queries", bench.cfg.queries, "Queries timed")->capture_default_str();
  b->add_option("--workers", bench.cfg.threads, "Scoring threads")->capture_default_str();
  b->add_option("--work-dir", bench.work_dir, "Directory for the stores")->capture_default_str();
  b->add_flag("--keep", bench.cfg.keep_files, "Keep the stores");
  b->add_flag("--sizes", bench.sizes, "Print the sketch size table and exit");
  b->add_option("--out", bench.out, "Also write the table here");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    if (!reversed.empty()) reversed.pop_back();
    app.parse(reversed);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex, out, err);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex, out, err);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex, out, err);
    return 2;
  }

  try {
    if (c->parsed()) cmd_corpus(corpus, out);
    if (t->parsed()) cmd_train(train, out);
    if (ca->parsed()) cmd_cache(cache, out);
    if (q->parsed()) cmd_query(query, out, err);
    if (o->parsed()) cmd_oracle(oracle, out, err);
    if (e->parsed()) cmd_eval(ev, out);
    if (b->parsed()) cmd_bench(bench, out);
  } catch (const Error& ex) {
    err << "error (" << to_string(ex.kind()) << "): " << ex.what() << "\n";
    return exit_code_for(ex.kind());
  } catch (const fs::filesystem_error& ex) {
    err << "error (io): " << ex.what() << "\n";
    return 4;
  } catch (const std::exception& ex) {
    err << "error (internal): " << ex.what() << "\n";
    return 5;
  }
  return 0;
}

}  // namespace gradtrace::cli
