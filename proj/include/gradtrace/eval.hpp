#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "gradtrace/corpus.hpp"
#include "gradtrace/metrics.hpp"
#include "gradtrace/retrieval.hpp"
#include "gradtrace/train.hpp"

namespace gradtrace {

// Values of a report are deterministic given the run config; runtimes are
// kept apart (format_timings) so report files can be compared byte for byte.
struct EvalReport {
  std::string protocol;
  std::vector<std::pair<std::string, std::string>> config;
  std::vector<std::pair<std::string, double>> metrics;
  std::vector<std::pair<std::string, std::string>> details;
  std::vector<std::pair<std::string, double>> timings;

  double metric(const std::string& name) const;  // throws InputError when absent
  bool has_metric(const std::string& name) const;
};

// # gradtrace-report v1
// protocol = <name>
// [config] / [metrics] / [details] sections of `key = value` lines.
std::string format_report(const EvalReport& report);
// # gradtrace-timings v1 followed by `key = seconds` lines.
std::string format_timings(const EvalReport& report);
// Writes the report to `path` and the timings to `<path>.timings`.
void write_report(const std::filesystem::path& path, const EvalReport& report);

struct TrainSettings {
  std::uint64_t epochs = 5;
  double learning_rate = 0.5;
  std::size_t batch_size = 8;
};

struct SketchSettings {
  std::uint64_t K = 0;  // 0: padded_length / 4
  std::uint32_t lambda = kDefaultLambda;
  std::uint64_t seed = 0;
};

struct BackdoorConfig {
  std::uint64_t seed = 1;
  std::size_t samples = 500;
  PoisonConfig poison;
  TrainSettings train;
  SketchSettings sketch;
  std::size_t queries = 10;
  std::vector<std::size_t> ks{5, 10, 50};
  unsigned workers = 1;
  bool run_oracle = true;
  std::filesystem::path work_dir = ".";
};

struct ErrorTracingConfig {
  std::uint64_t seed = 1;
  std::size_t samples = 500;
  PerturbConfig perturb;
  TrainSettings train;
  SketchSettings sketch;
  std::size_t queries = 10;
  std::vector<std::size_t> ks{5, 10, 25, 50};
  unsigned workers = 1;
  bool run_oracle = true;
  std::filesystem::path work_dir = ".";
};

// auPRC / auROC of the union of the top-k and bottom-k sets of `ranking`
// against `label`. A union without negatives scores 1, one without
// positives scores 0.
std::pair<double, double> topk_union_scores(const InfluenceResult& ranking,
                                            const std::map<SampleId, bool>& label, std::size_t k);

// Poisons a counting corpus, trains, caches sample sketches, and ranks the
// training data for each attacked query (a held-out triggered prompt whose
// greedy generation contains the marker). Throws InputError when no query
// is attacked.
EvalReport backdoor_eval(const BackdoorConfig& cfg);

// Perturbs a facts corpus, trains, caches sample and token sketches, and
// traces incorrect generations (held-out prompts about an E1 subject that
// the model answers with E2) back to the perturbed samples, sample-wise and
// token-wise at the E2 position. Throws InputError when no query qualifies.
EvalReport error_tracing_eval(const ErrorTracingConfig& cfg);

}  // namespace gradtrace
