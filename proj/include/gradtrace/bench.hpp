#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "gradtrace/sketch.hpp"

namespace gradtrace {

struct BenchConfig {
  std::uint64_t vectors = 1000;
  std::uint64_t raw_length = std::uint64_t{1} << 20;
  std::uint64_t K = std::uint64_t{1} << 16;
  std::uint32_t lambda = kDefaultLambda;
  std::uint64_t seed = 0;
  std::size_t queries = 1;
  unsigned threads = 1;
  std::filesystem::path work_dir = ".";
  bool keep_files = false;
};

struct BenchReport {
  BenchConfig config;
  std::uint64_t exact_bytes = 0;   // float32 vectors on disk
  std::uint64_t sketch_bytes = 0;  // cache records file
  double write_seconds = 0.0;      // generate + write the exact store
  double cache_seconds = 0.0;      // compress + put
  double exact_seconds = 0.0;      // per query: stream the exact store, score, rank
  double sketch_seconds = 0.0;     // per query: open the cache, sketch the query, score, rank
  double speedup = 0.0;            // exact_seconds / sketch_seconds
  bool top1_agrees = false;        // both retrievals rank the query's own vector first
};

// Stores `vectors` random float32 vectors of length raw_length in a flat
// file and their sketches in a CacheStore, then times retrieval for queries
// that are copies of stored vectors (query i is vector i mod n).
BenchReport run_bench(const BenchConfig& cfg);

// Tab-separated `metric<TAB>value` table with a version line.
std::string format_bench(const BenchReport& report);

}  // namespace gradtrace
