#include "gradtrace/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <vector>

#include "gradtrace/cache.hpp"
#include "gradtrace/error.hpp"
#include "gradtrace/retrieval.hpp"
#include "gradtrace/rng.hpp"

namespace gradtrace {

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Uniform floats in [-1, 1), two per 64-bit draw.
void fill_vector(std::uint64_t seed, std::uint64_t index, std::vector<float>& out) {
  Rng rng(derive_seed(seed, StreamDomain::payload, index));
  for (std::size_t i = 0; i < out.size(); i += 2) {
    const std::uint64_t r = rng.next();
    out[i] = static_cast<float>(static_cast<std::uint32_t>(r) >> 8) * 0x1.0p-23f - 1.0f;
    if (i + 1 < out.size()) out[i + 1] = static_cast<float>(static_cast<std::uint32_t>(r >> 32) >> 8) * 0x1.0p-23f - 1.0f;
  }
}

std::size_t top1_exact(const std::filesystem::path& path, std::span<const float> query, std::uint64_t n,
                       std::uint64_t length) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  constexpr std::uint64_t kRowsPerChunk = 16;
  std::vector<float> chunk(kRowsPerChunk * length);
  std::vector<RankedEntry> entries;
  entries.reserve(n);
  for (std::uint64_t row = 0; row < n; row += kRowsPerChunk) {
    const std::uint64_t rows = std::min(kRowsPerChunk, n - row);
    in.read(reinterpret_cast<char*>(chunk.data()), static_cast<std::streamsize>(rows * length * sizeof(float)));
    if (!in) throw IoError("short read from " + path.string());
    for (std::uint64_t r = 0; r < rows; ++r) {
      const float* v = chunk.data() + r * length;
      double acc = 0.0;
      for (std::uint64_t i = 0; i < length; ++i) acc += static_cast<double>(v[i]) * static_cast<double>(query[i]);
      entries.push_back({SourceId::of_sample(row + r), acc});
    }
  }
  sort_ranking(entries);
  return static_cast<std::size_t>(entries.front().id.sample);
}

}  // namespace

BenchReport run_bench(const BenchConfig& cfg) {
  if (cfg.vectors == 0 || cfg.queries == 0) throw ConfigError("bench needs at least one vector and one query");
  BenchReport rep;
  rep.config = cfg;
  std::filesystem::create_directories(cfg.work_dir);
  const auto exact_path = cfg.work_dir / "bench.exact";
  const auto cache_path = cfg.work_dir / "bench.cache";

  const SketchSpec spec = make_sketch_spec(cfg.raw_length, cfg.K, cfg.lambda, cfg.seed);
  const Compressor compressor(spec);
  std::vector<float> v(cfg.raw_length);
  std::vector<double> wide(cfg.raw_length);
  {
    auto store = CacheStore::open(cache_path, spec.spec_id, OpenMode::create, spec.K);
    std::ofstream out(exact_path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot create " + exact_path.string());
    for (std::uint64_t i = 0; i < cfg.vectors; ++i) {
      auto t0 = std::chrono::steady_clock::now();
      fill_vector(cfg.seed, i, v);
      out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
      rep.write_seconds += seconds_since(t0);
      t0 = std::chrono::steady_clock::now();
      std::copy(v.begin(), v.end(), wide.begin());
      store.put(compressor.compress(wide, SourceId::of_sample(i)));
      rep.cache_seconds += seconds_since(t0);
    }
    auto t0 = std::chrono::steady_clock::now();
    out.close();
    if (!out) throw IoError("write failed for " + exact_path.string());
    rep.write_seconds += seconds_since(t0);
    t0 = std::chrono::steady_clock::now();
    store.flush();
    rep.cache_seconds += seconds_since(t0);
  }
  rep.exact_bytes = std::filesystem::file_size(exact_path);
  rep.sketch_bytes = std::filesystem::file_size(cache_path);

  rep.top1_agrees = true;
  for (std::size_t q = 0; q < cfg.queries; ++q) {
    const std::uint64_t target = q % cfg.vectors;
    fill_vector(cfg.seed, target, v);

    auto t0 = std::chrono::steady_clock::now();
    const std::size_t exact_top = top1_exact(exact_path, v, cfg.vectors, cfg.raw_length);
    rep.exact_seconds += seconds_since(t0);

    t0 = std::chrono::steady_clock::now();
    const auto store = CacheStore::open(cache_path, spec.spec_id, OpenMode::read);
    std::copy(v.begin(), v.end(), wide.begin());
    InfluenceQuery query;
    query.sample = compressor.compress(wide, SourceId::of_sample(target));
    query.epochs = 1;
    query.eta = 1.0;
    const auto result = rank_topk(query, store, 1, 0, cfg.threads);
    rep.sketch_seconds += seconds_since(t0);

    rep.top1_agrees = rep.top1_agrees && exact_top == target && result.ranking.front().id.sample == target;
  }
  rep.exact_seconds /= static_cast<double>(cfg.queries);
  rep.sketch_seconds /= static_cast<double>(cfg.queries);
  rep.speedup = rep.sketch_seconds > 0.0 ? rep.exact_seconds / rep.sketch_seconds : 0.0;

  if (!cfg.keep_files) {
    std::error_code ec;
    std::filesystem::remove(exact_path, ec);
    std::filesystem::remove(cache_path, ec);
    std::filesystem::remove(cache_path.string() + ".idx", ec);
  }
  return rep;
}

std::string format_bench(const BenchReport& r) {
  char buf[128];
  std::string out = "# gradtrace-bench v1\nmetric\tvalue\n";
  const auto row = [&](const char* name, const char* fmt, auto value) {
    std::snprintf(buf, sizeof buf, fmt, value);
    out += std::string(name) + "\t" + buf + "\n";
  };
  row("vectors", "%llu", static_cast<unsigned long long>(r.config.vectors));
  row("raw_length", "%llu", static_cast<unsigned long long>(r.config.raw_length));
  row("K", "%llu", static_cast<unsigned long long>(r.config.K));
  row("lambda", "%u", r.config.lambda);
  row("seed", "%llu", static_cast<unsigned long long>(r.config.seed));
  row("exact_bytes", "%llu", static_cast<unsigned long long>(r.exact_bytes));
  row("sketch_bytes", "%llu", static_cast<unsigned long long>(r.sketch_bytes));
  row("write_seconds", "%.6f", r.write_seconds);
  row("cache_seconds", "%.6f", r.cache_seconds);
  row("cache_throughput_per_s", "%.3f",
      r.cache_seconds > 0.0 ? static_cast<double>(r.config.vectors) / r.cache_seconds : 0.0);
  row("exact_retrieval_seconds", "%.6f", r.exact_seconds);
  row("sketch_retrieval_seconds", "%.6f", r.sketch_seconds);
  row("speedup", "%.3f", r.speedup);
  row("top1_agrees", "%d", r.top1_agrees ? 1 : 0);
  return out;
}

}  // namespace gradtrace
