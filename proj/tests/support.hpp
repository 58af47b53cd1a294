#pragma once

#include <unistd.h>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "gradtrace/rng.hpp"
#include "gradtrace/toy_lm.hpp"

namespace testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("gradtrace_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline gradtrace::ModelShape small_shape() {
  gradtrace::ModelShape s;
  s.vocab_size = 12;
  s.context_window = 3;
  s.embed_dim = 4;
  s.hidden_dim = 5;
  return s;
}

inline gradtrace::ToySample random_sample(gradtrace::Rng& rng, std::size_t vocab, gradtrace::SampleId id,
                                          std::size_t max_prompt = 4, std::size_t max_gen = 4) {
  gradtrace::ToySample s;
  s.id = id;
  const auto p = rng.uniform_below(max_prompt + 1);
  const auto g = 1 + rng.uniform_below(max_gen);
  for (std::uint64_t i = 0; i < p; ++i) s.prompt.push_back(static_cast<gradtrace::TokenId>(rng.uniform_below(vocab)));
  for (std::uint64_t i = 0; i < g; ++i) s.generation.push_back(static_cast<gradtrace::TokenId>(rng.uniform_below(vocab)));
  return s;
}

inline gradtrace::Dataset random_dataset(std::size_t n, std::uint64_t seed, std::size_t vocab) {
  gradtrace::Rng rng(seed);
  gradtrace::Dataset d;
  for (std::size_t i = 0; i < n; ++i) d.push_back(random_sample(rng, vocab, i));
  return d;
}

inline std::vector<double> normal_vector(std::size_t n, std::uint64_t seed) {
  gradtrace::Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

inline bool close_rel(double a, double b, double rtol, double atol = 0.0) {
  return std::abs(a - b) <= atol + rtol * std::max(std::abs(a), std::abs(b));
}

}  // namespace testing
