#include "gradtrace/sketch.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

#include "gradtrace/error.hpp"
#include "gradtrace/io.hpp"
#include "gradtrace/rng.hpp"

namespace gradtrace {

std::uint32_t recommended_lambda(std::uint64_t n) {
  if (n <= 1) return 0;
  return static_cast<std::uint32_t>(std::ceil(1.5 * std::log2(static_cast<double>(n))));
}

std::uint64_t padded_length_for(std::uint64_t raw_length, std::uint64_t K) {
  if (K == 0) throw ConfigError("sketch size K must be at least 1");
  std::uint64_t p = K;
  while (p < raw_length) {
    if (p > std::numeric_limits<std::uint64_t>::max() / 2) throw ConfigError("padded length overflows");
    p *= 2;
  }
  return p;
}

std::vector<std::uint64_t> proper_divisors(std::uint64_t n) {
  std::vector<std::uint64_t> low, high;
  for (std::uint64_t d = 2; d * d <= n; ++d) {
    if (n % d != 0) continue;
    low.push_back(d);
    if (d != n / d) high.push_back(n / d);
  }
  low.insert(low.end(), high.rbegin(), high.rend());
  return low;
}

// ---------------------------------------------------------------------------

ShufflePlan ShufflePlan::generate(std::uint64_t seed, std::uint32_t lambda,
                                  std::uint64_t padded_length) {
  if (padded_length == 0) throw ConfigError("padded length must be positive");
  ShufflePlan plan;
  plan.seed_ = seed;
  plan.lambda_ = lambda;
  plan.padded_length_ = padded_length;
  const auto divisors = proper_divisors(padded_length);
  auto pick = [&](Rng& rng) -> std::uint64_t {
    if (divisors.empty()) return padded_length;
    return divisors[rng.uniform_below(divisors.size())];
  };
  plan.steps_.reserve(lambda);
  for (std::uint32_t i = 0; i < lambda; ++i) {
    Rng rng(derive_seed(seed, StreamDomain::shuffle_step, i));
    ShuffleStep step;
    step.x_row = pick(rng);
    step.row_perm_seed = rng.next();
    step.x_col = pick(rng);
    step.col_perm_seed = rng.next();
    plan.steps_.push_back(step);
  }
  return plan;
}

const char* to_string(SignMode mode) {
  return mode == SignMode::all_positive ? "all-positive" : "rademacher";
}

SignMode parse_sign_mode(const std::string& text) {
  if (text == "rademacher") return SignMode::rademacher;
  if (text == "all-positive") return SignMode::all_positive;
  throw ConfigError("unknown sign mode: " + text);
}

ProjectionPlan::ProjectionPlan(std::uint64_t seed, std::uint64_t padded_length, std::uint64_t K,
                               SignMode mode)
    : seed_(seed),
      stream_seed_(derive_seed(seed, StreamDomain::projection_signs)),
      padded_length_(padded_length),
      K_(K),
      mode_(mode) {
  if (K == 0) throw ConfigError("sketch size K must be at least 1");
  if (padded_length == 0 || padded_length % K != 0) {
    throw ConfigError("K must divide the padded length");
  }
}

std::uint64_t ProjectionPlan::sign_word(std::uint64_t w) const {
  if (mode_ == SignMode::all_positive) return ~std::uint64_t{0};
  return splitmix_at(stream_seed_, w);
}

std::vector<std::uint64_t> ProjectionPlan::sign_words() const {
  std::vector<std::uint64_t> out(word_count());
  for (std::uint64_t w = 0; w < out.size(); ++w) out[w] = sign_word(w);
  // Bits beyond padded_length are cleared so the packed form is canonical.
  if (const auto tail = padded_length_ % 64; tail != 0 && !out.empty()) {
    out.back() &= (std::uint64_t{1} << tail) - 1;
  }
  return out;
}

// ---------------------------------------------------------------------------

std::uint64_t compute_spec_id(std::uint64_t seed, std::uint32_t lambda, std::uint64_t K,
                              std::uint64_t raw_length, SignMode signs) {
  std::ostringstream ss;
  ss << "gradtrace-sketch-spec v" << kSpecFormatVersion << " seed=" << seed << " lambda=" << lambda
     << " K=" << K << " raw_length=" << raw_length << " signs=" << to_string(signs);
  const std::string canonical = ss.str();
  return fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(canonical.data()), canonical.size()));
}

SketchSpec make_sketch_spec(std::uint64_t raw_length, std::uint64_t K, std::uint32_t lambda,
                            std::uint64_t seed, SignMode signs) {
  if (K == 0) throw ConfigError("sketch size K must be at least 1");
  if (raw_length == 0) throw ConfigError("raw length must be positive");
  SketchSpec spec;
  spec.seed = seed;
  spec.lambda = lambda;
  spec.K = K;
  spec.raw_length = raw_length;
  spec.padded_length = padded_length_for(raw_length, K);
  spec.signs = signs;
  spec.spec_id = compute_spec_id(seed, lambda, K, raw_length, signs);
  spec.shuffle = ShufflePlan::generate(seed, lambda, spec.padded_length);
  spec.projection = ProjectionPlan(seed, spec.padded_length, K, signs);
  return spec;
}

std::uint64_t k_for_compression(std::uint64_t raw_length, std::uint64_t factor) {
  if (factor == 0 || (factor & (factor - 1)) != 0) {
    throw ConfigError("compression factor must be a power of two");
  }
  const std::uint64_t full = padded_length_for(raw_length, 1);
  if (factor > full) throw ConfigError("compression factor exceeds the padded length");
  return full / factor;
}

std::string SketchSpec::to_text() const {
  std::ostringstream ss;
  char id[17];
  std::snprintf(id, sizeof id, "%016llx", static_cast<unsigned long long>(spec_id));
  ss << "gradtrace-sketch-spec\n"
     << "format_version = " << kSpecFormatVersion << "\n"
     << "seed = " << seed << "\n"
     << "lambda = " << lambda << "\n"
     << "K = " << K << "\n"
     << "raw_length = " << raw_length << "\n"
     << "signs = " << to_string(signs) << "\n"
     << "spec_id = " << id << "\n";
  return ss.str();
}

SketchSpec SketchSpec::from_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "gradtrace-sketch-spec") {
    throw InputError("not a sketch spec file");
  }
  std::uint64_t version = 0, seed = 0, lambda = 0, K = 0, raw = 0, id = 0;
  std::string signs = "rademacher";
  bool have_id = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) throw InputError("malformed spec line: " + line);
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 3);
    try {
      if (key == "format_version") version = std::stoull(value);
      else if (key == "seed") seed = std::stoull(value);
      else if (key == "lambda") lambda = std::stoull(value);
      else if (key == "K") K = std::stoull(value);
      else if (key == "raw_length") raw = std::stoull(value);
      else if (key == "signs") signs = value;
      else if (key == "spec_id") { id = std::stoull(value, nullptr, 16); have_id = true; }
      else throw InputError("unknown spec key: " + key);
    } catch (const std::logic_error&) {
      throw InputError("malformed spec value: " + line);
    }
  }
  if (version != kSpecFormatVersion) throw InputError("unsupported spec format version");
  if (lambda > std::numeric_limits<std::uint32_t>::max()) throw InputError("lambda out of range");
  SketchSpec spec = make_sketch_spec(raw, K, static_cast<std::uint32_t>(lambda), seed, parse_sign_mode(signs));
  if (have_id && spec.spec_id != id) throw SpecMismatchError("spec_id does not match spec fields");
  return spec;
}

void SketchSpec::save(const std::filesystem::path& path) const { write_file_atomic(path, to_text()); }

SketchSpec SketchSpec::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("spec file not found: " + path.string());
  return from_text(read_file_text(path));
}

// ---------------------------------------------------------------------------

std::vector<double> RapidGrad::widened() const {
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = from_half(values[i]);
  return out;
}

std::vector<double> apply_shuffle(std::span<const double> v, const ShufflePlan& plan) {
  const std::uint64_t n = plan.padded_length();
  if (v.size() != n) {
    throw InputError("shuffle input length " + std::to_string(v.size()) + " != plan length " +
                     std::to_string(n));
  }
  std::vector<double> cur(v.begin(), v.end());
  std::vector<double> next(n);
  for (const auto& step : plan.steps()) {
    const std::uint64_t rows = step.x_row, width = n / step.x_row;
    const auto row_perm = fisher_yates_permutation(rows, step.row_perm_seed);
    for (std::uint64_t i = 0; i < rows; ++i) {
      const double* src = cur.data() + row_perm[i] * width;
      std::copy(src, src + width, next.begin() + static_cast<std::ptrdiff_t>(i * width));
    }
    cur.swap(next);

    const std::uint64_t cols = step.x_col, height = n / step.x_col;
    const auto col_perm = fisher_yates_permutation(cols, step.col_perm_seed);
    for (std::uint64_t i = 0; i < height; ++i) {
      for (std::uint64_t j = 0; j < cols; ++j) next[i * cols + j] = cur[i * cols + col_perm[j]];
    }
    cur.swap(next);
  }
  return cur;
}

std::vector<std::uint64_t> compose_shuffle(const ShufflePlan& plan) {
  const std::uint64_t n = plan.padded_length();
  std::vector<std::uint64_t> src(n), next(n);
  std::iota(src.begin(), src.end(), std::uint64_t{0});
  for (const auto& step : plan.steps()) {
    const std::uint64_t rows = step.x_row, width = n / step.x_row;
    const auto row_perm = fisher_yates_permutation(rows, step.row_perm_seed);
    for (std::uint64_t i = 0; i < rows; ++i) {
      const std::uint64_t* from = src.data() + row_perm[i] * width;
      std::copy(from, from + width, next.begin() + static_cast<std::ptrdiff_t>(i * width));
    }
    src.swap(next);

    const std::uint64_t cols = step.x_col, height = n / step.x_col;
    const auto col_perm = fisher_yates_permutation(cols, step.col_perm_seed);
    for (std::uint64_t i = 0; i < height; ++i) {
      for (std::uint64_t j = 0; j < cols; ++j) next[i * cols + j] = src[i * cols + col_perm[j]];
    }
    src.swap(next);
  }
  return src;
}

namespace {

void check_finite(std::span<const double> values) {
  for (double x : values) {
    if (!std::isfinite(x)) throw InputError("cannot compress a non-finite gradient");
  }
}

}  // namespace

std::vector<double> compress_values(std::span<const double> values, const ShufflePlan& shuffle,
                                    const ProjectionPlan& projection) {
  if (shuffle.padded_length() != projection.padded_length()) {
    throw InputError("shuffle and projection plans disagree on padded length");
  }
  const std::uint64_t n = shuffle.padded_length();
  if (values.size() > n) throw InputError("gradient longer than the plans' padded length");
  check_finite(values);
  std::vector<double> padded(n, 0.0);
  std::copy(values.begin(), values.end(), padded.begin());
  const auto shuffled = apply_shuffle(padded, shuffle);
  const std::uint64_t K = projection.K(), bucket = projection.bucket_size();
  std::vector<double> sums(K, 0.0);
  for (std::uint64_t b = 0; b < K; ++b) {
    double acc = 0.0;
    for (std::uint64_t p = b * bucket; p < (b + 1) * bucket; ++p) {
      acc += projection.sign(p) > 0 ? shuffled[p] : -shuffled[p];
    }
    sums[b] = acc;
  }
  return sums;
}

RapidGrad to_rapidgrad(std::span<const double> sums, SourceId source, std::uint64_t spec_id) {
  RapidGrad out;
  out.source = source;
  out.spec_id = spec_id;
  out.values.resize(sums.size());
  for (std::size_t i = 0; i < sums.size(); ++i) {
    if (!std::isfinite(sums[i]) || std::abs(sums[i]) > kHalfMax) {
      throw InputError("sketch value " + std::to_string(sums[i]) + " is not representable in binary16");
    }
    out.values[i] = to_half(sums[i]);
  }
  return out;
}

RapidGrad compress(const FlatGradient& g_normalized, const SketchSpec& spec) {
  if (g_normalized.values.size() != spec.raw_length) {
    throw InputError("gradient length " + std::to_string(g_normalized.values.size()) +
                     " does not match spec raw_length " + std::to_string(spec.raw_length));
  }
  const auto sums = compress_values(g_normalized.values, spec.shuffle, spec.projection);
  return to_rapidgrad(sums, g_normalized.source, spec.spec_id);
}

Compressor::Compressor(SketchSpec spec)
    : spec_(std::move(spec)),
      gather_(compose_shuffle(spec_.shuffle)),
      sign_words_(spec_.projection.sign_words()) {}

std::vector<double> Compressor::compress_full(std::span<const double> values) const {
  if (values.size() != spec_.raw_length) {
    throw InputError("gradient length " + std::to_string(values.size()) +
                     " does not match spec raw_length " + std::to_string(spec_.raw_length));
  }
  check_finite(values);
  const std::uint64_t K = spec_.K, bucket = spec_.padded_length / spec_.K;
  const std::uint64_t raw = spec_.raw_length;
  std::vector<double> sums(K, 0.0);
  for (std::uint64_t b = 0; b < K; ++b) {
    double acc = 0.0;
    for (std::uint64_t p = b * bucket; p < (b + 1) * bucket; ++p) {
      const std::uint64_t src = gather_[p];
      const double x = src < raw ? values[src] : 0.0;
      acc += (sign_words_[p >> 6] >> (p & 63)) & 1U ? x : -x;
    }
    sums[b] = acc;
  }
  return sums;
}

RapidGrad Compressor::compress(std::span<const double> values, SourceId source) const {
  return to_rapidgrad(compress_full(values), source, spec_.spec_id);
}

double sketch_inner(const RapidGrad& a, const RapidGrad& b) {
  if (a.spec_id != b.spec_id) throw SpecMismatchError("sketches come from different specs");
  if (a.values.size() != b.values.size()) throw SpecMismatchError("sketch lengths differ");
  return half_dot(a.values, b.values);
}

// ---------------------------------------------------------------------------

CompressionRatio compression_ratio(std::uint64_t raw_length, std::uint64_t K,
                                   std::uint64_t raw_bytes_per_value,
                                   std::uint64_t sketch_bytes_per_value) {
  if (K == 0) throw ConfigError("sketch size K must be at least 1");
  if (raw_length == 0 || raw_bytes_per_value == 0 || sketch_bytes_per_value == 0) {
    throw ConfigError("compression_ratio inputs must be positive");
  }
  CompressionRatio r;
  r.raw_bytes = raw_length * raw_bytes_per_value;
  r.sketch_bytes = K * sketch_bytes_per_value;
  r.length_ratio = static_cast<double>(raw_length) / static_cast<double>(K);
  r.size_ratio = static_cast<double>(r.raw_bytes) / static_cast<double>(r.sketch_bytes);
  return r;
}

namespace {

struct Label {
  double number;
  const char* unit;
  double unit_binary;  // bytes per unit when the label is read back in binary units
};

Label label_of(std::uint64_t bytes) {
  const double mib = static_cast<double>(bytes) / 1048576.0;
  if (mib < 1.0) return {mib * 1000.0, "KB", 1024.0};
  if (mib < 1000.0) return {mib, "MB", 1048576.0};
  return {mib / 1000.0, "GB", 1073741824.0};
}

double round1(double x) { return std::round(x * 10.0) / 10.0; }

}  // namespace

std::string size_label(std::uint64_t bytes) {
  const Label l = label_of(bytes);
  const double r = round1(l.number);
  char buf[64];
  if (r == std::floor(r)) std::snprintf(buf, sizeof buf, "%.0f%s", r, l.unit);
  else std::snprintf(buf, sizeof buf, "%.1f%s", r, l.unit);
  return buf;
}

std::uint64_t quoted_reduction(std::uint64_t full_bytes, std::uint64_t sketch_bytes) {
  if (sketch_bytes == 0) throw ConfigError("sketch size must be positive");
  const Label l = label_of(full_bytes);
  return static_cast<std::uint64_t>(std::llround(round1(l.number) * l.unit_binary /
                                                 static_cast<double>(sketch_bytes)));
}

}  // namespace gradtrace
