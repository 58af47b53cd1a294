#include "gradtrace/cache.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <bit>
#include <cerrno>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <thread>
#include <utility>

#include "gradtrace/error.hpp"
#include "gradtrace/io.hpp"

namespace gradtrace {

namespace {

constexpr std::uint32_t kNoTokenIndex = 0xFFFFFFFFU;
constexpr unsigned kFlagCommitted = 1;
constexpr unsigned kFlagToken = 2;

std::string errno_text() { return std::strerror(errno); }

std::vector<std::uint8_t> encode_header(const CacheHeader& h) {
  std::vector<std::uint8_t> out;
  for (char c : {'G', 'T', 'R', 'C'}) out.push_back(static_cast<std::uint8_t>(c));
  le::put_u32(out, h.format_version);
  le::put_u64(out, h.spec_id);
  le::put_u64(out, h.K);
  le::put_u32(out, h.dtype);
  le::put_u32(out, 0);
  le::put_u64(out, h.count);
  le::put_u64(out, fnv1a64_words(out));
  return out;
}

CacheHeader decode_header(std::span<const std::uint8_t> bytes, const std::string& where) {
  if (bytes.size() < kCacheHeaderSize) throw CorruptHeaderError(where + ": file shorter than header");
  const std::uint8_t* p = bytes.data();
  if (std::memcmp(p, "GTRC", 4) != 0) throw CorruptHeaderError(where + ": bad magic");
  if (le::get_u64(p + 40) != fnv1a64_words(bytes.subspan(0, 40))) {
    throw CorruptHeaderError(where + ": header checksum mismatch");
  }
  CacheHeader h;
  h.format_version = le::get_u32(p + 4);
  h.spec_id = le::get_u64(p + 8);
  h.K = le::get_u64(p + 16);
  h.dtype = le::get_u32(p + 24);
  h.count = le::get_u64(p + 32);
  if (h.format_version != kCacheFormatVersion) {
    throw CorruptHeaderError(where + ": unsupported format version " + std::to_string(h.format_version));
  }
  if (h.dtype != kDtypeHalf) throw CorruptHeaderError(where + ": unsupported value dtype");
  if (h.K == 0) throw CorruptHeaderError(where + ": K is zero");
  return h;
}

std::vector<std::uint8_t> encode_record(const SourceId& id, std::span<const HalfBits> values) {
  std::vector<std::uint8_t> out;
  out.reserve(cache_record_size(values.size()));
  le::put_u64(out, id.sample);
  le::put_u32(out, id.token ? *id.token : kNoTokenIndex);
  le::put_u32(out, 0);
  for (HalfBits v : values) le::put_u16(out, v);
  le::put_u64(out, fnv1a64_words(out));
  return out;
}

void write_all_at(int fd, std::span<const std::uint8_t> bytes, std::uint64_t offset) {
  std::size_t done = 0;
  while (done < bytes.size()) {
    const ssize_t n = ::pwrite(fd, bytes.data() + done, bytes.size() - done,
                               static_cast<off_t>(offset + done));
    if (n < 0) {
      if (errno == EINTR) continue;
      throw IoError("cache write failed: " + errno_text());
    }
    done += static_cast<std::size_t>(n);
  }
}

std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

bool half_is_finite(HalfBits b) { return (b & 0x7C00U) != 0x7C00U; }

}  // namespace

CacheHeader read_cache_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open cache " + path.string());
  std::vector<std::uint8_t> buf(kCacheHeaderSize);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  buf.resize(static_cast<std::size_t>(in.gcount()));
  return decode_header(buf, path.string());
}

std::filesystem::path CacheStore::index_path() const { return std::filesystem::path(path_.string() + ".idx"); }

CacheStore CacheStore::open(const std::filesystem::path& path, std::uint64_t spec_id, OpenMode mode,
                            std::uint64_t K) {
  CacheStore store;
  store.path_ = path;
  store.header_.spec_id = spec_id;
  store.header_.K = K;
  const bool exists = std::filesystem::exists(path);
  if (mode == OpenMode::create || (mode == OpenMode::append && !exists)) {
    if (K == 0) throw ConfigError("creating a cache requires K >= 1");
    store.create_empty();
    return store;
  }
  if (!exists) throw IoError("cache not found: " + path.string());
  store.header_ = read_cache_header(path);
  if (store.header_.spec_id != spec_id) {
    throw SpecMismatchError("cache " + path.string() + " was built for spec " + hex16(store.header_.spec_id) +
                            ", expected " + hex16(spec_id));
  }
  if (K != 0 && K != store.header_.K) {
    throw SpecMismatchError("cache K " + std::to_string(store.header_.K) + " != expected " + std::to_string(K));
  }
  store.load_existing(mode == OpenMode::append);
  return store;
}

CacheStore::CacheStore(CacheStore&& other) noexcept
    : path_(std::move(other.path_)),
      writable_(other.writable_),
      fd_(std::exchange(other.fd_, -1)),
      header_(other.header_),
      dropped_(other.dropped_),
      committed_(other.committed_),
      slot_ids_(std::move(other.slot_ids_)),
      values_(std::move(other.values_)),
      slot_of_(std::move(other.slot_of_)),
      mu_(std::move(other.mu_)) {
  other.writable_ = false;
}

CacheStore::~CacheStore() {
  if (fd_ >= 0) {
    if (writable_ && mu_) {
      try {
        flush();
      } catch (...) {
        // Uncommitted records are discarded on the next open.
      }
    }
    ::close(fd_);
  }
}

void CacheStore::create_empty() {
  writable_ = true;
  fd_ = ::open(path_.c_str(), O_RDWR | O_CREAT | O_TRUNC, 0644);
  if (fd_ < 0) throw IoError("cannot create cache " + path_.string() + ": " + errno_text());
  header_.format_version = kCacheFormatVersion;
  header_.dtype = kDtypeHalf;
  header_.count = 0;
  std::lock_guard lock(*mu_);
  write_header_locked();
  write_index_locked();
}

void CacheStore::load_existing(bool writable) {
  writable_ = writable;
  fd_ = ::open(path_.c_str(), writable ? O_RDWR : O_RDONLY);
  if (fd_ < 0) throw IoError("cannot open cache " + path_.string() + ": " + errno_text());
  struct stat st {};
  if (::fstat(fd_, &st) != 0) throw IoError("cannot stat cache: " + errno_text());
  const auto file_size = static_cast<std::uint64_t>(st.st_size);
  const std::size_t rs = cache_record_size(header_.K);

  std::vector<std::pair<SourceId, std::uint64_t>> entries;
  if (std::filesystem::exists(index_path())) {
    std::istringstream in(read_file_text(index_path()));
    std::string line;
    std::getline(in, line);
    const std::string expect = "# gradtrace-cache-index v1 spec_id=" + hex16(header_.spec_id) +
                               " K=" + std::to_string(header_.K);
    if (line != expect) throw CorruptHeaderError("cache index header mismatch: " + index_path().string());
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::istringstream fields(line);
      std::string id, offset, flags;
      if (!std::getline(fields, id, '\t') || !std::getline(fields, offset, '\t') ||
          !std::getline(fields, flags)) {
        throw CorruptHeaderError("malformed cache index line: " + line);
      }
      try {
        if (!(std::stoul(flags) & kFlagCommitted)) continue;
        entries.emplace_back(SourceId::parse(id), std::stoull(offset));
      } catch (const std::logic_error&) {
        throw CorruptHeaderError("malformed cache index line: " + line);
      } catch (const InputError&) {
        throw CorruptHeaderError("malformed cache index line: " + line);
      }
    }
  }

  std::size_t usable = entries.size();
  for (std::size_t slot = 0; slot < entries.size(); ++slot) {
    if (entries[slot].second != kCacheHeaderSize + slot * rs) {
      throw CorruptHeaderError("cache index offsets are not contiguous at " + entries[slot].first.to_string());
    }
    if (entries[slot].second + rs > file_size) {
      usable = slot;
      dropped_ = entries.size() - slot;
      break;
    }
  }
  values_.resize(usable * header_.K);
  slot_ids_.reserve(usable);

  // read in chunks of whole records
  const std::size_t per_chunk = std::max<std::size_t>(1, (std::size_t{8} << 20) / rs);
  std::vector<std::uint8_t> buf(per_chunk * rs);
  for (std::size_t first = 0; first < usable; first += per_chunk) {
    const std::size_t count = std::min(per_chunk, usable - first);
    const std::size_t bytes = count * rs;
    std::size_t got = 0;
    while (got < bytes) {
      const ssize_t n = ::pread(fd_, buf.data() + got, bytes - got,
                                static_cast<off_t>(entries[first].second + got));
      if (n <= 0) throw IoError("short read in cache " + path_.string());
      got += static_cast<std::size_t>(n);
    }
    for (std::size_t r = 0; r < count; ++r) {
      const std::size_t slot = first + r;
      const auto& id = entries[slot].first;
      const std::uint8_t* rec = buf.data() + r * rs;
      if (le::get_u64(rec + rs - 8) != fnv1a64_words(std::span(rec, rs - 8))) {
        throw ChecksumError("checksum failure for record " + id.to_string() + " in " + path_.string());
      }
      const std::uint32_t tok = le::get_u32(rec + 8);
      const SourceId stored{le::get_u64(rec),
                            tok == kNoTokenIndex ? std::nullopt : std::optional<std::uint32_t>(tok)};
      if (!(stored == id)) {
        throw ChecksumError("record at " + std::to_string(entries[slot].second) + " is not " + id.to_string());
      }
      if (slot_of_.count(id)) throw CorruptHeaderError("duplicate id in cache index: " + id.to_string());
      slot_of_[id] = slot_ids_.size();
      slot_ids_.push_back(id);
      HalfBits* out = values_.data() + slot * header_.K;
      if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(out, rec + 16, 2 * header_.K);
      } else {
        for (std::uint64_t k = 0; k < header_.K; ++k) out[k] = le::get_u16(rec + 16 + 2 * k);
      }
    }
  }
  committed_ = slot_ids_.size();

  if (writable_) {
    std::lock_guard lock(*mu_);
    const std::uint64_t end = kCacheHeaderSize + committed_ * rs;
    if (file_size != end && ::ftruncate(fd_, static_cast<off_t>(end)) != 0) {
      throw IoError("cannot truncate cache: " + errno_text());
    }
    if (dropped_ != 0 || header_.count != committed_) {
      write_index_locked();
      header_.count = committed_;
      write_header_locked();
    }
  } else {
    header_.count = committed_;
  }
}

void CacheStore::write_header_locked() {
  write_all_at(fd_, encode_header(header_), 0);
  ::fsync(fd_);
}

void CacheStore::write_index_locked() const {
  std::string text = "# gradtrace-cache-index v1 spec_id=" + hex16(header_.spec_id) +
                     " K=" + std::to_string(header_.K) + "\n";
  const std::size_t rs = cache_record_size(header_.K);
  for (std::size_t slot = 0; slot < slot_ids_.size(); ++slot) {
    const auto& id = slot_ids_[slot];
    const unsigned flags = kFlagCommitted | (id.token ? kFlagToken : 0U);
    text += id.to_string() + "\t" + std::to_string(kCacheHeaderSize + slot * rs) + "\t" +
            std::to_string(flags) + "\n";
  }
  const auto tmp = std::filesystem::path(index_path().string() + ".tmp");
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  if (fd < 0) throw IoError("cannot write cache index: " + errno_text());
  try {
    write_all_at(fd, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()), 0);
  } catch (...) {
    ::close(fd);
    throw;
  }
  ::fsync(fd);
  ::close(fd);
  if (::rename(tmp.c_str(), index_path().c_str()) != 0) {
    throw IoError("cannot rename cache index: " + errno_text());
  }
}

void CacheStore::commit_locked() {
  if (committed_ == slot_ids_.size()) return;
  ::fsync(fd_);
  write_index_locked();
  committed_ = slot_ids_.size();
  header_.count = committed_;
  write_header_locked();
}

void CacheStore::flush() {
  if (!writable_) return;
  std::lock_guard lock(*mu_);
  commit_locked();
}

std::size_t CacheStore::size() const {
  std::lock_guard lock(*mu_);
  return slot_ids_.size();
}

std::size_t CacheStore::committed_count() const {
  std::lock_guard lock(*mu_);
  return committed_;
}

bool CacheStore::contains(const SourceId& id) const {
  std::lock_guard lock(*mu_);
  return slot_of_.count(id) != 0;
}

std::optional<RapidGrad> CacheStore::get(const SourceId& id) const {
  std::lock_guard lock(*mu_);
  const auto it = slot_of_.find(id);
  if (it == slot_of_.end()) return std::nullopt;
  RapidGrad g;
  g.source = id;
  g.spec_id = header_.spec_id;
  const auto begin = values_.begin() + static_cast<std::ptrdiff_t>(it->second * header_.K);
  g.values.assign(begin, begin + static_cast<std::ptrdiff_t>(header_.K));
  return g;
}

std::vector<SourceId> CacheStore::ids() const {
  std::lock_guard lock(*mu_);
  std::vector<SourceId> out;
  out.reserve(slot_of_.size());
  for (const auto& [id, slot] : slot_of_) out.push_back(id);
  return out;
}

CacheView CacheStore::view() const {
  std::lock_guard lock(*mu_);
  return {header_.K, slot_ids_, values_};
}

PutResult CacheStore::put(const RapidGrad& sketch) {
  if (!writable_) throw IoError("cache " + path_.string() + " is open read-only");
  if (sketch.spec_id != header_.spec_id) {
    throw SpecMismatchError("sketch spec " + hex16(sketch.spec_id) + " does not match cache spec " +
                            hex16(header_.spec_id));
  }
  if (sketch.values.size() != header_.K) {
    throw SpecMismatchError("sketch length " + std::to_string(sketch.values.size()) + " != cache K " +
                            std::to_string(header_.K));
  }
  if (!std::all_of(sketch.values.begin(), sketch.values.end(), half_is_finite)) {
    throw InputError("sketch " + sketch.source.to_string() + " holds non-finite values");
  }
  std::lock_guard lock(*mu_);
  if (const auto it = slot_of_.find(sketch.source); it != slot_of_.end()) {
    const auto begin = values_.begin() + static_cast<std::ptrdiff_t>(it->second * header_.K);
    if (!std::equal(sketch.values.begin(), sketch.values.end(), begin)) {
      throw ConflictError("cache already holds different values for " + sketch.source.to_string());
    }
    return {false, it->second < committed_};
  }
  const std::size_t slot = slot_ids_.size();
  write_all_at(fd_, encode_record(sketch.source, sketch.values),
               kCacheHeaderSize + slot * cache_record_size(header_.K));
  slot_ids_.push_back(sketch.source);
  values_.insert(values_.end(), sketch.values.begin(), sketch.values.end());
  slot_of_[sketch.source] = slot;
  if (slot_ids_.size() - committed_ >= kCommitBatch) commit_locked();
  return {true, slot < committed_};
}

// ---------------------------------------------------------------------------

RapidGrad sketch_sample(const ToyLM& model, const ToySample& sample, const Compressor& compressor,
                        bool normalize) {
  FlatGradient g = sample_gradient(model, sample);
  if (normalize) layerwise_normalize_in_place(g.values, g.layers);
  return compressor.compress(g);
}

RapidGrad sketch_token(const ToyLM& model, const ToySample& sample, std::size_t j,
                       const Compressor& compressor, bool normalize) {
  FlatGradient g = token_gradient(model, sample, j);
  if (normalize) layerwise_normalize_in_place(g.values, g.layers);
  return compressor.compress(g);
}

namespace {

bool fully_cached(const CacheStore& store, const ToySample& s, bool token_level) {
  if (!store.contains(SourceId::of_sample(s.id))) return false;
  if (!token_level) return true;
  for (std::size_t j = 0; j < s.generation.size(); ++j) {
    if (!store.contains(SourceId::of_token(s.id, static_cast<std::uint32_t>(j)))) return false;
  }
  return true;
}

}  // namespace

CacheRunSummary run_cache_workers(const Dataset& data, const ToyLM& model,
                                  const Compressor& compressor, CacheStore& store, unsigned workers,
                                  const CacheRunOptions& options) {
  if (workers == 0) throw ConfigError("worker count must be at least 1");
  if (compressor.spec().spec_id != store.spec_id()) {
    throw SpecMismatchError("compressor spec does not match the cache spec");
  }
  if (compressor.spec().raw_length != model.parameter_count()) {
    throw SpecMismatchError("sketch spec raw_length does not match the model parameter count");
  }
  const auto start = std::chrono::steady_clock::now();

  std::vector<const ToySample*> order;
  order.reserve(data.size());
  for (const auto& s : data) order.push_back(&s);
  std::sort(order.begin(), order.end(), [](const ToySample* a, const ToySample* b) { return a->id < b->id; });

  const std::size_t n = order.size();
  std::vector<std::atomic<bool>> claimed(n);
  std::vector<std::atomic<bool>> done(n);
  CacheRunSummary summary;
  summary.per_worker.assign(workers, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const bool cached = fully_cached(store, *order[i], options.token_level);
    claimed[i].store(cached);
    done[i].store(cached);
    if (cached) ++summary.already_cached;
  }

  std::atomic<std::size_t> lowest{0};
  std::mutex error_mu;
  auto worker = [&](unsigned w) {
    for (;;) {
      std::size_t i = lowest.load();
      while (i < n && claimed[i].exchange(true)) ++i;
      if (i >= n) return;
      std::size_t expected = lowest.load();
      while (expected < i + 1 && !lowest.compare_exchange_weak(expected, i + 1)) {
      }
      const ToySample& s = *order[i];
      try {
        RapidGrad sample_sketch = sketch_sample(model, s, compressor, options.normalize);
        std::vector<RapidGrad> token_sketches;
        if (options.token_level) {
          for (std::size_t j = 0; j < s.generation.size(); ++j) {
            token_sketches.push_back(sketch_token(model, s, j, compressor, options.normalize));
          }
        }
        if (options.before_commit) options.before_commit(w, s.id);
        store.put(sample_sketch);
        for (const auto& t : token_sketches) store.put(t);
        done[i].store(true);
        ++summary.per_worker[w];
      } catch (const std::exception& e) {
        std::lock_guard lock(error_mu);
        summary.worker_errors.push_back("worker " + std::to_string(w) + " failed on sample " +
                                        std::to_string(s.id) + ": " + e.what());
        return;
      }
    }
  };

  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) threads.emplace_back(worker, w);
  for (auto& t : threads) t.join();
  store.flush();

  for (std::size_t i = 0; i < n; ++i) {
    if (!done[i].load()) summary.unprocessed.push_back(order[i]->id);
  }
  for (std::size_t c : summary.per_worker) summary.processed += c;
  summary.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return summary;
}

}  // namespace gradtrace
