#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gradtrace/sketch.hpp"
#include "gradtrace/toy_lm.hpp"

// On-disk sketch store.
//
// Records file (little-endian):
//   header, 48 bytes:
//     0  "GTRC"
//     4  u32 format version
//     8  u64 spec_id
//     16 u64 K
//     24 u32 dtype tag (1 = binary16)
//     28 u32 reserved (0)
//     32 u64 committed record count
//     40 u64 fnv1a64_words of bytes [0, 40)
//   records, fixed size 24 + 2K bytes each:
//     0  u64 sample id
//     8  u32 token index (0xFFFFFFFF = whole sample)
//     12 u32 reserved (0)
//     16 K x u16 binary16 values
//     16+2K u64 fnv1a64_words of bytes [0, 16 + 2K)
//
// Index file (<records>.idx), text:
//   # gradtrace-cache-index v1 spec_id=<hex> K=<K>
//   <id>\t<offset>\t<flags>
// with id "17" or "17:3" and flags a bitmask (1 = committed, 2 = token).
//
// Records are appended; the index is rewritten to a temporary file and
// renamed into place every 64 puts (and on flush). A record is committed
// once it appears in the index. On open, index entries whose record runs
// past the end of the file are treated as torn and dropped; uncommitted
// bytes after the last committed record are discarded by writers.

namespace gradtrace {

inline constexpr std::uint32_t kCacheFormatVersion = 1;
inline constexpr std::uint32_t kDtypeHalf = 1;
inline constexpr std::size_t kCacheHeaderSize = 48;
inline constexpr std::size_t kCommitBatch = 64;

inline constexpr std::size_t cache_record_size(std::uint64_t K) { return 24 + 2 * K; }

struct CacheHeader {
  std::uint32_t format_version = kCacheFormatVersion;
  std::uint64_t spec_id = 0;
  std::uint64_t K = 0;
  std::uint32_t dtype = kDtypeHalf;
  std::uint64_t count = 0;

  friend bool operator==(const CacheHeader&, const CacheHeader&) = default;
};

enum class OpenMode {
  read,    // existing store, no writes
  create,  // new empty store, replacing any existing files
  append,  // existing store opened for writing, created when absent
};

struct PutResult {
  bool inserted = false;   // false: identical record already present
  bool committed = false;  // true once the record is in the index file
};

// Read-only view of the records, in slot (file) order. Valid until the
// next put on the same handle.
struct CacheView {
  std::uint64_t K = 0;
  std::span<const SourceId> ids;
  std::span<const HalfBits> values;  // ids.size() * K
  std::span<const HalfBits> row(std::size_t slot) const { return values.subspan(slot * K, K); }
};

class CacheStore {
 public:
  // `K` is only consulted in create mode (and append mode when the store
  // does not exist yet).
  static CacheStore open(const std::filesystem::path& path, std::uint64_t spec_id, OpenMode mode,
                         std::uint64_t K = 0);

  CacheStore(CacheStore&& other) noexcept;
  CacheStore& operator=(CacheStore&&) = delete;
  CacheStore(const CacheStore&) = delete;
  ~CacheStore();

  const CacheHeader& header() const { return header_; }
  std::uint64_t spec_id() const { return header_.spec_id; }
  std::uint64_t K() const { return header_.K; }
  bool writable() const { return writable_; }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path index_path() const;

  // Committed records plus this handle's pending writes.
  std::size_t size() const;
  std::size_t committed_count() const;
  // Index entries dropped at open because their record was torn.
  std::size_t dropped_on_open() const { return dropped_; }

  bool contains(const SourceId& id) const;
  std::optional<RapidGrad> get(const SourceId& id) const;
  std::vector<SourceId> ids() const;  // ascending
  CacheView view() const;

  // Thread-safe. Idempotent per source id; a different payload for an
  // existing id raises ConflictError.
  PutResult put(const RapidGrad& sketch);
  // Commits pending records (index rename + header count update).
  void flush();

 private:
  CacheStore() = default;
  void load_existing(bool writable);
  void create_empty();
  void commit_locked();
  void write_header_locked();
  void write_index_locked() const;

  std::filesystem::path path_;
  bool writable_ = false;
  int fd_ = -1;
  CacheHeader header_;
  std::size_t dropped_ = 0;
  std::size_t committed_ = 0;
  std::vector<SourceId> slot_ids_;
  std::vector<HalfBits> values_;
  std::map<SourceId, std::size_t> slot_of_;
  std::unique_ptr<std::mutex> mu_ = std::make_unique<std::mutex>();
};

CacheHeader read_cache_header(const std::filesystem::path& path);

struct CacheRunOptions {
  // Also cache one sketch per generation token (ids "sample:j").
  bool token_level = false;
  bool normalize = true;
  // Called before each sample's records are written; throwing from it
  // simulates a worker crash at that point.
  std::function<void(unsigned worker, SampleId id)> before_commit;
};

struct CacheRunSummary {
  std::vector<std::size_t> per_worker;  // samples completed per worker
  std::size_t processed = 0;
  std::size_t already_cached = 0;
  std::vector<SampleId> unprocessed;    // ascending
  std::vector<std::string> worker_errors;
  double wall_seconds = 0.0;
};

// Caches every sample not already in the store with `workers` threads that
// claim samples in ascending id order through a shared test-and-set claim
// set. The store's contents depend only on (dataset, model, spec).
CacheRunSummary run_cache_workers(const Dataset& data, const ToyLM& model,
                                  const Compressor& compressor, CacheStore& store, unsigned workers,
                                  const CacheRunOptions& options = {});

// The sketch of one sample (or one token of it) exactly as cached.
RapidGrad sketch_sample(const ToyLM& model, const ToySample& sample, const Compressor& compressor,
                        bool normalize = true);
RapidGrad sketch_token(const ToyLM& model, const ToySample& sample, std::size_t j,
                       const Compressor& compressor, bool normalize = true);

}  // namespace gradtrace
