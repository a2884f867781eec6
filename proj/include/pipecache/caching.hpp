#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pipecache/frame.hpp"
#include "pipecache/pipeline.hpp"

namespace pipecache {

/// Scratch directory removed (recursively) on destruction.
class TempDir {
 public:
  explicit TempDir(std::string_view prefix = "pipecache");
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// Contents of a cache directory's `meta` file.
struct CacheMeta {
  int format_version = 1;
  std::string kind;
  std::vector<std::string> key_columns;
  std::vector<std::string> value_columns;
  std::string label;

  static CacheMeta read(const std::filesystem::path& dir);
  void write(const std::filesystem::path& dir) const;
  friend bool operator==(const CacheMeta&, const CacheMeta&) = default;
};

/// Common construction options for the wrapping caches.
struct CacheOptions {
  /// Cache directory; when absent a temporary directory is created and
  /// removed when the last handle to the cache goes away.
  std::optional<std::filesystem::path> path;
  /// Transformer invoked on misses. Without one, a miss throws
  /// CacheMissError.
  std::optional<Transformer> inner;
  /// Caller-chosen configuration label, checked against `meta` on open.
  std::string label;
  /// Open without the write lock; misses are computed but not stored.
  bool read_only = false;
};

namespace detail {
struct KvCacheCore;
struct DenseCore;
struct IndexerCore;
}  // namespace detail

/// Row-wise cache mapping key columns to value columns.
///
/// Hits return stored values. All missing rows go to the inner transformer
/// in one batch (in input order); the inner output must have one row per
/// input row, in order. Output rows match input rows; only value columns
/// are added or overwritten.
class KeyValueCache {
 public:
  KeyValueCache(CacheOptions options, std::vector<std::string> key_columns,
                std::vector<std::string> value_columns);

  Frame apply(const Frame& input) const;
  Transformer transformer() const;

  const std::filesystem::path& path() const;
  std::size_t size() const;
  void close();

 private:
  std::shared_ptr<detail::KvCacheCore> core_;
};

/// Per-row score cache keyed on (query, docno) by default. Missing rows are
/// scored in one inner call; output ranks are reassigned from the scores.
class ScorerCache {
 public:
  explicit ScorerCache(CacheOptions options,
                       std::vector<std::string> key_columns = {"query",
                                                               "docno"});

  Frame apply(const Frame& input) const;
  Transformer transformer() const;

  const std::filesystem::path& path() const;
  std::size_t size() const;
  void close();

 private:
  std::shared_ptr<detail::KvCacheCore> core_;
};

/// Score cache over a fixed docno snapshot. Each query key owns a file
/// `<hex digest>.f64` of corpus-size little-endian doubles, NaN meaning
/// "not computed"; `docnos` holds the ordinal map.
class DenseScorerCache {
 public:
  /// `corpus_docnos` is required when the directory has no `docnos` file
  /// yet and must match it otherwise (an empty list accepts the stored one).
  DenseScorerCache(CacheOptions options,
                   std::vector<std::string> corpus_docnos = {},
                   std::vector<std::string> query_key_columns = {"query"});

  Frame apply(const Frame& input) const;
  Transformer transformer() const;

  const std::filesystem::path& path() const;
  /// Number of stored (non-NaN) scores.
  std::size_t size() const;
  void close();

 private:
  std::shared_ptr<detail::DenseCore> core_;
};

/// Maps each input row to a whole result frame. The default key is every
/// input column. Misses run the inner transformer on that single row.
class RetrieverCache {
 public:
  explicit RetrieverCache(CacheOptions options,
                          std::vector<std::string> key_columns = {});

  Frame apply(const Frame& input) const;
  Transformer transformer() const;

  const std::filesystem::path& path() const;
  std::size_t size() const;
  void close();

 private:
  std::shared_ptr<detail::KvCacheCore> core_;
};

/// Stores a stream of rows in arrival order. `records` holds u32
/// length-prefixed single-row frame encodings; `docnos` (when the rows have
/// a docno column) maps ordinals to docnos for forward lookups.
class IndexerCache {
 public:
  explicit IndexerCache(std::optional<std::filesystem::path> path = {});

  /// Persists `rows`. The cache must be empty.
  std::size_t index(const Frame& rows);
  /// Applies `producer` to `input` and persists the result.
  std::size_t index(const Transformer& producer, const Frame& input);

  std::size_t size() const;
  /// Calls `fn` with each stored record (a one-row frame) in order.
  void for_each(const std::function<void(const Frame&)>& fn) const;
  Frame read_all() const;
  /// Records for `docnos`, in request order.
  Frame lookup(std::span<const std::string> docnos) const;
  bool has_docnos() const;

  const std::filesystem::path& path() const;

 private:
  std::shared_ptr<detail::IndexerCore> core_;
};

/// Defers `factory` until the first apply; the built transformer is reused.
/// A throwing factory is retried on the next apply.
Transformer lazy(std::function<Transformer()> factory,
                 std::string label = "lazy");

/// Writes the cache directory as a ustar archive. Fails if the cache is
/// open for writing.
void pack_cache(const std::filesystem::path& cache_dir,
                const std::filesystem::path& archive);
/// Extracts an archive written by pack_cache into `dest` (absent or empty).
void unpack_cache(const std::filesystem::path& archive,
                  const std::filesystem::path& dest);

struct CacheStats {
  CacheMeta meta;
  std::size_t entries = 0;
  std::uintmax_t bytes = 0;
};

/// Entry count and on-disk size of any cache directory.
CacheStats cache_stats(const std::filesystem::path& cache_dir);
/// Removes all cache files, keeping `meta`. Fails if open for writing.
void clear_cache(const std::filesystem::path& cache_dir);

}  // namespace pipecache
