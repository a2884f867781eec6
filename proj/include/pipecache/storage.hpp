#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pipecache/frame.hpp"

namespace pipecache {

using Bytes = std::string;
using Digest = std::array<std::uint8_t, 32>;

/// Little-endian byte sink.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void raw(std::string_view bytes) { out_.append(bytes); }
  /// u16 length prefix + bytes.
  void short_string(std::string_view s);
  /// u32 length prefix + bytes.
  void long_string(std::string_view s);

  const Bytes& bytes() const& { return out_; }
  Bytes bytes() && { return std::move(out_); }

 private:
  Bytes out_;
};

/// Bounds-checked little-endian reader; throws FormatError on truncation.
class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : in_(bytes) {}

  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::string_view raw(std::size_t n);
  std::string short_string();
  std::string long_string();

  std::size_t remaining() const { return in_.size() - pos_; }
  bool at_end() const { return pos_ == in_.size(); }

 private:
  std::string_view in_;
  std::size_t pos_ = 0;
};

/// Canonical, order-independent encoding of the key columns of one row:
/// u16 column count, then per column sorted by name: u16 name length, name,
/// kind tag, value (text: u32 length + bytes; real: IEEE-754 bits;
/// integer: two's complement; all little-endian). Key columns must be
/// scalar.
Bytes canonical_encode_row(const Frame& frame, std::size_t row,
                           std::span<const std::string> key_columns);

/// SHA-256 of `bytes`.
Digest key_digest(std::string_view bytes);
std::string to_hex(const Digest& digest);

/// Binary frame payload: "PTFR1", u16 column count, columns (u16 name,
/// kind tag), u32 row count, row-major values. Real lists are a u32 count
/// followed by reals.
Bytes encode_frame(const Frame& frame);
Frame decode_frame(std::string_view bytes);

/// Append-only on-disk key-value log keyed by 32-byte digests.
///
/// The directory holds `log` (the "PTCACHE1" header followed by records of
/// digest, u32 value length, value bytes) and, while open for writing,
/// an exclusive advisory lock on `LOCK`. The index is rebuilt by scanning
/// the log on open; the last record for a digest wins and a truncated
/// trailing record is ignored (and cut off when opened for writing).
class KvLog {
 public:
  enum class Mode { read_only, read_write };

  static KvLog open(const std::filesystem::path& dir,
                    Mode mode = Mode::read_write);

  KvLog(KvLog&&) noexcept;
  KvLog& operator=(KvLog&&) noexcept;
  KvLog(const KvLog&) = delete;
  KvLog& operator=(const KvLog&) = delete;
  ~KvLog();

  std::optional<Bytes> get(const Digest& digest) const;
  bool contains(const Digest& digest) const;
  void put(const Digest& digest, std::string_view value);
  void flush();
  /// Flushes and releases the write handle and lock.
  void close();

  /// Number of distinct digests.
  std::size_t size() const { return index_.size(); }
  /// Bytes of the log file (header and records).
  std::uint64_t file_size() const { return end_; }
  bool writable() const { return mode_ == Mode::read_write && fd_lock_ >= 0; }
  const std::filesystem::path& dir() const { return dir_; }

  static constexpr std::string_view kHeader = "PTCACHE1";
  static constexpr const char* kLogFile = "log";
  static constexpr const char* kLockFile = "LOCK";

 private:
  KvLog() = default;

  struct DigestHash {
    std::size_t operator()(const Digest& d) const;
  };
  struct Location {
    std::uint64_t offset;
    std::uint32_t length;
  };

  std::filesystem::path dir_;
  Mode mode_ = Mode::read_only;
  int fd_lock_ = -1;
  mutable std::fstream file_;
  std::uint64_t end_ = 0;
  std::unordered_map<Digest, Location, DigestHash> index_;
};

/// True if some process (including this one) holds the write lock on a
/// cache directory.
bool is_locked_for_write(const std::filesystem::path& dir);

/// Exclusive advisory lock on `dir/LOCK`; -1 if already held elsewhere.
int try_lock_dir(const std::filesystem::path& dir);
void unlock_dir(int fd);

}  // namespace pipecache
