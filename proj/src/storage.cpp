#include "pipecache/storage.hpp"

#include <fcntl.h>
#include <openssl/sha.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <bit>
#include <cstring>

#include "pipecache/errors.hpp"

namespace pipecache {

namespace fs = std::filesystem;

void ByteWriter::u16(std::uint16_t v) {
  for (int i = 0; i < 2; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::short_string(std::string_view s) {
  if (s.size() > 0xffff) throw PreconditionError("name longer than 65535");
  u16(static_cast<std::uint16_t>(s.size()));
  raw(s);
}

void ByteWriter::long_string(std::string_view s) {
  if (s.size() > 0xffffffffu) throw PreconditionError("string too long");
  u32(static_cast<std::uint32_t>(s.size()));
  raw(s);
}

std::string_view ByteReader::raw(std::size_t n) {
  if (remaining() < n) {
    throw FormatError("truncated input: need " + std::to_string(n) +
                      " bytes, have " + std::to_string(remaining()));
  }
  auto out = in_.substr(pos_, n);
  pos_ += n;
  return out;
}

std::uint8_t ByteReader::u8() {
  return static_cast<std::uint8_t>(raw(1)[0]);
}

std::uint16_t ByteReader::u16() {
  auto b = raw(2);
  return static_cast<std::uint16_t>(static_cast<std::uint8_t>(b[0]) |
                                    static_cast<std::uint8_t>(b[1]) << 8);
}

std::uint32_t ByteReader::u32() {
  auto b = raw(4);
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = v << 8 | static_cast<std::uint8_t>(b[i]);
  return v;
}

std::uint64_t ByteReader::u64() {
  auto b = raw(8);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = v << 8 | static_cast<std::uint8_t>(b[i]);
  return v;
}

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::string ByteReader::short_string() { return std::string(raw(u16())); }

std::string ByteReader::long_string() { return std::string(raw(u32())); }

namespace {

void write_value(ByteWriter& w, const Value& value) {
  std::visit(
      [&](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, std::string>) {
          w.long_string(v);
        } else if constexpr (std::is_same_v<T, double>) {
          w.f64(v);
        } else if constexpr (std::is_same_v<T, std::int64_t>) {
          w.u64(static_cast<std::uint64_t>(v));
        } else {
          w.u32(static_cast<std::uint32_t>(v.size()));
          for (double x : v) w.f64(x);
        }
      },
      value);
}

Value read_value(ByteReader& r, ValueKind kind) {
  switch (kind) {
    case ValueKind::text:
      return r.long_string();
    case ValueKind::real:
      return r.f64();
    case ValueKind::integer:
      return static_cast<std::int64_t>(r.u64());
    case ValueKind::real_list: {
      const auto n = r.u32();
      if (r.remaining() / 8 < n) throw FormatError("truncated real list");
      RealList list(n);
      for (auto& x : list) x = r.f64();
      return list;
    }
  }
  throw FormatError("bad kind tag");
}

constexpr std::string_view kFrameMagic = "PTFR1";

}  // namespace

Bytes canonical_encode_row(const Frame& frame, std::size_t row,
                           std::span<const std::string> key_columns) {
  std::vector<std::string> names(key_columns.begin(), key_columns.end());
  std::sort(names.begin(), names.end());
  names.erase(std::unique(names.begin(), names.end()), names.end());
  if (names.size() > 0xffff) throw PreconditionError("too many key columns");

  ByteWriter w;
  w.u16(static_cast<std::uint16_t>(names.size()));
  for (const auto& name : names) {
    auto idx = frame.column_index(name);
    if (!idx) {
      throw PreconditionError("key column '" + name + "' missing from input");
    }
    const auto kind = frame.columns()[*idx].kind;
    if (kind == ValueKind::real_list) {
      throw PreconditionError("key column '" + name +
                              "' is a real-list; keys must be scalar");
    }
    w.short_string(name);
    w.u8(static_cast<std::uint8_t>(kind));
    write_value(w, frame.at(row, *idx));
  }
  return std::move(w).bytes();
}

Digest key_digest(std::string_view bytes) {
  Digest d{};
  SHA256(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(),
         d.data());
  return d;
}

std::string to_hex(const Digest& digest) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string s;
  s.reserve(64);
  for (auto b : digest) {
    s += kHex[b >> 4];
    s += kHex[b & 15];
  }
  return s;
}

Bytes encode_frame(const Frame& frame) {
  ByteWriter w;
  w.raw(kFrameMagic);
  if (frame.num_columns() > 0xffff) throw PreconditionError("too many columns");
  if (frame.num_rows() > 0xffffffffu) throw PreconditionError("too many rows");
  w.u16(static_cast<std::uint16_t>(frame.num_columns()));
  for (const auto& col : frame.columns()) {
    w.short_string(col.name);
    w.u8(static_cast<std::uint8_t>(col.kind));
  }
  w.u32(static_cast<std::uint32_t>(frame.num_rows()));
  for (const auto& row : frame.rows()) {
    for (const auto& v : row) write_value(w, v);
  }
  return std::move(w).bytes();
}

Frame decode_frame(std::string_view bytes) {
  ByteReader r(bytes);
  if (r.remaining() < kFrameMagic.size() ||
      r.raw(kFrameMagic.size()) != kFrameMagic) {
    throw FormatError("bad frame magic");
  }
  std::vector<Column> columns(r.u16());
  for (auto& col : columns) {
    col.name = r.short_string();
    const auto tag = r.u8();
    if (tag > 3) throw FormatError("bad kind tag " + std::to_string(tag));
    col.kind = static_cast<ValueKind>(tag);
  }
  const auto nrows = r.u32();
  std::vector<Row> rows;
  rows.reserve(std::min<std::size_t>(nrows, r.remaining()));
  for (std::uint32_t i = 0; i < nrows; ++i) {
    Row row;
    row.reserve(columns.size());
    for (const auto& col : columns) row.push_back(read_value(r, col.kind));
    rows.push_back(std::move(row));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after frame");
  try {
    return Frame(std::move(columns), std::move(rows));
  } catch (const PreconditionError& e) {
    throw FormatError(std::string("invalid frame: ") + e.what());
  }
}

int try_lock_dir(const fs::path& dir) {
  const auto path = dir / KvLog::kLockFile;
  int fd = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  if (fd < 0) throw IoError("cannot open " + path.string());
  if (::flock(fd, LOCK_EX | LOCK_NB) != 0) {
    ::close(fd);
    return -1;
  }
  return fd;
}

void unlock_dir(int fd) {
  if (fd < 0) return;
  ::flock(fd, LOCK_UN);
  ::close(fd);
}

bool is_locked_for_write(const fs::path& dir) {
  if (!fs::exists(dir / KvLog::kLockFile)) return false;
  int fd = try_lock_dir(dir);
  if (fd < 0) return true;
  unlock_dir(fd);
  return false;
}

std::size_t KvLog::DigestHash::operator()(const Digest& d) const {
  std::size_t h;
  std::memcpy(&h, d.data(), sizeof(h));
  return h;
}

KvLog KvLog::open(const fs::path& dir, Mode mode) {
  KvLog log;
  log.dir_ = dir;
  log.mode_ = mode;
  const auto path = dir / kLogFile;

  if (mode == Mode::read_write) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    log.fd_lock_ = try_lock_dir(dir);
    if (log.fd_lock_ < 0) {
      throw IoError("cache " + dir.string() + " is locked by another writer");
    }
    if (!fs::exists(path)) {
      std::ofstream create(path, std::ios::binary);
      create.write(kHeader.data(), kHeader.size());
      if (!create) throw IoError("cannot create " + path.string());
    }
  } else if (!fs::exists(path)) {
    throw IoError("no cache log at " + path.string());
  }

  const auto open_mode = mode == Mode::read_write
                             ? std::ios::in | std::ios::out | std::ios::binary
                             : std::ios::in | std::ios::binary;
  log.file_.open(path, open_mode);
  if (!log.file_) throw IoError("cannot open " + path.string());

  const std::uint64_t size = fs::file_size(path);
  char header[8];
  if (size < kHeader.size() || !log.file_.read(header, 8) ||
      std::string_view(header, 8) != kHeader) {
    throw FormatError(path.string() + ": bad cache log header");
  }

  std::uint64_t pos = kHeader.size();
  char rec[36];
  while (size - pos >= sizeof(rec)) {
    log.file_.seekg(static_cast<std::streamoff>(pos));
    if (!log.file_.read(rec, sizeof(rec))) break;
    Digest d;
    std::memcpy(d.data(), rec, 32);
    ByteReader lr(std::string_view(rec + 32, 4));
    const auto len = lr.u32();
    if (size - pos - sizeof(rec) < len) break;
    log.index_[d] = {pos + sizeof(rec), len};
    pos += sizeof(rec) + len;
  }
  log.file_.clear();
  log.end_ = pos;
  if (pos != size && mode == Mode::read_write) {
    log.file_.close();
    fs::resize_file(path, pos);
    log.file_.open(path, open_mode);
    if (!log.file_) throw IoError("cannot reopen " + path.string());
  }
  return log;
}

KvLog::KvLog(KvLog&& other) noexcept
    : dir_(std::move(other.dir_)),
      mode_(other.mode_),
      fd_lock_(std::exchange(other.fd_lock_, -1)),
      file_(std::move(other.file_)),
      end_(other.end_),
      index_(std::move(other.index_)) {}

KvLog& KvLog::operator=(KvLog&& other) noexcept {
  if (this != &other) {
    close();
    dir_ = std::move(other.dir_);
    mode_ = other.mode_;
    fd_lock_ = std::exchange(other.fd_lock_, -1);
    file_ = std::move(other.file_);
    end_ = other.end_;
    index_ = std::move(other.index_);
  }
  return *this;
}

KvLog::~KvLog() { close(); }

void KvLog::close() {
  if (file_.is_open()) {
    file_.flush();
    file_.close();
  }
  unlock_dir(std::exchange(fd_lock_, -1));
}

bool KvLog::contains(const Digest& digest) const {
  return index_.count(digest) > 0;
}

std::optional<Bytes> KvLog::get(const Digest& digest) const {
  auto it = index_.find(digest);
  if (it == index_.end()) return std::nullopt;
  Bytes value(it->second.length, '\0');
  file_.seekg(static_cast<std::streamoff>(it->second.offset));
  if (!file_.read(value.data(), static_cast<std::streamsize>(value.size()))) {
    file_.clear();
    throw IoError("read failed in " + (dir_ / kLogFile).string());
  }
  return value;
}

void KvLog::put(const Digest& digest, std::string_view value) {
  if (!writable()) throw IoError("cache log is not open for writing");
  if (value.size() > 0xffffffffu) throw PreconditionError("value too large");
  ByteWriter w;
  w.raw(std::string_view(reinterpret_cast<const char*>(digest.data()), 32));
  w.u32(static_cast<std::uint32_t>(value.size()));
  file_.seekp(static_cast<std::streamoff>(end_));
  file_.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
  file_.write(value.data(), static_cast<std::streamsize>(value.size()));
  if (!file_) throw IoError("write failed in " + (dir_ / kLogFile).string());
  index_[digest] = {end_ + w.bytes().size(),
                    static_cast<std::uint32_t>(value.size())};
  end_ += w.bytes().size() + value.size();
}

void KvLog::flush() {
  if (file_.is_open()) file_.flush();
}

}  // namespace pipecache
