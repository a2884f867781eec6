#include "pipecache/caching.hpp"

#include <stdlib.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <mutex>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "pipecache/errors.hpp"
#include "pipecache/storage.hpp"

namespace pipecache {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// TempDir and meta

TempDir::TempDir(std::string_view prefix) {
  std::string pattern =
      (fs::temp_directory_path() / (std::string(prefix) + "-XXXXXX")).string();
  if (::mkdtemp(pattern.data()) == nullptr) {
    throw IoError("cannot create temporary directory " + pattern);
  }
  path_ = pattern;
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
  if (ec) {
    std::cerr << "pipecache: failed to remove temporary cache " << path_
              << ": " << ec.message() << "\n";
  }
}

namespace {

std::string join(const std::vector<std::string>& parts) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += ',';
    out += parts[i];
  }
  return out;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::size_t start = 0;
  while (true) {
    auto pos = s.find(',', start);
    out.push_back(s.substr(start, pos - start));
    if (pos == std::string::npos) return out;
    start = pos + 1;
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("cannot write " + path.string());
}

}  // namespace

CacheMeta CacheMeta::read(const fs::path& dir) {
  const auto path = dir / "meta";
  if (!fs::exists(path)) throw ConfigError("no cache meta at " + path.string());
  std::istringstream in(read_file(path));
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ": malformed line '" + line + "'");
    }
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  CacheMeta meta;
  if (kv["format_version"] != "1") {
    throw ConfigError(path.string() + ": unsupported format_version");
  }
  if (kv["kind"].empty()) throw ConfigError(path.string() + ": missing kind");
  meta.kind = kv["kind"];
  meta.key_columns = split_list(kv["key_columns"]);
  meta.value_columns = split_list(kv["value_columns"]);
  meta.label = kv["label"];
  return meta;
}

void CacheMeta::write(const fs::path& dir) const {
  std::ostringstream out;
  out << "format_version=" << format_version << "\n"
      << "kind=" << kind << "\n"
      << "key_columns=" << join(key_columns) << "\n"
      << "value_columns=" << join(value_columns) << "\n"
      << "label=" << label << "\n";
  write_file(dir / "meta", out.str());
}

namespace {

// Writes `expected` into a fresh directory or checks it against the stored
// meta.
void check_or_write_meta(const fs::path& dir, const CacheMeta& expected,
                         bool read_only) {
  if (!fs::exists(dir / "meta")) {
    if (read_only) {
      throw ConfigError("no cache at " + dir.string() + " (read-only open)");
    }
    expected.write(dir);
    return;
  }
  const auto stored = CacheMeta::read(dir);
  auto mismatch = [&](const char* field, const std::string& have,
                      const std::string& want) {
    throw ConfigError("cache " + dir.string() + ": " + field + " is '" +
                      have + "', expected '" + want + "'");
  };
  if (stored.kind != expected.kind) {
    mismatch("kind", stored.kind, expected.kind);
  }
  if (stored.key_columns != expected.key_columns) {
    mismatch("key_columns", join(stored.key_columns),
             join(expected.key_columns));
  }
  if (stored.value_columns != expected.value_columns) {
    mismatch("value_columns", join(stored.value_columns),
             join(expected.value_columns));
  }
  if (stored.label != expected.label) {
    mismatch("label", stored.label, expected.label);
  }
}

// Values inside the log carry a one-byte codec tag; 0 = raw.
Bytes pack_value(const Frame& frame) {
  Bytes out(1, '\0');
  out += encode_frame(frame);
  return out;
}

Frame unpack_value(std::string_view bytes) {
  if (bytes.empty()) throw FormatError("empty cache value");
  if (bytes[0] != '\0') {
    throw FormatError("unknown cache value codec " +
                      std::to_string(static_cast<unsigned char>(bytes[0])));
  }
  return decode_frame(bytes.substr(1));
}

// Canonical row encodings are never empty, so the digest of the empty
// string is free to hold the output schema.
const Digest& schema_digest() {
  static const Digest d = key_digest("");
  return d;
}

std::string describe_key(const Frame& frame, std::size_t row,
                         const std::vector<std::string>& keys) {
  std::string out;
  for (const auto& k : keys) {
    if (!out.empty()) out += ", ";
    out += k + "=";
    auto idx = frame.column_index(k);
    if (!idx) {
      out += "?";
      continue;
    }
    std::visit(
        [&](const auto& v) {
          using T = std::decay_t<decltype(v)>;
          if constexpr (std::is_same_v<T, std::string>) {
            out += "'" + v + "'";
          } else if constexpr (std::is_same_v<T, double>) {
            out += format_real(v);
          } else if constexpr (std::is_same_v<T, std::int64_t>) {
            out += std::to_string(v);
          } else {
            out += "[...]";
          }
        },
        frame.at(row, *idx));
  }
  return out;
}

std::vector<std::string> sorted_column_names(const Frame& f) {
  std::vector<std::string> names;
  for (const auto& c : f.columns()) names.push_back(c.name);
  std::sort(names.begin(), names.end());
  return names;
}

// Builds a frame from rows that must all share `columns`.
Frame stack(const std::vector<Column>& columns, std::vector<Frame>& parts) {
  std::vector<Row> rows;
  for (auto& p : parts) {
    if (p.columns() != columns) {
      throw PreconditionError("cached result frames have differing schemas");
    }
    rows.insert(rows.end(), p.rows().begin(), p.rows().end());
  }
  return Frame(columns, std::move(rows));
}

}  // namespace

// ---------------------------------------------------------------------------
// Key-value backed caches

namespace detail {

struct KvCacheCore {
  enum class Kind { key_value, scorer, retriever };

  Kind kind;
  std::unique_ptr<TempDir> temp;
  fs::path dir;
  std::optional<Transformer> inner;
  std::vector<std::string> key_columns;
  std::vector<std::string> value_columns;
  std::string label;
  bool read_only = false;
  std::optional<KvLog> log;
  std::mutex mu;

  static const char* kind_name(Kind k) {
    switch (k) {
      case Kind::key_value:
        return "key_value";
      case Kind::scorer:
        return "scorer";
      case Kind::retriever:
        return "retriever";
    }
    return "?";
  }

  KvCacheCore(Kind k, CacheOptions options, std::vector<std::string> keys,
              std::vector<std::string> values)
      : kind(k),
        inner(std::move(options.inner)),
        key_columns(std::move(keys)),
        value_columns(std::move(values)),
        label(std::move(options.label)),
        read_only(options.read_only) {
    if (options.path) {
      dir = *options.path;
    } else {
      if (read_only) throw PreconditionError("a temporary cache cannot be read-only");
      temp = std::make_unique<TempDir>("pipecache");
      dir = temp->path();
    }
    if (!read_only) fs::create_directories(dir);
    check_or_write_meta(dir, {1, kind_name(kind), key_columns, value_columns, label},
                        read_only);
    log = KvLog::open(dir, read_only ? KvLog::Mode::read_only
                                     : KvLog::Mode::read_write);
  }

  KvLog& open_log() {
    if (!log) throw IoError("cache " + dir.string() + " is closed");
    return *log;
  }

  void store(const Digest& d, const Frame& value) {
    if (!read_only) open_log().put(d, pack_value(value));
  }

  void store_schema(const Frame& frame) {
    if (!read_only && !open_log().contains(schema_digest())) {
      store(schema_digest(), frame.empty_like());
    }
  }

  std::optional<Frame> schema() {
    auto bytes = open_log().get(schema_digest());
    if (!bytes) return std::nullopt;
    return unpack_value(*bytes);
  }

  [[noreturn]] void miss(const Frame& input, std::size_t row,
                         const std::vector<std::string>& keys) const {
    throw CacheMissError("cache miss in " + dir.string() + " for key {" +
                         describe_key(input, row, keys) +
                         "} and no transformer to compute it");
  }

  std::size_t entries() {
    auto& l = open_log();
    return l.size() - (l.contains(schema_digest()) ? 1 : 0);
  }

  void close() {
    std::lock_guard lock(mu);
    if (log) {
      log->close();
      log.reset();
    }
  }

  Frame apply_key_value(const Frame& input);
  Frame apply_scorer(const Frame& input);
  Frame apply_retriever(const Frame& input);
};

Frame KvCacheCore::apply_key_value(const Frame& input) {
  std::lock_guard lock(mu);
  auto& log = open_log();
  const std::size_t n = input.num_rows();

  if (n == 0) {
    bool all_present = std::all_of(
        value_columns.begin(), value_columns.end(),
        [&](const std::string& v) { return input.has_column(v); });
    if (all_present) return input;
    if (auto s = schema()) {
      Frame out = input;
      for (const auto& col : s->columns()) out = out.with_column(col, {});
      return out;
    }
    if (!inner) return input;
    Frame computed = pipecache::apply(*inner, input);
    std::vector<Column> value_schema;
    for (const auto& v : value_columns) {
      if (auto i = computed.column_index(v)) value_schema.push_back(computed.columns()[*i]);
    }
    if (value_schema.size() == value_columns.size()) store_schema(Frame(value_schema));
    return computed;
  }

  std::vector<Digest> digests(n);
  std::vector<Row> values(n);
  std::vector<std::optional<ValueKind>> kinds(value_columns.size());
  std::vector<std::size_t> misses;
  for (std::size_t r = 0; r < n; ++r) {
    digests[r] = key_digest(canonical_encode_row(input, r, key_columns));
    auto hit = log.get(digests[r]);
    if (!hit) {
      misses.push_back(r);
      continue;
    }
    Frame stored = unpack_value(*hit);
    if (stored.num_rows() != 1) throw FormatError("cached value is not one row");
    for (std::size_t v = 0; v < value_columns.size(); ++v) {
      auto idx = stored.column_index(value_columns[v]);
      if (!idx) throw FormatError("cached value lacks '" + value_columns[v] + "'");
      values[r].push_back(stored.at(0, *idx));
      kinds[v] = stored.columns()[*idx].kind;
    }
  }

  if (!misses.empty()) {
    if (!inner) miss(input, misses.front(), key_columns);
    const Frame computed = pipecache::apply(*inner, input.select_rows(misses));
    if (computed.num_rows() != misses.size()) {
      throw PreconditionError(
          "key-value cache: inner transformer returned " +
          std::to_string(computed.num_rows()) + " rows for " +
          std::to_string(misses.size()));
    }
    std::vector<std::size_t> idx(value_columns.size());
    std::vector<Column> value_schema;
    for (std::size_t v = 0; v < value_columns.size(); ++v) {
      auto i = computed.column_index(value_columns[v]);
      if (!i) {
        throw PreconditionError("key-value cache: inner output lacks '" +
                                value_columns[v] + "'");
      }
      idx[v] = *i;
      kinds[v] = computed.columns()[*i].kind;
      value_schema.push_back(computed.columns()[*i]);
    }
    for (std::size_t m = 0; m < misses.size(); ++m) {
      Row row;
      for (auto i : idx) row.push_back(computed.at(m, i));
      values[misses[m]] = row;
      store(digests[misses[m]], Frame(value_schema, {std::move(row)}));
    }
    store_schema(Frame(value_schema));
  }

  Frame out = input;
  for (std::size_t v = 0; v < value_columns.size(); ++v) {
    std::vector<Value> column;
    column.reserve(n);
    for (std::size_t r = 0; r < n; ++r) column.push_back(std::move(values[r][v]));
    out = out.with_column({value_columns[v], *kinds[v]}, std::move(column));
  }
  return out;
}

Frame KvCacheCore::apply_scorer(const Frame& input) {
  std::lock_guard lock(mu);
  auto& log = open_log();
  input.require_column("qid", ValueKind::text);
  input.require_column("docno", ValueKind::text);
  const std::size_t n = input.num_rows();

  std::vector<Digest> digests(n);
  std::vector<double> scores(n, 0.0);
  std::vector<std::size_t> misses;
  for (std::size_t r = 0; r < n; ++r) {
    digests[r] = key_digest(canonical_encode_row(input, r, key_columns));
    auto hit = log.get(digests[r]);
    if (!hit) {
      misses.push_back(r);
      continue;
    }
    Frame stored = unpack_value(*hit);
    scores[r] = stored.real(0, stored.require_column("score", ValueKind::real));
  }

  if (!misses.empty()) {
    if (!inner) miss(input, misses.front(), key_columns);
    const Frame computed = pipecache::apply(*inner, input.select_rows(misses));
    const auto score_col = computed.require_column("score", ValueKind::real);
    std::unordered_map<std::string, double> by_key;
    for (std::size_t r = 0; r < computed.num_rows(); ++r) {
      by_key.try_emplace(canonical_encode_row(computed, r, key_columns),
                         computed.real(r, score_col));
    }
    const std::vector<Column> value_schema = {{"score", ValueKind::real}};
    std::unordered_set<std::size_t> stored_rows;
    for (auto r : misses) {
      auto it = by_key.find(canonical_encode_row(input, r, key_columns));
      if (it == by_key.end()) {
        throw PreconditionError("scorer cache: inner output has no score for {" +
                                describe_key(input, r, key_columns) + "}");
      }
      scores[r] = it->second;
      if (!read_only && !log.contains(digests[r])) {
        store(digests[r], Frame(value_schema, {{it->second}}));
      }
    }
  }

  std::vector<Value> column(scores.begin(), scores.end());
  return assign_ranks(
      input.with_column({"score", ValueKind::real}, std::move(column)));
}

Frame KvCacheCore::apply_retriever(const Frame& input) {
  std::lock_guard lock(mu);
  auto& log = open_log();
  const auto keys =
      key_columns.empty() ? sorted_column_names(input) : key_columns;

  if (input.num_rows() == 0) {
    if (auto s = schema()) return *s;
    if (!inner) return input;
    Frame computed = pipecache::apply(*inner, input);
    store_schema(computed);
    return computed;
  }

  std::vector<Frame> parts;
  parts.reserve(input.num_rows());
  for (std::size_t r = 0; r < input.num_rows(); ++r) {
    const auto d = key_digest(canonical_encode_row(input, r, keys));
    if (auto hit = log.get(d)) {
      parts.push_back(unpack_value(*hit));
      continue;
    }
    if (!inner) miss(input, r, keys);
    const std::size_t one[] = {r};
    parts.push_back(pipecache::apply(*inner, input.select_rows(one)));
    store(d, parts.back());
    store_schema(parts.back());
  }
  const auto columns = parts.front().columns();
  return stack(columns, parts);
}

}  // namespace detail

namespace {

class KvCacheLeaf final : public LeafBehavior {
 public:
  explicit KvCacheLeaf(std::shared_ptr<detail::KvCacheCore> core)
      : core_(std::move(core)) {}

  Frame apply(const Frame& input) const override {
    using K = detail::KvCacheCore::Kind;
    switch (core_->kind) {
      case K::key_value:
        return core_->apply_key_value(input);
      case K::scorer:
        return core_->apply_scorer(input);
      case K::retriever:
        return core_->apply_retriever(input);
    }
    throw PreconditionError("unknown cache kind");
  }

 private:
  std::shared_ptr<detail::KvCacheCore> core_;
};

Transformer kv_transformer(const std::shared_ptr<detail::KvCacheCore>& core,
                           const char* kind) {
  return Transformer::leaf(
      kind, {{"path", core->dir.string()}, {"label", core->label}},
      std::make_shared<KvCacheLeaf>(core));
}

}  // namespace

KeyValueCache::KeyValueCache(CacheOptions options,
                             std::vector<std::string> key_columns,
                             std::vector<std::string> value_columns) {
  if (key_columns.empty()) throw PreconditionError("key columns required");
  if (value_columns.empty()) throw PreconditionError("value columns required");
  core_ = std::make_shared<detail::KvCacheCore>(
      detail::KvCacheCore::Kind::key_value, std::move(options),
      std::move(key_columns), std::move(value_columns));
}

Frame KeyValueCache::apply(const Frame& input) const {
  return core_->apply_key_value(input);
}
Transformer KeyValueCache::transformer() const {
  return kv_transformer(core_, "kv_cache");
}
const fs::path& KeyValueCache::path() const { return core_->dir; }
std::size_t KeyValueCache::size() const { return core_->entries(); }
void KeyValueCache::close() { core_->close(); }

ScorerCache::ScorerCache(CacheOptions options,
                         std::vector<std::string> key_columns) {
  if (key_columns.empty()) throw PreconditionError("key columns required");
  core_ = std::make_shared<detail::KvCacheCore>(
      detail::KvCacheCore::Kind::scorer, std::move(options),
      std::move(key_columns), std::vector<std::string>{"score"});
}

Frame ScorerCache::apply(const Frame& input) const {
  return core_->apply_scorer(input);
}
Transformer ScorerCache::transformer() const {
  return kv_transformer(core_, "scorer_cache");
}
const fs::path& ScorerCache::path() const { return core_->dir; }
std::size_t ScorerCache::size() const { return core_->entries(); }
void ScorerCache::close() { core_->close(); }

RetrieverCache::RetrieverCache(CacheOptions options,
                               std::vector<std::string> key_columns) {
  core_ = std::make_shared<detail::KvCacheCore>(
      detail::KvCacheCore::Kind::retriever, std::move(options),
      std::move(key_columns), std::vector<std::string>{});
}

Frame RetrieverCache::apply(const Frame& input) const {
  return core_->apply_retriever(input);
}
Transformer RetrieverCache::transformer() const {
  return kv_transformer(core_, "retriever_cache");
}
const fs::path& RetrieverCache::path() const { return core_->dir; }
std::size_t RetrieverCache::size() const { return core_->entries(); }
void RetrieverCache::close() { core_->close(); }

// ---------------------------------------------------------------------------
// Dense scorer cache

namespace detail {

struct DenseCore {
  std::unique_ptr<TempDir> temp;
  fs::path dir;
  std::optional<Transformer> inner;
  std::vector<std::string> query_keys;
  std::string label;
  bool read_only = false;
  std::vector<std::string> docnos;
  std::unordered_map<std::string, std::size_t> ordinal;
  int lock_fd = -1;
  bool closed = false;
  std::mutex mu;

  ~DenseCore() { unlock_dir(lock_fd); }

  fs::path score_file(const std::string& hex) const {
    return dir / (hex + ".f64");
  }

  std::vector<double> load_scores(const std::string& hex) const {
    std::vector<double> scores(docnos.size(),
                               std::numeric_limits<double>::quiet_NaN());
    const auto path = score_file(hex);
    if (!fs::exists(path)) return scores;
    const auto bytes = read_file(path);
    if (bytes.size() != docnos.size() * 8) {
      throw FormatError(path.string() + ": size does not match corpus");
    }
    ByteReader r(bytes);
    for (auto& s : scores) s = r.f64();
    return scores;
  }

  void save_scores(const std::string& hex,
                   const std::vector<double>& scores) const {
    ByteWriter w;
    for (double s : scores) w.f64(s);
    write_file(score_file(hex), w.bytes());
  }

  Frame apply(const Frame& input);
};

Frame DenseCore::apply(const Frame& input) {
  std::lock_guard lock(mu);
  if (closed) throw IoError("cache " + dir.string() + " is closed");
  input.require_column("qid", ValueKind::text);
  const auto docno_col = input.require_column("docno", ValueKind::text);
  const std::size_t n = input.num_rows();

  std::vector<std::string> hexes(n);
  std::vector<std::size_t> ords(n);
  std::map<std::string, std::vector<double>> loaded;
  std::vector<double> scores(n, 0.0);
  std::vector<std::size_t> misses;
  for (std::size_t r = 0; r < n; ++r) {
    const auto& docno = input.text(r, docno_col);
    auto it = ordinal.find(docno);
    if (it == ordinal.end()) {
      throw PreconditionError("dense scorer cache: docno '" + docno +
                              "' is not in the corpus snapshot");
    }
    ords[r] = it->second;
    hexes[r] = to_hex(key_digest(canonical_encode_row(input, r, query_keys)));
    auto [entry, inserted] = loaded.try_emplace(hexes[r]);
    if (inserted) entry->second = load_scores(hexes[r]);
    const double s = entry->second[ords[r]];
    if (std::isnan(s)) {
      misses.push_back(r);
    } else {
      scores[r] = s;
    }
  }

  if (!misses.empty()) {
    if (!inner) {
      auto keys = query_keys;
      keys.push_back("docno");
      throw CacheMissError("cache miss in " + dir.string() + " for key {" +
                           describe_key(input, misses.front(), keys) +
                           "} and no transformer to compute it");
    }
    const Frame computed = pipecache::apply(*inner, input.select_rows(misses));
    const auto score_col = computed.require_column("score", ValueKind::real);
    const auto out_docno = computed.require_column("docno", ValueKind::text);
    std::unordered_map<std::string, double> by_key;
    for (std::size_t r = 0; r < computed.num_rows(); ++r) {
      const double s = computed.real(r, score_col);
      if (std::isnan(s)) {
        throw PreconditionError(
            "dense scorer cache: inner produced a NaN score, which is "
            "reserved for missing entries");
      }
      by_key.try_emplace(canonical_encode_row(computed, r, query_keys) +
                             '\0' + computed.text(r, out_docno),
                         s);
    }
    std::unordered_set<std::string> dirty;
    for (auto r : misses) {
      auto it = by_key.find(canonical_encode_row(input, r, query_keys) + '\0' +
                            input.text(r, docno_col));
      if (it == by_key.end()) {
        throw PreconditionError("dense scorer cache: inner output has no score "
                                "for docno '" + input.text(r, docno_col) + "'");
      }
      scores[r] = it->second;
      loaded[hexes[r]][ords[r]] = it->second;
      dirty.insert(hexes[r]);
    }
    if (!read_only) {
      for (const auto& hex : dirty) save_scores(hex, loaded[hex]);
    }
  }

  std::vector<Value> column(scores.begin(), scores.end());
  return assign_ranks(
      input.with_column({"score", ValueKind::real}, std::move(column)));
}

}  // namespace detail

namespace {

std::vector<std::string> read_docnos(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::vector<std::string> docnos;
  std::string line;
  while (std::getline(in, line)) docnos.push_back(line);
  return docnos;
}

std::size_t count_dense_entries(const fs::path& dir) {
  std::size_t count = 0;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() != ".f64") continue;
    const auto bytes = read_file(entry.path());
    ByteReader r(bytes);
    while (r.remaining() >= 8) count += !std::isnan(r.f64());
  }
  return count;
}

class DenseLeaf final : public LeafBehavior {
 public:
  explicit DenseLeaf(std::shared_ptr<detail::DenseCore> core)
      : core_(std::move(core)) {}
  Frame apply(const Frame& input) const override { return core_->apply(input); }

 private:
  std::shared_ptr<detail::DenseCore> core_;
};

}  // namespace

DenseScorerCache::DenseScorerCache(CacheOptions options,
                                   std::vector<std::string> corpus_docnos,
                                   std::vector<std::string> query_key_columns) {
  if (query_key_columns.empty()) {
    throw PreconditionError("query key columns required");
  }
  auto core = std::make_shared<detail::DenseCore>();
  core->inner = std::move(options.inner);
  core->query_keys = std::move(query_key_columns);
  core->label = std::move(options.label);
  core->read_only = options.read_only;
  if (options.path) {
    core->dir = *options.path;
  } else {
    if (core->read_only) {
      throw PreconditionError("a temporary cache cannot be read-only");
    }
    core->temp = std::make_unique<TempDir>("pipecache");
    core->dir = core->temp->path();
  }
  if (!core->read_only) {
    fs::create_directories(core->dir);
    core->lock_fd = try_lock_dir(core->dir);
    if (core->lock_fd < 0) {
      throw IoError("cache " + core->dir.string() +
                    " is locked by another writer");
    }
  }
  auto keys = core->query_keys;
  keys.push_back("docno");
  check_or_write_meta(core->dir, {1, "dense_scorer", keys, {"score"}, core->label},
                      core->read_only);

  const auto docnos_path = core->dir / "docnos";
  if (fs::exists(docnos_path)) {
    core->docnos = read_docnos(docnos_path);
    if (!corpus_docnos.empty() && corpus_docnos != core->docnos) {
      throw ConfigError("dense scorer cache " + core->dir.string() +
                        ": corpus docnos differ from the stored snapshot");
    }
  } else {
    if (core->read_only) {
      throw ConfigError("dense scorer cache has no docnos file");
    }
    std::string text;
    for (const auto& d : corpus_docnos) {
      if (d.find('\n') != std::string::npos) {
        throw PreconditionError("docno contains a newline");
      }
      text += d + "\n";
    }
    write_file(docnos_path, text);
    core->docnos = std::move(corpus_docnos);
  }
  for (std::size_t i = 0; i < core->docnos.size(); ++i) {
    if (!core->ordinal.try_emplace(core->docnos[i], i).second) {
      throw PreconditionError("duplicate docno '" + core->docnos[i] +
                              "' in dense cache snapshot");
    }
  }
  core_ = std::move(core);
}

Frame DenseScorerCache::apply(const Frame& input) const {
  return core_->apply(input);
}

Transformer DenseScorerCache::transformer() const {
  return Transformer::leaf(
      "dense_scorer_cache",
      {{"path", core_->dir.string()}, {"label", core_->label}},
      std::make_shared<DenseLeaf>(core_));
}

const fs::path& DenseScorerCache::path() const { return core_->dir; }

std::size_t DenseScorerCache::size() const {
  std::lock_guard lock(core_->mu);
  return count_dense_entries(core_->dir);
}

void DenseScorerCache::close() {
  std::lock_guard lock(core_->mu);
  core_->closed = true;
  unlock_dir(std::exchange(core_->lock_fd, -1));
}

// ---------------------------------------------------------------------------
// Indexer cache

namespace detail {

struct IndexerCore {
  std::unique_ptr<TempDir> temp;
  fs::path dir;
  mutable std::mutex mu;
  mutable std::optional<std::vector<std::uint64_t>> offsets;  // record starts

  fs::path records() const { return dir / "records"; }

  const std::vector<std::uint64_t>& load_offsets() const {
    if (offsets) return *offsets;
    std::vector<std::uint64_t> out;
    if (fs::exists(records())) {
      std::ifstream in(records(), std::ios::binary);
      const std::uint64_t size = fs::file_size(records());
      std::uint64_t pos = 0;
      char len[4];
      while (pos < size) {
        in.seekg(static_cast<std::streamoff>(pos));
        if (size - pos < 4 || !in.read(len, 4)) {
          throw FormatError(records().string() + ": truncated record header");
        }
        ByteReader r(std::string_view(len, 4));
        const auto n = r.u32();
        if (size - pos - 4 < n) {
          throw FormatError(records().string() + ": truncated record");
        }
        out.push_back(pos);
        pos += 4 + n;
      }
    }
    offsets = std::move(out);
    return *offsets;
  }

  Frame read_record(std::ifstream& in, std::uint64_t offset) const {
    in.seekg(static_cast<std::streamoff>(offset));
    char len[4];
    if (!in.read(len, 4)) throw FormatError("truncated record");
    ByteReader r(std::string_view(len, 4));
    std::string bytes(r.u32(), '\0');
    if (!in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()))) {
      throw FormatError("truncated record");
    }
    return decode_frame(bytes);
  }
};

}  // namespace detail

IndexerCache::IndexerCache(std::optional<fs::path> path)
    : core_(std::make_shared<detail::IndexerCore>()) {
  if (path) {
    core_->dir = *path;
  } else {
    core_->temp = std::make_unique<TempDir>("pipecache");
    core_->dir = core_->temp->path();
  }
}

std::size_t IndexerCache::index(const Frame& rows) {
  std::lock_guard lock(core_->mu);
  const auto& dir = core_->dir;
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    throw PreconditionError("indexer cache " + dir.string() +
                            " is not empty; it cannot be appended to");
  }
  fs::create_directories(dir);
  const int fd = try_lock_dir(dir);
  if (fd < 0) throw IoError("cache " + dir.string() + " is locked");
  struct Unlock {
    int fd;
    ~Unlock() { unlock_dir(fd); }
  } unlock{fd};

  std::vector<std::string> names;
  for (const auto& c : rows.columns()) names.push_back(c.name);
  CacheMeta{1, "indexer", {}, names, ""}.write(dir);

  std::ofstream out(core_->records(), std::ios::binary);
  std::vector<std::uint64_t> offsets;
  std::uint64_t pos = 0;
  for (std::size_t r = 0; r < rows.num_rows(); ++r) {
    const std::size_t one[] = {r};
    ByteWriter w;
    w.long_string(encode_frame(rows.select_rows(one)));
    out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
    offsets.push_back(pos);
    pos += w.bytes().size();
  }
  if (!out) throw IoError("write failed: " + core_->records().string());
  out.close();

  if (auto docno = rows.column_index("docno");
      docno && rows.columns()[*docno].kind == ValueKind::text) {
    std::string text;
    for (std::size_t r = 0; r < rows.num_rows(); ++r) {
      const auto& d = rows.text(r, *docno);
      if (d.find('\n') != std::string::npos) {
        throw PreconditionError("docno contains a newline");
      }
      text += d + "\n";
    }
    write_file(dir / "docnos", text);
  }
  core_->offsets = std::move(offsets);
  return rows.num_rows();
}

std::size_t IndexerCache::index(const Transformer& producer,
                                const Frame& input) {
  return index(pipecache::apply(producer, input));
}

std::size_t IndexerCache::size() const {
  std::lock_guard lock(core_->mu);
  return core_->load_offsets().size();
}

void IndexerCache::for_each(const std::function<void(const Frame&)>& fn) const {
  std::lock_guard lock(core_->mu);
  const auto& offsets = core_->load_offsets();
  std::ifstream in(core_->records(), std::ios::binary);
  for (auto off : offsets) fn(core_->read_record(in, off));
}

Frame IndexerCache::read_all() const {
  std::vector<Frame> parts;
  for_each([&](const Frame& f) { parts.push_back(f); });
  if (parts.empty()) {
    if (fs::exists(core_->dir / "meta")) {
      // Column kinds are unknown without a record; names alone are kept.
      return Frame();
    }
    return Frame();
  }
  const auto columns = parts.front().columns();
  return stack(columns, parts);
}

bool IndexerCache::has_docnos() const {
  return fs::exists(core_->dir / "docnos");
}

Frame IndexerCache::lookup(std::span<const std::string> docnos) const {
  std::lock_guard lock(core_->mu);
  const auto sidecar = core_->dir / "docnos";
  if (!fs::exists(sidecar)) {
    throw PreconditionError("indexer cache " + core_->dir.string() +
                            " has no docno sidecar");
  }
  const auto stored = read_docnos(sidecar);
  std::unordered_map<std::string, std::size_t> ordinal;
  for (std::size_t i = 0; i < stored.size(); ++i) ordinal.try_emplace(stored[i], i);
  const auto& offsets = core_->load_offsets();
  if (offsets.size() != stored.size()) {
    throw FormatError("indexer cache: docno sidecar does not match records");
  }
  std::ifstream in(core_->records(), std::ios::binary);
  std::vector<Frame> parts;
  for (const auto& d : docnos) {
    auto it = ordinal.find(d);
    if (it == ordinal.end()) {
      throw PreconditionError("indexer cache: unknown docno '" + d + "'");
    }
    parts.push_back(core_->read_record(in, offsets[it->second]));
  }
  if (parts.empty()) {
    if (offsets.empty()) return Frame();
    return core_->read_record(in, offsets.front()).empty_like();
  }
  const auto columns = parts.front().columns();
  return stack(columns, parts);
}

const fs::path& IndexerCache::path() const { return core_->dir; }

// ---------------------------------------------------------------------------
// Lazy

namespace {

class LazyLeaf final : public LeafBehavior {
 public:
  explicit LazyLeaf(std::function<Transformer()> factory)
      : factory_(std::move(factory)) {}

  Frame apply(const Frame& input) const override {
    return pipecache::apply(get(), input);
  }

 private:
  Transformer get() const {
    std::lock_guard lock(mu_);
    if (!built_) built_ = factory_();
    return *built_;
  }

  std::function<Transformer()> factory_;
  mutable std::mutex mu_;
  mutable std::optional<Transformer> built_;
};

}  // namespace

Transformer lazy(std::function<Transformer()> factory, std::string label) {
  return Transformer::leaf("lazy", {{"label", std::move(label)}},
                           std::make_shared<LazyLeaf>(std::move(factory)));
}

// ---------------------------------------------------------------------------
// Archives (ustar)

namespace {

constexpr std::size_t kBlock = 512;

void put_octal(char* field, std::size_t width, std::uint64_t value) {
  // width - 1 octal digits followed by NUL.
  std::string digits(width - 1, '0');
  for (std::size_t i = width - 1; i-- > 0 && value;) {
    digits[i] = static_cast<char>('0' + (value & 7));
    value >>= 3;
  }
  if (value) throw PreconditionError("value too large for tar header");
  std::memcpy(field, digits.data(), width - 1);
  field[width - 1] = '\0';
}

std::uint64_t get_octal(const char* field, std::size_t width) {
  std::uint64_t v = 0;
  std::size_t i = 0;
  while (i < width && field[i] == ' ') ++i;
  for (; i < width && field[i] >= '0' && field[i] <= '7'; ++i) {
    v = v * 8 + static_cast<std::uint64_t>(field[i] - '0');
  }
  for (; i < width; ++i) {
    if (field[i] != '\0' && field[i] != ' ') {
      throw FormatError("corrupt archive: bad octal field");
    }
  }
  return v;
}

std::uint32_t header_checksum(const char* block) {
  std::uint32_t sum = 0;
  for (std::size_t i = 0; i < kBlock; ++i) {
    sum += (i >= 148 && i < 156) ? ' ' : static_cast<unsigned char>(block[i]);
  }
  return sum;
}

std::string make_header(const std::string& name, std::uint64_t size,
                        char type) {
  std::string block(kBlock, '\0');
  std::string prefix, base = name;
  if (name.size() > 100) {
    auto cut = name.rfind('/', 155);
    if (cut == std::string::npos || name.size() - cut - 1 > 100) {
      throw PreconditionError("path too long for ustar: " + name);
    }
    prefix = name.substr(0, cut);
    base = name.substr(cut + 1);
  }
  std::memcpy(&block[0], base.data(), base.size());
  put_octal(&block[100], 8, type == '5' ? 0755 : 0644);
  put_octal(&block[108], 8, 0);
  put_octal(&block[116], 8, 0);
  put_octal(&block[124], 12, size);
  put_octal(&block[136], 12, 0);
  block[156] = type;
  std::memcpy(&block[257], "ustar", 6);
  std::memcpy(&block[263], "00", 2);
  std::memcpy(&block[345], prefix.data(), prefix.size());
  char sum[8];
  put_octal(sum, 7, header_checksum(block.data()));
  std::memcpy(&block[148], sum, 7);
  block[155] = ' ';
  return block;
}

bool safe_relative(const fs::path& p) {
  if (p.empty() || p.is_absolute()) return false;
  for (const auto& part : p) {
    if (part == "..") return false;
  }
  return true;
}

}  // namespace

void pack_cache(const fs::path& cache_dir, const fs::path& archive) {
  if (!fs::is_directory(cache_dir)) {
    throw IoError("no cache directory at " + cache_dir.string());
  }
  if (is_locked_for_write(cache_dir)) {
    throw PreconditionError("cache " + cache_dir.string() +
                            " is open for writing; close it before packing");
  }
  std::vector<fs::path> entries;
  for (const auto& e : fs::recursive_directory_iterator(cache_dir)) {
    if (e.is_regular_file() || e.is_directory()) {
      entries.push_back(fs::relative(e.path(), cache_dir));
    }
  }
  std::sort(entries.begin(), entries.end());

  std::ofstream out(archive, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + archive.string());
  for (const auto& rel : entries) {
    const auto full = cache_dir / rel;
    if (fs::is_directory(full)) {
      out << make_header(rel.generic_string() + "/", 0, '5');
      continue;
    }
    const auto bytes = read_file(full);
    out << make_header(rel.generic_string(), bytes.size(), '0');
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    const std::size_t pad = (kBlock - bytes.size() % kBlock) % kBlock;
    out << std::string(pad, '\0');
  }
  out << std::string(2 * kBlock, '\0');
  if (!out) throw IoError("write failed: " + archive.string());
}

void unpack_cache(const fs::path& archive, const fs::path& dest) {
  if (fs::exists(dest) && !fs::is_empty(dest)) {
    throw PreconditionError("unpack destination " + dest.string() +
                            " is not empty");
  }
  const auto data = read_file(archive);
  fs::create_directories(dest);
  std::size_t pos = 0;
  bool ended = false;
  while (pos + kBlock <= data.size()) {
    const char* block = data.data() + pos;
    if (std::all_of(block, block + kBlock, [](char c) { return c == '\0'; })) {
      ended = true;
      break;
    }
    if (std::memcmp(block + 257, "ustar", 5) != 0) {
      throw FormatError("corrupt archive: missing ustar magic");
    }
    if (get_octal(block + 148, 8) != header_checksum(block)) {
      throw FormatError("corrupt archive: header checksum mismatch");
    }
    std::string name(block, strnlen(block, 100));
    std::string prefix(block + 345, strnlen(block + 345, 155));
    if (!prefix.empty()) name = prefix + "/" + name;
    const auto size = get_octal(block + 124, 12);
    const char type = block[156];
    pos += kBlock;
    const fs::path rel(name);
    if (!safe_relative(rel)) {
      throw FormatError("corrupt archive: unsafe path '" + name + "'");
    }
    if (type == '5') {
      fs::create_directories(dest / rel);
      continue;
    }
    if (type != '0' && type != '\0') {
      throw FormatError("corrupt archive: unsupported entry type");
    }
    if (data.size() - pos < size) {
      throw FormatError("corrupt archive: truncated entry '" + name + "'");
    }
    fs::create_directories((dest / rel).parent_path());
    write_file(dest / rel, std::string_view(data).substr(pos, size));
    pos += (size + kBlock - 1) / kBlock * kBlock;
  }
  if (!ended) throw FormatError("corrupt archive: missing end-of-archive marker");
}

// ---------------------------------------------------------------------------
// Maintenance

CacheStats cache_stats(const fs::path& cache_dir) {
  CacheStats stats;
  stats.meta = CacheMeta::read(cache_dir);
  for (const auto& e : fs::recursive_directory_iterator(cache_dir)) {
    if (e.is_regular_file()) stats.bytes += e.file_size();
  }
  const auto& kind = stats.meta.kind;
  if (kind == "key_value" || kind == "scorer" || kind == "retriever") {
    if (fs::exists(cache_dir / KvLog::kLogFile)) {
      auto log = KvLog::open(cache_dir, KvLog::Mode::read_only);
      stats.entries = log.size() - (log.contains(schema_digest()) ? 1 : 0);
    }
  } else if (kind == "dense_scorer") {
    stats.entries = count_dense_entries(cache_dir);
  } else if (kind == "indexer") {
    stats.entries = IndexerCache(cache_dir).size();
  } else {
    throw ConfigError("unknown cache kind '" + kind + "'");
  }
  return stats;
}

void clear_cache(const fs::path& cache_dir) {
  const auto meta = CacheMeta::read(cache_dir);
  if (is_locked_for_write(cache_dir)) {
    throw PreconditionError("cache " + cache_dir.string() +
                            " is open for writing");
  }
  for (const auto& e : fs::directory_iterator(cache_dir)) {
    const auto name = e.path().filename().string();
    if (name == "meta" || name == KvLog::kLockFile) continue;
    if (meta.kind == "dense_scorer" && name == "docnos") continue;
    fs::remove_all(e.path());
  }
}

}  // namespace pipecache
