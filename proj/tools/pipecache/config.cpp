#include "config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "pipecache/errors.hpp"

namespace pipecache::app {

namespace fs = std::filesystem;

std::string_view setting_name(Setting s) {
  switch (s) {
    case Setting::plain:
      return "plain";
    case Setting::precompute:
      return "precompute";
    case Setting::cached:
      return "cached";
  }
  return "?";
}

namespace {

const std::set<std::string, std::less<>> kLeafNames = {"bm25", "mono", "duo",
                                                       "rewrite", "text"};
const std::set<std::string, std::less<>> kCacheKinds = {
    "key_value", "scorer", "dense_scorer", "retriever"};

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

bool is_identifier(std::string_view s) {
  if (s.empty()) return false;
  auto start = [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_';
  };
  if (!start(s[0])) return false;
  return std::all_of(s.begin(), s.end(), [&](char c) {
    return start(c) || (c >= '0' && c <= '9');
  });
}

struct Entry {
  std::string value;
  std::size_t line;
};

struct Section {
  std::string type;  // "corpus", "leaf", ...
  std::string name;  // for [leaf NAME] style sections
  std::size_t line;
  std::map<std::string, Entry> entries;
  std::set<std::string> used;
};

class Reader {
 public:
  explicit Reader(std::string source) : source_(std::move(source)) {}

  [[noreturn]] void fail(std::size_t line, const std::string& message) const {
    throw ConfigError(source_ + ":" + std::to_string(line) + ": " + message);
  }

  std::vector<Section> sections(std::string_view text) {
    std::vector<Section> out;
    std::istringstream in{std::string(text)};
    std::string raw;
    std::size_t line = 0;
    while (std::getline(in, raw)) {
      ++line;
      const auto s = trim(raw);
      if (s.empty() || s[0] == '#' || s[0] == ';') continue;
      if (s.front() == '[') {
        if (s.back() != ']') fail(line, "unterminated section header");
        const auto inner = trim(std::string_view(s).substr(1, s.size() - 2));
        Section sec;
        sec.line = line;
        const auto space = inner.find_first_of(" \t");
        sec.type = inner.substr(0, space);
        if (space != std::string::npos) sec.name = trim(inner.substr(space));
        out.push_back(std::move(sec));
        continue;
      }
      const auto eq = s.find('=');
      if (eq == std::string::npos) fail(line, "expected 'key = value'");
      if (out.empty()) fail(line, "key outside of any section");
      const auto key = trim(std::string_view(s).substr(0, eq));
      if (key.empty()) fail(line, "empty key");
      auto [it, inserted] = out.back().entries.try_emplace(
          key, Entry{trim(std::string_view(s).substr(eq + 1)), line});
      if (!inserted) fail(line, "duplicate key '" + key + "'");
    }
    return out;
  }

  const Entry* get(Section& sec, const std::string& key) const {
    auto it = sec.entries.find(key);
    if (it == sec.entries.end()) return nullptr;
    sec.used.insert(key);
    return &it->second;
  }

  std::string require(Section& sec, const std::string& key) const {
    auto* e = get(sec, key);
    if (!e) fail(sec.line, "section [" + header(sec) + "] needs '" + key + "'");
    if (e->value.empty()) fail(e->line, "'" + key + "' is empty");
    return e->value;
  }

  template <typename T>
  std::optional<T> number(Section& sec, const std::string& key) const {
    auto* e = get(sec, key);
    if (!e) return std::nullopt;
    T v{};
    auto [p, ec] = std::from_chars(e->value.data(),
                                   e->value.data() + e->value.size(), v);
    if (ec != std::errc() || p != e->value.data() + e->value.size()) {
      fail(e->line, "'" + key + "' is not a valid number: '" + e->value + "'");
    }
    return v;
  }

  std::optional<bool> boolean(Section& sec, const std::string& key) const {
    auto* e = get(sec, key);
    if (!e) return std::nullopt;
    if (e->value == "true" || e->value == "yes" || e->value == "on") return true;
    if (e->value == "false" || e->value == "no" || e->value == "off") return false;
    fail(e->line, "'" + key + "' must be true or false");
  }

  void check_all_used(const Section& sec) const {
    for (const auto& [key, entry] : sec.entries) {
      if (!sec.used.count(key)) {
        fail(entry.line, "unknown key '" + key + "' in [" + header(sec) + "]");
      }
    }
  }

  static std::string header(const Section& sec) {
    return sec.name.empty() ? sec.type : sec.type + " " + sec.name;
  }

 private:
  std::string source_;
};

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

}  // namespace

Config parse_config(std::string_view text, const fs::path& base_dir,
                    const fs::path& cache_root) {
  Config cfg;
  Reader reader(cfg.source_file.empty() ? "config" : cfg.source_file.string());
  auto sections = reader.sections(text);

  std::set<std::string> singletons;
  std::set<std::string> names;
  bool have_index = false;
  for (auto& sec : sections) {
    const bool named = sec.type == "leaf" || sec.type == "cache" ||
                       sec.type == "system";
    if (named) {
      if (!is_identifier(sec.name)) {
        reader.fail(sec.line, "[" + sec.type + "] needs a NAME identifier");
      }
    } else {
      if (!sec.name.empty()) {
        reader.fail(sec.line, "[" + sec.type + "] takes no name");
      }
      if (!singletons.insert(sec.type).second) {
        reader.fail(sec.line, "duplicate section [" + sec.type + "]");
      }
    }

    if (sec.type == "corpus") {
      cfg.corpus.source = reader.require(sec, "source");
      auto& s = cfg.corpus.synthetic;
      if (cfg.corpus.is_synthetic()) {
        s.seed = reader.number<std::uint64_t>(sec, "seed").value_or(s.seed);
        s.num_docs = reader.number<std::size_t>(sec, "num_docs").value_or(s.num_docs);
        s.vocab_size = reader.number<std::size_t>(sec, "vocab_size").value_or(s.vocab_size);
        s.doc_len_min = reader.number<std::size_t>(sec, "doc_len_min").value_or(s.doc_len_min);
        s.doc_len_max = reader.number<std::size_t>(sec, "doc_len_max").value_or(s.doc_len_max);
        s.num_queries = reader.number<std::size_t>(sec, "num_queries").value_or(s.num_queries);
        s.query_len = reader.number<std::size_t>(sec, "query_len").value_or(s.query_len);
      } else {
        cfg.corpus.path = resolve(base_dir, cfg.corpus.source);
      }
    } else if (sec.type == "index") {
      cfg.index_path = resolve(base_dir, reader.require(sec, "path"));
      have_index = true;
    } else if (sec.type == "topics") {
      cfg.topics_path = resolve(base_dir, reader.require(sec, "path"));
    } else if (sec.type == "qrels") {
      cfg.qrels_path = resolve(base_dir, reader.require(sec, "path"));
    } else if (sec.type == "experiment") {
      if (auto* e = reader.get(sec, "measures")) {
        for (const auto& m : split_list(e->value)) {
          try {
            cfg.measures.push_back(Measure::parse(m));
          } catch (const PreconditionError& err) {
            reader.fail(e->line, err.what());
          }
        }
      }
      cfg.precompute_prefix =
          reader.boolean(sec, "precompute_prefix").value_or(false);
      if (auto* e = reader.get(sec, "baseline")) cfg.baseline = e->value;
      if (auto* e = reader.get(sec, "settings")) {
        for (const auto& s : split_list(e->value)) {
          if (s == "plain") {
            cfg.settings.push_back(Setting::plain);
          } else if (s == "precompute") {
            cfg.settings.push_back(Setting::precompute);
          } else if (s == "cached") {
            cfg.settings.push_back(Setting::cached);
          } else {
            reader.fail(e->line, "unknown setting '" + s +
                                     "' (expected plain, precompute or cached)");
          }
        }
      }
    } else if (sec.type == "leaf") {
      if (!kLeafNames.count(sec.name)) {
        reader.fail(sec.line, "unknown leaf '" + sec.name +
                                  "' (expected bm25, mono, duo, rewrite or text)");
      }
      LeafConfig leaf;
      leaf.per_call_ms = reader.number<double>(sec, "latency_per_call_ms").value_or(0.0);
      leaf.per_row_ms = reader.number<double>(sec, "latency_per_row_ms").value_or(0.0);
      if (leaf.per_call_ms < 0 || leaf.per_row_ms < 0) {
        reader.fail(sec.line, "latencies must be non-negative");
      }
      if (auto* e = reader.get(sec, "latency_rows")) {
        if (e->value == "input") {
          leaf.basis = RowBasis::input;
        } else if (e->value == "output") {
          leaf.basis = RowBasis::output;
        } else {
          reader.fail(e->line, "latency_rows must be input or output");
        }
      }
      if (!cfg.leaves.emplace(sec.name, leaf).second) {
        reader.fail(sec.line, "duplicate section [leaf " + sec.name + "]");
      }
    } else if (sec.type == "cache") {
      CacheConfig cache;
      cache.name = sec.name;
      cache.kind = reader.require(sec, "kind");
      if (!kCacheKinds.count(cache.kind)) {
        reader.fail(sec.line, "unknown cache kind '" + cache.kind + "'");
      }
      if (auto* e = reader.get(sec, "path"); e && !e->value.empty()) {
        cache.path = resolve(cache_root, e->value);
      }
      if (auto* e = reader.get(sec, "key")) cache.key = split_list(e->value);
      if (auto* e = reader.get(sec, "value")) cache.value = split_list(e->value);
      cache.wraps = reader.require(sec, "wraps");
      if (auto* e = reader.get(sec, "label")) cache.label = e->value;
      if (cache.label.empty()) cache.label = cache.wraps;
      if (cache.kind == "key_value" && (cache.key.empty() || cache.value.empty())) {
        reader.fail(sec.line, "key_value cache needs key and value");
      }
      if (cache.kind != "key_value" && !cache.value.empty()) {
        reader.fail(sec.line, "only key_value caches take 'value'");
      }
      if (kLeafNames.count(cache.name) || cache.name == "identity" ||
          !names.insert(cache.name).second) {
        reader.fail(sec.line, "cache name '" + cache.name + "' is already in use");
      }
      cfg.caches.push_back(std::move(cache));
    } else if (sec.type == "system") {
      SystemConfig sys{sec.name, reader.require(sec, "pipeline")};
      for (const auto& existing : cfg.systems) {
        if (existing.name == sys.name) {
          reader.fail(sec.line, "duplicate system '" + sys.name + "'");
        }
      }
      cfg.systems.push_back(std::move(sys));
    } else {
      reader.fail(sec.line, "unknown section [" + sec.type + "]");
    }
    reader.check_all_used(sec);
  }

  if (!have_index) throw ConfigError("config needs an [index] section with a path");
  if (cfg.measures.empty()) {
    cfg.measures = {Measure::parse("nDCG@10"), Measure::parse("AP"),
                    Measure::parse("P@10")};
  }
  if (cfg.settings.empty()) cfg.settings = {Setting::cached};
  if (cfg.baseline &&
      std::none_of(cfg.systems.begin(), cfg.systems.end(),
                   [&](const SystemConfig& s) { return s.name == *cfg.baseline; })) {
    throw ConfigError("baseline '" + *cfg.baseline + "' is not a declared system");
  }
  return cfg;
}

Config load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  const auto base = fs::absolute(path).parent_path();
  fs::path cache_root = base;
  if (const char* home = std::getenv("PIPECACHE_HOME"); home && *home) {
    cache_root = home;
  }
  Config cfg;
  try {
    cfg = parse_config(text.str(), base, cache_root);
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    if (msg.rfind("config:", 0) == 0) msg = path.string() + msg.substr(6);
    throw ConfigError(msg);
  }
  cfg.source_file = path;
  return cfg;
}

}  // namespace pipecache::app
