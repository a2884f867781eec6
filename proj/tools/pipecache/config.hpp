#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pipecache/experiment.hpp"
#include "pipecache/retrieval.hpp"

namespace pipecache::app {

struct CorpusConfig {
  /// "synthetic" or a path to a TSV with docno and text columns.
  std::string source = "synthetic";
  SyntheticCorpusSpec synthetic;
  std::filesystem::path path;

  bool is_synthetic() const { return source == "synthetic"; }
};

struct LeafConfig {
  double per_call_ms = 0.0;
  double per_row_ms = 0.0;
  RowBasis basis = RowBasis::input;
};

struct CacheConfig {
  std::string name;
  std::string kind;  ///< key_value | scorer | dense_scorer | retriever
  std::optional<std::filesystem::path> path;  ///< resolved; empty = temporary
  std::vector<std::string> key;
  std::vector<std::string> value;
  std::string wraps;  ///< pipeline expression computing misses
  std::string label;
};

struct SystemConfig {
  std::string name;
  std::string pipeline;
};

/// Experiment settings, run in order.
enum class Setting {
  plain,       ///< no precomputation, caches bypassed
  precompute,  ///< precomputation, caches bypassed
  cached,      ///< caches active, precomputation per precompute_prefix
};

std::string_view setting_name(Setting s);

struct Config {
  std::filesystem::path source_file;
  CorpusConfig corpus;
  std::filesystem::path index_path;
  std::optional<std::filesystem::path> topics_path;
  std::optional<std::filesystem::path> qrels_path;
  std::vector<Measure> measures;
  bool precompute_prefix = false;
  std::optional<std::string> baseline;
  std::vector<Setting> settings;
  std::map<std::string, LeafConfig> leaves;
  std::vector<CacheConfig> caches;
  std::vector<SystemConfig> systems;
};

/// Parses a config document. Relative index, topics and qrels paths are
/// resolved against `base_dir`; relative cache paths against `cache_root`.
/// Throws ConfigError naming the offending line.
Config parse_config(std::string_view text, const std::filesystem::path& base_dir,
                    const std::filesystem::path& cache_root);

/// Reads and parses `path`. The cache root is $PIPECACHE_HOME when set,
/// otherwise the config file's directory.
Config load_config(const std::filesystem::path& path);

}  // namespace pipecache::app
