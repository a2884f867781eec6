#include "app.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <iomanip>
#include <map>
#include <memory>
#include <set>
#include <ostream>
#include <sstream>

#include "config.hpp"
#include "pipecache/caching.hpp"
#include "pipecache/dsl.hpp"
#include "pipecache/errors.hpp"
#include "pipecache/experiment.hpp"
#include "pipecache/retrieval.hpp"

namespace pipecache::app {

namespace fs = std::filesystem;

namespace {

// Rows of cells printed either as TSV or as space-padded columns.
class Table {
 public:
  explicit Table(std::vector<std::string> header) { rows_.push_back(std::move(header)); }
  void add(std::vector<std::string> row) { rows_.push_back(std::move(row)); }

  void print(std::ostream& out, bool tsv) const {
    std::vector<std::size_t> width;
    for (const auto& row : rows_) {
      width.resize(std::max(width.size(), row.size()));
      for (std::size_t i = 0; i < row.size(); ++i) {
        width[i] = std::max(width[i], row[i].size());
      }
    }
    for (const auto& row : rows_) {
      for (std::size_t i = 0; i < row.size(); ++i) {
        if (tsv) {
          if (i) out << '\t';
          out << row[i];
        } else {
          if (i) out << "  ";
          out << row[i];
          if (i + 1 < row.size()) out << std::string(width[i] - row[i].size(), ' ');
        }
      }
      out << '\n';
    }
  }

 private:
  std::vector<std::vector<std::string>> rows_;
};

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

std::string caret_message(const std::string& where, const std::string& text,
                          const SyntaxError& e) {
  std::string msg = where + ": " + e.what() + "\n  " + text + "\n  " +
                    std::string(std::min(e.offset(), text.size()), ' ') + "^";
  return msg;
}

// Everything built from a config for one `run`.
class Workbench {
 public:
  explicit Workbench(const Config& cfg) : cfg_(cfg) {
    index_ = std::make_shared<InvertedIndex>(InvertedIndex::load(cfg.index_path));
    const auto topics = cfg.topics_path.value_or(cfg.index_path / "topics.tsv");
    const auto qrels = cfg.qrels_path.value_or(cfg.index_path / "qrels.tsv");
    if (!fs::exists(topics)) throw ConfigError("no topics file at " + topics.string());
    if (!fs::exists(qrels)) throw ConfigError("no qrels file at " + qrels.string());
    topics_ = load_tsv(topics);
    qrels_ = load_tsv(qrels);

    for (const char* name : {"bm25", "mono", "duo", "rewrite", "text"}) {
      counters_[name] = std::make_shared<InvocationCounter>();
      base_.add(name, [this, n = std::string(name)](const Params& p) {
        return make_leaf(n, p);
      });
    }
    cached_ = base_;
    bypass_ = base_;
    for (const auto& cache : cfg.caches) add_cache(cache);
  }

  const dsl::Registry& registry(Setting s) const {
    return s == Setting::cached ? cached_ : bypass_;
  }
  const Frame& topics() const { return topics_; }
  const Frame& qrels() const { return qrels_; }
  const std::map<std::string, std::shared_ptr<InvocationCounter>>& counters() const {
    return counters_;
  }

 private:
  Transformer make_leaf(const std::string& name, const Params& params) const {
    Transformer toy;
    if (name == "bm25") {
      std::int64_t n = 1000;
      for (const auto& [key, value] : params) {
        if (key != "num_results" || !std::holds_alternative<std::int64_t>(value)) {
          throw ConfigError("bm25 takes only num_results=<integer>");
        }
        n = std::get<std::int64_t>(value);
      }
      toy = bm25_transformer(index_, n);
    } else {
      if (!params.empty()) throw ConfigError(name + " takes no arguments");
      if (name == "mono") {
        toy = overlap_scorer(index_);
      } else if (name == "duo") {
        toy = pairwise_reranker(index_);
      } else if (name == "rewrite") {
        toy = synonym_rewriter();
      } else {
        toy = text_loader_transformer(index_);
      }
    }
    Transformer wrapped = with_counter(toy, counters_.at(name));
    if (auto it = cfg_.leaves.find(name); it != cfg_.leaves.end()) {
      const auto& l = it->second;
      wrapped = with_latency(wrapped, l.per_call_ms, l.per_row_ms, l.basis);
    }
    return Transformer::leaf(name, params, wrapped.behavior());
  }

  void add_cache(const CacheConfig& c) {
    Transformer inner;
    try {
      inner = dsl::parse(c.wraps, base_);
    } catch (const SyntaxError& e) {
      throw SyntaxError(e.offset(), e.expected(),
                        caret_message("cache '" + c.name + "'", c.wraps, e));
    }
    CacheOptions options{c.path, inner, c.label, false};
    Transformer cached;
    if (c.kind == "key_value") {
      cached = KeyValueCache(options, c.key, c.value).transformer();
    } else if (c.kind == "scorer") {
      cached = (c.key.empty() ? ScorerCache(options) : ScorerCache(options, c.key))
                   .transformer();
    } else if (c.kind == "dense_scorer") {
      cached = (c.key.empty()
                    ? DenseScorerCache(options, index_->docnos())
                    : DenseScorerCache(options, index_->docnos(), c.key))
                   .transformer();
    } else {
      cached = RetrieverCache(options, c.key).transformer();
    }
    auto no_args = [name = c.name](const Params& p) {
      if (!p.empty()) throw ConfigError("cache '" + name + "' takes no arguments");
    };
    cached_.add(c.name, [cached, no_args](const Params& p) {
      no_args(p);
      return cached;
    });
    bypass_.add(c.name, [inner, no_args](const Params& p) {
      no_args(p);
      return inner;
    });
  }

  const Config& cfg_;
  std::shared_ptr<InvertedIndex> index_;
  Frame topics_;
  Frame qrels_;
  std::map<std::string, std::shared_ptr<InvocationCounter>> counters_;
  dsl::Registry base_;
  dsl::Registry cached_;
  dsl::Registry bypass_;
};

struct SettingOutcome {
  std::string label;
  ExperimentResult result;
  double seconds = 0.0;
  std::vector<std::array<std::string, 4>> counters;  // leaf, calls, in, out
};

int cmd_index(const fs::path& config_path, bool force,
              std::optional<std::uint64_t> seed, std::ostream& out) {
  const auto cfg = load_config(config_path);
  const auto& dir = cfg.index_path;
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) {
      throw PreconditionError("index " + dir.string() +
                              " already exists (use --force to rebuild)");
    }
    fs::remove_all(dir);
  }
  InvertedIndex index;
  if (cfg.corpus.is_synthetic()) {
    auto spec = cfg.corpus.synthetic;
    if (seed) spec.seed = *seed;
    const auto collection = synth_corpus(spec);
    index = build_index(collection.corpus);
    index.save(dir);
    save_tsv(dir / "topics.tsv", collection.topics);
    save_tsv(dir / "qrels.tsv", collection.qrels);
  } else {
    index = build_index(load_tsv(cfg.corpus.path));
    index.save(dir);
  }
  out << "indexed " << index.num_docs() << " documents into " << dir.string()
      << "\n";
  return kOk;
}

int cmd_run(const fs::path& config_path, std::optional<bool> precompute,
            bool timings, bool tsv, std::ostream& out) {
  auto cfg = load_config(config_path);
  if (precompute) cfg.precompute_prefix = *precompute;
  if (cfg.systems.empty()) throw ConfigError("config declares no [system] sections");
  Workbench bench(cfg);

  std::vector<SettingOutcome> outcomes;
  for (std::size_t s = 0; s < cfg.settings.size(); ++s) {
    const auto setting = cfg.settings[s];
    ExperimentSpec spec;
    for (const auto& sys : cfg.systems) {
      try {
        spec.systems.push_back(dsl::parse(sys.pipeline, bench.registry(setting)));
      } catch (const SyntaxError& e) {
        throw SyntaxError(e.offset(), e.expected(),
                          caret_message("system '" + sys.name + "'", sys.pipeline, e));
      }
      spec.names.push_back(sys.name);
      if (cfg.baseline && *cfg.baseline == sys.name) {
        spec.baseline = spec.names.size() - 1;
      }
    }
    spec.topics = bench.topics();
    spec.qrels = bench.qrels();
    spec.measures = cfg.measures;
    spec.precompute_prefix =
        setting == Setting::precompute ||
        (setting == Setting::cached && cfg.precompute_prefix);

    for (const auto& [_, c] : bench.counters()) c->reset();
    SettingOutcome outcome;
    outcome.label = std::to_string(s + 1) + "-" + std::string(setting_name(setting));
    const auto start = std::chrono::steady_clock::now();
    outcome.result = run(spec);
    outcome.seconds = std::chrono::duration<double>(
                          std::chrono::steady_clock::now() - start).count();
    for (const auto& [name, c] : bench.counters()) {
      outcome.counters.push_back({name, std::to_string(c->invocations.load()),
                                  std::to_string(c->rows_in.load()),
                                  std::to_string(c->rows_out.load())});
    }
    outcomes.push_back(std::move(outcome));
  }

  const auto& measures = cfg.measures;
  const bool tested = cfg.baseline.has_value();
  std::vector<std::string> header = {"setting", "system"};
  for (const auto& m : measures) header.push_back(m.name());
  if (tested) {
    for (const auto& m : measures) header.push_back("p_" + m.name());
    for (const auto& m : measures) header.push_back("p_holm_" + m.name());
  }
  if (timings && tsv) {
    header.push_back("seconds");
    header.push_back("delta_pct");
  }
  Table results(header);
  const double t0 = outcomes.front().seconds;
  auto delta = [&](double t) {
    return t0 > 0 ? (t - t0) / t0 * 100.0 : 0.0;
  };
  auto real = [&](double v) { return tsv ? format_real(v) : fixed(v, 4); };
  for (const auto& o : outcomes) {
    const auto& res = o.result;
    for (std::size_t i = 0; i < res.systems.size(); ++i) {
      const auto& sys = res.systems[i];
      std::vector<std::string> row = {o.label, sys.name};
      for (double v : sys.means) row.push_back(real(v));
      if (tested) {
        const bool base = res.baseline && *res.baseline == i;
        for (std::size_t m = 0; m < measures.size(); ++m) {
          row.push_back(base ? "-" : real(sys.p_values[m]));
        }
        for (std::size_t m = 0; m < measures.size(); ++m) {
          row.push_back(base ? "-" : real(sys.p_corrected[m]));
        }
      }
      if (timings && tsv) {
        row.push_back(fixed(o.seconds, 3));
        row.push_back(fixed(delta(o.seconds), 1));
      }
      results.add(std::move(row));
    }
  }

  if (tsv) {
    results.print(out, true);
    return kOk;
  }

  out << "Results\n";
  results.print(out, false);
  if (timings) {
    out << "\nTimings\n";
    Table t({"setting", "seconds", "delta"});
    for (const auto& o : outcomes) {
      char d[32];
      std::snprintf(d, sizeof d, "%+.1f%%", delta(o.seconds));
      t.add({o.label, fixed(o.seconds, 3), d});
    }
    t.print(out, false);
  }
  out << "\nInvocations\n";
  Table inv({"setting", "leaf", "calls", "rows_in", "rows_out"});
  std::set<std::string> used;
  for (const auto& o : outcomes) {
    for (const auto& c : o.counters) {
      if (c[1] != "0") used.insert(c[0]);
    }
  }
  for (const auto& o : outcomes) {
    for (const auto& c : o.counters) {
      if (used.count(c[0])) inv.add({o.label, c[0], c[1], c[2], c[3]});
    }
  }
  inv.print(out, false);
  out << "\nPrefix\n";
  for (const auto& o : outcomes) {
    const auto& p = o.result.prefix;
    out << o.label << ": ";
    if (!p.applied) {
      out << "none\n";
      continue;
    }
    for (std::size_t i = 0; i < p.stages.size(); ++i) {
      out << (i ? " >> " : "") << p.stages[i];
    }
    out << "\n";
  }
  return kOk;
}

int cmd_cache_stats(const fs::path& dir, std::ostream& out) {
  const auto stats = cache_stats(dir);
  Table t({"kind", "entries", "bytes", "label"});
  t.add({stats.meta.kind, std::to_string(stats.entries),
         std::to_string(stats.bytes), stats.meta.label});
  t.print(out, true);
  return kOk;
}

int cmd_cache_clear(const fs::path& dir, bool yes, std::ostream& out,
                    std::ostream& err) {
  CacheMeta::read(dir);
  if (!yes) {
    err << "refusing to clear " << dir.string() << " without --yes\n";
    return kConfigError;
  }
  clear_cache(dir);
  out << "cleared " << dir.string() << "\n";
  return kOk;
}

}  // namespace

int main(const std::vector<std::string>& args, std::ostream& out,
         std::ostream& err) {
  CLI::App cli{"Declarative retrieval pipelines with prefix precomputation and caches",
               "pipecache"};
  cli.require_subcommand(1);

  std::string config;
  bool force = false;
  std::optional<std::uint64_t> seed;
  auto* index = cli.add_subcommand("index", "Build the index named by a config");
  index->add_option("--config", config, "Config file")->required();
  index->add_flag("--force", force, "Replace an existing index");
  index->add_option("--seed", seed, "Override the synthetic corpus seed");

  bool timings = false;
  bool tsv = false;
  std::optional<bool> precompute;
  auto* run_cmd = cli.add_subcommand("run", "Run the experiment of a config");
  run_cmd->add_option("--config", config, "Config file")->required();
  run_cmd->add_flag("--precompute,!--no-precompute", precompute,
                    "Override precompute_prefix");
  run_cmd->add_flag("--timings", timings, "Report wall-clock time per setting");
  run_cmd->add_flag("--tsv", tsv, "Print only the result table as TSV");

  auto* cache = cli.add_subcommand("cache", "Inspect and share cache directories");
  cache->require_subcommand(1);
  std::string path, archive, dest;
  bool yes = false;
  auto* stats = cache->add_subcommand("stats", "Print entry count and size");
  stats->add_option("path", path, "Cache directory")->required();
  auto* clear = cache->add_subcommand("clear", "Delete cached entries");
  clear->add_option("path", path, "Cache directory")->required();
  clear->add_flag("--yes", yes, "Confirm deletion");
  auto* pack = cache->add_subcommand("pack", "Write a cache as a tar archive");
  pack->add_option("path", path, "Cache directory")->required();
  pack->add_option("archive", archive, "Archive to write")->required();
  auto* unpack = cache->add_subcommand("unpack", "Extract a cache archive");
  unpack->add_option("archive", archive, "Archive to read")->required();
  unpack->add_option("dest", dest, "Destination directory")->required();

  std::vector<std::string> rest(args.rbegin(), args.rend());
  if (!rest.empty()) rest.pop_back();  // program name
  try {
    cli.parse(rest);
  } catch (const CLI::CallForHelp&) {
    out << cli.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << cli.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  }

  try {
    if (*index) return cmd_index(config, force, seed, out);
    if (*run_cmd) return cmd_run(config, precompute, timings, tsv, out);
    if (*stats) return cmd_cache_stats(path, out);
    if (*clear) return cmd_cache_clear(path, yes, out, err);
    if (*pack) {
      pack_cache(path, archive);
      out << "packed " << path << " into " << archive << "\n";
      return kOk;
    }
    if (*unpack) {
      unpack_cache(archive, dest);
      out << "unpacked " << archive << " into " << dest << "\n";
      return kOk;
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const SyntaxError& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kDataError;
  } catch (const PreconditionError& e) {
    err << "error: " << e.what() << "\n";
    return kDataError;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kDataError;
  } catch (const CacheMissError& e) {
    err << "error: " << e.what() << "\n";
    return kDataError;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kDataError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kRuntimeError;
}

}  // namespace pipecache::app
