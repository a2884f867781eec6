#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "pipecache/frame.hpp"
#include "pipecache/pipeline.hpp"
#include "pipecache/retrieval.hpp"

namespace pipecache::testing {

inline std::filesystem::path golden_dir() { return PIPECACHE_GOLDEN_DIR; }

inline std::string read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_bytes(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) out.push_back(item);
  if (s.back() == sep) out.emplace_back();
  return out;
}

inline const std::vector<Column>& r_schema() {
  static const std::vector<Column> cols = {{"qid", ValueKind::text},
                                           {"docno", ValueKind::text},
                                           {"score", ValueKind::real},
                                           {"rank", ValueKind::integer}};
  return cols;
}

/// R frame from (qid, docno, score) triples with ranks assigned.
inline Frame results(
    const std::vector<std::tuple<std::string, std::string, double>>& rows) {
  Frame f({{"qid", ValueKind::text},
           {"docno", ValueKind::text},
           {"score", ValueKind::real}});
  for (const auto& [q, d, s] : rows) f.append_row({q, d, s});
  return assign_ranks(f);
}

inline Frame queries(const std::vector<std::pair<std::string, std::string>>& rows) {
  Frame f({{"qid", ValueKind::text}, {"query", ValueKind::text}});
  for (const auto& [q, text] : rows) f.append_row({q, text});
  return f;
}

inline Frame documents(const std::vector<std::pair<std::string, std::string>>& rows) {
  Frame f({{"docno", ValueKind::text}, {"text", ValueKind::text}});
  for (const auto& [d, text] : rows) f.append_row({d, text});
  return f;
}

/// Random value of `kind`, including awkward reals (negative zero,
/// subnormals, huge magnitudes) and non-ASCII text.
inline Value random_value(std::mt19937_64& rng, ValueKind kind) {
  static const std::vector<std::string> words = {
      "", "a", "b c", "tab\there", "new\nline", "back\\slash", "é", "日本",
      "q1", "d42", "'quote'"};
  static const std::vector<double> specials = {
      0.0, -0.0, 1.0, -1.5, 5e-324, 1e308, -2.2250738585072014e-308, 0.1};
  switch (kind) {
    case ValueKind::text:
      return words[rng() % words.size()] + std::to_string(rng() % 5);
    case ValueKind::real:
      if (rng() % 4 == 0) return specials[rng() % specials.size()];
      return std::uniform_real_distribution<double>(-1e6, 1e6)(rng);
    case ValueKind::integer:
      return static_cast<std::int64_t>(rng());
    case ValueKind::real_list: {
      RealList list(rng() % 4);
      for (auto& x : list) x = std::uniform_real_distribution<double>(-10, 10)(rng);
      return list;
    }
  }
  return std::string();
}

inline Frame random_frame(std::mt19937_64& rng, std::size_t max_rows = 8) {
  std::vector<Column> cols;
  const auto ncols = rng() % 5;
  for (std::size_t c = 0; c < ncols; ++c) {
    cols.push_back({"c" + std::to_string(c), static_cast<ValueKind>(rng() % 4)});
  }
  Frame f(cols);
  const auto nrows = ncols == 0 ? 0 : rng() % (max_rows + 1);
  for (std::size_t r = 0; r < nrows; ++r) {
    Row row;
    for (const auto& c : cols) row.push_back(random_value(rng, c.kind));
    f.append_row(std::move(row));
  }
  return f;
}

/// Small synthetic collection shared by tests.
struct Toys {
  std::shared_ptr<const InvertedIndex> index;
  SyntheticCollection collection;
};

inline Toys make_toys(std::size_t docs = 200, std::size_t vocab = 40,
                      std::size_t nq = 8, std::uint64_t seed = 11) {
  SyntheticCorpusSpec spec;
  spec.seed = seed;
  spec.num_docs = docs;
  spec.vocab_size = vocab;
  spec.num_queries = nq;
  Toys t;
  t.collection = synth_corpus(spec);
  t.index = std::make_shared<const InvertedIndex>(build_index(t.collection.corpus));
  return t;
}

}  // namespace pipecache::testing
