#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pipecache/frame.hpp"
#include "pipecache/pipeline.hpp"

namespace pipecache {

/// Lowercases and splits on any non-alphanumeric byte.
std::vector<std::string> tokenize(std::string_view text);

struct Posting {
  std::uint32_t doc;
  std::uint32_t tf;

  friend bool operator==(const Posting&, const Posting&) = default;
};

/// docno -> text map persisted beside the index.
class TextStore {
 public:
  TextStore() = default;
  TextStore(std::vector<std::string> docnos, std::vector<std::string> texts);

  const std::string& text(std::string_view docno) const;
  bool contains(std::string_view docno) const;
  std::size_t size() const { return texts_.size(); }
  const std::vector<std::string>& texts() const { return texts_; }

  void save(const std::filesystem::path& path) const;
  static TextStore load(const std::filesystem::path& path,
                        std::vector<std::string> docnos);

 private:
  std::vector<std::string> docnos_;
  std::vector<std::string> texts_;
  std::unordered_map<std::string, std::size_t> ordinal_;
};

/// Term-at-a-time inverted index with BM25 statistics.
///
/// Directory layout: `meta` (key=value lines), `docnos` (newline-delimited),
/// `postings` (per term in byte order: u32 term length, term, u32 count,
/// then (u32 ordinal, u32 tf) pairs), `lengths` (u32 per doc) and `texts`
/// (u32 length-prefixed records in ordinal order). Integers little-endian.
class InvertedIndex {
 public:
  static constexpr double kK1 = 1.2;
  static constexpr double kB = 0.75;

  std::size_t num_docs() const { return docnos_.size(); }
  double avg_doc_length() const { return avgdl_; }
  std::uint32_t doc_frequency(const std::string& term) const;
  const std::vector<Posting>* postings(const std::string& term) const;
  const std::vector<std::string>& docnos() const { return docnos_; }
  const std::vector<std::uint32_t>& lengths() const { return lengths_; }
  const std::map<std::string, std::vector<Posting>>& terms() const {
    return postings_;
  }
  const TextStore& text_store() const { return texts_; }

  void save(const std::filesystem::path& dir) const;
  static InvertedIndex load(const std::filesystem::path& dir);

  friend InvertedIndex build_index(const Frame& corpus);

 private:
  std::map<std::string, std::vector<Posting>> postings_;
  std::vector<std::string> docnos_;
  std::vector<std::uint32_t> lengths_;
  double avgdl_ = 0.0;
  TextStore texts_;
};

/// Indexes a D frame with `docno` and `text` columns. Docnos must be unique.
InvertedIndex build_index(const Frame& corpus);

/// BM25 (k1 = 1.2, b = 0.75, idf = ln((N - df + 0.5) / (df + 0.5) + 1)).
/// Each input row yields its top `num_results` documents with score > 0,
/// ordered by score descending then docno. Input columns other than
/// docno/score/rank are carried onto every result row.
Frame bm25_retrieve(const InvertedIndex& index, const Frame& queries,
                    std::int64_t num_results = 1000);

/// Appends a `text` column looked up from the store.
Frame load_text(const TextStore& store, const Frame& results);

/// Fraction of distinct query terms present in the text.
Frame overlap_score(const Frame& results);

/// Per qid, score_i = sum over j != i of sigmoid(o_i - o_j) with o the
/// overlap scores. Not row-local.
Frame pairwise_rerank(const Frame& results);

/// Appends the query's first token to the query.
Frame synonym_rewrite(const Frame& queries);

// Transformer leaves over the functions above. Scorers load `text` from the
// store when the input lacks it and do not add it to their output.
Transformer bm25_transformer(std::shared_ptr<const InvertedIndex> index,
                             std::int64_t num_results = 1000,
                             std::string index_label = "default");
Transformer text_loader_transformer(std::shared_ptr<const InvertedIndex> index);
Transformer overlap_scorer(std::shared_ptr<const InvertedIndex> index);
Transformer pairwise_reranker(std::shared_ptr<const InvertedIndex> index);
Transformer synonym_rewriter();

struct InvocationCounter {
  std::atomic<std::uint64_t> invocations{0};
  std::atomic<std::uint64_t> rows_in{0};
  std::atomic<std::uint64_t> rows_out{0};

  void reset() {
    invocations = 0;
    rows_in = 0;
    rows_out = 0;
  }
};

/// Transparent wrapper counting calls and rows. A wrapped leaf keeps the
/// inner leaf's identity; any other node becomes a `counted` leaf.
Transformer with_counter(const Transformer& inner,
                         std::shared_ptr<InvocationCounter> counter);

enum class RowBasis {
  input,   ///< sleep per input row before delegating
  output,  ///< sleep per output row after delegating
};

/// Transparent wrapper adding `per_call_ms + rows * per_row_ms` of sleep.
Transformer with_latency(const Transformer& inner, double per_call_ms,
                         double per_row_ms, RowBasis basis = RowBasis::input);

struct SyntheticCorpusSpec {
  std::uint64_t seed = 7;
  std::size_t num_docs = 5000;
  std::size_t vocab_size = 500;
  std::size_t doc_len_min = 10;
  std::size_t doc_len_max = 30;
  std::size_t num_queries = 50;
  std::size_t query_len = 3;
};

struct SyntheticCollection {
  Frame corpus;  ///< D: docno, text
  Frame topics;  ///< Q: qid, query
  Frame qrels;   ///< RA: qid, docno, label
};

/// splitmix64 seeded generator. Every doc sharing at least
/// ceil(query_len / 2) distinct terms with a query is judged relevant.
SyntheticCollection synth_corpus(const SyntheticCorpusSpec& spec);

/// splitmix64 state machine.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next();
  /// Uniform in [0, n).
  std::uint64_t below(std::uint64_t n) { return next() % n; }

 private:
  std::uint64_t state_;
};

}  // namespace pipecache
