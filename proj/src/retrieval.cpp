#include "pipecache/retrieval.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_set>

#include "pipecache/errors.hpp"
#include "pipecache/storage.hpp"

namespace pipecache {

namespace fs = std::filesystem;

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      current += static_cast<char>(std::tolower(c));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

// ---------------------------------------------------------------------------
// TextStore

TextStore::TextStore(std::vector<std::string> docnos,
                     std::vector<std::string> texts)
    : docnos_(std::move(docnos)), texts_(std::move(texts)) {
  if (docnos_.size() != texts_.size()) {
    throw PreconditionError("text store: docno/text count mismatch");
  }
  for (std::size_t i = 0; i < docnos_.size(); ++i) ordinal_[docnos_[i]] = i;
}

bool TextStore::contains(std::string_view docno) const {
  return ordinal_.count(std::string(docno)) > 0;
}

const std::string& TextStore::text(std::string_view docno) const {
  auto it = ordinal_.find(std::string(docno));
  if (it == ordinal_.end()) {
    throw PreconditionError("unknown docno '" + std::string(docno) + "'");
  }
  return texts_[it->second];
}

void TextStore::save(const fs::path& path) const {
  ByteWriter w;
  for (const auto& t : texts_) w.long_string(t);
  std::ofstream out(path, std::ios::binary);
  out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
  if (!out) throw IoError("cannot write " + path.string());
}

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("cannot write " + path.string());
}

}  // namespace

TextStore TextStore::load(const fs::path& path,
                          std::vector<std::string> docnos) {
  const auto bytes = read_file(path);
  ByteReader r(bytes);
  std::vector<std::string> texts;
  texts.reserve(docnos.size());
  for (std::size_t i = 0; i < docnos.size(); ++i) {
    texts.push_back(r.long_string());
  }
  if (!r.at_end()) throw FormatError(path.string() + ": trailing bytes");
  return TextStore(std::move(docnos), std::move(texts));
}

// ---------------------------------------------------------------------------
// InvertedIndex

std::uint32_t InvertedIndex::doc_frequency(const std::string& term) const {
  auto it = postings_.find(term);
  return it == postings_.end() ? 0
                               : static_cast<std::uint32_t>(it->second.size());
}

const std::vector<Posting>* InvertedIndex::postings(
    const std::string& term) const {
  auto it = postings_.find(term);
  return it == postings_.end() ? nullptr : &it->second;
}

InvertedIndex build_index(const Frame& corpus) {
  const auto docno_col = corpus.require_column("docno", ValueKind::text);
  const auto text_col = corpus.require_column("text", ValueKind::text);

  InvertedIndex index;
  std::unordered_set<std::string> seen;
  std::vector<std::string> texts;
  std::uint64_t total = 0;
  for (std::size_t r = 0; r < corpus.num_rows(); ++r) {
    const auto& docno = corpus.text(r, docno_col);
    if (!seen.insert(docno).second) {
      throw PreconditionError("duplicate docno '" + docno + "'");
    }
    if (docno.find('\n') != std::string::npos) {
      throw PreconditionError("docno contains a newline");
    }
    const auto doc = static_cast<std::uint32_t>(index.docnos_.size());
    std::map<std::string, std::uint32_t> tf;
    const auto tokens = tokenize(corpus.text(r, text_col));
    for (const auto& t : tokens) ++tf[t];
    for (const auto& [term, f] : tf) index.postings_[term].push_back({doc, f});
    index.docnos_.push_back(docno);
    index.lengths_.push_back(static_cast<std::uint32_t>(tokens.size()));
    texts.push_back(corpus.text(r, text_col));
    total += tokens.size();
  }
  index.avgdl_ = index.docnos_.empty()
                     ? 0.0
                     : static_cast<double>(total) /
                           static_cast<double>(index.docnos_.size());
  index.texts_ = TextStore(index.docnos_, std::move(texts));
  return index;
}

void InvertedIndex::save(const fs::path& dir) const {
  fs::create_directories(dir);

  std::ostringstream meta;
  meta << "format_version=1\n"
       << "num_docs=" << docnos_.size() << "\n"
       << "avg_doc_length=" << format_real(avgdl_) << "\n"
       << "k1=" << format_real(kK1) << "\n"
       << "b=" << format_real(kB) << "\n";
  write_file(dir / "meta", meta.str());

  std::string docnos;
  for (const auto& d : docnos_) docnos += d + "\n";
  write_file(dir / "docnos", docnos);

  ByteWriter postings;
  for (const auto& [term, list] : postings_) {
    postings.long_string(term);
    postings.u32(static_cast<std::uint32_t>(list.size()));
    for (const auto& p : list) {
      postings.u32(p.doc);
      postings.u32(p.tf);
    }
  }
  write_file(dir / "postings", postings.bytes());

  ByteWriter lengths;
  for (auto l : lengths_) lengths.u32(l);
  write_file(dir / "lengths", lengths.bytes());

  texts_.save(dir / "texts");
}

InvertedIndex InvertedIndex::load(const fs::path& dir) {
  if (!fs::is_directory(dir)) {
    throw IoError("no index directory at " + dir.string());
  }
  InvertedIndex index;

  std::map<std::string, std::string> meta;
  {
    std::istringstream in(read_file(dir / "meta"));
    std::string line;
    while (std::getline(in, line)) {
      auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      meta[line.substr(0, eq)] = line.substr(eq + 1);
    }
  }
  if (meta["format_version"] != "1") {
    throw FormatError(dir.string() + ": unsupported index format");
  }
  std::size_t n = 0;
  {
    const auto& s = meta["num_docs"];
    auto res = std::from_chars(s.data(), s.data() + s.size(), n);
    if (res.ec != std::errc()) throw FormatError("bad num_docs in index meta");
    const auto& a = meta["avg_doc_length"];
    auto res2 = std::from_chars(a.data(), a.data() + a.size(), index.avgdl_);
    if (res2.ec != std::errc()) {
      throw FormatError("bad avg_doc_length in index meta");
    }
  }

  {
    std::istringstream in(read_file(dir / "docnos"));
    std::string line;
    while (std::getline(in, line)) index.docnos_.push_back(line);
  }
  if (index.docnos_.size() != n) {
    throw FormatError(dir.string() + ": docnos count does not match meta");
  }

  const auto postings = read_file(dir / "postings");
  ByteReader pr(postings);
  while (!pr.at_end()) {
    auto term = pr.long_string();
    const auto count = pr.u32();
    std::vector<Posting> list;
    list.reserve(std::min<std::size_t>(count, pr.remaining() / 8));
    for (std::uint32_t i = 0; i < count; ++i) {
      Posting p{pr.u32(), pr.u32()};
      if (p.doc >= n) throw FormatError("posting ordinal out of range");
      list.push_back(p);
    }
    index.postings_.emplace(std::move(term), std::move(list));
  }

  const auto lengths = read_file(dir / "lengths");
  ByteReader lr(lengths);
  for (std::size_t i = 0; i < n; ++i) index.lengths_.push_back(lr.u32());
  if (!lr.at_end()) throw FormatError("lengths file size mismatch");

  index.texts_ = TextStore::load(dir / "texts", index.docnos_);
  return index;
}

// ---------------------------------------------------------------------------
// Retrieval and scoring

namespace {

const std::vector<std::string> kResultColumns = {"docno", "score", "rank"};

}  // namespace

Frame bm25_retrieve(const InvertedIndex& index, const Frame& queries,
                    std::int64_t num_results) {
  if (num_results <= 0) throw PreconditionError("num_results must be positive");
  require_conforms(queries, RelationKind::Q, "bm25");
  if (queries.has_column("docno")) {
    throw PreconditionError("bm25: input already has a docno column");
  }
  const Frame carried = queries.without_columns(kResultColumns);
  const auto query_col = *carried.column_index("query");

  auto columns = carried.columns();
  columns.push_back({"docno", ValueKind::text});
  columns.push_back({"score", ValueKind::real});
  columns.push_back({"rank", ValueKind::integer});
  Frame out(std::move(columns));

  const double n = static_cast<double>(index.num_docs());
  const double k1 = InvertedIndex::kK1;
  const double b = InvertedIndex::kB;
  std::vector<double> acc(index.num_docs(), 0.0);
  std::vector<std::uint32_t> touched;

  for (std::size_t r = 0; r < carried.num_rows(); ++r) {
    touched.clear();
    for (const auto& term : tokenize(carried.text(r, query_col))) {
      const auto* list = index.postings(term);
      if (!list) continue;
      const double df = static_cast<double>(list->size());
      const double idf = std::log((n - df + 0.5) / (df + 0.5) + 1.0);
      for (const auto& p : *list) {
        const double tf = p.tf;
        const double dl = index.lengths()[p.doc];
        const double norm = k1 * (1.0 - b + b * dl / index.avg_doc_length());
        if (acc[p.doc] == 0.0) touched.push_back(p.doc);
        acc[p.doc] += idf * tf * (k1 + 1.0) / (tf + norm);
      }
    }
    std::vector<std::uint32_t> hits;
    for (auto d : touched) {
      if (acc[d] > 0.0) hits.push_back(d);
    }
    std::sort(hits.begin(), hits.end());
    hits.erase(std::unique(hits.begin(), hits.end()), hits.end());
    auto better = [&](std::uint32_t x, std::uint32_t y) {
      if (acc[x] != acc[y]) return acc[x] > acc[y];
      return index.docnos()[x] < index.docnos()[y];
    };
    const auto keep =
        std::min<std::size_t>(hits.size(), static_cast<std::size_t>(num_results));
    std::partial_sort(hits.begin(), hits.begin() + keep, hits.end(), better);
    for (std::size_t i = 0; i < keep; ++i) {
      Row row = carried.row(r);
      row.emplace_back(index.docnos()[hits[i]]);
      row.emplace_back(acc[hits[i]]);
      row.emplace_back(static_cast<std::int64_t>(i));
      out.append_row(std::move(row));
    }
    for (auto d : touched) acc[d] = 0.0;
  }
  return out;
}

Frame load_text(const TextStore& store, const Frame& results) {
  const auto docno = results.require_column("docno", ValueKind::text);
  std::vector<Value> texts;
  texts.reserve(results.num_rows());
  for (std::size_t r = 0; r < results.num_rows(); ++r) {
    texts.emplace_back(store.text(results.text(r, docno)));
  }
  return results.with_column({"text", ValueKind::text}, std::move(texts));
}

namespace {

std::vector<std::string> distinct_tokens(std::string_view text) {
  auto tokens = tokenize(text);
  std::sort(tokens.begin(), tokens.end());
  tokens.erase(std::unique(tokens.begin(), tokens.end()), tokens.end());
  return tokens;
}

std::vector<double> overlap_values(const Frame& results) {
  const auto query = results.require_column("query", ValueKind::text);
  const auto text = results.require_column("text", ValueKind::text);
  std::vector<double> values;
  values.reserve(results.num_rows());
  for (std::size_t r = 0; r < results.num_rows(); ++r) {
    const auto q = distinct_tokens(results.text(r, query));
    if (q.empty()) {
      values.push_back(0.0);
      continue;
    }
    const auto d = distinct_tokens(results.text(r, text));
    std::vector<std::string> common;
    std::set_intersection(q.begin(), q.end(), d.begin(), d.end(),
                          std::back_inserter(common));
    values.push_back(static_cast<double>(common.size()) /
                     static_cast<double>(q.size()));
  }
  return values;
}

Frame with_scores(const Frame& results, const std::vector<double>& scores) {
  std::vector<Value> column(scores.begin(), scores.end());
  return assign_ranks(
      results.with_column({"score", ValueKind::real}, std::move(column)));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Frame overlap_score(const Frame& results) {
  return with_scores(results, overlap_values(results));
}

Frame pairwise_rerank(const Frame& results) {
  const auto qid = results.require_column("qid", ValueKind::text);
  const auto o = overlap_values(results);
  std::unordered_map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t r = 0; r < results.num_rows(); ++r) {
    groups[results.text(r, qid)].push_back(r);
  }
  std::vector<double> scores(results.num_rows(), 0.0);
  for (const auto& [q, rows] : groups) {
    for (auto i : rows) {
      double s = 0.0;
      for (auto j : rows) {
        if (i != j) s += sigmoid(o[i] - o[j]);
      }
      scores[i] = s;
    }
  }
  return with_scores(results, scores);
}

Frame synonym_rewrite(const Frame& queries) {
  require_conforms(queries, RelationKind::Q, "synonym rewrite");
  const auto query = *queries.column_index("query");
  std::vector<Value> rewritten;
  rewritten.reserve(queries.num_rows());
  for (std::size_t r = 0; r < queries.num_rows(); ++r) {
    const auto& q = queries.text(r, query);
    const auto tokens = tokenize(q);
    rewritten.emplace_back(tokens.empty() ? q : q + " " + tokens.front());
  }
  return queries.with_column({"query", ValueKind::text}, std::move(rewritten));
}

// ---------------------------------------------------------------------------
// Transformer leaves

namespace {

class Bm25Leaf final : public LeafBehavior {
 public:
  Bm25Leaf(std::shared_ptr<const InvertedIndex> index, std::int64_t k)
      : index_(std::move(index)), k_(k) {}
  Frame apply(const Frame& input) const override {
    return bm25_retrieve(*index_, input, k_);
  }

 private:
  std::shared_ptr<const InvertedIndex> index_;
  std::int64_t k_;
};

// Runs `score` with a text column present, leaving the input's own columns
// (and nothing else) in the output.
class TextScorerLeaf final : public LeafBehavior {
 public:
  using ScoreFn = Frame (*)(const Frame&);
  TextScorerLeaf(std::shared_ptr<const InvertedIndex> index, ScoreFn fn)
      : index_(std::move(index)), fn_(fn) {}

  Frame apply(const Frame& input) const override {
    if (input.has_column("text")) return fn_(input);
    static const std::vector<std::string> kText = {"text"};
    return fn_(load_text(index_->text_store(), input)).without_columns(kText);
  }

 private:
  std::shared_ptr<const InvertedIndex> index_;
  ScoreFn fn_;
};

class CountingLeaf final : public LeafBehavior {
 public:
  CountingLeaf(Transformer inner, std::shared_ptr<InvocationCounter> counter)
      : inner_(std::move(inner)), counter_(std::move(counter)) {}

  Frame apply(const Frame& input) const override {
    counter_->invocations.fetch_add(1, std::memory_order_relaxed);
    counter_->rows_in.fetch_add(input.num_rows(), std::memory_order_relaxed);
    Frame out = pipecache::apply(inner_, input);
    counter_->rows_out.fetch_add(out.num_rows(), std::memory_order_relaxed);
    return out;
  }

 private:
  Transformer inner_;
  std::shared_ptr<InvocationCounter> counter_;
};

void sleep_ms(double ms) {
  if (ms > 0.0) {
    std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(ms));
  }
}

class LatencyLeaf final : public LeafBehavior {
 public:
  LatencyLeaf(Transformer inner, double per_call, double per_row,
              RowBasis basis)
      : inner_(std::move(inner)),
        per_call_(per_call),
        per_row_(per_row),
        basis_(basis) {}

  Frame apply(const Frame& input) const override {
    if (basis_ == RowBasis::input) {
      sleep_ms(per_call_ + per_row_ * static_cast<double>(input.num_rows()));
      return pipecache::apply(inner_, input);
    }
    Frame out = pipecache::apply(inner_, input);
    sleep_ms(per_call_ + per_row_ * static_cast<double>(out.num_rows()));
    return out;
  }

 private:
  Transformer inner_;
  double per_call_, per_row_;
  RowBasis basis_;
};

Transformer wrap_preserving_identity(
    const Transformer& inner, const char* fallback_kind,
    std::shared_ptr<const LeafBehavior> behavior) {
  if (inner.is_leaf()) {
    return Transformer::leaf(inner.leaf_kind(), inner.params(),
                             std::move(behavior));
  }
  return Transformer::leaf(fallback_kind, {{"of", describe(inner)}},
                           std::move(behavior));
}

}  // namespace

Transformer bm25_transformer(std::shared_ptr<const InvertedIndex> index,
                             std::int64_t num_results,
                             std::string index_label) {
  if (num_results <= 0) throw PreconditionError("num_results must be positive");
  return Transformer::leaf(
      "bm25", {{"index", std::move(index_label)}, {"num_results", num_results}},
      std::make_shared<Bm25Leaf>(std::move(index), num_results));
}

Transformer text_loader_transformer(std::shared_ptr<const InvertedIndex> index) {
  return Transformer::leaf("text_loader", {}, [index](const Frame& f) {
    return load_text(index->text_store(), f);
  });
}

Transformer overlap_scorer(std::shared_ptr<const InvertedIndex> index) {
  return Transformer::leaf(
      "overlap", {},
      std::make_shared<TextScorerLeaf>(std::move(index), &overlap_score));
}

Transformer pairwise_reranker(std::shared_ptr<const InvertedIndex> index) {
  return Transformer::leaf(
      "pairwise", {},
      std::make_shared<TextScorerLeaf>(std::move(index), &pairwise_rerank));
}

Transformer synonym_rewriter() {
  return Transformer::leaf("rewrite", {}, &synonym_rewrite);
}

Transformer with_counter(const Transformer& inner,
                         std::shared_ptr<InvocationCounter> counter) {
  return wrap_preserving_identity(
      inner, "counted",
      std::make_shared<CountingLeaf>(inner, std::move(counter)));
}

Transformer with_latency(const Transformer& inner, double per_call_ms,
                         double per_row_ms, RowBasis basis) {
  if (per_call_ms < 0 || per_row_ms < 0) {
    throw PreconditionError("latency must be non-negative");
  }
  return wrap_preserving_identity(
      inner, "delayed",
      std::make_shared<LatencyLeaf>(inner, per_call_ms, per_row_ms, basis));
}

// ---------------------------------------------------------------------------
// Synthetic collections

std::uint64_t SplitMix64::next() {
  std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

SyntheticCollection synth_corpus(const SyntheticCorpusSpec& spec) {
  if (spec.query_len < 1 || spec.vocab_size < spec.query_len) {
    throw PreconditionError("synthetic corpus needs vocab_size >= query_len >= 1");
  }
  if (spec.doc_len_min > spec.doc_len_max) {
    throw PreconditionError("synthetic corpus needs doc_len_min <= doc_len_max");
  }
  SplitMix64 rng(spec.seed);
  auto word = [](std::uint64_t w) { return "w" + std::to_string(w); };

  SyntheticCollection out{
      Frame({{"docno", ValueKind::text}, {"text", ValueKind::text}}),
      Frame({{"qid", ValueKind::text}, {"query", ValueKind::text}}),
      Frame({{"qid", ValueKind::text},
             {"docno", ValueKind::text},
             {"label", ValueKind::integer}})};

  std::vector<std::vector<std::uint64_t>> doc_terms(spec.num_docs);
  for (std::size_t i = 0; i < spec.num_docs; ++i) {
    const auto len = spec.doc_len_min +
                     rng.below(spec.doc_len_max - spec.doc_len_min + 1);
    std::string text;
    for (std::size_t j = 0; j < len; ++j) {
      const auto w = rng.below(spec.vocab_size);
      doc_terms[i].push_back(w);
      if (j) text += ' ';
      text += word(w);
    }
    std::sort(doc_terms[i].begin(), doc_terms[i].end());
    doc_terms[i].erase(std::unique(doc_terms[i].begin(), doc_terms[i].end()),
                       doc_terms[i].end());
    out.corpus.append_row({"d" + std::to_string(i), std::move(text)});
  }

  const std::size_t threshold = (spec.query_len + 1) / 2;
  for (std::size_t q = 0; q < spec.num_queries; ++q) {
    std::vector<std::uint64_t> terms;
    while (terms.size() < spec.query_len) {
      const auto w = rng.below(spec.vocab_size);
      if (std::find(terms.begin(), terms.end(), w) == terms.end()) {
        terms.push_back(w);
      }
    }
    std::string query;
    for (std::size_t j = 0; j < terms.size(); ++j) {
      if (j) query += ' ';
      query += word(terms[j]);
    }
    const auto qid = "q" + std::to_string(q);
    out.topics.append_row({qid, std::move(query)});

    std::sort(terms.begin(), terms.end());
    for (std::size_t i = 0; i < spec.num_docs; ++i) {
      std::size_t shared = 0;
      for (auto t : terms) {
        shared += std::binary_search(doc_terms[i].begin(), doc_terms[i].end(), t);
      }
      if (shared >= threshold) {
        out.qrels.append_row({qid, "d" + std::to_string(i), std::int64_t{1}});
      }
    }
  }
  return out;
}

}  // namespace pipecache
