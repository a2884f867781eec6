#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>
#include <set>
#include <thread>

#include "pipecache/caching.hpp"
#include "pipecache/errors.hpp"
#include "pipecache/retrieval.hpp"
#include "pipecache/storage.hpp"
#include "support.hpp"

namespace pipecache {
namespace {

namespace fs = std::filesystem;
using testing::make_toys;
using testing::read_bytes;

struct Counted {
  std::shared_ptr<InvocationCounter> counter = std::make_shared<InvocationCounter>();
  Transformer t;
  explicit Counted(const Transformer& inner) : t(with_counter(inner, counter)) {}
};

Counted counted(const Transformer& inner) { return Counted(inner); }

std::map<std::string, std::string> dir_contents(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = read_bytes(e.path());
  }
  return out;
}

/// Uppercases `text` into `upper`; one output row per input row.
Transformer upper_leaf() {
  return Transformer::leaf("upper", {}, [](const Frame& in) {
    const auto t = in.require_column("text", ValueKind::text);
    std::vector<Value> out;
    for (std::size_t i = 0; i < in.num_rows(); ++i) {
      auto s = in.text(i, t);
      for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
      out.push_back(s);
    }
    return in.with_column({"upper", ValueKind::text}, out);
  });
}

Frame texts(const std::vector<std::pair<std::string, std::string>>& rows) {
  return testing::documents(rows);
}

class CacheTest : public ::testing::Test {
 protected:
  TempDir root{"pipecache-test"};
  fs::path dir(const std::string& name) const { return root.path() / name; }
};

TEST_F(CacheTest, KeyValueColdWarmAndPartialMisses) {
  auto inner = counted(upper_leaf());
  KeyValueCache cache({dir("kv"), inner.t, "upper"}, {"text"}, {"upper"});
  const auto f = texts({{"d1", "ab"}, {"d2", "cd"}, {"d3", "ef"}});
  const auto cold = cache.apply(f);
  EXPECT_EQ(cold, apply(upper_leaf(), f));
  EXPECT_EQ(inner.counter->invocations, 1u);
  EXPECT_EQ(inner.counter->rows_in, 3u);
  EXPECT_EQ(cache.size(), 3u);
  EXPECT_EQ(cache.apply(f), cold);
  EXPECT_EQ(inner.counter->invocations, 1u);
  const auto g = texts({{"d1", "ab"}, {"d9", "zz"}, {"d2", "cd"}});
  EXPECT_EQ(cache.apply(g), apply(upper_leaf(), g));
  EXPECT_EQ(inner.counter->invocations, 2u);
  EXPECT_EQ(inner.counter->rows_in, 4u);
}

TEST_F(CacheTest, KeyValueEmptyInputLearnsSchemaOnce) {
  auto inner = counted(upper_leaf());
  KeyValueCache cache({dir("kv"), inner.t, "upper"}, {"text"}, {"upper"});
  const auto empty = texts({});
  EXPECT_EQ(cache.apply(empty), apply(upper_leaf(), empty));
  EXPECT_EQ(cache.apply(empty), apply(upper_leaf(), empty));
  EXPECT_EQ(inner.counter->invocations, 1u);
}

TEST_F(CacheTest, KeyValueMissWithoutInnerNamesKey) {
  {
    KeyValueCache warm({dir("kv"), upper_leaf(), "upper"}, {"text"}, {"upper"});
    warm.apply(texts({{"d1", "ab"}}));
  }
  KeyValueCache cache({dir("kv"), std::nullopt, "upper"}, {"text"}, {"upper"});
  EXPECT_EQ(cache.apply(texts({{"d1", "ab"}})).text(0, 2), "AB");
  try {
    cache.apply(texts({{"d1", "missing-key"}}));
    FAIL();
  } catch (const CacheMissError& e) {
    EXPECT_NE(std::string(e.what()).find("missing-key"), std::string::npos);
  }
}

TEST_F(CacheTest, KeyValueRejectsRowCountChange) {
  const auto drop = Transformer::leaf("drop", {}, [](const Frame& in) { return in.empty_like(); });
  KeyValueCache cache({dir("kv"), drop, ""}, {"text"}, {"upper"});
  EXPECT_THROW(cache.apply(texts({{"d1", "x"}})), PreconditionError);
}

TEST_F(CacheTest, LabelMismatchRejected) {
  { KeyValueCache a({dir("kv"), upper_leaf(), "v1"}, {"text"}, {"upper"}); }
  EXPECT_THROW(KeyValueCache({dir("kv"), upper_leaf(), "v2"}, {"text"}, {"upper"}),
               ConfigError);
  EXPECT_THROW(ScorerCache({dir("kv"), upper_leaf(), "v1"}), ConfigError);
  const auto meta = CacheMeta::read(dir("kv"));
  EXPECT_EQ(meta.kind, "key_value");
  EXPECT_EQ(meta.label, "v1");
  EXPECT_EQ(meta.key_columns, std::vector<std::string>{"text"});
}

TEST_F(CacheTest, ScorerCacheTransparentAndMissOnlyNewDocs) {
  const auto toys = make_toys();
  auto scorer = counted(overlap_scorer(toys.index));
  ScorerCache cache({dir("scorer"), scorer.t, "overlap"});
  const auto bm25_50 = bm25_retrieve(*toys.index, toys.collection.topics, 50);
  const auto expected = apply(overlap_scorer(toys.index), bm25_50);
  EXPECT_EQ(cache.apply(bm25_50), expected);
  const auto first_rows = scorer.counter->rows_in.load();
  EXPECT_EQ(first_rows, bm25_50.num_rows());
  EXPECT_EQ(cache.apply(bm25_50), expected);
  EXPECT_EQ(scorer.counter->rows_in, first_rows);

  const auto bm25_80 = bm25_retrieve(*toys.index, toys.collection.topics, 80);
  EXPECT_EQ(cache.apply(bm25_80), apply(overlap_scorer(toys.index), bm25_80));
  EXPECT_EQ(scorer.counter->rows_in, bm25_80.num_rows());
}

TEST_F(CacheTest, ScorerCacheRanksFollowScores) {
  const auto fixed = Transformer::leaf("fixed", {}, [](const Frame& in) {
    std::vector<Value> s = {0.2, 0.9};
    return assign_ranks(in.with_column({"score", ValueKind::real}, s));
  });
  ScorerCache cache({std::nullopt, fixed, ""});
  Frame in({{"qid", ValueKind::text}, {"query", ValueKind::text}, {"docno", ValueKind::text}});
  in.append_row({std::string("q"), std::string("a"), std::string("x")});
  in.append_row({std::string("q"), std::string("a"), std::string("y")});
  for (int pass = 0; pass < 2; ++pass) {
    const auto out = cache.apply(in);
    const auto d = out.require_column("docno", ValueKind::text);
    const auto r = out.require_column("rank", ValueKind::integer);
    EXPECT_EQ(out.text(0, d), "y");
    EXPECT_EQ(out.integer(0, r), 0);
    EXPECT_EQ(out.text(1, d), "x");
    EXPECT_EQ(out.integer(1, r), 1);
  }
}

TEST_F(CacheTest, DenseAndSparseAgree) {
  const auto toys = make_toys();
  auto sparse_inner = counted(overlap_scorer(toys.index));
  auto dense_inner = counted(overlap_scorer(toys.index));
  ScorerCache sparse({dir("sparse"), sparse_inner.t, "overlap"}, {"query", "docno"});
  DenseScorerCache dense({dir("dense"), dense_inner.t, "overlap"}, toys.index->docnos());
  for (std::int64_t k : {10, 30, 30, 60}) {
    const auto r = bm25_retrieve(*toys.index, toys.collection.topics, k);
    EXPECT_EQ(sparse.apply(r), dense.apply(r)) << k;
    EXPECT_EQ(sparse_inner.counter->rows_in, dense_inner.counter->rows_in) << k;
    EXPECT_EQ(sparse_inner.counter->invocations, dense_inner.counter->invocations) << k;
  }
  EXPECT_EQ(sparse.size(), dense.size());
}

TEST_F(CacheTest, DenseLayoutAndErrors) {
  const std::vector<std::string> docnos = {"a", "b", "c"};
  const auto scorer = Transformer::leaf("half", {}, [](const Frame& in) {
    return assign_ranks(in.with_column({"score", ValueKind::real},
                                       std::vector<Value>(in.num_rows(), 0.5)));
  });
  {
    DenseScorerCache cache({dir("dense"), scorer, ""}, docnos);
    Frame in({{"qid", ValueKind::text}, {"query", ValueKind::text}, {"docno", ValueKind::text}});
    in.append_row({std::string("q"), std::string("hello"), std::string("b")});
    cache.apply(in);
    EXPECT_EQ(cache.size(), 1u);
    Frame unknown = in.empty_like();
    unknown.append_row({std::string("q"), std::string("hello"), std::string("zz")});
    try {
      cache.apply(unknown);
      FAIL();
    } catch (const PreconditionError& e) {
      EXPECT_NE(std::string(e.what()).find("zz"), std::string::npos);
    }
  }
  EXPECT_EQ(read_bytes(dir("dense") / "docnos"), "a\nb\nc\n");
  Frame key({{"query", ValueKind::text}}, {{std::string("hello")}});
  const std::vector<std::string> cols = {"query"};
  const auto file = dir("dense") / (to_hex(key_digest(canonical_encode_row(key, 0, cols))) + ".f64");
  const auto bytes = read_bytes(file);
  ASSERT_EQ(bytes.size(), 24u);
  double values[3];
  std::memcpy(values, bytes.data(), 24);
  EXPECT_TRUE(std::isnan(values[0]));
  EXPECT_EQ(values[1], 0.5);
  EXPECT_TRUE(std::isnan(values[2]));
  EXPECT_EQ(CacheMeta::read(dir("dense")).kind, "dense_scorer");
  EXPECT_THROW(DenseScorerCache({dir("dense"), scorer, ""}, {"a", "b"}), ConfigError);
}

TEST_F(CacheTest, DenseRejectsComputedNaN) {
  const auto nan_scorer = Transformer::leaf("nan", {}, [](const Frame& in) {
    return assign_ranks(in.with_column(
        {"score", ValueKind::real},
        std::vector<Value>(in.num_rows(), std::numeric_limits<double>::quiet_NaN())));
  });
  DenseScorerCache cache({std::nullopt, nan_scorer, ""}, {"a"});
  Frame in({{"qid", ValueKind::text}, {"query", ValueKind::text}, {"docno", ValueKind::text}},
           {{std::string("q"), std::string("x"), std::string("a")}});
  EXPECT_THROW(cache.apply(in), PreconditionError);
}

TEST_F(CacheTest, RetrieverCachePerRowAndSafeKeying) {
  const auto toys = make_toys();
  auto bm25 = counted(bm25_transformer(toys.index, 20));
  RetrieverCache cache({dir("retr"), bm25.t, "bm25"});
  const auto& topics = toys.collection.topics;
  const auto expected = apply(bm25_transformer(toys.index, 20), topics);
  EXPECT_EQ(cache.apply(topics), expected);
  EXPECT_EQ(bm25.counter->invocations, topics.num_rows());
  EXPECT_EQ(cache.apply(topics), expected);
  EXPECT_EQ(bm25.counter->invocations, topics.num_rows());

  Frame changed = topics.empty_like();
  changed.append_row({topics.text(0, 0), topics.text(1, 1)});
  const auto out = cache.apply(changed);
  EXPECT_EQ(bm25.counter->invocations, topics.num_rows() + 1);
  EXPECT_EQ(out, apply(bm25_transformer(toys.index, 20), changed));

  const auto before = cache.size();
  EXPECT_TRUE(cache.apply(topics.empty_like()).empty());
  EXPECT_EQ(cache.size(), before);
}

TEST_F(CacheTest, RetrieverCacheEmptyInputFirst) {
  const auto toys = make_toys();
  auto bm25 = counted(bm25_transformer(toys.index, 20));
  RetrieverCache cache({dir("retr"), bm25.t, "bm25"});
  const auto empty = toys.collection.topics.empty_like();
  const auto expected = apply(bm25_transformer(toys.index, 20), empty);
  EXPECT_EQ(cache.apply(empty), expected);
  EXPECT_EQ(cache.apply(empty), expected);
  EXPECT_EQ(bm25.counter->invocations, 1u);
  EXPECT_EQ(cache.size(), 0u);
}

TEST_F(CacheTest, RetrieverCacheMissWithoutInner) {
  RetrieverCache cache({dir("retr"), std::nullopt, ""});
  EXPECT_THROW(cache.apply(testing::queries({{"q1", "a"}})), CacheMissError);
}

TEST_F(CacheTest, TransparencyOnRandomInputs) {
  const auto toys = make_toys(300, 30, 12);
  std::mt19937_64 rng(17);
  ScorerCache scorer({dir("s"), overlap_scorer(toys.index), ""});
  RetrieverCache retriever({dir("r"), bm25_transformer(toys.index, 15), ""});
  const auto& topics = toys.collection.topics;
  for (int trial = 0; trial < 15; ++trial) {
    Frame q = topics.empty_like();
    for (std::size_t i = 0; i < topics.num_rows(); ++i) {
      if (rng() % 3) q.append_row(topics.row(i));
    }
    const auto r = bm25_retrieve(*toys.index, q, 1 + static_cast<std::int64_t>(rng() % 40));
    EXPECT_EQ(scorer.apply(r), apply(overlap_scorer(toys.index), r));
    EXPECT_EQ(retriever.apply(q), apply(bm25_transformer(toys.index, 15), q));
  }
}

TEST_F(CacheTest, TransformerLeafIdentity) {
  ScorerCache cache({dir("s"), upper_leaf(), "lbl"});
  const auto t = cache.transformer();
  EXPECT_TRUE(t.is_leaf());
  EXPECT_TRUE(struct_eq(t, cache.transformer()));
}

TEST(TempMode, DistinctDirectoriesRemovedAfterScope) {
  fs::path a, b;
  {
    ScorerCache x({std::nullopt, upper_leaf(), ""});
    ScorerCache y({std::nullopt, upper_leaf(), ""});
    a = x.path();
    b = y.path();
    EXPECT_NE(a, b);
    EXPECT_TRUE(fs::exists(a));
    EXPECT_TRUE(fs::exists(b));
  }
  EXPECT_FALSE(fs::exists(a));
  EXPECT_FALSE(fs::exists(b));
}

TEST(TempMode, TransformerKeepsDirectoryAlive) {
  fs::path p;
  Transformer t = Transformer::identity();
  {
    KeyValueCache cache({std::nullopt, upper_leaf(), ""}, {"text"}, {"upper"});
    p = cache.path();
    t = cache.transformer();
  }
  EXPECT_TRUE(fs::exists(p));
  EXPECT_EQ(apply(t, texts({{"d", "q"}})).text(0, 2), "Q");
  t = Transformer::identity();
  EXPECT_FALSE(fs::exists(p));
}

TEST(Lazy, ConstructsOnceOnFirstApply) {
  int built = 0;
  const auto t = lazy([&] {
    ++built;
    return upper_leaf();
  });
  EXPECT_EQ(built, 0);
  const auto f = texts({{"d", "x"}});
  for (int i = 0; i < 3; ++i) EXPECT_EQ(apply(t, f), apply(upper_leaf(), f));
  EXPECT_EQ(built, 1);
}

TEST(Lazy, FailureIsRetried) {
  int attempts = 0;
  const auto t = lazy([&]() -> Transformer {
    if (++attempts < 3) throw IoError("not yet");
    return Transformer::identity();
  });
  const auto f = texts({{"d", "x"}});
  EXPECT_THROW(apply(t, f), IoError);
  EXPECT_THROW(apply(t, f), IoError);
  EXPECT_EQ(apply(t, f), f);
  EXPECT_EQ(attempts, 3);
}

TEST(Lazy, ConcurrentFirstCallsBuildOnce) {
  std::atomic<int> built{0};
  const auto t = lazy([&] {
    ++built;
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
    return Transformer::identity();
  });
  const auto f = texts({{"d", "x"}});
  std::vector<std::thread> threads;
  for (int i = 0; i < 4; ++i) threads.emplace_back([&] { apply(t, f); });
  for (auto& th : threads) th.join();
  EXPECT_EQ(built, 1);
}

TEST_F(CacheTest, PackUnpackByteIdentical) {
  const auto toys = make_toys();
  const auto r = bm25_retrieve(*toys.index, toys.collection.topics, 20);
  {
    ScorerCache cache({dir("s"), overlap_scorer(toys.index), "overlap"});
    EXPECT_THROW(pack_cache(dir("s"), dir("busy.tar")), PreconditionError);
    cache.apply(r);
  }
  pack_cache(dir("s"), dir("s.tar"));
  const auto archive = read_bytes(dir("s.tar"));
  EXPECT_EQ(archive.size() % 512, 0u);
  pack_cache(dir("s"), dir("again.tar"));
  EXPECT_EQ(read_bytes(dir("again.tar")), archive);

  unpack_cache(dir("s.tar"), dir("copy"));
  EXPECT_EQ(dir_contents(dir("copy")), dir_contents(dir("s")));

  ScorerCache copy({dir("copy"), std::nullopt, "overlap"});
  EXPECT_EQ(copy.apply(r), apply(overlap_scorer(toys.index), r));
}

TEST_F(CacheTest, UnpackRejectsCorruptArchives) {
  { KeyValueCache c({dir("kv"), upper_leaf(), ""}, {"text"}, {"upper"}); c.apply(texts({{"d", "x"}})); }
  pack_cache(dir("kv"), dir("kv.tar"));
  auto bytes = read_bytes(dir("kv.tar"));
  auto flipped = bytes;
  flipped[10] ^= 0x55;
  testing::write_bytes(dir("bad.tar"), flipped);
  EXPECT_THROW(unpack_cache(dir("bad.tar"), dir("out1")), FormatError);
  testing::write_bytes(dir("short.tar"), bytes.substr(0, 700));
  EXPECT_THROW(unpack_cache(dir("short.tar"), dir("out2")), FormatError);
  fs::create_directories(dir("full"));
  testing::write_bytes(dir("full") / "x", "x");
  EXPECT_THROW(unpack_cache(dir("kv.tar"), dir("full")), PreconditionError);
}

TEST_F(CacheTest, StatsAndClear) {
  {
    KeyValueCache c({dir("kv"), upper_leaf(), "u"}, {"text"}, {"upper"});
    c.apply(texts({{"a", "x"}, {"b", "y"}}));
    EXPECT_THROW(clear_cache(dir("kv")), PreconditionError);
  }
  auto stats = cache_stats(dir("kv"));
  EXPECT_EQ(stats.entries, 2u);
  EXPECT_EQ(stats.meta.label, "u");
  EXPECT_GT(stats.bytes, 0u);
  clear_cache(dir("kv"));
  EXPECT_TRUE(fs::exists(dir("kv") / "meta"));
  EXPECT_EQ(cache_stats(dir("kv")).entries, 0u);
  KeyValueCache reopened({dir("kv"), std::nullopt, "u"}, {"text"}, {"upper"});
  EXPECT_THROW(reopened.apply(texts({{"a", "x"}})), CacheMissError);
}

TEST(IndexerCache, GoldenLayout) {
  TempDir root;
  Frame rows({{"docno", ValueKind::text}, {"text", ValueKind::text}, {"len", ValueKind::integer}});
  rows.append_row({std::string("d2"), std::string("second doc"), std::int64_t{2}});
  rows.append_row({std::string("d1"), std::string("first"), std::int64_t{1}});
  rows.append_row({std::string("dé"), std::string(""), std::int64_t{0}});
  IndexerCache cache(root.path() / "ix");
  EXPECT_EQ(cache.index(rows), 3u);
  for (const char* name : {"records", "docnos", "meta"}) {
    EXPECT_EQ(read_bytes(root.path() / "ix" / name),
              read_bytes(testing::golden_dir() / "indexer" / name))
        << name;
  }
  EXPECT_EQ(cache.read_all(), rows);
  const std::vector<std::string> want = {"dé", "d2"};
  const auto got = cache.lookup(want);
  EXPECT_EQ(got.text(0, 0), "dé");
  EXPECT_EQ(got.text(1, 0), "d2");
  const std::vector<std::string> bad = {"nope"};
  EXPECT_THROW(cache.lookup(bad), PreconditionError);
  EXPECT_THROW(cache.index(rows), PreconditionError);
}

TEST(IndexerCache, StreamRoundTripAndReplay) {
  TempDir root;
  const auto toys = make_toys(150);
  auto loader = counted(Transformer::leaf("corpus", {}, [&](const Frame&) {
    return toys.collection.corpus;
  }));
  IndexerCache cache(root.path() / "ix");
  EXPECT_EQ(cache.index(loader.t, Frame{}), 150u);
  EXPECT_EQ(loader.counter->invocations, 1u);
  std::size_t i = 0;
  cache.for_each([&](const Frame& rec) {
    ASSERT_EQ(rec.num_rows(), 1u);
    EXPECT_EQ(rec.row(0), toys.collection.corpus.row(i++));
  });
  EXPECT_EQ(i, 150u);
  IndexerCache reopened(root.path() / "ix");
  EXPECT_EQ(reopened.size(), 150u);
  build_index(reopened.read_all()).save(root.path() / "i1");
  build_index(reopened.read_all()).save(root.path() / "i2");
  EXPECT_EQ(dir_contents(root.path() / "i1"), dir_contents(root.path() / "i2"));
  EXPECT_EQ(loader.counter->invocations, 1u);
}

TEST(IndexerCache, EmptyStream) {
  IndexerCache cache;
  EXPECT_EQ(cache.index(testing::documents({})), 0u);
  EXPECT_EQ(cache.size(), 0u);
  EXPECT_TRUE(cache.read_all().empty());
}

}  // namespace
}  // namespace pipecache
