#include <gtest/gtest.h>

#include <random>
#include <set>

#include "pipecache/errors.hpp"
#include "pipecache/pipeline.hpp"
#include "support.hpp"

namespace pipecache {
namespace {

using testing::results;

Transformer constant(const std::string& name, Frame out) {
  return Transformer::leaf(name, {}, [out](const Frame&) { return out; });
}

double score_of(const Frame& f, const std::string& docno) {
  const auto d = f.require_column("docno", ValueKind::text);
  const auto s = f.require_column("score", ValueKind::real);
  for (std::size_t i = 0; i < f.num_rows(); ++i) {
    if (f.text(i, d) == docno) return f.real(i, s);
  }
  ADD_FAILURE() << "no docno " << docno;
  return 0;
}

std::int64_t rank_of(const Frame& f, const std::string& docno) {
  const auto d = f.require_column("docno", ValueKind::text);
  const auto r = f.require_column("rank", ValueKind::integer);
  for (std::size_t i = 0; i < f.num_rows(); ++i) {
    if (f.text(i, d) == docno) return f.integer(i, r);
  }
  ADD_FAILURE() << "no docno " << docno;
  return -1;
}

std::set<std::pair<std::string, std::string>> pairs(const Frame& f) {
  std::set<std::pair<std::string, std::string>> out;
  const auto q = f.require_column("qid", ValueKind::text);
  const auto d = f.require_column("docno", ValueKind::text);
  for (std::size_t i = 0; i < f.num_rows(); ++i) out.emplace(f.text(i, q), f.text(i, d));
  return out;
}

Frame five() {
  return results({{"q1", "a", 5.0}, {"q1", "b", 4.0}, {"q1", "c", 3.0},
                  {"q1", "d", 2.0}, {"q1", "e", 1.0}});
}

TEST(Apply, IdentityReturnsInput) {
  const auto f = five();
  EXPECT_EQ(apply(Transformer::identity(), f), f);
}

TEST(Apply, ThenComposes) {
  auto add = [](double delta) {
    return Transformer::leaf("add", {{"d", delta}}, [delta](const Frame& f) {
      std::vector<Value> s;
      for (std::size_t i = 0; i < f.num_rows(); ++i) s.push_back(f.real(i, 2) * 2 + delta);
      return assign_ranks(f.with_column({"score", ValueKind::real}, s));
    });
  };
  const auto a = add(1.0), b = add(-3.0);
  const auto f = five();
  EXPECT_EQ(apply(a >> b, f), apply(b, apply(a, f)));
}

TEST(Apply, DeclaredLeafCannotRun) {
  EXPECT_THROW(apply(Transformer::declared_leaf("x"), five()), PreconditionError);
}

TEST(Cutoff, KeepsTopK) {
  const auto out = apply(Transformer::identity() % 3, five());
  EXPECT_EQ(out.num_rows(), 3u);
  EXPECT_EQ(pairs(out), (std::set<std::pair<std::string, std::string>>{
                            {"q1", "a"}, {"q1", "b"}, {"q1", "c"}}));
  for (const char* d : {"a", "b", "c"}) EXPECT_LT(rank_of(out, d), 3);
}

TEST(Cutoff, LargerKIsIdentity) {
  const auto f = results({{"q", "a", 1.0}, {"q", "b", 2.0}});
  EXPECT_EQ(eval_cutoff(f, 10), f);
}

TEST(Cutoff, ZeroRejected) {
  EXPECT_THROW(Transformer::identity() % 0, PreconditionError);
  EXPECT_THROW(eval_cutoff(five(), 0), PreconditionError);
}

TEST(Cutoff, MinCompositionLaw) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::tuple<std::string, std::string, double>> rows;
    const auto n = rng() % 30;
    for (std::size_t i = 0; i < n; ++i) {
      rows.emplace_back("q" + std::to_string(rng() % 3), "d" + std::to_string(i),
                        static_cast<double>(rng() % 5));
    }
    const auto x = results(rows);
    const auto k = static_cast<std::int64_t>(1 + rng() % 10);
    const auto j = static_cast<std::int64_t>(1 + rng() % 10);
    EXPECT_EQ(eval_cutoff(eval_cutoff(x, k), j), eval_cutoff(x, std::min(k, j)));
  }
}

TEST(LinearCombine, SumsJoinedScores) {
  const auto out = eval_linear_combine(results({{"q1", "d1", 1.0}}),
                                       results({{"q1", "d1", 2.0}}));
  ASSERT_EQ(out.num_rows(), 1u);
  EXPECT_EQ(score_of(out, "d1"), 3.0);
  EXPECT_EQ(rank_of(out, "d1"), 0);
}

TEST(LinearCombine, EmptySideIsAdditiveIdentity) {
  const auto a = results({{"q1", "d1", 1.0}});
  const auto out = eval_linear_combine(a, a.empty_like());
  EXPECT_EQ(out, a);
}

TEST(LinearCombine, OuterJoinMissingIsZero) {
  const auto out = eval_linear_combine(results({{"q1", "d1", 1.0}}),
                                       results({{"q1", "d2", 2.0}}));
  EXPECT_EQ(rank_of(out, "d2"), 0);
  EXPECT_EQ(rank_of(out, "d1"), 1);
}

TEST(ScalarProduct, ScalesAndReorders) {
  const auto f = results({{"q", "x", 1.0}, {"q", "y", 3.0}});
  EXPECT_EQ(eval_scalar_product(f, 1.0), f);
  const auto twice = eval_scalar_product(f, 2.0);
  EXPECT_EQ(score_of(twice, "x"), 2.0);
  EXPECT_EQ(score_of(twice, "y"), 6.0);
  EXPECT_EQ(rank_of(twice, "y"), 0);
  const auto neg = eval_scalar_product(f, -1.0);
  EXPECT_EQ(rank_of(neg, "x"), 0);
  EXPECT_EQ(rank_of(neg, "y"), 1);
}

TEST(ScalarProduct, PositiveFactorKeepsRanks) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::tuple<std::string, std::string, double>> rows;
    for (std::size_t i = 0; i < rng() % 12; ++i) {
      rows.emplace_back("q", "d" + std::to_string(i),
                        std::uniform_real_distribution<double>(0, 10)(rng));
    }
    const auto f = results(rows);
    const auto g = eval_scalar_product(f, 0.5 + static_cast<double>(rng() % 10));
    for (std::size_t i = 0; i < f.num_rows(); ++i) {
      EXPECT_EQ(rank_of(g, f.text(i, 1)), f.integer(i, 3));
    }
  }
}

TEST(FeatureUnion, JoinsScoresAsFeatures) {
  const auto out = eval_feature_union(results({{"q1", "d1", 1.5}}),
                                      results({{"q1", "d1", 0.5}}));
  const auto fcol = out.require_column("features", ValueKind::real_list);
  EXPECT_EQ(std::get<RealList>(out.at(0, fcol)), (RealList{1.5, 0.5}));
  EXPECT_EQ(score_of(out, "d1"), 1.5);
}

TEST(FeatureUnion, MissingSidesAreZero) {
  const auto a = results({{"q1", "d1", 1.5}, {"q1", "d2", 0.2}});
  const auto left_only = eval_feature_union(a, a.empty_like());
  const auto fcol = left_only.require_column("features", ValueKind::real_list);
  for (std::size_t i = 0; i < left_only.num_rows(); ++i) {
    EXPECT_EQ(std::get<RealList>(left_only.at(i, fcol))[1], 0.0);
  }
  const auto right_only =
      eval_feature_union(a.empty_like(), results({{"q1", "d1", 0.5}}));
  EXPECT_EQ(std::get<RealList>(right_only.at(0, fcol)), (RealList{0.0, 0.5}));
  EXPECT_EQ(score_of(right_only, "d1"), 0.0);
}

TEST(SetOps, UnionAndIntersect) {
  const auto u = eval_set_op(results({{"q1", "d1", 1.0}}),
                             results({{"q1", "d2", 1.0}}), SetOp::union_);
  EXPECT_EQ(pairs(u), (std::set<std::pair<std::string, std::string>>{
                          {"q1", "d1"}, {"q1", "d2"}}));
  EXPECT_FALSE(u.has_column("score"));
  EXPECT_FALSE(u.has_column("rank"));
  const auto i = eval_set_op(results({{"q1", "d1", 1.0}, {"q1", "d2", 2.0}}),
                             results({{"q1", "d2", 1.0}, {"q1", "d3", 2.0}}),
                             SetOp::intersect);
  EXPECT_EQ(pairs(i), (std::set<std::pair<std::string, std::string>>{{"q1", "d2"}}));
}

TEST(SetOps, IntersectSelfIsDistinctDocnos) {
  const auto x = results({{"q1", "d1", 1.0}, {"q1", "d1", 2.0}, {"q2", "d3", 1.0}});
  const auto i = eval_set_op(x, x, SetOp::intersect);
  EXPECT_EQ(i.num_rows(), 2u);
}

TEST(SetOps, UnionCommutativeAndIdempotent) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    auto random_results = [&] {
      std::vector<std::tuple<std::string, std::string, double>> rows;
      for (std::size_t i = 0; i < rng() % 8; ++i) {
        rows.emplace_back("q" + std::to_string(rng() % 2), "d" + std::to_string(rng() % 6), 1.0);
      }
      return results(rows);
    };
    const auto a = random_results(), b = random_results();
    EXPECT_EQ(pairs(eval_set_op(a, b, SetOp::union_)),
              pairs(eval_set_op(b, a, SetOp::union_)));
    EXPECT_EQ(pairs(eval_set_op(a, a, SetOp::union_)), pairs(a));
  }
}

TEST(Concat, AppendsBelowWithShift) {
  const auto out = eval_concat(results({{"q1", "d1", 5.0}}), results({{"q1", "d2", 9.0}}));
  EXPECT_EQ(rank_of(out, "d1"), 0);
  EXPECT_EQ(score_of(out, "d1"), 5.0);
  EXPECT_EQ(rank_of(out, "d2"), 1);
  EXPECT_EQ(score_of(out, "d2"), 4.0);
}

TEST(Concat, ContainedRightSideIsDropped) {
  const auto a = results({{"q1", "d1", 5.0}, {"q1", "d2", 3.0}});
  EXPECT_EQ(eval_concat(a, results({{"q1", "d2", 10.0}})), a);
}

TEST(Concat, EmptyLeftKeepsScores) {
  const auto b = results({{"q1", "d1", 2.0}, {"q1", "d2", 7.0}});
  EXPECT_EQ(eval_concat(b.empty_like(), b), b);
}

TEST(Concat, AppendedScoresBelowEveryLeftScore) {
  const auto out = eval_concat(results({{"q", "a", 1.0}, {"q", "b", 2.0}}),
                               results({{"q", "c", 50.0}, {"q", "d", -4.0}}));
  EXPECT_LT(score_of(out, "c"), 1.0);
  EXPECT_LT(score_of(out, "d"), score_of(out, "c"));
  EXPECT_EQ(rank_of(out, "c"), 2);
  EXPECT_EQ(rank_of(out, "d"), 3);
}

TEST(BinaryOps, RequireResultFrames) {
  Frame q = testing::queries({{"q1", "a"}});
  EXPECT_THROW(eval_linear_combine(q, q), PreconditionError);
  EXPECT_THROW(eval_concat(q, q), PreconditionError);
}

TEST(Flatten, StageLists) {
  const auto A = Transformer::declared_leaf("A");
  const auto B = Transformer::declared_leaf("B");
  const auto C = Transformer::declared_leaf("C");
  EXPECT_EQ(flatten(A >> B >> C), (StageList{A, B, C}));
  EXPECT_EQ(flatten((A + B) >> C), (StageList{A + B, C}));
  EXPECT_EQ(flatten(A), (StageList{A}));
  EXPECT_EQ(flatten(A % 5), (StageList{A % 5}));
}

TEST(Flatten, RoundTripThroughThen) {
  const auto A = Transformer::declared_leaf("A");
  const auto B = Transformer::declared_leaf("B");
  const auto t = A >> (B >> A) >> (A | B);
  EXPECT_EQ(t.stages().size(), 4u);
  EXPECT_TRUE(struct_eq(from_stages(flatten(t)), t));
}

TEST(StructEq, LeafParams) {
  auto bm25 = [](std::int64_t k) {
    return Transformer::declared_leaf("BM25", {{"index", "i1"}, {"k", k}});
  };
  EXPECT_TRUE(struct_eq(bm25(20), bm25(20)));
  EXPECT_FALSE(struct_eq(bm25(20), bm25(50)));
  EXPECT_FALSE(struct_eq(Transformer::declared_leaf("x", {{"v", 1.0}}),
                         Transformer::declared_leaf("x", {{"v", std::int64_t{1}}})));
  EXPECT_FALSE(struct_eq(Transformer::declared_leaf("x", {{"v", 0.0}}),
                         Transformer::declared_leaf("x", {{"v", -0.0}})));
}

TEST(StructEq, ConstructionOrderNormalised) {
  const auto A = Transformer::declared_leaf("A");
  const auto B = Transformer::declared_leaf("B");
  const auto C = Transformer::declared_leaf("C");
  EXPECT_TRUE(struct_eq(A >> B, Transformer::then({A, B})));
  EXPECT_TRUE(struct_eq((A >> B) >> C, A >> (B >> C)));
  EXPECT_FALSE(struct_eq(A + B, B + A));
  EXPECT_FALSE(struct_eq(A % 5, A % 6));
  EXPECT_FALSE(struct_eq(A * 2.0, A * 3.0));
}

Transformer random_tree(std::mt19937_64& rng, int depth) {
  static const char* names[] = {"A", "B", "C"};
  if (depth == 0 || rng() % 3 == 0) {
    if (rng() % 5 == 0) return Transformer::identity();
    return Transformer::declared_leaf(names[rng() % 3],
                                      rng() % 2 ? Params{} : Params{{"k", std::int64_t(rng() % 2)}});
  }
  auto sub = [&] { return random_tree(rng, depth - 1); };
  switch (rng() % 8) {
    case 0: return sub() >> sub();
    case 1: return sub() % static_cast<std::int64_t>(1 + rng() % 2);
    case 2: return sub() + sub();
    case 3: return sub() * static_cast<double>(rng() % 2);
    case 4: return feature_union(sub(), sub());
    case 5: return sub() | sub();
    case 6: return sub() & sub();
    default: return sub() ^ sub();
  }
}

TEST(StructEq, EquivalenceRelationOnRandomTrees) {
  std::mt19937_64 rng(12);
  std::vector<Transformer> trees;
  for (int i = 0; i < 120; ++i) trees.push_back(random_tree(rng, 3));
  for (const auto& a : trees) {
    EXPECT_TRUE(struct_eq(a, a));
    for (const auto& b : trees) {
      EXPECT_EQ(struct_eq(a, b), struct_eq(b, a));
      if (!struct_eq(a, b)) continue;
      for (const auto& c : trees) {
        if (struct_eq(b, c)) EXPECT_TRUE(struct_eq(a, c));
      }
    }
  }
}

TEST(Describe, MinimalParentheses) {
  const auto a = Transformer::declared_leaf("a");
  const auto b = Transformer::declared_leaf("b");
  const auto c = Transformer::declared_leaf("c");
  EXPECT_EQ(describe(a + b >> c), "a + b >> c");
  EXPECT_EQ(describe(a >> (b + c) % 5), "a >> (b + c) % 5");
  EXPECT_EQ(describe(a >> (b ^ c)), "a >> (b ^ c)");
  EXPECT_EQ(describe(a * 2.0), "a * 2.0");
  EXPECT_EQ(describe(Transformer::declared_leaf("x", {{"s", "it's"}, {"n", std::int64_t{3}}})),
            "x(n=3, s='it\\'s')");
  EXPECT_EQ(describe(Transformer::identity()), "identity");
}

}  // namespace
}  // namespace pipecache
