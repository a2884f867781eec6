#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "pipecache/dsl.hpp"
#include "pipecache/errors.hpp"

namespace pipecache {
namespace {

dsl::Registry abc() {
  dsl::Registry r;
  for (const char* name : {"a", "b", "c", "bm25", "mono", "duo"}) r.declare(name);
  return r;
}

Transformer L(const char* name, Params params = {}) {
  return Transformer::declared_leaf(name, std::move(params));
}

void expect_syntax_error(std::string_view text, std::size_t offset,
                         const std::string& expected_item) {
  try {
    dsl::parse(text, abc());
    ADD_FAILURE() << "parsed: " << text;
  } catch (const SyntaxError& e) {
    EXPECT_EQ(e.offset(), offset) << text;
    EXPECT_NE(std::string(e.what()).find("offset " + std::to_string(offset)), std::string::npos);
    if (!expected_item.empty()) {
      EXPECT_NE(std::find(e.expected().begin(), e.expected().end(), expected_item),
                e.expected().end())
          << text << ": " << e.what();
    }
  }
}

TEST(Parse, DemoPipeline) {
  const auto t = dsl::parse("bm25 % 20 >> mono % 10 >> duo", abc());
  EXPECT_TRUE(struct_eq(t, Transformer::then({L("bm25") % 20, L("mono") % 10, L("duo")})));
}

TEST(Parse, PrecedenceExamples) {
  const auto r = abc();
  EXPECT_TRUE(struct_eq(dsl::parse("a + b >> c", r), (L("a") + L("b")) >> L("c")));
  EXPECT_TRUE(struct_eq(dsl::parse("a >> (b + c) % 5", r), L("a") >> (L("b") + L("c")) % 5));
  EXPECT_TRUE(struct_eq(dsl::parse("a + b * 2", r), L("a") + L("b") * 2.0));
  EXPECT_TRUE(struct_eq(dsl::parse("a ** b + c", r), feature_union(L("a"), L("b")) + L("c")));
  EXPECT_TRUE(struct_eq(dsl::parse("a ^ b >> c", r), (L("a") ^ L("b")) >> L("c")));
  EXPECT_TRUE(struct_eq(dsl::parse("a | b & c", r), (L("a") | L("b")) & L("c")));
  EXPECT_TRUE(struct_eq(dsl::parse("a % 3 * -0.5", r), L("a") % 3 * -0.5));
  EXPECT_TRUE(struct_eq(dsl::parse("identity", r), Transformer::identity()));
}

TEST(Parse, LeafArguments) {
  const auto t = dsl::parse("bm25(index='i\\'1', k=20, w=1.5e-3)", abc());
  EXPECT_TRUE(struct_eq(t, L("bm25", {{"index", "i'1"}, {"k", std::int64_t{20}}, {"w", 1.5e-3}})));
  EXPECT_TRUE(struct_eq(dsl::parse("a()", abc()), L("a")));
}

TEST(Parse, FactoriesBuildLeaves) {
  dsl::Registry r;
  int calls = 0;
  r.add("twice", [&](const Params& p) {
    ++calls;
    return Transformer::declared_leaf("twice", p);
  });
  EXPECT_TRUE(struct_eq(dsl::parse("twice(n=2)", r), L("twice", {{"n", std::int64_t{2}}})));
  EXPECT_EQ(calls, 1);
  EXPECT_THROW(r.add("identity", nullptr), PreconditionError);
}

TEST(Parse, FactoryErrorsPositioned) {
  dsl::Registry r;
  r.declare("a");
  r.add("strict", [](const Params& p) -> Transformer {
    if (!p.empty()) throw PreconditionError("strict takes no arguments");
    return Transformer::declared_leaf("strict");
  });
  try {
    dsl::parse("a >> strict(x=1)", r);
    FAIL();
  } catch (const SyntaxError& e) {
    EXPECT_EQ(e.offset(), 5u);
    EXPECT_NE(std::string(e.what()).find("strict takes no arguments"), std::string::npos);
  }
}

TEST(Parse, ErrorsCarryOffsetAndExpectedSet) {
  expect_syntax_error("a >>", 4, "identity");
  expect_syntax_error("", 0, "'('");
  expect_syntax_error("a % 2.5", 4, "positive integer");
  expect_syntax_error("(a", 2, "')'");
  expect_syntax_error("a b", 2, ">>");
  expect_syntax_error("a * x", 4, "number");
  expect_syntax_error("a(k=)", 4, "string");
  expect_syntax_error("zz >> a", 0, "");
  expect_syntax_error("a >> zz", 5, "");
  expect_syntax_error("a(k='x)", 4, "");
  expect_syntax_error("a(k=1, k=2)", 7, "");
  expect_syntax_error("a % 0", 4, "");
  expect_syntax_error("a )", 2, "end of input");
  expect_syntax_error("a $ b", 2, "");
}

TEST(ToText, Examples) {
  const auto r = abc();
  for (const char* text : {"bm25 % 20 >> mono % 10 >> duo", "a + b >> c", "a >> (b + c) % 5"}) {
    EXPECT_EQ(dsl::to_text(dsl::parse(text, r), r), text);
  }
  EXPECT_EQ(dsl::to_text(Transformer::identity(), r), "identity");
}

TEST(ToText, RejectsUnrenderable) {
  const auto r = abc();
  EXPECT_THROW(dsl::to_text(L("unregistered"), r), PreconditionError);
  EXPECT_THROW(dsl::to_text(L("a") * std::nan(""), r), PreconditionError);
  EXPECT_THROW(dsl::to_text(L("a", {{"w", HUGE_VAL}}), r), PreconditionError);
}

ParamValue random_param(std::mt19937_64& rng) {
  static const std::vector<std::string> strings = {"", "x", "it's", "back\\slash", "é", "a b"};
  switch (rng() % 3) {
    case 0: return static_cast<std::int64_t>(rng() % 2000) - 1000;
    case 1: return std::ldexp(static_cast<double>(static_cast<std::int64_t>(rng() % 200001) - 100000),
                              static_cast<int>(rng() % 40) - 20);
    default: return strings[rng() % strings.size()];
  }
}

Transformer random_tree(std::mt19937_64& rng, int depth) {
  static const char* names[] = {"a", "b", "c"};
  if (depth == 0 || rng() % 4 == 0) {
    if (rng() % 6 == 0) return Transformer::identity();
    Params p;
    for (std::size_t n = rng() % 3; n > 0; --n) {
      p["p" + std::to_string(rng() % 4)] = random_param(rng);
    }
    return Transformer::declared_leaf(names[rng() % 3], p);
  }
  auto sub = [&] { return random_tree(rng, depth - 1); };
  switch (rng() % 9) {
    case 0:
    case 1: return sub() >> sub();
    case 2: return sub() % static_cast<std::int64_t>(1 + rng() % 100);
    case 3: return sub() + sub();
    case 4: return sub() * (static_cast<double>(static_cast<std::int64_t>(rng() % 41) - 20) / 4.0);
    case 5: return feature_union(sub(), sub());
    case 6: return sub() | sub();
    case 7: return sub() & sub();
    default: return sub() ^ sub();
  }
}

TEST(RoundTrip, RandomTreesDepthEight) {
  const auto r = abc();
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto t = random_tree(rng, 8);
    const auto text = dsl::to_text(t, r);
    Transformer back = Transformer::identity();
    ASSERT_NO_THROW(back = dsl::parse(text, r)) << text;
    EXPECT_TRUE(struct_eq(back, t)) << text;
    EXPECT_EQ(dsl::to_text(back, r), text);
  }
}

}  // namespace
}  // namespace pipecache
