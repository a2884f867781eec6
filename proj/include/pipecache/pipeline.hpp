#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "pipecache/frame.hpp"

namespace pipecache {

using ParamValue = std::variant<std::string, double, std::int64_t>;
/// Leaf parameters, ordered by name. Reals compare bit-wise.
using Params = std::map<std::string, ParamValue>;

bool params_equal(const Params& a, const Params& b);

/// Behaviour behind a leaf node. Implementations may be stateful (caches,
/// counters) but must be safe to call through a const reference.
class LeafBehavior {
 public:
  virtual ~LeafBehavior() = default;
  virtual Frame apply(const Frame& input) const = 0;
};

enum class NodeKind {
  identity,
  leaf,
  then,
  cutoff,
  linear_combine,
  scalar_product,
  feature_union,
  set_union,
  set_intersect,
  concat,
};

/// Immutable pipeline node. Copies share the underlying tree.
///
/// Structural identity: two transformers are equal iff their trees match
/// node by node, leaves comparing by (kind, params). Leaf behaviour is not
/// part of identity.
class Transformer {
 public:
  /// The identity transformer.
  Transformer();

  static Transformer identity() { return Transformer(); }
  static Transformer leaf(std::string kind, Params params,
                          std::shared_ptr<const LeafBehavior> behavior);
  static Transformer leaf(std::string kind, Params params,
                          std::function<Frame(const Frame&)> fn);
  /// A leaf with identity only; applying it throws. Used for parsing and
  /// structural tests.
  static Transformer declared_leaf(std::string kind, Params params = {});

  /// Builds a Then chain, flattening nested Then nodes. A single stage is
  /// returned unchanged; an empty list yields identity.
  static Transformer then(std::vector<Transformer> stages);
  static Transformer cutoff(Transformer inner, std::int64_t k);
  static Transformer linear_combine(Transformer left, Transformer right);
  static Transformer scalar_product(Transformer inner, double c);
  static Transformer feature_union(Transformer left, Transformer right);
  static Transformer set_union(Transformer left, Transformer right);
  static Transformer set_intersect(Transformer left, Transformer right);
  static Transformer concat(Transformer left, Transformer right);

  NodeKind kind() const;
  bool is_leaf() const { return kind() == NodeKind::leaf; }

  // Leaf accessors.
  const std::string& leaf_kind() const;
  const Params& params() const;
  const std::shared_ptr<const LeafBehavior>& behavior() const;

  /// Then stages (size >= 2).
  const std::vector<Transformer>& stages() const;
  /// Cutoff / ScalarProduct operand.
  const Transformer& inner() const;
  /// Binary operands.
  const Transformer& left() const;
  const Transformer& right() const;
  std::int64_t cutoff_k() const;
  double scalar() const;

  Frame operator()(const Frame& input) const;

 private:
  struct Node;
  explicit Transformer(std::shared_ptr<const Node> node);

  std::shared_ptr<const Node> node_;

  friend bool struct_eq(const Transformer& a, const Transformer& b);
};

bool struct_eq(const Transformer& a, const Transformer& b);
inline bool operator==(const Transformer& a, const Transformer& b) {
  return struct_eq(a, b);
}

// Operator algebra. `**` (feature union) has no C++ spelling; use
// feature_union().
Transformer operator>>(const Transformer& a, const Transformer& b);
Transformer operator%(const Transformer& a, std::int64_t k);
Transformer operator+(const Transformer& a, const Transformer& b);
Transformer operator*(const Transformer& a, double c);
Transformer operator*(double c, const Transformer& a);
Transformer feature_union(const Transformer& a, const Transformer& b);
Transformer operator|(const Transformer& a, const Transformer& b);
Transformer operator&(const Transformer& a, const Transformer& b);
Transformer operator^(const Transformer& a, const Transformer& b);

/// Evaluates `t` on `input`.
Frame apply(const Transformer& t, const Frame& input);

using StageList = std::vector<Transformer>;

/// Top-level Then chain as a list of stages; any other node is a single
/// stage and is not descended into.
StageList flatten(const Transformer& t);
/// Inverse of flatten: identity for an empty list, the stage itself for one.
Transformer from_stages(const StageList& stages);

/// Human-readable rendering in the pipeline-expression syntax. Unlike
/// dsl::to_text it does not check leaf kinds against a registry.
std::string describe(const Transformer& t);

// Operator semantics over result frames.

/// Per qid, the first k rows after rank normalisation.
Frame eval_cutoff(const Frame& results, std::int64_t k);
/// Outer join on (qid, docno); scores summed with a missing side as 0.
Frame eval_linear_combine(const Frame& a, const Frame& b);
/// Every score multiplied by c, ranks reassigned.
Frame eval_scalar_product(const Frame& a, double c);
/// Outer join on (qid, docno) with a `features` column [score_a, score_b];
/// `score` is the left score (0 when the left side is missing).
Frame eval_feature_union(const Frame& a, const Frame& b);

enum class SetOp { union_, intersect };
/// Per-qid set union / intersection of docnos. Output is {qid, docno}
/// ordered by qid first appearance then docno.
Frame eval_set_op(const Frame& a, const Frame& b, SetOp op);
/// Per qid: rows of `a`, then rows of `b` with unseen docnos, shifted so
/// each appended score is below every score of `a`.
Frame eval_concat(const Frame& a, const Frame& b);

}  // namespace pipecache
