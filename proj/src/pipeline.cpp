#include "pipecache/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

#include "pipecache/errors.hpp"

namespace pipecache {

struct Transformer::Node {
  NodeKind kind = NodeKind::identity;
  std::string leaf_kind;
  Params params;
  std::shared_ptr<const LeafBehavior> behavior;
  std::vector<Transformer> children;
  std::int64_t k = 0;
  double c = 0.0;
};

namespace {

class FunctionLeaf final : public LeafBehavior {
 public:
  explicit FunctionLeaf(std::function<Frame(const Frame&)> fn)
      : fn_(std::move(fn)) {}
  Frame apply(const Frame& input) const override { return fn_(input); }

 private:
  std::function<Frame(const Frame&)> fn_;
};

bool param_equal(const ParamValue& a, const ParamValue& b) {
  if (a.index() != b.index()) return false;
  if (const auto* x = std::get_if<double>(&a)) {
    return bit_equal(*x, std::get<double>(b));
  }
  return a == b;
}

}  // namespace

bool params_equal(const Params& a, const Params& b) {
  return std::equal(a.begin(), a.end(), b.begin(), b.end(),
                    [](const auto& x, const auto& y) {
                      return x.first == y.first &&
                             param_equal(x.second, y.second);
                    });
}

Transformer::Transformer() {
  static const auto identity_node = std::make_shared<const Node>();
  node_ = identity_node;
}

Transformer::Transformer(std::shared_ptr<const Node> node)
    : node_(std::move(node)) {}

Transformer Transformer::leaf(std::string kind, Params params,
                              std::shared_ptr<const LeafBehavior> behavior) {
  if (kind.empty()) throw PreconditionError("leaf kind must be non-empty");
  auto node = std::make_shared<Node>();
  node->kind = NodeKind::leaf;
  node->leaf_kind = std::move(kind);
  node->params = std::move(params);
  node->behavior = std::move(behavior);
  return Transformer(std::move(node));
}

Transformer Transformer::leaf(std::string kind, Params params,
                              std::function<Frame(const Frame&)> fn) {
  return leaf(std::move(kind), std::move(params),
              std::make_shared<FunctionLeaf>(std::move(fn)));
}

Transformer Transformer::declared_leaf(std::string kind, Params params) {
  return leaf(std::move(kind), std::move(params),
              std::shared_ptr<const LeafBehavior>{});
}

Transformer Transformer::then(std::vector<Transformer> stages) {
  std::vector<Transformer> flat;
  for (auto& s : stages) {
    if (s.kind() == NodeKind::then) {
      flat.insert(flat.end(), s.stages().begin(), s.stages().end());
    } else {
      flat.push_back(std::move(s));
    }
  }
  if (flat.empty()) return Transformer();
  if (flat.size() == 1) return flat.front();
  auto node = std::make_shared<Node>();
  node->kind = NodeKind::then;
  node->children = std::move(flat);
  return Transformer(std::move(node));
}

Transformer Transformer::cutoff(Transformer inner, std::int64_t k) {
  if (k <= 0) throw PreconditionError("rank cutoff must be positive");
  auto node = std::make_shared<Node>();
  node->kind = NodeKind::cutoff;
  node->children = {std::move(inner)};
  node->k = k;
  return Transformer(std::move(node));
}

Transformer Transformer::scalar_product(Transformer inner, double c) {
  auto node = std::make_shared<Node>();
  node->kind = NodeKind::scalar_product;
  node->children = {std::move(inner)};
  node->c = c;
  return Transformer(std::move(node));
}

#define PIPECACHE_BINARY(fn, KIND)                                  \
  Transformer Transformer::fn(Transformer left, Transformer right) { \
    auto node = std::make_shared<Node>();                           \
    node->kind = NodeKind::KIND;                                    \
    node->children = {std::move(left), std::move(right)};           \
    return Transformer(std::move(node));                            \
  }

PIPECACHE_BINARY(linear_combine, linear_combine)
PIPECACHE_BINARY(feature_union, feature_union)
PIPECACHE_BINARY(set_union, set_union)
PIPECACHE_BINARY(set_intersect, set_intersect)
PIPECACHE_BINARY(concat, concat)

#undef PIPECACHE_BINARY

NodeKind Transformer::kind() const { return node_->kind; }

const std::string& Transformer::leaf_kind() const {
  if (!is_leaf()) throw PreconditionError("not a leaf transformer");
  return node_->leaf_kind;
}

const Params& Transformer::params() const {
  if (!is_leaf()) throw PreconditionError("not a leaf transformer");
  return node_->params;
}

const std::shared_ptr<const LeafBehavior>& Transformer::behavior() const {
  if (!is_leaf()) throw PreconditionError("not a leaf transformer");
  return node_->behavior;
}

const std::vector<Transformer>& Transformer::stages() const {
  if (kind() != NodeKind::then) throw PreconditionError("not a Then node");
  return node_->children;
}

const Transformer& Transformer::inner() const {
  if (kind() != NodeKind::cutoff && kind() != NodeKind::scalar_product) {
    throw PreconditionError("node has no single operand");
  }
  return node_->children[0];
}

const Transformer& Transformer::left() const {
  if (node_->children.size() != 2 || kind() == NodeKind::then) {
    throw PreconditionError("not a binary operator node");
  }
  return node_->children[0];
}

const Transformer& Transformer::right() const {
  if (node_->children.size() != 2 || kind() == NodeKind::then) {
    throw PreconditionError("not a binary operator node");
  }
  return node_->children[1];
}

std::int64_t Transformer::cutoff_k() const {
  if (kind() != NodeKind::cutoff) throw PreconditionError("not a cutoff");
  return node_->k;
}

double Transformer::scalar() const {
  if (kind() != NodeKind::scalar_product) {
    throw PreconditionError("not a scalar product");
  }
  return node_->c;
}

Frame Transformer::operator()(const Frame& input) const {
  return apply(*this, input);
}

bool struct_eq(const Transformer& a, const Transformer& b) {
  if (a.node_ == b.node_) return true;
  const auto& x = *a.node_;
  const auto& y = *b.node_;
  if (x.kind != y.kind) return false;
  switch (x.kind) {
    case NodeKind::identity:
      return true;
    case NodeKind::leaf:
      return x.leaf_kind == y.leaf_kind && params_equal(x.params, y.params);
    case NodeKind::cutoff:
      if (x.k != y.k) return false;
      break;
    case NodeKind::scalar_product:
      if (!bit_equal(x.c, y.c)) return false;
      break;
    default:
      break;
  }
  return std::equal(x.children.begin(), x.children.end(),
                    y.children.begin(), y.children.end(),
                    [](const Transformer& l, const Transformer& r) {
                      return struct_eq(l, r);
                    });
}

Transformer operator>>(const Transformer& a, const Transformer& b) {
  return Transformer::then({a, b});
}
Transformer operator%(const Transformer& a, std::int64_t k) {
  return Transformer::cutoff(a, k);
}
Transformer operator+(const Transformer& a, const Transformer& b) {
  return Transformer::linear_combine(a, b);
}
Transformer operator*(const Transformer& a, double c) {
  return Transformer::scalar_product(a, c);
}
Transformer operator*(double c, const Transformer& a) {
  return Transformer::scalar_product(a, c);
}
Transformer feature_union(const Transformer& a, const Transformer& b) {
  return Transformer::feature_union(a, b);
}
Transformer operator|(const Transformer& a, const Transformer& b) {
  return Transformer::set_union(a, b);
}
Transformer operator&(const Transformer& a, const Transformer& b) {
  return Transformer::set_intersect(a, b);
}
Transformer operator^(const Transformer& a, const Transformer& b) {
  return Transformer::concat(a, b);
}

Frame apply(const Transformer& t, const Frame& input) {
  switch (t.kind()) {
    case NodeKind::identity:
      return input;
    case NodeKind::leaf: {
      const auto& behavior = t.behavior();
      if (!behavior) {
        throw PreconditionError("leaf '" + t.leaf_kind() +
                                "' has no implementation");
      }
      return behavior->apply(input);
    }
    case NodeKind::then: {
      Frame current = input;
      for (const auto& stage : t.stages()) current = apply(stage, current);
      return current;
    }
    case NodeKind::cutoff:
      return eval_cutoff(apply(t.inner(), input), t.cutoff_k());
    case NodeKind::scalar_product:
      return eval_scalar_product(apply(t.inner(), input), t.scalar());
    case NodeKind::linear_combine:
      return eval_linear_combine(apply(t.left(), input),
                                 apply(t.right(), input));
    case NodeKind::feature_union:
      return eval_feature_union(apply(t.left(), input),
                                apply(t.right(), input));
    case NodeKind::set_union:
      return eval_set_op(apply(t.left(), input), apply(t.right(), input),
                         SetOp::union_);
    case NodeKind::set_intersect:
      return eval_set_op(apply(t.left(), input), apply(t.right(), input),
                         SetOp::intersect);
    case NodeKind::concat:
      return eval_concat(apply(t.left(), input), apply(t.right(), input));
  }
  throw PreconditionError("unknown node kind");
}

StageList flatten(const Transformer& t) {
  if (t.kind() == NodeKind::then) return t.stages();
  return {t};
}

Transformer from_stages(const StageList& stages) {
  return Transformer::then(stages);
}

namespace {

int precedence(const Transformer& t) {
  switch (t.kind()) {
    case NodeKind::then:
    case NodeKind::concat:
      return 1;
    case NodeKind::linear_combine:
    case NodeKind::set_union:
    case NodeKind::set_intersect:
      return 2;
    case NodeKind::feature_union:
      return 3;
    case NodeKind::cutoff:
    case NodeKind::scalar_product:
      return 4;
    case NodeKind::leaf:
    case NodeKind::identity:
      return 5;
  }
  return 5;
}

std::string render_real(double v) {
  std::string s = format_real(v);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

std::string render_string(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'' || c == '\\') out += '\\';
    out += c;
  }
  out += '\'';
  return out;
}

void render(const Transformer& t, std::string& out);

void render_operand(const Transformer& t, bool wrap, std::string& out) {
  if (wrap) out += '(';
  render(t, out);
  if (wrap) out += ')';
}

const char* symbol(NodeKind kind) {
  switch (kind) {
    case NodeKind::linear_combine:
      return " + ";
    case NodeKind::feature_union:
      return " ** ";
    case NodeKind::set_union:
      return " | ";
    case NodeKind::set_intersect:
      return " & ";
    case NodeKind::concat:
      return " ^ ";
    default:
      return " ? ";
  }
}

void render(const Transformer& t, std::string& out) {
  const int prec = precedence(t);
  switch (t.kind()) {
    case NodeKind::identity:
      out += "identity";
      return;
    case NodeKind::leaf: {
      out += t.leaf_kind();
      if (t.params().empty()) return;
      out += '(';
      bool first = true;
      for (const auto& [name, value] : t.params()) {
        if (!first) out += ", ";
        first = false;
        out += name;
        out += '=';
        std::visit(
            [&](const auto& v) {
              using T = std::decay_t<decltype(v)>;
              if constexpr (std::is_same_v<T, std::string>) {
                out += render_string(v);
              } else if constexpr (std::is_same_v<T, double>) {
                out += render_real(v);
              } else {
                out += std::to_string(v);
              }
            },
            value);
      }
      out += ')';
      return;
    }
    case NodeKind::then: {
      const auto& stages = t.stages();
      for (std::size_t i = 0; i < stages.size(); ++i) {
        if (i) out += " >> ";
        render_operand(stages[i], i > 0 && precedence(stages[i]) <= prec,
                       out);
      }
      return;
    }
    case NodeKind::cutoff:
      render_operand(t.inner(), precedence(t.inner()) < prec, out);
      out += " % " + std::to_string(t.cutoff_k());
      return;
    case NodeKind::scalar_product:
      render_operand(t.inner(), precedence(t.inner()) < prec, out);
      out += " * " + render_real(t.scalar());
      return;
    default:
      render_operand(t.left(), precedence(t.left()) < prec, out);
      out += symbol(t.kind());
      render_operand(t.right(), precedence(t.right()) <= prec, out);
      return;
  }
}

// Column indices of an R frame.
struct RCols {
  std::size_t qid, docno, score;
};

RCols r_columns(const Frame& f, const char* op) {
  require_conforms(f, RelationKind::R, op);
  return {*f.column_index("qid"), *f.column_index("docno"),
          *f.column_index("score")};
}

// Output schema for binary operators: a's columns restricted to the R
// columns plus extra columns that both sides carry with the same kind.
// Values of extra columns come from a when present, else from b.
struct JoinSchema {
  std::vector<Column> columns;
  // For each output column, the source index in a and in b.
  std::vector<std::size_t> from_a, from_b;
};

JoinSchema join_schema(const Frame& a, const Frame& b) {
  JoinSchema s;
  for (std::size_t i = 0; i < a.num_columns(); ++i) {
    const auto& col = a.columns()[i];
    auto j = b.column_index(col.name);
    if (!j || b.columns()[*j].kind != col.kind) continue;
    if (col.name == "features") continue;
    s.columns.push_back(col);
    s.from_a.push_back(i);
    s.from_b.push_back(*j);
  }
  return s;
}

struct PairKey {
  std::string qid, docno;
  bool operator==(const PairKey&) const = default;
};

struct PairKeyHash {
  std::size_t operator()(const PairKey& k) const {
    return std::hash<std::string>()(k.qid) * 31 ^
           std::hash<std::string>()(k.docno);
  }
};

struct JoinedRow {
  std::optional<std::size_t> a_row, b_row;
};

// Outer join on (qid, docno): rows of a in order, then b-only rows in order.
// The first occurrence of a duplicated pair wins.
std::vector<JoinedRow> outer_join(const Frame& a, const RCols& ca,
                                  const Frame& b, const RCols& cb) {
  std::unordered_map<PairKey, std::size_t, PairKeyHash> index;
  std::vector<JoinedRow> joined;
  for (std::size_t r = 0; r < a.num_rows(); ++r) {
    PairKey key{a.text(r, ca.qid), a.text(r, ca.docno)};
    if (index.try_emplace(std::move(key), joined.size()).second) {
      joined.push_back({r, std::nullopt});
    }
  }
  for (std::size_t r = 0; r < b.num_rows(); ++r) {
    PairKey key{b.text(r, cb.qid), b.text(r, cb.docno)};
    auto [it, inserted] = index.try_emplace(std::move(key), joined.size());
    if (inserted) {
      joined.push_back({std::nullopt, r});
    } else if (!joined[it->second].b_row) {
      joined[it->second].b_row = r;
    }
  }
  return joined;
}

Row joined_values(const JoinSchema& s, const Frame& a, const Frame& b,
                  const JoinedRow& j) {
  Row row;
  row.reserve(s.columns.size());
  for (std::size_t c = 0; c < s.columns.size(); ++c) {
    row.push_back(j.a_row ? a.at(*j.a_row, s.from_a[c])
                          : b.at(*j.b_row, s.from_b[c]));
  }
  return row;
}

}  // namespace

std::string describe(const Transformer& t) {
  std::string out;
  render(t, out);
  return out;
}

Frame eval_cutoff(const Frame& results, std::int64_t k) {
  if (k <= 0) throw PreconditionError("rank cutoff must be positive");
  require_conforms(results, RelationKind::R, "rank cutoff");
  Frame ranked = assign_ranks(results);
  const auto rank = *ranked.column_index("rank");
  std::vector<std::size_t> keep;
  for (std::size_t r = 0; r < ranked.num_rows(); ++r) {
    if (ranked.integer(r, rank) < k) keep.push_back(r);
  }
  return ranked.select_rows(keep);
}

Frame eval_linear_combine(const Frame& a, const Frame& b) {
  const auto ca = r_columns(a, "linear combine (left)");
  const auto cb = r_columns(b, "linear combine (right)");
  const auto schema = join_schema(a, b);
  std::size_t score_idx = 0;
  for (std::size_t c = 0; c < schema.columns.size(); ++c) {
    if (schema.columns[c].name == "score") score_idx = c;
  }
  Frame out(schema.columns);
  for (const auto& j : outer_join(a, ca, b, cb)) {
    Row row = joined_values(schema, a, b, j);
    const double sa = j.a_row ? a.real(*j.a_row, ca.score) : 0.0;
    const double sb = j.b_row ? b.real(*j.b_row, cb.score) : 0.0;
    row[score_idx] = sa + sb;
    out.append_row(std::move(row));
  }
  return assign_ranks(out);
}

Frame eval_scalar_product(const Frame& a, double c) {
  const auto ca = r_columns(a, "scalar product");
  std::vector<Value> scores;
  scores.reserve(a.num_rows());
  for (std::size_t r = 0; r < a.num_rows(); ++r) {
    scores.emplace_back(a.real(r, ca.score) * c);
  }
  return assign_ranks(
      a.with_column({"score", ValueKind::real}, std::move(scores)));
}

Frame eval_feature_union(const Frame& a, const Frame& b) {
  const auto ca = r_columns(a, "feature union (left)");
  const auto cb = r_columns(b, "feature union (right)");
  auto schema = join_schema(a, b);
  std::size_t score_idx = 0;
  for (std::size_t c = 0; c < schema.columns.size(); ++c) {
    if (schema.columns[c].name == "score") score_idx = c;
  }
  auto columns = schema.columns;
  columns.push_back({"features", ValueKind::real_list});
  Frame out(std::move(columns));
  for (const auto& j : outer_join(a, ca, b, cb)) {
    Row row = joined_values(schema, a, b, j);
    const double sa = j.a_row ? a.real(*j.a_row, ca.score) : 0.0;
    const double sb = j.b_row ? b.real(*j.b_row, cb.score) : 0.0;
    row[score_idx] = sa;
    row.emplace_back(RealList{sa, sb});
    out.append_row(std::move(row));
  }
  return assign_ranks(out);
}

Frame eval_set_op(const Frame& a, const Frame& b, SetOp op) {
  const auto ca = r_columns(a, "set operation (left)");
  const auto cb = r_columns(b, "set operation (right)");

  std::vector<std::string> qid_order;
  std::unordered_map<std::string, std::size_t> qid_pos;
  auto note_qid = [&](const std::string& q) {
    if (qid_pos.try_emplace(q, qid_order.size()).second) {
      qid_order.push_back(q);
    }
  };
  for (std::size_t r = 0; r < a.num_rows(); ++r) note_qid(a.text(r, ca.qid));
  for (std::size_t r = 0; r < b.num_rows(); ++r) note_qid(b.text(r, cb.qid));

  std::vector<std::vector<std::string>> docs_a(qid_order.size());
  std::vector<std::vector<std::string>> docs_b(qid_order.size());
  for (std::size_t r = 0; r < a.num_rows(); ++r) {
    docs_a[qid_pos[a.text(r, ca.qid)]].push_back(a.text(r, ca.docno));
  }
  for (std::size_t r = 0; r < b.num_rows(); ++r) {
    docs_b[qid_pos[b.text(r, cb.qid)]].push_back(b.text(r, cb.docno));
  }

  Frame out({{"qid", ValueKind::text}, {"docno", ValueKind::text}});
  for (std::size_t q = 0; q < qid_order.size(); ++q) {
    auto& x = docs_a[q];
    auto& y = docs_b[q];
    std::sort(x.begin(), x.end());
    x.erase(std::unique(x.begin(), x.end()), x.end());
    std::sort(y.begin(), y.end());
    y.erase(std::unique(y.begin(), y.end()), y.end());
    std::vector<std::string> result;
    if (op == SetOp::union_) {
      std::set_union(x.begin(), x.end(), y.begin(), y.end(),
                     std::back_inserter(result));
    } else {
      std::set_intersection(x.begin(), x.end(), y.begin(), y.end(),
                            std::back_inserter(result));
    }
    for (auto& d : result) out.append_row({qid_order[q], std::move(d)});
  }
  return out;
}

Frame eval_concat(const Frame& a, const Frame& b) {
  const auto ca = r_columns(a, "concatenate (left)");
  const auto cb = r_columns(b, "concatenate (right)");
  const auto schema = join_schema(a, b);
  std::size_t score_idx = 0;
  for (std::size_t c = 0; c < schema.columns.size(); ++c) {
    if (schema.columns[c].name == "score") score_idx = c;
  }

  struct Group {
    std::vector<std::size_t> a_rows, b_rows;
    std::unordered_set<std::string> a_docs;
  };
  std::vector<std::string> qid_order;
  std::unordered_map<std::string, Group> groups;
  auto group_for = [&](const std::string& q) -> Group& {
    auto [it, inserted] = groups.try_emplace(q);
    if (inserted) qid_order.push_back(q);
    return it->second;
  };
  for (std::size_t r = 0; r < a.num_rows(); ++r) {
    auto& g = group_for(a.text(r, ca.qid));
    g.a_rows.push_back(r);
    g.a_docs.insert(a.text(r, ca.docno));
  }
  for (std::size_t r = 0; r < b.num_rows(); ++r) {
    auto& g = group_for(b.text(r, cb.qid));
    if (g.a_docs.insert(b.text(r, cb.docno)).second) g.b_rows.push_back(r);
  }

  Frame out(schema.columns);
  for (const auto& q : qid_order) {
    const auto& g = groups[q];
    for (auto r : g.a_rows) {
      out.append_row(joined_values(schema, a, b, {r, std::nullopt}));
    }
    double shift = 0.0;
    if (!g.a_rows.empty() && !g.b_rows.empty()) {
      double min_a = a.real(g.a_rows[0], ca.score);
      for (auto r : g.a_rows) min_a = std::min(min_a, a.real(r, ca.score));
      double max_b = b.real(g.b_rows[0], cb.score);
      for (auto r : g.b_rows) max_b = std::max(max_b, b.real(r, cb.score));
      shift = min_a - max_b - 1.0;
    }
    for (auto r : g.b_rows) {
      Row row = joined_values(schema, a, b, {std::nullopt, r});
      if (!g.a_rows.empty()) row[score_idx] = b.real(r, cb.score) + shift;
      out.append_row(std::move(row));
    }
  }
  return assign_ranks(out);
}

}  // namespace pipecache
