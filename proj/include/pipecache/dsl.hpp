#pragma once

#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "pipecache/pipeline.hpp"

namespace pipecache::dsl {

/// Leaf name -> factory. Factories receive the call's arguments and must
/// return a leaf of the same name for to_text round trips.
class Registry {
 public:
  using Factory = std::function<Transformer(const Params&)>;

  void add(std::string name, Factory factory);
  /// Registers `name` as a leaf with identity only (see
  /// Transformer::declared_leaf).
  void declare(std::string name);

  bool contains(std::string_view name) const;
  Transformer make(const std::string& name, const Params& params) const;
  std::vector<std::string> names() const;

 private:
  std::map<std::string, Factory, std::less<>> factories_;
};

/// Parses a pipeline expression.
///
///   expr    = alt { (">>" | "^") alt }
///   alt     = union { ("+" | "|" | "&") union }
///   union   = post { "**" post }
///   post    = primary { "%" integer | "*" number }
///   primary = "(" expr ")" | "identity" | name [ "(" [ arg { "," arg } ] ")" ]
///   arg     = name "=" ( number | string )
///
/// Binary operators are left-associative. Throws SyntaxError carrying the
/// byte offset and the set of expected tokens.
Transformer parse(std::string_view text, const Registry& registry);

/// Minimal-parentheses rendering accepted by parse. Throws
/// PreconditionError for leaf kinds missing from `registry` and for
/// non-finite reals.
std::string to_text(const Transformer& t, const Registry& registry);

}  // namespace pipecache::dsl
