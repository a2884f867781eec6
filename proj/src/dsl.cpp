#include "pipecache/dsl.hpp"

#include <charconv>
#include <cmath>
#include <optional>
#include <set>

#include "pipecache/errors.hpp"

namespace pipecache::dsl {

void Registry::add(std::string name, Factory factory) {
  if (name == "identity") {
    throw PreconditionError("'identity' is reserved");
  }
  factories_[std::move(name)] = std::move(factory);
}

void Registry::declare(std::string name) {
  auto kind = name;
  add(std::move(name), [kind](const Params& params) {
    return Transformer::declared_leaf(kind, params);
  });
}

bool Registry::contains(std::string_view name) const {
  return factories_.find(name) != factories_.end();
}

Transformer Registry::make(const std::string& name, const Params& params) const {
  auto it = factories_.find(name);
  if (it == factories_.end()) {
    throw PreconditionError("unknown transformer '" + name + "'");
  }
  return it->second(params);
}

std::vector<std::string> Registry::names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : factories_) out.push_back(name);
  return out;
}

namespace {

enum class Tok {
  end,
  name,
  number,
  string,
  lparen,
  rparen,
  comma,
  equals,
  then,     // >>
  concat,   // ^
  plus,
  pipe,
  amp,
  power,    // **
  star,
  percent,
};

std::string tok_name(Tok t) {
  switch (t) {
    case Tok::end:
      return "end of input";
    case Tok::name:
      return "name";
    case Tok::number:
      return "number";
    case Tok::string:
      return "string";
    case Tok::lparen:
      return "'('";
    case Tok::rparen:
      return "')'";
    case Tok::comma:
      return "','";
    case Tok::equals:
      return "'='";
    case Tok::then:
      return "'>>'";
    case Tok::concat:
      return "'^'";
    case Tok::plus:
      return "'+'";
    case Tok::pipe:
      return "'|'";
    case Tok::amp:
      return "'&'";
    case Tok::power:
      return "'**'";
    case Tok::star:
      return "'*'";
    case Tok::percent:
      return "'%'";
  }
  return "?";
}

struct Token {
  Tok kind = Tok::end;
  std::size_t offset = 0;
  std::string text;  // name / number lexeme / decoded string
};

bool is_name_start(char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_';
}
bool is_name_char(char c) { return is_name_start(c) || (c >= '0' && c <= '9'); }
bool is_digit(char c) { return c >= '0' && c <= '9'; }

class Parser {
 public:
  Parser(std::string_view src, const Registry& registry)
      : src_(src), registry_(registry) {
    advance();
  }

  Transformer parse_all() {
    auto t = expr();
    if (tok_.kind != Tok::end) {
      fail({">>", "^", "+", "|", "&", "**", "%", "*", "end of input"});
    }
    return t;
  }

 private:
  [[noreturn]] void fail(std::vector<std::string> expected,
                         std::optional<std::size_t> at = {},
                         std::string detail = "") {
    const std::size_t offset = at.value_or(tok_.offset);
    std::string message = "syntax error at offset " + std::to_string(offset);
    if (!detail.empty()) {
      message += ": " + detail;
    } else {
      message += ": found " + describe_current() + ", expected ";
      for (std::size_t i = 0; i < expected.size(); ++i) {
        if (i) message += i + 1 == expected.size() ? " or " : ", ";
        message += expected[i];
      }
    }
    throw SyntaxError(offset, std::move(expected), message);
  }

  std::string describe_current() const {
    if (tok_.kind == Tok::end) return "end of input";
    if (tok_.kind == Tok::name || tok_.kind == Tok::number) {
      return "'" + tok_.text + "'";
    }
    if (tok_.kind == Tok::string) return "string";
    return tok_name(tok_.kind);
  }

  void skip_space() {
    while (pos_ < src_.size() &&
           (src_[pos_] == ' ' || src_[pos_] == '\t' || src_[pos_] == '\n' ||
            src_[pos_] == '\r')) {
      ++pos_;
    }
  }

  void advance() {
    skip_space();
    tok_ = Token{};
    tok_.offset = pos_;
    if (pos_ >= src_.size()) return;
    const char c = src_[pos_];
    auto single = [&](Tok k, std::size_t len = 1) {
      tok_.kind = k;
      pos_ += len;
    };
    auto next_is = [&](char n) {
      return pos_ + 1 < src_.size() && src_[pos_ + 1] == n;
    };
    switch (c) {
      case '(':
        return single(Tok::lparen);
      case ')':
        return single(Tok::rparen);
      case ',':
        return single(Tok::comma);
      case '=':
        return single(Tok::equals);
      case '^':
        return single(Tok::concat);
      case '+':
        return single(Tok::plus);
      case '|':
        return single(Tok::pipe);
      case '&':
        return single(Tok::amp);
      case '%':
        return single(Tok::percent);
      case '*':
        return next_is('*') ? single(Tok::power, 2) : single(Tok::star);
      case '>':
        if (next_is('>')) return single(Tok::then, 2);
        fail({">>"}, pos_, "stray '>' (did you mean '>>'?)");
      case '\'':
        return lex_string();
      default:
        break;
    }
    if (is_name_start(c)) {
      const auto start = pos_;
      while (pos_ < src_.size() && is_name_char(src_[pos_])) ++pos_;
      tok_.kind = Tok::name;
      tok_.text = std::string(src_.substr(start, pos_ - start));
      return;
    }
    if (is_digit(c) || c == '-') return lex_number();
    fail({"name", "number", "string", "operator"}, pos_,
         std::string("unexpected character '") + c + "'");
  }

  void lex_string() {
    const auto start = pos_++;
    std::string out;
    while (true) {
      if (pos_ >= src_.size()) {
        fail({"'"}, start, "unterminated string literal");
      }
      char c = src_[pos_++];
      if (c == '\'') break;
      if (c == '\\') {
        if (pos_ >= src_.size()) fail({"'"}, start, "unterminated string literal");
        const char e = src_[pos_++];
        if (e != '\'' && e != '\\') {
          fail({"\\'", "\\\\"}, pos_ - 2, "unknown escape in string literal");
        }
        c = e;
      }
      out += c;
    }
    tok_.kind = Tok::string;
    tok_.text = std::move(out);
  }

  void lex_number() {
    const auto start = pos_;
    if (src_[pos_] == '-') ++pos_;
    auto digits = [&] {
      const auto from = pos_;
      while (pos_ < src_.size() && is_digit(src_[pos_])) ++pos_;
      return pos_ > from;
    };
    if (!digits()) fail({"digit"}, pos_, "malformed number literal");
    if (pos_ < src_.size() && src_[pos_] == '.') {
      ++pos_;
      if (!digits()) fail({"digit"}, pos_, "malformed number literal");
    }
    if (pos_ < src_.size() && (src_[pos_] == 'e' || src_[pos_] == 'E')) {
      ++pos_;
      if (pos_ < src_.size() && (src_[pos_] == '+' || src_[pos_] == '-')) ++pos_;
      if (!digits()) fail({"digit"}, pos_, "malformed number literal");
    }
    if (pos_ < src_.size() && is_name_char(src_[pos_])) {
      fail({"operator"}, pos_, "malformed number literal");
    }
    tok_.kind = Tok::number;
    tok_.text = std::string(src_.substr(start, pos_ - start));
  }

  bool accept(Tok k) {
    if (tok_.kind != k) return false;
    advance();
    return true;
  }

  Token expect(Tok k) {
    if (tok_.kind != k) fail({tok_name(k)});
    Token t = tok_;
    advance();
    return t;
  }

  static bool is_integer_lexeme(const std::string& s) {
    return s.find_first_of(".eE") == std::string::npos;
  }

  std::int64_t to_integer(const Token& t) {
    std::int64_t v = 0;
    auto [p, ec] = std::from_chars(t.text.data(), t.text.data() + t.text.size(), v);
    if (ec != std::errc() || p != t.text.data() + t.text.size()) {
      fail({"integer"}, t.offset, "integer literal out of range: " + t.text);
    }
    return v;
  }

  double to_real(const Token& t) {
    double v = 0;
    auto [p, ec] = std::from_chars(t.text.data(), t.text.data() + t.text.size(), v);
    if (ec != std::errc() || p != t.text.data() + t.text.size() ||
        !std::isfinite(v)) {
      fail({"number"}, t.offset, "number literal out of range: " + t.text);
    }
    return v;
  }

  Transformer expr() {
    auto left = alt();
    while (true) {
      if (accept(Tok::then)) {
        left = left >> alt();
      } else if (accept(Tok::concat)) {
        left = left ^ alt();
      } else {
        return left;
      }
    }
  }

  Transformer alt() {
    auto left = feature_union_level();
    while (true) {
      if (accept(Tok::plus)) {
        left = left + feature_union_level();
      } else if (accept(Tok::pipe)) {
        left = left | feature_union_level();
      } else if (accept(Tok::amp)) {
        left = left & feature_union_level();
      } else {
        return left;
      }
    }
  }

  Transformer feature_union_level() {
    auto left = postfix();
    while (accept(Tok::power)) left = feature_union(left, postfix());
    return left;
  }

  Transformer postfix() {
    auto t = primary();
    while (true) {
      if (accept(Tok::percent)) {
        if (tok_.kind != Tok::number || !is_integer_lexeme(tok_.text)) {
          fail({"positive integer"});
        }
        const auto k = to_integer(tok_);
        if (k <= 0) fail({"positive integer"}, tok_.offset, "rank cutoff must be positive");
        advance();
        t = Transformer::cutoff(t, k);
      } else if (accept(Tok::star)) {
        if (tok_.kind != Tok::number) fail({"number"});
        const double c = to_real(tok_);
        advance();
        t = Transformer::scalar_product(t, c);
      } else {
        return t;
      }
    }
  }

  Transformer primary() {
    if (accept(Tok::lparen)) {
      auto t = expr();
      expect(Tok::rparen);
      return t;
    }
    if (tok_.kind != Tok::name) fail({"name", "'('", "identity"});
    const Token name = tok_;
    advance();
    if (name.text == "identity") return Transformer::identity();
    if (!registry_.contains(name.text)) {
      fail({"name"}, name.offset, "unknown transformer '" + name.text + "'");
    }
    Params params;
    if (accept(Tok::lparen)) {
      if (!accept(Tok::rparen)) {
        while (true) {
          const Token arg = expect(Tok::name);
          expect(Tok::equals);
          ParamValue value;
          if (tok_.kind == Tok::string) {
            value = tok_.text;
          } else if (tok_.kind == Tok::number) {
            if (is_integer_lexeme(tok_.text)) {
              value = to_integer(tok_);
            } else {
              value = to_real(tok_);
            }
          } else {
            fail({"number", "string"});
          }
          advance();
          if (!params.emplace(arg.text, std::move(value)).second) {
            fail({"name"}, arg.offset, "duplicate argument '" + arg.text + "'");
          }
          if (accept(Tok::rparen)) break;
          if (tok_.kind != Tok::comma) fail({"','", "')'"});
          advance();
        }
      }
    }
    try {
      return registry_.make(name.text, params);
    } catch (const SyntaxError&) {
      throw;
    } catch (const Error& e) {
      fail({}, name.offset, "cannot construct '" + name.text + "': " + e.what());
    }
  }

  std::string_view src_;
  const Registry& registry_;
  std::size_t pos_ = 0;
  Token tok_;
};

void check_renderable(const Transformer& t, const Registry& registry) {
  switch (t.kind()) {
    case NodeKind::identity:
      return;
    case NodeKind::leaf:
      if (!registry.contains(t.leaf_kind())) {
        throw PreconditionError("transformer kind '" + t.leaf_kind() +
                                "' is not registered");
      }
      for (const auto& [name, value] : t.params()) {
        if (name.empty() || !is_name_start(name[0]) ||
            !std::all_of(name.begin(), name.end(), is_name_char)) {
          throw PreconditionError("parameter name '" + name +
                                  "' is not an identifier");
        }
        if (auto* d = std::get_if<double>(&value); d && !std::isfinite(*d)) {
          throw PreconditionError("parameter '" + name + "' is not finite");
        }
      }
      return;
    case NodeKind::then:
      for (const auto& s : t.stages()) check_renderable(s, registry);
      return;
    case NodeKind::cutoff:
      check_renderable(t.inner(), registry);
      return;
    case NodeKind::scalar_product:
      if (!std::isfinite(t.scalar())) {
        throw PreconditionError("scalar product factor is not finite");
      }
      check_renderable(t.inner(), registry);
      return;
    default:
      check_renderable(t.left(), registry);
      check_renderable(t.right(), registry);
      return;
  }
}

}  // namespace

Transformer parse(std::string_view text, const Registry& registry) {
  return Parser(text, registry).parse_all();
}

std::string to_text(const Transformer& t, const Registry& registry) {
  check_renderable(t, registry);
  return describe(t);
}

}  // namespace pipecache::dsl
