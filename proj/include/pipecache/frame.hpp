#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace pipecache {

/// Value kinds. The numeric tags are part of the binary encodings.
enum class ValueKind : std::uint8_t {
  text = 0,
  real = 1,
  integer = 2,
  real_list = 3,
};

using RealList = std::vector<double>;
using Value = std::variant<std::string, double, std::int64_t, RealList>;

ValueKind kind_of(const Value& value);
std::string_view kind_name(ValueKind kind);
std::optional<ValueKind> parse_kind(std::string_view name);

/// Bit-wise equality: reals compare by IEEE-754 bit pattern, so NaN == NaN
/// and 0.0 != -0.0.
bool bit_equal(const Value& a, const Value& b);
bool bit_equal(double a, double b);

struct Column {
  std::string name;
  ValueKind kind;

  friend bool operator==(const Column&, const Column&) = default;
};

using Row = std::vector<Value>;

/// Ordered relational table with named, typed columns. Row order is
/// significant. Equality is bit-exact.
class Frame {
 public:
  Frame() = default;
  explicit Frame(std::vector<Column> columns);
  Frame(std::vector<Column> columns, std::vector<Row> rows);

  const std::vector<Column>& columns() const { return columns_; }
  const std::vector<Row>& rows() const { return rows_; }
  std::size_t num_rows() const { return rows_.size(); }
  std::size_t num_columns() const { return columns_.size(); }
  bool empty() const { return rows_.empty(); }

  std::optional<std::size_t> column_index(std::string_view name) const;
  bool has_column(std::string_view name) const {
    return column_index(name).has_value();
  }
  /// Index of `name`, throwing PreconditionError if it is absent or of a
  /// different kind.
  std::size_t require_column(std::string_view name, ValueKind kind) const;

  const Row& row(std::size_t i) const { return rows_[i]; }
  const Value& at(std::size_t row, std::size_t col) const {
    return rows_[row][col];
  }
  const std::string& text(std::size_t row, std::size_t col) const {
    return std::get<std::string>(rows_[row][col]);
  }
  double real(std::size_t row, std::size_t col) const {
    return std::get<double>(rows_[row][col]);
  }
  std::int64_t integer(std::size_t row, std::size_t col) const {
    return std::get<std::int64_t>(rows_[row][col]);
  }

  void reserve(std::size_t n) { rows_.reserve(n); }
  /// Appends a row after checking arity and kinds.
  void append_row(Row row);

  /// Copy with `column` set to `values`; replaces an existing column of the
  /// same name in place, otherwise appends it.
  Frame with_column(const Column& column, std::vector<Value> values) const;
  Frame without_columns(std::span<const std::string> names) const;
  /// Rows at `indices`, in that order (indices may repeat).
  Frame select_rows(std::span<const std::size_t> indices) const;
  /// Frame with the same columns and no rows.
  Frame empty_like() const { return Frame(columns_); }

  friend bool operator==(const Frame& a, const Frame& b);

 private:
  void check_row(const Row& row) const;

  std::vector<Column> columns_;
  std::vector<Row> rows_;
};

/// Q, D, R and RA relation types.
enum class RelationKind { Q, D, R, RA };

std::vector<Column> required_columns(RelationKind kind);

struct ValidationReport {
  std::vector<std::string> problems;
  bool ok() const { return problems.empty(); }
};

/// Checks that `frame` has every required column of `kind` with the right
/// value kind. Extra columns are permitted.
ValidationReport validate(const Frame& frame, RelationKind kind);

/// Throws PreconditionError listing the report's problems if not ok.
void require_conforms(const Frame& frame, RelationKind kind,
                      std::string_view context);

/// Sorts each qid group by score descending then docno ascending (byte-wise)
/// and (re)assigns a 0-based integer `rank` column. Groups appear in order
/// of first appearance of their qid.
Frame assign_ranks(const Frame& frame);

/// Rows of `a` followed by rows of `b`; schemas must be identical.
Frame concat_rows(const Frame& a, const Frame& b);

/// Shortest decimal string that parses back to the same double.
std::string format_real(double value);

// TSV: line 1 is `#kinds:` + tab-separated kind names, line 2 is the header,
// then one row per line. Tab, newline, carriage return and backslash inside
// text are escaped as \t \n \r \\. real-list cells are comma-separated reals.
void write_tsv(std::ostream& out, const Frame& frame);
Frame read_tsv(std::istream& in);
void save_tsv(const std::filesystem::path& path, const Frame& frame);
Frame load_tsv(const std::filesystem::path& path);

}  // namespace pipecache
