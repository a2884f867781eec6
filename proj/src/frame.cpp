#include "pipecache/frame.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <unordered_map>

#include "pipecache/errors.hpp"

namespace pipecache {

ValueKind kind_of(const Value& value) {
  return static_cast<ValueKind>(value.index());
}

std::string_view kind_name(ValueKind kind) {
  switch (kind) {
    case ValueKind::text:
      return "text";
    case ValueKind::real:
      return "real";
    case ValueKind::integer:
      return "integer";
    case ValueKind::real_list:
      return "real-list";
  }
  return "?";
}

std::optional<ValueKind> parse_kind(std::string_view name) {
  for (auto kind : {ValueKind::text, ValueKind::real, ValueKind::integer,
                    ValueKind::real_list}) {
    if (kind_name(kind) == name) return kind;
  }
  return std::nullopt;
}

bool bit_equal(double a, double b) {
  return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b);
}

bool bit_equal(const Value& a, const Value& b) {
  if (a.index() != b.index()) return false;
  switch (kind_of(a)) {
    case ValueKind::text:
      return std::get<std::string>(a) == std::get<std::string>(b);
    case ValueKind::real:
      return bit_equal(std::get<double>(a), std::get<double>(b));
    case ValueKind::integer:
      return std::get<std::int64_t>(a) == std::get<std::int64_t>(b);
    case ValueKind::real_list: {
      const auto& x = std::get<RealList>(a);
      const auto& y = std::get<RealList>(b);
      return std::equal(x.begin(), x.end(), y.begin(), y.end(),
                        [](double l, double r) { return bit_equal(l, r); });
    }
  }
  return false;
}

Frame::Frame(std::vector<Column> columns) : columns_(std::move(columns)) {
  for (std::size_t i = 0; i < columns_.size(); ++i) {
    for (std::size_t j = i + 1; j < columns_.size(); ++j) {
      if (columns_[i].name == columns_[j].name) {
        throw PreconditionError("duplicate column name '" + columns_[i].name +
                                "'");
      }
    }
  }
}

Frame::Frame(std::vector<Column> columns, std::vector<Row> rows)
    : Frame(std::move(columns)) {
  for (const auto& row : rows) check_row(row);
  rows_ = std::move(rows);
}

std::optional<std::size_t> Frame::column_index(std::string_view name) const {
  for (std::size_t i = 0; i < columns_.size(); ++i) {
    if (columns_[i].name == name) return i;
  }
  return std::nullopt;
}

std::size_t Frame::require_column(std::string_view name,
                                  ValueKind kind) const {
  auto idx = column_index(name);
  if (!idx) {
    throw PreconditionError("missing required column '" + std::string(name) +
                            "'");
  }
  if (columns_[*idx].kind != kind) {
    throw PreconditionError("column '" + std::string(name) + "' has kind " +
                            std::string(kind_name(columns_[*idx].kind)) +
                            ", expected " + std::string(kind_name(kind)));
  }
  return *idx;
}

void Frame::check_row(const Row& row) const {
  if (row.size() != columns_.size()) {
    throw PreconditionError("row has " + std::to_string(row.size()) +
                            " values, frame has " +
                            std::to_string(columns_.size()) + " columns");
  }
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (kind_of(row[i]) != columns_[i].kind) {
      throw PreconditionError("value kind mismatch in column '" +
                              columns_[i].name + "'");
    }
  }
}

void Frame::append_row(Row row) {
  check_row(row);
  rows_.push_back(std::move(row));
}

Frame Frame::with_column(const Column& column,
                         std::vector<Value> values) const {
  if (values.size() != rows_.size()) {
    throw PreconditionError("column '" + column.name + "' has " +
                            std::to_string(values.size()) +
                            " values for " + std::to_string(rows_.size()) +
                            " rows");
  }
  for (const auto& v : values) {
    if (kind_of(v) != column.kind) {
      throw PreconditionError("value kind mismatch in column '" +
                              column.name + "'");
    }
  }
  Frame out;
  out.columns_ = columns_;
  out.rows_ = rows_;
  auto idx = column_index(column.name);
  if (idx) {
    out.columns_[*idx] = column;
    for (std::size_t r = 0; r < rows_.size(); ++r) {
      out.rows_[r][*idx] = std::move(values[r]);
    }
  } else {
    out.columns_.push_back(column);
    for (std::size_t r = 0; r < rows_.size(); ++r) {
      out.rows_[r].push_back(std::move(values[r]));
    }
  }
  return out;
}

Frame Frame::without_columns(std::span<const std::string> names) const {
  std::vector<std::size_t> keep;
  std::vector<Column> cols;
  for (std::size_t i = 0; i < columns_.size(); ++i) {
    if (std::find(names.begin(), names.end(), columns_[i].name) ==
        names.end()) {
      keep.push_back(i);
      cols.push_back(columns_[i]);
    }
  }
  Frame out(std::move(cols));
  out.rows_.reserve(rows_.size());
  for (const auto& row : rows_) {
    Row r;
    r.reserve(keep.size());
    for (auto i : keep) r.push_back(row[i]);
    out.rows_.push_back(std::move(r));
  }
  return out;
}

Frame Frame::select_rows(std::span<const std::size_t> indices) const {
  Frame out(columns_);
  out.rows_.reserve(indices.size());
  for (auto i : indices) out.rows_.push_back(rows_.at(i));
  return out;
}

bool operator==(const Frame& a, const Frame& b) {
  if (a.columns_ != b.columns_ || a.rows_.size() != b.rows_.size()) {
    return false;
  }
  for (std::size_t r = 0; r < a.rows_.size(); ++r) {
    for (std::size_t c = 0; c < a.columns_.size(); ++c) {
      if (!bit_equal(a.rows_[r][c], b.rows_[r][c])) return false;
    }
  }
  return true;
}

std::vector<Column> required_columns(RelationKind kind) {
  switch (kind) {
    case RelationKind::Q:
      return {{"qid", ValueKind::text}, {"query", ValueKind::text}};
    case RelationKind::D:
      return {{"docno", ValueKind::text}};
    case RelationKind::R:
      return {{"qid", ValueKind::text},
              {"docno", ValueKind::text},
              {"score", ValueKind::real},
              {"rank", ValueKind::integer}};
    case RelationKind::RA:
      return {{"qid", ValueKind::text},
              {"docno", ValueKind::text},
              {"label", ValueKind::integer}};
  }
  return {};
}

ValidationReport validate(const Frame& frame, RelationKind kind) {
  ValidationReport report;
  for (const auto& req : required_columns(kind)) {
    auto idx = frame.column_index(req.name);
    if (!idx) {
      report.problems.push_back("missing column '" + req.name + "'");
    } else if (frame.columns()[*idx].kind != req.kind) {
      report.problems.push_back(
          "column '" + req.name + "' has kind " +
          std::string(kind_name(frame.columns()[*idx].kind)) + ", expected " +
          std::string(kind_name(req.kind)));
    }
  }
  return report;
}

void require_conforms(const Frame& frame, RelationKind kind,
                      std::string_view context) {
  auto report = validate(frame, kind);
  if (report.ok()) return;
  std::string msg(context);
  msg += ":";
  for (const auto& p : report.problems) msg += " " + p + ";";
  throw PreconditionError(msg);
}

Frame assign_ranks(const Frame& frame) {
  const auto qid = frame.require_column("qid", ValueKind::text);
  const auto docno = frame.require_column("docno", ValueKind::text);
  const auto score = frame.require_column("score", ValueKind::real);

  std::unordered_map<std::string_view, std::size_t> group_of;
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t r = 0; r < frame.num_rows(); ++r) {
    auto [it, inserted] = group_of.try_emplace(frame.text(r, qid),
                                               groups.size());
    if (inserted) groups.emplace_back();
    groups[it->second].push_back(r);
  }

  std::vector<std::size_t> order;
  std::vector<Value> ranks;
  order.reserve(frame.num_rows());
  ranks.reserve(frame.num_rows());
  for (auto& group : groups) {
    std::stable_sort(group.begin(), group.end(),
                     [&](std::size_t a, std::size_t b) {
                       const double sa = frame.real(a, score);
                       const double sb = frame.real(b, score);
                       if (sa != sb) return sa > sb;
                       return frame.text(a, docno) < frame.text(b, docno);
                     });
    for (std::size_t i = 0; i < group.size(); ++i) {
      order.push_back(group[i]);
      ranks.emplace_back(static_cast<std::int64_t>(i));
    }
  }
  return frame.select_rows(order).with_column({"rank", ValueKind::integer},
                                              std::move(ranks));
}

Frame concat_rows(const Frame& a, const Frame& b) {
  if (a.columns() != b.columns()) {
    throw PreconditionError("concat_rows: column schemas differ");
  }
  std::vector<Row> rows = a.rows();
  rows.insert(rows.end(), b.rows().begin(), b.rows().end());
  return Frame(a.columns(), std::move(rows));
}

std::string format_real(double value) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

namespace {

std::string escape_cell(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '\t':
        out += "\\t";
        break;
      case '\n':
        out += "\\n";
        break;
      case '\r':
        out += "\\r";
        break;
      case '\\':
        out += "\\\\";
        break;
      default:
        out += c;
    }
  }
  return out;
}

std::string unescape_cell(std::string_view s, std::size_t line) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out += s[i];
      continue;
    }
    if (++i == s.size()) {
      throw FormatError("line " + std::to_string(line) +
                        ": dangling escape");
    }
    switch (s[i]) {
      case 't':
        out += '\t';
        break;
      case 'n':
        out += '\n';
        break;
      case 'r':
        out += '\r';
        break;
      case '\\':
        out += '\\';
        break;
      default:
        throw FormatError("line " + std::to_string(line) +
                          ": unknown escape");
    }
  }
  return out;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    auto pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      parts.push_back(s.substr(start));
      return parts;
    }
    parts.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

double parse_real_cell(std::string_view s, std::size_t line) {
  double v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw FormatError("line " + std::to_string(line) + ": bad real '" +
                      std::string(s) + "'");
  }
  return v;
}

Value parse_cell(std::string_view s, ValueKind kind, std::size_t line) {
  switch (kind) {
    case ValueKind::text:
      return unescape_cell(s, line);
    case ValueKind::real:
      return parse_real_cell(s, line);
    case ValueKind::integer: {
      std::int64_t v = 0;
      auto res = std::from_chars(s.data(), s.data() + s.size(), v);
      if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw FormatError("line " + std::to_string(line) +
                          ": bad integer '" + std::string(s) + "'");
      }
      return v;
    }
    case ValueKind::real_list: {
      RealList list;
      if (!s.empty()) {
        for (auto part : split(s, ',')) {
          list.push_back(parse_real_cell(part, line));
        }
      }
      return list;
    }
  }
  return {};
}

}  // namespace

void write_tsv(std::ostream& out, const Frame& frame) {
  out << "#kinds:";
  for (std::size_t c = 0; c < frame.num_columns(); ++c) {
    out << (c ? "\t" : "") << kind_name(frame.columns()[c].kind);
  }
  out << '\n';
  for (std::size_t c = 0; c < frame.num_columns(); ++c) {
    out << (c ? "\t" : "") << escape_cell(frame.columns()[c].name);
  }
  out << '\n';
  for (const auto& row : frame.rows()) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) out << '\t';
      std::visit(
          [&](const auto& v) {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, std::string>) {
              out << escape_cell(v);
            } else if constexpr (std::is_same_v<T, double>) {
              out << format_real(v);
            } else if constexpr (std::is_same_v<T, std::int64_t>) {
              out << v;
            } else {
              for (std::size_t i = 0; i < v.size(); ++i) {
                out << (i ? "," : "") << format_real(v[i]);
              }
            }
          },
          row[c]);
    }
    out << '\n';
  }
}

Frame read_tsv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || !line.starts_with("#kinds:")) {
    throw FormatError("line 1: expected '#kinds:' schema line");
  }
  std::vector<ValueKind> kinds;
  std::string_view kinds_text = std::string_view(line).substr(7);
  if (!kinds_text.empty()) {
    for (auto part : split(kinds_text, '\t')) {
      auto kind = parse_kind(part);
      if (!kind) {
        throw FormatError("line 1: unknown kind '" + std::string(part) + "'");
      }
      kinds.push_back(*kind);
    }
  }
  if (!std::getline(in, line)) {
    throw FormatError("line 2: missing header row");
  }
  std::vector<Column> columns;
  if (!kinds.empty()) {
    auto names = split(line, '\t');
    if (names.size() != kinds.size()) {
      throw FormatError("line 2: header has " + std::to_string(names.size()) +
                        " names for " + std::to_string(kinds.size()) +
                        " kinds");
    }
    for (std::size_t i = 0; i < names.size(); ++i) {
      columns.push_back({unescape_cell(names[i], 2), kinds[i]});
    }
  }
  Frame frame(std::move(columns));
  std::size_t lineno = 2;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() && kinds.size() != 1) continue;
    auto cells = split(line, '\t');
    if (cells.size() != kinds.size()) {
      throw FormatError("line " + std::to_string(lineno) + ": expected " +
                        std::to_string(kinds.size()) + " cells, got " +
                        std::to_string(cells.size()));
    }
    Row row;
    row.reserve(cells.size());
    for (std::size_t i = 0; i < cells.size(); ++i) {
      row.push_back(parse_cell(cells[i], kinds[i], lineno));
    }
    frame.append_row(std::move(row));
  }
  return frame;
}

void save_tsv(const std::filesystem::path& path, const Frame& frame) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  write_tsv(out, frame);
  if (!out) throw IoError("write failed: " + path.string());
}

Frame load_tsv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  return read_tsv(in);
}

}  // namespace pipecache
