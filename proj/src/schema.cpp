#include <fstream>
#include <set>
#include <sstream>

#include "step/error.hpp"
#include "step/schema.hpp"

namespace step {

std::string_view role_name(ColumnRole role) {
  switch (role) {
    case ColumnRole::meta: return "meta";
    case ColumnRole::time: return "time";
    case ColumnRole::categorical: return "categorical";
    case ColumnRole::numeric: return "numeric";
    case ColumnRole::label: return "label";
  }
  return "?";
}

ColumnRole parse_role(std::string_view text) {
  if (text == "meta") return ColumnRole::meta;
  if (text == "time") return ColumnRole::time;
  if (text == "categorical") return ColumnRole::categorical;
  if (text == "numeric") return ColumnRole::numeric;
  if (text == "label") return ColumnRole::label;
  throw Error("unknown column role '" + std::string(text) + "'");
}

std::size_t Schema::meta_index() const {
  for (std::size_t i = 0; i < columns.size(); ++i) {
    if (columns[i].role == ColumnRole::meta) return i;
  }
  throw Error("schema has no meta column");
}

std::size_t Schema::sort_time_index() const {
  for (std::size_t i = 0; i < columns.size(); ++i) {
    if (columns[i].role == ColumnRole::time) return i;
  }
  throw Error("schema has no time column");
}

std::optional<std::size_t> Schema::label_index() const {
  for (std::size_t i = 0; i < columns.size(); ++i) {
    if (columns[i].role == ColumnRole::label) return i;
  }
  return std::nullopt;
}

std::optional<std::size_t> Schema::find(std::string_view name) const {
  for (std::size_t i = 0; i < columns.size(); ++i) {
    if (columns[i].name == name) return i;
  }
  return std::nullopt;
}

std::vector<std::size_t> Schema::feature_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < columns.size(); ++i) {
    if (columns[i].role != ColumnRole::meta) out.push_back(i);
  }
  return out;
}

std::vector<std::string> validate_schema(const Schema& schema) {
  std::vector<std::string> violations;
  std::size_t meta = 0, time = 0, label = 0;
  std::set<std::string> seen;
  for (const Column& c : schema.columns) {
    if (c.role == ColumnRole::meta) ++meta;
    if (c.role == ColumnRole::time) ++time;
    if (c.role == ColumnRole::label) ++label;
    if (c.name.empty()) violations.emplace_back("empty column name");
    if (!seen.insert(c.name).second) violations.push_back("duplicate column name '" + c.name + "'");
  }
  if (meta == 0) violations.emplace_back("no meta column");
  if (meta > 1) violations.emplace_back("multiple meta columns");
  if (time == 0) violations.emplace_back("no time column");
  if (label > 1) violations.emplace_back("multiple label columns");
  return violations;
}

void require_valid(const Schema& schema) {
  const auto v = validate_schema(schema);
  if (v.empty()) return;
  std::string msg = "invalid schema:";
  for (const auto& s : v) msg += " " + s + ";";
  msg.pop_back();
  throw Error(msg);
}

Schema load_schema(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open schema file " + path.string());
  Schema schema;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error("schema file line " + std::to_string(line_no) + ": expected name=role");
    }
    schema.columns.push_back({line.substr(0, eq), parse_role(std::string_view(line).substr(eq + 1))});
  }
  return schema;
}

void save_schema(const std::filesystem::path& path, const Schema& schema) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write schema file " + path.string());
  for (const Column& c : schema.columns) out << c.name << '=' << role_name(c.role) << '\n';
}

std::vector<std::string> split_delimited(std::string_view line, char delimiter) {
  std::vector<std::string> cells;
  std::string cur;
  bool quoted = false;
  bool was_quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && (i + 1 == line.size() || line[i + 1] == delimiter)) quoted = false;
      else cur += c;
    } else if (c == '"' && cur.empty() && !was_quoted) {
      quoted = true;
      was_quoted = true;
    } else if (c == delimiter) {
      cells.push_back(std::move(cur));
      cur.clear();
      was_quoted = false;
    } else {
      cur += c;
    }
  }
  cells.push_back(std::move(cur));
  return cells;
}

std::string join_delimited(const std::vector<std::string>& cells, char delimiter) {
  std::string out;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) out += delimiter;
    const std::string& c = cells[i];
    const bool needs_quotes = c.find(delimiter) != std::string::npos || (!c.empty() && c.front() == '"');
    if (needs_quotes) {
      if (c.find('"') != std::string::npos && c.find(delimiter) != std::string::npos) {
        throw Error("cell contains both the delimiter and a quote: cannot be represented");
      }
      out += '"';
      out += c;
      out += '"';
    } else {
      out += c;
    }
  }
  return out;
}

RawTable load_table(const std::filesystem::path& path, const Schema& schema, char delimiter) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("missing file " + path.string());
  RawTable table;
  table.schema = schema;
  std::string line;
  if (!std::getline(in, line)) throw Error("header mismatch: file " + path.string() + " is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_delimited(line, delimiter);
  for (std::size_t i = 0; i < std::max(header.size(), schema.size()); ++i) {
    const bool ok = i < header.size() && i < schema.size() && header[i] == schema.columns[i].name;
    if (!ok) {
      const std::string expected = i < schema.size() ? schema.columns[i].name : "<none>";
      const std::string found = i < header.size() ? header[i] : "<none>";
      throw Error("header mismatch at column index " + std::to_string(i) + ": expected '" + expected +
                  "', found '" + found + "'");
    }
  }
  std::size_t index = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() && in.peek() == EOF) break;
    auto cells = split_delimited(line, delimiter);
    if (cells.size() != schema.size()) throw Error("ragged row at index " + std::to_string(index));
    table.rows.push_back(std::move(cells));
    ++index;
  }
  return table;
}

void write_table(const std::filesystem::path& path, const RawTable& table, char delimiter) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  std::vector<std::string> header;
  for (const Column& c : table.schema.columns) header.push_back(c.name);
  out << join_delimited(header, delimiter) << '\n';
  for (const Record& r : table.rows) out << join_delimited(r, delimiter) << '\n';
  if (!out) throw Error("write failed: " + path.string());
}

}  // namespace step
