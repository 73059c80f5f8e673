#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace step {

enum class ColumnRole { meta, time, categorical, numeric, label };

std::string_view role_name(ColumnRole role);
ColumnRole parse_role(std::string_view text);

struct Column {
  std::string name;
  ColumnRole role;
  friend bool operator==(const Column&, const Column&) = default;
};

// Ordered column list. The order is the file's column order and the
// "schema order" used for fixed-order tokenization.
struct Schema {
  std::vector<Column> columns;

  std::size_t size() const { return columns.size(); }
  std::size_t meta_index() const;                 // throws if absent
  std::size_t sort_time_index() const;            // first time column; throws if absent
  std::optional<std::size_t> label_index() const;
  std::optional<std::size_t> find(std::string_view name) const;
  // Indices of every non-meta column, in schema order. These are the model's features.
  std::vector<std::size_t> feature_indices() const;

  friend bool operator==(const Schema&, const Schema&) = default;
};

// Returns every violated invariant; empty means the schema is valid.
std::vector<std::string> validate_schema(const Schema& schema);
// Throws step::Error listing all violations.
void require_valid(const Schema& schema);

// Schema file: one `name=role` line per column; blank lines and '#' comments skipped.
Schema load_schema(const std::filesystem::path& path);
void save_schema(const std::filesystem::path& path, const Schema& schema);

using Record = std::vector<std::string>;

struct RawTable {
  Schema schema;
  std::vector<Record> rows;
};

// Parses one delimited line. Fields may be wrapped in double quotes (needed when
// they contain the delimiter); quotes are stripped, nothing else is unescaped.
std::vector<std::string> split_delimited(std::string_view line, char delimiter);
std::string join_delimited(const std::vector<std::string>& cells, char delimiter);

// Reads a delimited file whose header must equal the schema's column names in order.
RawTable load_table(const std::filesystem::path& path, const Schema& schema, char delimiter = ',');
void write_table(const std::filesystem::path& path, const RawTable& table, char delimiter = ',');

}  // namespace step
