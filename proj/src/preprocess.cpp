#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "step/error.hpp"
#include "step/preprocess.hpp"
#include "step/rng.hpp"

namespace step {

BinEdges fit_quantile_bins(std::span<const double> values, std::size_t n_bins, std::string column) {
  if (values.empty()) throw Error("fit_quantile_bins: empty input" + (column.empty() ? "" : " for column " + column));
  if (n_bins < 2) throw Error("fit_quantile_bins: n_bins must be >= 2");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  BinEdges out{std::move(column), {}};
  for (std::size_t i = 1; i < n_bins; ++i) {
    // ceil(i*n/n_bins) in exact integer arithmetic
    const std::size_t idx = (i * n + n_bins - 1) / n_bins;
    if (idx >= n) break;
    const double e = sorted[idx];
    if (e <= sorted.front()) continue;
    if (!out.edges.empty() && e <= out.edges.back()) continue;
    out.edges.push_back(e);
  }
  return out;
}

std::size_t apply_bins(double value, const BinEdges& edges) {
  return static_cast<std::size_t>(std::upper_bound(edges.edges.begin(), edges.edges.end(), value) - edges.edges.begin());
}

double parse_number(std::string_view text) {
  if (text.empty()) throw Error("empty numeric cell");
  const char* first = text.data();
  const char* last = text.data() + text.size();
  if (*first == '+') ++first;
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) throw Error("cannot parse '" + std::string(text) + "' as a number");
  if (!std::isfinite(v)) throw Error("non-finite numeric cell '" + std::string(text) + "'");
  return v;
}

std::string format_number(double value) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  if (ec != std::errc()) throw Error("format_number failed");
  return std::string(buf, ptr);
}

std::vector<std::size_t> binned_columns(const Schema& schema) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < schema.size(); ++i) {
    const auto r = schema.columns[i].role;
    if (r == ColumnRole::numeric || r == ColumnRole::time) out.push_back(i);
  }
  return out;
}

namespace {

std::vector<UserGroup> group_rows(const RawTable& table) {
  const std::size_t meta = table.schema.meta_index();
  std::vector<UserGroup> groups;
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const std::string& key = table.rows[r][meta];
    auto [it, inserted] = index.try_emplace(key, groups.size());
    if (inserted) groups.push_back({key, {}});
    groups[it->second].events.push_back({r, table.rows[r]});
  }
  return groups;
}

}  // namespace

std::vector<UserGroup> group_and_sort(const RawTable& table) {
  require_valid(table.schema);
  const std::size_t time_col = table.schema.sort_time_index();
  const auto numeric = binned_columns(table.schema);
  std::vector<double> times(table.rows.size());
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    for (std::size_t c : numeric) {
      try {
        const double v = parse_number(table.rows[r][c]);
        if (c == time_col) times[r] = v;
      } catch (const Error& e) {
        const std::string what = c == time_col ? "unparseable time cell" : "bad numeric cell";
        throw Error(what + " at row index " + std::to_string(r) + ", column '" + table.schema.columns[c].name +
                    "': " + e.what());
      }
    }
  }
  auto groups = group_rows(table);
  for (UserGroup& g : groups) {
    std::stable_sort(g.events.begin(), g.events.end(),
                     [&](const Event& a, const Event& b) { return times[a.source_row] < times[b.source_row]; });
  }
  return groups;
}

std::vector<UserGroup> group_contiguous(const RawTable& table) {
  require_valid(table.schema);
  return group_rows(table);
}

UserGroup compute_time_deltas(UserGroup group, const Schema& schema) {
  const std::size_t c = schema.sort_time_index();
  double prev = 0.0;
  for (std::size_t j = 0; j < group.events.size(); ++j) {
    const double t = parse_number(group.events[j].cells[c]);
    const double delta = j == 0 ? 0.0 : t - prev;
    if (delta < 0.0) throw Error("compute_time_deltas: events of '" + group.meta_value + "' are not time-sorted");
    group.events[j].cells[c] = format_number(delta);
    prev = t;
  }
  return group;
}

SplitDataset split_by_user(std::vector<UserGroup> groups, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw Error("split_by_user: test_fraction must be in (0, 1)");
  if (groups.size() < 2) throw Error("split_by_user: need at least 2 users, got " + std::to_string(groups.size()));
  const std::size_t n = groups.size();
  // The 1e-9 slack maps 0.02 * 100 to 2, not 3.
  auto n_test = static_cast<std::size_t>(std::ceil(test_fraction * static_cast<double>(n) - 1e-9));
  n_test = std::max<std::size_t>(n_test, 1);
  if (n_test >= n) throw Error("split_by_user: test fraction leaves no training users");

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, {0x73706c6974}));
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<char> is_test(n, 0);
  for (std::size_t i = 0; i < n_test; ++i) is_test[order[i]] = 1;

  SplitDataset out;
  for (std::size_t i = 0; i < n; ++i) {
    (is_test[i] ? out.test_groups : out.train_groups).push_back(std::move(groups[i]));
  }
  return out;
}

std::vector<EventChunk> chunk_sequences(const UserGroup& group, std::size_t l) {
  if (l == 0) throw Error("chunk_sequences: events per sequence must be >= 1");
  std::vector<EventChunk> chunks;
  for (std::size_t start = 0; start < group.events.size(); start += l) {
    const std::size_t end = std::min(start + l, group.events.size());
    chunks.emplace_back(group.events.begin() + static_cast<std::ptrdiff_t>(start),
                        group.events.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return chunks;
}

std::vector<EventChunk> sliding_windows(const UserGroup& group, std::size_t l) {
  if (l == 0) throw Error("sliding_windows: events per sequence must be >= 1");
  std::vector<EventChunk> out;
  const auto& ev = group.events;
  if (ev.empty()) return out;
  if (ev.size() < l) {
    out.emplace_back(ev.begin(), ev.end());
    return out;
  }
  for (std::size_t end = l; end <= ev.size(); ++end) {
    out.emplace_back(ev.begin() + static_cast<std::ptrdiff_t>(end - l), ev.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

std::vector<BinEdges> fit_bins(const std::vector<UserGroup>& train_groups, const Schema& schema, std::size_t n_bins) {
  std::vector<BinEdges> out;
  for (std::size_t c : binned_columns(schema)) {
    std::vector<double> values;
    for (const UserGroup& g : train_groups) {
      for (const Event& e : g.events) values.push_back(parse_number(e.cells[c]));
    }
    out.push_back(fit_quantile_bins(values, n_bins, schema.columns[c].name));
  }
  return out;
}

void discretize(std::vector<UserGroup>& groups, const Schema& schema, const std::vector<BinEdges>& bins) {
  std::vector<std::pair<std::size_t, const BinEdges*>> plan;
  for (const BinEdges& b : bins) {
    const auto c = schema.find(b.column);
    if (!c) throw Error("discretize: bin edges for unknown column '" + b.column + "'");
    plan.emplace_back(*c, &b);
  }
  for (UserGroup& g : groups) {
    for (Event& e : g.events) {
      for (auto [c, b] : plan) e.cells[c] = std::to_string(apply_bins(parse_number(e.cells[c]), *b));
    }
  }
}

void save_manifest(const std::filesystem::path& path, const PreprocessManifest& m) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write manifest " + path.string());
  out << "steppre v1\n";
  out << "n_bins=" << m.n_bins << '\n';
  out << "seq_len=" << m.events_per_sequence << '\n';
  out << "test_fraction=" << format_number(m.test_fraction) << '\n';
  out << "seed=" << m.seed << '\n';
  for (const BinEdges& b : m.bins) {
    out << "bins\t" << b.column << '\t' << b.edges.size();
    for (double e : b.edges) out << '\t' << format_number(e);
    out << '\n';
  }
  if (!out) throw Error("write failed: " + path.string());
}

PreprocessManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("missing preprocessing manifest " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "steppre v1") throw Error("manifest: bad header in " + path.string());
  PreprocessManifest m;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("bins\t", 0) == 0) {
      std::istringstream ss(line.substr(5));
      BinEdges b;
      std::string count;
      std::getline(ss, b.column, '\t');
      std::getline(ss, count, '\t');
      std::string e;
      while (std::getline(ss, e, '\t')) b.edges.push_back(parse_number(e));
      if (b.edges.size() != std::stoull(count)) throw Error("manifest: edge count mismatch for " + b.column);
      m.bins.push_back(std::move(b));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("manifest: malformed line '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key == "n_bins") m.n_bins = std::stoull(val);
    else if (key == "seq_len") m.events_per_sequence = std::stoull(val);
    else if (key == "test_fraction") m.test_fraction = parse_number(val);
    else if (key == "seed") m.seed = std::stoull(val);
    else throw Error("manifest: unknown key '" + key + "'");
  }
  return m;
}

PreparedData prepare(const RawTable& table, std::size_t n_bins, std::size_t l, double test_fraction,
                     std::uint64_t seed) {
  PreparedData out;
  out.schema = table.schema;
  auto groups = group_and_sort(table);
  for (UserGroup& g : groups) g = compute_time_deltas(std::move(g), table.schema);
  out.split = split_by_user(std::move(groups), test_fraction, seed);
  out.manifest = {n_bins, l, test_fraction, seed, fit_bins(out.split.train_groups, table.schema, n_bins)};
  discretize(out.split.train_groups, table.schema, out.manifest.bins);
  discretize(out.split.test_groups, table.schema, out.manifest.bins);
  return out;
}

RawTable groups_to_table(const Schema& schema, const std::vector<UserGroup>& groups) {
  RawTable t;
  t.schema = schema;
  for (const UserGroup& g : groups) {
    for (const Event& e : g.events) t.rows.push_back(e.cells);
  }
  return t;
}

}  // namespace step
