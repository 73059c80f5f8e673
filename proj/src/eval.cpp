#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "step/error.hpp"
#include "step/eval.hpp"

namespace step {

double auc(std::span<const ScoredExample> examples) {
  std::size_t n_pos = 0;
  for (const auto& e : examples) {
    if (!(e.score >= 0.0 && e.score <= 1.0)) throw Error("auc: score outside [0, 1]");
    n_pos += e.label ? 1 : 0;
  }
  const std::size_t n_neg = examples.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw Error("auc: single-class input");

  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return examples[a].score < examples[b].score; });

  // Twice the positive rank sum keeps midranks integral.
  std::uint64_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && examples[order[j]].score == examples[order[i]].score) ++j;
    const std::uint64_t twice_midrank = static_cast<std::uint64_t>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) {
      if (examples[order[t]].label) twice_rank_sum += twice_midrank;
    }
    i = j;
  }
  const double p = static_cast<double>(n_pos);
  const double u = static_cast<double>(twice_rank_sum) / 2.0 - p * (p + 1.0) / 2.0;
  return u / (p * static_cast<double>(n_neg));
}

std::vector<TokenId> build_query_prefix(const EventChunk& window, std::size_t s, std::span<const std::size_t> revealed,
                                        const Vocabulary& vocab, const Schema& schema, OrderKind order,
                                        const MaskPolicy& history_mask, Rng& rng) {
  if (s < 1 || s > window.size()) throw Error("build_query_prefix: history length out of range");
  const std::size_t first = window.size() - s;
  std::vector<EncodedEvent> history;
  const OrderPolicy policy{order == OrderKind::random ? OrderKind::random : OrderKind::fixed, {}};
  for (std::size_t i = first; i + 1 < window.size(); ++i) {
    history.push_back(shuffle_columns(encode_tagged(window[i], vocab, schema), policy, rng));
  }
  std::vector<TokenId> prefix;
  if (!history.empty()) {
    const MaskedEvents masked = mask_labels(std::move(history), history_mask, rng);
    for (const EncodedEvent& e : masked.events) {
      for (const EncodedToken& t : e) prefix.push_back(t.masked ? kMask : t.id);
      prefix.push_back(kRow);
    }
  }
  const Event& last = window.back();
  for (std::size_t c : revealed) {
    if (c >= schema.size()) throw Error("build_query_prefix: column index out of range");
    prefix.push_back(vocab.id(schema.columns[c].name, last.cells[c]));
  }
  if (prefix.empty()) prefix.push_back(kEos);
  return prefix;
}

namespace {

struct Query {
  std::vector<TokenId> prefix;
  std::string truth;
};

// Scores each query's target column; returns the restricted distributions.
std::vector<ColumnDistribution> score_queries(const DecoderModel& model, const std::vector<Query>& queries,
                                              const std::string& column, const Vocabulary& vocab,
                                              std::size_t batch_size) {
  std::map<std::size_t, std::vector<std::size_t>> by_length;
  for (std::size_t i = 0; i < queries.size(); ++i) by_length[queries[i].prefix.size()].push_back(i);
  std::vector<ColumnDistribution> out(queries.size());
  std::vector<TokenId> ids;
  for (const auto& [len, members] : by_length) {
    for (std::size_t b = 0; b < members.size(); b += batch_size) {
      const std::size_t n = std::min(batch_size, members.size() - b);
      ids.clear();
      for (std::size_t i = 0; i < n; ++i) {
        const auto& p = queries[members[b + i]].prefix;
        ids.insert(ids.end(), p.begin(), p.end());
      }
      const Matrix logits = model.last_logits(ids, n, len);
      for (std::size_t i = 0; i < n; ++i) {
        out[members[b + i]] = restrict_to_column(logits.row(i), column, vocab);
      }
    }
  }
  return out;
}

std::size_t label_column(const Schema& schema) {
  const auto idx = schema.label_index();
  if (!idx) throw Error("eval: schema has no label column");
  return *idx;
}

std::vector<std::size_t> non_label_features(const Schema& schema, std::size_t target) {
  std::vector<std::size_t> out;
  for (std::size_t c : schema.feature_indices()) {
    if (c != target) out.push_back(c);
  }
  return out;
}

// AUC for a binary label target, top-1 accuracy otherwise.
double metric_for(const std::vector<Query>& queries, const std::vector<ColumnDistribution>& dists, bool is_label,
                  const std::string& positive) {
  if (is_label) {
    std::vector<ScoredExample> ex(queries.size());
    for (std::size_t i = 0; i < queries.size(); ++i) {
      ex[i] = {dists[i].probability(positive), queries[i].truth == positive};
    }
    return auc(ex);
  }
  if (queries.empty()) throw Error("eval: no examples");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const auto& d = dists[i];
    if (!d.ids.empty() && d.values[d.argmax()] == queries[i].truth) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(queries.size());
}

void summarize(EvalReport& r) {
  const double n = static_cast<double>(r.per_seed.size());
  if (r.per_seed.empty()) return;
  r.mean = std::accumulate(r.per_seed.begin(), r.per_seed.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : r.per_seed) ss += (v - r.mean) * (v - r.mean);
  r.stddev = r.per_seed.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
}

EvalReport base_report(const char* task, const EvalOptions& o) {
  EvalReport r;
  r.task = task;
  r.dataset = o.dataset;
  r.order = std::string(order_name(o.order));
  r.mask = std::string(mask_name(o.history_mask.kind));
  if (o.history_mask.kind == MaskKind::partial) {
    std::ostringstream s;
    s << r.mask << '(' << o.history_mask.p_all << ',' << o.history_mask.p_half << ')';
    r.mask = s.str();
  }
  r.seeds = o.seeds;
  if (o.seeds.empty()) throw Error("eval: at least one seed is required");
  return r;
}

// Revealed columns: a seeded permutation for random-order models, schema order otherwise.
std::vector<std::size_t> revealed_order(std::vector<std::size_t> columns, OrderKind order, Rng& rng) {
  if (order == OrderKind::random) rng.shuffle(std::span<std::size_t>(columns));
  return columns;
}

}  // namespace

EvalReport eval_missing_features(const DecoderModel& model, std::span<const EventChunk> windows,
                                 const Vocabulary& vocab, const Schema& schema,
                                 std::span<const std::string> observed, const std::string& target,
                                 const EvalOptions& options) {
  EvalReport report = base_report("missing_features", options);
  const auto target_idx = schema.find(target);
  if (!target_idx || *target_idx == schema.meta_index()) throw Error("eval: unknown target column '" + target + "'");
  std::vector<std::size_t> observed_idx;
  for (const std::string& name : observed) {
    const auto idx = schema.find(name);
    if (!idx || *idx == schema.meta_index()) throw Error("eval: observed column '" + name + "' is not a feature");
    if (*idx == *target_idx) throw Error("eval: target column is in the observed set");
    if (std::find(observed_idx.begin(), observed_idx.end(), *idx) != observed_idx.end()) continue;
    observed_idx.push_back(*idx);
  }
  std::sort(observed_idx.begin(), observed_idx.end());
  const bool is_label = schema.label_index() == target_idx;
  report.metric = is_label ? "auc" : "accuracy";
  for (std::uint64_t seed : options.seeds) {
    std::vector<Query> queries;
    for (std::size_t w = 0; w < windows.size(); ++w) {
      Rng rng(derive_seed(seed, {0x6d697373, w}));
      const auto revealed = revealed_order(observed_idx, options.order, rng);
      Query q{build_query_prefix(windows[w], windows[w].size(), revealed, vocab, schema, options.order,
                                 options.history_mask, rng),
              windows[w].back().cells[*target_idx]};
      if (options.observer) options.observer(q.prefix, w);
      queries.push_back(std::move(q));
    }
    const auto dists = score_queries(model, queries, target, vocab, options.batch_size);
    report.per_seed.push_back(metric_for(queries, dists, is_label, options.positive_value));
    report.examples = queries.size();
  }
  summarize(report);
  return report;
}

EvalReport eval_last_label(const DecoderModel& model, std::span<const EventChunk> windows, const Vocabulary& vocab,
                           const Schema& schema, const EvalOptions& options) {
  EvalReport report = base_report("last_label", options);
  const std::size_t label = label_column(schema);
  const std::string& label_name = schema.columns[label].name;
  const auto features = non_label_features(schema, label);
  for (std::uint64_t seed : options.seeds) {
    std::vector<Query> queries;
    for (std::size_t w = 0; w < windows.size(); ++w) {
      Rng rng(derive_seed(seed, {0x6c61737, w}));
      const auto revealed = revealed_order(features, options.order, rng);
      Query q{build_query_prefix(windows[w], windows[w].size(), revealed, vocab, schema, options.order,
                                 options.history_mask, rng),
              windows[w].back().cells[label]};
      if (options.observer) options.observer(q.prefix, w);
      queries.push_back(std::move(q));
    }
    const auto dists = score_queries(model, queries, label_name, vocab, options.batch_size);
    report.per_seed.push_back(metric_for(queries, dists, true, options.positive_value));
    report.examples = queries.size();
  }
  summarize(report);
  return report;
}

EvalReport sweep_position_length(const DecoderModel& model, std::span<const EventChunk> windows,
                                 const Vocabulary& vocab, const Schema& schema, std::size_t max_len,
                                 const EvalOptions& options) {
  EvalReport report = base_report("sweep", options);
  if (max_len < 1) throw Error("sweep: max_len must be >= 1");
  const std::size_t label = label_column(schema);
  const std::string& label_name = schema.columns[label].name;
  const auto features = non_label_features(schema, label);
  const std::size_t k = features.size() + 1;
  report.grid.assign(max_len, std::vector<double>(k, 0.0));
  report.skipped.assign(max_len, 0);
  for (std::size_t s = 1; s <= max_len; ++s) {
    for (const auto& w : windows) report.skipped[s - 1] += w.size() < s ? 1 : 0;
  }
  for (std::uint64_t seed : options.seeds) {
    double cell_sum = 0.0;
    for (std::size_t s = 1; s <= max_len; ++s) {
      for (std::size_t p = 0; p < k; ++p) {
        std::vector<Query> queries;
        for (std::size_t w = 0; w < windows.size(); ++w) {
          if (windows[w].size() < s) continue;
          Rng rng(derive_seed(seed, {0x73776570, s, p, w}));
          auto revealed = revealed_order(features, options.order, rng);
          revealed.resize(p);
          Query q{build_query_prefix(windows[w], s, revealed, vocab, schema, options.order, options.history_mask, rng),
                  windows[w].back().cells[label]};
          if (options.observer) options.observer(q.prefix, w);
          queries.push_back(std::move(q));
        }
        const auto dists = score_queries(model, queries, label_name, vocab, options.batch_size);
        const double a = metric_for(queries, dists, true, options.positive_value);
        report.grid[s - 1][p] += a / static_cast<double>(options.seeds.size());
        cell_sum += a;
        report.examples = std::max(report.examples, queries.size());
      }
    }
    report.per_seed.push_back(cell_sum / static_cast<double>(max_len * k));
  }
  summarize(report);
  return report;
}

EvalReport merge_reports(std::span<const EvalReport> reports) {
  if (reports.empty()) throw Error("merge_reports: nothing to merge");
  EvalReport out = reports.front();
  out.per_seed.clear();
  out.seeds.clear();
  for (auto& row : out.grid) std::fill(row.begin(), row.end(), 0.0);
  for (const EvalReport& r : reports) {
    if (r.task != out.task || r.metric != out.metric) throw Error("merge_reports: mismatched tasks");
    out.per_seed.insert(out.per_seed.end(), r.per_seed.begin(), r.per_seed.end());
    out.seeds.insert(out.seeds.end(), r.seeds.begin(), r.seeds.end());
    if (r.grid.size() != out.grid.size()) throw Error("merge_reports: mismatched grids");
    for (std::size_t s = 0; s < r.grid.size(); ++s) {
      for (std::size_t p = 0; p < r.grid[s].size(); ++p) {
        out.grid[s][p] += r.grid[s][p] / static_cast<double>(reports.size());
      }
    }
  }
  summarize(out);
  return out;
}

namespace {
template <class T>
std::string join(const std::vector<T>& v) {
  std::ostringstream s;
  s.precision(17);
  for (std::size_t i = 0; i < v.size(); ++i) s << (i ? "," : "") << v[i];
  return s.str();
}
}  // namespace

std::string grid_csv(const EvalReport& r) {
  std::ostringstream s;
  s.precision(6);
  s << "s";
  const std::size_t k = r.grid.empty() ? 0 : r.grid.front().size();
  for (std::size_t p = 0; p < k; ++p) s << ",p" << p;
  s << '\n';
  for (std::size_t i = 0; i < r.grid.size(); ++i) {
    s << i + 1;
    for (double v : r.grid[i]) s << ',' << v;
    s << '\n';
  }
  return s.str();
}

std::string format_report(const EvalReport& r) {
  std::ostringstream s;
  s.precision(17);
  s << "stepeval v1\n"
    << "[condition]\n"
    << "task=" << r.task << '\n'
    << "dataset=" << r.dataset << '\n'
    << "order=" << r.order << '\n'
    << "mask=" << r.mask << '\n'
    << "seeds=" << join(r.seeds) << '\n'
    << "[metrics]\n"
    << "metric=" << r.metric << '\n'
    << "mean=" << r.mean << '\n'
    << "std=" << r.stddev << '\n'
    << "per_seed=" << join(r.per_seed) << '\n'
    << "examples=" << r.examples << '\n';
  if (!r.grid.empty()) {
    s << "skipped=" << join(r.skipped) << '\n' << "[grid]\n" << grid_csv(r);
  }
  return s.str();
}

EvalReport parse_report(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != "stepeval v1") throw Error("eval report: bad header");
  EvalReport r;
  std::string section;
  auto split = [](const std::string& v, auto convert) {
    std::vector<decltype(convert(std::string()))> out;
    std::istringstream vs(v);
    std::string item;
    while (std::getline(vs, item, ',')) out.push_back(convert(item));
    return out;
  };
  auto to_d = [](const std::string& x) { return std::stod(x); };
  auto to_u = [](const std::string& x) { return static_cast<std::uint64_t>(std::stoull(x)); };
  bool grid_header = false;
  try {
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (line.front() == '[') {
        section = line;
        continue;
      }
      if (section == "[grid]") {
        if (!grid_header) {
          grid_header = true;
          continue;
        }
        auto vals = split(line, to_d);
        if (vals.empty()) throw Error("eval report: empty grid row");
        vals.erase(vals.begin());
        r.grid.push_back(vals);
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw Error("eval report: malformed line '" + line + "'");
      const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
      if (key == "task") r.task = val;
      else if (key == "dataset") r.dataset = val;
      else if (key == "order") r.order = val;
      else if (key == "mask") r.mask = val;
      else if (key == "seeds") r.seeds = split(val, to_u);
      else if (key == "metric") r.metric = val;
      else if (key == "mean") r.mean = std::stod(val);
      else if (key == "std") r.stddev = std::stod(val);
      else if (key == "per_seed") r.per_seed = split(val, to_d);
      else if (key == "examples") r.examples = std::stoull(val);
      else if (key == "skipped") {
        for (auto v : split(val, to_u)) r.skipped.push_back(static_cast<std::size_t>(v));
      } else throw Error("eval report: unknown key '" + key + "'");
    }
  } catch (const std::logic_error&) {
    throw Error("eval report: bad number");
  }
  return r;
}

void save_report(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << format_report(report);
}

}  // namespace step
