#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "step/error.hpp"
#include "step/preprocess.hpp"
#include "step/rng.hpp"
#include "step/synth.hpp"

namespace step {

void GenConfig::validate() const {
  if (n_users < 1) throw Error("gen config: n_users must be >= 1");
  if (events_per_user < 1) throw Error("gen config: events_per_user must be >= 1");
  if (n_categories < 2) throw Error("gen config: n_categories must be >= 2");
  if (!(label_noise >= 0.0 && label_noise < 0.5)) throw Error("gen config: label_noise must be in [0, 0.5)");
  if (!(amount_log_sigma > 0.0) || !std::isfinite(amount_log_mean)) throw Error("gen config: bad amount distribution");
  if (!(mean_gap_seconds > 0.0)) throw Error("gen config: mean_gap_seconds must be > 0");
}

double GenConfig::median_amount() const { return std::exp(amount_log_mean); }

GenConfig parse_gen_config(std::string_view text) {
  GenConfig c;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (eq == std::string::npos) throw Error("gen config: expected key = value");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r"), e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq)), val = trim(line.substr(eq + 1));
    try {
      if (key == "n_users") c.n_users = std::stoull(val);
      else if (key == "events_per_user") c.events_per_user = std::stoull(val);
      else if (key == "n_categories") c.n_categories = std::stoull(val);
      else if (key == "amount_log_mean") c.amount_log_mean = std::stod(val);
      else if (key == "amount_log_sigma") c.amount_log_sigma = std::stod(val);
      else if (key == "mean_gap_seconds") c.mean_gap_seconds = std::stod(val);
      else if (key == "label_noise") c.label_noise = std::stod(val);
      else if (key == "seed") c.seed = std::stoull(val);
      else throw Error("gen config: unknown key '" + key + "'");
    } catch (const std::logic_error&) {
      throw Error("gen config: bad value for '" + key + "'");
    }
  }
  c.validate();
  return c;
}

std::string format_gen_config(const GenConfig& c) {
  std::ostringstream s;
  s.precision(17);
  s << "n_users = " << c.n_users << "\nevents_per_user = " << c.events_per_user
    << "\nn_categories = " << c.n_categories << "\namount_log_mean = " << c.amount_log_mean
    << "\namount_log_sigma = " << c.amount_log_sigma << "\nmean_gap_seconds = " << c.mean_gap_seconds
    << "\nlabel_noise = " << c.label_noise << "\nseed = " << c.seed << '\n';
  return s.str();
}

Schema synth_schema() {
  return Schema{{{"user", ColumnRole::meta},
                 {"ts", ColumnRole::time},
                 {"category", ColumnRole::categorical},
                 {"amount", ColumnRole::numeric},
                 {"label", ColumnRole::label}}};
}

namespace {
std::string cents(double amount) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", amount);
  return buf;
}

bool rule_fires(const Record& prev, const Record& cur, double median) {
  return cur[2] == prev[2] && parse_number(cur[3]) >= median;
}
}  // namespace

RawTable generate(const GenConfig& config) {
  config.validate();
  RawTable table{synth_schema(), {}};
  const std::size_t n = config.n_users, m = config.events_per_user;
  const double median = config.median_amount();
  std::vector<std::vector<Record>> per_user(n);
  for (std::size_t u = 0; u < n; ++u) {
    Rng rng(derive_seed(config.seed, {0x73796e, u}));
    double t = std::floor(rng.uniform() * 86400.0 * 30.0);
    std::vector<Record>& rows = per_user[u];
    rows.reserve(m);
    for (std::size_t j = 0; j < m; ++j) {
      t += 1.0 + std::floor(rng.exponential(config.mean_gap_seconds));
      Record r(5);
      r[0] = "u" + std::to_string(u);
      r[1] = std::to_string(static_cast<std::int64_t>(t));
      r[2] = "c" + std::to_string(rng.below(config.n_categories));
      r[3] = cents(std::exp(config.amount_log_mean + config.amount_log_sigma * rng.normal()));
      const bool clean = j > 0 && rule_fires(rows[j - 1], r, median);
      const bool flip = rng.bernoulli(config.label_noise);
      r[4] = (clean != flip) ? "1" : "0";
      rows.push_back(std::move(r));
    }
  }
  table.rows.reserve(n * m);
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t u = 0; u < n; ++u) table.rows.push_back(std::move(per_user[u][j]));
  }
  return table;
}

std::vector<int> clean_labels(const RawTable& table, const GenConfig& config) {
  std::vector<int> out(table.rows.size(), 0);
  const double median = config.median_amount();
  for (const UserGroup& g : group_and_sort(table)) {
    for (std::size_t j = 1; j < g.events.size(); ++j) {
      out[g.events[j].source_row] = rule_fires(g.events[j - 1].cells, g.events[j].cells, median) ? 1 : 0;
    }
  }
  return out;
}

std::vector<double> bayes_oracle_scores(const RawTable& table, const GenConfig& config) {
  const auto clean = clean_labels(table, config);
  std::vector<double> out(clean.size());
  for (std::size_t i = 0; i < clean.size(); ++i) out[i] = clean[i] ? 1.0 - config.label_noise : config.label_noise;
  return out;
}

void write_truth(const std::filesystem::path& path, const RawTable& table, const GenConfig& config) {
  const auto clean = clean_labels(table, config);
  const auto scores = bayes_oracle_scores(table, config);
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "row,clean_label,oracle_score\n";
  for (std::size_t i = 0; i < clean.size(); ++i) out << i << ',' << clean[i] << ',' << scores[i] << '\n';
}

std::vector<EventChunk> balanced_slice(std::span<const EventChunk> windows, std::span<const int> clean_by_row,
                                       std::uint64_t seed) {
  std::vector<std::size_t> fired, quiet;
  for (std::size_t w = 0; w < windows.size(); ++w) {
    if (windows[w].empty()) continue;
    const std::size_t row = windows[w].back().source_row;
    if (row >= clean_by_row.size()) throw Error("balanced_slice: source row outside the truth table");
    (clean_by_row[row] ? fired : quiet).push_back(w);
  }
  auto& small = fired.size() <= quiet.size() ? fired : quiet;
  auto& large = fired.size() <= quiet.size() ? quiet : fired;
  Rng rng(derive_seed(seed, {0x62616c}));
  rng.shuffle(std::span<std::size_t>(large));
  large.resize(small.size());
  std::vector<std::size_t> keep = small;
  keep.insert(keep.end(), large.begin(), large.end());
  std::sort(keep.begin(), keep.end());
  std::vector<EventChunk> out;
  out.reserve(keep.size());
  for (std::size_t w : keep) out.push_back(windows[w]);
  return out;
}

}  // namespace step
