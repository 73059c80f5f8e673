#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "step/model.hpp"
#include "step/packing.hpp"

namespace step {

struct ScoredExample {
  double score = 0.0;
  bool label = false;
};

// Mann-Whitney statistic: fraction of (positive, negative) pairs where the
// positive scores higher, ties counting one half. O(n log n) via midranks.
double auc(std::span<const ScoredExample> examples);

// Called with every token sequence handed to the model and the index of the
// window it was built from.
using PrefixObserver = std::function<void(std::span<const TokenId> prefix, std::size_t window)>;

struct EvalOptions {
  std::string dataset = "unnamed";
  std::string positive_value = "1";
  OrderKind order = OrderKind::fixed;       // how the model was trained
  MaskPolicy history_mask = MaskPolicy::all();  // applied to labels of earlier events
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  std::size_t batch_size = 256;
  PrefixObserver observer;
};

struct EvalReport {
  std::string task;
  std::string dataset;
  std::string order;
  std::string mask;
  std::vector<std::uint64_t> seeds;
  std::string metric = "auc";
  std::vector<double> per_seed;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation; 0 for a single seed
  std::size_t examples = 0;
  // Sweep only: grid[s - 1][p], averaged over seeds, and per-s count of windows too short for s.
  std::vector<std::vector<double>> grid;
  std::vector<std::size_t> skipped;
};

// Tokens shown to the model to query one feature of the final event of
// `window`: the s - 1 events before it (labels masked per `history_mask`, columns
// ordered per `order`), each closed by [ROW], then `revealed` columns of the
// final event in the given order. An empty prefix becomes a lone [EOS].
std::vector<TokenId> build_query_prefix(const EventChunk& window, std::size_t s, std::span<const std::size_t> revealed,
                                        const Vocabulary& vocab, const Schema& schema, OrderKind order,
                                        const MaskPolicy& history_mask, Rng& rng);

EvalReport eval_last_label(const DecoderModel& model, std::span<const EventChunk> windows, const Vocabulary& vocab,
                           const Schema& schema, const EvalOptions& options);

// Grid over history length s = 1..max_len and label position p = 0..k-1.
EvalReport sweep_position_length(const DecoderModel& model, std::span<const EventChunk> windows,
                                 const Vocabulary& vocab, const Schema& schema, std::size_t max_len,
                                 const EvalOptions& options);

// The final event shows only the observed columns (schema order for fixed-order
// models, a seeded order otherwise) before `target` is queried. AUC when target
// is the label column, otherwise top-1 accuracy.
EvalReport eval_missing_features(const DecoderModel& model, std::span<const EventChunk> windows,
                                 const Vocabulary& vocab, const Schema& schema,
                                 std::span<const std::string> observed, const std::string& target,
                                 const EvalOptions& options);

// Pools per-seed values of several reports of the same task (e.g. one per trained model).
EvalReport merge_reports(std::span<const EvalReport> reports);

std::string format_report(const EvalReport& report);
EvalReport parse_report(std::string_view text);
std::string grid_csv(const EvalReport& report);
void save_report(const std::filesystem::path& path, const EvalReport& report);

}  // namespace step
