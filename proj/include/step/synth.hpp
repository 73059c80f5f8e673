#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "step/preprocess.hpp"
#include "step/schema.hpp"

namespace step {

// Planted-rule event generator. Event j of a user has clean label 1 iff its
// category equals the previous event's category and its amount is at least the
// median amount exp(amount_log_mean); the observed label flips with
// probability label_noise.
struct GenConfig {
  std::size_t n_users = 500;
  std::size_t events_per_user = 100;
  std::size_t n_categories = 4;
  double amount_log_mean = 3.0;   // amounts are log-normal
  double amount_log_sigma = 1.0;
  double mean_gap_seconds = 3600.0;
  double label_noise = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
  double median_amount() const;
};

GenConfig parse_gen_config(std::string_view text);
std::string format_gen_config(const GenConfig& config);

// Columns user:meta, ts:time, category:categorical, amount:numeric, label:label.
Schema synth_schema();

// Rows are interleaved across users (event 0 of every user, then event 1, ...);
// each user's stream is drawn from (seed, user index).
RawTable generate(const GenConfig& config);

// Noise-free rule per row, evaluated on the parsed cells and each user's time order.
std::vector<int> clean_labels(const RawTable& table, const GenConfig& config);

// Exact posterior p(observed label = 1 | history): 1 - eps when the rule fires, eps otherwise.
std::vector<double> bayes_oracle_scores(const RawTable& table, const GenConfig& config);

// CSV `row,clean_label,oracle_score` audit sidecar.
void write_truth(const std::filesystem::path& path, const RawTable& table, const GenConfig& config);

// Evaluation slice balanced on rule firing: every window whose final event's
// clean label is in the smaller class, plus an equally large seeded sample of
// the others, in original window order. `clean_by_row` is indexed by source row.
std::vector<EventChunk> balanced_slice(std::span<const EventChunk> windows, std::span<const int> clean_by_row,
                                       std::uint64_t seed);

}  // namespace step
