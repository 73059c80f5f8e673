#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "step/schema.hpp"

namespace step {

// Quantile boundaries for one numeric column. Bin count is edges.size() + 1.
struct BinEdges {
  std::string column;
  std::vector<double> edges;

  std::size_t bin_count() const { return edges.size() + 1; }
  friend bool operator==(const BinEdges&, const BinEdges&) = default;
};

// Empirical quantile edges. Candidate edge i (i = 1..n_bins-1) is the sorted
// value at 0-based index ceil(i*n/n_bins); candidates not strictly above the
// minimum or the previous kept edge are dropped. Paired with apply_bins'
// "value == edge goes right" rule this gives bins whose sizes differ by at
// most one on duplicate-free data.
BinEdges fit_quantile_bins(std::span<const double> values, std::size_t n_bins, std::string column = {});

// Number of edges <= value, which is always within [0, bin_count() - 1].
std::size_t apply_bins(double value, const BinEdges& edges);

// Strict decimal parse of a whole cell; throws on empty or trailing garbage.
double parse_number(std::string_view text);
// Shortest decimal text that round-trips to the same double.
std::string format_number(double value);

struct Event {
  std::size_t source_row = 0;  // row index in the originating RawTable
  Record cells;                // aligned to schema order
};

struct UserGroup {
  std::string meta_value;
  std::vector<Event> events;
};

struct SplitDataset {
  std::vector<UserGroup> train_groups;
  std::vector<UserGroup> test_groups;
};

// One group per distinct meta value in order of first appearance; events stably
// sorted by the sort-time column. Also checks that every time/numeric cell parses.
std::vector<UserGroup> group_and_sort(const RawTable& table);

// Groups rows by meta value in order of first appearance without reordering
// events. For tables that are already preprocessed.
std::vector<UserGroup> group_contiguous(const RawTable& table);

// Replaces the sort-time column with the gap to the previous event (0 for the first).
UserGroup compute_time_deltas(UserGroup group, const Schema& schema);

SplitDataset split_by_user(std::vector<UserGroup> groups, double test_fraction, std::uint64_t seed);

using EventChunk = std::vector<Event>;

// Non-overlapping windows of `events_per_sequence` events; a trailing partial window is kept.
std::vector<EventChunk> chunk_sequences(const UserGroup& group, std::size_t events_per_sequence);

// Evaluation windows: every run of `events_per_sequence` consecutive events
// (stride 1), so each event from position events_per_sequence-1 on is the
// final event of exactly one window. Groups shorter than that yield one window
// holding all of their events.
std::vector<EventChunk> sliding_windows(const UserGroup& group, std::size_t events_per_sequence);

// Columns that are binned: numeric columns plus every time column (the sort
// column after delta substitution).
std::vector<std::size_t> binned_columns(const Schema& schema);

std::vector<BinEdges> fit_bins(const std::vector<UserGroup>& train_groups, const Schema& schema, std::size_t n_bins);

// Rewrites each binned cell as its bin index in decimal.
void discretize(std::vector<UserGroup>& groups, const Schema& schema, const std::vector<BinEdges>& bins);

struct PreprocessManifest {
  std::size_t n_bins = 32;
  std::size_t events_per_sequence = 10;
  double test_fraction = 0.02;
  std::uint64_t seed = 0;
  std::vector<BinEdges> bins;

  friend bool operator==(const PreprocessManifest&, const PreprocessManifest&) = default;
};

void save_manifest(const std::filesystem::path& path, const PreprocessManifest& manifest);
PreprocessManifest load_manifest(const std::filesystem::path& path);

struct PreparedData {
  Schema schema;
  SplitDataset split;  // discretized
  PreprocessManifest manifest;
};

// validate -> group_and_sort -> time deltas -> split -> fit bins on train -> discretize.
PreparedData prepare(const RawTable& table, std::size_t n_bins, std::size_t events_per_sequence,
                     double test_fraction, std::uint64_t seed);

// Flattens groups back to a table (events contiguous per user, in order).
RawTable groups_to_table(const Schema& schema, const std::vector<UserGroup>& groups);

}  // namespace step
