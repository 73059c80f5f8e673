#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "step/preprocess.hpp"
#include "step/rng.hpp"
#include "step/vocab.hpp"

namespace step {

enum class OrderKind : std::uint8_t { fixed = 0, random = 1, explicit_order = 2 };

struct OrderPolicy {
  OrderKind kind = OrderKind::fixed;
  // For explicit_order: schema column indices, a permutation of the event's columns.
  std::vector<std::size_t> columns;
};

enum class MaskKind : std::uint8_t { none = 0, all_labels = 1, partial = 2 };

struct MaskPolicy {
  MaskKind kind = MaskKind::none;
  double p_all = 0.25;   // partial: probability the whole sequence is masked
  double p_half = 0.25;  // partial: probability each label is masked with prob. 0.5

  static MaskPolicy none() { return {}; }
  static MaskPolicy all() { return {MaskKind::all_labels, 0.0, 0.0}; }
  static MaskPolicy partial(double p_all = 0.25, double p_half = 0.25) { return {MaskKind::partial, p_all, p_half}; }
};

std::string_view order_name(OrderKind kind);
OrderKind parse_order(std::string_view text);
std::string_view mask_name(MaskKind kind);
// Accepts none | all | partial.
MaskKind parse_mask(std::string_view text);

// A feature token tagged with its source column. `masked` means the model input
// shows [MASK] here while the target keeps `id`.
struct EncodedToken {
  std::size_t column = 0;
  TokenId id = kPad;
  bool is_label = false;
  bool masked = false;
  friend bool operator==(const EncodedToken&, const EncodedToken&) = default;
};
using EncodedEvent = std::vector<EncodedToken>;

struct PackedSequence {
  std::vector<TokenId> input_ids;
  std::vector<TokenId> target_ids;
  std::vector<std::uint8_t> loss_mask;
  std::string meta_value;
  std::vector<std::uint32_t> label_positions;

  std::size_t length() const { return input_ids.size(); }
  // Index one past the last supervised position.
  std::size_t content_length() const;
  friend bool operator==(const PackedSequence&, const PackedSequence&) = default;
};

// Context length for l events of k features: one [ROW] per event plus a final [EOS].
inline std::size_t context_length(std::size_t events_per_sequence, std::size_t n_features) {
  return events_per_sequence * (n_features + 1) + 1;
}

EncodedEvent encode_tagged(const Event& event, const Vocabulary& vocab, const Schema& schema);

EncodedEvent shuffle_columns(EncodedEvent event, const OrderPolicy& policy, Rng& rng);

struct MaskedEvents {
  std::vector<EncodedEvent> events;     // label tokens flagged `masked` per policy
  std::vector<TokenId> original_labels; // one per event, in event order
};

// Mask decisions are drawn per sequence then per event in event order, so they
// do not depend on the column order inside events.
MaskedEvents mask_labels(std::vector<EncodedEvent> events, const MaskPolicy& policy, Rng& rng);

// Lays events out as  e1 [ROW] e2 [ROW] ... el [ROW] [EOS] [PAD]...
PackedSequence build_sequence(const std::vector<EncodedEvent>& events, std::size_t context_length,
                              std::string meta_value);

struct PackOptions {
  std::size_t events_per_sequence = 10;
  OrderPolicy order;
  MaskPolicy mask;
};

// Encodes, shuffles (order_rng), masks (mask_rng) and packs one chunk.
PackedSequence assemble(const EventChunk& chunk, const Vocabulary& vocab, const Schema& schema,
                        const PackOptions& options, Rng& order_rng, Rng& mask_rng);

// Re-draws the column order and label masks of an already packed sequence.
// Used for per-epoch augmentation. explicit_order is treated as fixed here.
PackedSequence reaugment(const PackedSequence& seq, const OrderPolicy& order, const MaskPolicy& mask, Rng& order_rng,
                         Rng& mask_rng);

struct PackedHeader {
  std::uint32_t context_length = 0;
  std::uint64_t vocab_hash = 0;
  OrderKind order = OrderKind::fixed;
  MaskPolicy mask;
  std::uint64_t seed = 0;
  friend bool operator==(const PackedHeader& a, const PackedHeader& b) {
    return a.context_length == b.context_length && a.vocab_hash == b.vocab_hash && a.order == b.order &&
           a.mask.kind == b.mask.kind && a.mask.p_all == b.mask.p_all && a.mask.p_half == b.mask.p_half &&
           a.seed == b.seed;
  }
};

struct PackedDataset {
  PackedHeader header;
  std::vector<PackedSequence> records;
};

// Chunks every group (stride = sequence length) and assembles each chunk with
// rng streams derived from (seed, chunk index).
PackedDataset pack_groups(const std::vector<UserGroup>& groups, const Vocabulary& vocab, const Schema& schema,
                          const PackOptions& options, std::uint64_t seed);

void write_packed(const std::filesystem::path& path, const PackedDataset& dataset);
PackedDataset read_packed(const std::filesystem::path& path);
// Also refuses a file packed against a different vocabulary.
PackedDataset read_packed(const std::filesystem::path& path, const Vocabulary& vocab);

}  // namespace step
