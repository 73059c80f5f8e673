#include <algorithm>
#include <fstream>

#include "step/binary_io.hpp"
#include "step/error.hpp"
#include "step/hash.hpp"
#include "step/packing.hpp"

namespace step {

std::string_view order_name(OrderKind kind) {
  switch (kind) {
    case OrderKind::fixed: return "fixed";
    case OrderKind::random: return "random";
    case OrderKind::explicit_order: return "explicit";
  }
  return "?";
}

OrderKind parse_order(std::string_view text) {
  if (text == "fixed") return OrderKind::fixed;
  if (text == "random") return OrderKind::random;
  if (text == "explicit") return OrderKind::explicit_order;
  throw Error("unknown order policy '" + std::string(text) + "'");
}

std::string_view mask_name(MaskKind kind) {
  switch (kind) {
    case MaskKind::none: return "none";
    case MaskKind::all_labels: return "all";
    case MaskKind::partial: return "partial";
  }
  return "?";
}

MaskKind parse_mask(std::string_view text) {
  if (text == "none") return MaskKind::none;
  if (text == "all") return MaskKind::all_labels;
  if (text == "partial") return MaskKind::partial;
  throw Error("unknown mask policy '" + std::string(text) + "'");
}

std::size_t PackedSequence::content_length() const {
  for (std::size_t i = loss_mask.size(); i > 0; --i) {
    if (loss_mask[i - 1]) return i;
  }
  return 0;
}

EncodedEvent encode_tagged(const Event& event, const Vocabulary& vocab, const Schema& schema) {
  EncodedEvent out;
  for (std::size_t c : schema.feature_indices()) {
    out.push_back({c, vocab.id(schema.columns[c].name, event.cells.at(c)),
                   schema.columns[c].role == ColumnRole::label, false});
  }
  return out;
}

EncodedEvent shuffle_columns(EncodedEvent event, const OrderPolicy& policy, Rng& rng) {
  if (event.empty()) throw Error("shuffle_columns: empty event");
  switch (policy.kind) {
    case OrderKind::fixed: return event;
    case OrderKind::random: rng.shuffle(std::span<EncodedToken>(event)); return event;
    case OrderKind::explicit_order: {
      if (policy.columns.size() != event.size()) throw Error("shuffle_columns: explicit order is not a permutation");
      EncodedEvent out;
      std::vector<char> used(event.size(), 0);
      for (std::size_t c : policy.columns) {
        bool found = false;
        for (std::size_t i = 0; i < event.size(); ++i) {
          if (!used[i] && event[i].column == c) {
            used[i] = 1;
            out.push_back(event[i]);
            found = true;
            break;
          }
        }
        if (!found) throw Error("shuffle_columns: explicit order is not a permutation");
      }
      return out;
    }
  }
  return event;
}

MaskedEvents mask_labels(std::vector<EncodedEvent> events, const MaskPolicy& policy, Rng& rng) {
  MaskedEvents out;
  for (const EncodedEvent& e : events) {
    TokenId label = kPad;
    bool found = false;
    for (const EncodedToken& t : e) {
      if (t.is_label) {
        label = t.id;
        found = true;
      }
    }
    if (!found && policy.kind != MaskKind::none) throw Error("mask_labels: masking requested but events have no label column");
    if (found) out.original_labels.push_back(label);
  }
  // mode 0: none, 1: all, 2: each label with probability 1/2
  int mode = 0;
  if (policy.kind == MaskKind::all_labels) {
    mode = 1;
  } else if (policy.kind == MaskKind::partial) {
    const double u = rng.uniform();
    mode = u < policy.p_all ? 1 : (u < policy.p_all + policy.p_half ? 2 : 0);
  }
  for (EncodedEvent& e : events) {
    const bool mask_this = mode == 1 || (mode == 2 && rng.bernoulli(0.5));
    for (EncodedToken& t : e) {
      if (t.is_label) t.masked = mask_this;
    }
  }
  out.events = std::move(events);
  return out;
}

PackedSequence build_sequence(const std::vector<EncodedEvent>& events, std::size_t L, std::string meta_value) {
  std::size_t needed = 1;
  for (const auto& e : events) needed += e.size() + 1;
  if (needed > L) {
    throw Error("build_sequence: " + std::to_string(needed) + " tokens do not fit context length " + std::to_string(L));
  }
  PackedSequence s;
  s.input_ids.assign(L, kPad);
  s.target_ids.assign(L, kPad);
  s.loss_mask.assign(L, 0);
  s.meta_value = std::move(meta_value);
  std::size_t p = 0;
  auto put = [&](TokenId in, TokenId target) {
    s.input_ids[p] = in;
    s.target_ids[p] = target;
    s.loss_mask[p] = 1;
    ++p;
  };
  for (const auto& e : events) {
    for (const EncodedToken& t : e) {
      if (t.is_label) s.label_positions.push_back(static_cast<std::uint32_t>(p));
      put(t.masked ? kMask : t.id, t.id);
    }
    put(kRow, kRow);
  }
  put(kEos, kEos);
  return s;
}

PackedSequence assemble(const EventChunk& chunk, const Vocabulary& vocab, const Schema& schema,
                        const PackOptions& options, Rng& order_rng, Rng& mask_rng) {
  if (chunk.empty()) throw Error("assemble: empty chunk");
  if (chunk.size() > options.events_per_sequence) {
    throw Error("assemble: chunk of " + std::to_string(chunk.size()) + " events exceeds sequence length " +
                std::to_string(options.events_per_sequence));
  }
  const std::size_t L = context_length(options.events_per_sequence, schema.feature_indices().size());
  std::vector<EncodedEvent> events;
  for (const Event& e : chunk) events.push_back(shuffle_columns(encode_tagged(e, vocab, schema), options.order, order_rng));
  auto masked = mask_labels(std::move(events), options.mask, mask_rng);
  return build_sequence(masked.events, L, chunk.front().cells.at(schema.meta_index()));
}

PackedSequence reaugment(const PackedSequence& seq, const OrderPolicy& order, const MaskPolicy& mask, Rng& order_rng,
                         Rng& mask_rng) {
  std::vector<EncodedEvent> events(1);
  std::size_t label_cursor = 0;
  for (std::size_t p = 0; p < seq.length() && seq.loss_mask[p]; ++p) {
    const TokenId t = seq.target_ids[p];
    if (t == kEos) break;
    if (t == kRow) {
      events.emplace_back();
      continue;
    }
    const bool is_label = label_cursor < seq.label_positions.size() && seq.label_positions[label_cursor] == p;
    if (is_label) ++label_cursor;
    events.back().push_back({events.back().size(), t, is_label, false});
  }
  events.pop_back();  // the slot opened by the final [ROW]
  OrderPolicy effective = order;
  if (effective.kind == OrderKind::explicit_order) effective.kind = OrderKind::fixed;
  for (auto& e : events) e = shuffle_columns(std::move(e), effective, order_rng);
  auto masked = mask_labels(std::move(events), mask, mask_rng);
  return build_sequence(masked.events, seq.length(), seq.meta_value);
}

PackedDataset pack_groups(const std::vector<UserGroup>& groups, const Vocabulary& vocab, const Schema& schema,
                          const PackOptions& options, std::uint64_t seed) {
  PackedDataset out;
  out.header.context_length =
      static_cast<std::uint32_t>(context_length(options.events_per_sequence, schema.feature_indices().size()));
  out.header.vocab_hash = vocab.hash();
  out.header.order = options.order.kind;
  out.header.mask = options.mask;
  out.header.seed = seed;
  std::uint64_t index = 0;
  for (const UserGroup& g : groups) {
    for (const EventChunk& chunk : chunk_sequences(g, options.events_per_sequence)) {
      Rng order_rng(derive_seed(seed, {index, 1}));
      Rng mask_rng(derive_seed(seed, {index, 2}));
      out.records.push_back(assemble(chunk, vocab, schema, options, order_rng, mask_rng));
      ++index;
    }
  }
  return out;
}

namespace {

constexpr char kMagic[8] = {'S', 'T', 'E', 'P', 'P', 'K', '1', '\0'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

void write_packed(const std::filesystem::path& path, const PackedDataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  BinaryWriter w(out);
  const auto& h = ds.header;
  w.put_bytes(std::string_view(kMagic, sizeof(kMagic)));
  w.put<std::uint32_t>(kVersion);
  w.put<std::uint32_t>(h.context_length);
  w.put<std::uint64_t>(h.vocab_hash);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(h.order));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(h.mask.kind));
  w.put<std::uint16_t>(0);
  w.put<double>(h.mask.p_all);
  w.put<double>(h.mask.p_half);
  w.put<std::uint64_t>(h.seed);
  w.put<std::uint64_t>(ds.records.size());

  std::vector<std::uint64_t> offsets;
  std::vector<std::uint8_t> bits((h.context_length + 7) / 8);
  for (const PackedSequence& s : ds.records) {
    if (s.length() != h.context_length || s.target_ids.size() != h.context_length ||
        s.loss_mask.size() != h.context_length) {
      throw Error("write_packed: record length differs from header context length");
    }
    offsets.push_back(w.offset());
    w.put_array(std::span<const TokenId>(s.input_ids));
    w.put_array(std::span<const TokenId>(s.target_ids));
    std::fill(bits.begin(), bits.end(), 0);
    for (std::size_t i = 0; i < s.loss_mask.size(); ++i) {
      if (s.loss_mask[i]) bits[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
    }
    w.put_array(std::span<const std::uint8_t>(bits));
    w.put_string(s.meta_value);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.label_positions.size()));
    w.put_array(std::span<const std::uint32_t>(s.label_positions));
  }
  const std::uint64_t index_offset = w.offset();
  w.put_array(std::span<const std::uint64_t>(offsets));
  w.put<std::uint64_t>(index_offset);
  w.check(path.string());
}

PackedDataset read_packed(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("missing packed dataset " + path.string());
  BinaryReader r(in, path.string());
  if (r.get_bytes(sizeof(kMagic)) != std::string_view(kMagic, sizeof(kMagic))) {
    throw Error(path.string() + ": not a packed dataset (bad magic)");
  }
  if (r.get<std::uint32_t>() != kVersion) throw Error(path.string() + ": unsupported packed dataset version");
  PackedDataset ds;
  auto& h = ds.header;
  h.context_length = r.get<std::uint32_t>();
  h.vocab_hash = r.get<std::uint64_t>();
  const auto order = r.get<std::uint8_t>();
  const auto mask = r.get<std::uint8_t>();
  if (order > 2 || mask > 2) throw Error(path.string() + ": corrupt policy fields");
  h.order = static_cast<OrderKind>(order);
  h.mask.kind = static_cast<MaskKind>(mask);
  r.get<std::uint16_t>();
  h.mask.p_all = r.get<double>();
  h.mask.p_half = r.get<double>();
  h.seed = r.get<std::uint64_t>();
  const auto count = r.get<std::uint64_t>();
  const std::size_t L = h.context_length;
  std::vector<std::uint8_t> bits((L + 7) / 8);
  for (std::uint64_t i = 0; i < count; ++i) {
    PackedSequence s;
    s.input_ids.resize(L);
    s.target_ids.resize(L);
    r.get_array(std::span<TokenId>(s.input_ids));
    r.get_array(std::span<TokenId>(s.target_ids));
    r.get_array(std::span<std::uint8_t>(bits));
    s.loss_mask.resize(L);
    for (std::size_t j = 0; j < L; ++j) s.loss_mask[j] = (bits[j / 8] >> (j % 8)) & 1u;
    s.meta_value = r.get_string();
    const auto n_labels = r.get<std::uint32_t>();
    if (n_labels > L) throw Error(path.string() + ": corrupt label position count");
    s.label_positions.resize(n_labels);
    r.get_array(std::span<std::uint32_t>(s.label_positions));
    ds.records.push_back(std::move(s));
  }
  std::vector<std::uint64_t> offsets(count);
  r.get_array(std::span<std::uint64_t>(offsets));
  r.get<std::uint64_t>();
  return ds;
}

PackedDataset read_packed(const std::filesystem::path& path, const Vocabulary& vocab) {
  PackedDataset ds = read_packed(path);
  if (ds.header.vocab_hash != vocab.hash()) {
    throw Error("vocab hash mismatch: " + path.string() + " was packed with " + hex64(ds.header.vocab_hash) +
                ", vocabulary is " + hex64(vocab.hash()));
  }
  return ds;
}

}  // namespace step
