#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "step/autograd.hpp"
#include "step/preprocess.hpp"
#include "step/schema.hpp"

namespace step {

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kEos = 1;
inline constexpr TokenId kRow = 2;
inline constexpr TokenId kMask = 3;
inline constexpr TokenId kUnk = 4;
inline constexpr std::size_t kNumSpecials = 5;

std::string_view special_name(TokenId id);

struct VocabEntry {
  std::string column;  // empty for specials
  std::string value;   // special name for specials
  friend bool operator==(const VocabEntry&, const VocabEntry&) = default;
};

// Per-column word-level vocabulary. The same string in two columns gets two
// ids; ids 0..4 are the fixed specials.
class Vocabulary {
 public:
  Vocabulary();

  // Counts (column, value) over the non-meta cells of the training events.
  // Ids go by column position, then descending frequency, then value. If there
  // are more pairs than max_size - 5, the globally rarest are left out and
  // encode to [UNK].
  static Vocabulary fit(const std::vector<UserGroup>& train_groups, const Schema& schema, std::size_t max_size = 60000);

  std::size_t size() const { return entries_.size(); }
  std::optional<TokenId> find(std::string_view column, std::string_view value) const;
  // [UNK] when absent.
  TokenId id(std::string_view column, std::string_view value) const;
  // Throws for id >= size().
  const VocabEntry& entry(TokenId id) const;
  bool is_special(TokenId id) const { return id < kNumSpecials; }
  // Ids belonging to a column, ascending.
  const std::vector<TokenId>& column_ids(std::string_view column) const;

  std::string serialize() const;
  static Vocabulary parse(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);
  // FNV-1a of serialize(); equals hash_file() of a saved vocabulary.
  std::uint64_t hash() const;

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.entries_ == b.entries_; }

 private:
  void add(std::string column, std::string value);

  std::vector<VocabEntry> entries_;
  std::unordered_map<std::string, std::unordered_map<std::string, TokenId>> lookup_;
  std::unordered_map<std::string, std::vector<TokenId>> by_column_;
};

// Decoded form of a token: specials report their bracketed name and an empty column.
struct DecodedToken {
  bool special = false;
  std::string column;
  std::string value;
};
DecodedToken decode_token(TokenId id, const Vocabulary& vocab);

// One token per listed column (schema indices, in the given order).
std::vector<TokenId> encode_event(const Record& cells, const Vocabulary& vocab, const Schema& schema,
                                  std::span<const std::size_t> column_order);
// Schema order over all non-meta columns.
std::vector<TokenId> encode_event(const Record& cells, const Vocabulary& vocab, const Schema& schema);

}  // namespace step
