#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <tuple>

#include "step/error.hpp"
#include "step/hash.hpp"
#include "step/vocab.hpp"

namespace step {

namespace {

constexpr std::string_view kHeader = "stepvocab v1";
constexpr std::string_view kSpecialNames[kNumSpecials] = {"[PAD]", "[EOS]", "[ROW]", "[MASK]", "[UNK]"};

std::string escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\t': out += "\\t"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      default: out += c;
    }
  }
  return out;
}

std::string unescape(std::string_view s, std::size_t line_no) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out += s[i];
      continue;
    }
    if (++i == s.size()) throw Error("vocab line " + std::to_string(line_no) + ": dangling escape");
    switch (s[i]) {
      case '\\': out += '\\'; break;
      case 't': out += '\t'; break;
      case 'n': out += '\n'; break;
      case 'r': out += '\r'; break;
      default: throw Error("vocab line " + std::to_string(line_no) + ": unknown escape");
    }
  }
  return out;
}

const std::vector<TokenId> kNoIds;

}  // namespace

std::string_view special_name(TokenId id) {
  if (id >= kNumSpecials) throw Error("not a special token id: " + std::to_string(id));
  return kSpecialNames[id];
}

Vocabulary::Vocabulary() {
  for (TokenId i = 0; i < kNumSpecials; ++i) entries_.push_back({"", std::string(kSpecialNames[i])});
}

void Vocabulary::add(std::string column, std::string value) {
  const auto id = static_cast<TokenId>(entries_.size());
  auto [it, inserted] = lookup_[column].try_emplace(value, id);
  if (!inserted) throw Error("vocabulary: duplicate entry for column '" + column + "'");
  by_column_[column].push_back(id);
  entries_.push_back({std::move(column), std::move(value)});
}

Vocabulary Vocabulary::fit(const std::vector<UserGroup>& train_groups, const Schema& schema, std::size_t max_size) {
  if (max_size <= kNumSpecials) throw Error("fit_vocab: max_size must exceed the 5 special tokens");
  const auto features = schema.feature_indices();
  // (column position, value) -> count
  std::map<std::pair<std::size_t, std::string>, std::size_t> counts;
  for (const UserGroup& g : train_groups) {
    for (const Event& e : g.events) {
      for (std::size_t c : features) ++counts[{c, e.cells[c]}];
    }
  }
  struct Item {
    std::size_t column;
    const std::string* value;
    std::size_t count;
  };
  std::vector<Item> items;
  for (const auto& [key, n] : counts) items.push_back({key.first, &key.second, n});

  const std::size_t budget = max_size - kNumSpecials;
  if (items.size() > budget) {
    std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
      return std::tie(b.count, a.column, *a.value) < std::tie(a.count, b.column, *b.value);
    });
    items.resize(budget);
  }
  std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
    return std::tie(a.column, b.count, *a.value) < std::tie(b.column, a.count, *b.value);
  });
  Vocabulary v;
  for (const Item& it : items) v.add(schema.columns[it.column].name, *it.value);
  return v;
}

std::optional<TokenId> Vocabulary::find(std::string_view column, std::string_view value) const {
  auto c = lookup_.find(std::string(column));
  if (c == lookup_.end()) return std::nullopt;
  auto v = c->second.find(std::string(value));
  if (v == c->second.end()) return std::nullopt;
  return v->second;
}

TokenId Vocabulary::id(std::string_view column, std::string_view value) const {
  return find(column, value).value_or(kUnk);
}

const VocabEntry& Vocabulary::entry(TokenId id) const {
  if (id >= entries_.size()) {
    throw Error("token id " + std::to_string(id) + " out of range for vocabulary of size " + std::to_string(size()));
  }
  return entries_[id];
}

const std::vector<TokenId>& Vocabulary::column_ids(std::string_view column) const {
  auto it = by_column_.find(std::string(column));
  return it == by_column_.end() ? kNoIds : it->second;
}

std::string Vocabulary::serialize() const {
  std::string out(kHeader);
  out += '\n';
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    out += std::to_string(i);
    out += '\t';
    out += escape(entries_[i].column);
    out += '\t';
    out += escape(entries_[i].value);
    out += '\n';
  }
  return out;
}

Vocabulary Vocabulary::parse(std::string_view text) {
  std::size_t pos = 0;
  std::size_t line_no = 0;
  auto next_line = [&](std::string_view& line) {
    if (pos >= text.size()) return false;
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    return true;
  };
  std::string_view line;
  if (!next_line(line) || line != kHeader) throw Error("vocab: missing 'stepvocab v1' header");

  std::map<std::size_t, VocabEntry> rows;
  while (next_line(line)) {
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string_view::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string_view::npos || line.find('\t', t2 + 1) != std::string_view::npos) {
      throw Error("vocab: malformed line " + std::to_string(line_no));
    }
    std::size_t id = 0;
    const auto idtext = line.substr(0, t1);
    auto [p, ec] = std::from_chars(idtext.data(), idtext.data() + idtext.size(), id);
    if (ec != std::errc() || p != idtext.data() + idtext.size() || idtext.empty()) {
      throw Error("vocab: malformed line " + std::to_string(line_no));
    }
    VocabEntry e{unescape(line.substr(t1 + 1, t2 - t1 - 1), line_no), unescape(line.substr(t2 + 1), line_no)};
    if (!rows.emplace(id, std::move(e)).second) throw Error("vocab: duplicate id " + std::to_string(id));
  }
  std::size_t expect = 0;
  for (const auto& [id, e] : rows) {
    if (id != expect++) throw Error("vocab: non-contiguous ids");
  }
  if (rows.size() < kNumSpecials) throw Error("vocab: missing special tokens");
  Vocabulary v;
  for (const auto& [id, e] : rows) {
    if (id < kNumSpecials) {
      if (!(e == v.entries_[id])) throw Error("vocab: id " + std::to_string(id) + " must be " + std::string(kSpecialNames[id]));
      continue;
    }
    if (e.column.empty()) throw Error("vocab: id " + std::to_string(id) + " has no column");
    v.add(e.column, e.value);
  }
  return v;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write vocabulary " + path.string());
  out << serialize();
  if (!out) throw Error("write failed: " + path.string());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("missing vocabulary " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::uint64_t Vocabulary::hash() const { return fnv1a(serialize()); }

DecodedToken decode_token(TokenId id, const Vocabulary& vocab) {
  const VocabEntry& e = vocab.entry(id);
  return {vocab.is_special(id), e.column, e.value};
}

std::vector<TokenId> encode_event(const Record& cells, const Vocabulary& vocab, const Schema& schema,
                                  std::span<const std::size_t> column_order) {
  std::vector<TokenId> out;
  out.reserve(column_order.size());
  for (std::size_t c : column_order) out.push_back(vocab.id(schema.columns.at(c).name, cells.at(c)));
  return out;
}

std::vector<TokenId> encode_event(const Record& cells, const Vocabulary& vocab, const Schema& schema) {
  const auto order = schema.feature_indices();
  return encode_event(cells, vocab, schema, order);
}

}  // namespace step
