#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "../support/generators.hpp"
#include "../support/oracles.hpp"
#include "step/error.hpp"
#include "step/hash.hpp"
#include "step/packing.hpp"
#include "temp_dir.hpp"

using namespace step;

namespace {

struct Corpus {
  Schema schema;
  std::vector<UserGroup> groups;
  Vocabulary vocab;
};

Corpus random_corpus(Rng& rng, bool with_label, std::size_t max_events = 12) {
  Corpus c;
  c.schema = gen::schema(rng, 1 + rng.below(3), with_label);
  RawTable t = gen::table(rng, c.schema, 1 + rng.below(4), max_events);
  c.groups = group_and_sort(t);
  c.vocab = Vocabulary::fit(c.groups, c.schema);
  return c;
}

EncodedEvent three_tokens() {
  return {{1, 10, false, false}, {2, 11, false, false}, {3, 12, true, false}};
}

std::vector<EncodedEvent> labelled_events(std::size_t n) {
  std::vector<EncodedEvent> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back({{1, TokenId(10 + i), false, false}, {2, TokenId(40 + i % 2), true, false}});
  }
  return out;
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Checks every structural invariant of a packed sequence.
void check_invariants(const PackedSequence& s, std::size_t L) {
  REQUIRE(s.input_ids.size() == L);
  REQUIRE(s.target_ids.size() == L);
  REQUIRE(s.loss_mask.size() == L);
  std::set<std::uint32_t> labels(s.label_positions.begin(), s.label_positions.end());
  bool in_content = true;
  for (std::size_t p = 0; p < L; ++p) {
    REQUIRE(s.target_ids[p] != kMask);
    if (s.loss_mask[p]) {
      REQUIRE(in_content);
      REQUIRE(s.target_ids[p] != kPad);
    } else {
      in_content = false;
      REQUIRE(s.input_ids[p] == kPad);
      REQUIRE(s.target_ids[p] == kPad);
    }
    if (s.input_ids[p] != s.target_ids[p]) {
      REQUIRE(labels.count(static_cast<std::uint32_t>(p)) == 1);
      REQUIRE(s.input_ids[p] == kMask);
    }
  }
  REQUIRE(s.target_ids[s.content_length() - 1] == kEos);
}

}  // namespace

TEST_SUITE("packing") {
  TEST_CASE("single-token event is unchanged under any policy") {
    Rng rng(1);
    const EncodedEvent e{{1, 9, false, false}};
    CHECK(shuffle_columns(e, {OrderKind::fixed, {}}, rng) == e);
    CHECK(shuffle_columns(e, {OrderKind::random, {}}, rng) == e);
    CHECK(shuffle_columns(e, {OrderKind::explicit_order, {1}}, rng) == e);
  }

  TEST_CASE("explicit order applies the caller's permutation") {
    Rng rng(1);
    const auto out = shuffle_columns(three_tokens(), {OrderKind::explicit_order, {3, 1, 2}}, rng);
    CHECK(out[0].id == 12);
    CHECK(out[1].id == 10);
    CHECK(out[2].id == 11);
    CHECK_THROWS_AS(shuffle_columns(three_tokens(), {OrderKind::explicit_order, {3, 1, 1}}, rng), Error);
    CHECK_THROWS_AS(shuffle_columns(three_tokens(), {OrderKind::explicit_order, {3, 1}}, rng), Error);
    CHECK_THROWS_AS(shuffle_columns({}, {OrderKind::fixed, {}}, rng), Error);
  }

  TEST_CASE("random order draws the six permutations uniformly") {
    Rng rng(2);
    std::map<std::vector<TokenId>, std::size_t> counts;
    const int draws = 6000;
    for (int i = 0; i < draws; ++i) {
      const auto out = shuffle_columns(three_tokens(), {OrderKind::random, {}}, rng);
      std::vector<TokenId> ids;
      for (const auto& t : out) ids.push_back(t.id);
      ++counts[ids];
    }
    REQUIRE(counts.size() == 6);
    std::vector<std::size_t> c;
    for (const auto& [perm, n] : counts) {
      c.push_back(n);
      CHECK(std::abs(static_cast<double>(n) / draws - 1.0 / 6.0) <= 0.02);
    }
    // 5 degrees of freedom; 20.5 is the 0.999 quantile.
    CHECK(oracle::chi_squared_uniform(c) < 20.5);
  }

  TEST_CASE("property: shuffling preserves the token multiset") {
    Rng rng(3);
    for (int trial = 0; trial < 1000; ++trial) {
      EncodedEvent e;
      const std::size_t n = 1 + rng.below(8);
      for (std::size_t i = 0; i < n; ++i) e.push_back({i, TokenId(5 + rng.below(4)), false, false});
      auto out = shuffle_columns(e, {OrderKind::random, {}}, rng);
      auto key = [](const EncodedToken& a, const EncodedToken& b) { return a.column < b.column; };
      std::sort(out.begin(), out.end(), key);
      REQUIRE(out == e);
    }
  }

  TEST_CASE("mask_labels policies") {
    Rng rng(4);
    const auto none = mask_labels(labelled_events(10), MaskPolicy::none(), rng);
    CHECK(none.events == labelled_events(10));
    REQUIRE(none.original_labels.size() == 10);
    for (std::size_t i = 0; i < 10; ++i) CHECK(none.original_labels[i] == TokenId(40 + i % 2));

    const auto all = mask_labels(labelled_events(10), MaskPolicy::all(), rng);
    const PackedSequence s = build_sequence(all.events, context_length(10, 2), "u");
    CHECK(std::count(s.input_ids.begin(), s.input_ids.end(), kMask) == 10);
    for (auto p : s.label_positions) CHECK(s.input_ids[p] == kMask);

    std::vector<EncodedEvent> unlabelled{{{1, 10, false, false}}};
    CHECK_THROWS_AS(mask_labels(unlabelled, MaskPolicy::all(), rng), Error);
    CHECK_NOTHROW(mask_labels(unlabelled, MaskPolicy::none(), rng));
  }

  TEST_CASE("partial masking rates") {
    Rng rng(5);
    const int draws = 10000;
    int full = 0, empty = 0, mixed = 0;
    for (int i = 0; i < draws; ++i) {
      const auto m = mask_labels(labelled_events(10), MaskPolicy::partial(0.25, 0.25), rng);
      int masked = 0;
      for (const auto& e : m.events) masked += e[1].masked;
      if (masked == 10) ++full;
      else if (masked == 0) ++empty;
      else ++mixed;
    }
    // A half-masked sequence of ten labels is fully masked with probability 2^-10.
    CHECK(std::abs(full / double(draws) - 0.25) <= 0.02);
    CHECK(std::abs(empty / double(draws) - 0.50) <= 0.02);
    CHECK(std::abs(mixed / double(draws) - 0.25) <= 0.02);
  }

  TEST_CASE("assemble layout") {
    const Schema s{{{"user", ColumnRole::meta},
                    {"ts", ColumnRole::time},
                    {"cat", ColumnRole::categorical},
                    {"label", ColumnRole::label}}};
    UserGroup g{"u", {{0, {"u", "0", "a", "1"}}, {1, {"u", "5", "b", "0"}}}};
    const Vocabulary v = Vocabulary::fit({g}, s);
    Rng r1(1), r2(2);
    PackOptions opt{2, {}, MaskPolicy::none()};
    const auto seq = assemble(g.events, v, s, opt, r1, r2);
    CHECK(seq.length() == 9);
    CHECK(std::count(seq.loss_mask.begin(), seq.loss_mask.end(), 1) == 9);
    CHECK(seq.input_ids[3] == kRow);
    CHECK(seq.input_ids[7] == kRow);
    CHECK(seq.input_ids[8] == kEos);
    CHECK(seq.input_ids[0] == *v.find("ts", "0"));

    PackOptions ten{10, {}, MaskPolicy::all()};
    const auto one = assemble({g.events[0]}, v, s, ten, r1, r2);
    CHECK(one.length() == context_length(10, 3));
    CHECK(one.content_length() == 5);
    for (std::size_t p = 5; p < one.length(); ++p) {
      CHECK(one.input_ids[p] == 0);
      CHECK(one.target_ids[p] == 0);
      CHECK(one.loss_mask[p] == 0);
    }
    REQUIRE(one.label_positions == std::vector<std::uint32_t>{2});
    CHECK(one.input_ids[2] == kMask);
    CHECK(one.target_ids[2] == *v.find("label", "1"));

    PackOptions short_opt{1, {}, MaskPolicy::none()};
    CHECK_THROWS_AS(assemble(g.events, v, s, short_opt, r1, r2), Error);
  }

  TEST_CASE("property: packed sequences satisfy every invariant and never leak masked labels") {
    Rng rng(6);
    for (int trial = 0; trial < 1000; ++trial) {
      const Corpus c = random_corpus(rng, true);
      const MaskKind kinds[] = {MaskKind::none, MaskKind::all_labels, MaskKind::partial};
      PackOptions opt{1 + rng.below(6), {rng.bernoulli(0.5) ? OrderKind::random : OrderKind::fixed, {}},
                      MaskPolicy::partial()};
      opt.mask.kind = kinds[rng.below(3)];
      const auto ds = pack_groups(c.groups, c.vocab, c.schema, opt, rng.next());
      const std::size_t L = ds.header.context_length;
      REQUIRE(L == context_length(opt.events_per_sequence, c.schema.feature_indices().size()));
      const auto label_col = *c.schema.label_index();
      for (const auto& s : ds.records) {
        check_invariants(s, L);
        for (auto p : s.label_positions) {
          REQUIRE(c.vocab.entry(s.target_ids[p]).column == c.schema.columns[label_col].name);
          if (opt.mask.kind == MaskKind::all_labels) REQUIRE(s.input_ids[p] == kMask);
          if (opt.mask.kind == MaskKind::none) REQUIRE(s.input_ids[p] == s.target_ids[p]);
        }
      }
    }
  }

  TEST_CASE("property: shuffling and masking commute") {
    Rng rng(7);
    for (int trial = 0; trial < 1000; ++trial) {
      const std::size_t n = 1 + rng.below(6);
      std::vector<EncodedEvent> events;
      for (std::size_t i = 0; i < n; ++i) {
        EncodedEvent e;
        const std::size_t k = 2 + rng.below(3);
        for (std::size_t c = 0; c < k; ++c) e.push_back({c, TokenId(5 + rng.below(20)), c == k - 1, false});
        events.push_back(e);
      }
      const std::uint64_t so = rng.next(), sm = rng.next();
      const OrderPolicy order{OrderKind::random, {}};
      const MaskPolicy mask = MaskPolicy::partial(0.3, 0.4);

      Rng o1(so), m1(sm);
      std::vector<EncodedEvent> shuffled;
      for (const auto& e : events) shuffled.push_back(shuffle_columns(e, order, o1));
      const auto a = build_sequence(mask_labels(shuffled, mask, m1).events, 64, "u");

      Rng o2(so), m2(sm);
      auto masked = mask_labels(events, mask, m2).events;
      for (auto& e : masked) e = shuffle_columns(e, order, o2);
      const auto b = build_sequence(masked, 64, "u");
      REQUIRE(a == b);
    }
  }

  TEST_CASE("property: fixed order without masking is deterministic and injective") {
    Rng rng(8);
    for (int trial = 0; trial < 1000; ++trial) {
      const Corpus c = random_corpus(rng, rng.bernoulli(0.5), 6);
      PackOptions opt{6, {}, MaskPolicy::none()};
      std::vector<std::pair<EventChunk, PackedSequence>> seen;
      for (const auto& g : c.groups) {
        Rng a1(rng.next()), a2(rng.next()), b1(rng.next()), b2(rng.next());
        const auto x = assemble(g.events, c.vocab, c.schema, opt, a1, a2);
        const auto y = assemble(g.events, c.vocab, c.schema, opt, b1, b2);
        REQUIRE(x == y);
        for (const auto& [chunk, seq] : seen) {
          bool same_cells = chunk.size() == g.events.size();
          for (std::size_t i = 0; same_cells && i < chunk.size(); ++i) same_cells = chunk[i].cells == g.events[i].cells;
          if (!same_cells) REQUIRE(!(seq == x));
        }
        seen.emplace_back(g.events, x);
      }
    }
  }

  TEST_CASE("packed file round trip of 1000 sequences") {
    TempDir dir("pack");
    Rng rng(9);
    PackedDataset ds;
    ds.header = {21, 0x1234, OrderKind::random, MaskPolicy::partial(0.2, 0.3), 77};
    for (int i = 0; i < 1000; ++i) {
      PackedSequence s;
      const std::size_t content = 1 + rng.below(21);
      for (std::size_t p = 0; p < 21; ++p) {
        const bool real = p < content;
        const TokenId t = real ? TokenId(1 + rng.below(500)) : kPad;
        s.target_ids.push_back(t);
        s.input_ids.push_back(real && rng.bernoulli(0.1) ? kMask : t);
        s.loss_mask.push_back(real);
        if (s.input_ids.back() == kMask) s.label_positions.push_back(static_cast<std::uint32_t>(p));
      }
      s.meta_value = gen::word(rng);
      ds.records.push_back(s);
    }
    write_packed(dir / "a.pack", ds);
    const auto back = read_packed(dir / "a.pack");
    CHECK(back.header == ds.header);
    CHECK(back.records == ds.records);
    write_packed(dir / "b.pack", back);
    CHECK(file_bytes(dir / "a.pack") == file_bytes(dir / "b.pack"));
  }

  TEST_CASE("reading against a different vocabulary is refused") {
    TempDir dir("pack");
    Rng rng(10);
    const Corpus c = random_corpus(rng, true);
    const auto ds = pack_groups(c.groups, c.vocab, c.schema, {4, {}, MaskPolicy::all()}, 1);
    write_packed(dir / "p.pack", ds);
    CHECK_NOTHROW(read_packed(dir / "p.pack", c.vocab));
    const Vocabulary other;
    CHECK_THROWS_WITH_AS(read_packed(dir / "p.pack", other), doctest::Contains("vocab hash mismatch"), Error);
  }

  TEST_CASE("empty dataset is a valid file") {
    TempDir dir("pack");
    PackedDataset ds;
    ds.header.context_length = 9;
    write_packed(dir / "e.pack", ds);
    const auto back = read_packed(dir / "e.pack");
    CHECK(back.records.empty());
    CHECK(back.header == ds.header);
  }

  TEST_CASE("corrupt files are rejected") {
    TempDir dir("pack");
    {
      std::ofstream out(dir / "x.pack", std::ios::binary);
      out << "NOTAPACK";
    }
    CHECK_THROWS_AS(read_packed(dir / "x.pack"), Error);
    CHECK_THROWS_AS(read_packed(dir / "missing.pack"), Error);
  }

  TEST_CASE("property: re-augmentation keeps content and label targets") {
    Rng rng(11);
    for (int trial = 0; trial < 1000; ++trial) {
      const Corpus c = random_corpus(rng, true);
      PackOptions opt{1 + rng.below(5), {OrderKind::fixed, {}}, MaskPolicy::none()};
      const auto ds = pack_groups(c.groups, c.vocab, c.schema, opt, 3);
      for (const auto& s : ds.records) {
        Rng o(rng.next()), m(rng.next());
        const auto r = reaugment(s, {OrderKind::random, {}}, MaskPolicy::all(), o, m);
        check_invariants(r, s.length());
        REQUIRE(r.content_length() == s.content_length());
        auto a = s.target_ids, b = r.target_ids;
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        REQUIRE(a == b);
        REQUIRE(r.label_positions.size() == s.label_positions.size());
        for (std::size_t i = 0; i < r.label_positions.size(); ++i) {
          REQUIRE(r.input_ids[r.label_positions[i]] == kMask);
          REQUIRE(r.target_ids[r.label_positions[i]] == s.target_ids[s.label_positions[i]]);
        }
      }
    }
  }
}
