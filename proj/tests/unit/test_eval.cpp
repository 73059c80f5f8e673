#include <doctest.h>

#include <set>

#include "../support/oracles.hpp"
#include "../support/pipeline.hpp"
#include "step/error.hpp"
#include "step/eval.hpp"
#include "step/train.hpp"
#include "temp_dir.hpp"

using namespace step;

namespace {

std::vector<ScoredExample> examples(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::vector<ScoredExample> out;
  for (std::size_t i = 0; i < scores.size(); ++i) out.push_back({scores[i], labels[i] != 0});
  return out;
}

std::vector<EventChunk> windows_of(const std::vector<UserGroup>& groups, std::size_t l) {
  std::vector<EventChunk> out;
  for (const auto& g : groups) {
    for (auto& w : sliding_windows(g, l)) out.push_back(std::move(w));
  }
  return out;
}

DecoderModel trained(const fixture::Synthetic& s, std::size_t epochs, double lr, std::size_t batch) {
  TrainConfig c;
  c.epochs = epochs;
  c.learning_rate = lr;
  c.batch_size = batch;
  c.seed = 5;
  Trainer t(DecoderModel(fixture::desk_model(s)), s.packed, s.vocab.hash(), c);
  t.run();
  return t.model();
}

EvalOptions options_for(OrderKind order, std::vector<std::uint64_t> seeds = {0}) {
  EvalOptions o;
  o.order = order;
  o.seeds = std::move(seeds);
  return o;
}

// Synthetic-style table whose label depends only on the event's own amount.
RawTable within_event_rule(std::size_t users, std::size_t events, std::uint64_t seed) {
  Rng rng(seed);
  RawTable t{synth_schema(), {}};
  for (std::size_t u = 0; u < users; ++u) {
    for (std::size_t j = 0; j < events; ++j) {
      const int amount = static_cast<int>(rng.below(100));
      t.rows.push_back({"u" + std::to_string(u), std::to_string(j * 60 + rng.below(30)), "c" + std::to_string(rng.below(4)),
                        std::to_string(amount), amount >= 50 ? "1" : "0"});
    }
  }
  return t;
}

}  // namespace

TEST_SUITE("eval") {
  TEST_CASE("auc examples") {
    CHECK(auc(examples({0.9, 0.1}, {1, 0})) == 1.0);
    CHECK(auc(examples({0.8, 0.8, 0.2}, {1, 0, 0})) == 0.75);
    CHECK(auc(examples({0.1, 0.9}, {1, 0})) == 0.0);
    CHECK_THROWS_WITH_AS(auc(examples({0.3, 0.4}, {1, 1})), "auc: single-class input", Error);
    CHECK_THROWS_AS(auc(examples({1.3, 0.4}, {1, 0})), Error);
  }

  TEST_CASE("random scores on balanced labels give one half") {
    Rng rng(1);
    std::vector<double> s(10000);
    std::vector<int> l(10000);
    for (std::size_t i = 0; i < s.size(); ++i) {
      s[i] = rng.uniform();
      l[i] = static_cast<int>(i % 2);
    }
    CHECK(std::abs(auc(examples(s, l)) - 0.5) <= 0.02);
  }

  TEST_CASE("property: matches brute force, ignores monotone maps, complements to one") {
    Rng rng(2);
    for (int trial = 0; trial < 1000; ++trial) {
      const std::size_t n = 2 + rng.below(49);
      std::vector<double> s(n);
      std::vector<int> l(n);
      const std::size_t levels = 1 + rng.below(8);
      for (std::size_t i = 0; i < n; ++i) {
        s[i] = static_cast<double>(rng.below(levels)) / static_cast<double>(levels);
        l[i] = rng.bernoulli(0.5);
      }
      l[0] = 1;
      l[1] = 0;
      const double a = auc(examples(s, l));
      REQUIRE(a == oracle::brute_force_auc(s, l));
      std::vector<double> mapped(n);
      const double k = 0.5 + 3.0 * rng.uniform();
      for (std::size_t i = 0; i < n; ++i) mapped[i] = std::pow(s[i], k) * 0.9 + 0.05;
      REQUIRE(auc(examples(mapped, l)) == a);
      std::vector<int> flipped(n);
      for (std::size_t i = 0; i < n; ++i) flipped[i] = 1 - l[i];
      REQUIRE(std::abs(a + auc(examples(s, flipped)) - 1.0) <= 1e-12);
    }
  }

  TEST_CASE("query prefixes never contain the scored label") {
    const auto s = fixture::synthetic(20, 25, 10, OrderKind::random, MaskPolicy::all());
    const auto windows = windows_of(s.prepared.split.test_groups, 10);
    const auto& label_ids = s.vocab.column_ids("label");
    const DecoderModel m(fixture::desk_model(s));
    const std::size_t k = 4;
    for (const MaskKind history : {MaskKind::all_labels, MaskKind::none}) {
      EvalOptions o = options_for(OrderKind::random, {0, 1});
      o.history_mask.kind = history;
      std::size_t prefixes = 0, violations = 0;
      o.observer = [&](std::span<const TokenId> prefix, std::size_t w) {
        ++prefixes;
        const auto last_row = std::find(prefix.rbegin(), prefix.rend(), kRow);
        const auto tail_begin = last_row == prefix.rend() ? prefix.begin() : last_row.base();
        for (auto it = tail_begin; it != prefix.end(); ++it) {
          if (std::find(label_ids.begin(), label_ids.end(), *it) != label_ids.end()) ++violations;
        }
        if (history == MaskKind::all_labels) {
          for (TokenId t : prefix) {
            if (std::find(label_ids.begin(), label_ids.end(), t) != label_ids.end()) ++violations;
          }
        }
        if (prefix.size() != 1 || prefix[0] != kEos) {
          CHECK(prefix.size() <= (windows[w].size() - 1) * (k + 1) + (k - 1));
        }
      };
      eval_last_label(m, windows, s.vocab, s.prepared.schema, o);
      sweep_position_length(m, windows, s.vocab, s.prepared.schema, 10, o);
      const std::vector<std::string> observed{"category", "amount"};
      eval_missing_features(m, windows, s.vocab, s.prepared.schema, observed, "label", o);
      CHECK(prefixes > 0);
      CHECK(violations == 0);
    }
  }

  TEST_CASE("build_query_prefix layout") {
    const auto s = fixture::synthetic(6, 12, 4, OrderKind::fixed, MaskPolicy::all());
    const auto w = windows_of(s.prepared.split.train_groups, 4).front();
    Rng rng(3);
    const std::vector<std::size_t> revealed{1, 2};
    const auto p = build_query_prefix(w, 3, revealed, s.vocab, s.prepared.schema, OrderKind::fixed, MaskPolicy::all(),
                                      rng);
    REQUIRE(p.size() == 2 * 5 + 2);
    CHECK(p[4] == kRow);
    CHECK(p[3] == kMask);
    CHECK(p[9] == kRow);
    CHECK(p[10] == s.vocab.id("ts", w.back().cells[1]));
    const auto empty = build_query_prefix(w, 1, {}, s.vocab, s.prepared.schema, OrderKind::fixed, MaskPolicy::all(), rng);
    CHECK(empty == std::vector<TokenId>{kEos});
    CHECK_THROWS_AS(build_query_prefix(w, 5, revealed, s.vocab, s.prepared.schema, OrderKind::fixed, MaskPolicy::all(), rng),
                    Error);
  }

  TEST_CASE("untrained model scores at chance") {
    const auto s = fixture::synthetic(100, 40, 10, OrderKind::random, MaskPolicy::all(), 7);
    const auto windows = windows_of(s.prepared.split.test_groups, 10);
    const DecoderModel m(fixture::desk_model(s, 11));
    const auto r = eval_last_label(m, windows, s.vocab, s.prepared.schema, options_for(OrderKind::random, {0, 1, 2}));
    CHECK(r.per_seed.size() == 3);
    CHECK(std::abs(r.mean - 0.5) <= 0.05);
    for (double v : r.per_seed) CHECK((v >= 0.0 && v <= 1.0));
  }

  TEST_CASE("report text round trip, grid shape and csv") {
    TempDir dir("eval");
    const auto s = fixture::synthetic(12, 20, 5, OrderKind::random, MaskPolicy::all());
    const auto windows = windows_of(s.prepared.split.test_groups, 5);
    const DecoderModel m(fixture::desk_model(s));
    const auto r = sweep_position_length(m, windows, s.vocab, s.prepared.schema, 5, options_for(OrderKind::random, {0, 1}));
    REQUIRE(r.grid.size() == 5);
    for (const auto& row : r.grid) {
      CHECK(row.size() == 4);
      for (double v : row) CHECK((v >= 0.0 && v <= 1.0));
    }
    CHECK(r.skipped.size() == 5);
    const auto back = parse_report(format_report(r));
    CHECK(back.task == "sweep");
    CHECK(back.order == "random");
    CHECK(back.mask == "all");
    CHECK(back.seeds == r.seeds);
    CHECK(back.per_seed == r.per_seed);
    CHECK(back.mean == r.mean);
    CHECK(back.stddev == r.stddev);
    CHECK(back.skipped == r.skipped);
    REQUIRE(back.grid.size() == 5);
    const std::string csv = grid_csv(r);
    CHECK(csv.rfind("s,p0,p1,p2,p3\n1,", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);
    CHECK_THROWS_AS(parse_report("nope\n"), Error);

    const auto l = eval_last_label(m, windows, s.vocab, s.prepared.schema, options_for(OrderKind::random, {0, 1, 2}));
    const EvalReport both[] = {l, l};
    const auto merged = merge_reports(both);
    CHECK(merged.per_seed.size() == 6);
    CHECK(merged.mean == doctest::Approx(l.mean).epsilon(1e-12));
    const EvalReport mixed[] = {l, r};
    CHECK_THROWS_AS(merge_reports(mixed), Error);
  }

  TEST_CASE("missing-feature queries coincide with last-label and sweep cells") {
    const auto s = fixture::synthetic(20, 25, 6, OrderKind::fixed, MaskPolicy::all());
    const auto windows = windows_of(s.prepared.split.test_groups, 6);
    const DecoderModel m(fixture::desk_model(s, 3));
    const auto& schema = s.prepared.schema;
    const auto o = options_for(OrderKind::fixed, {4});
    const std::vector<std::string> all_but_label{"ts", "category", "amount"};
    const auto full = eval_missing_features(m, windows, s.vocab, schema, all_but_label, "label", o);
    const auto last = eval_last_label(m, windows, s.vocab, schema, o);
    CHECK(full.mean == last.mean);

    const auto none = eval_missing_features(m, windows, s.vocab, schema, {}, "label", o);
    const auto sweep = sweep_position_length(m, windows, s.vocab, schema, 6, o);
    CHECK(none.mean == sweep.grid[5][0]);
    CHECK(full.mean == sweep.grid[5][3]);

    const auto acc = eval_missing_features(m, windows, s.vocab, schema, std::vector<std::string>{"amount"}, "category", o);
    CHECK(acc.metric == "accuracy");
    const std::vector<std::string> bad{"nope"};
    CHECK_THROWS_AS(eval_missing_features(m, windows, s.vocab, schema, bad, "label", o), Error);
    const std::vector<std::string> with_target{"label"};
    CHECK_THROWS_AS(eval_missing_features(m, windows, s.vocab, schema, with_target, "label", o), Error);
    const std::vector<std::string> meta{"user"};
    CHECK_THROWS_AS(eval_missing_features(m, windows, s.vocab, schema, meta, "label", o), Error);
  }

  TEST_CASE("a model fit to a deterministic rule ranks its training windows almost perfectly") {
    fixture::Synthetic s;
    s.table = within_event_rule(40, 30, 9);
    s.prepared = prepare(s.table, 8, 10, 0.1, 9);
    s.vocab = Vocabulary::fit(s.prepared.split.train_groups, s.prepared.schema);
    s.packed = pack_groups(s.prepared.split.train_groups, s.vocab, s.prepared.schema,
                           {10, {OrderKind::fixed, {}}, MaskPolicy::all()}, 9);
    const DecoderModel m = trained(s, 30, 3e-3, 8);
    const auto windows = windows_of(s.prepared.split.train_groups, 10);
    const auto r = eval_last_label(m, windows, s.vocab, s.prepared.schema, options_for(OrderKind::fixed, {0}));
    CHECK(r.mean >= 0.99);
  }

  TEST_CASE("on planted-rule data the relevant feature beats an irrelevant one") {
    const auto s = fixture::synthetic(150, 40, 10, OrderKind::random, MaskPolicy::all(), 13, 0.1, 8);
    const DecoderModel m = trained(s, 10, 2e-3, 16);
    const auto windows = windows_of(s.prepared.split.test_groups, 10);
    const auto o = options_for(OrderKind::random, {0, 1});
    const std::vector<std::string> relevant{"amount"}, irrelevant{"ts"};
    const auto a = eval_missing_features(m, windows, s.vocab, s.prepared.schema, relevant, "label", o);
    const auto b = eval_missing_features(m, windows, s.vocab, s.prepared.schema, irrelevant, "label", o);
    MESSAGE("observed amount AUC " << a.mean << ", observed ts AUC " << b.mean);
    CHECK(a.mean - b.mean >= 0.1);
  }
}
