#pragma once

// Small end-to-end fixtures built from the synthetic generator.

#include "step/model.hpp"
#include "step/packing.hpp"
#include "step/preprocess.hpp"
#include "step/synth.hpp"
#include "step/vocab.hpp"

namespace fixture {

struct Synthetic {
  step::GenConfig gen;
  step::RawTable table;
  step::PreparedData prepared;
  step::Vocabulary vocab;
  step::PackedDataset packed;
};

inline Synthetic synthetic(std::size_t users, std::size_t events, std::size_t seq_len, step::OrderKind order,
                           step::MaskPolicy mask, std::uint64_t seed = 1, double noise = 0.1, std::size_t bins = 8) {
  Synthetic s;
  s.gen.n_users = users;
  s.gen.events_per_user = events;
  s.gen.label_noise = noise;
  s.gen.seed = seed;
  s.table = step::generate(s.gen);
  s.prepared = step::prepare(s.table, bins, seq_len, 0.2, seed);
  s.vocab = step::Vocabulary::fit(s.prepared.split.train_groups, s.prepared.schema);
  step::PackOptions opt{seq_len, {order, {}}, mask};
  s.packed = step::pack_groups(s.prepared.split.train_groups, s.vocab, s.prepared.schema, opt, seed);
  return s;
}

inline step::ModelConfig desk_model(const Synthetic& s, std::uint64_t seed = 0) {
  step::ModelConfig c;
  c.vocab_size = s.vocab.size();
  c.context_length = s.packed.header.context_length;
  c.seed = seed;
  return c;
}

}  // namespace fixture
