#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "step/autograd.hpp"
#include "step/packing.hpp"
#include "step/rng.hpp"
#include "step/vocab.hpp"

namespace step {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t context_length = 0;
  std::size_t d_model = 64;
  std::size_t d_ff = 128;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Text form `key=value` per line; used for the model sidecar manifest.
std::string format_config(const ModelConfig& config);
ModelConfig parse_config(std::string_view text);

// GPT-2 style decoder with learned absolute positions and pre-norm blocks of
// causal self-attention plus a GELU MLP. A final layer norm feeds an output
// projection tied to the token embedding.
class DecoderModel {
 public:
  // Weights ~ N(0, 0.02) drawn from config.seed; biases and norm shifts start at 0, norm scales at 1.
  explicit DecoderModel(const ModelConfig& config);

  DecoderModel(const DecoderModel& other);
  DecoderModel& operator=(const DecoderModel& other);
  DecoderModel(DecoderModel&&) = default;
  DecoderModel& operator=(DecoderModel&&) = default;

  const ModelConfig& config() const { return config_; }
  // Stable order; checkpoints rely on it.
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::size_t parameter_count() const;

  // Records a batched forward pass on `tape`. `ids` holds n_seq rows of seq_len
  // tokens; the result is (n_seq * seq_len) x vocab logits where row p predicts
  // the token at p + 1.
  Var forward(Tape& tape, std::span<const TokenId> ids, std::size_t n_seq, std::size_t seq_len);

  // Inference: seq_len x vocab logits for one sequence.
  Matrix logits(std::span<const TokenId> ids) const;
  // Inference: logits at the final position of each of n_seq equal-length rows.
  Matrix last_logits(std::span<const TokenId> ids, std::size_t n_seq, std::size_t seq_len) const;

 private:
  struct Block {
    Parameter ln1_g, ln1_b, attn_w, attn_b, proj_w, proj_b;
    Parameter ln2_g, ln2_b, fc_w, fc_b, out_w, out_b;
  };

  template <class Self, class Bind>
  static Var forward_impl(Self& self, Tape& tape, Bind&& bind, std::span<const TokenId> ids, std::size_t n_seq,
                          std::size_t seq_len, bool last_only);

  ModelConfig config_;
  Parameter wte_, wpe_;
  std::vector<Block> blocks_;
  Parameter lnf_g_, lnf_b_;
};

// Mean next-token cross-entropy over every supervised position of the batch:
// logits[p] is scored against target_ids[p + 1] where loss_mask[p + 1].
Var batch_loss(Tape& tape, DecoderModel& model, std::span<const PackedSequence* const> batch);
// Same objective for one sequence, value only.
double sequence_loss(const DecoderModel& model, const PackedSequence& sequence);

// Softmax restricted to one column's tokens.
struct ColumnDistribution {
  std::string column;
  std::vector<TokenId> ids;
  std::vector<std::string> values;
  std::vector<double> probs;

  double probability(std::string_view value) const;  // 0 for values not in the column
  std::size_t argmax() const;
};

ColumnDistribution restrict_to_column(std::span<const double> logits, std::string_view column,
                                      const Vocabulary& vocab, double temperature = 1.0);

// Distribution of `column` at the position after `prefix`.
ColumnDistribution predict_column(const DecoderModel& model, std::span<const TokenId> prefix,
                                  std::string_view column, const Vocabulary& vocab);

// Generates one event: for each column in order, draws from predict_column at
// the given temperature (argmax when temperature <= 0) and appends it; ends with [ROW].
std::vector<TokenId> sample_event(const DecoderModel& model, std::span<const TokenId> prefix,
                                  std::span<const std::string> column_order, const Vocabulary& vocab, Rng& rng,
                                  double temperature);

}  // namespace step
