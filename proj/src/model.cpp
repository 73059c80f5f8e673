#include <algorithm>
#include <cmath>
#include <sstream>

#include "step/error.hpp"
#include "step/model.hpp"

namespace step {

void ModelConfig::validate() const {
  if (vocab_size < 1 || d_model < 1 || d_ff < 1 || n_layers < 1 || n_heads < 1) {
    throw Error("model config: all sizes must be >= 1");
  }
  if (context_length < 2) throw Error("model config: context length must be >= 2");
  if (d_model % n_heads != 0) throw Error("model config: d_model must be divisible by n_heads");
}

std::string format_config(const ModelConfig& c) {
  std::ostringstream out;
  out << "vocab_size=" << c.vocab_size << '\n'
      << "context_length=" << c.context_length << '\n'
      << "d_model=" << c.d_model << '\n'
      << "d_ff=" << c.d_ff << '\n'
      << "n_layers=" << c.n_layers << '\n'
      << "n_heads=" << c.n_heads << '\n'
      << "seed=" << c.seed << '\n';
  return out.str();
}

ModelConfig parse_config(std::string_view text) {
  ModelConfig c;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("model config: malformed line '" + line + "'");
    const std::string key = line.substr(0, eq);
    const auto v = std::stoull(line.substr(eq + 1));
    if (key == "vocab_size") c.vocab_size = v;
    else if (key == "context_length") c.context_length = v;
    else if (key == "d_model") c.d_model = v;
    else if (key == "d_ff") c.d_ff = v;
    else if (key == "n_layers") c.n_layers = v;
    else if (key == "n_heads") c.n_heads = v;
    else if (key == "seed") c.seed = v;
    // other keys (e.g. vocab_hash) belong to the surrounding manifest
  }
  c.validate();
  return c;
}

DecoderModel::DecoderModel(const ModelConfig& config) : config_(config) {
  config_.validate();
  const std::size_t V = config_.vocab_size;
  const std::size_t d = config_.d_model;
  const std::size_t f = config_.d_ff;
  wte_ = Parameter("wte", V, d);
  wpe_ = Parameter("wpe", config_.context_length, d);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    blocks_.push_back(Block{
        Parameter(p + "ln1.g", 1, d), Parameter(p + "ln1.b", 1, d), Parameter(p + "attn.w", d, 3 * d),
        Parameter(p + "attn.b", 1, 3 * d), Parameter(p + "proj.w", d, d), Parameter(p + "proj.b", 1, d),
        Parameter(p + "ln2.g", 1, d), Parameter(p + "ln2.b", 1, d), Parameter(p + "fc.w", d, f),
        Parameter(p + "fc.b", 1, f), Parameter(p + "out.w", f, d), Parameter(p + "out.b", 1, d)});
  }
  lnf_g_ = Parameter("lnf.g", 1, d);
  lnf_b_ = Parameter("lnf.b", 1, d);

  Rng rng(derive_seed(config_.seed, {0x696e6974}));
  for (Parameter* p : parameters()) {
    const std::string& n = p->name;
    const bool is_norm_scale = n.ends_with(".g");
    const bool is_bias = n.ends_with(".b");
    if (is_norm_scale) {
      p->value.fill(1.0);
    } else if (!is_bias) {
      for (double& v : p->value.data) v = 0.02 * rng.normal();
    }
  }
}

DecoderModel::DecoderModel(const DecoderModel& other) = default;
DecoderModel& DecoderModel::operator=(const DecoderModel& other) = default;

std::vector<Parameter*> DecoderModel::parameters() {
  std::vector<Parameter*> out{&wte_, &wpe_};
  for (Block& b : blocks_) {
    for (Parameter* p : {&b.ln1_g, &b.ln1_b, &b.attn_w, &b.attn_b, &b.proj_w, &b.proj_b, &b.ln2_g, &b.ln2_b, &b.fc_w,
                         &b.fc_b, &b.out_w, &b.out_b}) {
      out.push_back(p);
    }
  }
  out.push_back(&lnf_g_);
  out.push_back(&lnf_b_);
  return out;
}

std::vector<const Parameter*> DecoderModel::parameters() const {
  auto ps = const_cast<DecoderModel*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

std::size_t DecoderModel::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter* p : parameters()) n += p->value.size();
  return n;
}

template <class Self, class Bind>
Var DecoderModel::forward_impl(Self& self, Tape& tape, Bind&& bind, std::span<const TokenId> ids, std::size_t n_seq,
                               std::size_t seq_len, bool last_only) {
  const ModelConfig& c = self.config_;
  if (seq_len == 0 || n_seq == 0) throw Error("forward: empty input");
  if (ids.size() != n_seq * seq_len) throw Error("forward: ids do not match batch shape");
  if (seq_len > c.context_length) {
    throw Error("forward: sequence length " + std::to_string(seq_len) + " exceeds context length " +
                std::to_string(c.context_length));
  }
  for (TokenId id : ids) {
    if (id >= c.vocab_size) throw Error("forward: token id " + std::to_string(id) + " >= vocab size");
  }
  std::vector<TokenId> positions(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) positions[i] = static_cast<TokenId>(i % seq_len);

  const Var wte = bind(self.wte_);
  Var x = ops::add(tape, ops::embedding_lookup(tape, wte, ids),
                   ops::embedding_lookup(tape, bind(self.wpe_), positions));
  for (auto& b : self.blocks_) {
    Var h = ops::layer_norm(tape, x, bind(b.ln1_g), bind(b.ln1_b));
    Var qkv = ops::add_broadcast(tape, ops::matmul(tape, h, bind(b.attn_w)), bind(b.attn_b));
    Var att = ops::causal_attention(tape, qkv, n_seq, seq_len, c.n_heads);
    x = ops::add(tape, x, ops::add_broadcast(tape, ops::matmul(tape, att, bind(b.proj_w)), bind(b.proj_b)));
    h = ops::layer_norm(tape, x, bind(b.ln2_g), bind(b.ln2_b));
    Var ff = ops::gelu(tape, ops::add_broadcast(tape, ops::matmul(tape, h, bind(b.fc_w)), bind(b.fc_b)));
    x = ops::add(tape, x, ops::add_broadcast(tape, ops::matmul(tape, ff, bind(b.out_w)), bind(b.out_b)));
  }
  if (last_only) {
    // Keep only the final row of each sequence before the vocabulary projection.
    const Matrix& full = tape.value(x);
    Matrix last(n_seq, full.cols);
    for (std::size_t s = 0; s < n_seq; ++s) {
      auto src = full.row(s * seq_len + seq_len - 1);
      std::copy(src.begin(), src.end(), last.row(s).begin());
    }
    x = tape.constant(std::move(last));
  }
  Var hf = ops::layer_norm(tape, x, bind(self.lnf_g_), bind(self.lnf_b_));
  return ops::matmul(tape, hf, wte, /*transpose_b=*/true);
}

Var DecoderModel::forward(Tape& tape, std::span<const TokenId> ids, std::size_t n_seq, std::size_t seq_len) {
  return forward_impl(*this, tape, [&](Parameter& p) { return tape.param(p); }, ids, n_seq, seq_len, false);
}

Matrix DecoderModel::logits(std::span<const TokenId> ids) const {
  Tape tape(false);
  Var out = forward_impl(*this, tape, [&](const Parameter& p) { return tape.view(p.value); }, ids, 1, ids.size(), false);
  return tape.value(out);
}

Matrix DecoderModel::last_logits(std::span<const TokenId> ids, std::size_t n_seq, std::size_t seq_len) const {
  Tape tape(false);
  Var out = forward_impl(*this, tape, [&](const Parameter& p) { return tape.view(p.value); }, ids, n_seq, seq_len, true);
  return tape.value(out);
}

namespace {

struct ShiftedBatch {
  std::size_t n_seq = 0;
  std::size_t len = 0;
  std::vector<TokenId> inputs;
  std::vector<TokenId> targets;
  std::vector<std::uint8_t> mask;
};

ShiftedBatch shift_batch(std::span<const PackedSequence* const> batch, std::size_t context_length) {
  if (batch.empty()) throw Error("batch_loss: empty batch");
  std::size_t content = 0;
  for (const PackedSequence* s : batch) {
    if (s->length() > context_length) throw Error("batch_loss: sequence longer than the model context");
    content = std::max(content, s->content_length());
  }
  if (content < 2) throw Error("batch_loss: no supervised position");
  ShiftedBatch b;
  b.n_seq = batch.size();
  b.len = content - 1;
  for (const PackedSequence* s : batch) {
    for (std::size_t p = 0; p < b.len; ++p) {
      b.inputs.push_back(s->input_ids[p]);
      b.targets.push_back(s->target_ids[p + 1]);
      b.mask.push_back(s->loss_mask[p + 1]);
    }
  }
  return b;
}

}  // namespace

Var batch_loss(Tape& tape, DecoderModel& model, std::span<const PackedSequence* const> batch) {
  const ShiftedBatch b = shift_batch(batch, model.config().context_length);
  Var logits = model.forward(tape, b.inputs, b.n_seq, b.len);
  return ops::masked_cross_entropy(tape, logits, b.targets, b.mask);
}

double sequence_loss(const DecoderModel& model, const PackedSequence& sequence) {
  const PackedSequence* one[] = {&sequence};
  const ShiftedBatch b = shift_batch(one, model.config().context_length);
  Tape tape(false);
  Var logits = tape.constant(model.logits(b.inputs));
  return tape.value(ops::masked_cross_entropy(tape, logits, b.targets, b.mask)).data[0];
}

double ColumnDistribution::probability(std::string_view value) const {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] == value) return probs[i];
  }
  return 0.0;
}

std::size_t ColumnDistribution::argmax() const {
  return static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

ColumnDistribution restrict_to_column(std::span<const double> logits, std::string_view column,
                                      const Vocabulary& vocab, double temperature) {
  const auto& ids = vocab.column_ids(column);
  if (ids.empty()) throw Error("predict_column: column '" + std::string(column) + "' has no vocabulary entries");
  ColumnDistribution d;
  d.column = std::string(column);
  d.ids = ids;
  d.probs.resize(ids.size());
  const double inv_t = temperature > 0.0 ? 1.0 / temperature : 1.0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    d.values.push_back(vocab.entry(ids[i]).value);
    d.probs[i] = logits[ids[i]] * inv_t;
  }
  kernels::softmax_inplace(d.probs);
  return d;
}

ColumnDistribution predict_column(const DecoderModel& model, std::span<const TokenId> prefix, std::string_view column,
                                  const Vocabulary& vocab) {
  if (prefix.empty()) throw Error("predict_column: empty prefix");
  const Matrix last = model.last_logits(prefix, 1, prefix.size());
  return restrict_to_column(last.row(0), column, vocab);
}

std::vector<TokenId> sample_event(const DecoderModel& model, std::span<const TokenId> prefix,
                                  std::span<const std::string> column_order, const Vocabulary& vocab, Rng& rng,
                                  double temperature) {
  if (prefix.empty()) throw Error("sample_event: empty prefix");
  if (prefix.size() + column_order.size() + 1 > model.config().context_length) {
    throw Error("sample_event: prefix plus event exceeds the context length");
  }
  std::vector<TokenId> context(prefix.begin(), prefix.end());
  std::vector<TokenId> event;
  for (const std::string& column : column_order) {
    const Matrix last = model.last_logits(context, 1, context.size());
    const ColumnDistribution d = restrict_to_column(last.row(0), column, vocab, temperature);
    std::size_t pick = d.argmax();
    if (temperature > 0.0) {
      const double u = rng.uniform();
      double acc = 0.0;
      pick = d.probs.size() - 1;
      for (std::size_t i = 0; i < d.probs.size(); ++i) {
        acc += d.probs[i];
        if (u < acc) {
          pick = i;
          break;
        }
      }
    }
    context.push_back(d.ids[pick]);
    event.push_back(d.ids[pick]);
  }
  event.push_back(kRow);
  return event;
}

}  // namespace step
