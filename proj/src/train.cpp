#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "step/binary_io.hpp"
#include "step/error.hpp"
#include "step/hash.hpp"
#include "step/train.hpp"

namespace step {

void TrainConfig::validate() const {
  if (epochs < 1) throw Error("train config: epochs must be >= 1");
  if (batch_size < 1) throw Error("train config: batch_size must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw Error("train config: bad learning rate");
  if (clip_norm < 0.0) throw Error("train config: clip_norm must be >= 0");
}

namespace {
std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}
}  // namespace

TrainConfig parse_train_config(std::string_view text) {
  TrainConfig c;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("train config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    try {
      if (key == "epochs") c.epochs = std::stoull(val);
      else if (key == "batch_size") c.batch_size = std::stoull(val);
      else if (key == "learning_rate" || key == "lr") c.learning_rate = std::stod(val);
      else if (key == "seed") c.seed = std::stoull(val);
      else if (key == "checkpoint_interval") c.checkpoint_interval = std::stoull(val);
      else if (key == "clip_norm") c.clip_norm = std::stod(val);
      else throw Error("train config: unknown key '" + key + "'");
    } catch (const std::logic_error&) {
      throw Error("train config: bad value for '" + key + "'");
    }
  }
  c.validate();
  return c;
}

std::string format_train_config(const TrainConfig& c) {
  std::ostringstream out;
  out.precision(17);
  out << "epochs = " << c.epochs << '\n'
      << "batch_size = " << c.batch_size << '\n'
      << "learning_rate = " << c.learning_rate << '\n'
      << "seed = " << c.seed << '\n'
      << "checkpoint_interval = " << c.checkpoint_interval << '\n'
      << "clip_norm = " << c.clip_norm << '\n';
  return out.str();
}

void write_train_log(const std::filesystem::path& path, const TrainLog& log) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(10);
  for (const StepRecord& r : log.steps) out << "step=" << r.step << " epoch=" << r.epoch << " loss=" << r.loss << '\n';
}

std::string train_summary_json(const TrainLog& log, const TrainConfig& config) {
  nlohmann::ordered_json j;
  j["format"] = "steptrain-summary v1";
  j["config"] = {{"epochs", config.epochs},
                 {"batch_size", config.batch_size},
                 {"learning_rate", config.learning_rate},
                 {"seed", config.seed},
                 {"clip_norm", config.clip_norm}};
  j["steps"] = log.steps.empty() ? 0 : log.steps.back().step;
  j["epochs_completed"] = log.epoch_mean_loss.size();
  j["final_loss"] = log.steps.empty() ? 0.0 : log.steps.back().loss;
  j["epoch_mean_loss"] = log.epoch_mean_loss;
  auto aucs = nlohmann::ordered_json::array();
  for (const auto& [epoch, value] : log.epoch_auc) aucs.push_back({{"epoch", epoch}, {"auc", value}});
  j["epoch_auc"] = aucs;
  return j.dump(2) + "\n";
}

void write_train_summary(const std::filesystem::path& path, const TrainLog& log, const TrainConfig& config) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << train_summary_json(log, config);
}

Trainer::Trainer(DecoderModel model, const PackedDataset& data, std::uint64_t vocab_hash, TrainConfig config)
    : model_(std::move(model)), data_(&data), vocab_hash_(vocab_hash), config_(config) {
  config_.validate();
  if (data.header.vocab_hash != vocab_hash) {
    throw Error("train: vocab hash mismatch: dataset " + hex64(data.header.vocab_hash) + " vs vocabulary " +
                hex64(vocab_hash));
  }
  if (model_.config().context_length < data.header.context_length) {
    throw Error("train: model context length is shorter than the dataset's");
  }
  auto params = model_.parameters();
  adam_ = AdamState::for_parameters(params, config_.learning_rate);
}

std::vector<PackedSequence> Trainer::epoch_sequences(std::size_t epoch) const {
  const auto& h = data_->header;
  const bool stochastic = h.order == OrderKind::random || h.mask.kind == MaskKind::partial;
  if (epoch == 0 || !stochastic) return data_->records;
  OrderPolicy order{h.order, {}};
  std::vector<PackedSequence> out;
  out.reserve(data_->records.size());
  for (std::size_t i = 0; i < data_->records.size(); ++i) {
    Rng order_rng(derive_seed(config_.seed, {0x6570, epoch, i, 1}));
    Rng mask_rng(derive_seed(config_.seed, {0x6570, epoch, i, 2}));
    out.push_back(reaugment(data_->records[i], order, h.mask, order_rng, mask_rng));
  }
  return out;
}

void Trainer::run_epoch() {
  const std::size_t epoch = epochs_done_;
  const auto sequences = epoch_sequences(epoch);
  std::vector<std::size_t> order(sequences.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(config_.seed, {0x7368, epoch}));
  rng.shuffle(std::span<std::size_t>(order));

  auto params = model_.parameters();
  const auto start = std::chrono::steady_clock::now();
  double loss_sum = 0.0;
  std::size_t batches = 0;
  std::vector<const PackedSequence*> batch;
  for (std::size_t b = 0; b < order.size(); b += config_.batch_size) {
    batch.clear();
    for (std::size_t i = b; i < std::min(order.size(), b + config_.batch_size); ++i) batch.push_back(&sequences[order[i]]);
    if (observer_) observer_(batch);
    Tape tape;
    Var loss = batch_loss(tape, model_, batch);
    const double value = tape.value(loss).data[0];
    if (!std::isfinite(value)) {
      throw Error("train: non-finite loss at step " + std::to_string(adam_.step + 1));
    }
    tape.backward(loss);
    if (config_.clip_norm > 0.0) clip_grad_norm(params, config_.clip_norm);
    adam_step(params, adam_);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log_.steps.push_back({adam_.step, epoch, value, secs});
    loss_sum += value;
    ++batches;
  }
  log_.epoch_mean_loss.push_back(batches ? loss_sum / static_cast<double>(batches) : 0.0);
  ++epochs_done_;
  if (evaluator_) log_.epoch_auc.emplace_back(epoch, evaluator_(model_));
  if (!checkpoint_path_.empty() && config_.checkpoint_interval > 0 && epochs_done_ % config_.checkpoint_interval == 0) {
    save_checkpoint(checkpoint_path_);
  }
}

void Trainer::run(std::size_t stop_after_epoch) {
  const std::size_t target = std::min(config_.epochs, stop_after_epoch);
  while (epochs_done_ < target) run_epoch();
}

namespace {
constexpr char kCkptMagic[8] = {'S', 'T', 'E', 'P', 'C', 'K', '1', '\0'};
constexpr std::uint32_t kCkptVersion = 1;
}  // namespace

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint " + path.string());
    BinaryWriter w(out);
    w.put_bytes(std::string_view(kCkptMagic, sizeof(kCkptMagic)));
    w.put<std::uint32_t>(kCkptVersion);
    w.put_string(format_config(model_.config()));
    w.put<std::uint64_t>(vocab_hash_);
    w.put<std::uint64_t>(config_.seed);
    w.put<std::uint64_t>(epochs_done_);
    w.check(path.string());
    auto params = const_cast<DecoderModel&>(model_).parameters();
    write_parameters(out, params);
    write_adam(out, adam_);
    if (!out) throw Error("write failed: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointContents read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("missing checkpoint " + path.string());
  BinaryReader r(in, path.string());
  if (r.get_bytes(sizeof(kCkptMagic)) != std::string_view(kCkptMagic, sizeof(kCkptMagic))) {
    throw Error(path.string() + ": not a checkpoint (bad magic)");
  }
  if (r.get<std::uint32_t>() != kCkptVersion) throw Error(path.string() + ": checkpoint version mismatch");
  const ModelConfig mc = parse_config(r.get_string());
  CheckpointContents c{DecoderModel(mc), 0, 0, 0, {}};
  c.vocab_hash = r.get<std::uint64_t>();
  c.seed = r.get<std::uint64_t>();
  c.epochs_done = r.get<std::uint64_t>();
  auto params = c.model.parameters();
  read_parameters(in, params);
  c.adam = read_adam(in, params);
  return c;
}

Trainer Trainer::resume(const std::filesystem::path& path, const PackedDataset& data, std::uint64_t vocab_hash,
                        TrainConfig config) {
  CheckpointContents c = read_checkpoint(path);
  if (c.vocab_hash != vocab_hash) {
    throw Error("resume: vocab hash mismatch: checkpoint " + hex64(c.vocab_hash) + " vs vocabulary " + hex64(vocab_hash));
  }
  if (c.seed != config.seed) throw Error("resume: checkpoint was trained with a different seed");
  Trainer t(std::move(c.model), data, vocab_hash, config);
  t.adam_ = std::move(c.adam);
  t.adam_.learning_rate = config.learning_rate;
  t.epochs_done_ = c.epochs_done;
  return t;
}

void write_model_manifest(const std::filesystem::path& path, const ModelConfig& config, std::uint64_t vocab_hash) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << format_config(config) << "vocab_hash=" << hex64(vocab_hash) << '\n';
}

}  // namespace step
