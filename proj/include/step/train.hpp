#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "step/model.hpp"
#include "step/optim.hpp"
#include "step/packing.hpp"

namespace step {

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  double learning_rate = 1e-5;
  std::uint64_t seed = 0;
  std::size_t checkpoint_interval = 0;  // epochs between checkpoints; 0 disables
  double clip_norm = 0.0;               // global gradient-norm clip; 0 disables

  void validate() const;
};

// `key = value` lines; unknown keys are rejected.
TrainConfig parse_train_config(std::string_view text);
std::string format_train_config(const TrainConfig& config);

struct StepRecord {
  std::int64_t step = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
  double wall_seconds = 0.0;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<double> epoch_mean_loss;
  std::vector<std::pair<std::size_t, double>> epoch_auc;  // (epoch, AUC) when an evaluator is set
};

// Line-delimited `step=<n> epoch=<n> loss=<float>` records.
void write_train_log(const std::filesystem::path& path, const TrainLog& log);

// JSON summary: config, step count, final loss, per-epoch mean loss and AUC.
std::string train_summary_json(const TrainLog& log, const TrainConfig& config);
void write_train_summary(const std::filesystem::path& path, const TrainLog& log, const TrainConfig& config);

// Deterministic mini-batch Adam training on a packed dataset.
//
// Epoch e visits the sequences in an order drawn from stream (seed, e). When
// the dataset's order policy is random or its mask policy is partial, epochs
// after the first re-draw every sequence's column order and label masks from
// streams (seed, e, sequence index); epoch 0 uses the sequences as packed.
class Trainer {
 public:
  using BatchObserver = std::function<void(std::span<const PackedSequence* const>)>;
  using Evaluator = std::function<double(const DecoderModel&)>;

  Trainer(DecoderModel model, const PackedDataset& data, std::uint64_t vocab_hash, TrainConfig config);

  // Runs until config.epochs are done, or until `stop_after_epoch` epochs are done if smaller.
  void run(std::size_t stop_after_epoch = std::numeric_limits<std::size_t>::max());
  void run_epoch();

  std::size_t epochs_done() const { return epochs_done_; }
  const DecoderModel& model() const { return model_; }
  DecoderModel& model() { return model_; }
  const TrainLog& log() const { return log_; }
  const AdamState& optimizer() const { return adam_; }
  const TrainConfig& config() const { return config_; }

  void set_batch_observer(BatchObserver observer) { observer_ = std::move(observer); }
  void set_evaluator(Evaluator evaluator) { evaluator_ = std::move(evaluator); }
  // Called with the epoch count after each interval when checkpointing is enabled.
  void set_checkpoint_path(std::filesystem::path path) { checkpoint_path_ = std::move(path); }

  void save_checkpoint(const std::filesystem::path& path) const;
  // Restores model, optimizer and progress. The dataset must carry the same
  // vocabulary hash the checkpoint was trained against.
  static Trainer resume(const std::filesystem::path& path, const PackedDataset& data, std::uint64_t vocab_hash,
                        TrainConfig config);

 private:
  std::vector<PackedSequence> epoch_sequences(std::size_t epoch) const;

  DecoderModel model_;
  const PackedDataset* data_;
  std::uint64_t vocab_hash_;
  TrainConfig config_;
  AdamState adam_;
  std::size_t epochs_done_ = 0;
  TrainLog log_;
  BatchObserver observer_;
  Evaluator evaluator_;
  std::filesystem::path checkpoint_path_;
};

struct CheckpointContents {
  DecoderModel model;
  std::uint64_t vocab_hash = 0;
  std::uint64_t seed = 0;
  std::size_t epochs_done = 0;
  AdamState adam;
};

// Reads a full checkpoint (model + optimizer + progress).
CheckpointContents read_checkpoint(const std::filesystem::path& path);

// Sidecar text manifest: model config plus vocab hash.
void write_model_manifest(const std::filesystem::path& path, const ModelConfig& config, std::uint64_t vocab_hash);

}  // namespace step
