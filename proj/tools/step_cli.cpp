#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "step/error.hpp"
#include "step/eval.hpp"
#include "step/hash.hpp"
#include "step/run_manifest.hpp"
#include "step/synth.hpp"
#include "step/train.hpp"

namespace fs = std::filesystem;
using namespace step;

namespace {

// Artifact names inside a run directory.
constexpr const char* kData = "data.csv";
constexpr const char* kSchema = "schema.txt";
constexpr const char* kTruth = "truth.csv";
constexpr const char* kGenConfig = "gen.cfg";
constexpr const char* kTrainTable = "train.csv";
constexpr const char* kTestTable = "test.csv";
constexpr const char* kTestRows = "test_rows.csv";
constexpr const char* kPreManifest = "preprocess.manifest";
constexpr const char* kVocab = "vocab.txt";
constexpr const char* kPacked = "train.pack";
constexpr const char* kCheckpoint = "model.ckpt";
constexpr const char* kModelManifest = "model.manifest";
constexpr const char* kTrainLog = "train.log";
constexpr const char* kTrainSummary = "train_summary.json";
constexpr const char* kEvalReport = "eval_report.txt";
constexpr const char* kSweepReport = "sweep_report.txt";
constexpr const char* kSweepGrid = "sweep_grid.csv";
constexpr const char* kSamples = "samples.csv";

struct Common {
  std::string out = "run";
  std::uint64_t seed = 0;
  bool force = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--out", c.out, "Run directory")->capture_default_str();
  cmd->add_option("--seed", c.seed, "Seed for this stage")->capture_default_str();
  cmd->add_flag("--force", c.force, "Re-run even when outputs are up to date");
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("missing " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  out << text;
}

// Returns true (after printing a notice) when the stage can be skipped.
bool skip_stage(const RunManifest& m, const std::string& stage, const std::string& key,
                const std::vector<std::string>& outputs, bool force) {
  if (force || !m.up_to_date(stage, key, outputs)) return false;
  std::cout << "notice: " << stage << " is up to date; use --force to re-run\n";
  return true;
}

void finish_stage(RunManifest& m, const std::string& stage, const std::string& key,
                  const std::vector<std::string>& outputs) {
  for (const auto& f : outputs) m.record(f);
  m.set_stage(stage, key);
  m.save();
}

std::string key_of(const std::string& text) { return hex64(fnv1a(text)); }

// ---- gen-synth -------------------------------------------------------------

struct GenArgs {
  Common c;
  std::string config_file;
  std::size_t users = 0, events = 0, categories = 0;
  double noise = -1.0;
};

void run_gen(const GenArgs& a) {
  GenConfig g = a.config_file.empty() ? GenConfig{} : parse_gen_config(slurp(a.config_file));
  if (a.users) g.n_users = a.users;
  if (a.events) g.events_per_user = a.events;
  if (a.categories) g.n_categories = a.categories;
  if (a.noise >= 0.0) g.label_noise = a.noise;
  g.seed = a.c.seed;
  g.validate();
  fs::create_directories(a.c.out);
  RunManifest m = RunManifest::load(a.c.out);
  const std::string key = key_of(format_gen_config(g));
  const std::vector<std::string> outputs = {kData, kSchema, kTruth, kGenConfig};
  if (skip_stage(m, "gen-synth", key, outputs, a.c.force)) return;
  const RawTable table = generate(g);
  write_table(m.path(kData), table);
  save_schema(m.path(kSchema), table.schema);
  write_truth(m.path(kTruth), table, g);
  write_text(m.path(kGenConfig), format_gen_config(g));
  finish_stage(m, "gen-synth", key, outputs);
  std::cout << "generated " << table.rows.size() << " events for " << g.n_users << " users\n";
}

// ---- preprocess ------------------------------------------------------------

struct PreArgs {
  Common c;
  std::string schema, data;
  std::size_t bins = 32, seq_len = 10;
  double test_fraction = 0.02;
};

void run_preprocess(const PreArgs& a) {
  RunManifest m = RunManifest::load(a.c.out);
  const fs::path schema_path = a.schema.empty() ? m.path(kSchema) : fs::path(a.schema);
  const fs::path data_path = a.data.empty() ? m.path(kData) : fs::path(a.data);
  if (!fs::exists(schema_path)) throw Error("missing schema " + schema_path.string());
  if (!fs::exists(data_path)) throw Error("missing data " + data_path.string());
  if (a.data.empty()) m.verify(kData, "data");
  const Schema schema = load_schema(schema_path);
  std::ostringstream k;
  k << hex64(hash_file(data_path)) << ' ' << hex64(hash_file(schema_path)) << ' ' << a.bins << ' ' << a.seq_len << ' '
    << a.test_fraction << ' ' << a.c.seed;
  const std::string key = key_of(k.str());
  const std::vector<std::string> outputs = {kSchema, kTrainTable, kTestTable, kTestRows, kPreManifest};
  if (skip_stage(m, "preprocess", key, outputs, a.c.force)) return;

  const RawTable table = load_table(data_path, schema);
  const PreparedData prepared = prepare(table, a.bins, a.seq_len, a.test_fraction, a.c.seed);
  fs::create_directories(a.c.out);
  save_schema(m.path(kSchema), schema);
  write_table(m.path(kTrainTable), groups_to_table(schema, prepared.split.train_groups));
  write_table(m.path(kTestTable), groups_to_table(schema, prepared.split.test_groups));
  {
    std::ofstream rows(m.path(kTestRows));
    rows << "source_row\n";
    for (const auto& g : prepared.split.test_groups) {
      for (const auto& e : g.events) rows << e.source_row << '\n';
    }
  }
  save_manifest(m.path(kPreManifest), prepared.manifest);
  finish_stage(m, "preprocess", key, outputs);
  std::cout << "train users " << prepared.split.train_groups.size() << ", test users "
            << prepared.split.test_groups.size() << '\n';
}

// ---- fit-tokenizer -----------------------------------------------------------

void run_fit_tokenizer(const Common& c, std::size_t max_size) {
  RunManifest m = RunManifest::load(c.out);
  const auto schema_hash = m.verify(kSchema, "schema");
  const auto train_hash = m.verify(kTrainTable, "preprocessed training table");
  const std::string key = key_of(hex64(schema_hash) + hex64(train_hash) + std::to_string(max_size));
  const std::vector<std::string> outputs = {kVocab};
  if (skip_stage(m, "fit-tokenizer", key, outputs, c.force)) return;
  const Schema schema = load_schema(m.path(kSchema));
  const RawTable train = load_table(m.path(kTrainTable), schema);
  const Vocabulary vocab = Vocabulary::fit(group_contiguous(train), schema, max_size);
  vocab.save(m.path(kVocab));
  finish_stage(m, "fit-tokenizer", key, outputs);
  std::cout << "vocabulary size " << vocab.size() << '\n';
}

// ---- pack ----------------------------------------------------------------

struct PackArgs {
  Common c;
  std::string order = "fixed", mask = "none";
  std::size_t seq_len = 0;
  double p_all = 0.25, p_half = 0.25;
};

void run_pack(const PackArgs& a) {
  RunManifest m = RunManifest::load(a.c.out);
  const auto schema_hash = m.verify(kSchema, "schema");
  const auto train_hash = m.verify(kTrainTable, "preprocessed training table");
  const auto vocab_hash = m.verify(kVocab, "vocabulary");
  m.verify(kPreManifest, "preprocess manifest");
  const PreprocessManifest pre = load_manifest(m.path(kPreManifest));
  PackOptions o;
  o.events_per_sequence = a.seq_len ? a.seq_len : pre.events_per_sequence;
  o.order.kind = parse_order(a.order);
  if (o.order.kind == OrderKind::explicit_order) throw Error("pack: --order must be fixed or random");
  const MaskKind mk = parse_mask(a.mask);
  o.mask = mk == MaskKind::none ? MaskPolicy::none()
           : mk == MaskKind::all_labels ? MaskPolicy::all()
                                        : MaskPolicy::partial(a.p_all, a.p_half);
  std::ostringstream k;
  k << hex64(schema_hash) << hex64(train_hash) << hex64(vocab_hash) << ' ' << o.events_per_sequence << ' ' << a.order
    << ' ' << a.mask << ' ' << a.p_all << ' ' << a.p_half << ' ' << a.c.seed;
  const std::string key = key_of(k.str());
  const std::vector<std::string> outputs = {kPacked};
  if (skip_stage(m, "pack", key, outputs, a.c.force)) return;
  const Schema schema = load_schema(m.path(kSchema));
  const Vocabulary vocab = Vocabulary::load(m.path(kVocab));
  const RawTable train = load_table(m.path(kTrainTable), schema);
  const PackedDataset ds = pack_groups(group_contiguous(train), vocab, schema, o, a.c.seed);
  write_packed(m.path(kPacked), ds);
  finish_stage(m, "pack", key, outputs);
  std::cout << "packed " << ds.records.size() << " sequences of length " << ds.header.context_length << '\n';
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
  Common c;
  std::string config_file;
  std::size_t epochs = 0, batch_size = 0, d_model = 0, d_ff = 0, layers = 0, heads = 0, checkpoint_interval = 0;
  double lr = -1.0;
  bool resume = false;
};

void run_train(const TrainArgs& a) {
  RunManifest m = RunManifest::load(a.c.out);
  const auto vocab_file_hash = m.verify(kVocab, "vocabulary");
  const auto packed_hash = m.verify(kPacked, "packed dataset");
  TrainConfig tc;
  ModelConfig mc;
  if (!a.config_file.empty()) {
    // One file may hold both model and optimizer keys.
    std::istringstream in(slurp(a.config_file));
    std::string line, train_text, model_text;
    while (std::getline(in, line)) {
      const auto key = line.substr(0, line.find('='));
      const bool is_model = key.find("d_model") != std::string::npos || key.find("d_ff") != std::string::npos ||
                            key.find("n_layers") != std::string::npos || key.find("n_heads") != std::string::npos;
      (is_model ? model_text : train_text) += line + '\n';
    }
    tc = parse_train_config(train_text);
    if (!model_text.empty()) {
      std::istringstream ms(model_text);
      while (std::getline(ms, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        key.erase(key.find_last_not_of(" \t") + 1);
        const std::size_t v = std::stoull(val);
        if (key == "d_model") mc.d_model = v;
        else if (key == "d_ff") mc.d_ff = v;
        else if (key == "n_layers") mc.n_layers = v;
        else if (key == "n_heads") mc.n_heads = v;
      }
    }
  }
  if (a.epochs) tc.epochs = a.epochs;
  if (a.batch_size) tc.batch_size = a.batch_size;
  if (a.lr >= 0.0) tc.learning_rate = a.lr;
  if (a.checkpoint_interval) tc.checkpoint_interval = a.checkpoint_interval;
  if (a.d_model) mc.d_model = a.d_model;
  if (a.d_ff) mc.d_ff = a.d_ff;
  if (a.layers) mc.n_layers = a.layers;
  if (a.heads) mc.n_heads = a.heads;
  tc.seed = a.c.seed;
  tc.validate();

  const Vocabulary vocab = Vocabulary::load(m.path(kVocab));
  const PackedDataset ds = read_packed(m.path(kPacked), vocab);
  mc.vocab_size = vocab.size();
  mc.context_length = ds.header.context_length;
  mc.seed = a.c.seed;
  mc.validate();

  const std::string key =
      key_of(format_train_config(tc) + format_config(mc) + hex64(vocab_file_hash) + hex64(packed_hash));
  const std::vector<std::string> outputs = {kCheckpoint, kModelManifest, kTrainLog, kTrainSummary};
  if (!a.resume && skip_stage(m, "train", key, outputs, a.c.force)) return;

  Trainer trainer = a.resume && fs::exists(m.path(kCheckpoint))
                        ? Trainer::resume(m.path(kCheckpoint), ds, vocab.hash(), tc)
                        : Trainer(DecoderModel(mc), ds, vocab.hash(), tc);
  trainer.set_checkpoint_path(m.path(kCheckpoint));
  const std::size_t first_epoch = trainer.epochs_done();
  while (trainer.epochs_done() < tc.epochs) {
    trainer.run_epoch();
    std::cout << "epoch " << trainer.epochs_done() << " mean loss " << trainer.log().epoch_mean_loss.back() << '\n';
  }
  trainer.save_checkpoint(m.path(kCheckpoint));
  write_model_manifest(m.path(kModelManifest), trainer.model().config(), vocab.hash());
  // A resumed run appends to the existing log.
  {
    std::ofstream log(m.path(kTrainLog), first_epoch > 0 ? std::ios::app : std::ios::trunc);
    log.precision(10);
    for (const auto& r : trainer.log().steps) log << "step=" << r.step << " epoch=" << r.epoch << " loss=" << r.loss << '\n';
  }
  write_train_summary(m.path(kTrainSummary), trainer.log(), tc);
  finish_stage(m, "train", key, outputs);
}

// ---- eval / sweep ------------------------------------------------------------

struct EvalArgs {
  Common c;
  std::size_t seeds = 5;
  std::string mask;
  std::string truth;
  std::size_t seq_len = 0;
};

struct EvalInputs {
  Schema schema;
  Vocabulary vocab;
  DecoderModel model;
  PackedHeader header;
  std::vector<EventChunk> windows;
  std::size_t seq_len = 0;
  std::string key;
};

EvalInputs load_eval_inputs(RunManifest& m, const EvalArgs& a) {
  if (!fs::exists(m.path(kCheckpoint))) throw Error("missing checkpoint");
  const auto ckpt_hash = m.verify(kCheckpoint, "checkpoint");
  const auto vocab_hash = m.verify(kVocab, "vocabulary");
  const auto test_hash = m.verify(kTestTable, "preprocessed test table");
  m.verify(kPacked, "packed dataset");
  CheckpointContents ck = read_checkpoint(m.path(kCheckpoint));
  Vocabulary vocab = Vocabulary::load(m.path(kVocab));
  if (ck.vocab_hash != vocab.hash()) throw Error("vocab hash mismatch between checkpoint and vocabulary");
  const PackedDataset packed = read_packed(m.path(kPacked), vocab);
  const PreprocessManifest pre = load_manifest(m.path(kPreManifest));
  const Schema schema = load_schema(m.path(kSchema));
  const RawTable test = load_table(m.path(kTestTable), schema);
  const std::size_t l = a.seq_len ? a.seq_len : pre.events_per_sequence;

  std::vector<std::size_t> source_rows;
  {
    std::istringstream rows(slurp(m.path(kTestRows)));
    std::string line;
    std::getline(rows, line);
    while (std::getline(rows, line)) source_rows.push_back(std::stoull(line));
  }
  std::vector<EventChunk> windows;
  for (auto g : group_contiguous(test)) {
    for (auto& e : g.events) e.source_row = source_rows.at(e.source_row);
    for (auto& w : sliding_windows(g, l)) windows.push_back(std::move(w));
  }
  std::string truth_key;
  if (!a.truth.empty()) {
    std::istringstream in(slurp(a.truth));
    std::string line;
    std::getline(in, line);
    std::vector<int> clean;
    while (std::getline(in, line)) {
      const auto parts = split_delimited(line, ',');
      if (parts.size() < 2) throw Error("truth file: malformed line");
      clean.push_back(std::stoi(parts[1]));
    }
    windows = balanced_slice(windows, clean, a.c.seed);
    truth_key = hex64(hash_file(a.truth));
  }
  EvalInputs in{schema, std::move(vocab), std::move(ck.model), packed.header, std::move(windows), l, {}};
  in.key = key_of(hex64(ckpt_hash) + hex64(vocab_hash) + hex64(test_hash) + truth_key + std::to_string(a.seeds) +
                  a.mask + std::to_string(l) + std::to_string(a.c.seed));
  return in;
}

EvalOptions eval_options(const EvalArgs& a, const EvalInputs& in) {
  EvalOptions o;
  o.dataset = a.truth.empty() ? "test" : "test-balanced";
  o.order = in.header.order;
  o.history_mask = in.header.mask;
  if (!a.mask.empty()) {
    if (a.mask == "half") o.history_mask = MaskPolicy::partial(0.0, 1.0);
    else {
      const MaskKind k = parse_mask(a.mask);
      o.history_mask = k == MaskKind::none ? MaskPolicy::none() : k == MaskKind::all_labels ? MaskPolicy::all() : in.header.mask;
    }
  }
  o.seeds.clear();
  for (std::size_t i = 0; i < a.seeds; ++i) o.seeds.push_back(a.c.seed + i);
  return o;
}

void run_eval(const EvalArgs& a, bool sweep) {
  RunManifest m = RunManifest::load(a.c.out);
  EvalInputs in = load_eval_inputs(m, a);
  const std::string stage = sweep ? "sweep" : "eval";
  const std::vector<std::string> outputs =
      sweep ? std::vector<std::string>{kSweepReport, kSweepGrid} : std::vector<std::string>{kEvalReport};
  if (skip_stage(m, stage, in.key, outputs, a.c.force)) return;
  const EvalOptions o = eval_options(a, in);
  if (sweep) {
    const EvalReport r = sweep_position_length(in.model, in.windows, in.vocab, in.schema, in.seq_len, o);
    save_report(m.path(kSweepReport), r);
    write_text(m.path(kSweepGrid), grid_csv(r));
    std::cout << grid_csv(r);
  } else {
    const EvalReport r = eval_last_label(in.model, in.windows, in.vocab, in.schema, o);
    save_report(m.path(kEvalReport), r);
    std::cout << "auc " << r.mean << " +- " << r.stddev << " over " << r.examples << " windows\n";
  }
  finish_stage(m, stage, in.key, outputs);
}

// ---- sample ----------------------------------------------------------------

void run_sample(const Common& c, std::size_t n_events, double temperature) {
  RunManifest m = RunManifest::load(c.out);
  if (!fs::exists(m.path(kCheckpoint))) throw Error("missing checkpoint");
  m.verify(kCheckpoint, "checkpoint");
  m.verify(kVocab, "vocabulary");
  CheckpointContents ck = read_checkpoint(m.path(kCheckpoint));
  const Vocabulary vocab = Vocabulary::load(m.path(kVocab));
  if (ck.vocab_hash != vocab.hash()) throw Error("vocab hash mismatch between checkpoint and vocabulary");
  const Schema schema = load_schema(m.path(kSchema));
  std::vector<std::string> order;
  for (std::size_t i : schema.feature_indices()) order.push_back(schema.columns[i].name);
  const std::size_t k = order.size();
  const std::size_t max_events = (ck.model.config().context_length - 1) / (k + 1);
  if (n_events < 1 || n_events > max_events) {
    throw Error("sample: --events must be in 1.." + std::to_string(max_events));
  }
  Rng rng(derive_seed(c.seed, {0x73616d70}));
  std::vector<TokenId> seq;
  std::ofstream out(m.path(kSamples));
  out << join_delimited(order, ',') << '\n';
  for (std::size_t e = 0; e < n_events; ++e) {
    const std::vector<TokenId> prefix = seq.empty() ? std::vector<TokenId>{kEos} : seq;
    auto ev = sample_event(ck.model, prefix, order, vocab, rng, temperature);
    std::vector<std::string> cells;
    for (std::size_t i = 0; i < k; ++i) cells.push_back(vocab.entry(ev[i]).value);
    out << join_delimited(cells, ',') << '\n';
    seq.insert(seq.end(), ev.begin(), ev.end());
  }
  std::cout << "wrote " << n_events << " sampled events\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"step: next-token transformer for sequential tabular events"};
  app.set_config("--config", "", "INI/TOML file; [subcommand] sections hold that stage's keys; flags win");
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-synth", "Generate the planted-rule synthetic dataset");
  add_common(gen_cmd, gen.c);
  gen_cmd->add_option("--gen-config", gen.config_file, "Generator key = value file");
  gen_cmd->add_option("--users", gen.users, "Number of users");
  gen_cmd->add_option("--events", gen.events, "Events per user");
  gen_cmd->add_option("--categories", gen.categories, "Number of categories");
  gen_cmd->add_option("--noise", gen.noise, "Label flip probability");

  PreArgs pre;
  auto* pre_cmd = app.add_subcommand("preprocess", "Group, sort, split and discretize a table");
  add_common(pre_cmd, pre.c);
  pre_cmd->add_option("--schema", pre.schema, "Schema file (default: <out>/schema.txt)");
  pre_cmd->add_option("--data", pre.data, "Delimited data file (default: <out>/data.csv)");
  pre_cmd->add_option("--bins", pre.bins, "Quantile bins per numeric column")->capture_default_str();
  pre_cmd->add_option("--seq-len", pre.seq_len, "Events per sequence")->capture_default_str();
  pre_cmd->add_option("--test-fraction", pre.test_fraction, "Fraction of users held out")->capture_default_str();

  Common tok;
  std::size_t max_vocab = 60000;
  auto* tok_cmd = app.add_subcommand("fit-tokenizer", "Fit the per-column vocabulary on the training table");
  add_common(tok_cmd, tok);
  tok_cmd->add_option("--max-vocab", max_vocab, "Vocabulary size budget")->capture_default_str();

  PackArgs pack;
  auto* pack_cmd = app.add_subcommand("pack", "Tokenize and pack training sequences");
  add_common(pack_cmd, pack.c);
  pack_cmd->add_option("--order", pack.order, "Column order policy")->check(CLI::IsMember({"fixed", "random"}))->capture_default_str();
  pack_cmd->add_option("--mask", pack.mask, "Label masking policy")->check(CLI::IsMember({"none", "all", "partial"}))->capture_default_str();
  pack_cmd->add_option("--seq-len", pack.seq_len, "Events per sequence (default: preprocess setting)");
  pack_cmd->add_option("--p-all", pack.p_all, "partial: whole-sequence mask probability")->capture_default_str();
  pack_cmd->add_option("--p-half", pack.p_half, "partial: per-label coin-flip probability")->capture_default_str();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train the model on the packed dataset");
  add_common(train_cmd, tr.c);
  train_cmd->add_option("--train-config", tr.config_file, "Train/model key = value file");
  train_cmd->add_option("--epochs", tr.epochs, "Epochs");
  train_cmd->add_option("--batch-size", tr.batch_size, "Sequences per step");
  train_cmd->add_option("--lr", tr.lr, "Adam learning rate");
  train_cmd->add_option("--d-model", tr.d_model, "Model width");
  train_cmd->add_option("--d-ff", tr.d_ff, "Feed-forward width");
  train_cmd->add_option("--layers", tr.layers, "Decoder blocks");
  train_cmd->add_option("--heads", tr.heads, "Attention heads");
  train_cmd->add_option("--checkpoint-interval", tr.checkpoint_interval, "Epochs between checkpoints");
  train_cmd->add_flag("--resume", tr.resume, "Continue from <out>/model.ckpt");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Last-label AUC on the held-out users");
  auto* sweep_cmd = app.add_subcommand("sweep", "AUC grid over history length and label position");
  for (auto* cmd : {eval_cmd, sweep_cmd}) {
    add_common(cmd, ev.c);
    cmd->add_option("--seeds", ev.seeds, "Number of evaluation seeds")->capture_default_str();
    cmd->add_option("--mask", ev.mask, "History label masking (default: training policy)")
        ->check(CLI::IsMember({"none", "half", "all", "partial"}));
    cmd->add_option("--truth", ev.truth, "Synthetic truth file; evaluates on a slice balanced by rule firing");
    cmd->add_option("--seq-len", ev.seq_len, "Window length (default: preprocess setting)");
  }

  Common smp;
  std::size_t sample_events = 5;
  double temperature = 1.0;
  auto* sample_cmd = app.add_subcommand("sample", "Generate events from the trained model");
  add_common(sample_cmd, smp);
  sample_cmd->add_option("--events", sample_events, "Events to generate")->capture_default_str();
  sample_cmd->add_option("--temperature", temperature, "Sampling temperature; <= 0 is argmax")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.get_exit_code() ? e.get_exit_code() : 2;
  }

  try {
    if (*gen_cmd) run_gen(gen);
    else if (*pre_cmd) run_preprocess(pre);
    else if (*tok_cmd) run_fit_tokenizer(tok, max_vocab);
    else if (*pack_cmd) run_pack(pack);
    else if (*train_cmd) run_train(tr);
    else if (*eval_cmd) run_eval(ev, false);
    else if (*sweep_cmd) run_eval(ev, true);
    else if (*sample_cmd) run_sample(smp, sample_events, temperature);
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (char& ch : msg) {
      if (ch == '\n') ch = ' ';
    }
    std::cerr << "error: " << msg << '\n';
    return 1;
  }
  return 0;
}
