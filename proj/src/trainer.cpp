#include "neuroalign/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>

#include <fmt/format.h>

#include "neuroalign/errors.hpp"
#include "neuroalign/evalsuite.hpp"
#include "neuroalign/rng.hpp"

namespace neuroalign {
namespace {

constexpr std::uint64_t kBatchStream = 0xB47C;
constexpr std::uint64_t kNoiseStream = 0x7015E;

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t purpose, int stage, int epoch, std::size_t modality) {
  std::uint64_t s = mix_seed(seed, purpose);
  s = mix_seed(s, static_cast<std::uint64_t>(stage));
  s = mix_seed(s, static_cast<std::uint64_t>(epoch));
  return mix_seed(s, modality);
}

// Endless reshuffled pass over one modality's training samples.
class BatchStream {
 public:
  BatchStream(std::vector<std::size_t> indices, std::uint64_t seed) : indices_(std::move(indices)), seed_(seed) {}

  std::vector<std::size_t> next(std::size_t batch) {
    batch = std::min(batch, indices_.size());
    std::vector<std::size_t> out;
    out.reserve(batch);
    while (out.size() < batch) {
      if (pos_ == order_.size()) refill();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void refill() {
    order_ = indices_;
    Rng rng(mix_seed(seed_, pass_++));
    std::shuffle(order_.begin(), order_.end(), rng);
    pos_ = 0;
  }

  std::vector<std::size_t> indices_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  std::uint64_t seed_;
  std::uint64_t pass_ = 0;
};

bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

// stage 0 is joint training.
void set_trainable(AlignmentModel& model, int stage, bool train_prior_jointly) {
  model.visit([&](const std::string& name, ad::Parameter& p) {
    const bool align = name.find(".align_head.") != std::string::npos;
    const bool encoder = starts_with(name, "encoder.");
    const bool projector = starts_with(name, "projector");
    const bool prior = starts_with(name, "prior");
    switch (stage) {
      case 0: p.frozen = align || (prior && !train_prior_jointly); break;
      case 1: p.frozen = !encoder; break;
      case 2: p.frozen = !projector; break;
      default: p.frozen = !prior; break;
    }
  });
}

void unfreeze_all(AlignmentModel& model) {
  model.visit([](const std::string&, ad::Parameter& p) { p.frozen = false; });
}

std::vector<std::string> active_modalities(const TrainingState& state, const PairedDataset& dataset) {
  std::vector<std::string> mods = state.config.modalities.empty() ? state.model.modalities() : state.config.modalities;
  if (mods.empty()) throw ConfigError("training needs at least one modality");
  for (const auto& m : mods) {
    if (!state.model.has_tower(m)) throw ConfigError(fmt::format("no encoder registered for modality '{}'", m));
    if (!dataset.has_modality(m)) throw ConfigError(fmt::format("dataset has no modality '{}'", m));
    if (dataset.sample_indices(m, Split::kTrain).empty()) {
      throw ConfigError(fmt::format("modality '{}' has no training samples", m));
    }
  }
  return mods;
}

nlohmann::json breakdown_json(const LossBreakdown& l) {
  return {{"total", l.total}, {"softclip", l.softclip}, {"mse", l.mse}, {"prior", l.prior}};
}

[[noreturn]] void abort_non_finite(const TrainingState& state, const std::filesystem::path& dir, int stage, int epoch,
                                   const std::string& modality, const std::vector<std::string>& stimuli,
                                   const LossBreakdown& loss) {
  std::filesystem::create_directories(dir);
  nlohmann::json j{{"stage", stage},     {"epoch", epoch},           {"modality", modality},
                   {"batch", stimuli},   {"loss", breakdown_json(loss)}, {"optimizer_steps", state.optimizer.steps()}};
  std::ofstream(dir / "nan_state.json") << j.dump(2) << "\n";
  ArrayFile params;
  state.model.save_parameters(params);
  params.save(dir / "nan_params.bin");
  throw NumericError(fmt::format("non-finite loss at stage {} epoch {} modality '{}'; diagnostic state in {}", stage,
                                 epoch + 1, modality, dir.string()));
}

BatchStats train_batch(TrainingState& state, const PairedDataset& dataset, int stage, const std::string& modality,
                       const std::vector<std::size_t>& idx, Rng& noise) {
  AlignmentModel& model = state.model;
  const LossConfig& lc = state.config.loss;
  std::vector<const NeuralSample*> batch;
  std::vector<std::string> stimuli;
  for (auto i : idx) {
    batch.push_back(&dataset.samples[i]);
    stimuli.push_back(dataset.samples[i].stimulus_id);
  }
  ad::Tape tape;
  ad::Var targets = tape.constant(dataset.embedding_matrix(stimuli));
  ad::Var total;
  LossBreakdown terms;
  // Non-finite activations surface as NumericError from normalization before
  // the loss exists; report them like a non-finite loss.
  try {
    switch (stage) {
      case 0:
      case 2: {
        ad::Var z = model.embed(tape, batch);
        std::optional<ad::Var> prior_term;
        LossConfig cfg = lc;
        if (stage == 2) cfg.beta = 0.0;
        if (cfg.beta > 0.0) prior_term = model.prior().loss(tape, z, targets, noise);
        CompoundLoss c = compound_loss(z, targets, prior_term, cfg);
        total = c.total;
        terms = c.terms;
        break;
      }
      case 1: {
        const EncoderTower& tower = model.tower(modality);
        ad::Var h = tower.align_head(tape, tower.forward_batch(tape, batch));
        total = softclip_loss(h, targets, lc.tau);
        terms.softclip = terms.total = total.item();
        break;
      }
      default: {
        ad::Var cond = tape.constant(model.embed(batch));
        total = model.prior().loss(tape, cond, targets, noise);
        terms.prior = terms.total = total.item();
        break;
      }
    }
  } catch (const NumericError&) {
    terms.total = std::numeric_limits<double>::quiet_NaN();
  }
  if (!std::isfinite(terms.total)) return {terms, idx.size()};
  tape.backward(total);
  NamedParameters params = model.parameters();
  for (auto& [name, p] : params) {
    if (!p->frozen) p->grad = tape.gradient(*p);
  }
  state.optimizer.step(params);
  return {terms, idx.size()};
}

void add_into(LossBreakdown& acc, const LossBreakdown& l, double w) {
  acc.total += w * l.total;
  acc.softclip += w * l.softclip;
  acc.mse += w * l.mse;
  acc.prior += w * l.prior;
}

nlohmann::json validation_metrics(const TrainingState& state, const PairedDataset& dataset, const std::string& modality) {
  if (dataset.stimuli(Split::kTest).size() < 2 || dataset.sample_indices(modality, Split::kTest).empty()) return nullptr;
  RetrievalOptions opt;
  opt.trials = state.config.val_trials;
  opt.seed = state.config.seed;
  const RetrievalReport r = evaluate_retrieval(state.model, dataset, {modality}, opt);
  const RetrievalRow& row = r.rows.front();
  nlohmann::json j{{"kmax", row.kmax}, {"kmax_top1", row.kmax_top1}, {"kmax_top5", row.kmax_top5}};
  if (row.way2) j["2-way"] = *row.way2;
  if (row.way10) j["10-way"] = *row.way10;
  return j;
}

TrainSummary run_epochs(TrainingState& state, const PairedDataset& dataset, int stage, const TrainHooks& hooks,
                        const std::filesystem::path& diagnostics) {
  const TrainConfig& cfg = state.config;
  const std::vector<std::string> mods = active_modalities(state, dataset);
  if (stage == 3 || (stage == 0 && cfg.loss.beta > 0.0)) {
    if (!state.model.has_prior()) throw ConfigError("this training stage needs a model with a diffusion prior");
  }
  set_trainable(state.model, stage, cfg.loss.beta > 0.0);
  const auto b = static_cast<std::size_t>(cfg.batch_size);

  std::vector<std::vector<std::size_t>> pools;
  int cycles = cfg.cycles_per_epoch;
  for (const auto& m : mods) {
    pools.push_back(dataset.sample_indices(m, Split::kTrain));
    if (cfg.cycles_per_epoch == 0) {
      cycles = std::max(cycles, static_cast<int>((pools.back().size() + b - 1) / b));
    }
  }

  TrainSummary summary;
  while (state.epoch < cfg.epochs) {
    std::vector<BatchStream> streams;
    std::vector<Rng> noise;
    for (std::size_t mi = 0; mi < mods.size(); ++mi) {
      streams.emplace_back(pools[mi], stream_seed(cfg.seed, kBatchStream, stage, state.epoch, mi));
      noise.emplace_back(stream_seed(cfg.seed, kNoiseStream, stage, state.epoch, mi));
    }
    std::vector<LossBreakdown> sums(mods.size());
    std::vector<std::size_t> seen(mods.size(), 0);
    std::vector<int> counts(mods.size(), 0);
    for (int c = 0; c < cycles; ++c) {
      for (std::size_t mi = 0; mi < mods.size(); ++mi) {
        const auto idx = streams[mi].next(b);
        std::vector<std::string> ids;
        for (auto i : idx) ids.push_back(dataset.samples[i].stimulus_id);
        if (hooks.on_batch) hooks.on_batch(mods[mi], ids);
        const BatchStats s = train_batch(state, dataset, stage, mods[mi], idx, noise[mi]);
        if (!std::isfinite(s.loss.total)) {
          unfreeze_all(state.model);
          abort_non_finite(state, diagnostics, stage, state.epoch, mods[mi], ids, s.loss);
        }
        add_into(sums[mi], s.loss, static_cast<double>(s.batch_size));
        seen[mi] += s.batch_size;
        ++counts[mi];
        ++summary.batches_per_modality[mods[mi]];
      }
    }
    ++state.epoch;
    const bool validate = stage != 1 && stage != 3 && cfg.val_interval > 0 &&
                          (state.epoch % cfg.val_interval == 0 || state.epoch == cfg.epochs);
    for (std::size_t mi = 0; mi < mods.size(); ++mi) {
      LossBreakdown mean;
      add_into(mean, sums[mi], 1.0 / static_cast<double>(seen[mi]));
      nlohmann::json rec{{"epoch", state.epoch},
                         {"stage", stage == 0 ? std::string("joint") : fmt::format("stage{}", stage)},
                         {"modality", mods[mi]},
                         {"batches", counts[mi]},
                         {"loss", breakdown_json(mean)},
                         {"val", validate ? validation_metrics(state, dataset, mods[mi]) : nlohmann::json(nullptr)}};
      if (hooks.on_record) hooks.on_record(rec);
      summary.records.push_back(std::move(rec));
    }
    if (hooks.checkpoint_dir && cfg.checkpoint_interval > 0 && state.epoch % cfg.checkpoint_interval == 0 &&
        state.epoch < cfg.epochs) {
      unfreeze_all(state.model);
      state.save(*hooks.checkpoint_dir);
      set_trainable(state.model, stage, cfg.loss.beta > 0.0);
    }
  }
  unfreeze_all(state.model);
  return summary;
}

void merge(TrainSummary& into, TrainSummary&& from) {
  for (auto& r : from.records) into.records.push_back(std::move(r));
  for (const auto& [m, n] : from.batches_per_modality) into.batches_per_modality[m] += n;
}

}  // namespace

TrainMode parse_train_mode(const std::string& s) {
  if (s == "joint") return TrainMode::kJoint;
  if (s == "staged") return TrainMode::kStaged;
  throw ConfigError(fmt::format("unknown training mode '{}' (expected joint or staged)", s));
}

const char* to_string(TrainMode m) { return m == TrainMode::kJoint ? "joint" : "staged"; }

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2 for contrastive batches");
  if (!(optimizer.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (optimizer.weight_decay < 0.0) throw ConfigError("weight_decay must be nonnegative");
  if (checkpoint_interval < 0) throw ConfigError("checkpoint_interval must be nonnegative");
  if (cycles_per_epoch < 0) throw ConfigError("cycles_per_epoch must be nonnegative");
  if (val_interval < 0) throw ConfigError("val_interval must be nonnegative");
  if (val_trials < 1) throw ConfigError("val_trials must be >= 1");
  std::set<std::string> unique(modalities.begin(), modalities.end());
  if (unique.size() != modalities.size()) throw ConfigError("duplicate modality in training list");
  loss.validate();
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.optimizer.learning_rate},
          {"weight_decay", c.optimizer.weight_decay},
          {"adam_beta1", c.optimizer.beta1},
          {"adam_beta2", c.optimizer.beta2},
          {"adam_eps", c.optimizer.eps},
          {"stage", to_string(c.mode)},
          {"modalities", c.modalities},
          {"seed", c.seed},
          {"checkpoint_interval", c.checkpoint_interval},
          {"tau", c.loss.tau},
          {"contrastive_weight", c.loss.contrastive_weight},
          {"alpha", c.loss.alpha},
          {"beta", c.loss.beta},
          {"lambda_p", c.loss.lambda_p},
          {"cycles_per_epoch", c.cycles_per_epoch},
          {"val_interval", c.val_interval},
          {"val_trials", c.val_trials}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  static const std::set<std::string> known{"epochs",     "batch_size", "learning_rate",      "weight_decay",
                                           "adam_beta1", "adam_beta2", "adam_eps",           "stage",
                                           "modalities", "seed",       "checkpoint_interval", "tau",
                                           "contrastive_weight", "alpha", "beta",            "lambda_p",
                                           "cycles_per_epoch",   "val_interval", "val_trials"};
  if (!j.is_object()) throw ConfigError("training config must be an object");
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigError(fmt::format("unknown training config key '{}'", k));
  }
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.optimizer.learning_rate = j.value("learning_rate", c.optimizer.learning_rate);
    c.optimizer.weight_decay = j.value("weight_decay", c.optimizer.weight_decay);
    c.optimizer.beta1 = j.value("adam_beta1", c.optimizer.beta1);
    c.optimizer.beta2 = j.value("adam_beta2", c.optimizer.beta2);
    c.optimizer.eps = j.value("adam_eps", c.optimizer.eps);
    if (j.contains("stage")) c.mode = parse_train_mode(j.at("stage").get<std::string>());
    c.modalities = j.value("modalities", c.modalities);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
    c.loss.tau = j.value("tau", c.loss.tau);
    c.loss.contrastive_weight = j.value("contrastive_weight", c.loss.contrastive_weight);
    c.loss.alpha = j.value("alpha", c.loss.alpha);
    c.loss.beta = j.value("beta", c.loss.beta);
    c.loss.lambda_p = j.value("lambda_p", c.loss.lambda_p);
    c.cycles_per_epoch = j.value("cycles_per_epoch", c.cycles_per_epoch);
    c.val_interval = j.value("val_interval", c.val_interval);
    c.val_trials = j.value("val_trials", c.val_trials);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("invalid training config: {}", e.what()));
  }
  c.validate();
  return c;
}

TrainingState::TrainingState(AlignmentModel m, TrainConfig c)
    : model(std::move(m)), optimizer(c.optimizer), config(std::move(c)) {
  config.validate();
}

void TrainingState::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  ArrayFile bin;
  model.save_parameters(bin);
  optimizer.save_state(bin);
  bin.save(dir / "checkpoint.bin");
  nlohmann::json j{{"version", 1},
                   {"model", to_json(model.config())},
                   {"train", to_json(config)},
                   {"epoch", epoch},
                   {"stage", stage},
                   {"stages_completed", stages_completed},
                   {"rng", {{"scheme", "counter"}, {"seed", config.seed}, {"stage", stage}, {"epoch", epoch}}},
                   {"prior_fitted", model.has_prior() && model.prior().fitted()},
                   {"optimizer_steps", optimizer.steps()},
                   {"array_file", "checkpoint.bin"}};
  std::ofstream out(dir / "checkpoint.json");
  if (!out) throw ConfigError(fmt::format("cannot write checkpoint in {}", dir.string()));
  out << j.dump(2) << "\n";
}

TrainingState TrainingState::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "checkpoint.json");
  if (!in) throw ConfigError(fmt::format("no checkpoint.json in {}", dir.string()));
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("corrupt checkpoint.json: {}", e.what()));
  }
  if (j.value("version", 0) != 1) throw FormatError("unsupported checkpoint version");
  TrainingState s(AlignmentModel(model_config_from_json(j.at("model"))), train_config_from_json(j.at("train")));
  const ArrayFile bin = ArrayFile::load(dir / j.value("array_file", std::string("checkpoint.bin")));
  s.model.load_parameters(bin);
  s.optimizer.load_state(bin);
  s.epoch = j.at("epoch").get<int>();
  s.stage = j.at("stage").get<int>();
  s.stages_completed = j.at("stages_completed").get<std::vector<int>>();
  if (j.value("prior_fitted", false)) {
    if (!s.model.has_prior()) throw IntegrityError("checkpoint marks a prior fitted but has none");
    s.model.prior().mark_fitted();
  }
  return s;
}

void verify_zero_shot_split(const PairedDataset& dataset) {
  std::set<std::string> train;
  std::set<std::string> test;
  for (const auto& [stim, split] : dataset.splits) {
    (split == Split::kTrain ? train : test).insert(dataset.concept_of(stim));
  }
  if (train.empty()) throw IntegrityError("dataset has no training concepts");
  for (const auto& c : test) {
    if (train.count(c)) throw IntegrityError(fmt::format("concept '{}' is in both train and test splits", c));
  }
}

TrainSummary run_stage(TrainingState& state, const PairedDataset& dataset, int stage, const TrainHooks& hooks) {
  if (stage < 1 || stage > kStageCount) throw ConfigError(fmt::format("no training stage {}", stage));
  const auto done = [&](int s) {
    return std::find(state.stages_completed.begin(), state.stages_completed.end(), s) != state.stages_completed.end();
  };
  // A finished joint run stands in for stages 1 and 2.
  const bool backbone_trained = done(kJointStage) || (done(1) && done(2));
  if (stage == 3 && !backbone_trained) {
    throw OrderingError(fmt::format("stage 3 requires stage {} to be completed first", done(1) ? 2 : 1));
  }
  if (stage == 2 && !done(1)) throw OrderingError("stage 2 requires stage 1 to be completed first");
  if (done(stage)) throw OrderingError(fmt::format("stage {} already completed", stage));
  if (state.stage != stage) {
    state.stage = stage;
    state.epoch = 0;
  }
  verify_zero_shot_split(dataset);
  TrainSummary summary = run_epochs(state, dataset, stage, hooks, hooks.diagnostics_dir);
  state.stages_completed.push_back(stage);
  if (stage == 3) state.model.prior().mark_fitted();
  return summary;
}

TrainSummary train(TrainingState& state, const PairedDataset& dataset, const TrainHooks& hooks) {
  verify_zero_shot_split(dataset);
  if (state.config.mode == TrainMode::kJoint) {
    TrainSummary s = run_epochs(state, dataset, kJointStage, hooks, hooks.diagnostics_dir);
    if (std::find(state.stages_completed.begin(), state.stages_completed.end(), kJointStage) ==
        state.stages_completed.end()) {
      state.stages_completed.push_back(kJointStage);
    }
    if (state.config.loss.beta > 0.0) state.model.prior().mark_fitted();
    return s;
  }
  TrainSummary all;
  const int last = state.model.has_prior() ? kStageCount : 2;
  for (int stage = 1; stage <= last; ++stage) {
    if (std::find(state.stages_completed.begin(), state.stages_completed.end(), stage) != state.stages_completed.end()) {
      continue;
    }
    merge(all, run_stage(state, dataset, stage, hooks));
  }
  return all;
}

double mean_softclip(const AlignmentModel& model, const PairedDataset& dataset,
                     const std::vector<std::string>& modalities, Split split, double tau) {
  double total = 0.0;
  int n = 0;
  for (const auto& m : modalities) {
    const EmbeddedSet set = embed_samples(model, dataset, m, split);
    if (set.z.rows() < 2) continue;
    total += softclip_loss(set.z, dataset.embedding_matrix(set.stimulus_ids), tau) / static_cast<double>(set.z.rows());
    ++n;
  }
  if (n == 0) throw ConfigError("mean_softclip: no modality has at least two samples");
  return total / n;
}

}  // namespace neuroalign
