#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "neuroalign/datamodel.hpp"
#include "neuroalign/model.hpp"
#include "neuroalign/objectives.hpp"
#include "neuroalign/optim.hpp"

namespace neuroalign {

enum class TrainMode { kJoint, kStaged };

TrainMode parse_train_mode(const std::string& s);
const char* to_string(TrainMode m);

struct TrainConfig {
  int epochs = 50;
  int batch_size = 64;
  AdamWConfig optimizer;
  TrainMode mode = TrainMode::kJoint;
  std::vector<std::string> modalities;  // empty = every modality of the model
  std::uint64_t seed = 0;
  int checkpoint_interval = 0;  // epochs between checkpoints; 0 disables
  LossConfig loss = LossConfig::retrieval();
  int cycles_per_epoch = 0;     // 0 = enough cycles to cover the largest modality once
  int val_interval = 1;         // epochs between validation passes; 0 disables
  int val_trials = 10;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig defaults = {});

// Stages of staged training: 1 encoders, 2 projector, 3 task heads (prior).
inline constexpr int kStageCount = 3;
// Recorded in stages_completed once a joint run finishes; satisfies the
// prerequisites of stage 3.
inline constexpr int kJointStage = 0;

// Everything a run needs to continue exactly where it stopped. Batch order and
// noise draws come from counter-based streams keyed by (seed, stage, epoch),
// so the RNG state is fully described by those counters.
struct TrainingState {
  AlignmentModel model;
  AdamW optimizer;
  TrainConfig config;
  int epoch = 0;  // completed epochs of the current stage (joint: of the run)
  int stage = 0;  // 0 in joint mode, else the stage in progress
  std::vector<int> stages_completed;

  TrainingState(AlignmentModel m, TrainConfig c);

  // Writes checkpoint.json and checkpoint.bin into `dir`.
  void save(const std::filesystem::path& dir) const;
  static TrainingState load(const std::filesystem::path& dir);
};

struct BatchStats {
  LossBreakdown loss;
  std::size_t batch_size = 0;
};

struct TrainHooks {
  // Receives one record per (epoch, modality); see metric_record_to_json.
  std::function<void(const nlohmann::json&)> on_record;
  // Called for every batch with its modality and stimulus ids.
  std::function<void(const std::string&, const std::vector<std::string>&)> on_batch;
  std::optional<std::filesystem::path> checkpoint_dir;
  std::filesystem::path diagnostics_dir = "diagnostics";
};

struct TrainSummary {
  std::vector<nlohmann::json> records;
  std::map<std::string, long long> batches_per_modality;
};

// Throws IntegrityError when a concept appears in both splits or a split is empty.
void verify_zero_shot_split(const PairedDataset& dataset);

// Runs the configured mode to completion from the state's current position.
TrainSummary train(TrainingState& state, const PairedDataset& dataset, const TrainHooks& hooks = {});

// Runs one stage of staged training for config.epochs epochs (resuming a
// partially finished stage). Throws OrderingError when earlier stages are missing.
TrainSummary run_stage(TrainingState& state, const PairedDataset& dataset, int stage, const TrainHooks& hooks = {});

// Mean SoftCLIP of the model on a split, over the given modalities.
double mean_softclip(const AlignmentModel& model, const PairedDataset& dataset,
                     const std::vector<std::string>& modalities, Split split, double tau);

}  // namespace neuroalign
