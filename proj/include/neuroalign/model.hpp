#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "neuroalign/array_io.hpp"
#include "neuroalign/datamodel.hpp"
#include "neuroalign/encoder.hpp"
#include "neuroalign/prior.hpp"
#include "neuroalign/projector.hpp"

namespace neuroalign {

struct ModelConfig {
  std::vector<EncoderConfig> encoders;  // one tower per modality
  MoEConfig projector;
  std::optional<PriorConfig> prior;
  std::uint64_t seed = 0;

  void validate() const;
};

// Architecture knobs shared by every tower when deriving a ModelConfig from a
// dataset's modality list.
struct ArchitectureOptions {
  int n_granularities = 3;
  int model_dim = 32;
  int channels = 8;
  int heads = 4;
  int conv_kernel = 3;
  int conv_channels = 8;
  int head_hidden = 64;
  int static_steps = 8;
  bool subject_embedding = false;
  InterGranularityMode inter_mode = InterGranularityMode::kCrossAttention;
  int experts = 4;
  int expert_hidden = 0;
  int router_hidden = 32;
  RoutingNormalization routing = RoutingNormalization::kSoftmax;
  bool with_prior = false;
  PriorConfig prior;
};

ModelConfig make_model_config(const PairedDataset& dataset, const std::vector<std::string>& modalities,
                              const ArchitectureOptions& options, std::uint64_t seed);

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ArchitectureOptions& options);
ArchitectureOptions architecture_from_json(const nlohmann::json& j, ArchitectureOptions defaults = {});

using NamedParameters = std::vector<std::pair<std::string, ad::Parameter*>>;

// Modality-specific encoder towers feeding one shared MoE projector, plus an
// optional diffusion prior head.
class AlignmentModel {
 public:
  explicit AlignmentModel(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  std::vector<std::string> modalities() const;
  bool has_tower(const std::string& modality) const { return towers_.count(modality) != 0; }
  // Throws ConfigError when no tower is registered for the modality.
  const EncoderTower& tower(const std::string& modality) const;
  EncoderTower& tower(const std::string& modality);
  const MoEProjector& projector() const { return projector_; }
  MoEProjector& projector() { return projector_; }
  bool has_prior() const { return prior_.has_value(); }
  const DiffusionPrior& prior() const;
  DiffusionPrior& prior();

  // Unified embeddings (B x F) for a single-modality batch.
  ad::Var embed(ad::Tape& tape, const std::vector<const NeuralSample*>& batch) const;
  Mat embed(const std::vector<const NeuralSample*>& batch) const;

  void visit(const nn::ParamVisitor& fn);
  void visit(const nn::ConstParamVisitor& fn) const;
  NamedParameters parameters();

  // Parameters are stored as float64 under "param/<name>".
  void save_parameters(ArrayFile& file) const;
  // Throws FormatError on a missing array or a shape mismatch.
  void load_parameters(const ArrayFile& file);

 private:
  ModelConfig config_;
  std::map<std::string, EncoderTower> towers_;
  MoEProjector projector_;
  std::optional<DiffusionPrior> prior_;
};

}  // namespace neuroalign
