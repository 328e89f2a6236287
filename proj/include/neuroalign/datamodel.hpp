#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "neuroalign/autodiff.hpp"

namespace neuroalign {

enum class SignalLayout { kTimeResolved, kStatic };

// Shape family of one neural modality. Static modalities (fMRI-like
// activation vectors) have no time axis.
struct ModalityKind {
  std::string name;
  SignalLayout layout = SignalLayout::kTimeResolved;
  int channels = 1;
  int time = 2;  // ignored for static modalities

  static ModalityKind time_resolved(std::string name, int channels, int time);
  static ModalityKind static_features(std::string name, int features);

  bool is_static() const { return layout == SignalLayout::kStatic; }
  // Expected signal matrix shape: C x T, or C x 1 for static inputs.
  Eigen::Index signal_rows() const { return channels; }
  Eigen::Index signal_cols() const { return is_static() ? 1 : time; }
  void validate() const;

  bool operator==(const ModalityKind&) const = default;
};

struct NeuralSample {
  std::string subject_id;
  std::string modality;
  std::string stimulus_id;
  Mat signal;  // float32-representable values

  bool operator==(const NeuralSample& other) const;
};

struct ImageEmbedding {
  std::string stimulus_id;
  std::string concept_id;
  Vec vector;
  bool normalized = true;

  bool operator==(const ImageEmbedding& other) const;
};

enum class Split { kTrain, kTest };

const char* to_string(Split s);
Split parse_split(const std::string& s);

// Paired neural/image samples. Splits are tracked per stimulus, so a stimulus
// can never be both train and test.
class PairedDataset {
 public:
  int embedding_dim = 0;
  std::vector<ModalityKind> modalities;
  std::vector<NeuralSample> samples;
  std::map<std::string, ImageEmbedding> embeddings;
  std::map<std::string, Split> splits;

  // Enforces every invariant; throws IntegrityError / FormatError /
  // ValidationError on violation.
  void validate() const;

  const ModalityKind& modality(const std::string& name) const;
  bool has_modality(const std::string& name) const;
  Split split_of(const std::string& stimulus_id) const;
  const std::string& concept_of(const std::string& stimulus_id) const;

  // Sample indices of `modality` whose stimulus is in `split`, in storage order.
  std::vector<std::size_t> sample_indices(const std::string& modality, std::optional<Split> split = {}) const;
  // Sorted stimulus ids in a split.
  std::vector<std::string> stimuli(Split split) const;
  std::vector<std::string> concepts(std::optional<Split> split = {}) const;
  std::vector<std::string> subjects(const std::string& modality) const;
  // Row-stacked image embeddings for the given stimuli.
  Mat embedding_matrix(const std::vector<std::string>& stimulus_ids) const;

  bool operator==(const PairedDataset&) const = default;
};

struct SyntheticSpec {
  int n_concepts = 50;
  int images_per_concept = 4;
  int subjects_per_modality = 2;
  std::vector<ModalityKind> modalities;
  double noise_sigma = 0.1;
  std::uint64_t seed = 0;
  int embedding_dim = 16;
  // Image vector = normalize(concept_mean + spread * xi), xi ~ N(0, I/F).
  double concept_spread = 0.8;
  double min_gain = 0.6;
  double max_gain = 1.4;

  void validate() const;
};

PairedDataset generate_synthetic(const SyntheticSpec& spec);

nlohmann::json to_json(const ModalityKind& m);
ModalityKind modality_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SyntheticSpec& spec);
// Rejects unknown keys; throws ValidationError on any invalid field.
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j);

// Writes <dir>/manifest.json and <dir>/arrays.bin.
void save_dataset(const PairedDataset& dataset, const std::filesystem::path& dir);
PairedDataset load_dataset(const std::filesystem::path& manifest_path);

// Assigns whole concepts to test so no test concept appears in train.
PairedDataset split_zero_shot(const PairedDataset& dataset, double test_fraction, std::uint64_t seed);

}  // namespace neuroalign
